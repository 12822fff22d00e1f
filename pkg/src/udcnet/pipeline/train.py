"""Two-phase training: supervised pretraining, then dual-consistency finetuning.

A finetune step stacks [labeled, unlabeled, T(unlabeled)] into one batch for
the main path (instance norm keeps samples independent), perturbs the
bottleneck of the labeled+unlabeled rows once per auxiliary decoder, derives
the two uncertainty maps and the reliable set from detached predictions, and
takes one Adam step on L_S + alpha L_IC + beta L_UFC.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import losses as L
from .. import transform as tf
from ..data.patches import random_patch, sliding_window_predict
from ..net import (MAIN, Network, aux_prefix, build_network, forward_aux, forward_main,
                   load_checkpoint, network_from_state, save_checkpoint)
from ..perturb import KINDS, PerturbContext, Perturbation, PerturbationKind, build_perturbation
from ..tensor import Tensor, gradients, no_grad
from ..uncertainty import quantify, reliable_mask
from ..metrics import dice
from .config import RunConfig, Variant, config_from_dict
from .dataset import Case, Dataset
from .optim import Adam

log = logging.getLogger(__name__)

# independent rng streams, so switching a term off never shifts another term's draws
STREAM_DATA, STREAM_TRANSFORM, STREAM_PERTURB = 0, 1, 2


def make_rngs(seed: int) -> dict[str, np.random.Generator]:
    return {name: np.random.default_rng([seed, 100 + i])
            for i, name in enumerate(("data", "transform", "perturb"))}


def _np_dtype(cfg: RunConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32


# --- one finetune objective -------------------------------------------------

@dataclass
class StepPlan:
    """Every random or data-dependent constant of one finetune evaluation.

    Recording these on the first evaluation and passing the plan back in makes
    the objective a smooth function of the parameters (used by grad checks).
    """
    transform: tf.Transform | None = None
    perturbations: dict[int, Perturbation] = field(default_factory=dict)
    omega: np.ndarray | None = None


@dataclass
class StepTerms:
    total: Tensor
    l_s: Tensor
    l_ic: Tensor | None
    l_ufc: Tensor | None
    l_fc: Tensor | None
    alpha: float | None
    beta: float | None
    omega_fraction: float | None
    flags: list[str]
    plan: StepPlan
    u_m: np.ndarray | None = None
    u_s: np.ndarray | None = None


def _omega(mode: str, u_m, u_s, tau_m: float, tau_s: float) -> np.ndarray:
    if mode == "dual":
        return reliable_mask(u_m, u_s, tau_m, tau_s).omega
    if mode == "confidence":
        return np.asarray(u_m) < tau_m
    if mode == "consensus":
        return np.asarray(u_s) < tau_s
    return np.ones(np.shape(u_m), dtype=bool)


def udc_objective(net: Network, xl: np.ndarray, yl: np.ndarray, xu: np.ndarray,
                  cfg: RunConfig, alpha: float | None, beta: float | None,
                  rngs: dict[str, np.random.Generator] | None = None,
                  plan: StepPlan | None = None) -> StepTerms:
    """Build the phase-2 loss graph. ``xl``/``xu`` are (N, 1, P, P, P) arrays.

    Pass either ``rngs`` (fresh draws, recorded into the returned plan) or a
    previously returned ``plan`` (exact replay).
    """
    v = cfg.variant
    replay = plan is not None
    plan = plan if replay else StepPlan()
    flags: list[str] = []
    dtype = _np_dtype(cfg)
    nl, nu = xl.shape[0], xu.shape[0]
    nb = nl + nu
    rows = [xl, xu]
    if v.ic:
        if not replay:
            plan.transform = tf.sample_transform(rngs["transform"], cfg.transform)
        t = plan.transform
        if v.ic_on_labeled:
            rows.append(tf.apply(t, xl))
        rows.append(tf.apply(t, xu))
    x = np.concatenate(rows, axis=0).astype(dtype)
    p, feats = forward_main(net, x)
    l_s = L.supervised_loss(p[:nl], yl)

    l_ic = None
    if v.ic:
        src = p[:nb] if v.ic_on_labeled else p[nl:nb]
        l_ic = L.image_consistency_loss(src, p[nb:], plan.transform)

    l_ufc = l_fc = None
    omega_fraction = None
    u_m = u_s = None
    if v.fc:
        lo = 0 if v.fc_on_labeled else nl
        z = feats.z[lo:nb]
        skips = tuple(s[lo:nb] for s in feats.skips)
        p_b = p[lo:nb]
        p_ref = np.array(p_b.data)
        q_list = []
        for k in range(1, net.cfg.K + 1):
            kind = KINDS[k - 1]
            if not replay:
                ctx = PerturbContext(p_ref, rngs["perturb"], cfg.perturb,
                                     decoder_fn=_vat_decoder(net, k, skips)
                                     if kind is PerturbationKind.INTERMEDIATE_VAT else None)
                plan.perturbations[k] = build_perturbation(kind, z, ctx)
            pert = plan.perturbations[k]
            if not pert.active:
                flags.append(f"inactive:{kind.value}")
                continue
            q_list.append(forward_aux(net, k, pert.apply(z), skips))
        if q_list:
            unc = quantify(p_ref, [np.asarray(q.data) for q in q_list], v.binary_entropy)
            u_m, u_s = unc.u_m, unc.u_s
            if not replay:
                plan.omega = _omega(v.mask, u_m, u_s, cfg.tau_m, cfg.tau_s)
            l_fc = L.feature_consistency_loss(p_b, q_list, v.stop_grad_p)
            l_ufc = L.masked_feature_consistency_loss(p_b, q_list, plan.omega, v.stop_grad_p)
            omega_fraction = float(plan.omega.mean())
            if not plan.omega.any():
                flags.append("empty_omega")
        else:
            flags.append("no_active_decoder")

    total = L.total_loss(l_s, l_ic, l_ufc, alpha or 0.0, beta or 0.0)
    return StepTerms(total, l_s, l_ic, l_ufc, l_fc, alpha, beta, omega_fraction, flags,
                     plan, u_m, u_s)


def _vat_decoder(net: Network, k: int, skips) -> Callable[[Tensor], Tensor]:
    """Decoder k on frozen float64 skips, for the VAT power iteration."""
    frozen = tuple(Tensor(np.asarray(s.data, dtype=np.float64), dtype=np.float64) for s in skips)
    prefix = aux_prefix(k)
    return lambda zz: net.decode(prefix, zz, frozen)


# --- trainer ------------------------------------------------------------------

@dataclass
class ValRecord:
    epoch: int
    dsc: float


class Trainer:
    """Holds the network, optimizer, rng streams and counters of one run."""

    def __init__(self, cfg: RunConfig, data: Dataset, seed: int, log_path=None,
                 echo: Callable[[str], None] | None = None):
        self.cfg = cfg.validate()
        self.data = data
        self.seed = seed
        self.net = build_network(cfg.net, seed, dtype=_np_dtype(cfg))
        self.adam = Adam(cfg.optimizer)
        self.rngs = make_rngs(seed)
        self.epoch = 0            # global epoch, drives the learning-rate decay
        self.step = 0             # global step
        self.phase = 1
        self.phase2_step = 0
        self.reports: list[L.LossReport] = []
        self.val_history: list[dict] = []
        self.best: dict | None = None
        self.log_path = Path(log_path) if log_path else None
        self.echo = echo
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")
            self._write({"header": {"config": cfg.to_dict(), "seed": seed}})
        self._check_data()

    def _check_data(self):
        p = self.cfg.net.patch_shape
        for split in ("labeled_train", "unlabeled_train", "val"):
            for case in self.data[split]:
                if min(case.image.shape) < p:
                    raise ValueError(f"{case.case_id}: volume {case.image.shape} smaller than "
                                     f"patch {p}; pad it first")

    def _write(self, record: dict | str):
        line = record if isinstance(record, str) else json.dumps(record)
        if self.log_path:
            with open(self.log_path, "a") as fh:
                fh.write(line + "\n")
        if self.echo:
            self.echo(line)

    # batches
    def _sample(self, split: str, count: int, bias: float):
        rng = self.rngs["data"]
        cases = self.data[split]
        xs, ys = [], []
        for _ in range(count):
            case = cases[int(rng.integers(len(cases)))]
            x, y = random_patch(rng, case.image, case.label, self.cfg.net.patch_shape, bias)
            xs.append(x[None])
            ys.append(None if y is None else y[None])
        x = np.stack(xs).astype(_np_dtype(self.cfg))
        y = None if ys[0] is None else np.stack(ys).astype(_np_dtype(self.cfg))
        return x, y

    def labeled_batch(self):
        return self._sample("labeled_train", self.cfg.labeled_per_step, self.cfg.foreground_bias)

    def unlabeled_batch(self):
        return self._sample("unlabeled_train", self.cfg.unlabeled_per_step, 0.0)[0]

    def _update(self, total: Tensor):
        grads = gradients(total, self.net.params)
        self.adam.step(self.net.params, grads, self.epoch)

    # steps
    def pretrain_step(self) -> L.LossReport:
        xl, yl = self.labeled_batch()
        p, _ = forward_main(self.net, xl)
        l_s = L.supervised_loss(p, yl)
        self._update(l_s)
        self.step += 1
        rep = L.LossReport(step=self.step, phase=1, L_S=l_s.item(), total=l_s.item())
        self.reports.append(rep)
        self._write(rep.to_json())
        return rep

    def weights(self) -> tuple[float | None, float | None]:
        v = self.cfg.variant
        w = L.ramp_weight(self.phase2_step, self.cfg.effective_ramp_length())
        return (v.alpha_max * w if v.ic else None), (v.beta_max * w if v.fc else None)

    def finetune_step(self) -> L.LossReport:
        if self.phase != 2:
            raise RuntimeError("finetune_step needs phase 2 (call start_phase2 first)")
        xl, yl = self.labeled_batch()
        xu = self.unlabeled_batch()
        alpha, beta = self.weights()
        terms = udc_objective(self.net, xl, yl, xu, self.cfg, alpha, beta, rngs=self.rngs)
        self._update(terms.total)
        self.step += 1
        self.phase2_step += 1
        rep = L.LossReport(
            step=self.step, phase=2, L_S=terms.l_s.item(), total=terms.total.item(),
            L_IC=None if terms.l_ic is None else terms.l_ic.item(),
            L_FC_unmasked=None if terms.l_fc is None else terms.l_fc.item(),
            L_UFC=None if terms.l_ufc is None else terms.l_ufc.item(),
            alpha=alpha, beta=beta, omega_fraction=terms.omega_fraction, flags=terms.flags)
        self.reports.append(rep)
        self._write(rep.to_json())
        return rep

    def start_phase2(self) -> None:
        if self.phase == 2:
            return
        self.phase = 2
        self.phase2_step = 0
        if self.cfg.variant.fc:
            self.net.add_aux_decoders()
        self.best = None

    # validation
    def predict_volume(self, image: np.ndarray) -> np.ndarray:
        return infer_probability(self.net, image, self.cfg.net.patch_shape, self.cfg.infer_stride)

    def validate(self) -> float:
        cases = self.data.require_labels("val")
        scores = [dice(self.predict_volume(c.image) > 0.5, c.label) for c in cases]
        return float(np.mean(scores))

    def _snapshot(self) -> dict:
        return {"params": {n: t.data.copy() for n, t in self.net.params.items()},
                "adam": copy.deepcopy((self.adam.m, self.adam.v, self.adam.t))}

    def _restore(self, snap: dict) -> None:
        for name, value in snap["params"].items():
            self.net.params[name].assign(value)
        self.adam.m, self.adam.v, self.adam.t = copy.deepcopy(snap["adam"])

    def end_epoch(self) -> float:
        dsc = self.validate()
        record = {"event": "val", "phase": self.phase, "epoch": self.epoch, "step": self.step,
                  "val_dsc": dsc}
        self.val_history.append(record)
        self._write(record)
        self.epoch += 1
        return dsc

    def run_phase1(self) -> None:
        """Supervised pretraining for a fixed number of epochs; keep the best epoch."""
        best = None
        for _ in range(self.cfg.pretrain_epochs):
            for _ in range(self.cfg.steps_per_epoch):
                self.pretrain_step()
            dsc = self.end_epoch()
            if best is None or dsc > best[0]:
                best = (dsc, self.epoch - 1, self._snapshot())
        if best is not None:
            self._restore(best[2])
            self._write({"event": "phase1_best", "epoch": best[1], "val_dsc": best[0]})

    def run_phase2(self) -> dict:
        """Finetune with early stopping on validation DSC; restores the best epoch."""
        self.start_phase2()
        best = None
        stale = 0
        for _ in range(self.cfg.max_finetune_epochs):
            for _ in range(self.cfg.steps_per_epoch):
                self.finetune_step()
            dsc = self.end_epoch()
            if best is None or dsc > best["val_dsc"] + self.cfg.min_improvement:
                best = {"epoch": self.epoch - 1, "val_dsc": dsc, "snap": self._snapshot()}
                stale = 0
            else:
                stale += 1
                if stale >= self.cfg.patience:
                    self._write({"event": "early_stop", "epoch": self.epoch - 1})
                    break
        if best is not None:
            self._restore(best["snap"])
            self.best = {"epoch": best["epoch"], "val_dsc": best["val_dsc"]}
            self._write({"event": "phase2_best", **self.best})
        return self.best or {}

    def fit(self) -> dict:
        self.run_phase1()
        return self.run_phase2()

    # checkpoints
    def save(self, path) -> None:
        """Parameters, Adam moments, counters and rng states (exact resume)."""
        moments, counts = self.adam.state()
        tensors = {**{n: t.data for n, t in self.net.params.items()}, **moments}
        meta = {"epoch": self.epoch, "phase": self.phase, "phase2_step": self.phase2_step,
                "adam_t": counts, "best": self.best,
                "rng": {k: r.bit_generator.state for k, r in self.rngs.items()}}
        save_checkpoint(path, tensors, {"run": self.cfg.to_dict(), "net": self.cfg.to_dict()["net"],
                                        "seed": self.seed}, self.step, meta)

    @classmethod
    def resume(cls, path, data: Dataset, log_path=None, variant: Variant | None = None,
               echo=None) -> "Trainer":
        """Continue a saved run; ``variant`` swaps the phase-2 objective (shared pretraining)."""
        tensors, config, step, meta = load_checkpoint(path)
        cfg = config_from_dict(config["run"])
        if variant is not None:
            cfg = cfg.with_variant(variant)
        tr = cls(cfg, data, config["seed"], log_path=log_path, echo=echo)
        tr.net = network_from_state(cfg.net, tensors, config["seed"])
        tr.adam.load(tensors, meta["adam_t"])
        tr.step, tr.epoch = step, meta["epoch"]
        tr.phase, tr.phase2_step = meta["phase"], meta["phase2_step"]
        tr.best = meta["best"]
        for k, state in meta["rng"].items():
            tr.rngs[k].bit_generator.state = state
        return tr


def infer_probability(net: Network, image: np.ndarray, patch: int, stride: int) -> np.ndarray:
    """Sliding-window main-decoder probabilities, overlap-averaged."""
    dtype = net.params[f"{MAIN}.head.w"].dtype

    def predict(batch):
        with no_grad():
            p, _ = forward_main(net, batch[:, None].astype(dtype))
        return np.asarray(p.data)[:, 0]

    return sliding_window_predict(np.asarray(image), patch, stride, predict)
