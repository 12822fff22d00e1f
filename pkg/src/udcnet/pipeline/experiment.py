"""Ablation over consistency variants with pretraining shared per seed.

For each seed one supervised pretraining run is checkpointed; every variant
then resumes from that checkpoint (same weights, optimizer moments and rng
states) and runs the phase-2 protocol with its own objective. The
supervised variant continues on L_S alone under the same protocol.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from ..metrics import Aggregate
from .config import VARIANTS, RunConfig
from .dataset import prepare_dataset
from .evaluate import evaluate
from .train import Trainer

ABLATION_VARIANTS = ("supervised", "ic_only", "fc_only", "dual_unmasked", "udc")


@dataclass
class AblationResult:
    variants: tuple[str, ...]
    seeds: tuple[int, ...]
    test: dict = field(default_factory=dict)       # (variant, seed) -> Aggregate
    val: dict = field(default_factory=dict)        # (variant, seed) -> best val DSC
    logs: dict = field(default_factory=dict)       # (variant, seed) -> log path
    seconds: float = 0.0

    def mean_dsc(self, variant: str) -> float:
        return Aggregate.over_seeds([self.test[(variant, s)] for s in self.seeds]).dsc[0]

    def seed_dsc(self, variant: str, seed: int) -> float:
        return self.test[(variant, seed)].dsc[0]

    def table(self) -> list[str]:
        lines = []
        for v in self.variants:
            agg = Aggregate.over_seeds([self.test[(v, s)] for s in self.seeds])
            per_seed = " ".join(f"{self.seed_dsc(v, s):.2f}" for s in self.seeds)
            lines.append(agg.line(v) + f"\tper-seed DSC {per_seed}")
        return lines

    def to_dict(self) -> dict:
        return {"variants": list(self.variants), "seeds": list(self.seeds),
                "seconds": self.seconds,
                "test": {f"{v}/{s}": {"dsc": a.dsc, "jaccard": a.jaccard, "asd": a.asd,
                                      "asd_missing": a.asd_missing}
                         for (v, s), a in self.test.items()},
                "val": {f"{v}/{s}": d for (v, s), d in self.val.items()}}


def ordering_checks(res: AblationResult, margin: float = 1.0) -> dict[str, bool]:
    """The qualitative ordering of the component ablation."""
    sup = res.mean_dsc("supervised")
    wins = sum(res.seed_dsc("udc", s) >= res.seed_dsc("dual_unmasked", s) for s in res.seeds)
    return {
        "supervised < ic_only": sup < res.mean_dsc("ic_only"),
        "supervised < fc_only": sup < res.mean_dsc("fc_only"),
        f"supervised + {margin:g} <= udc": sup + margin <= res.mean_dsc("udc"),
        "udc >= dual_unmasked in >= 2 seeds": wins >= min(2, len(res.seeds)),
    }


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_ablation(cfg: RunConfig, workdir, variants: Sequence[str] = ABLATION_VARIANTS,
                 seeds: Sequence[int] | None = None,
                 echo: Callable[[str], None] | None = None) -> AblationResult:
    start = time.perf_counter()
    workdir = Path(workdir)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    data = prepare_dataset(cfg, workdir)
    res = AblationResult(tuple(variants), seeds)
    for seed in seeds:
        sdir = workdir / f"seed{seed}"
        sdir.mkdir(parents=True, exist_ok=True)
        pre = Trainer(cfg.with_variant("supervised"), data, seed, log_path=sdir / "pretrain.jsonl")
        pre.run_phase1()
        ckpt = sdir / "pretrain.ckpt"
        pre.save(ckpt)
        for name in variants:
            log_path = sdir / f"{name}.jsonl"
            tr = Trainer.resume(ckpt, data, log_path=log_path, variant=VARIANTS[name])
            tr.run_phase2()
            tr.save(sdir / f"{name}.ckpt")
            reports, agg = evaluate(tr.net, data.require_labels("test"), cfg.infer_stride)
            with open(log_path, "a") as fh:
                for case, r in zip(data["test"], reports):
                    fh.write(json.dumps({"event": "test", "case": case.case_id, "dsc": r.dsc,
                                         "jaccard": r.jaccard, "asd": r.asd}) + "\n")
            res.test[(name, seed)] = agg
            res.val[(name, seed)] = (tr.best or {}).get("val_dsc")
            res.logs[(name, seed)] = log_path
            if echo:
                echo(f"seed {seed} {name}: test {agg.line(name)} (val {res.val[(name, seed)]:.2f}, "
                     f"{time.perf_counter() - start:.0f}s)")
    res.seconds = time.perf_counter() - start
    (workdir / "ablation.json").write_text(json.dumps(res.to_dict(), indent=2))
    return res
