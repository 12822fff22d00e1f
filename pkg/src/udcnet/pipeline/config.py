"""Run configuration, stored as one JSON document."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..data.phantom import PhantomConfig
from ..net import ConfigError, NetConfig
from ..perturb import PerturbConfig
from ..transform import TransformConfig
from ..uncertainty import TAU_M, TAU_S

MASK_MODES = ("dual", "confidence", "consensus", "none")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    decay: float = 0.95     # multiplicative, once per epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class Variant:
    """Which consistency terms are active during phase 2."""
    name: str = "udc"
    ic: bool = True
    fc: bool = True
    mask: str = "dual"
    stop_grad_p: bool = False
    ic_on_labeled: bool = False
    fc_on_labeled: bool = False
    binary_entropy: bool = False
    alpha_max: float = 1.0
    beta_max: float = 1.0

    @property
    def supervised_only(self) -> bool:
        return not (self.ic or self.fc)


VARIANTS = {
    "supervised": Variant("supervised", ic=False, fc=False),
    "ic_only": Variant("ic_only", ic=True, fc=False),
    "fc_only": Variant("fc_only", ic=False, fc=True, mask="dual"),
    "dual_unmasked": Variant("dual_unmasked", ic=True, fc=True, mask="none"),
    "udc": Variant("udc", ic=True, fc=True, mask="dual"),
}


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig = NetConfig(patch_shape=16)
    phantom: PhantomConfig = PhantomConfig()
    counts: dict = field(default_factory=lambda: {"labeled_train": 10, "unlabeled_train": 50,
                                                  "val": 3, "test": 10})
    data_seed: int = 0
    manifest: str | None = None
    optimizer: AdamConfig = AdamConfig()
    labeled_per_step: int = 1
    unlabeled_per_step: int = 1
    foreground_bias: float = 0.5
    steps_per_epoch: int = 50
    pretrain_epochs: int = 5
    max_finetune_epochs: int = 12
    patience: int = 4
    min_improvement: float = 0.1
    ramp_fraction: float = 0.4
    ramp_length: int | None = None      # steps; default ramp_fraction * planned finetune steps
    tau_m: float = TAU_M
    tau_s: float = TAU_S
    variant: Variant = Variant()
    perturb: PerturbConfig = PerturbConfig()
    transform: TransformConfig = TransformConfig()
    infer_stride: int = 8
    dtype: str = "float32"
    deterministic: bool = True
    seeds: tuple = (0, 1, 2)

    def planned_finetune_steps(self) -> int:
        return self.max_finetune_epochs * self.steps_per_epoch

    def effective_ramp_length(self) -> float:
        if self.ramp_length is not None:
            return float(self.ramp_length)
        return max(1.0, self.ramp_fraction * self.planned_finetune_steps())

    def validate(self) -> "RunConfig":
        self.net.validate()
        if self.variant.mask not in MASK_MODES:
            raise ConfigError(f"mask mode must be one of {MASK_MODES}, got {self.variant.mask!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if min(self.labeled_per_step, self.unlabeled_per_step) < 1:
            raise ConfigError("need at least one labeled and one unlabeled patch per step")
        if self.steps_per_epoch < 1 or self.pretrain_epochs < 0 or self.max_finetune_epochs < 0:
            raise ConfigError("epoch counts must be non-negative and steps_per_epoch positive")
        if self.infer_stride < 1 or self.infer_stride > self.net.patch_shape:
            raise ConfigError("infer_stride must lie in [1, patch_shape]")
        if self.tau_m < 0 or self.tau_s < 0:
            raise ConfigError("uncertainty thresholds must be non-negative")
        return self

    def with_variant(self, variant: Variant | str) -> "RunConfig":
        if isinstance(variant, str):
            variant = VARIANTS[variant]
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_NESTED = {"net": NetConfig, "phantom": PhantomConfig, "optimizer": AdamConfig,
           "variant": Variant, "perturb": PerturbConfig, "transform": TransformConfig}


def _build(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    for key, cls in _NESTED.items():
        if key in d:
            d[key] = _build(cls, d[key])
    if "counts" in d:
        d["counts"] = dict(d["counts"])
    return _build(RunConfig, d).validate()


def load_config(path) -> RunConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_json() + "\n")
