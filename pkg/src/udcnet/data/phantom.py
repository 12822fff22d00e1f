"""Synthetic chest-CT-like phantoms with lesions whose ground truth is known exactly.

Each lesion is a union of jittered ellipsoids whose implicit function is
warped by smooth noise, giving irregular contours. The label is the exact
indicator ``f <= 1`` of that region; the image shows the lesion through a
soft edge, on top of textured parenchyma, bright vessel-like distractors,
a smooth bias field and white noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, special

from .manifest import Entry, Manifest
from .volume_io import write_volume


@dataclass(frozen=True)
class PhantomConfig:
    extent: int = 32
    lesion_count: tuple[int, int] = (1, 3)
    lobes: tuple[int, int] = (1, 3)
    radius: tuple[float, float] = (2.5, 6.0)
    boundary_warp: float = 0.35
    foreground_fraction: tuple[float, float] = (0.004, 0.12)
    background: float = -0.7
    texture: float = 0.08
    lesion_contrast: tuple[float, float] = (0.6, 1.0)
    edge_softness: float = 0.12
    vessels: tuple[int, int] = (2, 5)
    vessel_contrast: float = 0.7
    noise_sigma: tuple[float, float] = (0.05, 0.12)
    bias_amplitude: float = 0.15

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field / (field.std() + 1e-12)


def _grid(n: int):
    ax = np.arange(n, dtype=np.float64)
    return np.meshgrid(ax, ax, ax, indexing="ij")


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def lesion_field(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Implicit function of the lesion union: the lesion is ``field <= 1``."""
    n = cfg.extent
    coords = np.stack(_grid(n), axis=-1)
    field = np.full((n, n, n), np.inf)
    margin = cfg.radius[1] * 0.6
    for _ in range(int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))):
        centre = rng.uniform(margin, n - 1 - margin, size=3)
        for _ in range(int(rng.integers(cfg.lobes[0], cfg.lobes[1] + 1))):
            c = centre + rng.normal(0, cfg.radius[0], size=3)
            radii = rng.uniform(*cfg.radius, size=3)
            rot = _random_rotation(rng)
            local = (coords - c) @ rot
            f = ((local / radii) ** 2).sum(axis=-1)
            field = np.minimum(field, f)
    warp = 1.0 + cfg.boundary_warp * _smooth_noise(rng, (n, n, n), 2.0)
    return field * np.clip(warp, 0.3, None)


def generate_case(cfg: PhantomConfig, rng: np.random.Generator,
                  max_tries: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """One (image float32, label uint8) pair with foreground fraction in range."""
    n = cfg.extent
    lo, hi = cfg.foreground_fraction
    for _ in range(max_tries):
        field = lesion_field(cfg, rng)
        label = field <= 1.0
        if lo <= label.mean() <= hi:
            break
    else:
        raise RuntimeError("could not draw a lesion inside the foreground-fraction range")
    image = cfg.background + cfg.texture * _smooth_noise(rng, (n, n, n), 1.5)
    x, y, z = _grid(n)
    for _ in range(int(rng.integers(cfg.vessels[0], cfg.vessels[1] + 1))):
        # thin bright tube along a random direction
        p0 = rng.uniform(0, n - 1, size=3)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        rel = np.stack([x - p0[0], y - p0[1], z - p0[2]], axis=-1)
        along = rel @ direction
        dist2 = (rel * rel).sum(axis=-1) - along ** 2
        width = rng.uniform(0.6, 1.3)
        image = image + cfg.vessel_contrast * np.exp(-dist2 / (2 * width ** 2))
    contrast = rng.uniform(*cfg.lesion_contrast)
    soft = special.expit((1.0 - field) / cfg.edge_softness)
    lesion_texture = 1.0 + 0.25 * _smooth_noise(rng, (n, n, n), 1.0)
    image = image + contrast * soft * lesion_texture
    image = image + cfg.bias_amplitude * _smooth_noise(rng, (n, n, n), 8.0)
    image = image + rng.normal(0, rng.uniform(*cfg.noise_sigma), size=(n, n, n))
    return image.astype(np.float32), label.astype(np.uint8)


def provenance_note(cfg: PhantomConfig, counts: dict[str, int]) -> str:
    return "phantom " + json.dumps({"config": cfg.to_dict(), "counts": counts}, sort_keys=True)


def generate_dataset(cfg: PhantomConfig, counts: dict[str, int], seed: int,
                     out_dir) -> Manifest:
    """Write phantoms for each split plus ``manifest.tsv`` under ``out_dir``.

    Cases are drawn from one seeded stream per split, so unlabeled and
    labeled volumes share the generative distribution.
    """
    for split in ("labeled_train", "val", "test"):
        if counts.get(split, 0) < 1:
            raise ValueError(f"need at least one {split} case")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    man = Manifest(seed=seed, root=out, notes=[provenance_note(cfg, counts)])
    tags = {"labeled_train": "lab", "unlabeled_train": "unl", "val": "val", "test": "tst"}
    for s_idx, split in enumerate(("labeled_train", "unlabeled_train", "val", "test")):
        rng = np.random.default_rng([seed, s_idx])
        for i in range(counts.get(split, 0)):
            image, label = generate_case(cfg, rng)
            name = f"{tags[split]}_{i:03d}.vol"
            write_volume(out / "images" / name, image)
            label_rel = None
            if split != "unlabeled_train":
                write_volume(out / "labels" / name, label)
                label_rel = f"labels/{name}"
            man.splits[split].append(Entry(f"images/{name}", label_rel))
    man.validate()
    man.write(out / "manifest.tsv")
    return man
