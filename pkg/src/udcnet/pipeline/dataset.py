"""In-memory dataset assembled from a manifest (generated on demand)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import Manifest, generate_dataset, read_manifest, read_volume
from ..data.phantom import provenance_note
from ..data.manifest import ManifestError
from .config import RunConfig


@dataclass
class Case:
    case_id: str
    image: np.ndarray
    label: np.ndarray | None
    spacing: tuple[float, float, float]


@dataclass
class Dataset:
    splits: dict[str, list[Case]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[Case]:
        return self.splits[split]

    def require_labels(self, split: str) -> list[Case]:
        cases = self.splits.get(split, [])
        if not cases or any(c.label is None for c in cases):
            raise ManifestError(f"split {split!r} has no labels; it cannot be evaluated")
        return cases


def load_dataset(manifest: Manifest | str | Path) -> Dataset:
    if not isinstance(manifest, Manifest):
        manifest = read_manifest(manifest)
    ds = Dataset()
    for split, entries in manifest.splits.items():
        cases = []
        for e in entries:
            vol = read_volume(manifest.resolve(e.image))
            label = None
            if e.label is not None:
                lab = read_volume(manifest.resolve(e.label))
                if lab.shape != vol.shape:
                    raise ManifestError(f"{e.label}: label shape {lab.shape} != image {vol.shape}")
                label = lab.data.astype(np.uint8)
            cases.append(Case(e.case_id, vol.data.astype(np.float32), label, vol.spacing))
        ds.splits[split] = cases
    for split in ("labeled_train", "unlabeled_train"):
        if not ds.splits.get(split):
            raise ManifestError(f"manifest has no {split} entries")
    ds.require_labels("val")
    return ds


def prepare_dataset(cfg: RunConfig, workdir) -> Dataset:
    """Use ``cfg.manifest`` if set, else generate phantoms under ``workdir/data``."""
    if cfg.manifest:
        return load_dataset(cfg.manifest)
    out = Path(workdir) / "data"
    mpath = out / "manifest.tsv"
    if mpath.exists():
        man = read_manifest(mpath)
        if man.seed == cfg.data_seed and provenance_note(cfg.phantom, cfg.counts) in man.notes:
            return load_dataset(man)
    return load_dataset(generate_dataset(cfg.phantom, cfg.counts, cfg.data_seed, out))
