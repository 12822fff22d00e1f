"""Dataset manifest: a tab-separated text file with ``#`` metadata lines.

    #udc-manifest 1
    #seed 7
    #note synthetic phantoms ...
    labeled_train<TAB>images/lab_000.vol<TAB>labels/lab_000.vol
    unlabeled_train<TAB>images/unl_000.vol<TAB>-

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

SPLITS = ("labeled_train", "unlabeled_train", "val", "test")
LABELED_SPLITS = ("labeled_train", "val", "test")
HEADER = "#udc-manifest 1"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    image: str
    label: str | None = None

    @property
    def case_id(self) -> str:
        return Path(self.image).stem


@dataclass
class Manifest:
    splits: dict[str, list[Entry]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    seed: int | None = None
    notes: list[str] = field(default_factory=list)
    root: Path = Path(".")

    def validate(self) -> "Manifest":
        seen: dict[str, str] = {}
        for split in SPLITS:
            for entry in self.splits.get(split, []):
                if split in LABELED_SPLITS and entry.label is None:
                    raise ManifestError(f"{split} entry {entry.image} has no label")
                if split == "unlabeled_train" and entry.label is not None:
                    raise ManifestError(f"unlabeled entry {entry.image} carries a label")
                for path in (entry.image, entry.label):
                    if path is None:
                        continue
                    if path in seen:
                        raise ManifestError(f"{path} appears in both {seen[path]} and {split}")
                    seen[path] = split
        return self

    def entries(self, split: str) -> list[Entry]:
        if split not in SPLITS:
            raise ManifestError(f"unknown split {split!r}")
        return self.splits.get(split, [])

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def counts(self) -> dict[str, int]:
        return {s: len(self.splits.get(s, [])) for s in SPLITS}

    def write(self, path) -> None:
        path = Path(path)
        lines = [HEADER]
        if self.seed is not None:
            lines.append(f"#seed {self.seed}")
        lines += [f"#note {n}" for n in self.notes]
        for split in SPLITS:
            for e in self.splits.get(split, []):
                lines.append(f"{split}\t{e.image}\t{e.label or '-'}")
        path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> Manifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise ManifestError(f"{path}: missing '{HEADER}' header")
    man = Manifest(root=path.parent)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#seed "):
            man.seed = int(line.split(None, 1)[1])
        elif line.startswith("#note "):
            man.notes.append(line[6:])
        elif line.startswith("#"):
            continue
        else:
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: malformed entry {line!r}")
            label = None if parts[2] == "-" else parts[2]
            man.splits[parts[0]].append(Entry(parts[1], label))
    return man.validate()
