from .manifest import Entry, Manifest, ManifestError, read_manifest
from .patches import random_patch, sliding_positions, sliding_window_predict
from .phantom import PhantomConfig, generate_case, generate_dataset
from .volume_io import Volume, VolumeFormatError, read_volume, write_volume

__all__ = [
    "Entry", "Manifest", "ManifestError", "read_manifest", "random_patch",
    "sliding_positions", "sliding_window_predict", "PhantomConfig",
    "generate_case", "generate_dataset", "Volume", "VolumeFormatError",
    "read_volume", "write_volume",
]
