"""Slice overlays as binary PPM/PGM files.

Per axial slice ``z``:
  overlay_zNNN.ppm  grayscale image, prediction contour green, ground truth orange
  um_zNNN.pgm       confidence uncertainty scaled by its maximum e^-1
  us_zNNN.pgm       consensus uncertainty scaled by its maximum 0.5
Where the two contours overlap the prediction colour wins.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

GREEN = (0, 255, 0)
ORANGE = (255, 165, 0)
UM_SCALE = math.exp(-1.0)
US_SCALE = 0.5


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pnm(path) -> np.ndarray:
    """Reader for the files written above (no comments, maxval 255)."""
    raw = Path(path).read_bytes()
    magic, w, h, _maxval, rest = raw.split(maxsplit=4)
    w, h = int(w), int(h)
    data = np.frombuffer(rest, dtype=np.uint8)
    return data.reshape(h, w, 3) if magic == b"P6" else data.reshape(h, w)


def contour(mask2d: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-connected background neighbour (image border counts)."""
    m = np.asarray(mask2d, dtype=bool)
    return m & ~ndimage.binary_erosion(m, border_value=0)


def to_gray(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip((np.asarray(image, dtype=np.float64) - lo) * scale, 0, 255).round().astype(np.uint8)


def heat(u: np.ndarray, scale: float) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=np.float64) / scale * 255.0, 0, 255).round().astype(np.uint8)


def overlay_slice(image2d, pred2d, gt2d, lo: float, hi: float) -> np.ndarray:
    gray = to_gray(image2d, lo, hi)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[contour(gt2d)] = ORANGE
    rgb[contour(pred2d)] = GREEN
    return rgb


def emit_overlays(volume, pred, gt, u_m, u_s, out_dir,
                  slices: Sequence[int] | None = None) -> list[Path]:
    arrays = [np.asarray(a) for a in (volume, pred, gt, u_m, u_s)]
    if any(a.shape != arrays[0].shape for a in arrays) or arrays[0].ndim != 3:
        raise ValueError("volume, masks and uncertainty maps must share one 3-D shape")
    volume, pred, gt, u_m, u_s = arrays
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = float(volume.min()), float(volume.max())
    written = []
    for z in (range(volume.shape[0]) if slices is None else slices):
        paths = (out / f"overlay_z{z:03d}.ppm", out / f"um_z{z:03d}.pgm", out / f"us_z{z:03d}.pgm")
        write_ppm(paths[0], overlay_slice(volume[z], pred[z], gt[z], lo, hi))
        write_pgm(paths[1], heat(u_m[z], UM_SCALE))
        write_pgm(paths[2], heat(u_s[z], US_SCALE))
        written.extend(paths)
    return written
