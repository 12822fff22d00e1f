"""Multi-decoder 3D V-Net: one shared encoder, a main decoder and K auxiliary decoders.

Encoder levels halve the resolution with 2x2x2 stride-2 convolutions and
double the channels. Decoders upsample by nearest neighbour followed by a
3x3x3 convolution, concatenate the matching encoder skip, fuse, and end in a
1x1x1 head with a sigmoid. Only the bottleneck feature ``z`` is ever
perturbed; skips reach every decoder unchanged.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .tensor import Tensor, ops

MAIN = "main"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    levels: int = 3
    base_channels: int = 8
    K: int = 7
    patch_shape: int = 32
    in_channels: int = 1
    out_channels: int = 1

    def validate(self) -> "NetConfig":
        if self.levels < 2:
            raise ConfigError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if not 1 <= self.K <= 7:
            raise ConfigError(f"K must lie in [1, 7] (one decoder per perturbation kind), got {self.K}")
        if self.patch_shape % 2 ** (self.levels - 1):
            raise ConfigError(f"patch extent {self.patch_shape} not divisible by "
                              f"2^(levels-1) = {2 ** (self.levels - 1)}")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ConfigError("only single-channel input and binary output are supported")
        return self

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


class Features(NamedTuple):
    z: Tensor
    skips: tuple[Tensor, ...]


def _layer_shapes(cfg: NetConfig) -> tuple[dict, dict]:
    """Parameter shapes of the encoder and of one decoder (names without prefix)."""
    enc: dict[str, tuple] = {}

    def conv_block(store, name, cin, cout, k):
        store[f"{name}.w"] = (cout, cin, k, k, k)
        store[f"{name}.g"] = (cout,)
        store[f"{name}.b"] = (cout,)

    c0 = cfg.channels(0)
    conv_block(enc, "enc0.conv1", cfg.in_channels, c0, 3)
    conv_block(enc, "enc0.conv2", c0, c0, 3)
    for lvl in range(1, cfg.levels):
        conv_block(enc, f"enc{lvl}.down", cfg.channels(lvl - 1), cfg.channels(lvl), 2)
        conv_block(enc, f"enc{lvl}.conv", cfg.channels(lvl), cfg.channels(lvl), 3)
    dec: dict[str, tuple] = {}
    for lvl in range(cfg.levels - 2, -1, -1):
        conv_block(dec, f"up{lvl}.conv", cfg.channels(lvl + 1), cfg.channels(lvl), 3)
        conv_block(dec, f"fuse{lvl}.conv", 2 * cfg.channels(lvl), cfg.channels(lvl), 3)
    dec["head.w"] = (cfg.out_channels, c0, 1, 1, 1)
    dec["head.b"] = (cfg.out_channels,)
    return enc, dec


def _init(shapes: dict, prefix: str, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    params = {}
    for name, shape in shapes.items():
        full = f"{prefix}.{name}" if prefix else name
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            value = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith(".g"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[full] = Tensor(value, requires_grad=True, name=full, dtype=dtype)
    return params


def aux_prefix(k: int) -> str:
    return f"aux{k}"


class Network:
    """Parameter store plus the forward wiring."""

    def __init__(self, cfg: NetConfig, params: dict[str, Tensor], seed: int):
        self.cfg = cfg
        self.params = params
        self.seed = seed

    @property
    def num_aux(self) -> int:
        return sum(1 for k in range(1, self.cfg.K + 1) if self.has_aux(k))

    def has_aux(self, k: int) -> bool:
        return f"{aux_prefix(k)}.head.w" in self.params

    def add_aux_decoders(self) -> None:
        """Create the K auxiliary decoders (independent random inits, keyed by index)."""
        _, dec = _layer_shapes(self.cfg)
        dtype = self.params[f"{MAIN}.head.w"].dtype
        for k in range(1, self.cfg.K + 1):
            if self.has_aux(k):
                continue
            rng = np.random.default_rng([self.seed, 1, k])
            self.params.update(_init(dec, aux_prefix(k), rng, dtype))

    def drop_aux_decoders(self) -> None:
        for name in [n for n in self.params if n.startswith("aux")]:
            del self.params[name]

    def decoder_params(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if n.startswith(prefix + ".")}

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def _block(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.params[f"{name}.w"]
        pad = 1 if w.shape[2] == 3 else 0
        y = ops.conv3d(x, w, stride=stride, padding=pad)
        y = ops.instance_norm(y, self.params[f"{name}.g"], self.params[f"{name}.b"])
        return ops.relu(y)

    def encode(self, x: Tensor) -> Features:
        h = self._block("enc0.conv1", x)
        h = self._block("enc0.conv2", h)
        skips = [h]
        for lvl in range(1, self.cfg.levels):
            h = self._block(f"enc{lvl}.down", h, stride=2)
            h = self._block(f"enc{lvl}.conv", h)
            skips.append(h)
        return Features(z=skips[-1], skips=tuple(skips[:-1]))

    def decode(self, prefix: str, z: Tensor, skips: tuple[Tensor, ...]) -> Tensor:
        h = z
        for lvl in range(self.cfg.levels - 2, -1, -1):
            h = self._block(f"{prefix}.up{lvl}.conv", ops.upsample3d(h, 2))
            h = self._block(f"{prefix}.fuse{lvl}.conv", ops.concat([h, skips[lvl]], axis=1))
        logits = ops.conv3d(h, self.params[f"{prefix}.head.w"], self.params[f"{prefix}.head.b"])
        return ops.sigmoid(logits)

    def check_input(self, x: Tensor, patch: bool = True) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected input of shape (N, {self.cfg.in_channels}, D, H, W), got {x.shape}")
        step = 2 ** (self.cfg.levels - 1)
        spatial = x.shape[2:]
        if patch and any(s != self.cfg.patch_shape for s in spatial):
            raise ValueError(f"input spatial shape {spatial} != patch shape {self.cfg.patch_shape}")
        if any(s % step for s in spatial):
            raise ValueError(f"spatial shape {spatial} not divisible by {step}")


def build_network(cfg: NetConfig, seed: int, dtype=np.float32) -> Network:
    """Encoder and main decoder with He fan-in init; auxiliaries come later."""
    cfg.validate()
    enc, dec = _layer_shapes(cfg)
    params = _init(enc, "", np.random.default_rng([seed, 0, 0]), dtype)
    params.update(_init(dec, MAIN, np.random.default_rng([seed, 1, 0]), dtype))
    return Network(cfg, params, seed)


def forward_main(net: Network, x, check_patch: bool = True) -> tuple[Tensor, Features]:
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=net.params[f"{MAIN}.head.w"].dtype)
    net.check_input(x, patch=check_patch)
    feats = net.encode(x)
    return net.decode(MAIN, feats.z, feats.skips), feats


def forward_aux(net: Network, k: int, z_perturbed: Tensor, skips: tuple[Tensor, ...]) -> Tensor:
    if not 1 <= k <= net.cfg.K:
        raise IndexError(f"auxiliary decoder index {k} outside [1, {net.cfg.K}]")
    if not net.has_aux(k):
        raise KeyError(f"auxiliary decoder {k} has not been instantiated")
    return net.decode(aux_prefix(k), z_perturbed, skips)


# Checkpoint container
# 0   4s   magic b"UDCK"
# 4   u32  format version
# 8   u64  header length L (bytes of UTF-8 JSON)
# 16  L    JSON header: config, counters, metadata, tensor table
# ...      tensor payloads, little-endian, in table order at the listed offsets

CKPT_MAGIC = b"UDCK"
CKPT_VERSION = 1
_DTYPES = {"f4": np.float32, "f8": np.float64}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, step: int,
                    meta: dict | None = None) -> None:
    table, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = arr.dtype.newbyteorder("<").str[1:]
        if code not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": config, "step": int(step), "meta": meta or {},
                         "tensors": table}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, int, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        chunk = raw[start:start + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"{path}: tensor {entry['name']} truncated")
        arr = np.frombuffer(chunk, dtype=np.dtype(_DTYPES[entry["dtype"]]).newbyteorder("<"))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(_DTYPES[entry["dtype"]])
    return tensors, header["config"], header["step"], header["meta"]


def network_state(net: Network) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in net.params.items()}


def network_from_state(cfg: NetConfig, state: dict[str, np.ndarray], seed: int) -> Network:
    params = {name: Tensor(value, requires_grad=True, name=name, dtype=value.dtype)
              for name, value in state.items() if not name.startswith("adam.")}
    return Network(cfg.validate(), params, seed)


def save_network(path, net: Network, step: int = 0, meta: dict | None = None) -> None:
    save_checkpoint(path, network_state(net), {"net": asdict(net.cfg), "seed": net.seed},
                    step, meta)


def load_network(path) -> tuple[Network, int, dict]:
    tensors, config, step, meta = load_checkpoint(path)
    cfg = NetConfig(**config["net"])
    return network_from_state(cfg, tensors, config.get("seed", 0)), step, meta
