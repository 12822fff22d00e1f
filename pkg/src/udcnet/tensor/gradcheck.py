"""Central-difference verification of the reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import ops
from .core import Tensor, default_dtype, gradients


@dataclass
class GradCheckReport:
    # (name, max error) sorted worst first
    errors: list[tuple[str, float]] = field(default_factory=list)
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max((e for _, e in self.errors), default=0.0)

    def __str__(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in self.errors]
        return "\n".join(lines + [f"checked {self.checked} coordinates, max {self.max_error:.3e}"])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def grad_check(fn: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               eps: float = 1e-6, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare ``gradients`` of ``fn(params)`` against central differences.

    ``fn`` receives freshly wrapped float64 leaves on every call and must
    return a scalar Tensor. With ``max_coords`` only that many randomly
    chosen coordinates per parameter are differenced.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values: Mapping[str, np.ndarray], requires_grad: bool):
        leaves = {k: Tensor(v, requires_grad=requires_grad, name=k, dtype=np.float64)
                  for k, v in values.items()}
        return fn(leaves), leaves

    with default_dtype(np.float64):
        out, leaves = evaluate(base, True)
        analytic = gradients(out, leaves)
        report = GradCheckReport()
        for name, value in base.items():
            flat_count = value.size
            coords = np.arange(flat_count)
            if max_coords is not None and flat_count > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat_count, max_coords,
                                                                  replace=False)
            numeric = np.empty(len(coords))
            for j, flat in enumerate(coords):
                idx = np.unravel_index(flat, value.shape)
                shifted = dict(base)
                plus = value.copy()
                plus[idx] += eps
                shifted[name] = plus
                f_plus = evaluate(shifted, False)[0].item()
                minus = value.copy()
                minus[idx] -= eps
                shifted[name] = minus
                f_minus = evaluate(shifted, False)[0].item()
                numeric[j] = (f_plus - f_minus) / (2 * eps)
            a = analytic[name].reshape(-1)[coords]
            err = relative_error(a, numeric)
            report.errors.append((name, float(err.max()) if err.size else 0.0))
            report.checked += len(coords)
    report.errors.sort(key=lambda item: -item[1])
    return report


# Random test cases per op kind: each builder returns (inputs, fn) where fn maps
# the wrapped inputs to the raw op output. Values stay away from kinks.

def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _shape(rng, ndim=3, lo=1, hi=4):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=ndim))


def _case_conv3d(rng):
    n, c, o = (int(v) for v in rng.integers(1, 3, size=3))
    k = int(rng.choice([1, 2, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    spatial = tuple(int(v) for v in rng.integers(k, k + 3, size=3))
    inputs = {"x": rng.standard_normal((n, c) + spatial),
              "w": rng.standard_normal((o, c, k, k, k)),
              "b": rng.standard_normal(o)}
    return inputs, lambda t: ops.conv3d(t["x"], t["w"], t["b"], stride=stride, padding=pad)


def _case_upsample3d(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3))) + _shape(rng, hi=3)
    return {"x": rng.standard_normal(shape)}, lambda t: ops.upsample3d(t["x"], 2)


def _case_instance_norm(rng):
    c = int(rng.integers(1, 4))
    shape = (int(rng.integers(1, 3)), c) + tuple(int(v) for v in rng.integers(2, 4, size=3))
    inputs = {"x": rng.standard_normal(shape), "gamma": rng.uniform(0.5, 1.5, c),
              "beta": rng.standard_normal(c)}
    return inputs, lambda t: ops.instance_norm(t["x"], t["gamma"], t["beta"])


def _unary(op, sampler):
    def case(rng):
        return {"x": sampler(rng, _shape(rng))}, lambda t: op(t["x"])
    return case


def _binary(op, positive_b=False):
    def case(rng):
        shape = _shape(rng)
        b_shape = shape
        if rng.random() < 0.5:
            # broadcast the second operand along a random subset of axes
            b_shape = tuple(1 if rng.random() < 0.5 else n for n in shape)
        b = rng.uniform(0.5, 2.0, b_shape) if positive_b else rng.standard_normal(b_shape)
        return {"a": rng.standard_normal(shape), "b": b}, lambda t: op(t["a"], t["b"])
    return case


def _case_scalar_mul(rng):
    c = float(rng.standard_normal())
    return {"x": rng.standard_normal(_shape(rng))}, lambda t: ops.scalar_mul(t["x"], c)


def _case_reduce(op):
    def case(rng):
        shape = _shape(rng)
        axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
        keep = bool(rng.random() < 0.5)
        return {"x": rng.standard_normal(shape)}, lambda t: op(t["x"], axis=axis, keepdims=keep)
    return case


def _case_clip(rng):
    x = rng.uniform(-2, 2, _shape(rng))
    x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.0
    return {"x": x}, lambda t: ops.clip(t["x"], -1.0, 1.0)


def _case_max_pool3d(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3))) + tuple(
        2 * int(v) for v in rng.integers(1, 3, size=3))
    # distinct values keep the argmax stable under small differences
    x = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 + rng.uniform(0, 0.01, shape)
    return {"x": x}, lambda t: ops.max_pool3d(t["x"], 2)


def _case_concat(rng):
    shape = _shape(rng)
    axis = int(rng.integers(0, 3))
    other = list(shape)
    other[axis] = int(rng.integers(1, 4))
    return ({"a": rng.standard_normal(shape), "b": rng.standard_normal(other)},
            lambda t: ops.concat([t["a"], t["b"]], axis=axis))


def _case_slice(rng):
    shape = _shape(rng, lo=2, hi=5)
    index = tuple(slice(int(rng.integers(0, n // 2 + 1)), n) for n in shape)
    return {"x": rng.standard_normal(shape)}, lambda t: ops.slice(t["x"], index)


def _case_mask_select(rng):
    shape = _shape(rng)
    mask = rng.random(shape) < 0.5
    mask.flat[0] = True
    return {"x": rng.standard_normal(shape)}, lambda t: ops.mask_select(t["x"], mask)


def _case_reshape(rng):
    shape = _shape(rng)
    return {"x": rng.standard_normal(shape)}, lambda t: ops.reshape(t["x"], (-1,))


def _case_transpose(rng):
    shape = _shape(rng)
    perm = tuple(int(v) for v in rng.permutation(3))
    return {"x": rng.standard_normal(shape)}, lambda t: ops.transpose(t["x"], perm)


def _case_flip(rng):
    shape = _shape(rng)
    axes = tuple(i for i in range(3) if rng.random() < 0.5) or (0,)
    return {"x": rng.standard_normal(shape)}, lambda t: ops.flip(t["x"], axes)


def _case_roll(rng):
    shape = _shape(rng)
    shifts = tuple(int(v) for v in rng.integers(-3, 4, size=3))
    return {"x": rng.standard_normal(shape)}, lambda t: ops.roll(t["x"], shifts, (0, 1, 2))


OP_CASES: dict[str, Callable] = {
    "conv3d": _case_conv3d,
    "upsample3d": _case_upsample3d,
    "instance_norm": _case_instance_norm,
    "relu": _unary(ops.relu, _away_from_zero),
    "sigmoid": _unary(ops.sigmoid, lambda r, s: r.standard_normal(s) * 3),
    "add": _binary(ops.add),
    "mul": _binary(ops.mul),
    "sub": _binary(ops.sub),
    "div": _binary(ops.div, positive_b=True),
    "scalar_mul": _case_scalar_mul,
    "sum": _case_reduce(ops.sum),
    "mean": _case_reduce(ops.mean),
    "square": _unary(ops.square, lambda r, s: r.standard_normal(s)),
    "sqrt": _unary(ops.sqrt, lambda r, s: r.uniform(0.2, 3.0, s)),
    "log": _unary(ops.log, lambda r, s: r.uniform(0.2, 3.0, s)),
    "exp": _unary(ops.exp, lambda r, s: r.standard_normal(s)),
    "clip": _case_clip,
    "max_pool3d": _case_max_pool3d,
    "concat": _case_concat,
    "slice": _case_slice,
    "mask_select": _case_mask_select,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "flip": _case_flip,
    "roll": _case_roll,
}


def check_op(kind: str, trials: int = 50, eps: float = 1e-6, seed: int = 0) -> float:
    """Worst elementwise error of op ``kind`` over ``trials`` random cases.

    Each case contracts the op output with a fixed random cotangent so the
    checked function is scalar.
    """
    rng = np.random.default_rng([seed, sum(map(ord, kind))])
    worst = 0.0
    for _ in range(trials):
        inputs, op_fn = OP_CASES[kind](rng)
        with default_dtype(np.float64):
            probe = op_fn({k: Tensor(v, dtype=np.float64) for k, v in inputs.items()})
        cotangent = rng.standard_normal(probe.shape)

        def scalar(t, cotangent=cotangent, op_fn=op_fn):
            return ops.sum(ops.mul(op_fn(t), Tensor(cotangent, dtype=np.float64)))

        worst = max(worst, grad_check(scalar, inputs, eps=eps).max_error)
    return worst
