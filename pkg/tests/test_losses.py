import json
import math

import numpy as np
import pytest

import oracles
from udcnet import losses as L
from udcnet.tensor import Tensor, grad_check, gradients
from udcnet.transform import apply, group_elements, invert


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64), dtype=np.float64)


def test_supervised_hand_cases():
    y = np.zeros((1, 1, 2, 2, 2))
    y[..., 0] = 1
    p = t(np.full(y.shape, 0.5))
    assert math.isclose(L.bce_term(p, y).item(), math.log(2), rel_tol=1e-12)
    perfect = L.supervised_loss(t(y), y).item()
    assert 0 <= perfect < 1e-5
    with pytest.raises(ValueError):
        L.supervised_loss(p, np.full(y.shape, 0.5))
    with pytest.raises(ValueError):
        L.supervised_loss(p, y[..., :1])


def test_dice_term_closed_form():
    rng = np.random.default_rng(0)
    p = rng.random((1, 1, 3, 3, 3))
    y = (rng.random(p.shape) < 0.4).astype(float)
    expect = 1 - (2 * (p * y).sum() + 1) / (p.sum() + y.sum() + 1)
    assert abs(L.dice_term(t(p), y).item() - expect) < 1e-12


def test_supervised_gradient():
    rng = np.random.default_rng(1)
    y = (rng.random((1, 1, 4, 4, 4)) < 0.5).astype(float)
    rep = grad_check(lambda v: L.supervised_loss(v["p"], y),
                     {"p": rng.uniform(0.05, 0.95, y.shape)})
    assert rep.max_error < 1e-6


def test_consistency_hand_cases():
    ident = group_elements()[0]
    p = np.random.default_rng(0).random((1, 1, 2, 2, 2))
    assert L.image_consistency_loss(t(p), t(p), ident).item() == 0.0
    assert L.image_consistency_loss(t(np.ones(p.shape)), t(np.zeros(p.shape)), ident).item() == 1.0
    assert L.feature_consistency_loss(t(p), [t(p), t(p)]).item() == 0.0
    assert L.feature_consistency_loss(t([1.0]), [t([0.0])]).item() == 1.0
    fc = L.feature_consistency_loss(t([1.0, 0.0]), [t([0.0, 0.0]), t([1.0, 1.0])]).item()
    assert fc == 0.5
    ufc = L.masked_feature_consistency_loss(t([1.0, 0.0]), [t([0.0, 1.0])], [True, False])
    assert ufc.item() == 1.0
    assert L.masked_feature_consistency_loss(t([1.0, 0.0]), [t([0.0, 1.0])], [False, False]).item() == 0


def test_ic_symmetric_and_uses_inverse():
    rng = np.random.default_rng(2)
    p, other = rng.random((1, 1, 3, 4, 5)), rng.random((1, 1, 3, 4, 5))
    el = group_elements()[29]
    p_tilde = apply(el, other)
    a = L.image_consistency_loss(t(p), t(p_tilde), el).item()
    b = L.image_consistency_loss(t(other), t(apply(el, p)), el).item()
    assert abs(a - b) < 1e-15
    assert L.image_consistency_loss(t(p), t(apply(el, p)), el).item() == 0.0


def test_full_mask_reduces_exactly():
    rng = np.random.default_rng(3)
    p = rng.random((2, 1, 3, 3, 3))
    qs = [t(rng.random(p.shape)) for _ in range(7)]
    full = L.masked_feature_consistency_loss(t(p), qs, np.ones(p.shape, bool)).item()
    assert full == L.feature_consistency_loss(t(p), qs).item()


@pytest.mark.parametrize("seed", range(4))
def test_losses_match_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    shape = (1, 1, 3, 3, 4)
    p = rng.random(shape)
    k = int(rng.integers(1, 8))
    qs = [rng.random(shape) for _ in range(k)]
    omega = rng.random(shape) < 0.5
    el = group_elements()[int(rng.integers(48))]
    p_tilde = apply(el, rng.random(shape))
    back = apply(invert(el), p_tilde)
    assert abs(L.image_consistency_loss(t(p), t(p_tilde), el).item() - oracles.l_ic(p, back)) <= 1e-12
    assert abs(L.feature_consistency_loss(t(p), [t(q) for q in qs]).item()
               - oracles.l_fc(p, qs)) <= 1e-12
    assert abs(L.masked_feature_consistency_loss(t(p), [t(q) for q in qs], omega).item()
               - oracles.l_ufc(p, qs, omega)) <= 1e-12


def test_consistency_gradients_reach_both_sides():
    rng = np.random.default_rng(4)
    p, q = rng.random((1, 1, 2, 2, 2)), rng.random((1, 1, 2, 2, 2))
    omega = rng.random(p.shape) < 0.6
    f = lambda v: L.masked_feature_consistency_loss(v["p"], [v["q"]], omega)
    assert grad_check(f, {"p": p, "q": q}).max_error < 1e-6
    pt = Tensor(p, requires_grad=True, dtype=np.float64)
    qt = Tensor(q, requires_grad=True, dtype=np.float64)
    gp, gq = gradients(L.masked_feature_consistency_loss(pt, [qt], omega, stop_grad_p=True), [pt, qt])
    assert not gp.any()
    np.testing.assert_allclose(gq, -2 * (p - q) * omega / omega.sum(), rtol=1e-12)


def test_ufc_shrinks_when_worst_voxels_leave():
    # drop voxels in decreasing order of error: each removal takes an above-average term
    rng = np.random.default_rng(5)
    p = rng.random(20)
    q = rng.random(20)
    err = (p - q) ** 2
    omega = np.ones(20, bool)
    prev = L.masked_feature_consistency_loss(t(p), [t(q)], omega).item()
    for i in np.argsort(-err)[:-1]:
        omega[i] = False
        cur = L.masked_feature_consistency_loss(t(p), [t(q)], omega).item()
        assert cur <= prev + 1e-15
        prev = cur


def test_ramp_values():
    assert math.isclose(L.ramp_weight(0, 100), math.exp(-5), rel_tol=1e-15)
    assert math.isclose(L.ramp_weight(50, 100), math.exp(-1.25), rel_tol=1e-15)
    assert L.ramp_weight(100, 100) == 1.0 and L.ramp_weight(1000, 100) == 1.0
    ws = [L.ramp_weight(s, 37) for s in range(60)]
    assert all(a <= b for a, b in zip(ws, ws[1:])) and all(0 < w <= 1 for w in ws)
    with pytest.raises(ValueError):
        L.ramp_weight(1, 0)


def test_total_and_report():
    assert L.total_loss(1.0, 2.0, 3.0, 1.0, 1.0) == 6.0
    assert L.total_loss(1.5, 2.0, 3.0, 0.0, 0.0) == 1.5
    assert L.total_loss(1.5, None, None, 1.0, 1.0) == 1.5
    rep = L.LossReport(step=3, phase=2, L_S=0.4, total=0.4 + 0.3 * 0.2 + 0.5 * 0.1, L_IC=0.2,
                       L_UFC=0.1, alpha=0.3, beta=0.5, omega_fraction=0.7)
    assert abs(rep.recomputed_total() - rep.total) <= 1e-6 * rep.total
    rec = json.loads(rep.to_json())
    assert rec["step"] == 3 and rec["omega_fraction"] == 0.7
    phase1 = json.loads(L.LossReport(step=0, phase=1, L_S=0.9, total=0.9).to_json())
    assert set(phase1) == {"step", "phase", "L_S", "total"}
