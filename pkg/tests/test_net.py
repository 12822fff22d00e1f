import numpy as np
import pytest

from udcnet.net import (MAIN, CheckpointError, ConfigError, NetConfig, aux_prefix, build_network,
                        forward_aux, forward_main, load_network, save_network)
from udcnet.tensor import Tensor, default_dtype, gradients, ops


def small(levels=2, base=2, patch=8, K=7):
    return NetConfig(levels=levels, base_channels=base, patch_shape=patch, K=K)


def test_parameter_count_hand_tally():
    # weights (no conv bias) plus norm gain/shift per block
    enc = (8 * 1 * 27 + 16) + (8 * 8 * 27 + 16) \
        + (16 * 8 * 8 + 32) + (16 * 16 * 27 + 32) \
        + (32 * 16 * 8 + 64) + (32 * 32 * 27 + 64)
    dec = 2 * (16 * 32 * 27 + 32) + 2 * (8 * 16 * 27 + 16) + 8 + 1
    net = build_network(NetConfig(levels=3, base_channels=8), seed=0)
    assert net.parameter_count() == enc + dec == 76513
    net.add_aux_decoders()
    assert net.parameter_count() == enc + 8 * dec


def test_seed_determinism():
    a = build_network(small(), 3)
    b = build_network(small(), 3)
    c = build_network(small(), 4)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params
               if n.endswith(".w"))


def test_bad_configs_raise():
    with pytest.raises(ConfigError):
        build_network(NetConfig(levels=3, patch_shape=30), 0)
    with pytest.raises(ConfigError):
        build_network(NetConfig(K=8), 0)
    with pytest.raises(ConfigError):
        build_network(NetConfig(levels=1), 0)


def test_output_range_and_shapes():
    net = build_network(small(levels=3, patch=8), 0)
    x = np.random.default_rng(0).standard_normal((2, 1, 8, 8, 8)).astype(np.float32)
    p, feats = forward_main(net, x)
    assert p.shape == (2, 1, 8, 8, 8)
    assert np.all((p.data > 0) & (p.data < 1))
    assert feats.z.shape == (2, 8, 2, 2, 2)
    assert [s.shape[1:] for s in feats.skips] == [(2, 8, 8, 8), (4, 4, 4, 4)]
    with pytest.raises(ValueError):
        forward_main(net, x[:, :, :4])


def test_aux_with_copied_params_reproduces_main():
    net = build_network(small(), 1)
    net.add_aux_decoders()
    for name, t in net.decoder_params(MAIN).items():
        net.params[name.replace(MAIN, aux_prefix(3), 1)] = Tensor(t.data, requires_grad=True)
    x = np.random.default_rng(1).standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    p, feats = forward_main(net, x)
    q = forward_aux(net, 3, feats.z, feats.skips)
    assert q.data.tobytes() == p.data.tobytes()


def test_aux_decoders_have_independent_inits():
    net = build_network(small(), 0)
    net.add_aux_decoders()
    assert net.num_aux == 7
    w = [net.params[f"{aux_prefix(k)}.head.w"].data for k in range(1, 8)]
    assert not np.array_equal(w[0], w[1])
    with pytest.raises(IndexError):
        forward_aux(net, 8, None, ())


def test_decoder_independence_and_gradient_flow():
    with default_dtype(np.float64):
        net = build_network(small(), 2, dtype=np.float64)
        net.add_aux_decoders()
        x = np.random.default_rng(2).standard_normal((1, 1, 8, 8, 8))
        p, feats = forward_main(net, x)
        q = forward_aux(net, 1, feats.z, feats.skips)
        leaves = dict(net.params)
        g_main = gradients(ops.sum(p), leaves, release=False)
        g_aux = gradients(ops.sum(q), leaves)
    for name, g in g_main.items():
        if name.startswith("aux"):
            assert not g.any(), name
        else:
            assert np.abs(g).sum() > 0, name
    for name, g in g_aux.items():
        if name.startswith((MAIN, "aux2")):
            assert not g.any(), name
        elif name.startswith("aux1") or name.startswith("enc"):
            assert np.abs(g).sum() > 0, name


def test_checkpoint_round_trip(tmp_path):
    net = build_network(small(), 5)
    net.add_aux_decoders()
    path = tmp_path / "n.ckpt"
    save_network(path, net, step=12, meta={"note": "x"})
    back, step, meta = load_network(path)
    assert step == 12 and meta == {"note": "x"} and back.seed == 5 and back.cfg == net.cfg
    assert set(back.params) == set(net.params)
    for name, t in net.params.items():
        assert back.params[name].data.tobytes() == t.data.tobytes()
        assert back.params[name].dtype == t.dtype
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "bad.ckpt")
    (tmp_path / "cut.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "cut.ckpt")
