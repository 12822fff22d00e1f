import json
import math
from dataclasses import replace

import numpy as np
import pytest

from udcnet.cli import main
from udcnet.data import PhantomConfig, read_volume
from udcnet.data.manifest import ManifestError
from udcnet.metrics import Aggregate, MetricReport
from udcnet.net import NetConfig, build_network, forward_main, save_network
from udcnet.pipeline import (Adam, RunConfig, Trainer, config_from_dict, load_config,
                             prepare_dataset, save_config, udc_objective)
from udcnet.pipeline.config import AdamConfig, Variant
from udcnet.pipeline.evaluate import evaluate, evaluation_lines, infer, infer_uncertainty
from udcnet.pipeline.overlay import GREEN, ORANGE, emit_overlays, read_pnm
from udcnet.pipeline.train import make_rngs
from udcnet.tensor import Tensor

TINY = RunConfig(net=NetConfig(levels=2, base_channels=2, patch_shape=8),
                 phantom=PhantomConfig(extent=16, radius=(1.5, 3.5)),
                 counts={"labeled_train": 2, "unlabeled_train": 3, "val": 1, "test": 2},
                 steps_per_epoch=2, pretrain_epochs=2, max_finetune_epochs=2, patience=2,
                 infer_stride=8)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    return prepare_dataset(TINY, tmp_path_factory.mktemp("tiny"))


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_config_round_trip(tmp_path):
    save_config(TINY, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == TINY
    with pytest.raises(ValueError):
        config_from_dict({**TINY.to_dict(), "bogus": 1})
    with pytest.raises(ValueError):
        config_from_dict({**TINY.to_dict(), "variant": {**TINY.to_dict()["variant"], "mask": "x"}})
    assert TINY.effective_ramp_length() == pytest.approx(0.4 * 4)


def test_adam_matches_closed_form():
    # quadratic bowl f = 0.5 * sum(a * x^2); gradient a * x
    cfg = AdamConfig()
    opt = Adam(cfg)
    a = np.array([1.0, 4.0, 0.25])
    x0 = np.array([0.3, -1.2, 2.0])
    param = {"x": Tensor(x0, requires_grad=True, dtype=np.float64)}
    m = v = np.zeros(3)
    ref = x0.copy()
    for t in range(1, 6):
        g = a * ref
        opt.step(param, {"x": a * param["x"].data}, epoch=3)
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        lr = 1e-3 * 0.95 ** 3
        ref = ref - lr * (m / (1 - cfg.beta1 ** t)) / (np.sqrt(v / (1 - cfg.beta2 ** t)) + cfg.eps)
        assert np.max(np.abs(param["x"].data - ref)) < 1e-10


def test_learning_rate_schedule():
    opt = Adam()
    for e in range(30):
        assert abs(opt.lr_at(e) - 0.001 * 0.95 ** e) < 1e-12


def test_phase_boundary_in_log(data, tmp_path):
    log = tmp_path / "run.jsonl"
    tr = Trainer(TINY, data, 0, log_path=log)
    assert not any(n.startswith("aux") for n in tr.net.params)
    tr.run_phase1()
    assert not any(n.startswith("aux") for n in tr.net.params)
    tr.run_phase2()
    records = read_log(log)
    assert config_from_dict(records[0]["header"]["config"]) == TINY
    steps = [r for r in records if "step" in r and "L_S" in r]
    p1 = [r for r in steps if r["phase"] == 1]
    p2 = [r for r in steps if r["phase"] == 2]
    assert len(p1) == 4 and p2
    assert all("L_IC" not in r and "L_UFC" not in r and "alpha" not in r for r in p1)
    assert all("L_IC" in r and "L_UFC" in r for r in p2)
    assert p2[0]["step"] == p1[-1]["step"] + 1
    assert p2[0]["alpha"] == pytest.approx(math.exp(-5))
    for r in p2:
        recomputed = r["L_S"] + r["alpha"] * r["L_IC"] + r["beta"] * r["L_UFC"]
        assert abs(recomputed - r["total"]) <= 1e-6 * abs(r["total"])
    vals = [r for r in records if r.get("event") == "val"]
    assert [v["epoch"] for v in vals] == list(range(len(vals)))
    assert any(r.get("event") == "phase2_best" for r in records)


def test_same_seed_same_run(data):
    runs = []
    for _ in range(2):
        tr = Trainer(TINY, data, 3)
        best = tr.fit()
        runs.append((best["val_dsc"], [r.total for r in tr.reports]))
    assert runs[0] == runs[1]


def test_zero_beta_equals_ic_only(data):
    cfg64 = replace(TINY, dtype="float64")
    no_fc = cfg64.with_variant(Variant("udc", beta_max=0.0))
    ic = cfg64.with_variant("ic_only")
    trajectories = []
    for cfg in (no_fc, ic):
        tr = Trainer(cfg, data, 1)
        tr.run_phase1()
        tr.start_phase2()
        for _ in range(3):
            tr.finetune_step()
        trajectories.append({n: t.data for n, t in tr.net.params.items() if not n.startswith("aux")})
    a, b = trajectories
    assert set(a) == set(b)
    for name in a:
        assert a[name].tobytes() == b[name].tobytes(), name


def test_huge_thresholds_reduce_to_unmasked(data):
    cfg = replace(TINY, tau_m=1e9, tau_s=1e9)
    net = build_network(cfg.net, 0)
    net.add_aux_decoders()
    rng = np.random.default_rng(0)
    xl = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    yl = (rng.random(xl.shape) < 0.2).astype(np.float32)
    xu = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    terms = udc_objective(net, xl, yl, xu, cfg, 1.0, 1.0, rngs=make_rngs(0))
    assert terms.omega_fraction == 1.0
    assert terms.l_ufc.item() == terms.l_fc.item()


def test_resume_is_bit_identical(data, tmp_path):
    cfg = replace(TINY, dtype="float64")
    tr = Trainer(cfg, data, 2)
    tr.run_phase1()
    tr.start_phase2()
    tr.finetune_step()
    tr.save(tmp_path / "mid.ckpt")
    nxt = tr.finetune_step()
    back = Trainer.resume(tmp_path / "mid.ckpt", data)
    again = back.finetune_step()
    assert nxt.to_json() == again.to_json()
    for name, t in tr.net.params.items():
        assert back.net.params[name].data.tobytes() == t.data.tobytes()


def test_infer_contracts(data, tmp_path):
    net = build_network(TINY.net, 0)
    vol = np.random.default_rng(0).standard_normal((8, 8, 8)).astype(np.float32)
    p, _ = forward_main(net, vol[None, None])
    assert infer(net, vol).probability.tobytes() == p.data[0, 0].astype(np.float64).tobytes()
    big = data["test"][0].image
    net.add_aux_decoders()
    save_network(tmp_path / "full.ckpt", net)
    full = infer(str(tmp_path / "full.ckpt"), big)
    net.drop_aux_decoders()
    save_network(tmp_path / "main.ckpt", net)
    main_only = infer(str(tmp_path / "main.ckpt"), big)
    assert full.probability.tobytes() == main_only.probability.tobytes()
    assert np.array_equal(full.mask, full.probability > 0.5)
    with pytest.raises(ValueError, match="pad"):
        infer(net, np.zeros((8, 8, 4)))
    with pytest.raises(ValueError):
        infer(net, np.zeros((8, 8)))


def test_evaluate_ground_truth_and_aggregates(data, monkeypatch):
    from udcnet.pipeline import evaluate as ev
    cases = data.require_labels("test")
    monkeypatch.setattr(ev, "infer", lambda net, vol, stride=None: ev.Prediction(
        None, next(c.label for c in cases if c.image is vol).astype(bool)))
    reports, agg = evaluate(None, cases)
    assert all((r.dsc, r.jaccard, r.asd) == (100.0, 100.0, 0.0) for r in reports)
    lines = evaluation_lines(cases, reports)
    assert len(lines) == len(cases) + 1
    per_case = [json.loads(line)["dsc"] for line in lines[:-1]]
    assert agg.dsc[0] == np.mean(per_case)
    with pytest.raises(ManifestError):
        data.require_labels("unlabeled_train")


def test_seed_std_matches_formula():
    means = [70.0, 74.5, 71.2]
    aggs = [Aggregate.of([MetricReport(m, m / 2, 1.0)]) for m in means]
    over = Aggregate.over_seeds(aggs)
    expect = math.sqrt(sum((m - np.mean(means)) ** 2 for m in means) / 2)
    assert over.dsc[0] == pytest.approx(np.mean(means), abs=1e-12)
    assert over.dsc[1] == pytest.approx(expect, abs=1e-12)


def test_overlays(tmp_path):
    vol = np.random.default_rng(0).random((4, 10, 12))
    mask = np.zeros(vol.shape, bool)
    mask[:, 2:7, 3:9] = True
    zeros = np.zeros(vol.shape)
    files = emit_overlays(vol, mask, mask, zeros, zeros + 0.5, tmp_path, slices=[1, 2])
    assert len(files) == 6
    rgb = read_pnm(tmp_path / "overlay_z001.ppm")
    assert rgb.shape == (10, 12, 3)
    green = np.all(rgb == GREEN, axis=-1)
    assert green.any() and not np.all(rgb == ORANGE, axis=-1).any()
    um = read_pnm(tmp_path / "um_z001.pgm")
    assert um.shape == (10, 12) and not um.any()
    assert np.all(read_pnm(tmp_path / "us_z002.pgm") == 255)
    gt = np.zeros_like(mask)
    gt[:, 1:5, 1:5] = True
    emit_overlays(vol, mask, gt, zeros, zeros, tmp_path / "b", slices=[0])
    rgb = read_pnm(tmp_path / "b" / "overlay_z000.ppm")
    assert np.all(rgb == ORANGE, axis=-1).any()


def test_uncertainty_maps_need_aux(data):
    net = build_network(TINY.net, 0)
    img = data["test"][0].image
    with pytest.raises(ValueError):
        infer_uncertainty(net, img)
    net.add_aux_decoders()
    u_m, u_s = infer_uncertainty(net, img)
    assert u_m.shape == img.shape
    assert 0 <= u_m.min() and u_m.max() <= math.exp(-1) + 1e-12
    assert 0 <= u_s.min() and u_s.max() <= 0.5


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    save_config(TINY, cfg_path)
    assert main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "data")]) == 0
    manifest = tmp_path / "data" / "manifest.tsv"
    assert main(["train", "--config", str(cfg_path), "--manifest", str(manifest),
                 "--out", str(tmp_path / "run"), "--seed", "0"]) == 0
    ckpt = tmp_path / "run" / "best_seed0.ckpt"
    assert ckpt.exists()
    assert main(["train", "--resume", str(tmp_path / "run" / "pretrain_seed0.ckpt"), "--manifest",
                 str(manifest), "--variant", "ic_only", "--out", str(tmp_path / "ic"), "--seed", "0"]) == 0
    recs = [json.loads(line) for line in (tmp_path / "ic" / "train_seed0.jsonl").read_text().splitlines()]
    steps = [r for r in recs if "L_S" in r]
    assert steps and all(r["phase"] == 2 and "L_IC" in r and "L_UFC" not in r for r in steps)
    assert recs[0]["header"]["config"]["variant"]["name"] == "ic_only"
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", str(manifest)]) == 0
    out = capsys.readouterr().out
    assert "aggregate\tn=2" in out
    vol = tmp_path / "data" / "images" / "tst_000.vol"
    assert main(["infer", "--ckpt", str(ckpt), "--volume", str(vol),
                 "--out", str(tmp_path / "p.vol"), "--mask", str(tmp_path / "m.vol")]) == 0
    assert read_volume(tmp_path / "p.vol").shape == (16, 16, 16)
    assert main(["overlay", "--ckpt", str(ckpt), "--volume", str(vol), "--out",
                 str(tmp_path / "ov"), "--slices", "3"]) == 0
    assert len(list((tmp_path / "ov").iterdir())) == 3
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", str(manifest),
                 "--split", "unlabeled_train"]) == 2
    assert main(["infer", "--ckpt", str(tmp_path / "nope.ckpt"), "--volume", str(vol),
                 "--out", str(tmp_path / "x.vol")]) == 2
