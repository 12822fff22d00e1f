"""Command line: generate, train, eval, infer, overlay, gradcheck, ablation, config."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import generate_dataset, read_manifest, read_volume, write_volume
from .metrics import Aggregate
from .net import load_network
from .pipeline import RunConfig, Trainer, load_config, load_dataset, prepare_dataset, save_config
from .pipeline.config import VARIANTS
from .pipeline.evaluate import evaluate, evaluation_lines, infer, infer_uncertainty
from .pipeline.overlay import emit_overlays


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "manifest", None):
        cfg = replace(cfg, manifest=str(args.manifest))
    if getattr(args, "variant", None):
        cfg = cfg.with_variant(args.variant)
    return cfg.validate()


def cmd_config(args) -> int:
    save_config(RunConfig(), args.out)
    print(f"wrote default config to {args.out}")
    return 0


def cmd_generate(args) -> int:
    cfg = _config(args)
    seed = cfg.data_seed if args.seed is None else args.seed
    man = generate_dataset(cfg.phantom, cfg.counts, seed, args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.tsv"), "counts": man.counts(),
                      "seed": seed}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_dataset(cfg, out)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds[:1])
    echo = print if args.verbose else None
    for seed in seeds:
        log_path = out / f"train_seed{seed}.jsonl"
        if args.resume:
            variant = VARIANTS[args.variant] if args.variant else None
            tr = Trainer.resume(args.resume, data, log_path=log_path, variant=variant, echo=echo)
            # pretrain checkpoints are written after phase 1 finishes
            if tr.phase == 1 and tr.epoch < tr.cfg.pretrain_epochs:
                tr.run_phase1()
        else:
            tr = Trainer(cfg, data, seed, log_path=log_path, echo=echo)
            tr.run_phase1()
        tr.save(out / f"pretrain_seed{seed}.ckpt")
        best = tr.run_phase2()
        tr.save(out / f"best_seed{seed}.ckpt")
        print(json.dumps({"seed": seed, "best": best, "checkpoint": str(out / f"best_seed{seed}.ckpt"),
                          "log": str(log_path)}))
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(args.manifest)
    cases = data.require_labels(args.split)
    per_seed = []
    for ckpt in args.ckpt:
        net, _, _ = load_network(ckpt)
        reports, agg = evaluate(net, cases, args.stride)
        print(f"# {ckpt}")
        for line in evaluation_lines(cases, reports):
            print(line)
        per_seed.append(agg)
    if len(per_seed) > 1:
        print(Aggregate.over_seeds(per_seed).line("over_seeds"))
    return 0


def cmd_infer(args) -> int:
    net, _, _ = load_network(args.ckpt)
    vol = read_volume(args.volume)
    pred = infer(net, vol.data, args.stride)
    write_volume(args.out, pred.probability.astype(np.float32), vol.spacing)
    if args.mask:
        write_volume(args.mask, pred.mask.astype(np.uint8), vol.spacing)
    print(json.dumps({"probability": str(args.out), "mask": args.mask,
                      "foreground_voxels": int(pred.mask.sum())}))
    return 0


def cmd_overlay(args) -> int:
    net, _, _ = load_network(args.ckpt)
    image = read_volume(args.volume).data
    label = read_volume(args.label).data if args.label else np.zeros(image.shape, np.uint8)
    pred = infer(net, image, args.stride)
    u_m, u_s = infer_uncertainty(net, image, args.stride, seed=args.seed)
    files = emit_overlays(image, pred.mask, label, u_m, u_s, args.out,
                          slices=args.slices or None)
    print(json.dumps({"written": len(files), "dir": str(args.out)}))
    return 0


def cmd_gradcheck(args) -> int:
    from .pipeline.checks import check_full_objective
    from .tensor.gradcheck import OP_CASES, check_op

    worst = 0.0
    for kind in sorted(OP_CASES):
        rep = check_op(kind, trials=args.trials, seed=args.seed)
        worst = max(worst, rep.max_error)
        print(f"op {kind:14s} max rel err {rep.max_error:.3e}")
    if not args.ops_only:
        rep, info = check_full_objective(seed=args.seed, max_coords=args.max_coords)
        worst = max(worst, rep.max_error)
        print(f"full objective ({info['parameters']} parameters, {rep.checked} checked) "
              f"max rel err {rep.max_error:.3e}")
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_ablation(args) -> int:
    from .pipeline.experiment import ordering_checks, run_ablation

    cfg = _config(args)
    seeds = args.seeds if args.seeds else cfg.seeds
    res = run_ablation(cfg, args.out, seeds=seeds, echo=print)
    for line in res.table():
        print(line)
    for name, ok in ordering_checks(res).items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"total {res.seconds:.0f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="udcnet", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("config", help="write the default run config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_config)

    p = sub.add_parser("generate", help="write a phantom dataset and manifest")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="pretrain then finetune one run")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--resume")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="metrics of checkpoints on a labeled split")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--stride", type=int)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="segment one volume with the main decoder")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask")
    p.add_argument("--stride", type=int)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("overlay", help="slice overlays and uncertainty heat maps")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=int)
    p.add_argument("--slices", type=int, nargs="*")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_overlay)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops and the full objective")
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-coords", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablation", help="component ablation with shared pretraining")
    p.add_argument("--config")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="*")
    p.set_defaults(fn=cmd_ablation)
    return ap


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
