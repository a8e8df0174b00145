"""Command-line entry point: ``cgpt {train,eval,ood,bench,gradcheck,selftest}``."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path

import torch

from ..transformer import AttentionTag, configure_threads
from .config import RunConfig


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.attention is not None:
        cfg.model = replace(cfg.model, attention=AttentionTag(args.attention).value)
    return cfg


def _emit(obj, out_dir: str | None = None, name: str | None = None):
    text = json.dumps(obj, sort_keys=True, indent=2)
    if out_dir and name:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / name).write_text(text)
    print(text)


def cmd_train(args):
    from .run import run

    cfg = _load_config(args)

    def log(r):
        print(json.dumps({"epoch": r.epoch, "task_loss": r.task_loss, "alpha": r.alpha,
                          "train_accuracy": r.train_accuracy, "val_accuracy": r.val_accuracy}), file=sys.stderr)

    res = run(cfg, log=log if args.verbose else None)
    _emit({"out_dir": cfg.out_dir, "clean": {k: v for k, v in res["clean"].items() if k != "bins"}})


def cmd_eval(args):
    from .run import evaluate, load_trained

    out = args.out or "out"
    model, cfg, ds = load_trained(out)
    res = evaluate(model, ds, replace(cfg, metrics=replace(cfg.metrics, ood=False)))
    res.pop("ood")
    _emit(res, out, "eval.json")


def cmd_ood(args):
    from .run import load_trained, ood_section

    out = args.out or "out"
    model, cfg, ds = load_trained(out)
    _emit({"ood": ood_section(model, ds, cfg)}, out, "ood.json")


def cmd_bench(args):
    from .bench import bench, write_bench_csv

    n_values = [int(v) for v in args.n.split(",")]
    m_values = [int(v) for v in args.m.split(",")]
    rows = bench(n_values, m_values, args.repeats, seed=args.seed or 0)
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    write_bench_csv(rows, out / "bench.csv")
    _emit([asdict(r) for r in rows])


def cmd_gradcheck(args):
    from ..transformer import CGPTransformer, McConfig, ModelConfig, ParamStore, gradcheck, model_forward, total_loss

    kind = AttentionTag(args.attention or "CgpExact").value
    seed = args.seed or 0
    cfg = ModelConfig(layers=1, heads=1, d=8, s=4, classes=3, attention=kind, inducing_m=3, inducing_l=3)
    model = CGPTransformer(cfg, seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 4, cfg.input_dim, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 2])
    mc = McConfig(4, seed)

    def loss():
        out = model_forward(x, model, "train", mc=mc)
        return total_loss(out.logits, y, out.U_total, 0.5).total

    err = gradcheck(ParamStore(model), loss, probe_count=args.probes, eps=1e-5, seed=seed)
    _emit({"attention": kind, "probes": args.probes, "max_rel_error": err, "pass": err <= 1e-4})
    if err > 1e-4:
        raise SystemExit(1)


def cmd_selftest(args):
    from .selftest import selftest

    results = selftest()
    _emit(results)
    if not all(r["pass"] for r in results):
        raise SystemExit(1)


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ood": cmd_ood,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgpt", description="Correlated-GP attention workbench")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--seed", type=int, help="root seed (u64)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--attention", choices=[t.value for t in AttentionTag])
        if name == "train":
            p.add_argument("--verbose", action="store_true", help="log every epoch to stderr")
        if name == "bench":
            p.add_argument("--n", default="64,128,256,512", help="comma-separated sequence lengths")
            p.add_argument("--m", default="8,16,32", help="comma-separated inducing counts")
            p.add_argument("--repeats", type=int, default=20)
        if name == "gradcheck":
            p.add_argument("--probes", type=int, default=50)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_threads()
    try:
        COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # any module error becomes a JSON record and a nonzero exit
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command,
                  "traceback": traceback.format_exc().splitlines()[-5:]}
        print(json.dumps(record), file=sys.stderr)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "error.json").write_text(json.dumps(record, indent=2))
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
