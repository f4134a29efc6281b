"""Command-line entry point: ``vqgnn {gen,train,infer,verify,sweep}``.

Exit status is 0 on success, 1 for bad input or configuration and 2 when a
run fails (numeric blow-up, failed certificate).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import verify
from .data import gen_er_dataset, gen_sbm, load_dataset, save_dataset
from .errors import ConfigError, InputError, NumericError, RunError, StateError
from .serialize import RunConfig, emit_metrics, load_checkpoint, load_run_config, save_checkpoint
from .trainer import ModelConfig, infer, train

log = logging.getLogger("vqgnn")

# flag name -> (config key, parser)
OVERRIDES = {
    "lr": ("lr", float),
    "batch-size": ("batch_size", int),
    "codebook-size": ("codebook_size", int),
    "layers": ("layers", int),
    "sampler": ("sampler", str),
    "seed": ("seed", int),
    "epochs": ("epochs", int),
    "conv": ("conv", str),
    "hidden": ("hidden", int),
    "f-prod": ("f_prod", int),
    "heads": ("heads", int),
    "dtype": ("dtype", str),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(f"{self.prog}: {message}")


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", help="dataset directory")
    for flag, (key, kind) in OVERRIDES.items():
        p.add_argument(f"--{flag}", dest=key, type=kind, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vqgnn", description="Mini-batch GNN training with vector-quantized messages.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic dataset directory")
    g.add_argument("--kind", choices=("sbm", "er"), default="sbm")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--p-in", type=float, default=0.02)
    g.add_argument("--p-out", type=float, default=0.002)
    g.add_argument("--p", type=float, default=0.01, help="edge probability for --kind er")
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--class-sep", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train and write metrics plus a checkpoint")
    _add_overrides(t)
    t.add_argument("--out", help="output directory")

    i = sub.add_parser("infer", help="predict classes with a trained checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--inductive", action="store_true",
                   help="nodes beyond the training graph are assigned to their nearest codewords")
    i.add_argument("--out", help="predictions file (default: predictions.tsv next to the checkpoint)")

    v = sub.add_parser("verify", help="run certification suites and write a JSON-lines report")
    v.add_argument("--suite", choices=("all", "equivalence", "bounds", "gradcheck", "jl"), default="all")
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default="verify_report.jsonl")

    s = sub.add_parser("sweep", help="train once per value of one flag")
    _add_overrides(s)
    s.add_argument("--flag", required=True, choices=sorted(OVERRIDES))
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", required=True)
    return parser


def _run_config(args) -> RunConfig:
    rc = load_run_config(args.config) if args.config else RunConfig(ModelConfig())
    d = rc.model.to_dict()
    for _, (key, _) in OVERRIDES.items():
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    rc.model = ModelConfig.from_dict(d)
    rc.data = args.data or rc.data
    rc.out = getattr(args, "out", None) or rc.out
    if rc.data is None:
        raise InputError("no dataset: pass --data or set 'data' in the config")
    return rc


def _train_one(cfg: ModelConfig, data, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    state, history = train(cfg, data, progress=lambda m: log.info(
        "epoch %d loss %.4f val %.4f test %.4f", m.epoch, m.train_loss, m.val_acc, m.test_acc))
    emit_metrics(history, out)
    save_checkpoint(state, out / "checkpoint.vqgn")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return history


def cmd_gen(args) -> int:
    if args.kind == "sbm":
        bundle = gen_sbm(args.n, args.classes, args.p_in, args.p_out, args.feature_dim, args.class_sep, args.seed)
    else:
        bundle = gen_er_dataset(args.n, args.p, args.classes, args.feature_dim, args.seed)
    save_dataset(bundle, args.out)
    return 0


def cmd_train(args) -> int:
    rc = _run_config(args)
    data = load_dataset(rc.data)
    history = _train_one(rc.model, data, Path(rc.out or "run"))
    last = history[-1] if history else None
    if last is not None:
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.4f} val_acc {last.val_acc:.4f} "
              f"test_acc {last.test_acc:.4f}")
    return 0


def cmd_infer(args) -> int:
    state = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    pred = infer(state, data, inductive=args.inductive).argmax(axis=1)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("predictions.tsv")
    with open(out, "w", newline="\n") as fh:
        fh.writelines(f"{i}\t{c}\n" for i, c in enumerate(pred.tolist()))
    labeled = data.test_mask & (data.labels >= 0)
    if labeled.any():
        print(f"test_acc {float(np.mean(pred[labeled] == data.labels[labeled])):.4f}")
    return 0


def cmd_verify(args) -> int:
    lines, ok = [], True
    suites = ("equivalence", "bounds", "gradcheck", "jl") if args.suite == "all" else (args.suite,)
    if "equivalence" in suites:
        res = verify.equivalence_suite()
        ok &= res["passed"]
        lines.append(json.dumps({"suite": "equivalence", **res}, sort_keys=True))
    if "bounds" in suites:
        for kind in ("gcn", "sage", "gin", "gat"):
            checks = [("forward", verify.check_forward_bound)]
            if kind != "gat":
                checks.append(("backward", verify.check_backward_bound))
            for name, fn in checks:
                reports = fn(args.trials, args.seed, kind)
                lines.extend(r.to_json() for r in reports)
                summary = verify.summarize(reports)
                ok &= summary["passed"] == summary["trials"]
                lines.append(json.dumps({"suite": "bounds", "kind": kind, "check": name, **summary}, sort_keys=True))
    if "gradcheck" in suites:
        for kind, mode, seed, r in verify.gradcheck_suite():
            ok &= r.passed
            lines.append(json.dumps({"suite": "gradcheck", "kind": kind, "mode": mode, "seed": seed,
                                     "max_rel_error": r.max_rel_error, "worst": r.worst, "passed": r.passed}))
    if "jl" in suites:
        rates = verify.jl_trend(seed=args.seed)
        vals = list(rates.values())
        passed = all(a > b for a, b in zip(vals, vals[1:]))
        ok &= passed
        lines.append(json.dumps({"suite": "jl", "failure_rate": {str(k): v for k, v in rates.items()},
                                 "passed": passed}))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"verify: {'all passed' if ok else 'FAILURES'}; report in {args.out}")
    return 0 if ok else 2


def cmd_sweep(args) -> int:
    rc = _run_config(args)
    key, kind = OVERRIDES[args.flag]
    try:
        values = [kind(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--values: cannot parse {args.values!r} for --{args.flag}") from None
    if not values:
        raise InputError("--values is empty")
    configs = [ModelConfig.from_dict({**rc.model.to_dict(), key: v}) for v in values]
    data = load_dataset(rc.data)
    root = Path(args.out)
    for v, cfg in zip(values, configs):
        history = _train_one(cfg, data, root / f"{args.flag}={v}")
        last = history[-1] if history else None
        if last is not None:
            print(f"{args.flag}={v}: test_acc {last.test_acc:.4f} eps {['%.4f' % e for e in last.eps_per_layer]}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "verify": cmd_verify, "sweep": cmd_sweep}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (InputError, ConfigError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RunError, NumericError, StateError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
