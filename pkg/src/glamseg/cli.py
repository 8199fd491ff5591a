"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 numeric failure
(non-finite loss, tolerance breach in a verification command).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import GlamError, NumericError
from .tensor import precision

OK, INVALID, NUMERIC = 0, 1, 2
COMPOSITION_TOL = 1e-10
GRAD_TOL = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is reserved for numeric failures
        raise UsageError(f"{self.prog}: {message}")


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two integers 'A,B', got {text!r}") from None
    return a, b


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glamseg", description="GLAM windowed-transformer segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=False, model=False):
        sp.add_argument("--config", type=Path, help="flat key = value config file")
        sp.add_argument("--seed", type=_seed)
        sp.add_argument("--out", type=Path, required=True)
        if data:
            sp.add_argument("--data", type=Path, required=True)
        if model:
            sp.add_argument("--ng", type=int, help="global tokens per window (0 removes them)")
            sp.add_argument("--no-gmsa", action="store_true", help="keep globals but skip the global MSA")
            sp.add_argument("--no-nlu", action="store_true", help="patch-expansion decoder instead of NLU")

    sp = sub.add_parser("gen-data", help="write the synthetic key-patch dataset")
    common(sp)

    sp = sub.add_parser("train", help="train a model on a generated dataset")
    common(sp, data=True, model=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--steps", type=int, help="stop after this many steps (0 = run all epochs)")
    sp.add_argument("--lr", type=float, help="initial learning rate")

    sp = sub.add_parser("eval", help="evaluate the checkpoint in --out on the eval split")
    common(sp, data=True)

    sp = sub.add_parser("grad-check", help="finite-difference gradient suite")
    sp.add_argument("--seed", type=_seed, default=0)
    sp.add_argument("--samples", type=int, default=4, help="coordinates checked per tensor")

    sp = sub.add_parser("verify-glam", help="bare-mode composition and mass-conservation check")
    sp.add_argument("--seed", type=_seed, default=0)
    sp.add_argument("--nr", type=int, default=4)
    sp.add_argument("--ng", type=int, default=2)
    sp.add_argument("--np", type=int, default=4)
    sp.add_argument("--c", type=int, default=3)

    sp = sub.add_parser("flops", help="parameter and FLOP report as CSV")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--out", type=Path, help="directory for costs.csv (stdout only if omitted)")
    sp.add_argument("--ng", type=int)
    sp.add_argument("--no-gmsa", action="store_true")
    sp.add_argument("--no-nlu", action="store_true")

    sp = sub.add_parser("attn-dump", help="export the induced attention of one query as CSV + PGM")
    common(sp, data=True)
    sp.add_argument("--stage", type=int, default=0)
    q = sp.add_mutually_exclusive_group(required=True)
    q.add_argument("--token", type=_pair, metavar="K,R", help="global token K of window R")
    q.add_argument("--patch", type=_pair, metavar="I,R", help="patch I of window R")
    sp.add_argument("--sample", type=int, default=0, help="index into the eval split")
    sp.add_argument("--block", type=int, default=-1)
    return p


def resolve(args) -> cfgmod.RunConfig:
    """Config file, then command-line overrides."""
    path = getattr(args, "config", None)
    if path is None and args.command in ("eval", "attn-dump") and (args.out / "config.txt").exists():
        path = args.out / "config.txt"
    cfg = cfgmod.load(path)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "ng", None) is not None:
        cfg.model.n_g = args.ng
    if getattr(args, "no_gmsa", False):
        cfg.model.gmsa_enabled = False
    if getattr(args, "no_nlu", False):
        cfg.model.nlu_enabled = False
    for flag, attr in (("epochs", "epochs"), ("batch", "batch"), ("steps", "steps"), ("lr", "lr0")):
        if getattr(args, flag, None) is not None:
            setattr(cfg.train, attr, getattr(args, flag))
    if cfg.train.epochs < 1 or cfg.train.batch < 1 or cfg.train.steps < 0:
        raise UsageError("epochs and batch must be positive, steps nonnegative")
    return cfg.sync()


def _echo(cfg: cfgmod.RunConfig, out: Path | None) -> None:
    text = cfgmod.dump(cfg)
    print(f"seed: {cfg.seed}")
    print("resolved config:")
    print("".join(f"  {line}\n" for line in text.splitlines()), end="")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(text, encoding="utf-8")


def _model(cfg: cfgmod.RunConfig):
    from .model import SegModel
    return SegModel(cfg.model, seed=cfg.seed)


def _split(data: Path, name: str):
    from .data import load_dataset
    root = data / name
    if not (root / "manifest.txt").exists():
        raise UsageError(f"no dataset at {root} (run gen-data first)")
    return load_dataset(root)


def _check_task(cfg: cfgmod.RunConfig, task) -> None:
    from dataclasses import asdict
    want, got = asdict(cfg.task), asdict(task)
    diff = sorted(k for k in want if k != "seed" and want[k] != got.get(k))
    if diff:
        raise UsageError(f"dataset was generated with different settings: {', '.join(diff)}")


def cmd_gen_data(args) -> int:
    from .data import generate, save_dataset
    cfg = resolve(args)
    _echo(cfg, args.out)
    save_dataset(args.out / "train", cfg.task, generate(cfg.task, cfg.num_train))
    # eval indices start past the training range so the splits never overlap
    save_dataset(args.out / "eval", cfg.task, generate(cfg.task, cfg.num_eval, start=cfg.num_train))
    print(f"wrote {cfg.num_train} train and {cfg.num_eval} eval samples to {args.out}")
    return OK


def _report(metrics: dict) -> str:
    keys = ("miou", "mean_dice", "pixel_accuracy", "target_accuracy")
    return "".join(f"{k} = {metrics[k]:.10g}\n" for k in keys)


def cmd_train(args) -> int:
    from .train import evaluate, train
    cfg = resolve(args)
    _echo(cfg, args.out)
    task, samples = _split(args.data, "train")
    _check_task(cfg, task)
    with precision("training"):
        model = _model(cfg)
        log = train(model, samples, cfg.train, args.out)
        met = evaluate(model, samples)
    last = log[-1]
    print(f"trained {last['step']} steps: final epoch loss {last['loss']:.6g}, train miou {met['miou']:.4f}")
    return OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_checkpoint
    cfg = resolve(args)
    _echo(cfg, None)
    task, samples = _split(args.data, "eval")
    _check_task(cfg, task)
    with precision("training"):
        model = _model(cfg)
        load_checkpoint(model, args.out / "model.ckpt")
        met = evaluate(model, samples)
    text = _report(met)
    (args.out / "eval.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return OK


def cmd_grad_check(args) -> int:
    from .gradcheck import gradient_suite
    print(f"seed: {args.seed}")
    with precision("checking"):
        results = gradient_suite(args.seed, args.samples)
    bad = 0
    for r in results:
        ok = r.ok(GRAD_TOL)
        bad += not ok
        print(f"{r.name:12s} max rel error {r.max_rel_error:.3e} over {r.samples} coords  {'ok' if ok else 'FAIL'}")
    return NUMERIC if bad else OK


def cmd_verify_glam(args) -> int:
    from .glam import bare_check
    if min(args.nr, args.ng, args.np, args.c) < 1:
        raise UsageError("--nr, --ng, --np and --c must be positive")
    print(f"seed: {args.seed}")
    print(f"nr = {args.nr}, ng = {args.ng}, np = {args.np}, c = {args.c}")
    with precision("checking"):
        comp, mass = bare_check(args.nr, args.ng, args.np, args.c, args.seed)
    print(f"max composition error: {comp:.3e}")
    print(f"max mass conservation error: {mass:.3e}")
    return OK if comp < COMPOSITION_TOL else NUMERIC


def cmd_flops(args) -> int:
    from .analysis import cost_report
    cfg = resolve(args)
    text = cost_report(cfg.model).to_csv()
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "costs.csv").write_text(text, encoding="utf-8")
        (args.out / "config.txt").write_text(cfgmod.dump(cfg), encoding="utf-8")
    sys.stdout.write(text)
    return OK


def cmd_attn_dump(args) -> int:
    from .analysis import export_attention
    from .train import load_checkpoint
    cfg = resolve(args)
    _echo(cfg, None)
    _, samples = _split(args.data, "eval")
    if not 0 <= args.sample < len(samples):
        raise UsageError(f"--sample {args.sample} out of range [0, {len(samples)})")
    if args.token is not None:
        tag, kw = f"token{args.token[0]}_win{args.token[1]}", {"token": args.token}
    else:
        tag, kw = f"patch{args.patch[0]}_win{args.patch[1]}", {"patch": args.patch}
    prefix = args.out / f"attn_stage{args.stage}_{tag}"
    with precision("training"):
        model = _model(cfg)
        load_checkpoint(model, args.out / "model.ckpt")
        amap = export_attention(model, samples[args.sample][0], args.stage, prefix, block=args.block, **kw)
    print(f"wrote {prefix}.csv, .pgm and .meta.txt")
    for k, v in amap.meta.items():
        print(f"  {k}: {v}")
    return OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "verify-glam": cmd_verify_glam,
    "flops": cmd_flops,
    "attn-dump": cmd_attn_dump,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return NUMERIC
    except (UsageError, GlamError, ValueError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID


if __name__ == "__main__":
    sys.exit(main())
