"""Command-line entry point: ``gunn <command> [flags]``.

Exit status is 0 on success, 1 on a validation error and 2 on a numerical
failure (gradient check violation or divergence). Machine-readable CSV goes
to ``--out`` (``-`` for stdout); human-readable tables go to stdout, or to
stderr whenever the CSV occupies stdout.
"""

from __future__ import annotations

import argparse
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .arch import (PRESETS, SpecError, build_tiny_pair, config_digest, convert_mode, dump_config, load_config,
                   parameter_breakdown, parameter_count, stage_geometry)
from .checkpoint import convert_checkpoint, load_checkpoint, save_checkpoint
from .data import DataError, DatasetSource, default_root, load_cifar, train_stats
from .engine import GRADUAL, NAIVE, SIMULTANEOUS, peak_activation_bytes
from .gradcheck import run_suite
from .singularity import FORMS, run_collapse_experiment
from .tensor import FormatError, ShapeError, resolve_dtype
from .train import NumericalError, TrainConfig, evaluate, metrics_csv, network_from_checkpoint, run_header, train

MODES = {"gunn": GRADUAL, "sunn": SIMULTANEOUS}
TINY_SCALE = "1/20"
TINY_PARTITIONS = (4, 5, 6)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------------------
# shared helpers


def _partitions(text):
    if text is None:
        return None
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise SpecError(f"--partitions expects comma-separated integers, got {text!r}") from None


def _resolve_spec(args):
    """Network spec from ``--config`` or a preset name, validated."""
    mode = MODES[args.mode]
    if getattr(args, "config", None):
        spec = load_config(Path(args.config))
        return convert_mode(spec, mode)
    preset = args.preset or "tiny"
    if preset == "tiny":
        parts = _partitions(args.partitions)
        if parts is None and args.scale == TINY_SCALE:
            parts = TINY_PARTITIONS
        pair = build_tiny_pair(args.scale, classes=args.classes or 10, partitions=parts,
                               residual=not getattr(args, "no_residual", False))
        return pair[0] if mode == GRADUAL else pair[1]
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(['tiny', *PRESETS])}")
    if args.classes is not None:
        return PRESETS[preset](classes=args.classes, mode=mode)
    return PRESETS[preset](mode=mode)


@contextmanager
def _streams(out):
    """Yield ``(csv_stream, table_stream)`` honouring the no-interleave rule."""
    if out is None:
        yield None, sys.stdout
    elif out == "-":
        yield sys.stdout, sys.stderr
    else:
        with open(out, "w", newline="") as fp:
            yield fp, sys.stdout


def _data_root(args) -> str:
    root = args.data_root or default_root()
    if not root:
        raise DataError("no dataset location: pass --data-root or set GUNN_DATA_ROOT")
    return root


def _add_model_flags(p, preset_positional=True):
    if preset_positional:
        p.add_argument("preset", nargs="?", help="gunn15 | gunn24 | gunn18 | wide-gunn18 | tiny")
    else:
        p.add_argument("--preset", default="tiny")
    p.add_argument("--config", help="network config file (overrides the preset)")
    p.add_argument("--classes", type=int)
    p.add_argument("--mode", choices=sorted(MODES), default="gunn")
    p.add_argument("--scale", default=TINY_SCALE, help="width scale of the tiny twins")
    p.add_argument("--partitions", help="segment counts of the tiny twins, e.g. 4,5,6")
    p.add_argument("--no-residual", action="store_true", help="tiny twins without residual adds")


# ----------------------------------------------------------------------------
# commands


def cmd_build(args) -> int:
    spec = _resolve_spec(args)
    header = run_header(spec, 0, command="build")
    print(f"# {header}")
    width = max(len(name) for name, _ in parameter_breakdown(spec))
    for name, count in parameter_breakdown(spec):
        print(f"{name:<{width}}  {count:>12,}")
    print(f"{'total':<{width}}  {parameter_count(spec):>12,}")
    if args.out:
        Path(args.out).write_text(dump_config(spec))
    return 0


def cmd_gradcheck(args) -> int:
    mode = MODES[args.mode]
    results = run_suite(args.configs, seed=args.seed, mode=mode)
    print(f"# gunn={__version__} seed={args.seed} mode={mode} configs={args.configs}")
    failed = False
    for r in results:
        ok = r.oracle_error < args.tolerance and r.fd_error < args.fd_tolerance
        failed |= not ok
        line = (f"N={r.config[0]} P={r.config[1]} K={r.config[2]} M={r.config[3]} "
                f"batch={r.config[4]} hw={r.config[5]}  oracle={r.oracle_error:.2e} fd={r.fd_error:.2e} kinks={r.skipped}")
        if not ok:
            line += f"  FAIL worst block {r.worst_block}"
        print(line)
    worst_o = max(r.oracle_error for r in results)
    worst_f = max(r.fd_error for r in results)
    print(f"max oracle error {worst_o:.3e} (tolerance {args.tolerance:g}); "
          f"max finite-difference error {worst_f:.3e} (tolerance {args.fd_tolerance:g})")
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return 2
    print("gradient check passed")
    return 0


def cmd_singularity(args) -> int:
    run = run_collapse_experiment(args.form, n=args.n, steps=args.steps, seed=args.seed, lr=args.lr,
                                  collapsed=args.collapse_init)
    with _streams(args.out or "-") as (csv_fp, table):
        csv_fp.write(f"# gunn={__version__} command=singularity\n")
        csv_fp.write(run.to_csv())
        p, q = run.pair
        print(f"form {run.form}, pair ({p}, {q}): gap {run.gaps[0]:.3e} at step 0, "
              f"{run.gaps[-1]:.3e} at step {run.steps[-1]}; loss {run.losses[0]:.4g} -> {run.losses[-1]:.4g}",
              file=table)
    return 0


def cmd_memplan(args) -> int:
    spec = _resolve_spec(args)
    itemsize = np.dtype(resolve_dtype(args.precision)).itemsize
    rows = []
    for i, (_, st, hw) in enumerate(stage_geometry(spec, args.input_size), start=1):
        c = st.config
        shape = (args.batch, c.N, hw, hw)
        g = peak_activation_bytes(c, shape, GRADUAL, itemsize)
        s = peak_activation_bytes(c, shape, SIMULTANEOUS, itemsize)
        n = peak_activation_bytes(c, shape, NAIVE, itemsize)
        rows.append((i, c, hw, g, s, n))
    with _streams(args.out) as (csv_fp, table):
        print(f"# {run_header(spec, 0, command='memplan', batch=args.batch, precision=args.precision)}", file=table)
        if csv_fp is not None:
            csv_fp.write("stage,N,P,hw,gradual_bytes,simultaneous_bytes,naive_bytes\n")
            for i, c, hw, g, s, n in rows:
                csv_fp.write(f"{i},{c.N},{c.P},{hw},{g},{s},{n}\n")
        print(f"{'gunn':>5} {'N':>5} {'P':>4} {'hw':>4} {'gradual MB':>11} {'simult. MB':>11} {'naive MB':>11}"
              f" {'grad/sim':>9} {'naive/grad':>10}", file=table)
        for i, c, hw, g, s, n in rows:
            print(f"{i:>5} {c.N:>5} {c.P:>4} {hw:>4} {g / 2**20:>11.1f} {s / 2**20:>11.1f} {n / 2**20:>11.1f}"
                  f" {g / s:>9.3f} {n / g:>10.2f}", file=table)
    return 0


def _load_split(args, split, subset, dtype, mean, std):
    src = DatasetSource(_data_root(args), split, args.classes or 10, subset, args.seed)
    return load_cifar(src, mean, std, dtype)


def cmd_train(args) -> int:
    spec = _resolve_spec(args)
    epochs = args.epochs
    config = TrainConfig.desk(epochs, batch=args.batch, seed=args.seed, precision=args.precision,
                              lr0=args.lr) if args.desk_schedule else TrainConfig(
        epochs=epochs, batch=args.batch, seed=args.seed, precision=args.precision, lr0=args.lr)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and config_digest(resume.spec) != config_digest(spec):
        raise SpecError("resume checkpoint was written for a different network config")
    root = _data_root(args)
    dtype = resolve_dtype(args.precision)
    mean, std = train_stats(root, args.classes or 10)
    train_data = _load_split(args, "train", args.subset, dtype, mean, std)
    test_data = _load_split(args, "test", args.test_subset, dtype, mean, std) if args.test_subset != 0 else None
    header = run_header(spec, args.seed, command="train", epochs=epochs, batch=args.batch, subset=args.subset,
                        precision=args.precision)
    with _streams(args.out or "-") as (csv_fp, table):
        print(f"# {header}", file=table)
        result = train(spec, train_data, config, test_data=test_data, resume=resume,
                       checkpoint_path=args.checkpoint, log=lambda m: print(m, file=table, flush=True),
                       norm=(mean, std))
        csv_fp.write(metrics_csv(result.rows, header=header))
        if result.diverged:
            print(f"training diverged: {result.message}", file=sys.stderr)
            return 2
    return 0


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if args.classes is not None and args.classes != ck.spec.classes:
        raise SpecError(f"--classes {args.classes} does not match the {ck.spec.classes}-class checkpoint")
    net = network_from_checkpoint(ck, args.precision)
    if args.mode is not None:
        net.set_mode(MODES[args.mode])
    if "norm.mean" in ck.tensors:
        mean, std = ck.tensors["norm.mean"], ck.tensors["norm.std"]
    else:
        mean, std = train_stats(_data_root(args), ck.spec.classes)
    src = DatasetSource(_data_root(args), args.split, ck.spec.classes, args.subset, args.seed)
    images, labels = load_cifar(src, mean, std, net.dtype)
    res = evaluate(net, images, labels)
    print(f"# {run_header(ck.spec, args.seed, command='eval', split=args.split)}")
    for k, v in res.items():
        print(f"{k}_error {v:.4f}")
    return 0


def cmd_convert(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    out = convert_checkpoint(ck, MODES[args.to])
    save_checkpoint(args.out, out)
    print(f"# gunn={__version__} command=convert config={out.spec.name}:{config_digest(out.spec)}")
    print(f"wrote {args.out} ({args.to})")
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gunn", description="Gradually updated networks: build, train and inspect.")
    parser.add_argument("--version", action="version", version=f"gunn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="print the per-stage parameter table of a network")
    _add_model_flags(p)
    p.add_argument("--out", help="also write the resolved network config to this file")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("gradcheck", help="randomized gradient checks of the layer backward")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-10, help="oracle error bound (strict)")
    p.add_argument("--fd-tolerance", type=float, default=1e-5, help="finite-difference bound (strict)")
    p.add_argument("--mode", choices=sorted(MODES), default="gunn")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("singularity", help="collapse experiment on small linear networks")
    p.add_argument("--form", choices=FORMS, default="gradual")
    p.add_argument("--n", type=int, default=6)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--collapse-init", action="store_true", help="start from a coincident neuron pair")
    p.add_argument("--out", help="CSV path, '-' for stdout (default)")
    p.set_defaults(func=cmd_singularity)

    p = sub.add_parser("memplan", help="accounted activation memory per GUNN stage")
    _add_model_flags(p)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--input-size", type=int, default=None, help="input resolution (32 for CIFAR, 224 otherwise)")
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")
    p.add_argument("--out", help="CSV path, '-' for stdout")
    p.set_defaults(func=cmd_memplan)

    p = sub.add_parser("train", help="SGD training on CIFAR")
    _add_model_flags(p, preset_positional=False)
    p.add_argument("--data-root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--subset", type=int, default=5000)
    p.add_argument("--test-subset", type=int, default=1000, help="0 disables test evaluation")
    p.add_argument("--precision", choices=["f32", "f64"], default="f32")
    p.add_argument("--full-schedule", dest="desk_schedule", action="store_false",
                   help="learning-rate drops at epochs 150 and 225 instead of 1/2 and 3/4 of --epochs")
    p.add_argument("--checkpoint", help="checkpoint written at every epoch boundary")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--out", help="metrics CSV path, '-' for stdout (default)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 (and top-5) error of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data-root")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--subset", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int)
    p.add_argument("--mode", choices=sorted(MODES))
    p.add_argument("--precision", choices=["f32", "f64"], default="f64")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="switch every GUNN stage of a checkpoint to one mode")
    p.add_argument("checkpoint")
    p.add_argument("--to", choices=sorted(MODES), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "input_size", "unset") is None:
            args.input_size = 224 if args.preset in ("gunn18", "wide-gunn18") else 32
        return args.func(args)
    except UsageError as exc:
        print(f"gunn: error: {exc}", file=sys.stderr)
        return 1
    except (SpecError, DataError, FormatError, ShapeError, ValueError, FileNotFoundError) as exc:
        print(f"gunn: error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError) as exc:
        print(f"gunn: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
