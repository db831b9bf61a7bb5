"""Command-line front end.

Subcommands operate on plain text vectors (one value per line, '#'
comments) and emit delimited text with a one-line header plus a
``<output>.manifest`` sidecar recording every resolved parameter, so a
rerun with the same manifest is byte-identical.

Exit codes: 0 success, 1 usage error, 2 numerical failure
(non-convergence or underflow).
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import __version__
from .errors import NumericalError
from .losses import (
    QuantileSpec,
    TrainConfig,
    LinearModel,
    TwoLayerModel,
    load_dataset,
    quantile_target,
    train_least_quantile,
)
from .measures import CostSpec, uniform_weights
from .sinkhorn import SinkhornConfig, solve_rank_sort

__all__ = ["main"]

_DEFAULT_SWEEP = "1e-4,1e-3,1e-2,1e-1,1,10,100,1000"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_vector(path):
    """One real per line; '#' starts a comment; blank lines skipped."""
    values = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise UsageError(str(exc)) from None
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise UsageError(f"{path}:{lineno}: could not parse {line!r}") from None
    if not values:
        raise UsageError(f"{path}: no values found")
    return np.asarray(values)


def write_manifest(output_path, entries):
    with open(f"{output_path}.manifest", "w", encoding="utf-8") as fh:
        for key in sorted(entries):
            fh.write(f"{key}={_fmt(entries[key])}\n")


def _write_values(path, header, values):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for v in values:
            fh.write(repr(float(v)) + "\n")


def _common_flags(sub):
    sub.add_argument("input", help="input vector file, one value per line")
    sub.add_argument("--output", default=None, help="output path (default: derived)")
    sub.add_argument("--epsilon", type=float, default=1e-2)
    sub.add_argument("--eta", type=float, default=1e-3)
    sub.add_argument("--m", type=int, default=None, help="number of target points")
    sub.add_argument("--cost-p", type=float, default=2.0, help="cost exponent p >= 1")
    sub.add_argument(
        "--squash", choices=("logistic", "arctan", "none"), default="logistic"
    )
    sub.add_argument(
        "--mode", choices=("log-domain", "multiplicative"), default="log-domain"
    )
    sub.add_argument("--max-iters", type=int, default=5000)
    sub.add_argument(
        "--quantile-weights",
        default=None,
        help="comma-separated target weights (overrides --m)",
    )


def build_parser():
    parser = _Parser(prog="sinkrank", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    for name in ("rank", "sort"):
        sub = subs.add_parser(name, help=f"smoothed {name} of a value vector")
        _common_flags(sub)

    sweep = subs.add_parser("sweep-epsilon", help="rank/sort rows per epsilon")
    _common_flags(sweep)
    sweep.add_argument("--epsilons", default=_DEFAULT_SWEEP)

    quant = subs.add_parser("quantile", help="soft quantile plus transport plan")
    quant.add_argument("input")
    quant.add_argument("--output", default=None)
    quant.add_argument("--tau", type=float, required=True)
    quant.add_argument("--t", type=float, default=None, help="filler weight")
    quant.add_argument("--epsilon", type=float, default=1e-2)
    quant.add_argument("--eta", type=float, default=1e-3)
    quant.add_argument("--max-iters", type=int, default=5000)

    reg = subs.add_parser(
        "quantile-regression", help="least-quantile regression, soft vs baseline"
    )
    reg.add_argument("input", help="dataset file: features then response per line")
    reg.add_argument("--output", default=None)
    reg.add_argument("--tau", type=float, default=0.5)
    reg.add_argument("--epsilon", type=float, default=1e-2)
    reg.add_argument("--epochs", type=int, default=50)
    reg.add_argument("--seed", type=int, default=0)
    reg.add_argument("--batch-size", type=int, default=512)
    reg.add_argument("--step-size", type=float, default=1e-2)
    reg.add_argument("--model", choices=("linear", "mlp"), default="linear")
    reg.add_argument("--holdout-fraction", type=float, default=0.25)
    return parser


def _target_from_args(args, n):
    if args.quantile_weights is not None:
        try:
            b = np.array([float(p) for p in args.quantile_weights.split(",")])
        except ValueError:
            raise UsageError(
                f"could not parse --quantile-weights {args.quantile_weights!r}"
            ) from None
        return b
    m = args.m if args.m is not None else n
    return uniform_weights(m)


def _solve_from_args(args, x, epsilon=None):
    b = _target_from_args(args, x.size)
    cfg = SinkhornConfig(
        epsilon=epsilon if epsilon is not None else args.epsilon,
        eta=args.eta,
        max_iters=args.max_iters,
        mode=args.mode,
    )
    h = CostSpec(exponent=args.cost_p)
    result, state = solve_rank_sort(x, b=b, h=h, cfg=cfg, squashing=args.squash)
    if not state.converged:
        raise NumericalError(
            f"Sinkhorn did not reach eta={cfg.eta} within "
            f"{state.iterations_used} iterations (epsilon={cfg.epsilon})"
        )
    return result, state, b, cfg, h


def _base_manifest(args, command, output):
    return {
        "command": command,
        "version": __version__,
        "input": args.input,
        "output": output,
    }


def cmd_rank_or_sort(args):
    x = read_vector(args.input)
    result, state, b, cfg, h = _solve_from_args(args, x)
    kind = "s_ranks" if args.command == "rank" else "s_sorts"
    values = result.s_ranks if args.command == "rank" else result.s_sorts
    output = args.output or f"{args.input}.{args.command}s.txt"
    _write_values(output, kind, values)
    manifest = _base_manifest(args, args.command, output)
    manifest.update(
        epsilon=cfg.epsilon,
        eta=cfg.eta,
        m=b.size,
        cost_p=h.exponent,
        squash=args.squash,
        mode=cfg.mode,
        max_iters=cfg.max_iters,
        iterations_used=state.iterations_used,
        target_weights=",".join(repr(float(w)) for w in b),
    )
    write_manifest(output, manifest)
    print(f"wrote {output} ({values.size} values)")
    return 0


def cmd_sweep(args):
    x = read_vector(args.input)
    try:
        grid = [float(tok) for tok in args.epsilons.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"could not parse --epsilons {args.epsilons!r}") from None
    if not grid:
        raise UsageError("empty epsilon grid")
    output = args.output or f"{args.input}.sweep.txt"
    lines = ["epsilon\tkind\tvalues"]
    manifest_extra = {}
    for eps in grid:
        result, state, b, cfg, h = _solve_from_args(args, x, epsilon=eps)
        for kind, vals in (("rank", result.s_ranks), ("sort", result.s_sorts)):
            cells = "\t".join(repr(float(v)) for v in vals)
            lines.append(f"{eps!r}\t{kind}\t{cells}")
        manifest_extra[f"iterations_used_{eps!r}"] = state.iterations_used
    with open(output, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    manifest = _base_manifest(args, "sweep-epsilon", output)
    manifest.update(
        epsilons=args.epsilons,
        eta=args.eta,
        m=_target_from_args(args, x.size).size,
        cost_p=args.cost_p,
        squash=args.squash,
        mode=args.mode,
        max_iters=args.max_iters,
        **manifest_extra,
    )
    write_manifest(output, manifest)
    print(f"wrote {output} ({len(grid)} epsilon values)")
    return 0


def cmd_quantile(args):
    x = read_vector(args.input)
    spec = QuantileSpec(tau=args.tau, t=args.t, epsilon=args.epsilon)
    t = spec.filler_for(x.size)
    b, y = quantile_target(args.tau, t)
    cfg = SinkhornConfig(epsilon=args.epsilon, eta=args.eta, max_iters=args.max_iters)
    result, state = solve_rank_sort(x, b=b, y=y, cfg=cfg)
    if not state.converged:
        raise NumericalError(
            f"Sinkhorn did not reach eta={cfg.eta} within "
            f"{state.iterations_used} iterations (epsilon={cfg.epsilon})"
        )
    plan = state.plan()
    row_err, col_err = state.marginal_errors(uniform_weights(x.size), b)
    if max(row_err, col_err) > cfg.eta:
        raise NumericalError(
            f"emitted plan violates marginals: row {row_err:.3e}, col {col_err:.3e}"
        )
    output = args.output or f"{args.input}.quantile.txt"
    _write_values(output, "soft_quantile", [result.s_sorts[1]])
    plan_path = f"{output}.plan"
    with open(plan_path, "w", encoding="utf-8") as fh:
        fh.write("to_left\tto_filler\tto_right\n")
        for row in plan:
            fh.write("\t".join(repr(float(p)) for p in row) + "\n")
    manifest = _base_manifest(args, "quantile", output)
    manifest.update(
        tau=args.tau,
        t=t,
        epsilon=cfg.epsilon,
        eta=cfg.eta,
        max_iters=cfg.max_iters,
        iterations_used=state.iterations_used,
        plan_file=plan_path,
    )
    write_manifest(output, manifest)
    write_manifest(plan_path, manifest | {"output": plan_path})
    print(f"soft quantile: {result.s_sorts[1]!r} (wrote {output})")
    return 0


def cmd_regression(args):
    features, response = load_dataset(args.input)
    spec = QuantileSpec(tau=args.tau, epsilon=args.epsilon)
    output = args.output or f"{args.input}.trace.txt"

    def make_model():
        if args.model == "mlp":
            return TwoLayerModel(features.shape[1], seed=args.seed)
        return LinearModel(features.shape[1])

    traces = {}
    for mode in ("soft", "baseline"):
        cfg = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            step_size=args.step_size,
            mode=mode,
            seed=args.seed,
            holdout_fraction=args.holdout_fraction,
        )
        traces[mode] = train_least_quantile(features, response, spec, cfg, make_model())
    with open(output, "w", encoding="utf-8") as fh:
        fh.write("mode\tepoch\ttrain_quantile\ttest_quantile\tmse\n")
        for mode, trace in traces.items():
            for row in trace.rows:
                cells = [mode] + [
                    repr(float(v)) if isinstance(v, float) else str(v) for v in row
                ]
                fh.write("\t".join(cells) + "\n")
    aborted = {m: t for m, t in traces.items() if t.aborted}
    manifest = _base_manifest(args, "quantile-regression", output)
    manifest.update(
        tau=args.tau,
        epsilon=args.epsilon,
        t=1.0 / args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        batch_size=args.batch_size,
        step_size=args.step_size,
        model=args.model,
        holdout_fraction=args.holdout_fraction,
    )
    write_manifest(output, manifest)
    if aborted:
        for mode, trace in aborted.items():
            print(f"{mode} run aborted: {trace.message}", file=sys.stderr)
        return 2
    print(f"wrote {output}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command in ("rank", "sort"):
            return cmd_rank_or_sort(args)
        if args.command == "sweep-epsilon":
            return cmd_sweep(args)
        if args.command == "quantile":
            return cmd_quantile(args)
        return cmd_regression(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
