"""Command-line front end.

Exit codes: 0 when every check passes, 1 when a check fails, 2 on usage or
configuration errors.  Outputs are written once, atomically, at the end of a
command.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from fractions import Fraction

import numpy as np

from . import conditions, guide, harness, value_table
from .game_model import GameConfigError, estimate_constants, resolve_game
from .trajectory import Partition


class UsageError(Exception):
    pass


def number(text: str) -> float:
    """Decimal or exact rational such as ``1/256``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from exc


def positive(text: str) -> float:
    value = number(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return value


def vector(text: str) -> np.ndarray:
    return np.array([number(a) for a in text.split(",")], dtype=float)


def delta_sequence(text: str) -> list:
    """``a..b`` halves from ``a`` down to ``b``; otherwise a comma list."""
    if ".." in text:
        a_text, b_text = text.split("..", 1)
        a, b = Fraction(a_text.strip()), Fraction(b_text.strip())
        if not 0 < b <= a:
            raise argparse.ArgumentTypeError("range needs 0 < end <= start")
        seq = [a]
        while seq[-1] > b:
            seq.append(seq[-1] / 2)
        if seq[-1] != b:
            raise argparse.ArgumentTypeError("range end must be the start halved a whole number of times")
        return [float(d) for d in seq]
    return [positive(a) for a in text.split(",")]


def grid_spec(text: str) -> tuple:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("grid axis must be lo:hi:step")
    return tuple(number(p) for p in parts)


def atomic_write(path: str, write) -> None:
    """Call ``write(tmp_path)`` and move the result into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path: str, text: str) -> None:
    def _w(tmp):
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)
    atomic_write(path, _w)


def _game(args):
    return resolve_game(args.game, args.control_points)


def _constants(game, args):
    box = None
    if getattr(args, "box", None):
        lo, hi = args.box
        box = (np.broadcast_to(lo, (game.n,)), np.broadcast_to(hi, (game.n,)))
    return estimate_constants(game, box, seed=args.seed)


def _grid(game, axes):
    if not axes:
        raise UsageError("--grid is required")
    if len(axes) == 1:
        axes = axes * game.n
    if len(axes) != game.n:
        raise UsageError(f"--grid given {len(axes)} axes for a {game.n}-dimensional game")
    lo, hi, step = zip(*axes)
    return value_table.StateGrid(tuple(lo), tuple(hi), tuple(step))


def _out(args, name):
    return os.path.join(args.out, name)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_solve(args) -> int:
    game = _game(args)
    constants = _constants(game, args)
    grid = _grid(game, args.grid)
    table = value_table.build_value_table(game, constants, grid, args.n, args.eps, args.max_pairs,
                                          check_cover=not args.no_cover_check)
    path = args.table or _out(args, "table.json")
    atomic_write(path, lambda tmp: value_table.export_table(table, tmp))
    if args.slice_csv:
        atomic_write(args.slice_csv, lambda tmp: value_table.export_slice_csv(table, tmp))
    print(f"table written to {path}: N={table.N}, nodes={grid.size}, pairs={table.total_pairs()}, "
          f"eps_payoff={table.eps_payoff}, fallbacks={table.fallback_count}")
    return 0


def _strategies(game, constants, args, table=None):
    if args.mode == "closed-form":
        return (guide.closed_form_strategy(game, "I", constants), guide.closed_form_strategy(game, "II", constants))
    if table is None:
        if not args.table:
            raise UsageError("multivalued mode needs --table")
        table = value_table.import_table(args.table, game)
    return (guide.table_strategy(table, "I", constants, args.rule),
            guide.table_strategy(table, "II", constants, args.rule))


def cmd_simulate(args) -> int:
    game = _game(args)
    constants = _constants(game, args)
    U, V = _strategies(game, constants, args)
    delta = args.delta if args.delta else (U.table.delta if U.table else None)
    if delta is None:
        raise UsageError("--delta is required in closed-form mode")
    partition = Partition.with_diameter(0.0, game.T, delta)
    res = harness.run_consistent(game, U, V, partition, args.x0, args.substeps)
    atomic_write(_out(args, "trajectory.csv"), res.trajectory.to_csv)
    atomic_write(_out(args, "guide_trace.csv"), lambda tmp: guide.write_guide_trace(tmp, res.trace))
    summary = {"game": game.name, "mode": args.mode, "delta": delta, "x0": list(map(float, args.x0)),
               "payoffs": list(res.payoffs), "envelope_ok": res.envelope_ok, "steps_ok": res.steps_ok,
               "max_envelope_ratio": res.max_envelope_ratio}
    write_text(_out(args, "simulation.json"), json.dumps(summary, indent=2))
    print(f"payoffs J1={res.payoffs[0]:.6f} J2={res.payoffs[1]:.6f}; envelope_ok={res.envelope_ok}; "
          f"steps_ok={res.steps_ok}")
    return 0 if res.envelope_ok and res.steps_ok else 1


def cmd_deviate(args) -> int:
    game = _game(args)
    constants = _constants(game, args)
    U, V = _strategies(game, constants, args)
    if U.table is not None and any(abs(d - U.table.delta) > 1e-12 for d in args.deltas):
        raise UsageError("multivalued sweeps must use the table's step as the only delta")
    families = {"I": [], "II": []}
    for spec in args.devs.split(","):
        families["I"] += harness.deviation_family(spec, game.control_grid_P, 0.0, game.T, args.seed)
        families["II"] += harness.deviation_family(spec, game.control_grid_Q, 0.0, game.T, args.seed + 1)
    tol = (lambda d: args.tol) if args.tol is not None else None
    x0s = args.x0 or [np.zeros(game.n)]
    report = harness.equilibrium_report(game, (U, V), x0s, args.deltas, families, tol, substeps=args.substeps)
    write_text(_out(args, "equilibrium.json"), report.to_json())
    atomic_write(_out(args, "equilibrium.csv"), report.write_csv)
    for r in report.rows:
        print(f"delta={r.delta:.6g} x0={r.x0} cons=({r.J1_cons:.4f}, {r.J2_cons:.4f}) "
              f"max_dev=({r.max_dev1}, {r.max_dev2}) tol={r.tolerance:.4g} pass=({r.pass1}, {r.pass2})")
    return 0 if report.passed else 1


def _emit(report, args, name) -> int:
    write_text(_out(args, name), report.to_json())
    for r in report.results:
        print(f"{r.condition}: {'PASS' if r.passed else 'FAIL'} worst={r.worst:.6g} tol={r.tolerance:.6g}")
    return 0 if report.passed else 1


def cmd_check_f(args) -> int:
    game = _game(args)
    cand = conditions.candidate(args.candidate)
    lo, hi = args.box if args.box else (-1.0, 1.0)
    spec = conditions.SampleSpec(tuple([lo] * game.n), tuple([hi] * game.n), args.points, args.t_points,
                                 args.delta, args.eps)
    return _emit(conditions.check_F(cand, game, spec), args, "check_f.json")


def cmd_check_s(args) -> int:
    table = value_table.import_table(args.table)
    spec = conditions.TableSampleSpec(args.samples, args.seed)
    return _emit(conditions.check_S(table, spec=spec), args, "check_s.json")


def cmd_hj_residual(args) -> int:
    game = _game(args)
    cand = conditions.candidate(args.candidate)
    rng = np.random.default_rng(args.seed)
    lo, hi = args.box if args.box else (-1.0, 1.0)
    worst, witness, count = 0.0, {}, 0
    while count < args.samples:
        t = float(rng.uniform(0.0, game.T))
        x = rng.uniform(lo, hi, game.n)
        if not cand.is_smooth_at(t, x):
            continue
        res = conditions.hj_residual(cand, game, t, x, args.tie_break)
        count += 1
        m = max(abs(res.r1), abs(res.r2))
        if m > worst or not witness:
            worst = max(worst, m)
            witness = {"t": t, "x": x.tolist(), "r1": res.r1, "r2": res.r2,
                       "u_hat": list(res.u_hat), "v_hat": list(res.v_hat)}
    result = conditions.ConditionResult("HJ", worst <= args.tol, worst, args.tol, count, witness)
    report = conditions.ConditionReport([result], {"candidate": cand.name, "game": game.name,
                                                   "tie_break": args.tie_break, "seed": args.seed})
    return _emit(report, args, "hj_residual.json")


def cmd_lemma1(args) -> int:
    game = _game(args)
    constants = _constants(game, args)
    return _emit(harness.lemma1_check(game, constants, args.trials, args.seed), args, "lemma1.json")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cgsnash", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, game=True):
        if game:
            p.add_argument("--game", required=True, help="built-in name or path to a TOML game file")
            p.add_argument("--control-points", type=int, default=None, help="grid points per control axis")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".", help="output directory")

    def box(p):
        p.add_argument("--box", type=number, nargs=2, metavar=("LO", "HI"), default=None,
                       help="per-coordinate box for start states")

    p = sub.add_parser("solve", help="build and save a value table")
    common(p)
    box(p)
    p.add_argument("--n", type=int, required=True, help="number of time layers N")
    p.add_argument("--grid", type=grid_spec, action="append", help="lo:hi:step, once or once per axis")
    p.add_argument("--eps", type=positive, default=None, help="payoff resolution (default 1e-3 * payoff range)")
    p.add_argument("--max-pairs", type=int, default=50_000_000)
    p.add_argument("--no-cover-check", action="store_true")
    p.add_argument("--table", default=None, help="output table path (default OUT/table.json)")
    p.add_argument("--slice-csv", default=None)
    p.set_defaults(func=cmd_solve)

    for name, func, helptext in (("simulate", cmd_simulate, "consistent run of both guide strategies"),
                                 ("deviate", cmd_deviate, "equilibrium sweep against deviation families")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        box(p)
        p.add_argument("--mode", choices=("closed-form", "multivalued"), default="closed-form")
        p.add_argument("--table", default=None, help="table file for multivalued mode")
        p.add_argument("--rule", choices=value_table.RULES, default="max_sum")
        p.add_argument("--substeps", type=int, default=16)
        if name == "simulate":
            p.add_argument("--delta", type=positive, default=None)
            p.add_argument("--x0", type=vector, required=True)
        else:
            p.add_argument("--deltas", type=delta_sequence, required=True, help="e.g. 1/32..1/256 or 1/64,1/128")
            p.add_argument("--devs", default="bang8:50,const:10", help="comma list of bang<S>:<m>, const[:m], random<P>:<m>")
            p.add_argument("--x0", type=vector, action="append")
            p.add_argument("--tol", type=positive, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("check-f", help="one-step checks of a closed-form candidate")
    common(p)
    p.add_argument("--candidate", required=True)
    p.add_argument("--delta", type=positive, default=0.01)
    p.add_argument("--eps", type=number, default=0.02)
    p.add_argument("--box", type=number, nargs=2, default=None)
    p.add_argument("--points", type=int, default=9)
    p.add_argument("--t-points", type=int, default=7)
    p.set_defaults(func=cmd_check_f)

    p = sub.add_parser("check-s", help="table checks through punishment and consistent moves")
    common(p, game=False)
    p.add_argument("--table", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_check_s)

    p = sub.add_parser("hj-residual", help="Hamilton-Jacobi residuals of a candidate at random positions")
    common(p)
    p.add_argument("--candidate", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--tol", type=number, default=1e-9)
    p.add_argument("--tie-break", choices=("relaxed", "lowest"), default="relaxed")
    p.add_argument("--box", type=number, nargs=2, default=None)
    p.set_defaults(func=cmd_hj_residual)

    p = sub.add_parser("lemma1", help="randomized check of the extremal shift estimate")
    common(p)
    box(p)
    p.add_argument("--trials", type=int, default=1000)
    p.set_defaults(func=cmd_lemma1)
    return parser


VALUE_FLAGS = ("--grid", "--x0")


def _attach_values(argv):
    """Fold ``--grid -2:2:0.5`` into ``--grid=-2:2:0.5`` so leading minus signs are not read as flags."""
    out, it = [], iter(argv)
    for token in it:
        if token in VALUE_FLAGS:
            value = next(it, None)
            out.append(token if value is None else f"{token}={value}")
        else:
            out.append(token)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(_attach_values(argv))
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (UsageError, GameConfigError, value_table.GridCoverageError, value_table.TableBudgetError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
