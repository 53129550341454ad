"""Command line entry point.

    feedvio simulate [--config scene.cfg] --out SEQ_DIR [--seed N]
    feedvio run SEQ_DIR [--config session.cfg] [--params DIR] --out DIR [--mode sim3]
    feedvio adapt SEQ_DIR [--config session.cfg] [--params DIR] --out DIR
    feedvio eval EST REF [--out DIR] [--mode se3|sim3]
    feedvio plot REF [EST ...] --out DIR [--mode se3|sim3]

Exit codes: 0 success, 1 usage or bad config, 2 unreadable or inconsistent
data, 3 divergence.  Every command writes its resolved config into ``--out``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_config, load_config
from .evaluation import align, emit_plot_data
from .io import DataError, Trajectory, load_groundtruth, read_tum_trajectory, write_tum_trajectory
from .pipeline import (DivergenceError, SessionConfig, load_predictors, run_online_learning, run_sequence,
                       save_predictors, write_metrics, write_run_outputs)
from .sim import SceneConfig, export_sequence, load_sequence, simulate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("feedvio")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="feedvio", description="Monocular VIO with online predictor adaptation")
    p.add_argument("command", choices=["simulate", "run", "adapt", "eval", "plot"])
    p.add_argument("inputs", nargs="*", help="sequence directory, or trajectory files for eval/plot")
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--mode", choices=["se3", "sim3"], default="sim3", help="trajectory alignment")
    p.add_argument("--params", type=Path, help="directory with saved predictor parameters")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def _config(cls, args):
    overrides = {} if args.seed is None else {"seed": args.seed}
    if args.config is not None and not args.config.is_file():
        raise ConfigError(f"config file not found: {args.config}")
    try:
        return cls(**overrides) if args.config is None else load_config(cls, args.config, **overrides)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _need(args, n_inputs: int, out: bool = True):
    if len(args.inputs) < n_inputs:
        raise ConfigError(f"{args.command} needs {n_inputs} input path(s), got {len(args.inputs)}")
    if out and args.out is None:
        raise ConfigError(f"{args.command} needs --out")


def load_trajectory(path) -> Trajectory:
    """TUM text or EuRoC ground-truth CSV, chosen by extension."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    return load_groundtruth(path) if path.suffix == ".csv" else read_tum_trajectory(path)


def _sequence(path):
    d = Path(path)
    if not (d / "scene.cfg").is_file():
        raise DataError(f"{d} is not a sequence directory (missing scene.cfg)")
    return load_sequence(d)


def _ate(traj: Trajectory, ref: Trajectory, mode: str) -> float:
    try:
        return align(traj, ref, mode).rmse_ate
    except ValueError:
        return float("nan")


def cmd_simulate(args) -> int:
    _need(args, 0)
    cfg = _config(SceneConfig, args)
    export_sequence(simulate(cfg), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    _need(args, 1)
    cfg = replace(_config(SessionConfig, args), mode="deployment")
    seq = _sequence(args.inputs[0])
    pred = load_predictors(args.params) if args.params else None
    res, session = run_sequence(seq, cfg, pred)
    res.ate = _ate(res.trajectory, session.reference(res.trajectory), args.mode)
    write_run_outputs(args.out, cfg, res, session)
    print(f"ATE ({args.mode}) = {res.ate:.6f} m over {len(res.trajectory)} frames")
    if not np.isfinite(res.ate) or not np.all(np.isfinite(res.trajectory.positions)):
        raise DivergenceError("tracking produced a non-finite trajectory")
    return EXIT_OK


def cmd_adapt(args) -> int:
    _need(args, 1)
    cfg = replace(_config(SessionConfig, args), mode="online_learning")
    seq = _sequence(args.inputs[0])
    pred = load_predictors(args.params) if args.params else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "session.cfg").write_text(dump_config(cfg))
    result = run_online_learning(seq, cfg, pred)
    write_metrics(result.epochs, out / "metrics.csv")
    save_predictors(result.predictors, out / "params")
    if result.epochs:
        write_tum_trajectory(result.epochs[-1].trajectory, out / "trajectory.txt")
        print(f"{len(result.epochs)} epochs, final ATE = {result.epochs[-1].ate:.6f} m")
    if result.aborted:
        raise DivergenceError(result.reason)
    return EXIT_OK


def cmd_eval(args) -> int:
    _need(args, 2, out=False)
    est, ref = load_trajectory(args.inputs[0]), load_trajectory(args.inputs[1])
    try:
        res = align(est, ref, args.mode)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(f"ATE ({args.mode}) = {res.rmse_ate:.9g} m over {len(res.matched)} poses")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "alignment.txt").write_text(res.as_text())
        (args.out / "eval.cfg").write_text(f"estimate = {args.inputs[0]}\nreference = {args.inputs[1]}\n"
                                           f"mode = {args.mode}\n")
    return EXIT_OK


def cmd_plot(args) -> int:
    _need(args, 1)
    paths = [Path(p) for p in args.inputs]
    ref = load_trajectory(paths[0])
    tracks = {paths[0].stem: ref.positions}
    for p in paths[1:]:
        est = load_trajectory(p)
        try:
            res = align(est, ref, args.mode)
        except ValueError as exc:
            raise DataError(f"{p}: {exc}") from None
        tracks[p.stem if p.stem not in tracks else str(p)] = res.apply(est.positions)
    args.out.mkdir(parents=True, exist_ok=True)
    written = emit_plot_data(tracks, args.out / "trajectories")
    (args.out / "plot.cfg").write_text("inputs = " + ",".join(str(p) for p in paths) + f"\nmode = {args.mode}\n")
    for w in written:
        print(f"wrote {w}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "adapt": cmd_adapt, "eval": cmd_eval, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"feedvio: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"feedvio: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"feedvio: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
