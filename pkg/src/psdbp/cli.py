"""Command-line entry point: ``psdbp <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from dataclasses import replace

from . import estimators as est
from . import experiments as ex
from . import offspring as om
from . import qprocess as qp
from . import simulator as sim
from .config import ConfigError, ExperimentConfig, FIGURES, figure_config, load_config

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def _common(p: argparse.ArgumentParser, config_required=True):
    p.add_argument("--config", required=config_required, metavar="PATH", help="YAML experiment config")
    p.add_argument("--seed", type=int, metavar="U64", help="master seed (overrides config)")
    p.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, metavar="N",
                   help="worker processes (default: number of cores)")
    p.add_argument("--zmax", type=int, metavar="N", help="fixed truncation level (default: adaptive)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psdbp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("simulate", help="simulate trajectories (optionally conditioned)"))
    p = sub.add_parser("estimate", help="estimate offspring means from trajectories")
    _common(p)
    p.add_argument("--input", metavar="CSV", help="trajectory CSV (default: simulate from config)")
    p = sub.add_parser("spectrum", help="kernel, spectral triple and Q-process functionals")
    _common(p)
    p.add_argument("--dump-kernel", action="store_true", help="also write kernel.txt")
    _common(sub.add_parser("coupling-error", help="table of d(k)"))
    _common(sub.add_parser("run", help="run any configured experiment"))
    p = sub.add_parser("reproduce", help="run a built-in desk-scale figure configuration")
    p.add_argument("figure", choices=sorted(FIGURES))
    _common(p, config_required=False)
    p.add_argument("--replications", type=int, metavar="R", help="override replication count")
    return parser


def _load(args, experiment: str | None = None) -> ExperimentConfig:
    cfg = figure_config(args.figure) if args.command == "reproduce" else load_config(args.config)
    if experiment is not None and cfg.experiment != experiment:
        cfg = replace(cfg, experiment=experiment)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer", source="--seed")
    if args.zmax is not None and (args.zmax < 1 or args.zmax < cfg.z0):
        raise ConfigError("--zmax must be >= max(1, z0)", source="--zmax")
    reps = getattr(args, "replications", None)
    if reps is not None and reps < 1:
        raise ConfigError("--replications must be >= 1", source="--replications")
    return cfg.with_overrides(seed=args.seed, zmax=args.zmax, replications=reps)


def _estimate(cfg: ExperimentConfig, args) -> dict:
    if args.input:
        with open(args.input, encoding="utf-8") as fh:
            trajs = sim.trajectories_from_csv(fh.read())
    else:
        task, _ = ex._task(cfg)
        trajs = ex.map_replications(task, ex._identity, cfg.replications, args.threads)
        trajs = [t.trajectory() if isinstance(t, sim.TreeSample) else t for t in trajs]
    spec = cfg.offspring
    kernel = triple = None
    if cfg.states:
        kernel, triple = ex.kernel_for(cfg)
    ab = None
    if spec.is_constant:
        try:
            ab = om.ab_constants(spec)
        except om.UnsupportedFamilyError:
            ab = None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trajectory_id", "estimator", "z", *est.EstimateReport.CSV_FIELDS])
    counts: dict[str, int] = {}

    def emit(i, name, z, fn):
        try:
            rep = fn()
        except est.UndefinedEstimatorError:
            counts[name + "_undefined"] = counts.get(name + "_undefined", 0) + 1
            return
        counts[name] = counts.get(name, 0) + 1
        w.writerow([i, name, "" if z is None else z, *rep.csv_row()])

    for i, tr in enumerate(trajs):
        emit(i, "m_hat", None, lambda: est.mle_m_gw(tr))
        for z in cfg.states:
            if z <= kernel.z_max:
                emit(i, "m_hat_z", z, lambda: est.mle_m_z(tr, z, kernel, triple))
        if ab is not None:
            emit(i, "m_tilde", None, lambda: est.c_estimator_tilde(tr, *ab, spec=spec))
            emit(i, "m_bar", None, lambda: est.c_estimator_bar(tr, spec=spec)[0])
            emit(i, "sigma2_bar", None, lambda: est.c_estimator_bar(tr, spec=spec)[1])
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "estimates.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    summary = {"experiment": "estimate", "trajectories": len(trajs), "counts": counts,
               "config": ex.config_to_dict(cfg)}
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        fh.write(ex.summary_json(summary))
    return summary


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "estimate":
            _estimate(_load(args), args)
        elif args.command == "spectrum":
            cfg = _load(args, "spectrum")
            ex.run(cfg, args.out, args.threads)
            if args.dump_kernel:
                kernel, _ = ex.kernel_for(cfg)
                with open(os.path.join(args.out, "kernel.txt"), "w", encoding="utf-8") as fh:
                    fh.write(qp.dump_kernel(kernel))
        else:
            forced = {"simulate": "simulate", "coupling-error": "coupling_error_table"}.get(args.command)
            cfg = _load(args, forced)
            ex.run(cfg, args.out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except qp.InfeasibleTargetError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote outputs to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
