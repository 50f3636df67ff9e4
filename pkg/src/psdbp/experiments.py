"""Experiment drivers behind the command-line interface.

Each driver returns ``(header, rows, summary)``; :func:`run` writes
``results.csv`` and ``summary.json`` into the output directory.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import estimators as est
from . import offspring as om
from . import qprocess as qp
from . import simulator as sim
from .config import ExperimentConfig, config_to_dict


# ---------------------------------------------------------------------------
# shared set-up


def kernel_for(cfg: ExperimentConfig, tol: float | None = None):
    """Kernel and triple at ``cfg.zmax``, or adaptively truncated when unset."""
    tol = cfg.spectral_tol if tol is None else tol
    if cfg.zmax is not None:
        kernel = qp.build_kernel(cfg.offspring, cfg.zmax)
        triple = qp.spectral(kernel, tol=tol)
        qp.check_truncation(kernel, triple)
        return kernel, triple
    return qp.adaptive_kernel(cfg.offspring, min_zmax=max(cfg.min_zmax, 2 * cfg.z0), tol=tol)


def hybrid_k(cfg: ExperimentConfig, kernel, triple) -> int:
    """Configured ``k``, else the smallest ``k`` with ``d(k)`` below the target."""
    if cfg.conditioning.k is not None:
        return cfg.conditioning.k
    return qp.smallest_k(kernel, triple, cfg.conditioning.target_error)


@dataclass
class _Task:
    """Picklable recipe for drawing replication ``i`` of a batch."""

    spec: om.OffspringSpec
    method: str
    z0: int
    n: int
    seed: int
    kernel: qp.TruncatedKernel | None = None
    triple: qp.SpectralTriple | None = None
    k: int | None = None
    tree: bool = False

    def sampler(self):
        cache = getattr(self, "_sampler", None)
        if cache is None and self.method == "hybrid":
            cache = sim.HybridSampler(self.kernel, self.triple, min(self.k, self.n))
            self._sampler = cache
        return cache

    def draw(self, i: int):
        seed = (self.seed, i)
        if self.method == "hybrid":
            return self.sampler().sample(self.z0, self.n, seed)
        if self.method == "splitting":
            return sim.simulate_conditioned_splitting(self.spec, self.z0, self.n, seed,
                                                      kernel=self.kernel)
        if self.tree:
            return sim.simulate_tree(self.spec, self.z0, self.n, seed)
        return sim.simulate(self.spec, self.z0, self.n, seed)

    def __getstate__(self):
        d = dict(self.__dict__)
        d.pop("_sampler", None)
        return d


def _chunk(args):
    task, fn, indices = args
    return [fn(task, task.draw(i), i) for i in indices]


def map_replications(task: _Task, fn, R: int, threads: int = 1) -> list:
    """``[fn(task, draw(i), i) for i in range(R)]`` across ``threads`` processes.

    Results depend only on ``(seed, i)``, so the thread count never changes them.
    """
    if threads <= 1 or R < 2:
        return _chunk((task, fn, range(R)))
    bounds = np.linspace(0, R, min(threads * 4, R) + 1).astype(int)
    jobs = [(task, fn, range(a, b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(_chunk, jobs))
    return [r for part in parts for r in part]


def _task(cfg: ExperimentConfig, n: int | None = None, with_kernel=True):
    n = cfg.n if n is None else n
    method = cfg.conditioning.method
    kernel = triple = k = None
    d_k = 0.0
    if method == "hybrid" and with_kernel:
        kernel, triple = kernel_for(cfg)
        k = hybrid_k(cfg, kernel, triple)
        d_k = 0.0 if k >= n else qp.coupling_error(kernel, triple, k)
    elif method == "splitting" and not cfg.offspring.is_constant:
        kernel, _ = kernel_for(cfg)
    task = _Task(cfg.offspring, method, cfg.z0, n, cfg.seed, kernel, triple, k,
                 cfg.record_tree and method == "none")
    info = {"method": method}
    if method == "hybrid":
        info.update({"k": min(k, n), "error_bound": d_k, "z_max": kernel.z_max})
    return task, info


def _num(x):
    """CSV cell: shortest round-trip repr, blank for missing."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def _fsum_mean(xs):
    xs = [x for x in xs if x is not None and not math.isnan(x)]
    return math.fsum(xs) / len(xs) if xs else None


# ---------------------------------------------------------------------------
# drivers


def _identity(task, traj, i):
    return traj


def run_simulate(cfg: ExperimentConfig, threads: int = 1):
    task, info = _task(cfg)
    trajs = map_replications(task, _identity, cfg.replications, threads)
    if task.tree:
        header = ["trajectory_id", "generation", "k", "count"]
        rows = [[i, g, k, c] for i, tree in enumerate(trajs)
                for g, tally in enumerate(tree.counts) for k, c in sorted(tally.items())]
        finals = [int(t.states[-1]) for t in trajs]
        extra = {"trajectories.csv": sim.trajectories_to_csv([t.trajectory() for t in trajs])}
    else:
        header = ["trajectory_id", "generation", "population"]
        rows = [[i, g, int(z)] for i, tr in enumerate(trajs) for g, z in enumerate(tr.states)]
        finals = [int(t.states[-1]) for t in trajs]
        extra = {}
    summary = {**info, "replications": cfg.replications,
               "survival_fraction": sum(f > 0 for f in finals) / len(finals),
               "mean_final_size": _fsum_mean([float(f) for f in finals])}
    return header, rows, summary, extra


def _spectrum_rows(cfg, kernel, triple):
    qt = qp.q_transitions(kernel, triple)
    mu = qp.m_up_all(kernel, triple, qt)
    s2 = qp.sigma2_up_all(kernel, triple, qt)
    z = np.arange(1, kernel.z_max + 1)
    m = np.atleast_1d(np.array([om.mean(cfg.offspring, int(x)) for x in z]))
    return z, m, mu, s2, qt


def run_spectrum(cfg: ExperimentConfig, threads: int = 1):
    kernel, triple = kernel_for(cfg)
    z, m, mu, s2, qt = _spectrum_rows(cfg, kernel, triple)
    uv = triple.u * triple.v
    header = ["z", "m", "m_up", "sigma2_up", "u", "v", "uv"]
    rows = [[int(a), _num(b), _num(c), _num(d), _num(e), _num(f), _num(g)]
            for a, b, c, d, e, f, g in zip(z, m, mu, s2, triple.u, triple.v, uv)]
    summary = {
        "rho": triple.rho, "z_max": kernel.z_max, "residual": triple.residual,
        "iterations": triple.iterations, "coupling_limit": qp.coupling_limit(triple),
        "qup_max_row_deviation": qt.max_deviation,
        "states": {str(s): {"m": float(m[s - 1]), "m_up": float(mu[s - 1]),
                            "sigma2_up": float(s2[s - 1]), "uv": float(uv[s - 1])}
                   for s in cfg.states if s <= kernel.z_max},
    }
    extra = {"triple.txt": qp.dump_triple(triple)}
    return header, rows, summary, extra


def run_gap_profile(cfg: ExperimentConfig, threads: int = 1):
    kernel, triple = kernel_for(cfg)
    z, m, mu, _, _ = _spectrum_rows(cfg, kernel, triple)
    uv = triple.u * triple.v
    gap = mu - m
    header = ["z", "gap", "uv"]
    rows = [[int(a), _num(b), _num(c)] for a, b, c in zip(z, gap, uv)]
    summary = {"z_max": kernel.z_max,
               "states": {str(s): {"gap": float(gap[s - 1]), "uv": float(uv[s - 1])}
                          for s in cfg.states if s <= kernel.z_max}}
    return header, rows, summary, {}


def run_coupling_table(cfg: ExperimentConfig, threads: int = 1):
    kernel, triple = kernel_for(cfg)
    prof = qp.coupling_error_profile(kernel, triple, max(cfg.ks))
    header = ["k", "d"]
    rows = [[k, _num(prof.d[k])] for k in cfg.ks]
    k_star = prof.first_below(cfg.conditioning.target_error)
    summary = {"z_max": kernel.z_max, "rho": triple.rho, "residual": triple.residual,
               "coupling_limit": prof.limit, "monotone_from": prof.monotone_from,
               "d": {str(k): float(prof.d[k]) for k in cfg.ks},
               "target_error": cfg.conditioning.target_error, "k_for_target": k_star}
    return header, rows, summary, {}


def _mz_row(task, traj, i, states=(), n=0):
    out = []
    for z in states:
        try:
            out.append((i, z, est.visits(traj, z), est.mle_m_z(traj, z, level=None).estimate))
        except est.UndefinedEstimatorError:
            out.append((i, z, 0, None))
    return out


def run_histogram_mz(cfg: ExperimentConfig, threads: int = 1):
    task, info = _task(cfg)
    kernel, triple = task.kernel, task.triple
    if kernel is None:
        kernel, triple = kernel_for(cfg)
    qt = qp.q_transitions(kernel, triple)
    mup = qp.m_up_all(kernel, triple, qt)
    s2 = qp.sigma2_up_all(kernel, triple, qt)
    fn = _MZ(tuple(cfg.states))
    res = map_replications(task, fn, cfg.replications, threads)
    header = ["replication", "z", "j_n", "estimate", "standardized"]
    rows, per_z = [], {z: [] for z in cfg.states}
    n = cfg.n
    for rep in res:
        for i, z, j, e in rep:
            scale = math.sqrt(n * triple.uv(z) / s2[z - 1]) if z <= kernel.z_max else math.nan
            sd = None if e is None else scale * (e - mup[z - 1])
            rows.append([i, z, j, _num(e), _num(sd)])
            per_z[z].append((e, sd))
    summary = {**info, "replications": cfg.replications, "n": n, "states": {}}
    std_by_z = {}
    for z, vals in per_z.items():
        e = np.array([v[0] for v in vals if v[0] is not None])
        sd = np.array([v[1] for v in vals if v[1] is not None])
        std_by_z[z] = np.array([np.nan if v[1] is None else v[1] for v in vals])
        entry = {"m": om.mean(cfg.offspring, z), "m_up": float(mup[z - 1]),
                 "sigma2_up": float(s2[z - 1]), "uv": triple.uv(z), "n_uv": n * triple.uv(z),
                 "defined": int(e.size), "undefined": len(vals) - int(e.size)}
        if e.size:
            ks = stats.kstest(sd, "norm")
            entry.update({"mean": _fsum_mean(e.tolist()), "sd": float(e.std(ddof=1)) if e.size > 1 else None,
                          "mse_vs_m_up": _fsum_mean(((e - mup[z - 1]) ** 2).tolist()),
                          "standardized_mean": _fsum_mean(sd.tolist()),
                          "standardized_sd": float(sd.std(ddof=1)) if sd.size > 1 else None,
                          "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue)})
        summary["states"][str(z)] = entry
    zs = list(cfg.states)
    corr = {}
    for a in range(len(zs)):
        for b in range(a + 1, len(zs)):
            x, y = std_by_z[zs[a]], std_by_z[zs[b]]
            ok = ~(np.isnan(x) | np.isnan(y))
            if ok.sum() > 2:
                corr[f"{zs[a]},{zs[b]}"] = float(np.corrcoef(x[ok], y[ok])[0, 1])
    summary["standardized_correlation"] = corr
    return header, rows, summary, {}


class _MZ:
    def __init__(self, states):
        self.states = states

    def __call__(self, task, traj, i):
        return _mz_row(task, traj, i, self.states)


class _Drift:
    def __init__(self, checkpoints):
        self.checkpoints = checkpoints

    def __call__(self, task, traj, i):
        Z = traj.states
        num = np.cumsum(Z[1:])
        den = np.cumsum(Z[:-1])
        return [(i, g, float(num[g - 1]) / float(den[g - 1])) for g in self.checkpoints]


def run_gw_drift(cfg: ExperimentConfig, threads: int = 1):
    task, info = _task(cfg)
    checkpoints = tuple(h for h in (cfg.horizons or (cfg.n,)) if h <= cfg.n)
    if cfg.n not in checkpoints:
        checkpoints = checkpoints + (cfg.n,)
    res = map_replications(task, _Drift(checkpoints), cfg.replications, threads)
    header = ["replication", "generation", "estimate"]
    rows = [[i, g, _num(e)] for rep in res for i, g, e in rep]
    m = om.mean(cfg.offspring)
    by_g = {g: [e for rep in res for i, gg, e in rep if gg == g] for g in checkpoints}
    summary = {**info, "m": m, "replications": cfg.replications,
               "checkpoints": {str(g): {"mean": _fsum_mean(v),
                                        "mse": _fsum_mean([(x - m) ** 2 for x in v])}
                               for g, v in by_g.items()},
               "mean_final": _fsum_mean(by_g[cfg.n])}
    return header, rows, summary, {}


ESTIMATORS = ("m_hat", "m_tilde", "m_bar", "sigma2_bar")


class _Compare:
    def __init__(self, a, b):
        self.a, self.b = a, b

    def __call__(self, task, traj, i):
        vals = {}
        try:
            vals["m_hat"] = est.mle_m_gw(traj).estimate
        except est.UndefinedEstimatorError:
            vals["m_hat"] = None
        try:
            vals["m_tilde"] = est.c_estimator_tilde(traj, self.a, self.b, level=None).estimate
        except est.UndefinedEstimatorError:
            vals["m_tilde"] = None
        try:
            mb, s2 = est.c_estimator_bar(traj, level=None)
            vals["m_bar"], vals["sigma2_bar"] = mb.estimate, s2.estimate
        except est.UndefinedEstimatorError:
            vals["m_bar"] = vals["sigma2_bar"] = None
        return i, vals


def run_estimator_comparison(cfg: ExperimentConfig, threads: int = 1):
    spec = cfg.offspring
    m, var = om.mean(spec), om.variance(spec)
    a, b = om.ab_constants(spec)
    method = cfg.conditioning.method
    kernel = triple = None
    k_star = None
    if method == "hybrid":
        kernel, triple = kernel_for(cfg)
        k_star = hybrid_k(cfg, kernel, triple)
    header = ["horizon", "replication", "estimator", "estimate"]
    rows = []
    summary = {"m": m, "variance": var, "a": a, "b": b, "method": method,
               "replications": cfg.replications, "horizons": {}}
    if method == "hybrid":
        summary["z_max"] = kernel.z_max
    for n in cfg.horizons:
        task = _Task(spec, method, cfg.z0, n, cfg.seed + 1_000_003 * n, kernel, triple,
                     k_star)
        res = map_replications(task, _Compare(a, b), cfg.replications, threads)
        per = {e: [] for e in ESTIMATORS}
        for i, vals in res:
            for name in ESTIMATORS:
                rows.append([n, i, name, _num(vals[name])])
                if vals[name] is not None:
                    per[name].append(vals[name])
        entry = {}
        for name in ESTIMATORS:
            target = var if name == "sigma2_bar" else m
            v = per[name]
            entry[name] = {"mean": _fsum_mean(v), "mse": _fsum_mean([(x - target) ** 2 for x in v]),
                           "defined": len(v)}
        if method == "hybrid":
            k = min(k_star, n)
            entry["k"] = k
            entry["error_bound"] = 0.0 if k >= n else qp.coupling_error(kernel, triple, k)
        summary["horizons"][str(n)] = entry
    cross = None
    for n in cfg.horizons:
        h = summary["horizons"][str(n)]
        best = min(h["m_tilde"]["mse"], h["m_bar"]["mse"])
        if h["m_hat"]["mse"] >= best:
            cross = n
            break
    summary["first_horizon_mle_not_best"] = cross
    return header, rows, summary, {}


DRIVERS = {
    "simulate": run_simulate,
    "spectrum": run_spectrum,
    "gap_profile": run_gap_profile,
    "coupling_error_table": run_coupling_table,
    "histogram_mz": run_histogram_mz,
    "gw_drift": run_gw_drift,
    "estimator_comparison": run_estimator_comparison,
}


def execute(cfg: ExperimentConfig, threads: int = 1):
    """Run a config in memory and return ``(header, rows, summary, extra_files)``."""
    header, rows, summary, extra = DRIVERS[cfg.experiment](cfg, threads)
    summary = {"experiment": cfg.experiment, "seed": cfg.seed, **summary,
               "config": config_to_dict(cfg)}
    return header, rows, summary, extra


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) else x
    return x


def summary_json(summary: dict) -> str:
    return json.dumps(_jsonable(summary), sort_keys=True, indent=2) + "\n"


def run(cfg: ExperimentConfig, out_dir: str, threads: int = 1) -> dict:
    """Execute ``cfg`` and write ``results.csv``, ``summary.json`` and any extra files."""
    header, rows, summary, extra = execute(cfg, threads)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(header, rows))
    for name, text in extra.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        fh.write(summary_json(summary))
    return summary
