"""Point estimators for the offspring mean and their asymptotic variances."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import offspring as om
from . import qprocess as qp
from .offspring import OffspringSpec, UnsupportedFamilyError
from .simulator import Trajectory, TreeSample

TARGET_KINDS = ("true_parameter", "q_process_analogue")


class UndefinedEstimatorError(ValueError):
    """The estimator has no value on this sample (e.g. state never visited)."""


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with optional normal-approximation interval.

    ``confidence_interval`` is ``(lo, hi, level)`` and may only be set when
    ``asymptotic_variance`` is.
    """

    estimate: float
    target_kind: str
    sample_size_used: int
    asymptotic_variance: float | None = None
    confidence_interval: tuple[float, float, float] | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.target_kind!r}")
        ci = self.confidence_interval
        if ci is not None:
            if self.asymptotic_variance is None:
                raise ValueError("confidence interval requires an asymptotic variance")
            lo, hi, _ = ci
            if not lo <= self.estimate <= hi:
                raise ValueError("confidence interval does not contain the estimate")

    def with_interval(self, level: float = 0.95) -> "EstimateReport":
        lo, hi = confidence_interval(self, level)
        return EstimateReport(self.estimate, self.target_kind, self.sample_size_used,
                              self.asymptotic_variance, (lo, hi, level), dict(self.diagnostics))

    def to_dict(self) -> dict:
        ci = self.confidence_interval
        return {
            "estimate": self.estimate,
            "target_kind": self.target_kind,
            "sample_size_used": self.sample_size_used,
            "asymptotic_variance": self.asymptotic_variance,
            "ci_lo": None if ci is None else ci[0],
            "ci_hi": None if ci is None else ci[1],
            "ci_level": None if ci is None else ci[2],
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    CSV_FIELDS = ("estimate", "target_kind", "sample_size_used", "asymptotic_variance",
                  "ci_lo", "ci_hi", "ci_level")

    def csv_row(self) -> list:
        d = self.to_dict()
        return ["" if d[k] is None else d[k] for k in self.CSV_FIELDS]


def reports_to_csv(reports, label: str = "replication") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([label, *EstimateReport.CSV_FIELDS])
    for i, r in enumerate(reports):
        w.writerow([i, *r.csv_row()])
    return buf.getvalue()


def confidence_interval(report: EstimateReport, level: float = 0.95) -> tuple[float, float]:
    """``estimate +/- z_{(1+level)/2} sqrt(asymptotic_variance)``."""
    if report.asymptotic_variance is None:
        raise ValueError("report has no asymptotic variance")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    half = stats.norm.ppf(0.5 * (1.0 + level)) * math.sqrt(max(report.asymptotic_variance, 0.0))
    return float(report.estimate - half), float(report.estimate + half)


def _finish(report: EstimateReport, level: float | None) -> EstimateReport:
    if level is None or report.asymptotic_variance is None:
        return report
    return report.with_interval(level)


def _states(traj) -> np.ndarray:
    return np.asarray(traj.states if hasattr(traj, "states") else traj, dtype=np.int64)


# ---------------------------------------------------------------------------
# maximum likelihood


def visits(traj, z: int) -> int:
    """``j_n(z)``: number of ``i in 1..n`` with ``Z_{i-1} = z``."""
    return int(np.count_nonzero(_states(traj)[:-1] == z))


def mle_m_z(traj, z: int, kernel: qp.TruncatedKernel | None = None,
            triple: qp.SpectralTriple | None = None, spec: OffspringSpec | None = None,
            level: float | None = 0.95) -> EstimateReport:
    """``sum_i Z_i 1{Z_{i-1} = z} / (z j_n(z))``.

    With a kernel and triple the variance ``sigma2_up(z) / (n u_z v_z)`` of the
    conditioned limit is attached.  The diagnostics hold the two terms of the
    bias decomposition: the last-visit term ``1{Z_{n-1}=z}/j_n(z)`` (times
    ``m(z)`` when ``spec`` is given) and the contribution of earlier visits.
    """
    Z = _states(traj)
    n = Z.size - 1
    hit = Z[:-1] == z
    j = int(np.count_nonzero(hit))
    if j == 0:
        raise UndefinedEstimatorError(f"state {z} not visited before generation {n}")
    nxt = Z[1:][hit]
    est = float(nxt.sum()) / (z * j)
    last = float(Z[n - 1] == z) / j
    inner = float(Z[1:n][hit[:n - 1]].sum()) / (z * j) if n > 1 else 0.0
    diag = {"j_n": j, "last_visit_term": last, "earlier_visits_term": inner}
    if spec is not None:
        diag["last_visit_term"] = om.mean(spec, z) * last
    var = None
    if kernel is not None and triple is not None:
        qt = qp.q_transitions(kernel, triple)
        s2 = qp.sigma2_up(kernel, triple, z, qt)
        diag["m_up"] = qp.m_up(kernel, triple, z, qt)
        diag["sigma2_up"] = s2
        diag["u_z_v_z"] = triple.uv(z)
        var = s2 / (n * triple.uv(z))
    return _finish(EstimateReport(est, "q_process_analogue", j, var, None, diag), level)


def mle_m_gw(traj) -> EstimateReport:
    """Ratio ``sum Z_i / sum Z_{i-1}`` of total children to total parents."""
    Z = _states(traj)
    den = int(Z[:-1].sum())
    if den == 0:
        raise UndefinedEstimatorError("no parents observed")
    return EstimateReport(float(Z[1:].sum()) / den, "q_process_analogue", Z.size - 1,
                          diagnostics={"parents": den})


def mle_pk(tree: TreeSample, z: int, k: int) -> EstimateReport:
    """``sum_{i: Z_i = z} Z_i(k) / (j_n(z) z)``."""
    return EstimateReport(mle_pk_all(tree, z).get(k, 0.0), "true_parameter", visits(tree, z))


def mle_pk_all(tree: TreeSample, z: int) -> dict[int, float]:
    """All ``p_hat_k(z)`` for ``k`` observed at ``z``; sums to one."""
    tallies = [g for g, zi in zip(tree.counts, tree.states[:-1]) if zi == z]
    if not tallies:
        raise UndefinedEstimatorError(f"state {z} not visited")
    total: dict[int, int] = {}
    for g in tallies:
        for k, c in g.items():
            total[k] = total.get(k, 0) + c
    den = z * len(tallies)
    return {k: c / den for k, c in sorted(total.items())}


def binary_split_plugins(traj, z: int) -> tuple[float, float, float]:
    """``(p0_hat, p2_hat, sigma2_hat)`` for binary splitting from ``m_hat(z)`` alone."""
    m = mle_m_z(traj, z, level=None).estimate
    return 1.0 - m / 2.0, m / 2.0, 2.0 * m * (1.0 - m)


# ---------------------------------------------------------------------------
# size-biased immigration constants


@dataclass(frozen=True)
class ImmigrationConstants:
    """Constants of the Q-process seen as a GW process with immigration."""

    m: float
    variance: float
    lam: float
    mu: float
    m_pi: float
    c2: float
    c2_moments: float
    c2_ab: float | None
    B2: float
    nu_tilde2: float | None
    nu_bar2: float


def immigration_constants(spec: OffspringSpec) -> ImmigrationConstants:
    """``lambda, mu, m_pi, c^2, B^2`` and the derived ``nu~^2, nu-^2`` for a subcritical GW law.

    ``c2`` is ``V(SB - 1) + V mu``; ``c2_moments`` is the closed moment form and
    ``c2_ab`` the form in terms of ``(a, b)`` when those exist.
    """
    if not spec.is_constant:
        raise UnsupportedFamilyError("immigration constants need a size-independent law")
    m = om.mean(spec)
    if not 0 < m < 1:
        raise ValueError(f"immigration constants need 0 < m < 1, got m = {m}")
    p = om.pmf_vector(spec, 1, om.MOMENT_CUTOFF)
    ks = np.arange(p.size, dtype=float)
    e3 = math.fsum(p * ks**3)
    if not math.isfinite(e3):
        raise ValueError("third moment diverges")
    V = om.variance(spec)
    lam = V / m + m - 1.0
    mu = lam / (1.0 - m)
    sb = om.size_biased(spec, om.MOMENT_CUTOFF)
    imm = sb.values.astype(float) - 1.0
    c2 = math.fsum(sb.probs * (imm - lam) ** 2) + V * mu
    c2_mom = e3 / m - V**2 * (1 - 2 * m) / (m**2 * (1 - m)) - 3 * V - m**2
    try:
        a, b = om.ab_constants(spec)
    except UnsupportedFamilyError:
        a = b = None
    if a is not None:
        w = a * m + b
        c2_ab = e3 / m + m * w**2 / (1 - m) - m * w - ((a + 1) * m + b) ** 2
        nu_t = c2 * (1 - m) ** 2 / (a + b) ** 2
    else:
        c2_ab = nu_t = None
    sb3 = math.fsum(sb.probs * (imm - lam) ** 3)
    xi3 = math.fsum(p * (ks - m) ** 3)
    B2 = c2**2 / (1 - m**2) + V / (1 - m**3) * (sb3 + mu * xi3 + 3 * m * V * c2 / (1 - m**2))
    nu_b = B2 * (1 - m**2) ** 2 / c2**2
    return ImmigrationConstants(m, V, lam, mu, mu + 1.0, c2, c2_mom, c2_ab, B2, nu_t, nu_b)


# ---------------------------------------------------------------------------
# estimators consistent under conditioning


_FAMILY_BY_AB = {(0.0, 1.0): "poisson", (1.0, 1.0): "geometric", (-1.0, 2.0): "two_bernoulli"}


def _plugin_spec(spec, family, m):
    if spec is not None:
        return spec.with_mean(m)
    return OffspringSpec.constant(family, m) if family else None


def _plugin_constants(spec, family, m, diag):
    s = None
    try:
        s = _plugin_spec(spec, family, m)
    except (ValueError, UnsupportedFamilyError) as exc:
        diag["variance_unavailable"] = str(exc)
        return None
    if s is None:
        return None
    try:
        return immigration_constants(s)
    except (ValueError, UnsupportedFamilyError) as exc:
        diag["variance_unavailable"] = str(exc)
        return None


def c_estimator_tilde(traj, a: float, b: float, spec: OffspringSpec | None = None,
                      true_m: float | None = None, level: float | None = 0.95) -> EstimateReport:
    """``sum (Z_i - b) / sum (Z_{i-1} + a)``.

    The variance ``nu~^2 / n`` is evaluated at the estimate, or at ``true_m``
    if given.  The family for the third moment comes from ``spec`` or, failing
    that, from the known ``(a, b)`` pairs.
    """
    if a + b <= 0:
        raise ValueError(f"(a, b) = ({a}, {b}) violates a + b > 0")
    Z = _states(traj).astype(float)
    n = Z.size - 1
    den = math.fsum(Z[:-1] + a)
    if n == 0 or den == 0:
        raise UndefinedEstimatorError("zero denominator in m_tilde")
    est = math.fsum(Z[1:] - b) / den
    diag = {"out_of_range": float(not 0 < est < 1)}
    family = None if spec is not None else _FAMILY_BY_AB.get((float(a), float(b)))
    consts = _plugin_constants(spec, family, est if true_m is None else true_m, diag)
    var = None
    if consts is not None and consts.nu_tilde2 is not None:
        diag["c2"] = consts.c2
        var = consts.nu_tilde2 / n
    return _finish(EstimateReport(est, "true_parameter", n, var, None, diag), level)


def _bar_parts(Z: np.ndarray):
    n = Z.size - 1
    if n < 1:
        raise UndefinedEstimatorError("need at least one transition")
    prev, nxt = Z[:-1], Z[1:]
    zbar = math.fsum(prev) / n
    den = math.fsum((prev - zbar) ** 2)
    if den == 0:
        raise UndefinedEstimatorError("constant trajectory: zero variance denominator")
    return n, prev, nxt, zbar, den


def c_estimator_bar(traj, spec: OffspringSpec | None = None, family: str | None = None,
                    true_m: float | None = None,
                    level: float | None = 0.95) -> tuple[EstimateReport, EstimateReport]:
    """``m_bar = 1 - (1/2) sum (Z_i - Z_{i-1})^2 / sum (Z_{i-1} - Zbar)^2`` and ``sigma2_bar``.

    Values outside ``(0, 1)`` (or a negative ``sigma2_bar``) are returned as
    computed with ``out_of_range = 1`` in the diagnostics.  ``sigma2_bar``
    carries no variance.
    """
    Z = _states(traj).astype(float)
    n, prev, nxt, zbar, den = _bar_parts(Z)
    m_bar = 1.0 - 0.5 * math.fsum((nxt - prev) ** 2) / den
    s2 = m_bar * (1.0 - m_bar) * zbar
    diag = {"out_of_range": float(not 0 < m_bar < 1), "z_bar": zbar}
    var = None
    if spec is not None or family is not None:
        consts = _plugin_constants(spec, family, m_bar if true_m is None else true_m, diag)
        if consts is not None:
            diag["B2"] = consts.B2
            diag["c2"] = consts.c2
            var = consts.nu_bar2 / n
    rep_m = _finish(EstimateReport(m_bar, "true_parameter", n, var, None, diag), level)
    rep_s = EstimateReport(s2, "true_parameter", n, None, None,
                           {"out_of_range": float(s2 <= 0), "z_bar": zbar})
    return rep_m, rep_s


def m_bar_prime(traj) -> float:
    """``sum (Z_i - Zbar)(Z_{i-1} - Zbar) / sum (Z_{i-1} - Zbar)^2``."""
    Z = _states(traj).astype(float)
    _, prev, nxt, zbar, den = _bar_parts(Z)
    return math.fsum((nxt - zbar) * (prev - zbar)) / den
