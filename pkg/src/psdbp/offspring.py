"""Offspring laws for population-size-dependent branching processes.

An :class:`OffspringSpec` pairs a distribution family with a mean model
``m(z)``.  Every family is parametrised by its mean, so the pmf at population
size ``z`` is fully determined by ``m(z)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

FAMILIES = ("geometric", "poisson", "two_point_binary", "two_bernoulli", "explicit_pmf")
MEAN_MODELS = ("constant", "ricker", "beverton_holt")

# two_bernoulli is the GW name for 2*Ber(m/2); the law is the same as two_point_binary.
_BINARY = ("two_point_binary", "two_bernoulli")


class OffspringSpecError(ValueError):
    """Raised when a parametrisation violates the standing assumptions."""


class UnsupportedFamilyError(ValueError):
    """Raised when an operation is not defined for the requested family."""


@dataclass(frozen=True)
class MeanModel:
    """Mean offspring function ``m(z)``.

    ``kind`` is one of ``constant`` (param ``m``), ``ricker`` (params ``r``,
    ``K``) or ``beverton_holt`` (param ``K``).
    """

    kind: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in MEAN_MODELS:
            raise OffspringSpecError(f"unknown mean model {self.kind!r}")
        required = {"constant": ("m",), "ricker": ("r", "K"), "beverton_holt": ("K",)}[self.kind]
        missing = [p for p in required if p not in self.params]
        if missing:
            raise OffspringSpecError(f"mean model {self.kind!r} needs parameters {missing}")
        object.__setattr__(self, "params", {k: float(v) for k, v in self.params.items()})
        if self.kind == "ricker" and not (self.params["r"] > 1 and self.params["K"] > 0):
            raise OffspringSpecError("ricker requires r > 1 and K > 0")
        if self.kind == "beverton_holt" and not self.params["K"] > 0:
            raise OffspringSpecError("beverton_holt requires K > 0")

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        p = self.params
        if self.kind == "constant":
            out = np.full_like(z, p["m"])
        elif self.kind == "ricker":
            out = p["r"] ** (1.0 - z / p["K"])
        else:
            out = 2.0 * p["K"] / (p["K"] + z)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class FiniteLaw:
    """A pmf on a finite set of non-negative integers."""

    values: np.ndarray
    probs: np.ndarray
    description: str = ""

    def moment(self, order: int, center: float = 0.0) -> float:
        return math.fsum(self.probs * (self.values - center) ** order)

    def mean(self) -> float:
        return self.moment(1)

    def variance(self) -> float:
        mu = self.mean()
        return self.moment(2, mu)

    def pmf(self, k: int) -> float:
        hit = self.probs[self.values == k]
        return float(hit.sum()) if hit.size else 0.0


def _normalise_pairs(pairs) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    ks = arr[:, 0]
    if np.any(ks < 0) or np.any(ks != np.round(ks)):
        raise OffspringSpecError("explicit pmf support must be non-negative integers")
    if np.any(arr[:, 1] < 0):
        raise OffspringSpecError("explicit pmf has negative probabilities")
    kmax = int(ks.max())
    p = np.zeros(kmax + 1)
    np.add.at(p, ks.astype(int), arr[:, 1])
    if abs(p.sum() - 1.0) > 1e-12:
        raise OffspringSpecError(f"explicit pmf sums to {p.sum()!r}, not 1")
    return np.arange(kmax + 1), p


@dataclass(frozen=True)
class OffspringSpec:
    """Offspring law ``xi(z)`` with mean ``m(z)``.

    Parameters
    ----------
    family : str
        One of ``geometric``, ``poisson``, ``two_point_binary``,
        ``two_bernoulli`` or ``explicit_pmf``.
    mean_model : MeanModel
        Ignored (may be ``None``) for ``explicit_pmf``, whose mean follows from
        the table.
    pmf_table : pairs or mapping
        For ``explicit_pmf`` only: a sequence of ``(k, p)`` pairs shared by all
        ``z``, or a mapping ``z -> pairs``.  A mapped law applies from its key
        up to the next key, so the mapping must contain ``z = 1``.
    pmf_tail_cutoff : float
        Tail mass discarded when an infinite-support pmf is tabulated.
    reach_bound : int
        States ``1..reach_bound`` are checked against the standing
        assumptions ``p0(z) > 0`` and ``p0(z) + p1(z) < 1``.
    allow_degenerate : bool
        Skip those checks; only meant for tests (e.g. ``p1 = 1``).
    """

    family: str
    mean_model: MeanModel | None = None
    pmf_table: Sequence | Mapping | None = None
    pmf_tail_cutoff: float = 1e-14
    reach_bound: int = 10_000
    allow_degenerate: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise OffspringSpecError(f"unknown family {self.family!r}")
        if self.family == "explicit_pmf":
            if self.pmf_table is None:
                raise OffspringSpecError("explicit_pmf needs pmf_table")
            if isinstance(self.pmf_table, Mapping):
                table = {int(z): _normalise_pairs(v) for z, v in self.pmf_table.items()}
                if 1 not in table:
                    raise OffspringSpecError("explicit pmf mapping must define z = 1")
                keys = np.array(sorted(table))
            else:
                table = {1: _normalise_pairs(self.pmf_table)}
                keys = np.array([1])
            object.__setattr__(self, "_table", table)
            object.__setattr__(self, "_keys", keys)
        elif self.mean_model is None:
            raise OffspringSpecError(f"family {self.family!r} needs a mean model")
        if not self.allow_degenerate:
            self._check_assumptions()

    # -- construction helpers -------------------------------------------
    @classmethod
    def constant(cls, family: str, m: float, **kw) -> "OffspringSpec":
        return cls(family, MeanModel("constant", {"m": m}), **kw)

    @classmethod
    def ricker(cls, family: str, r: float, K: float, **kw) -> "OffspringSpec":
        return cls(family, MeanModel("ricker", {"r": r, "K": K}), **kw)

    @classmethod
    def beverton_holt(cls, family: str, K: float, **kw) -> "OffspringSpec":
        return cls(family, MeanModel("beverton_holt", {"K": K}), **kw)

    @property
    def is_constant(self) -> bool:
        """True for a Galton--Watson law (no dependence on ``z``)."""
        if self.family == "explicit_pmf":
            return len(self._keys) == 1
        return self.mean_model.kind == "constant"

    def with_mean(self, m: float) -> "OffspringSpec":
        """Same family with a constant mean ``m`` (used for plug-in formulas)."""
        if self.family == "explicit_pmf":
            raise UnsupportedFamilyError("explicit_pmf has no mean parametrisation")
        return OffspringSpec(self.family, MeanModel("constant", {"m": m}),
                             pmf_tail_cutoff=self.pmf_tail_cutoff)

    def _check_assumptions(self):
        z = np.arange(1, self.reach_bound + 1)
        if self.family == "explicit_pmf":
            for key, (_, p) in self._table.items():
                p1 = p[1] if p.size > 1 else 0.0
                if not (p[0] > 0 and p[0] + p1 < 1):
                    raise OffspringSpecError(f"explicit pmf at z={key} violates p0 > 0, p0 + p1 < 1")
            return
        m = np.atleast_1d(self.mean_model(z))
        # a Ricker mean can underflow to 0 far above K; that is not a modelling error
        floor = 0.0 if self.mean_model.kind == "ricker" else np.finfo(float).tiny
        if np.any(~np.isfinite(m)) or np.any(m < floor):
            raise OffspringSpecError("mean must be positive and finite (p0 + p1 < 1 fails)")
        if self.family in _BINARY:
            bad = np.nonzero(m >= 2)[0]
            if bad.size:
                raise OffspringSpecError(
                    f"binary splitting needs m(z) < 2; m({bad[0] + 1}) = {m[bad[0]]:.6g}")

    # -- serialisation --------------------------------------------------
    def to_dict(self) -> dict:
        out = {"family": self.family}
        if self.mean_model is not None and self.family != "explicit_pmf":
            out["mean_model"] = self.mean_model.kind
            out["parameters"] = dict(self.mean_model.params)
        if self.family == "explicit_pmf":
            if isinstance(self.pmf_table, Mapping):
                out["pmf_table"] = {int(z): [list(map(float, kp)) for kp in v]
                                    for z, v in self.pmf_table.items()}
            else:
                out["pmf_table"] = [list(map(float, kp)) for kp in self.pmf_table]
        if self.pmf_tail_cutoff != 1e-14:
            out["pmf_tail_cutoff"] = self.pmf_tail_cutoff
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "OffspringSpec":
        d = dict(d)
        family = d.pop("family")
        kind = d.pop("mean_model", None)
        params = d.pop("parameters", {}) or {}
        mm = MeanModel(kind, params) if kind is not None else None
        extra = {k: d[k] for k in ("pmf_table", "pmf_tail_cutoff", "reach_bound", "allow_degenerate")
                 if k in d}
        unknown = set(d) - set(extra)
        if unknown:
            raise OffspringSpecError(f"unknown offspring keys {sorted(unknown)}")
        return cls(family, mm, **extra)


# ---------------------------------------------------------------------------
# moments and pmfs


def _check_z(z):
    if int(z) != z or z < 1:
        raise ValueError(f"population size must be a positive integer, got {z!r}")


def _explicit_law(spec: OffspringSpec, z: int):
    keys = spec._keys
    key = keys[np.searchsorted(keys, z, side="right") - 1]
    return spec._table[int(key)]


def mean(spec: OffspringSpec, z: int = 1) -> float:
    """Mean offspring ``m(z)``."""
    _check_z(z)
    if spec.family == "explicit_pmf":
        ks, p = _explicit_law(spec, z)
        return math.fsum(ks * p)
    return float(spec.mean_model(z))


def variance(spec: OffspringSpec, z: int = 1) -> float:
    """Offspring variance ``sigma^2(z)``."""
    m = mean(spec, z)
    if spec.family == "geometric":
        return m * (1.0 + m)
    if spec.family == "poisson":
        return m
    if spec.family in _BINARY:
        # sum k^2 p_k - m^2 with p_2 = m/2
        return 4.0 * (m / 2.0) - m * m
    ks, p = _explicit_law(spec, z)
    return math.fsum(p * (ks - m) ** 2)


def pmf(spec: OffspringSpec, z: int, k: int) -> float:
    """Exact ``P(xi(z) = k)``."""
    _check_z(z)
    if k < 0:
        return 0.0
    m = mean(spec, z)
    if spec.family == "geometric":
        return (1.0 / (1.0 + m)) * (m / (1.0 + m)) ** k
    if spec.family == "poisson":
        return float(stats.poisson.pmf(k, m))
    if spec.family in _BINARY:
        return {0: 1.0 - m / 2.0, 2: m / 2.0}.get(k, 0.0)
    ks, p = _explicit_law(spec, z)
    return float(p[k]) if k < p.size else 0.0


def support_bound(spec: OffspringSpec, z: int, cutoff: float | None = None) -> int:
    """Largest ``k`` kept once the tail mass drops below ``cutoff`` (default ``pmf_tail_cutoff``)."""
    m = mean(spec, z)
    # a factor 10 margin absorbs roundoff in the summed pmf
    eps = 0.1 * (spec.pmf_tail_cutoff if cutoff is None else cutoff)
    if spec.family == "geometric":
        # P(xi > k) = (m/(1+m))^(k+1)
        return max(0, math.ceil(math.log(eps) / math.log(m / (1.0 + m))) - 1)
    if spec.family == "poisson":
        # isf is unreliable far in the tail; scan the log-survival instead
        ks = np.arange(int(m + 40 * math.sqrt(m) + 100))
        return int(np.argmax(stats.poisson.logsf(ks, m) < math.log(eps)))
    if spec.family in _BINARY:
        return 2
    return _explicit_law(spec, z)[0][-1]


def pmf_vector(spec: OffspringSpec, z: int, cutoff: float | None = None) -> np.ndarray:
    """``[p_0(z), ..., p_K(z)]`` truncated where the tail mass is below the cutoff."""
    _check_z(z)
    if spec.family == "explicit_pmf":
        return _explicit_law(spec, z)[1].copy()
    kmax = support_bound(spec, z, cutoff)
    ks = np.arange(kmax + 1)
    m = mean(spec, z)
    if spec.family == "geometric":
        return (1.0 / (1.0 + m)) * (m / (1.0 + m)) ** ks
    if spec.family == "poisson":
        return stats.poisson.pmf(ks, m)
    return np.array([1.0 - m / 2.0, 0.0, m / 2.0])


# moment sums weight the tail by k^order, so they use a much smaller cutoff
MOMENT_CUTOFF = 1e-30


def raw_moment(spec: OffspringSpec, order: int, z: int = 1) -> float:
    """``E[xi(z)^order]`` by summation over the truncated pmf."""
    p = pmf_vector(spec, z, MOMENT_CUTOFF)
    return math.fsum(p * np.arange(p.size, dtype=float) ** order)


def central_moment(spec: OffspringSpec, order: int, z: int = 1) -> float:
    p = pmf_vector(spec, z, MOMENT_CUTOFF)
    m = mean(spec, z)
    return math.fsum(p * (np.arange(p.size, dtype=float) - m) ** order)


# ---------------------------------------------------------------------------
# Galton--Watson only


def _require_gw(spec: OffspringSpec, what: str):
    if not spec.is_constant:
        raise UnsupportedFamilyError(f"{what} is only defined for size-independent offspring laws")


def size_biased(spec: OffspringSpec, cutoff: float | None = None) -> FiniteLaw:
    """Size-biased law ``P[SB(xi) = k] = k p_k / m``.

    Poisson gives ``1 + xi``, geometric gives ``1 + xi + xi'`` and ``2 Ber(m/2)``
    gives the point mass at 2; other laws use the defining formula.
    """
    _require_gw(spec, "size_biased")
    eps = spec.pmf_tail_cutoff if cutoff is None else cutoff
    m = mean(spec)
    if not m > 0:
        raise OffspringSpecError("size-biasing needs m > 0")
    if spec.family == "poisson":
        p = pmf_vector(spec, 1, eps)
        return FiniteLaw(np.arange(1, p.size + 1), p, "1 + xi")
    if spec.family == "geometric":
        # xi + xi' is negative binomial with 2 successes
        q = 1.0 / (1.0 + m)
        kmax = int(stats.nbinom.isf(eps, 2, q)) + 1
        ks = np.arange(kmax + 1)
        return FiniteLaw(ks + 1, stats.nbinom.pmf(ks, 2, q), "1 + xi + xi'")
    if spec.family in _BINARY:
        return FiniteLaw(np.array([2]), np.array([1.0]), "2")
    p = pmf_vector(spec, 1, eps)
    ks = np.arange(p.size)
    return FiniteLaw(ks, ks * p / m, "k p_k / m")


_AB = {"poisson": (0.0, 1.0), "geometric": (1.0, 1.0),
       "two_point_binary": (-1.0, 2.0), "two_bernoulli": (-1.0, 2.0)}


def ab_constants(spec: OffspringSpec) -> tuple[float, float]:
    """Constants ``(a, b)`` with ``V(xi)/m = a m + b`` and ``a + b > 0``."""
    _require_gw(spec, "ab_constants")
    try:
        return _AB[spec.family]
    except KeyError:
        raise UnsupportedFamilyError(
            f"family {spec.family!r} has no known (a, b) with V/m = a m + b") from None
