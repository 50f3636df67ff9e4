"""Truncated kernel, spectral triple and Q-process functionals.

States ``1..z_max`` map to array index ``z - 1`` throughout.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse, stats

from . import offspring as om
from .offspring import OffspringSpec


class TruncationWarning(UserWarning):
    """Mass beyond ``z_max`` is not negligible on states the process visits."""


class SpectralConvergenceError(RuntimeError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"power iteration did not converge after {iterations} iterations "
                         f"(residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


class TruncationTooSmallError(RuntimeError):
    """Q-process rows deviate from stochasticity by more than the allowed slack."""


class InfeasibleTargetError(RuntimeError):
    """Requested coupling error cannot be reached on this kernel."""


# ---------------------------------------------------------------------------
# kernel


@dataclass(frozen=True)
class TruncatedKernel:
    """Sub-stochastic kernel ``Q`` on states ``1..z_max``.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix
        ``matrix[i-1, j-1] = Q_ij``.
    absorbed : ndarray
        ``Q_i0`` per row.
    truncated : ndarray
        Mass each row places beyond ``z_max``.
    """

    z_max: int
    matrix: sparse.csr_matrix
    absorbed: np.ndarray
    truncated: np.ndarray
    spec: OffspringSpec | None = None
    _transpose: sparse.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.matrix.shape != (self.z_max, self.z_max):
            raise ValueError("kernel matrix shape does not match z_max")
        object.__setattr__(self, "_transpose", self.matrix.T.tocsr())

    @classmethod
    def from_matrix(cls, Q, absorbed=None, spec=None) -> "TruncatedKernel":
        """Wrap an explicit matrix; row deficits count as absorption unless given."""
        Q = sparse.csr_matrix(np.asarray(Q.toarray() if sparse.issparse(Q) else Q, dtype=float))
        if Q.nnz and (Q.data.min() < 0 or Q.data.max() > 1):
            raise ValueError("kernel entries must lie in [0, 1]")
        rows = np.asarray(Q.sum(axis=1)).ravel()
        if np.any(rows > 1 + 1e-12):
            raise ValueError("kernel rows must be sub-stochastic")
        if absorbed is None:
            absorbed = np.clip(1.0 - rows, 0.0, None)
            truncated = np.zeros_like(rows)
        else:
            absorbed = np.asarray(absorbed, dtype=float)
            truncated = np.clip(1.0 - rows - absorbed, 0.0, None)
        return cls(Q.shape[0], Q, absorbed, truncated, spec)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def row(self, i: int) -> dict[int, float]:
        """Sparse row ``j -> Q_ij`` for state ``i``."""
        _check_state(self, i)
        r = self.matrix.getrow(i - 1)
        return {int(j) + 1: float(q) for j, q in zip(r.indices, r.data)}

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def rmatvec(self, x: np.ndarray) -> np.ndarray:
        return self._transpose @ x


def _check_state(kernel: TruncatedKernel, z: int):
    if int(z) != z or not 1 <= z <= kernel.z_max:
        raise ValueError(f"state {z} outside truncation 1..{kernel.z_max}")


def _power_pmf(p: np.ndarray, n: int, length: int) -> np.ndarray:
    """``n``-fold self-convolution of ``p`` truncated to ``length`` entries."""
    out = np.zeros(length)
    out[0] = 1.0
    base = p[:length].copy()
    while n:
        if n & 1:
            out = np.convolve(out, base)[:length]
        n >>= 1
        if n:
            base = np.convolve(base, base)[:length]
    return out


def build_kernel(spec: OffspringSpec, z_max: int) -> TruncatedKernel:
    """Kernel whose row ``i`` is the law of a sum of ``i`` copies of ``xi(i)``.

    Named families use their closed-form ``i``-fold sums (Poisson, negative
    binomial, twice a binomial); ``explicit_pmf`` rows are built by repeated
    squaring of the pmf.
    """
    if z_max < 1:
        raise ValueError("z_max must be >= 1")
    i = np.arange(1, z_max + 1)
    j = np.arange(0, z_max + 1)
    fam = spec.family
    if fam == "explicit_pmf":
        full = np.empty((z_max, z_max + 1))
        for row in range(z_max):
            full[row] = _power_pmf(om.pmf_vector(spec, row + 1), row + 1, z_max + 1)
        absorbed = full[:, 0].copy()
        truncated = np.clip(1.0 - full.sum(axis=1), 0.0, None)
    else:
        m = np.atleast_1d(spec.mean_model(i)).astype(float)
        if fam == "poisson":
            lam = (i * m)[:, None]
            full = stats.poisson.pmf(j[None, :], lam)
            truncated = stats.poisson.sf(z_max, lam[:, 0])
        elif fam == "geometric":
            q = (1.0 / (1.0 + m))[:, None]
            full = stats.nbinom.pmf(j[None, :], i[:, None], q)
            truncated = stats.nbinom.sf(z_max, i, q[:, 0])
        else:
            p2 = (m / 2.0)[:, None]
            half = np.arange(z_max // 2 + 1)
            full = np.zeros((z_max, z_max + 1))
            full[:, 2 * half] = stats.binom.pmf(half[None, :], i[:, None], p2)
            truncated = stats.binom.sf(z_max // 2, i, p2[:, 0])
        absorbed = full[:, 0].copy()
    Q = sparse.csr_matrix(full[:, 1:])
    Q.eliminate_zeros()
    return TruncatedKernel(z_max, Q, absorbed, np.asarray(truncated, dtype=float), spec)


# ---------------------------------------------------------------------------
# spectral triple


@dataclass(frozen=True)
class SpectralTriple:
    """``(rho, u, v)`` with ``u @ Q = rho u``, ``Q @ v = rho v``, ``sum(u) = 1``, ``u @ v = 1``."""

    rho: float
    u: np.ndarray
    v: np.ndarray
    residual: float
    iterations: int = 0

    @property
    def z_max(self) -> int:
        return self.u.size

    def uv(self, z: int) -> float:
        return float(self.u[z - 1] * self.v[z - 1])


def spectral(kernel: TruncatedKernel, tol: float = 1e-12, max_iters: int = 10**6) -> SpectralTriple:
    """Power iteration for the dominant eigentriple of ``Q``.

    ``v`` is iterated from the all-ones vector, ``u`` from the uniform law; the
    eigenvalue is the Rayleigh quotient ``u Q v / u v``.  Stops when both
    ``||u Q - rho u||_1`` (with ``sum(u) = 1``) and ``||Q v - rho v||_inf / ||v||_inf``
    drop below ``tol``.
    """
    n = kernel.z_max
    v = np.ones(n)
    u = np.full(n, 1.0 / n)
    resid = math.inf
    for it in range(1, max_iters + 1):
        w = kernel.matvec(v)
        y = kernel.rmatvec(u)
        rho = float(u @ w) / float(u @ v)
        r_v = np.abs(w - rho * v).max() / np.abs(v).max()
        r_u = np.abs(y - rho * u).sum()
        resid = max(r_u, r_v)
        if resid < tol:
            break
        wmax = np.abs(w).max()
        ysum = y.sum()
        if wmax == 0 or ysum == 0:
            raise SpectralConvergenceError(resid, it)
        v = w / wmax
        u = y / ysum
    else:
        raise SpectralConvergenceError(resid, max_iters)
    u = u / u.sum()
    v = v / float(u @ v)
    return SpectralTriple(rho, u, v, float(resid), it)


def check_truncation(kernel: TruncatedKernel, triple: SpectralTriple,
                     kernel_tolerance: float = 1e-9, mass_threshold: float = 1e-10) -> list[int]:
    """States whose truncated mass exceeds ``kernel_tolerance`` while ``u_i > mass_threshold``.

    Emits a :class:`TruncationWarning` if the list is non-empty.
    """
    bad = np.nonzero((kernel.truncated > kernel_tolerance) & (triple.u > mass_threshold))[0] + 1
    if bad.size:
        warnings.warn(f"{bad.size} states with non-negligible quasi-stationary mass lose more "
                      f"than {kernel_tolerance:g} beyond z_max={kernel.z_max} (first: {bad[0]})",
                      TruncationWarning, stacklevel=2)
    return bad.tolist()


def adaptive_kernel(spec: OffspringSpec, z_start: int = 50, min_zmax: int = 1,
                    tail_tol: float = 1e-8, max_zmax: int = 20_000, tol: float = 1e-12,
                    max_iters: int = 10**6) -> tuple[TruncatedKernel, SpectralTriple]:
    """Double ``z_max`` until ``sum_{j > 0.8 z_max} u_j < tail_tol`` and ``z_max >= min_zmax``."""
    z = max(z_start, 1)
    while True:
        if z >= min_zmax:
            kernel = build_kernel(spec, z)
            triple = spectral(kernel, tol=tol, max_iters=max_iters)
            tail = triple.u[int(math.floor(0.8 * z)):].sum()
            if tail < tail_tol:
                check_truncation(kernel, triple)
                return kernel, triple
        if z >= max_zmax:
            raise TruncationTooSmallError(f"quasi-stationary tail still {tail:.2e} at z_max={z}")
        z = min(2 * z, max_zmax)


# ---------------------------------------------------------------------------
# Q-process


@dataclass(frozen=True)
class QTransitions:
    """Row-stochastic Q-process kernel with the pre-renormalisation row sums."""

    matrix: sparse.csr_matrix
    row_sums: np.ndarray

    @property
    def max_deviation(self) -> float:
        live = self.row_sums > 0
        return float(np.abs(self.row_sums[live] - 1.0).max()) if live.any() else 0.0

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def q_transitions(kernel: TruncatedKernel, triple: SpectralTriple,
                  max_deviation: float = 1e-4) -> QTransitions:
    """``Qup_ij = Q_ij v_j / (rho v_i)``, rows renormalised to sum to one."""
    v = triple.v
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(v > 0, 1.0 / (triple.rho * v), 0.0)
    Qup = (sparse.diags(scale) @ kernel.matrix @ sparse.diags(v)).tocsr()
    sums = np.asarray(Qup.sum(axis=1)).ravel()
    live = sums > 0
    dev = np.abs(sums[live] - 1.0).max() if live.any() else 0.0
    if dev > max_deviation:
        raise TruncationTooSmallError(f"Q-process row sums deviate by {dev:.3e} before renormalisation")
    norm = np.where(live, 1.0 / np.where(live, sums, 1.0), 0.0)
    Qup = (sparse.diags(norm) @ Qup).tocsr()
    return QTransitions(Qup, sums)


def stationary_law(triple: SpectralTriple, return_deviation: bool = False):
    """``pi_j = u_j v_j``, renormalised to a probability vector."""
    pi = triple.u * triple.v
    total = pi.sum()
    pi = pi / total
    return (pi, abs(total - 1.0)) if return_deviation else pi


def _qup_moments(kernel, triple, qt=None):
    qt = qt or q_transitions(kernel, triple)
    j = np.arange(1, kernel.z_max + 1, dtype=float)
    first = qt.matrix @ j
    second = qt.matrix @ (j * j)
    return j, first, second


def m_up_all(kernel: TruncatedKernel, triple: SpectralTriple, qt: QTransitions | None = None) -> np.ndarray:
    """``m_up(z)`` for every ``z = 1..z_max``."""
    j, first, _ = _qup_moments(kernel, triple, qt)
    return first / j


def sigma2_up_all(kernel: TruncatedKernel, triple: SpectralTriple, qt: QTransitions | None = None) -> np.ndarray:
    j, first, second = _qup_moments(kernel, triple, qt)
    return second / j**2 - (first / j) ** 2


def m_up(kernel: TruncatedKernel, triple: SpectralTriple, z: int, qt: QTransitions | None = None) -> float:
    """Normalised Q-process mean ``z^-1 sum_j j Qup_zj``."""
    _check_state(kernel, z)
    return float(m_up_all(kernel, triple, qt)[z - 1])


def sigma2_up(kernel: TruncatedKernel, triple: SpectralTriple, z: int, qt: QTransitions | None = None) -> float:
    """Normalised Q-process variance ``z^-2 sum_k k^2 Qup_zk - m_up(z)^2``."""
    _check_state(kernel, z)
    return float(sigma2_up_all(kernel, triple, qt)[z - 1])


# ---------------------------------------------------------------------------
# survival vectors and conditioned rows


class SurvivalVectors:
    """``Q^t 1`` for ``t = 0..t_max``, stored as unit-max vectors plus log scales.

    Storing the scale separately keeps the vectors representable for long
    horizons where ``Q^t 1`` itself would underflow.
    """

    def __init__(self, kernel: TruncatedKernel, t_max: int):
        self.kernel = kernel
        vecs = [np.ones(kernel.z_max)]
        logs = [0.0]
        for _ in range(t_max):
            w = kernel.matvec(vecs[-1])
            s = w.max()
            if s <= 0:
                raise ValueError("survival vector vanished on every state")
            vecs.append(w / s)
            logs.append(logs[-1] + math.log(s))
        self.vectors = vecs
        self.log_scale = np.array(logs)

    @property
    def t_max(self) -> int:
        return len(self.vectors) - 1

    def value(self, t: int) -> np.ndarray:
        """``Q^t 1`` (may underflow for large ``t``)."""
        return self.vectors[t] * math.exp(self.log_scale[t])

    def conditioned_rows(self, t: int) -> sparse.csr_matrix:
        """All rows of the conditioned kernel with ``t`` steps remaining."""
        if not 1 <= t <= self.t_max + 1:
            raise ValueError(f"steps remaining must be in 1..{self.t_max + 1}")
        s = self.vectors[t - 1]
        R = (self.kernel.matrix @ sparse.diags(s)).tocsr()
        sums = np.asarray(R.sum(axis=1)).ravel()
        norm = np.where(sums > 0, 1.0 / np.where(sums > 0, sums, 1.0), 0.0)
        return (sparse.diags(norm) @ R).tocsr()


def conditioned_row(kernel: TruncatedKernel, i: int, t: int,
                    survival: SurvivalVectors | None = None) -> np.ndarray:
    """Row ``j -> Q_ij (Q^{t-1} 1)_j / (Q^t 1)_i`` as a dense vector over ``1..z_max``.

    The denominator is the row sum of the numerator, so the returned row is
    normalised on the truncated state space.
    """
    _check_state(kernel, i)
    if t < 1:
        raise ValueError("steps remaining must be >= 1")
    if survival is None or survival.t_max < t - 1:
        survival = SurvivalVectors(kernel, t - 1)
    s = survival.vectors[t - 1]
    row = kernel.matrix.getrow(i - 1).toarray().ravel() * s
    total = math.fsum(row)
    if total <= 0:
        raise ValueError(f"survival for {t} steps from state {i} has probability zero")
    return row / total


# ---------------------------------------------------------------------------
# coupling error


@dataclass(frozen=True)
class CouplingProfile:
    """``d(k)`` for ``k = 0..k_max`` with a monotonicity diagnostic."""

    d: np.ndarray
    limit: float

    @property
    def k_max(self) -> int:
        return self.d.size - 1

    @property
    def monotone_from(self) -> int:
        """Smallest ``k0`` with ``d`` non-increasing on ``k0..k_max``."""
        inc = np.nonzero(np.diff(self.d) > 0)[0]
        return int(inc[-1] + 1) if inc.size else 0

    def first_below(self, target: float) -> int | None:
        hit = np.nonzero(self.d < target)[0]
        return int(hit[0]) if hit.size else None


def _coupling_terms(kernel, triple, k_max):
    y = np.ones(kernel.z_max)
    out = np.empty(k_max + 1)
    u, v = triple.u, triple.v
    out[0] = 0.5 * math.fsum(u * np.abs(y - v))
    for k in range(1, k_max + 1):
        # y_k = Q^k 1 / rho^k, so d(k) = 0.5 sum u |y_k - v|
        y = kernel.matvec(y) / triple.rho
        out[k] = 0.5 * math.fsum(u * np.abs(y - v))
    return out


def coupling_error(kernel: TruncatedKernel, triple: SpectralTriple, k: int) -> float:
    """``d(k) = (rho^-k / 2) sum_j u_j |(Q^k 1)_j - rho^k v_j|``."""
    if k < 0:
        raise ValueError("k must be >= 0")
    return float(_coupling_terms(kernel, triple, k)[-1])


def coupling_error_profile(kernel: TruncatedKernel, triple: SpectralTriple, k_max: int) -> CouplingProfile:
    return CouplingProfile(_coupling_terms(kernel, triple, k_max), coupling_limit(triple))


def coupling_limit(triple: SpectralTriple) -> float:
    """``(1/2) sum_j u_j |1 - v_j|``."""
    return 0.5 * math.fsum(triple.u * np.abs(1.0 - triple.v))


def smallest_k(kernel: TruncatedKernel, triple: SpectralTriple, target: float = 1e-6,
               k_max: int = 100_000) -> int:
    """Smallest ``k >= 1`` with ``d(k) < target``."""
    y = np.ones(kernel.z_max)
    u, v = triple.u, triple.v
    for k in range(1, k_max + 1):
        y = kernel.matvec(y) / triple.rho
        if 0.5 * math.fsum(u * np.abs(y - v)) < target:
            return k
    raise InfeasibleTargetError(f"d(k) stays above {target:g} up to k={k_max}")


# ---------------------------------------------------------------------------
# text dumps


def dump_kernel(kernel: TruncatedKernel) -> str:
    """Plain-text dump: one ``row i j q`` line per entry plus per-row absorbed/truncated mass."""
    lines = [f"# truncated kernel z_max={kernel.z_max}", "# mass i absorbed truncated",
             "# row i j Q_ij"]
    Q = kernel.matrix
    for i in range(kernel.z_max):
        lines.append(f"mass {i + 1} {float(kernel.absorbed[i])!r} {float(kernel.truncated[i])!r}")
        lo, hi = Q.indptr[i], Q.indptr[i + 1]
        for j, q in zip(Q.indices[lo:hi], Q.data[lo:hi]):
            lines.append(f"row {i + 1} {j + 1} {float(q)!r}")
    return "\n".join(lines) + "\n"


def load_kernel(text: str) -> TruncatedKernel:
    z_max = None
    rows, cols, vals, mass = [], [], [], {}
    for line in text.splitlines():
        if line.startswith("# truncated kernel"):
            z_max = int(line.split("z_max=")[1])
        elif line.startswith("mass "):
            _, i, a, t = line.split()
            mass[int(i)] = (float(a), float(t))
        elif line.startswith("row "):
            _, i, j, q = line.split()
            rows.append(int(i) - 1)
            cols.append(int(j) - 1)
            vals.append(float(q))
    if z_max is None:
        raise ValueError("missing kernel header")
    Q = sparse.csr_matrix((vals, (rows, cols)), shape=(z_max, z_max))
    absorbed = np.array([mass[i][0] for i in range(1, z_max + 1)])
    truncated = np.array([mass[i][1] for i in range(1, z_max + 1)])
    return TruncatedKernel(z_max, Q, absorbed, truncated)


def dump_triple(triple: SpectralTriple) -> str:
    lines = [f"# spectral triple z_max={triple.z_max}", f"rho {float(triple.rho)!r}",
             f"residual {float(triple.residual)!r}", "# state u_i v_i"]
    lines += [f"{i + 1} {float(a)!r} {float(b)!r}" for i, (a, b) in enumerate(zip(triple.u, triple.v))]
    return "\n".join(lines) + "\n"


def load_triple(text: str) -> SpectralTriple:
    rho = resid = None
    u, v = [], []
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        if key == "rho":
            rho = float(rest[0])
        elif key == "residual":
            resid = float(rest[0])
        else:
            u.append(float(rest[0]))
            v.append(float(rest[1]))
    return SpectralTriple(rho, np.array(u), np.array(v), resid)
