"""Forward, full-tree and survival-conditioned simulation."""
from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import offspring as om
from . import qprocess as qp
from .offspring import OffspringSpec


# ---------------------------------------------------------------------------
# data types


def _as_states(states) -> np.ndarray:
    arr = np.asarray(states, dtype=np.int64).ravel()
    if arr.size == 0:
        raise ValueError("a trajectory needs at least Z_0")
    if arr[0] < 1:
        raise ValueError(f"Z_0 must be >= 1, got {arr[0]}")
    if np.any(arr < 0):
        raise ValueError("population sizes must be non-negative")
    dead = np.nonzero(arr == 0)[0]
    if dead.size and np.any(arr[dead[0]:] != 0):
        raise ValueError("absorption violated: positive size after extinction")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Generation sizes ``Z_0..Z_n``."""

    states: np.ndarray
    seed: int | tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "states", _as_states(self.states))

    @property
    def n(self) -> int:
        return self.states.size - 1

    @property
    def survived(self) -> bool:
        return bool(self.states[-1] > 0)

    def __len__(self):
        return self.states.size

    def __eq__(self, other):
        return isinstance(other, Trajectory) and np.array_equal(self.states, other.states)

    def __hash__(self):
        return hash(self.states.tobytes())


@dataclass(frozen=True, eq=False)
class TreeSample:
    """Per-generation tallies ``Z_i(k)`` for ``i = 0..n-1``.

    ``counts[i][k]`` is the number of generation-``i`` individuals with exactly
    ``k`` children.  ``z0`` is kept so that an empty sample (``n = 0``) still
    knows its starting size.
    """

    z0: int
    counts: tuple[Mapping[int, int], ...] = ()
    seed: int | tuple | None = None
    states: np.ndarray = field(init=False)

    def __post_init__(self):
        counts = tuple({int(k): int(c) for k, c in g.items() if c} for g in self.counts)
        object.__setattr__(self, "counts", counts)
        states = [int(self.z0)]
        for i, g in enumerate(counts):
            if sum(g.values()) != states[-1]:
                raise ValueError(f"generation {i}: sum_k Z_i(k) != Z_i")
            states.append(sum(k * c for k, c in g.items()))
        object.__setattr__(self, "states", _as_states(states))

    @property
    def n(self) -> int:
        return len(self.counts)

    def trajectory(self) -> Trajectory:
        return Trajectory(self.states, self.seed)


# ---------------------------------------------------------------------------
# seeding and single-generation draws


def trajectory_rng(seed: int, index: int | None = None) -> np.random.Generator:
    """Generator for replication ``index`` under master ``seed``.

    The stream depends only on ``(seed, index)``, so batches may run in any
    order or split across workers.
    """
    if index is None:
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(index),)))


def _rng(seed, rng):
    if rng is not None:
        return rng
    if isinstance(seed, tuple):
        return trajectory_rng(*seed)
    return np.random.default_rng(seed)


def _next_size(spec: OffspringSpec, z: int, rng: np.random.Generator) -> int:
    """Total offspring of ``z`` individuals of a generation of size ``z``."""
    if z == 0:
        return 0
    fam = spec.family
    if fam == "explicit_pmf":
        p = om.pmf_vector(spec, z)
        return int(rng.multinomial(z, p / p.sum()) @ np.arange(p.size))
    m = float(spec.mean_model(z))
    if fam == "poisson":
        return int(rng.poisson(z * m))
    if fam == "geometric":
        return int(rng.negative_binomial(z, 1.0 / (1.0 + m)))
    return 2 * int(rng.binomial(z, m / 2.0))


def _tally(spec: OffspringSpec, z: int, rng: np.random.Generator) -> dict[int, int]:
    if spec.family in ("two_point_binary", "two_bernoulli"):
        c2 = int(rng.binomial(z, om.mean(spec, z) / 2.0))
        return {0: z - c2, 2: c2}
    p = om.pmf_vector(spec, z)
    draw = rng.multinomial(z, p / p.sum())
    return {int(k): int(c) for k, c in enumerate(draw) if c}


def _check_start(z0, n):
    if int(z0) != z0 or z0 < 1:
        raise ValueError(f"z0 must be a positive integer, got {z0!r}")
    if int(n) != n or n < 0:
        raise ValueError(f"horizon must be a non-negative integer, got {n!r}")


# ---------------------------------------------------------------------------
# forward simulation


def simulate(spec: OffspringSpec, z0: int, n: int, seed=None, *,
             rng: np.random.Generator | None = None) -> Trajectory:
    """Unconditioned trajectory ``Z_0 = z0, ..., Z_n``.

    ``seed`` may be an int or a ``(master, index)`` pair (see :func:`trajectory_rng`).
    """
    _check_start(z0, n)
    g = _rng(seed, rng)
    out = [int(z0)]
    for _ in range(n):
        out.append(_next_size(spec, out[-1], g))
    return Trajectory(out, seed)


def simulate_tree(spec: OffspringSpec, z0: int, n: int, seed=None, *,
                  rng: np.random.Generator | None = None) -> TreeSample:
    """Forward simulation recording how many individuals had ``k`` children."""
    _check_start(z0, n)
    g = _rng(seed, rng)
    z = int(z0)
    counts = []
    for _ in range(n):
        tally = _tally(spec, z, g) if z else {}
        counts.append(tally)
        z = sum(k * c for k, c in tally.items())
    return TreeSample(int(z0), tuple(counts), seed)


def survival_probability(spec: OffspringSpec, i: int, s: int,
                         kernel: qp.TruncatedKernel | None = None) -> float:
    """``P_i(Z_s > 0)``.

    Size-independent laws iterate the pgf in the complementary form
    ``y_t = 1 - f(1 - y_{t-1})`` to avoid cancellation; size-dependent laws
    need a truncated kernel and use ``e_i^T Q^s 1``.
    """
    if s < 0 or i < 0:
        raise ValueError("i and s must be non-negative")
    if i == 0:
        return 0.0
    if s == 0:
        return 1.0
    if spec.is_constant:
        p = om.pmf_vector(spec, 1)
        p = p / p.sum()
        ks = np.arange(p.size, dtype=float)
        y = 1.0 - p[0]
        for _ in range(s - 1):
            y = math.fsum(p * -np.expm1(ks * math.log1p(-y)))
        return float(-math.expm1(i * math.log1p(-y)))
    if kernel is None:
        raise ValueError("size-dependent offspring law: a truncated kernel is required")
    if i > kernel.z_max:
        raise ValueError(f"state {i} outside truncation 1..{kernel.z_max}")
    x = np.ones(kernel.z_max)
    for _ in range(s):
        x = kernel.matvec(x)
    return float(x[i - 1])


# ---------------------------------------------------------------------------
# multilevel splitting


def splitting_block_length(spec: OffspringSpec, z0: int, n: int,
                           kernel: qp.TruncatedKernel | None = None) -> int:
    """Largest ``s <= n`` with ``2 P_{z0}(Z_s > 0) >= 1``, floored at 1."""
    s = 1
    while s < n and 2.0 * survival_probability(spec, z0, s + 1, kernel) >= 1.0:
        s += 1
    return s


def simulate_conditioned_splitting(spec: OffspringSpec, z0: int, n: int, seed=None, *,
                                   rng: np.random.Generator | None = None,
                                   kernel: qp.TruncatedKernel | None = None,
                                   block: int | None = None,
                                   max_restarts: int = 10**7) -> Trajectory:
    """Trajectory with ``Z_n > 0`` by multilevel splitting.

    The horizon is cut into blocks of ``s`` generations.  The first block is
    rerun from scratch until it survives.  At each later block boundary every
    surviving path is duplicated and both copies continue independently; if
    all copies die the whole run restarts at generation 0.  A survivor at
    generation ``n`` is returned, chosen uniformly.
    """
    if n < 1:
        raise ValueError("splitting needs n >= 1")
    _check_start(z0, n)
    g = _rng(seed, rng)
    if kernel is None and not spec.is_constant:
        kernel = qp.adaptive_kernel(spec, min_zmax=2 * z0)[0]
    s = block or splitting_block_length(spec, z0, n, kernel)
    for _ in range(max_restarts):
        paths = [[int(z0)]]
        t, first = 0, True
        while t < n and paths:
            length = min(s, n - t)
            survivors = []
            for path in paths:
                for _ in range(1 if first else 2):
                    x = list(path)
                    for _ in range(length):
                        x.append(_next_size(spec, x[-1], g))
                    if x[-1] > 0:
                        survivors.append(x)
            if first and not survivors:
                # first block: rerun until it survives
                continue
            first = False
            t += length
            paths = survivors
        if paths:
            return Trajectory(paths[int(g.integers(len(paths)))], seed)
    raise RuntimeError(f"splitting failed after {max_restarts} restarts")


# ---------------------------------------------------------------------------
# Q-process hybrid


def _cdf_rows(M) -> list[tuple[list[int], list[float]]]:
    rows = []
    for i in range(M.shape[0]):
        lo, hi = M.indptr[i], M.indptr[i + 1]
        cols = (M.indices[lo:hi] + 1).tolist()
        c = np.cumsum(M.data[lo:hi])
        if c.size:
            c /= c[-1]
        rows.append((cols, c.tolist()))
    return rows


class HybridSampler:
    """Q-process for ``n - k`` steps, then the exactly conditioned chain.

    Build once per ``(kernel, triple, k)`` and call :meth:`sample` per
    trajectory; everything held here is read-only after construction.
    """

    def __init__(self, kernel: qp.TruncatedKernel, triple: qp.SpectralTriple, k: int):
        if k < 1:
            raise ValueError("tail length k must be >= 1")
        self.kernel = kernel
        self.triple = triple
        self.k = int(k)
        self.qt = qp.q_transitions(kernel, triple)
        self._up = _cdf_rows(self.qt.matrix)
        self.survival = qp.SurvivalVectors(kernel, self.k - 1)
        self._tail: dict[int, list] = {}
        self.d_k = qp.coupling_error(kernel, triple, self.k)

    def _tail_rows(self, t: int):
        rows = self._tail.get(t)
        if rows is None:
            rows = self._tail[t] = _cdf_rows(self.survival.conditioned_rows(t))
        return rows

    def error_bound(self, n: int) -> float:
        return 0.0 if self.k >= n else self.d_k

    def sample(self, z0: int, n: int, seed=None, *, rng: np.random.Generator | None = None) -> Trajectory:
        if not 1 <= self.k <= n:
            raise ValueError(f"tail length k={self.k} must satisfy 1 <= k <= n={n}")
        if not 1 <= z0 <= self.kernel.z_max:
            raise ValueError(f"z0={z0} outside truncation 1..{self.kernel.z_max}")
        g = _rng(seed, rng)
        draws = g.random(n).tolist()
        z = int(z0)
        out = [z]
        for step, x in enumerate(draws):
            t = n - step
            cols, cdf = (self._up if t > self.k else self._tail_rows(t))[z - 1]
            if not cols:
                raise ValueError(f"state {z} has no surviving transitions")
            z = cols[min(bisect.bisect_right(cdf, x), len(cols) - 1)]
            out.append(z)
        return Trajectory(out, seed)


def simulate_conditioned_hybrid(spec: OffspringSpec, kernel: qp.TruncatedKernel,
                                triple: qp.SpectralTriple, z0: int, n: int, k: int, seed=None, *,
                                rng: np.random.Generator | None = None,
                                sampler: HybridSampler | None = None) -> tuple[Trajectory, float]:
    """Approximately conditioned trajectory and its total-variation bound ``d(k)``.

    When ``k == n`` every step uses the exact conditioned rows and the bound is 0.
    """
    if k > n:
        raise ValueError(f"tail length k={k} exceeds horizon n={n}")
    if kernel.spec is not None and spec is not None and kernel.spec != spec:
        raise ValueError("kernel was built for a different offspring spec")
    if sampler is None or sampler.k != k or sampler.kernel is not kernel:
        sampler = HybridSampler(kernel, triple, k)
    traj = sampler.sample(z0, n, seed, rng=rng)
    return traj, sampler.error_bound(n)


# ---------------------------------------------------------------------------
# CSV export


def trajectories_to_csv(trajs: Iterable[Trajectory], ids: Sequence[int] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trajectory_id", "generation", "population"])
    for pos, tr in enumerate(trajs):
        tid = ids[pos] if ids is not None else pos
        for gen, z in enumerate(tr.states.tolist()):
            w.writerow([tid, gen, z])
    return buf.getvalue()


def trees_to_csv(trees: Iterable[TreeSample], ids: Sequence[int] | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trajectory_id", "generation", "k", "count"])
    for pos, tree in enumerate(trees):
        tid = ids[pos] if ids is not None else pos
        for gen, tally in enumerate(tree.counts):
            for k in sorted(tally):
                w.writerow([tid, gen, k, tally[k]])
    return buf.getvalue()


def trajectories_from_csv(text: str) -> list[Trajectory]:
    rows: dict[int, list[tuple[int, int]]] = {}
    for rec in csv.DictReader(io.StringIO(text)):
        rows.setdefault(int(rec["trajectory_id"]), []).append(
            (int(rec["generation"]), int(rec["population"])))
    return [Trajectory([z for _, z in sorted(v)]) for _, v in sorted(rows.items())]
