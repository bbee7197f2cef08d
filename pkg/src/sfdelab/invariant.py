"""Occupation-measure estimates of the invariant law of the segment process.

Segments are observed through a finite projection ``π(x_t) = (x_t(θ_1), …)``
and pooled over paths and times ``T_0, T_0 + Δ_c, …`` after burn-in.
Invariance is tested by comparing the pooled laws of ``π(x_t)`` and
``π(x_{t+ℓ})`` with the energy distance; the permutation p-value swaps the
two collections path by path so that within-path dependence is kept.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .integrators import PathEnsemble
from .model import ConfigError, SegmentGrid
from .stats import mean_se

__all__ = [
    "EmpiricalSegmentMeasure",
    "InvarianceReport",
    "ProjectionSpec",
    "collect_measure",
    "energy_distance",
    "energy_test",
    "invariance_test",
    "variance_with_se",
]


@dataclass(frozen=True)
class ProjectionSpec:
    """Grid-aligned evaluation offsets ``θ ∈ [-r, 0]``."""

    offsets: tuple[float, ...]

    def __post_init__(self):
        if not self.offsets:
            raise ConfigError("projection needs at least one offset", "proj")
        object.__setattr__(self, "offsets", tuple(float(o) for o in self.offsets))

    @classmethod
    def full(cls, grid: SegmentGrid) -> "ProjectionSpec":
        return cls(tuple(grid.nodes))

    def indices(self, grid: SegmentGrid) -> np.ndarray:
        return np.array([grid.index_of(o) for o in self.offsets], dtype=int)


@dataclass(eq=False)
class EmpiricalSegmentMeasure:
    """Pooled projected segments, sorted canonically by value.

    ``samples`` has one row per (path, time) with the projected node
    values flattened as ``[θ_1 components…, θ_2 components…]``.
    """

    samples: np.ndarray
    path_ids: np.ndarray
    times: np.ndarray
    offsets: tuple[float, ...]
    T0: float
    stride: float
    n_paths: int
    n_times: int

    @property
    def count(self) -> int:
        return self.samples.shape[0]


def _collection_steps(ens: PathEnsemble, T0: float, stride: float, stop: float | None = None):
    dt = ens.dt
    q = int(round(stride / dt))
    if q < 1 or abs(q * dt - stride) > 1e-9 * max(1.0, stride):
        raise ConfigError(f"stride {stride!r} is not a multiple of dt", "stride")
    if T0 < 0:
        raise ConfigError("burn-in must be nonnegative", "burnin")
    k0 = int(math.ceil(T0 / dt - 1e-9))
    last = ens.steps if stop is None else int(math.floor(stop / dt + 1e-9))
    if k0 > last:
        raise ConfigError(f"burn-in {T0} leaves nothing to collect before {last * dt}", "burnin")
    return np.arange(k0, last + 1, q)


def _project(ens: PathEnsemble, steps: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``(n_alive, len(steps), len(idx)·d)`` projected values."""
    X = ens.paths[ens.alive]
    cols = steps[:, None] + idx[None, :]
    out = X[:, cols]  # (N, S, P, d)
    return out.reshape(out.shape[0], out.shape[1], -1)


def collect_measure(
    ens: PathEnsemble, proj: ProjectionSpec, T0: float | None = None, stride: float | None = None
) -> EmpiricalSegmentMeasure:
    """Pool ``π(x_t)`` for ``t = T0, T0 + stride, …`` over the non-exploded paths.

    Defaults are ``T0 = 10r`` and ``stride = r``.
    """
    r = ens.grid.r
    T0 = 10.0 * r if T0 is None else float(T0)
    stride = r if stride is None else float(stride)
    steps = _collection_steps(ens, T0, stride)
    if not ens.alive.any():
        raise ConfigError("every path exploded; nothing to collect", "paths")
    idx = proj.indices(ens.grid)
    S = _project(ens, steps, idx)
    N, K, P = S.shape
    samples = S.reshape(N * K, P)
    pids = np.repeat(ens.ids[ens.alive], K)
    times = np.tile(steps * ens.dt, N)
    order = np.lexsort(samples.T[::-1])
    return EmpiricalSegmentMeasure(
        samples=samples[order],
        path_ids=pids[order],
        times=times[order],
        offsets=proj.offsets,
        T0=T0,
        stride=stride,
        n_paths=N,
        n_times=K,
    )


def variance_with_se(measure: EmpiricalSegmentMeasure, column: int = 0) -> tuple[float, float]:
    """Pooled variance of one coordinate, with a path-clustered standard error."""
    x = measure.samples[:, column]
    dev2 = (x - x.mean()) ** 2
    n = x.size
    var = float(dev2.sum() / (n - 1))
    uniq, inv = np.unique(measure.path_ids, return_inverse=True)
    per_path = np.bincount(inv, weights=dev2) / np.bincount(inv)
    if uniq.size < 2:
        return var, math.nan
    return var, float(np.std(per_path, ddof=1) / math.sqrt(uniq.size))


# ---------------------------------------------------------------------------
# energy distance


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _cross_sum_1d(a: np.ndarray, b_sorted: np.ndarray, prefix: np.ndarray) -> float:
    # Σ_{i,j} |a_i - b_j| using the sorted b and its prefix sums
    m = b_sorted.size
    c = np.searchsorted(b_sorted, a)
    below = a * c - prefix[c]
    above = (prefix[m] - prefix[c]) - a * (m - c)
    return float(np.sum(below + above))


def _cross_mean(A: np.ndarray, B: np.ndarray) -> float:
    if A.shape[1] == 1:
        bs = np.sort(B[:, 0])
        prefix = np.concatenate([[0.0], np.cumsum(bs)])
        return _cross_sum_1d(A[:, 0], bs, prefix) / (A.shape[0] * B.shape[0])
    total = 0.0
    for lo in range(0, A.shape[0], 1024):
        diff = A[lo : lo + 1024, None, :] - B[None, :, :]
        total += float(np.sum(np.sqrt(np.sum(diff * diff, axis=-1))))
    return total / (A.shape[0] * B.shape[0])


def energy_distance(a, b) -> float:
    """V-statistic ``2·E|A-B| - E|A-A'| - E|B-B'|`` over Euclidean distances."""
    A, B = _as_2d(a), _as_2d(b)
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ValueError("energy distance needs nonempty samples")
    if A.shape[1] != B.shape[1]:
        raise ValueError("samples differ in dimension")
    return 2.0 * _cross_mean(A, B) - _cross_mean(A, A) - _cross_mean(B, B)


def _within_sum_sorted(x: np.ndarray) -> float:
    # Σ_{i<j} |x_i - x_j| for one sample
    s = np.sort(x)
    n = s.size
    return float(np.dot(s, 2.0 * np.arange(n) - (n - 1)))


class _Energy1D:
    """Energy statistic for a fixed pooled sample under relabeling."""

    def __init__(self, pooled: np.ndarray):
        self.pooled = pooled
        self.total = _within_sum_sorted(pooled)

    def stat(self, mask: np.ndarray) -> float:
        a, b = self.pooled[mask], self.pooled[~mask]
        n, m = a.size, b.size
        sa, sb = _within_sum_sorted(a), _within_sum_sorted(b)
        cross = self.total - sa - sb
        return 2.0 * cross / (n * m) - 2.0 * sa / (n * n) - 2.0 * sb / (m * m)


def energy_test(a, b, n_perm: int = 999, seed: int = 0, blocks_a=None, blocks_b=None) -> tuple[float, float]:
    """Energy distance and permutation p-value.

    Labels are permuted at the level of blocks (default: individual
    samples).  Multivariate samples use the full pooled distance matrix.
    """
    A, B = _as_2d(a), _as_2d(b)
    pooled = np.concatenate([A, B])
    na = A.shape[0]
    ba = np.arange(na) if blocks_a is None else np.asarray(blocks_a)
    bb = np.arange(B.shape[0]) + (ba.max() + 1) if blocks_b is None else np.asarray(blocks_b)
    labels = np.concatenate([ba, bb])
    uniq, inv = np.unique(labels, return_inverse=True)
    in_a = np.zeros(uniq.size, dtype=bool)
    in_a[np.unique(inv[:na])] = True
    if np.any(in_a[inv[na:]]):
        raise ValueError("a block cannot contribute to both samples")
    n_blocks_a = int(in_a.sum())
    rng = np.random.default_rng(seed)
    if pooled.shape[1] == 1:
        E = _Energy1D(pooled[:, 0])
        stat = E.stat
    else:
        if pooled.shape[0] > 6000:
            raise ValueError("multivariate permutation test limited to 6000 pooled samples")
        diff = pooled[:, None, :] - pooled[None, :, :]
        Dm = np.sqrt(np.sum(diff * diff, axis=-1))

        def stat(mask):
            n, m = mask.sum(), (~mask).sum()
            return (2.0 * Dm[mask][:, ~mask].sum() / (n * m) - Dm[mask][:, mask].sum() / n**2
                    - Dm[~mask][:, ~mask].sum() / m**2)

    observed = stat(in_a[inv])
    hits = 0
    for _ in range(n_perm):
        chosen = np.zeros(uniq.size, dtype=bool)
        chosen[rng.choice(uniq.size, n_blocks_a, replace=False)] = True
        if stat(chosen[inv]) >= observed:
            hits += 1
    return energy_distance(A, B), (1 + hits) / (n_perm + 1)


@dataclass
class InvarianceReport:
    lag: float
    T0: float
    stride: float
    distances: list[float]
    max_distance: float
    p_value: float
    reject_5pct: bool
    n_paths: int
    n_times: int
    means: list[float]
    variances: list[float]
    dt: float

    def to_dict(self) -> dict:
        return asdict(self)


def invariance_test(
    ens: PathEnsemble,
    proj: ProjectionSpec,
    T0: float | None = None,
    lag: float | None = None,
    stride: float | None = None,
    n_perm: int = 999,
    seed: int = 12345,
) -> InvarianceReport:
    """Compare the pooled laws of ``π(x_t)`` and ``π(x_{t+ℓ})`` after burn-in.

    The statistic is the largest per-coordinate energy distance.  Under
    stationarity the two collections of a path are exchangeable, so the
    permutation swaps them for a random subset of paths.
    """
    r = ens.grid.r
    T0 = 10.0 * r if T0 is None else float(T0)
    stride = r if stride is None else float(stride)
    lag = 2.0 * r if lag is None else float(lag)
    ql = int(round(lag / ens.dt))
    if ql < 1 or abs(ql * ens.dt - lag) > 1e-9 * max(1.0, lag):
        raise ConfigError(f"lag {lag!r} is not a positive multiple of dt", "lag")
    if not ens.alive.any():
        raise ConfigError("every path exploded; nothing to collect", "paths")
    steps = _collection_steps(ens, T0, stride, stop=ens.T - lag)
    idx = proj.indices(ens.grid)
    SA = _project(ens, steps, idx)  # (N, K, P)
    SB = _project(ens, steps + ql, idx)
    N, K, P = SA.shape
    stats = [_Energy1D(np.concatenate([SA[:, :, c].ravel(), SB[:, :, c].ravel()])) for c in range(P)]
    base_mask = np.concatenate([np.ones(N * K, bool), np.zeros(N * K, bool)])

    def stat(mask):
        return max(s.stat(mask) for s in stats)

    observed = stat(base_mask)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_perm):
        flip = np.repeat(rng.random(N) < 0.5, K)
        mask = np.concatenate([~flip, flip])
        if stat(mask) >= observed:
            hits += 1
    p = (1 + hits) / (n_perm + 1)
    distances = [energy_distance(SA[:, :, c].ravel(), SB[:, :, c].ravel()) for c in range(P)]
    flat = SA.reshape(N * K, P)
    return InvarianceReport(
        lag=lag, T0=T0, stride=stride, distances=distances, max_distance=max(distances),
        p_value=p, reject_5pct=p < 0.05, n_paths=N, n_times=K,
        means=[mean_se(flat[:, c])[0] for c in range(P)],
        variances=[float(np.var(flat[:, c], ddof=1)) if flat.shape[0] > 1 else 0.0 for c in range(P)],
        dt=ens.dt,
    )
