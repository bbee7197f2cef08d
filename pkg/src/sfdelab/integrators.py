"""Time-stepping schemes for delay equations and the ensemble driver.

Three schemes are provided.  ``explicit_em`` is plain Euler–Maruyama and
diverges under superlinear drift; it is kept as a negative control.
``tamed_em`` replaces ``f`` by ``f/(1 + dt|f|)``.  ``split_step_implicit``
solves ``y = x_k + dt·f(y)`` and then adds the explicit delay drift and the
noise.  In every scheme ``g`` and ``h`` are evaluated at the pre-step
segment, and the step equals the segment grid spacing, so delay lookups never
interpolate.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import (
    ConfigError,
    DelayModel,
    LinearDrift,
    PolyDissipativeDrift,
    Segment,
    SegmentBatch,
    SegmentGrid,
    sup_norms,
)
from .noise import NoiseStream, block_normals

__all__ = [
    "EXPLOSION_THRESHOLD",
    "PathEnsemble",
    "SCHEMES",
    "SchemeError",
    "TrajectoryState",
    "implicit_drift_solve",
    "segment_moment_bound",
    "simulate_ensemble",
    "step",
    "tamed_drift",
]

SCHEMES = ("explicit_em", "tamed_em", "split_step_implicit")
EXPLOSION_THRESHOLD = 1e12
CHUNK_SIZE = 256
NOISE_BLOCK = 512


class SchemeError(RuntimeError):
    def __init__(self, message: str, iterations: int):
        self.iterations = iterations
        super().__init__(f"{message} after {iterations} iterations")


def tamed_drift(F: np.ndarray, dt: float) -> np.ndarray:
    """``F / (1 + dt·|F|)`` row-wise; the result has norm below ``min(|F|, 1/dt)``."""
    F = np.asarray(F, dtype=float)
    nrm = np.sqrt(np.sum(F * F, axis=-1, keepdims=True))
    return F / (1.0 + dt * nrm)


def _radial_solve(x, dt, s, tol, max_iter):
    # y = ρ·x/|x| where ρ + dt·ρ^{s+1} = |x|; convex increasing in ρ, so
    # Newton started right of the root decreases monotonically onto it
    R = np.sqrt(np.sum(x * x, axis=-1))
    with np.errstate(divide="ignore"):
        rho = np.minimum(R, (R / dt) ** (1.0 / (s + 1.0)))
    lo = np.zeros_like(R)
    hi = R.copy()
    thresh = tol * (1.0 + R)
    for it in range(1, max_iter + 1):
        rs = rho**s
        phi = rho + dt * rho * rs - R
        done = np.abs(phi) <= thresh
        if done.all():
            break
        hi = np.where(phi > 0, np.minimum(hi, rho), hi)
        lo = np.where(phi < 0, np.maximum(lo, rho), lo)
        new = rho - phi / (1.0 + dt * (s + 1.0) * rs)
        outside = ~((new >= lo) & (new <= hi))
        new = np.where(outside, 0.5 * (lo + hi), new)
        rho = np.where(done, rho, new)
    else:
        rs = rho**s
        if not np.all(np.abs(rho + dt * rho * rs - R) <= thresh):
            raise SchemeError("radial implicit solve did not converge", max_iter)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(R > 0, rho / R, 0.0)
    return x * scale[..., None]


def _fd_jacobian(f, y):
    N, d = y.shape
    J = np.empty((N, d, d))
    h = 1e-7 * (1.0 + np.abs(y))
    for j in range(d):
        e = np.zeros_like(y)
        e[:, j] = h[:, j]
        J[:, :, j] = (f(y + e) - f(y - e)) / (2.0 * h[:, j : j + 1])
    return J


def _newton_solve(x, dt, f, tol, max_iter):
    y = x.copy()
    thresh = tol * (1.0 + np.sqrt(np.sum(x * x, axis=1)))
    jac = getattr(f, "jacobian", None)
    eye = np.eye(x.shape[1])

    def residual(v, x0):
        return v - x0 - dt * f(v)

    F = residual(y, x)
    nF = np.sqrt(np.sum(F * F, axis=1))
    for it in range(1, max_iter + 1):
        active = nF > thresh
        if not active.any():
            return y
        ya, Fa, xa = y[active], F[active], x[active]
        J = eye - dt * (jac(ya) if jac is not None else _fd_jacobian(f, ya))
        delta = np.linalg.solve(J, Fa[..., None])[..., 0]
        t = np.ones(ya.shape[0])
        base = nF[active]
        cand = ya - delta
        Fc = residual(cand, xa)
        nc = np.sqrt(np.sum(Fc * Fc, axis=1))
        for _ in range(30):
            bad = ~(nc <= (1.0 - 1e-4 * t) * base) & (base > thresh[active])
            if not bad.any():
                break
            t = np.where(bad, 0.5 * t, t)
            cand = np.where(bad[:, None], ya - t[:, None] * delta, cand)
            Fc = np.where(bad[:, None], residual(cand, xa), Fc)
            nc = np.sqrt(np.sum(Fc * Fc, axis=1))
        y[active], F[active], nF[active] = cand, Fc, nc
    if np.any(nF > thresh):
        raise SchemeError("damped Newton implicit solve did not converge", max_iter)
    return y


def implicit_drift_solve(x, dt: float, f, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Solve ``y = x + dt·f(y)`` to ``|y - x - dt·f(y)| <= tol·(1 + |x|)``.

    Linear drifts are solved directly and the benchmark drift ``-x|x|^s``
    through its radial equation; anything else uses damped Newton.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None] if single else x
    if isinstance(f, LinearDrift):
        y = X @ f.implicit_inverse(dt)
    elif isinstance(f, PolyDissipativeDrift) and f.a is None:
        y = _radial_solve(X, dt, f.s, tol, max_iter)
    else:
        y = _newton_solve(X, dt, f, tol, max_iter)
    return y[0] if single else y


class TrajectoryState:
    """Ring buffer holding one delay window for ``N`` trajectories.

    Slot ``head`` holds the oldest node ``θ_0 = -r`` and the slot before it
    the current state.  The state doubles as the segment view handed to
    ``g`` and ``h``.
    """

    def __init__(self, phi: Segment, n_paths: int = 1, scheme: str = "tamed_em"):
        if scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {scheme!r}", "scheme")
        self.grid: SegmentGrid = phi.grid
        self.scheme = scheme
        self.size = phi.grid.n + 1
        self.buf = np.array(np.broadcast_to(phi.values, (n_paths,) + phi.values.shape))
        self.head = 0
        self.k = 0

    def __len__(self):
        return self.buf.shape[0]

    @property
    def dt(self) -> float:
        return self.grid.dt

    def node(self, i: int) -> np.ndarray:
        return self.buf[:, (self.head + i) % self.size]

    @property
    def current(self) -> np.ndarray:
        return self.buf[:, (self.head - 1) % self.size]

    @property
    def values(self) -> np.ndarray:
        h = self.head
        if h == 0:
            return self.buf
        return np.concatenate((self.buf[:, h:], self.buf[:, :h]), axis=1)

    def push(self, x: np.ndarray):
        self.buf[:, self.head] = x
        self.head = (self.head + 1) % self.size
        self.k += 1

    def segment(self, path: int = 0) -> Segment:
        return Segment(self.grid, self.values[path])


def _step(state: TrajectoryState, model: DelayModel, dW: np.ndarray):
    dt = state.grid.dt
    x = state.current
    gx = model.g(state)
    H = model.h(state)
    if model.m == 1:
        noise = H[:, :, 0] * dW
    else:
        noise = np.einsum("nij,nj->ni", H, dW)
    scheme = state.scheme
    if scheme == "explicit_em":
        new = x + (model.f(x) + gx) * dt + noise
    elif scheme == "tamed_em":
        new = x + (tamed_drift(model.f(x), dt) + gx) * dt + noise
    else:
        new = implicit_drift_solve(x, dt, model.f) + gx * dt + noise
    return new, noise


def step(state: TrajectoryState, model: DelayModel, dW) -> np.ndarray:
    """Next state ``x_{k+1}`` for every trajectory; the state is not modified."""
    dW = np.asarray(dW, dtype=float).reshape(len(state), model.m)
    return _step(state, model, dW)[0]


@dataclass(eq=False)
class PathEnsemble:
    """``N`` simulated paths on ``[-r, T]``.

    ``paths[i, j]`` is ``x(-r + j·dt)`` for path ``i``; index ``j = n + k``
    is time step ``k``.  Exploded paths are frozen at their last accepted
    state; ``exploded`` and ``explode_step`` record when this happened.
    ``J`` (when recorded) is the running Itô sum of ``h(x_{t_k})·ΔB_k``.
    """

    model: DelayModel
    scheme: str
    grid: SegmentGrid
    seed: int
    steps: int
    paths: np.ndarray
    exploded: np.ndarray
    explode_step: np.ndarray
    ids: np.ndarray
    J: np.ndarray | None = None
    phi: Segment | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def T(self) -> float:
        return self.steps * self.grid.dt

    @property
    def alive(self) -> np.ndarray:
        return ~self.exploded

    @property
    def explosion_rate(self) -> float:
        return float(np.mean(self.exploded))

    def step_index(self, t: float) -> int:
        k = t / self.grid.dt
        i = int(round(k))
        if abs(k - i) > 1e-6 or not 0 <= i <= self.steps:
            raise ConfigError(f"time {t!r} is not a grid time in [0, {self.T}]", "t")
        return i

    def x(self, k: int) -> np.ndarray:
        """States at step ``k`` for all paths, ``(N, d)``."""
        return self.paths[:, self.grid.n + k]

    def segments(self, k: int) -> SegmentBatch:
        """Segments ``x_{t_k}`` for all paths as a zero-copy view."""
        n = self.grid.n
        return SegmentBatch(self.grid, self.paths[:, k : k + n + 1])

    def segment(self, path: int, k: int) -> Segment:
        n = self.grid.n
        return Segment(self.grid, self.paths[path, k : k + n + 1])

    def sup_abs(self) -> np.ndarray:
        """``max_{0<=t<=T} |x(t)|`` per path."""
        n = self.grid.n
        return sup_norms(self.paths[:, n:])


def _simulate_chunk(model, scheme, phi, ids, steps, seed, paths, J, exploded, explode_step):
    grid = phi.grid
    n, dt = grid.n, grid.dt
    c = len(ids)
    state = TrajectoryState(phi, c, scheme)
    streams = [NoiseStream(seed, int(i), dt, model.m) for i in ids]
    paths[:, : n + 1] = phi.values
    alive = np.ones(c, dtype=bool)
    sqdt = math.sqrt(dt)
    limit = EXPLOSION_THRESHOLD**2
    Jrun = np.zeros((c, model.d)) if J is not None else None
    if J is not None:
        J[:, 0] = 0.0
    k = 0
    while k < steps:
        B = min(NOISE_BLOCK, steps - k)
        Z = block_normals(streams, B) * sqdt
        for j in range(B):
            with np.errstate(all="ignore"):
                new, noise = _step(state, model, Z[:, j])
                r2 = np.sum(new * new, axis=1)
            bad = ~(r2 <= limit)
            if bad.any():
                fresh = bad & alive
                explode_step[fresh] = k + 1
                alive &= ~bad
                new[~alive] = state.current[~alive]
            state.push(new)
            paths[:, n + 1 + k] = new
            if Jrun is not None:
                Jrun[alive] += noise[alive]
                J[:, k + 1] = Jrun
            k += 1
    exploded[:] = ~alive


def simulate_ensemble(
    model: DelayModel,
    scheme: str,
    phi: Segment,
    n_paths: int,
    T: float,
    seed: int,
    *,
    threads: int = 1,
    record_martingale: bool = False,
    first_id: int = 0,
) -> PathEnsemble:
    """Simulate ``n_paths`` trajectories on ``[-r, T]`` from initial segment ``phi``.

    Trajectory ``i`` uses the noise stream ``(seed, first_id + i)``.  Paths
    are processed in fixed-size chunks, so the output is bit-identical for
    any ``threads``.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown scheme {scheme!r}", "scheme")
    grid = phi.grid
    if not math.isclose(grid.r, model.r, rel_tol=1e-12):
        raise ConfigError(f"phi delay {grid.r} != model delay {model.r}", "phi")
    if phi.d != model.d:
        raise ConfigError(f"phi dimension {phi.d} != model dimension {model.d}", "phi")
    if n_paths < 1:
        raise ConfigError("need at least one path", "paths")
    steps = int(round(T / grid.dt))
    if steps < 0 or abs(steps * grid.dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ConfigError(f"T={T!r} is not a multiple of dt={grid.dt!r}", "T")
    n = grid.n
    paths = np.empty((n_paths, n + 1 + steps, model.d))
    J = np.empty((n_paths, steps + 1, model.d)) if record_martingale else None
    exploded = np.zeros(n_paths, dtype=bool)
    explode_step = np.full(n_paths, -1, dtype=np.int64)
    ids = np.arange(first_id, first_id + n_paths, dtype=np.int64)

    def work(lo):
        hi = min(lo + CHUNK_SIZE, n_paths)
        _simulate_chunk(
            model,
            scheme,
            phi,
            ids[lo:hi],
            steps,
            seed,
            paths[lo:hi],
            None if J is None else J[lo:hi],
            exploded[lo:hi],
            explode_step[lo:hi],
        )

    starts = range(0, n_paths, CHUNK_SIZE)
    if threads > 1 and n_paths > CHUNK_SIZE:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for lo in starts:
            work(lo)
    return PathEnsemble(
        model=model,
        scheme=scheme,
        grid=grid,
        seed=int(seed),
        steps=steps,
        paths=paths,
        exploded=exploded,
        explode_step=explode_step,
        ids=ids,
        J=J,
        phi=phi,
    )


def segment_moment_bound(ens: PathEnsemble, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-path ``sup_k ‖x_{t_k}‖^p`` and ``‖φ‖^p + sup_{0<=t<=T}|x(t)|^p``.

    The first never exceeds the second; both are over alive paths.
    """
    n = ens.grid.n
    P = ens.paths[ens.alive]
    r2 = np.sum(P * P, axis=-1)
    phi_part = np.sqrt(np.max(r2[:, : n + 1], axis=1)) ** p
    run_part = np.sqrt(np.max(r2[:, n:], axis=1)) ** p
    lhs = np.maximum(phi_part, np.sqrt(np.max(r2[:, n + 1 :], axis=1)) ** p) if ens.steps else phi_part
    return lhs, phi_part + run_part
