"""Lyapunov functional, contraction constants and the moment-bound experiment.

The functional is ``V(ζ) = max_θ e^{3θ}|ζ(θ)|³`` applied to the squared
radius segment ``z_t = |x_t|²``.  Over one delay window the theory gives
``E V(z_r) <= δ·E V(ψ) + ρ`` with ``ψ = |φ|²`` and closed-form ``(δ, ρ)``;
this module evaluates those formulas, searches for a dissipativity level
``λ`` making ``δ < 1``, and fits the same affine recursion to simulated
iterates ``E V(z_{kr})``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .factorization import a_p_mu
from .integrators import PathEnsemble, simulate_ensemble
from .model import ConfigError, DelayModel, H0Failure, ModelError, Segment, SegmentGrid, sup_norms, verify_h0
from .stats import mann_kendall, mean_se, ols

__all__ = [
    "LyapunovConstants",
    "LyapunovReport",
    "R_lambda",
    "default_gamma",
    "default_kappa",
    "estimate_B",
    "eta_projection",
    "lambda_sweep",
    "lyapunov_V",
    "lyapunov_V_values",
    "run_lyapunov_experiment",
    "squared_radius_segment",
    "theoretical_delta_rho",
]

SWEEP_RADII = tuple(2.0**k for k in range(65))
SWEEP_LAMBDAS = tuple(2.0**k for k in range(101))


def lyapunov_V_values(z: np.ndarray, grid: SegmentGrid) -> np.ndarray:
    """``max_i e^{3θ_i}|z_i|³`` over the last axis of ``z`` (shape ``(..., n+1)``)."""
    w = np.exp(3.0 * grid.nodes)
    return np.max(w * np.abs(z) ** 3, axis=-1)


def lyapunov_V(zeta: Segment) -> float:
    if zeta.d != 1:
        raise ValueError("V is defined on scalar segments")
    return float(lyapunov_V_values(zeta.values[:, 0], zeta.grid))


def squared_radius_segment(seg: Segment) -> Segment:
    """Node-wise ``|x(θ)|²`` as a scalar segment."""
    return Segment(seg.grid, np.sum(seg.values * seg.values, axis=1))


def R_lambda(x, lam: float, f) -> np.ndarray | float:
    """``2<f(x),x> + λ|x|²``."""
    x = np.asarray(x, dtype=float)
    X = x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1)
    out = 2.0 * np.sum(f(X) * X, axis=1) + lam * np.sum(X * X, axis=1)
    return float(out[0]) if x.ndim <= 1 else out


def eta_projection(x, H) -> float:
    """Norm of the row vector ``x·H``, the scalar noise intensity of ``<x, H dB>``."""
    x = np.asarray(x, dtype=float).ravel()
    H = np.asarray(H, dtype=float).reshape(x.size, -1)
    v = x @ H
    return float(np.sqrt(v @ v))


def _probe_directions(d: int, seed: int = 0) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    u = np.random.default_rng(seed).standard_normal((2 * d, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def estimate_B(f, lam_grid, d: int = 1, radii=SWEEP_RADII) -> float:
    """``max_λ (sup_x R_λ(x) - λ·A_λ²)⁺`` over the λ grid.

    ``sup_x`` is taken over the origin and a geometric radius grid with 16
    points per octave up to the largest probe radius.  Propagates
    :class:`H0Failure` when some ``λ`` has no admissible radius.
    """
    radii = np.asarray(radii, dtype=float)
    dense = np.concatenate([[0.0], 2.0 ** np.arange(-10.0, math.log2(radii[-1]) + 1e-9, 1.0 / 16.0)])
    u = _probe_directions(d)
    X = (dense[:, None, None] * u[None]).reshape(-1, d)
    with np.errstate(over="ignore", invalid="ignore"):
        inner = 2.0 * np.sum(f(X) * X, axis=1)
        sq = np.sum(X * X, axis=1)
    B = 0.0
    for lam in lam_grid:
        A = verify_h0(f, lam, d=d, radii=radii)
        with np.errstate(over="ignore", invalid="ignore"):
            sup = float(np.nanmax(inner + lam * sq))
        if not math.isfinite(sup):
            raise ModelError(f"sup of R_lambda is not finite for lambda={lam}")
        B = max(B, sup - lam * A * A)
    return B


def default_kappa(r: float) -> float:
    return 0.5 * (1.0 + math.exp(3.0 * r))


def default_gamma(kappa: float) -> float:
    """Smallest ``γ`` with ``(a+b+c+d)³ <= κa³ + γ(b³+c³+d³)`` for ``a, b, c, d >= 0``.

    Convexity gives ``(a+S)³ <= κa³ + (1-κ^{-1/2})^{-2}S³`` and the power
    mean gives ``S³ <= 9(b³+c³+d³)`` for ``S = b+c+d``; both are tight.
    """
    if not kappa > 1:
        raise ValueError("kappa must exceed 1")
    return 9.0 / (1.0 - kappa**-0.5) ** 2


@dataclass
class LyapunovConstants:
    lam: float
    A: float
    B: float
    D: float
    L: float
    r: float
    kappa: float
    gamma: float
    a3: float
    delta: float = math.nan
    rho: float = math.nan
    denominator: float = math.nan
    feasible: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def theoretical_delta_rho(c: LyapunovConstants) -> LyapunovConstants:
    """Fill in ``δ``, ``ρ`` and feasibility for one set of inputs.

    Infeasible when the shared denominator is not positive or ``δ >= 1``.
    """
    lam, L, r, D = c.lam, c.L, c.r, c.D
    e3r = math.exp(3.0 * r)
    cubic = 27.0 * L**3 / lam**3
    L32, D32 = L**1.5, D**1.5
    den = 1.0 - c.gamma * e3r * (cubic + 16.0 * c.a3 * r * (D32 + 3.0 * L32))
    c.denominator = den
    if den <= 0:
        c.delta, c.rho, c.feasible = math.inf, math.inf, False
        return c
    num_delta = c.kappa / e3r + c.gamma * cubic * e3r + 16.0 * c.gamma * c.a3 * r * e3r * L32
    num_rho = c.gamma * (c.A**2 + (c.B + D) / lam) ** 3 + 16.0 * c.gamma * c.a3 * r * D32
    c.delta = num_delta / den
    c.rho = num_rho / den
    c.feasible = c.delta < 1.0
    return c


@dataclass
class LambdaSweep:
    constants: list[LyapunovConstants]
    lam_star: float | None
    B: float

    def to_dict(self) -> dict:
        return {
            "lam_star": self.lam_star,
            "B": self.B,
            "constants": [c.to_dict() for c in self.constants],
        }


def lambda_sweep(
    model: DelayModel,
    grid: SegmentGrid,
    lam_grid=SWEEP_LAMBDAS,
    radii=SWEEP_RADII,
    kappa: float | None = None,
    gamma: float | None = None,
    alpha: float | None = None,
    c_p: float | None = None,
) -> LambdaSweep:
    """Evaluate ``(δ, ρ)`` along a λ grid and report the first feasible ``λ*``.

    ``λ`` values with no admissible radius ``A_λ`` in the probe range are
    dropped.  ``a_{3,λ}`` uses the factorization constant at ``μ = λ``.
    """
    f, d, r = model.f, model.d, model.r
    kappa = default_kappa(r) if kappa is None else float(kappa)
    gamma = default_gamma(kappa) if gamma is None else float(gamma)
    D = model.D(grid)
    admissible = []
    for lam in lam_grid:
        try:
            admissible.append((lam, verify_h0(f, lam, d=d, radii=radii)))
        except H0Failure:
            continue
    if not admissible:
        raise H0Failure("no lambda in the sweep admits a radius A_lambda")
    B = estimate_B(f, [lam for lam, _ in admissible], d=d, radii=radii)
    out, lam_star = [], None
    for lam, A in admissible:
        c = LyapunovConstants(
            lam=lam, A=A, B=B, D=D, L=model.L, r=r, kappa=kappa, gamma=gamma,
            a3=a_p_mu(3.0, lam, alpha, c_p),
        )
        theoretical_delta_rho(c)
        out.append(c)
        if c.feasible and lam_star is None:
            lam_star = lam
    return LambdaSweep(out, lam_star, B)


@dataclass
class LyapunovReport:
    times: list[float]
    EV: list[float]
    EV_se: list[float]
    moment2: list[float]
    moment6: list[float]
    moment6_se: list[float]
    delta_hat: float
    rho_hat: float
    transient: int
    contraction: bool
    mk_z: float
    mk_p: float
    moment_trend_increasing: bool
    last_quarter_ratio: float
    moments_bounded: bool
    explosion_rate: float
    valid: bool
    n_paths: int
    dt: float
    sweep: dict | None = field(default=None)

    @property
    def plateau(self) -> float:
        return self.rho_hat / (1.0 - self.delta_hat) if self.delta_hat < 1 else math.inf

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plateau"] = self.plateau
        return d


def iterate_statistics(ens: PathEnsemble, K: int):
    """Per-path ``V(z_{kr})`` and ``‖x_{kr}‖`` for ``k = 0..K``, alive paths only."""
    n = ens.grid.n
    alive = ens.alive
    V = np.empty((K + 1, int(alive.sum())))
    S = np.empty_like(V)
    for k in range(K + 1):
        seg = ens.segments(k * n).values[alive]
        z = np.sum(seg * seg, axis=-1)
        V[k] = lyapunov_V_values(z, ens.grid)
        S[k] = np.sqrt(np.max(z, axis=-1))
    return V, S


def run_lyapunov_experiment(
    model: DelayModel,
    scheme: str,
    phi: Segment,
    n_paths: int,
    K: int,
    seed: int,
    *,
    threads: int = 1,
    transient: int = 2,
    allow_explicit: bool = False,
    with_sweep: bool = False,
    ensemble: PathEnsemble | None = None,
) -> LyapunovReport:
    """Monte Carlo iterates ``E V(z_{kr})``, moment curves and the fitted recursion.

    ``(δ̂, ρ̂)`` is the least-squares fit of ``E V(z_{(k+1)r})`` on
    ``E V(z_{kr})`` for ``k >= transient``.  The sixth moment is declared
    bounded when a 5% Mann–Kendall test finds no increasing trend and the
    last-quarter mean stays within 1.25 times the overall mean (same range
    of ``k``).
    """
    if scheme == "explicit_em" and not allow_explicit:
        raise ConfigError("explicit_em is excluded from the Lyapunov experiment", "scheme")
    if K < transient + 2:
        raise ConfigError(f"K must be at least {transient + 2}", "K")
    if ensemble is None:
        ensemble = simulate_ensemble(model, scheme, phi, n_paths, K * model.r, seed, threads=threads)
    V, S = iterate_statistics(ensemble, K)
    EV, EVse, m2, m6, m6se = [], [], [], [], []
    for k in range(K + 1):
        mv, sv = mean_se(V[k])
        EV.append(mv)
        EVse.append(sv)
        m2.append(mean_se(S[k] ** 2)[0])
        a, b = mean_se(S[k] ** 6)
        m6.append(a)
        m6se.append(b)
    delta_hat, rho_hat = ols(EV[transient:-1], EV[transient + 1 :])
    tail = np.asarray(m6[transient:])
    mk = mann_kendall(tail)
    q = max(1, tail.size // 4)
    full_mean = float(tail.mean())
    lq_ratio = float(tail[-q:].mean() / full_mean) if full_mean > 0 else 0.0
    bounded = (not mk.increasing(0.05)) and lq_ratio <= 1.25
    rate = ensemble.explosion_rate
    sweep = None
    if with_sweep:
        try:
            sweep = lambda_sweep(model, phi.grid).to_dict()
        except (H0Failure, ModelError) as e:
            sweep = {"lam_star": None, "error": str(e)}
    return LyapunovReport(
        times=[k * model.r for k in range(K + 1)],
        EV=EV,
        EV_se=EVse,
        moment2=m2,
        moment6=m6,
        moment6_se=m6se,
        delta_hat=delta_hat,
        rho_hat=rho_hat,
        transient=transient,
        contraction=bool(delta_hat < 1.0) if math.isfinite(delta_hat) else False,
        mk_z=mk.z,
        mk_p=mk.p_increasing,
        moment_trend_increasing=mk.increasing(0.05),
        last_quarter_ratio=lq_ratio,
        moments_bounded=bool(bounded),
        explosion_rate=rate,
        valid=rate == 0.0,
        n_paths=ensemble.n_paths,
        dt=ensemble.dt,
        sweep=sweep,
    )
