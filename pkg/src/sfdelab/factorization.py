"""Stochastic convolution ``v_μ(t) = ∫_0^t e^{-μ(t-s)} η(s) dβ(s)`` and its sup-moment constant.

``a_p_mu`` is the constant in

    E sup_{0<=t<=T} |v_μ(t)|^p  <=  a_{p,μ} · E ∫_0^T |η(s)|^p ds,

obtained by the factorization method with an auxiliary exponent
``α ∈ (1/p, 1/2)`` and a Burkholder–Davis–Gundy constant ``c_p``.  Neither
is pinned by the theory; the defaults are the midpoint of the admissible
``α`` interval and ``c_p = (p(p-1)/2)^{p/2}``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .noise import NoiseStream, block_normals
from .stats import Z99, mean_se

__all__ = [
    "ConvolutionRun",
    "FactorizationCheck",
    "a_p_mu",
    "bdg_constant",
    "check_factorization_bound",
    "default_alpha",
    "gamma_fn",
    "simulate_convolution",
]

# Rational Lanczos sum (13 terms, g = 6.0246800407767296), scaled by e^{-g};
# coefficients listed from the highest power of x down
_LANCZOS_G = 6.024680040776729583740234375
_LANCZOS_NUM = (
    0.006061842346248906525783753964555936883222,
    0.5098416655656676188125178644804694509993,
    19.51992788247617482847860966235652136208,
    449.9445569063168119446858607650988409623,
    6955.999602515376140356310115515198987526,
    75999.29304014542649875303443598909137092,
    601859.6171681098786670226533699352302507,
    3481712.15498064590882071018964774556468,
    14605578.08768506808414169982791359218571,
    43338889.32467613834773723740590533316085,
    86363131.28813859145546927288977868422342,
    103794043.1163445451906271053616070238554,
    56906521.91347156388090791033559122686859,
)
_LANCZOS_DEN = (
    1.0, 66.0, 1925.0, 32670.0, 357423.0, 2637558.0, 13339535.0,
    45995730.0, 105258076.0, 150917976.0, 120543840.0, 39916800.0, 0.0,
)


def _lanczos_sum_expg_scaled(x: float) -> float:
    num = den = 0.0
    for a, b in zip(_LANCZOS_NUM, _LANCZOS_DEN):
        num = num * x + a
        den = den * x + b
    return num / den


def gamma_fn(x: float) -> float:
    """Γ(x) for ``x > 0`` by the Lanczos approximation (reflection below 1/2)."""
    x = float(x)
    if not x > 0 or math.isinf(x):
        raise ValueError(f"gamma_fn is defined here for finite x > 0, got {x!r}")
    if x < 0.5:
        return math.pi / (math.sin(math.pi * x) * gamma_fn(1.0 - x))
    base = (x + _LANCZOS_G - 0.5) / math.e
    half = base ** (0.5 * (x - 0.5))
    return _lanczos_sum_expg_scaled(x) * half * half


def default_alpha(p: float) -> float:
    return 0.5 * (1.0 / p + 0.5)


def bdg_constant(p: float) -> float:
    """Conventional BDG bound ``(p(p-1)/2)^{p/2}`` for continuous martingales."""
    return (0.5 * p * (p - 1.0)) ** (0.5 * p)


def a_p_mu(p: float, mu: float, alpha: float | None = None, c_p: float | None = None) -> float:
    """``c_{p,μ}·((p-1)/(μp))^{pα-1}·Γ((αp-1)/(p-1))^{p-1}``."""
    if not p > 2:
        raise ValueError("p must exceed 2")
    if not mu > 0:
        raise ValueError("mu must be positive")
    alpha = default_alpha(p) if alpha is None else float(alpha)
    if not 1.0 / p < alpha < 0.5:
        raise ValueError(f"alpha must lie in (1/p, 1/2), got {alpha!r}")
    c_p = bdg_constant(p) if c_p is None else float(c_p)
    c_pmu = c_p * (gamma_fn(1.0 - 2.0 * alpha) / (2.0 * mu) ** (1.0 - 2.0 * alpha)) ** (0.5 * p)
    return (
        c_pmu
        * ((p - 1.0) / (mu * p)) ** (p * alpha - 1.0)
        * gamma_fn((alpha * p - 1.0) / (p - 1.0)) ** (p - 1.0)
    )


@dataclass
class ConvolutionRun:
    sup: np.ndarray  # per-path max over the grid of |v_μ|
    terminal: np.ndarray  # per-path v_μ(T)
    eta_p_integral: np.ndarray | None  # per-path ∫|η|^p ds when η is a recorded path


def simulate_convolution(
    mu: float,
    eta,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
    p: float | None = None,
) -> ConvolutionRun:
    """Simulate ``v_μ`` with the exact exponential recursion.

    ``eta`` is a constant or an ``(n_paths, steps)`` array of values held
    constant over each step.  Each step adds ``η_k·sqrt((1 - e^{-2μdt})/(2μ))·ξ_k``,
    which is the exact transition for piecewise-constant ``η``.
    """
    if not (mu > 0 and T > 0 and dt > 0):
        raise ValueError("mu, T and dt must be positive")
    steps = int(round(T / dt))
    decay = math.exp(-mu * dt)
    sd = math.sqrt(-math.expm1(-2.0 * mu * dt) / (2.0 * mu))
    eta_arr = None if np.isscalar(eta) else np.asarray(eta, dtype=float)
    if eta_arr is not None and eta_arr.shape != (n_paths, steps):
        raise ValueError(f"eta path must have shape {(n_paths, steps)}")
    streams = [NoiseStream(seed, i, dt, 1) for i in range(n_paths)]
    v = np.zeros(n_paths)
    sup = np.zeros(n_paths)
    k = 0
    while k < steps:
        B = min(512, steps - k)
        Z = block_normals(streams, B)[:, :, 0]
        for j in range(B):
            e = eta if eta_arr is None else eta_arr[:, k]
            v = decay * v + (e * sd) * Z[:, j]
            np.maximum(sup, np.abs(v), out=sup)
            k += 1
    integral = None
    if eta_arr is not None and p is not None:
        integral = np.sum(np.abs(eta_arr) ** p, axis=1) * dt
    return ConvolutionRun(sup=sup, terminal=v, eta_p_integral=integral)


@dataclass
class FactorizationCheck:
    p: float
    mu: float
    alpha: float
    c_p: float
    a: float
    lhs: float
    lhs_se: float
    rhs: float
    ratio: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def check_factorization_bound(
    p: float,
    mu: float,
    alpha: float | None = None,
    c_p: float | None = None,
    eta=1.0,
    T: float = 1.0,
    n_paths: int = 20000,
    seed: int = 0,
    dt: float = 1e-3,
) -> FactorizationCheck:
    """Monte Carlo check of the sup-moment bound for the convolution.

    Passes when the 99% one-sided upper confidence bound of the left side
    does not exceed the right side.
    """
    alpha = default_alpha(p) if alpha is None else float(alpha)
    c_p = bdg_constant(p) if c_p is None else float(c_p)
    a = a_p_mu(p, mu, alpha, c_p)
    run = simulate_convolution(mu, eta, T, dt, n_paths, seed, p=p)
    lhs, se = mean_se(run.sup**p)
    if run.eta_p_integral is None:
        rhs = a * abs(float(eta)) ** p * T
    else:
        rhs = a * mean_se(run.eta_p_integral)[0]
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return FactorizationCheck(
        p=p, mu=mu, alpha=alpha, c_p=c_p, a=a, lhs=lhs, lhs_se=se, rhs=rhs,
        ratio=ratio, passed=bool(lhs + Z99 * se <= rhs),
    )
