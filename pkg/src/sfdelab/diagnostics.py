"""Tightness and Feller diagnostics computed from simulated ensembles.

* ``modulus_exceedance``: fraction of paths whose discrete modulus of
  continuity over a window ``[t, t+r]`` at gap ``δ_w`` reaches ``γ_m``.
* ``kolmogorov_table``: ``Ê|J(t)-J(s)|⁶ / |t-s|³`` over dyadic gaps, where
  ``J`` is the running stochastic integral of the diffusion.
* ``feller_gap``: coupled solutions from nearby initial segments, compared
  against the Gronwall bound ``3‖φ_m-φ‖⁴·exp(12Lt + 3L²t²)``.

All statistics are over grid nodes only and carry the grid step ``dt``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .integrators import PathEnsemble, simulate_ensemble
from .model import ConfigError, DelayModel, Segment, sup_norm
from .stats import Z99, mean_se, upper_bound

__all__ = [
    "FellerExperiment",
    "FellerReport",
    "feller_gap",
    "gronwall_bound",
    "kolmogorov_ratio",
    "kolmogorov_table",
    "modulus_exceedance",
    "modulus_table",
    "tightness_pass",
    "window_modulus",
]


def _gap_steps(delta_w: float, dt: float) -> int:
    return int(math.floor(delta_w / dt + 1e-9))


def window_modulus(ens: PathEnsemble, t: float, max_gap: float) -> np.ndarray:
    """Per-path running modulus over ``[t, t+r]``.

    Entry ``[i, l]`` is ``max |x_i(v) - x_i(u)|`` over grid pairs in the
    window with ``0 <= v-u <= l·dt``; column 0 is identically zero.
    """
    n = ens.grid.n
    k0 = ens.step_index(t)
    if k0 + n > ens.steps:
        raise ConfigError(f"window [{t}, {t} + r] exceeds the horizon {ens.T}", "t")
    w = min(_gap_steps(max_gap, ens.dt), n)
    X = ens.paths[ens.alive, n + k0 : 2 * n + k0 + 1]
    out = np.zeros((X.shape[0], w + 1))
    for lag in range(1, w + 1):
        diff = X[:, lag:] - X[:, :-lag]
        out[:, lag] = np.sqrt(np.max(np.sum(diff * diff, axis=-1), axis=1))
    return np.maximum.accumulate(out, axis=1)


def modulus_exceedance(ens: PathEnsemble, t: float, delta_w: float, gamma_m: float) -> float:
    if delta_w > ens.grid.r * (1 + 1e-12):
        raise ConfigError("gap must not exceed r", "delta_w")
    M = window_modulus(ens, t, delta_w)
    return float(np.mean(M[:, -1] >= gamma_m))


def modulus_table(ens: PathEnsemble, starts, gaps, gammas) -> list[dict]:
    """Rows ``{t, delta_w, gamma_m, exceedance, dt}`` for every combination."""
    rows = []
    gaps = sorted(float(g) for g in gaps)
    for t in starts:
        M = window_modulus(ens, t, max(gaps))
        for g in gaps:
            col = M[:, min(_gap_steps(g, ens.dt), M.shape[1] - 1)]
            for gm in gammas:
                rows.append(
                    {"t": float(t), "delta_w": g, "gamma_m": float(gm),
                     "exceedance": float(np.mean(col >= gm)), "dt": ens.dt}
                )
    return rows


def tightness_pass(rows: list[dict], threshold: float = 0.01) -> dict:
    """Per ``γ_m``: exceedance at the smallest gap below ``threshold`` at every start time."""
    out = {}
    smallest = min(r["delta_w"] for r in rows)
    for gm in sorted({r["gamma_m"] for r in rows}):
        sel = [r["exceedance"] for r in rows if r["gamma_m"] == gm and r["delta_w"] == smallest]
        out[gm] = {"max_exceedance": max(sel), "passed": max(sel) < threshold}
    return out


def _require_J(ens: PathEnsemble) -> np.ndarray:
    if ens.J is None:
        raise ConfigError("ensemble was simulated without record_martingale=True", "J")
    return ens.J[ens.alive]


def kolmogorov_ratio(ens: PathEnsemble, pairs) -> float:
    """``max`` over ``(s, t)`` pairs of ``Ê|J(t)-J(s)|⁶ / |t-s|³``."""
    J = _require_J(ens)
    best = 0.0
    for s, t in pairs:
        ks, kt = ens.step_index(s), ens.step_index(t)
        if ks == kt:
            raise ConfigError("pair with zero gap", "pairs")
        inc = J[:, kt] - J[:, ks]
        m6 = mean_se(np.sum(inc * inc, axis=-1) ** 3)[0]
        best = max(best, m6 / abs(t - s) ** 3)
    return best


def kolmogorov_table(ens: PathEnsemble, gaps=None, t_start: float = 0.0) -> dict:
    """Per-gap ratio table over non-overlapping windows from ``t_start`` to ``T``.

    Default gaps are ``r/2^k`` for ``k = 0..5``, each rounded to the grid;
    the grid-rounded gap is the one reported and used.
    """
    J = _require_J(ens)
    r, dt = ens.grid.r, ens.dt
    if gaps is None:
        gaps = [r / 2**k for k in range(6)]
    k0 = ens.step_index(t_start)
    rows = []
    for g in gaps:
        q = max(1, int(round(g / dt)))
        nw = (ens.steps - k0) // q
        if nw < 1:
            raise ConfigError(f"gap {g} does not fit between t_start and T", "gaps")
        idx = k0 + q * np.arange(nw + 1)
        inc = np.diff(J[:, idx], axis=1)
        sixth = (np.sum(inc * inc, axis=-1) ** 3).ravel()
        m, se = mean_se(sixth)
        gap = q * dt
        rows.append({"gap": gap, "ratio": m / gap**3, "se": se / gap**3, "samples": sixth.size})
    ratios = np.array([row["ratio"] for row in rows])
    gaps_used = np.array([row["gap"] for row in rows])
    if np.all(ratios > 0) and len(rows) > 1:
        slope = float(np.polyfit(np.log(gaps_used), np.log(ratios), 1)[0])
    else:
        slope = 0.0
    return {"rows": rows, "max_ratio": float(ratios.max()), "slope": slope, "dt": dt}


def gronwall_bound(perturbation: float, L: float, t: float) -> float:
    return 3.0 * perturbation**4 * math.exp(12.0 * L * t + 3.0 * L * L * t * t)


@dataclass
class FellerExperiment:
    """Base segment, perturbation sizes and horizon for a coupled-noise run."""

    phi: Segment
    perturbations: list[float]
    t: float
    direction: np.ndarray | None = None

    def perturbed(self, eps: float) -> Segment:
        u = np.zeros(self.phi.d) if self.direction is None else np.asarray(self.direction, float)
        if self.direction is None:
            u[0] = 1.0
        u = u / np.linalg.norm(u)
        return self.phi.shifted(eps * u)


@dataclass
class FellerReport:
    rows: list[dict]
    slope: float
    monotone: bool
    all_passed: bool
    t: float
    L: float
    dt: float
    invalid_pairs: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _window_gap4(base: PathEnsemble, other: PathEnsemble, k: int) -> tuple[np.ndarray, int]:
    n = base.grid.n
    ok = base.alive & other.alive
    d = base.paths[ok, k : k + n + 1] - other.paths[ok, k : k + n + 1]
    return np.max(np.sum(d * d, axis=-1), axis=1) ** 2, int((~ok).sum())


def feller_gap(
    model: DelayModel,
    scheme: str,
    experiment: FellerExperiment,
    n_paths: int,
    seed: int,
    *,
    threads: int = 1,
) -> FellerReport:
    """Coupled runs from ``φ`` and each ``φ_m`` sharing bit-identical noise.

    Each row holds ``Ê sup_{t-r<=s<=t}|x^m(s)-x(s)|⁴``, its standard error,
    the 99% upper bound, the Gronwall bound and whether the former is below
    the latter.  ``slope`` is the log–log slope of the estimate against
    ``‖φ_m-φ‖``.
    """
    t = experiment.t
    base = simulate_ensemble(model, scheme, experiment.phi, n_paths, t, seed, threads=threads)
    k = base.step_index(t)
    rows, invalid = [], 0
    for eps in experiment.perturbations:
        phi_m = experiment.perturbed(eps)
        size = sup_norm(Segment(phi_m.grid, phi_m.values - experiment.phi.values))
        other = simulate_ensemble(model, scheme, phi_m, n_paths, t, seed, threads=threads)
        gap4, bad = _window_gap4(base, other, k)
        invalid += bad
        est, se = mean_se(gap4)
        ucb = upper_bound(gap4, Z99)
        bound = gronwall_bound(size, model.L, t)
        rows.append({"perturbation": size, "estimate": est, "se": se, "ucb": ucb,
                     "bound": bound, "passed": bool(ucb <= bound)})
    est = np.array([r["estimate"] for r in rows])
    size = np.array([r["perturbation"] for r in rows])
    if len(rows) > 1 and np.all(est > 0) and np.all(size > 0):
        slope = float(np.polyfit(np.log(size), np.log(est), 1)[0])
    else:
        slope = math.nan
    order = np.argsort(-size)
    monotone = bool(np.all(np.diff(est[order]) < 0)) if len(rows) > 1 else True
    return FellerReport(rows=rows, slope=slope, monotone=monotone,
                        all_passed=all(r["passed"] for r in rows), t=t, L=model.L,
                        dt=base.dt, invalid_pairs=invalid)
