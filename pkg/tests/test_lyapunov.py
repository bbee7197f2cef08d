import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdelab.integrators import simulate_ensemble
from sfdelab.lyapunov import (
    LyapunovConstants,
    R_lambda,
    default_gamma,
    default_kappa,
    estimate_B,
    eta_projection,
    lambda_sweep,
    lyapunov_V,
    lyapunov_V_values,
    run_lyapunov_experiment,
    squared_radius_segment,
    theoretical_delta_rho,
)
from sfdelab.model import (
    AffineDiffusion,
    ConfigError,
    DelayModel,
    H0Failure,
    LinearDrift,
    PolyDissipativeDrift,
    Segment,
    SegmentGrid,
    ZeroFunctional,
    preset,
    sup_norm,
    trace_norm,
)


GRID = SegmentGrid(1.0, 0.05)


def test_V_of_constant():
    assert lyapunov_V(Segment.constant(GRID, [2.0])) == 8.0


def test_V_exact_cancellation():
    seg = Segment.from_function(GRID, lambda t: [math.exp(-t)])
    assert lyapunov_V(seg) == pytest.approx(1.0, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=21, max_size=21))
def test_V_brute_force_and_weight_bounds(vals):
    seg = Segment(GRID, np.array(vals)[:, None])
    brute = max(math.exp(3 * th) * abs(v) ** 3 for th, v in zip(GRID.nodes, vals))
    V = lyapunov_V(seg)
    assert V == pytest.approx(brute, rel=1e-14, abs=1e-300)
    s3 = sup_norm(seg) ** 3
    assert V <= s3 * (1 + 1e-14)
    assert V >= math.exp(-3 * GRID.r) * s3 * (1 - 1e-14)


def test_squared_radius():
    seg = Segment(SegmentGrid(1.0, 1.0), np.array([[0.0, 0.0], [3.0, 4.0]]))
    z = squared_radius_segment(seg)
    assert z.values[:, 0].tolist() == [0.0, 25.0]
    assert sup_norm(z) == sup_norm(seg) ** 2


def test_R_lambda_examples():
    f = PolyDissipativeDrift(2.0)
    assert R_lambda([0.0], 4.0, f) == 0.0
    x = np.linspace(0, 3, 30001)[:, None]
    vals = R_lambda(x, 4.0, f)
    assert np.allclose(vals, -2 * np.abs(x[:, 0]) ** 4 + 4 * x[:, 0] ** 2)
    i = int(np.argmax(vals))
    assert x[i, 0] == pytest.approx(1.0, abs=1e-4) and vals[i] == pytest.approx(2.0, abs=1e-7)


@pytest.mark.parametrize("s", [1.0, 2.0, 3.0])
def test_B_is_zero_for_benchmark(s):
    # grid-search oracle: max over ρ of λρ² - 2ρ^{s+2} stays below λ·A_λ²
    f = PolyDissipativeDrift(s)
    lams = [1.0, 4.0, 32.0, 1024.0]
    assert estimate_B(f, lams) == 0.0
    rho = np.linspace(0, 50, 200001)
    for lam in lams:
        A = 2.0 ** math.ceil(math.log2(lam) / s)
        assert np.max(-2 * rho ** (s + 2) + lam * rho**2) <= lam * A * A


def test_B_requires_h0():
    with pytest.raises(H0Failure):
        estimate_B(LinearDrift([[-1.0]]), [4.0])
    with pytest.raises(H0Failure):
        estimate_B(LinearDrift([[0.0]]), [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_eta_bound(d, m, seed):
    rng = np.random.default_rng(seed)
    x, H = rng.standard_normal(d), rng.standard_normal((d, m))
    assert eta_projection(x, H) <= np.linalg.norm(x) * trace_norm(H) * (1 + 1e-12)


def test_eta_scalar_and_zero():
    assert eta_projection([0.0, 0.0], np.ones((2, 3))) == 0.0
    assert eta_projection([-2.0], [[1.5]]) == 3.0


def test_gamma_inequality_holds():
    kappa = default_kappa(1.0)
    gamma = default_gamma(kappa)
    q = np.random.default_rng(0).exponential(size=(100_000, 4))
    lhs = q.sum(axis=1) ** 3
    rhs = kappa * q[:, 0] ** 3 + gamma * (q[:, 1:] ** 3).sum(axis=1)
    assert np.all(lhs <= rhs * (1 + 1e-12))


def _constants(**kw):
    base = dict(lam=1e6, A=1.0, B=0.0, D=0.5, L=1.0, r=1.0, kappa=default_kappa(1.0),
                gamma=default_gamma(default_kappa(1.0)), a3=1e-12)
    base.update(kw)
    return LyapunovConstants(**base)


def test_delta_limit():
    c = theoretical_delta_rho(_constants(L=1e-9, a3=1e-30))
    assert c.delta == pytest.approx(default_kappa(1.0) * math.exp(-3.0), rel=1e-9)
    assert c.feasible


def test_infeasible_denominator():
    c = theoretical_delta_rho(_constants(lam=1.0, a3=1.0))
    assert c.denominator <= 0 and not c.feasible and math.isinf(c.delta)


def test_sweep_benchmark_finds_lambda_star():
    model = DelayModel(1, 1, 1.0, PolyDissipativeDrift(2.0), ZeroFunctional(1), AffineDiffusion(H0=[[1.0]]), L=1.0)
    kappa = math.exp(3.0) / 2
    sw = lambda_sweep(model, GRID, kappa=kappa)
    assert sw.lam_star is not None and sw.B == 0.0
    feas = [c for c in sw.constants if c.feasible]
    assert feas[0].lam == sw.lam_star
    # δ decreases in λ once the denominator is positive
    deltas = [c.delta for c in sw.constants if c.denominator > 0]
    assert len(deltas) > 2 and all(b < a for a, b in zip(deltas, deltas[1:]))
    assert feas[-1].delta == pytest.approx(0.5, rel=1e-3)


def test_sweep_preset():
    sw = lambda_sweep(preset("paper-eq11"), GRID)
    assert sw.lam_star == 2.0**56


def test_explicit_scheme_rejected():
    with pytest.raises(ConfigError):
        run_lyapunov_experiment(preset("paper-eq11"), "explicit_em", Segment.constant(GRID, [1.0]), 10, 8, 0)


def test_all_zero_iterates():
    model = DelayModel(1, 1, 1.0, LinearDrift([[0.0]]), ZeroFunctional(1), AffineDiffusion())
    rep = run_lyapunov_experiment(model, "tamed_em", Segment.constant(GRID, [0.0]), 4, 6, 0)
    assert rep.EV == [0.0] * 7 and rep.moment6 == [0.0] * 7 and rep.valid


def test_deterministic_flow_decreases():
    model = DelayModel(1, 1, 1.0, PolyDissipativeDrift(2.0), ZeroFunctional(1), AffineDiffusion())
    rep = run_lyapunov_experiment(model, "split_step_implicit", Segment.constant(GRID, [3.0]), 2, 10, 0)
    assert all(b < a for a, b in zip(rep.EV, rep.EV[1:]))
    assert rep.EV[-1] < 1e-3 * rep.EV[0]


def test_pathwise_bridges():
    model = preset("paper-eq11")
    ens = simulate_ensemble(model, "split_step_implicit", Segment.constant(GRID, [1.5]), 200, 8.0, 3)
    n = GRID.n
    for k in range(8):
        zk = np.sum(ens.segments(k * n).values ** 2, axis=-1)
        zk1 = np.sum(ens.segments((k + 1) * n).values ** 2, axis=-1)
        nk3, nk13 = zk.max(axis=1) ** 3, zk1.max(axis=1) ** 3
        assert np.all(nk3 <= math.exp(3 * GRID.r) * lyapunov_V_values(zk, GRID) * (1 + 1e-12))
        for j in range(n + 1):
            zt = np.sum(ens.segments(k * n + j).values ** 2, axis=-1).max(axis=1) ** 3
            assert np.all(zt <= (nk3 + nk13) * (1 + 1e-12))


@pytest.mark.slow
def test_plateau_half_samples_agree():
    model = DelayModel(1, 1, 1.0, PolyDissipativeDrift(2.0), ZeroFunctional(1),
                       AffineDiffusion(H0=[[1.0]]))
    phi = Segment.constant(SegmentGrid(1.0, 0.02), [0.5])
    K = 30
    ens = simulate_ensemble(model, "split_step_implicit", phi, 4000, float(K), 17)
    rep = run_lyapunov_experiment(model, "split_step_implicit", phi, 4000, K, 17, ensemble=ens)
    assert rep.contraction and rep.moments_bounded and rep.valid
    tail = np.array(rep.EV[10:])
    se = np.array(rep.EV_se[10:])
    assert abs(rep.plateau - tail.mean()) < 3 * se.mean()
    halves = []
    for sl in (slice(0, 2000), slice(2000, 4000)):
        sub = simulate_ensemble(model, "split_step_implicit", phi, 2000, float(K), 17,
                                first_id=sl.start)
        halves.append(run_lyapunov_experiment(model, "split_step_implicit", phi, 2000, K, 17, ensemble=sub))
    a, b = (np.mean(h.EV[10:]) for h in halves)
    sa, sb = (np.mean(h.EV_se[10:]) for h in halves)
    assert abs(a - b) < 3 * math.hypot(sa, sb)
