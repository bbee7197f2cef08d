import math

import numpy as np
import pytest

from sfdelab.diagnostics import (
    FellerExperiment,
    feller_gap,
    gronwall_bound,
    kolmogorov_ratio,
    kolmogorov_table,
    modulus_exceedance,
    modulus_table,
    tightness_pass,
    window_modulus,
)
from sfdelab.integrators import simulate_ensemble
from sfdelab.model import (
    AffineDiffusion,
    ConfigError,
    DelayModel,
    LinearDrift,
    PointDelay,
    Segment,
    SegmentGrid,
    ZeroFunctional,
    preset,
)


def _brownian(n_paths=2000, T=2.0, dt=0.01, seed=1):
    model = DelayModel(1, 1, 1.0, LinearDrift([[0.0]]), ZeroFunctional(1), AffineDiffusion(H0=[[1.0]]))
    phi = Segment.constant(SegmentGrid(1.0, dt), [0.0])
    return simulate_ensemble(model, "explicit_em", phi, n_paths, T, seed, record_martingale=True)


def test_constant_paths_have_zero_exceedance():
    model = DelayModel(1, 1, 1.0, LinearDrift([[0.0]]), ZeroFunctional(1), AffineDiffusion())
    ens = simulate_ensemble(model, "tamed_em", Segment.constant(SegmentGrid(1.0, 0.01), [3.0]), 5, 2.0, 0)
    assert modulus_exceedance(ens, 0.5, 0.1, 1e-9) == 0.0
    assert modulus_exceedance(ens, 0.5, 0.1, 0.0) == 1.0


def test_window_modulus_brute_force():
    ens = _brownian(n_paths=5, T=1.5, dt=0.05)
    M = window_modulus(ens, 0.25, 0.3)
    k0 = ens.step_index(0.25)
    for i in range(5):
        w = ens.paths[i, ens.grid.n + k0 : 2 * ens.grid.n + k0 + 1, 0]
        for lag in range(M.shape[1]):
            brute = max((abs(w[v] - w[u]) for u in range(w.size) for v in range(u, min(u + lag, w.size - 1) + 1)),
                        default=0.0)
            assert M[i, lag] == pytest.approx(brute, abs=1e-15)


def test_brownian_exceedance_decreases_with_gap():
    ens = _brownian()
    rows = modulus_table(ens, [0.5], [0.2, 0.1, 0.05], [0.5])
    ex = {r["delta_w"]: r["exceedance"] for r in rows}
    assert ex[0.2] > ex[0.1] > ex[0.05]
    assert all(r["dt"] == 0.01 for r in rows)


def test_tightness_pass_uses_smallest_gap():
    rows = [{"delta_w": 0.1, "gamma_m": 1.0, "exceedance": 0.5}, {"delta_w": 0.05, "gamma_m": 1.0, "exceedance": 0.001}]
    assert tightness_pass(rows)[1.0]["passed"]


def test_window_beyond_horizon():
    with pytest.raises(ConfigError):
        modulus_exceedance(_brownian(n_paths=2, T=1.0), 0.5, 0.1, 1.0)


def test_kolmogorov_zero_diffusion():
    model = DelayModel(1, 1, 1.0, LinearDrift([[-1.0]]), ZeroFunctional(1), AffineDiffusion())
    ens = simulate_ensemble(model, "tamed_em", Segment.constant(SegmentGrid(1.0, 0.01), [1.0]), 10, 2.0, 0,
                            record_martingale=True)
    tab = kolmogorov_table(ens)
    assert all(r["ratio"] == 0 for r in tab["rows"])


def test_kolmogorov_gaussian_sixth_moment():
    ens = _brownian(n_paths=4000, T=3.0, dt=1 / 64)
    tab = kolmogorov_table(ens)
    for row in tab["rows"]:
        assert abs(row["ratio"] - 15.0) < 3.5 * row["se"]
    assert kolmogorov_ratio(ens, [(0.0, 1.0)]) == pytest.approx(tab["rows"][0]["ratio"], rel=0.3)


def test_kolmogorov_requires_martingale():
    model = preset("paper-eq11")
    ens = simulate_ensemble(model, "tamed_em", Segment.constant(SegmentGrid(1.0, 0.1), [1.0]), 2, 1.0, 0)
    with pytest.raises(ConfigError):
        kolmogorov_table(ens)


def test_gronwall_formula():
    assert gronwall_bound(0.1, 1.0, 1.0) == pytest.approx(3e-4 * math.exp(15.0))
    assert gronwall_bound(0.0, 2.0, 3.0) == 0.0


def _linear():
    return DelayModel(1, 1, 1.0, LinearDrift([[-1.0]]), PointDelay([[0.5]], theta=-1.0), AffineDiffusion(H0=[[1.0]]))


def test_feller_identical_start_gives_zero():
    exp = FellerExperiment(Segment.constant(SegmentGrid(1.0, 0.02), [1.0]), [0.0], 1.0)
    rep = feller_gap(_linear(), "tamed_em", exp, 50, 3)
    assert rep.rows[0]["estimate"] == 0.0 and rep.rows[0]["passed"]


def test_feller_linear_model():
    model = _linear()
    assert model.L == 1.0
    exp = FellerExperiment(Segment.constant(SegmentGrid(1.0, 0.01), [1.0]), [0.1, 0.05, 0.025, 0.0125], 1.0)
    rep = feller_gap(model, "tamed_em", exp, 500, 11)
    assert rep.all_passed and rep.monotone
    assert 3.6 <= rep.slope <= 4.4


def test_feller_benchmark_monotone():
    exp = FellerExperiment(Segment.constant(SegmentGrid(1.0, 0.01), [1.0]), [0.1, 0.05, 0.025], 1.0)
    rep = feller_gap(preset("paper-eq11"), "split_step_implicit", exp, 300, 4)
    assert rep.monotone and rep.all_passed and rep.invalid_pairs == 0
