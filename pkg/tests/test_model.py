import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdelab.model import (
    PRESETS,
    AffineDiffusion,
    ConfigError,
    DelayModel,
    DistributedDelay,
    H0Failure,
    LinearDrift,
    ModelError,
    PointDelay,
    PolyDissipativeDrift,
    Segment,
    SegmentGrid,
    ZeroFunctional,
    check_h2,
    evaluate_coefficients,
    model_from_config,
    preset,
    sup_norm,
    trace_norm,
    verify_h0,
)


def test_grid_nodes_are_exact_at_ends():
    g = SegmentGrid(1.0, 0.01)
    assert g.n == 100
    assert g.nodes[0] == -1.0 and g.nodes[-1] == 0.0
    assert g.index_of(-0.5) == 50


def test_grid_rejects_non_dividing_step():
    with pytest.raises(ConfigError) as e:
        SegmentGrid(1.0, 0.3)
    assert e.value.key_path == "grid.dt"


def test_grid_rejects_off_grid_offset():
    with pytest.raises(ConfigError):
        SegmentGrid(1.0, 0.1).index_of(-0.55)
    with pytest.raises(ConfigError):
        SegmentGrid(1.0, 0.1).index_of(0.5)


# sup norm and trace norm


def test_sup_norm_zero():
    assert sup_norm(Segment.constant(SegmentGrid(1.0, 0.25), [0.0, 0.0])) == 0.0


def test_sup_norm_scalar():
    seg = Segment(SegmentGrid(1.0, 0.5), np.array([[-1.0], [0.25], [0.5]]))
    assert sup_norm(seg) == 1.0


def test_sup_norm_vector():
    seg = Segment(SegmentGrid(1.0, 1.0), np.array([[3.0, 4.0], [0.0, 1.0]]))
    assert sup_norm(seg) == 5.0


def test_trace_norm_examples():
    assert trace_norm(np.zeros((2, 3))) == 0.0
    assert trace_norm(np.eye(2)) == pytest.approx(math.sqrt(2), rel=1e-15)
    assert trace_norm([[1.0, 2.0], [2.0, 0.0]]) == 3.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6), st.floats(1e-6, 10), st.booleans())
def test_sup_norm_homogeneous(vals, c, neg):
    c = -c if neg else c
    seg = Segment(SegmentGrid(1.0, 0.5), np.array(vals).reshape(3, 2))
    scaled = Segment(seg.grid, c * seg.values)
    assert sup_norm(scaled) == pytest.approx(abs(c) * sup_norm(seg), rel=1e-12, abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=12, max_size=12))
def test_sup_norm_triangle(vals):
    grid = SegmentGrid(1.0, 0.5)
    a = Segment(grid, np.array(vals[:6]).reshape(3, 2))
    b = Segment(grid, np.array(vals[6:]).reshape(3, 2))
    s = Segment(grid, a.values + b.values)
    assert sup_norm(s) <= sup_norm(a) + sup_norm(b) + 1e-9


def test_segment_is_read_only():
    seg = Segment.constant(SegmentGrid(1.0, 0.5), [1.0])
    with pytest.raises(ValueError):
        seg.values[0, 0] = 2.0


# coefficient evaluation


def test_benchmark_at_zero_segment():
    grid = SegmentGrid(1.0, 0.1)
    model = DelayModel(1, 1, 1.0, PolyDissipativeDrift(2.0), ZeroFunctional(1), AffineDiffusion())
    drift, diff = evaluate_coefficients(model, Segment.constant(grid, [0.0]))
    assert np.all(drift == 0) and np.all(diff == 0)


def test_cubic_drift_with_delay_feedback():
    grid = SegmentGrid(1.0, 0.1)
    model = DelayModel(1, 1, 1.0, PolyDissipativeDrift(2.0), PointDelay([[0.5]], theta=-1.0), AffineDiffusion())
    drift, _ = evaluate_coefficients(model, Segment.constant(grid, [2.0]))
    assert drift[0] == -7.0


def test_affine_diffusion_hand_value():
    grid = SegmentGrid(1.0, 0.1)
    h = AffineDiffusion(H0=[[1.0]], H1=[[[0.5]]], H2=[[[0.0]]])
    model = DelayModel(1, 1, 1.0, LinearDrift([[0.0]]), ZeroFunctional(1), h)
    _, diff = evaluate_coefficients(model, Segment.constant(grid, [2.0]))
    assert diff[0, 0] == 2.0


def test_non_finite_output_names_node():
    grid = SegmentGrid(1.0, 0.5)

    class Bad:
        def __call__(self, x):
            return np.full_like(x, np.nan)

    model = DelayModel(1, 1, 1.0, Bad(), ZeroFunctional(1), AffineDiffusion(), L=1.0)
    with pytest.raises(ModelError) as e:
        evaluate_coefficients(model, Segment.constant(grid, [1.0]))
    assert e.value.node == grid.n


def test_distributed_delay_of_constant():
    grid = SegmentGrid(2.0, 0.01)
    g = DistributedDelay([[1.5]], r=2.0)
    out = g(Segment.constant(grid, [1.0]).batch())
    assert out[0, 0] == pytest.approx(3.0, rel=1e-12)


def test_user_maps_require_L():
    with pytest.raises(ConfigError) as e:
        DelayModel(1, 1, 1.0, lambda x: -x, ZeroFunctional(1), AffineDiffusion())
    assert e.value.key_path == "model.L"


# hypotheses


def test_h0_cubic():
    assert verify_h0(PolyDissipativeDrift(2.0), 4.0) == 2.0


def test_h0_linear_fails():
    with pytest.raises(H0Failure):
        verify_h0(LinearDrift([[-1.0]]), 4.0)


def test_h0_quadratic():
    assert verify_h0(PolyDissipativeDrift(1.0), 1.0) == 1.0


def test_h0_multidimensional():
    assert verify_h0(PolyDissipativeDrift(2.0, d=3), 4.0, d=3) == 2.0


@pytest.mark.parametrize("cfg", [
    PRESETS["paper-eq11"],
    {"d": 2, "m": 2, "r": 0.5, "drift": {"kind": "poly", "s": 2, "a": [[1, 0.5], [0, -1]]},
     "g": {"kind": "distributed_delay", "K": [[0.2, 0.1], [0, 0.3]]},
     "h": {"kind": "affine", "H0": [[1, 0], [0, 1]], "H1": [[[0.3, 0], [0, 0.1]], [[0, 0], [0.2, 0]]]}},
    {"d": 1, "r": 1, "drift": {"kind": "linear", "A": [[0.7]]}, "g": {"kind": "point_delay", "G": [[-1]], "theta": -0.5}},
])
def test_computed_L_satisfies_h2(cfg):
    model = model_from_config(cfg)
    assert check_h2(model, SegmentGrid(model.r, model.r / 10), n_pairs=1000) <= 1.0 + 1e-12


def test_preset_constants():
    model = preset("paper-eq11")
    assert model.L == 1.25
    assert model.D(SegmentGrid(1.0, 0.01)) == pytest.approx(0.5, rel=1e-15)
    assert model.dissipative


# configuration


@pytest.mark.parametrize("cfg, path", [
    ({"d": 1, "r": 1, "drift": {"kind": "cubic"}}, "model.drift.kind"),
    ({"d": 1, "r": 1, "drift": {"kind": "poly"}}, "model.drift.s"),
    ({"d": 1, "r": 1, "g": {"kind": "point_delay", "G": [[1]], "lag": 1}}, "model.g.lag"),
    ({"d": 1, "r": 1, "h": {"kind": "affine", "H0": [[1, 2]]}}, "model.h.H0"),
    ({"d": 1}, "model.r"),
    ({"d": 1, "r": 1, "colour": "red"}, "model.colour"),
    ({"d": 1, "r": -1}, "model.r"),
])
def test_config_errors_carry_key_path(cfg, path):
    with pytest.raises(ConfigError) as e:
        model_from_config(cfg)
    assert e.value.key_path == path
    assert str(e.value).startswith(path)


def test_config_round_trip():
    model = preset("paper-eq11")
    again = model_from_config(model.to_config())
    assert again.L == model.L
    seg = Segment.from_function(SegmentGrid(1.0, 0.1), lambda t: [math.sin(3 * t)])
    a = evaluate_coefficients(model, seg)
    b = evaluate_coefficients(again, seg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_unknown_preset():
    with pytest.raises(ConfigError) as e:
        preset("nope")
    assert e.value.key_path == "preset"
