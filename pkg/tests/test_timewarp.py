import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from worldtime4d.errors import DimensionError, DomainError, InfeasibleError
from worldtime4d.timewarp import (
    DEFAULT_SLOPE_BOUNDS, KINDS, WarpSpec, WorldTimeSequence, eval_smoothstep, generate_warp,
    pool_to_latent, sample_warp_spec, validate_monotone,
)


def test_sequence_validation():
    with pytest.raises(DimensionError):
        WorldTimeSequence([], 8.0)
    with pytest.raises(DomainError):
        WorldTimeSequence([0.0, -0.1], 8.0)
    with pytest.raises(DomainError):
        WorldTimeSequence([0.0, np.inf], 8.0)
    with pytest.raises(DomainError):
        WorldTimeSequence([0.0], 0.0)
    seq = WorldTimeSequence([0.0, 0.5, 0.25], 4.0)
    np.testing.assert_allclose(seq.speeds(), [2.0, -1.0])
    assert seq.reversed().tau == (0.25, 0.5, 0.0)
    assert WorldTimeSequence([1 / 3], 3.0).to_json() == [0.333333333]


def test_linear_example():
    tau = generate_warp(WarpSpec("linear"), 5, 1.0, 4.0)
    np.testing.assert_allclose(tau.array(), [0, 0.25, 0.5, 0.75, 1.0], atol=1e-15)
    with pytest.raises(InfeasibleError):
        generate_warp(WarpSpec("linear"), 5, 0.5, 4.0)


def test_pausing_holds_frames():
    tau = generate_warp(WarpSpec("pausing", {"start": 1, "end": 3}), 6, 2.0, 4.0).array()
    inc = np.diff(tau)
    np.testing.assert_array_equal(inc[1:3], [0.0, 0.0])
    assert (inc[[0, 3, 4]] > 0).all()
    assert validate_monotone(WorldTimeSequence(tau, 4.0))


def test_slow_motion_window():
    tau = generate_warp(WarpSpec("slow_motion", {"factor": 0.5, "start": 0.0, "end": 0.5}), 9, 2.0, 4.0)
    s = tau.speeds()
    np.testing.assert_allclose(s[:4], 0.5)
    np.testing.assert_allclose(s[4:], 1.0)


def test_generate_preconditions():
    with pytest.raises(DimensionError):
        generate_warp(WarpSpec("linear"), 1, 1.0, 4.0)
    with pytest.raises(DomainError):
        generate_warp(WarpSpec("linear"), 3, 0.0, 4.0)
    # s_min (F-1)/fps > duration
    spec = WarpSpec("random_speed", {"s_min": 2.0, "s_max": 3.0})
    with pytest.raises(InfeasibleError):
        generate_warp(spec, 9, 1.0, 4.0)


def test_warpspec_validation_and_json():
    with pytest.raises(DomainError):
        WarpSpec("reverse")
    with pytest.raises(DomainError):
        WarpSpec("spline", {"s_min": 2.0, "s_max": 1.0})
    with pytest.raises(DomainError):
        WarpSpec("pausing", {"start": 3, "end": 1})
    spec = sample_warp_spec("spline", np.random.default_rng(0), 17)
    assert WarpSpec.from_json(spec.to_json()) == spec
    assert set(json.loads(spec.to_json())) == {"kind", "params", "seed"}


@pytest.mark.parametrize("kind", ["spline", "random_speed"])
def test_bounded_kinds_over_many_seeds(kind):
    rng = np.random.default_rng(11)
    lo, hi = DEFAULT_SLOPE_BOUNDS
    for _ in range(1000):
        spec = sample_warp_spec(kind, rng, 17)
        tau = generate_warp(spec, 17, 2.0, 8.0)
        s = tau.speeds()
        assert tau.tau[0] == 0.0 and tau.tau[-1] <= 2.0
        assert validate_monotone(tau)
        assert s.min() >= lo - 1e-9 and s.max() <= hi + 1e-9


@pytest.mark.parametrize("kind", KINDS)
def test_deterministic_given_seed(kind):
    spec = sample_warp_spec(kind, np.random.default_rng(5), 33)
    a = generate_warp(spec, 33, 3.0, 16.0)
    b = generate_warp(WarpSpec.from_json(spec.to_json()), 33, 3.0, 16.0)
    assert a.array().tobytes() == b.array().tobytes()


def test_smoothstep_examples():
    assert eval_smoothstep(0.5) == 0.5
    assert eval_smoothstep(0.25) == 0.15625
    assert eval_smoothstep(0.0) == 0.0 and eval_smoothstep(1.0) == 1.0
    for t in (-0.01, 1.01):
        with pytest.raises(DomainError):
            eval_smoothstep(t)


@given(st.floats(0.0, 1.0))
def test_smoothstep_point_symmetry(t):
    assert abs(eval_smoothstep(t) + eval_smoothstep(1.0 - t) - 1.0) < 1e-12


def test_validate_monotone_examples():
    assert validate_monotone(WorldTimeSequence([0, 1, 2], 1.0))
    assert not validate_monotone(WorldTimeSequence([0, 2, 1], 1.0))


def test_pool_examples():
    out = pool_to_latent(WorldTimeSequence([0, 1, 2, 3], 4.0), 4)
    assert out.tau == (1.5,) and out.fps == 4.0
    seq = WorldTimeSequence.uniform(8, 4.0)
    assert pool_to_latent(seq, 1) == seq
    np.testing.assert_allclose(np.diff(pool_to_latent(seq, 2).array()), 0.5)
    with pytest.raises(DomainError):
        pool_to_latent(seq, 0)


def test_pool_ragged_tail_and_offset():
    out = pool_to_latent(WorldTimeSequence([0, 1, 2, 3, 4], 1.0), 2)
    assert out.tau == (0.5, 2.5, 4.0)
    seq = WorldTimeSequence(np.random.default_rng(2).uniform(0, 3, 12), 8.0)
    shifted = WorldTimeSequence(seq.array() + 1.25, 8.0)
    np.testing.assert_allclose(pool_to_latent(shifted, 3).array(), pool_to_latent(seq, 3).array() + 1.25)
