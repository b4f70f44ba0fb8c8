import numpy as np
import pytest

from decm.schedules import Interpolant, TimestepSampler, WeightFn, interpolate, sample_t


def test_interpolant_endpoints():
    path = Interpolant()
    assert path.alpha(0.0) == 0.0 and path.alpha(1.0) == 1.0
    assert path.sigma(0.0) == 1.0 and path.sigma(1.0) == 0.0
    assert path.alpha_dot(0.3) == 1.0 and path.sigma_dot(0.3) == -1.0


def test_interpolate_endpoints_bit_exact():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(10, 2))
    x1 = rng.normal(size=(10, 2))
    assert interpolate(z, x1, 0.0).tobytes() == z.tobytes()
    assert interpolate(z, x1, 1.0).tobytes() == x1.tobytes()


def test_interpolate_midpoint_arithmetic():
    out = interpolate(np.array([[0.0, 0.0]]), np.array([[2.0, 4.0]]), 0.5)
    assert np.array_equal(out, np.array([[1.0, 2.0]]))


def test_interpolate_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        interpolate(np.zeros((2, 2)), np.zeros((3, 2)), 0.5)


def test_single_segment_cm_branch_is_zero():
    sampler = TimestepSampler(n_segments=1)
    rng = np.random.default_rng(1)
    t = sample_t(sampler, rng, "cm", size=1000)
    assert np.all(t == 0.0)


def test_cm_branch_support_is_exact_grid():
    sampler = TimestepSampler(n_segments=4)
    rng = np.random.default_rng(2)
    t = sample_t(sampler, rng, "cm", size=20000)
    assert set(np.unique(t)) == {0.0, 0.25, 0.5, 0.75}


def test_n2n_branch_support_excludes_zero():
    sampler = TimestepSampler(n_segments=4)
    rng = np.random.default_rng(3)
    t = sample_t(sampler, rng, "n2n-right", size=20000)
    assert set(np.unique(t)) == {0.25, 0.5, 0.75, 1.0}


def test_grid_frequencies_are_uniform():
    sampler = TimestepSampler(n_segments=4)
    rng = np.random.default_rng(4)
    t = sample_t(sampler, rng, "cm", size=100_000)
    for v in (0.0, 0.25, 0.5, 0.75):
        assert abs(np.mean(t == v) - 0.25) < 0.01


def test_never_off_grid_over_many_draws():
    sampler = TimestepSampler(n_segments=8)
    rng = np.random.default_rng(5)
    t = sample_t(sampler, rng, "cm", size=1_000_000)
    assert np.all(np.isin(t, np.arange(8) / 8))


def test_fm_branch_is_continuous_uniform():
    sampler = TimestepSampler(n_segments=8)
    rng = np.random.default_rng(6)
    t = sample_t(sampler, rng, "fm", size=50_000)
    assert np.all((t >= 0) & (t < 1))
    assert abs(t.mean() - 0.5) < 0.01
    assert len(np.unique(t)) > 40_000


@pytest.mark.parametrize("kind", ["lognorm", "arctan-norm"])
def test_continuous_kinds_respect_branch_bounds(kind):
    sampler = TimestepSampler(kind=kind, n_segments=8)
    rng = np.random.default_rng(7)
    t_cm = sample_t(sampler, rng, "cm", size=10_000)
    assert np.all(t_cm < 1.0)
    t_right = sample_t(sampler, rng, "n2n-right", size=10_000)
    assert np.all(t_right > 0.0)


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        TimestepSampler(kind="cosine")


def test_weight_defaults_are_one():
    w = WeightFn()
    assert w.w1(0.3) == 1.0
    assert w.w2(0.0, 0.5) == 1.0


def test_weight_kappa_mode():
    w = WeightFn(kind="kappa-one-minus-t", kappa=1.0)
    assert np.isclose(w.w1(0.25), 0.75)
    assert np.all(w.w1(np.linspace(0, 1, 11)) <= 1.0)
    assert np.all(w.w1(np.linspace(0, 1, 11)) > 0.0)
