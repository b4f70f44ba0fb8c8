import numpy as np
import pytest

from decm.datasets import (
    ArrayDataset,
    Checkerboard,
    GaussianMixture,
    TwoMoons,
    make_dataset,
    mc_oracle_velocity,
    oracle_velocity,
    reference_flow,
    sample_data,
)


def two_gaussian():
    return make_dataset("two-gaussian")


def test_zero_draws_are_empty():
    ds = two_gaussian()
    x, y = sample_data(ds, 0, np.random.default_rng(0))
    assert x.shape == (0, 2) and y.shape == (0,)


def test_single_gaussian_clt_mean_bound():
    ds = GaussianMixture(means=[[1.0, -2.0]], scales=[0.7], weights=[1.0])
    n = 40_000
    x, _ = sample_data(ds, n, np.random.default_rng(1))
    # per-coordinate total std is 0.7; allow 4 sigma of the mean estimator
    assert np.all(np.abs(x.mean(axis=0) - [1.0, -2.0]) < 4 * 0.7 / np.sqrt(n))


def test_checkerboard_points_inside_extent():
    ds = Checkerboard(extent=4.0, cells=4)
    x, y = sample_data(ds, 50_000, np.random.default_rng(2))
    assert np.all(np.abs(x) <= 4.0)
    assert ds.n_classes == 8
    assert set(np.unique(y)) == set(range(8))


def test_checkerboard_cells_have_correct_parity():
    ds = Checkerboard(extent=4.0, cells=4)
    x, _ = sample_data(ds, 20_000, np.random.default_rng(3))
    size = 2.0
    i = np.floor((x[:, 0] + 4.0) / size).astype(int)
    j = np.floor((x[:, 1] + 4.0) / size).astype(int)
    assert np.all((i + j) % 2 == 0)


def test_two_moons_labels():
    ds = TwoMoons()
    x, y = sample_data(ds, 5000, np.random.default_rng(4))
    assert set(np.unique(y)) == {0, 1}
    assert x.shape == (5000, 2)


def test_mixture_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        GaussianMixture(means=[[0, 0], [1, 1]], scales=[1, 1], weights=[0.5, 0.3])


def test_array_dataset_resamples_rows():
    X = np.arange(10, dtype=float).reshape(5, 2)
    y = np.array([0, 1, 0, 1, 1])
    ds = ArrayDataset(X, y)
    assert ds.n_classes == 2 and ds.dim == 2
    pts, labels = ds.sample(100, np.random.default_rng(5))
    for p in pts:
        assert any(np.array_equal(p, row) for row in X)
    assert len(labels) == 100


def test_oracle_velocity_at_zero_is_mean_minus_x():
    ds = two_gaussian()
    rng = np.random.default_rng(6)
    x = rng.normal(size=(20, 2))
    v = oracle_velocity(ds, x, 0.0)
    mean = np.sum(ds.weights[:, None] * ds.means, axis=0)
    assert np.allclose(v, mean[None, :] - x)


def test_oracle_velocity_at_one_is_x():
    ds = two_gaussian()
    rng = np.random.default_rng(7)
    x = rng.normal(size=(20, 2))
    assert np.allclose(oracle_velocity(ds, x, 1.0), x)


def test_oracle_velocity_batched_times():
    ds = two_gaussian()
    rng = np.random.default_rng(8)
    x = rng.normal(size=(30, 2))
    t = rng.random(30)
    t[:3] = 1.0
    v = oracle_velocity(ds, x, t)
    for i in range(30):
        vi = oracle_velocity(ds, x[i : i + 1], float(t[i]))
        assert np.allclose(v[i], vi[0], atol=1e-12)


def test_oracle_rejects_bad_time():
    ds = two_gaussian()
    with pytest.raises(ValueError):
        oracle_velocity(ds, np.zeros((1, 2)), 1.5)


def test_closed_form_matches_monte_carlo_within_3_se():
    ds = two_gaussian()
    rng = np.random.default_rng(9)
    x = rng.normal(size=(6, 2)) * 1.5
    t = 0.5
    exact = oracle_velocity(ds, x, t)
    reps = [
        mc_oracle_velocity(ds, x, t, n_mc=100_000, rng=np.random.default_rng(100 + r))
        for r in range(6)
    ]
    reps = np.stack(reps)
    mc_mean = reps.mean(axis=0)
    mc_se = reps.std(axis=0, ddof=1) / np.sqrt(len(reps))
    assert np.all(np.abs(exact - mc_mean) <= 3 * mc_se + 1e-9)


def test_conditional_oracle_uses_single_component():
    ds = two_gaussian()
    x = np.array([[0.0, 0.0]])
    v0 = oracle_velocity(ds, x, 0.0, label=0)
    v1 = oracle_velocity(ds, x, 0.0, label=1)
    assert np.allclose(v0, ds.means[0] - x)
    assert np.allclose(v1, ds.means[1] - x)


def test_reference_flow_identity_at_equal_times():
    ds = two_gaussian()
    x = np.random.default_rng(10).normal(size=(5, 2))
    out, err = reference_flow(ds, x, 0.4, 0.4)
    assert np.array_equal(out, x)
    assert err == 0.0


def test_reference_flow_constant_field_exact():
    c = np.array([1.0, -2.0])
    out, err = reference_flow(lambda x, t: np.broadcast_to(c, x.shape), np.zeros((3, 2)), 0.0, 1.0, steps=4)
    assert np.allclose(out, c[None, :])
    assert err < 1e-14


def test_reference_flow_richardson_self_check_oracle_field():
    # the analytic mixture field is stiff near the component boundary, so the
    # halving gap is larger than for a smooth trained field
    ds = two_gaussian()
    x = np.random.default_rng(11).standard_normal((64, 2))
    hi, err_hi = reference_flow(ds, x, 0.0, 1.0, steps=1024)
    lo, _ = reference_flow(ds, x, 0.0, 1.0, steps=512)
    assert err_hi < 5e-3
    assert np.mean(np.linalg.norm(hi - lo, axis=1)) < 5e-4


def test_reference_flow_richardson_self_check_smooth_field():
    from decm.network import VelocityNet

    net = VelocityNet(hidden_dim=32, n_hidden=2, with_s=False, seed=3)
    rng = np.random.default_rng(12)
    net.params = [rng.normal(0.0, 0.1, p.shape) for p in net.params]
    field = lambda x, t: net(x, np.full(len(x), t), np.full(len(x), t))
    x = rng.standard_normal((64, 2))
    hi, err_hi = reference_flow(field, x, 0.0, 1.0, steps=1024)
    lo, _ = reference_flow(field, x, 0.0, 1.0, steps=512)
    assert err_hi < 1e-4
    assert np.mean(np.linalg.norm(hi - lo, axis=1)) < 1e-4


def test_reference_flow_rejects_backward():
    ds = two_gaussian()
    with pytest.raises(ValueError):
        reference_flow(ds, np.zeros((1, 2)), 0.6, 0.5)


def test_oracle_transport_reaches_data_distribution():
    # plugging the oracle velocity into the reference integrator must carry
    # standard normal noise onto the data distribution
    from decm.metrics import frechet_gaussian

    ds = two_gaussian()
    rng = np.random.default_rng(12)
    noise = rng.standard_normal((10_000, 2))
    pushed, err = reference_flow(ds, noise, 0.0, 1.0, steps=1024)
    assert err < 5e-3
    data, _ = sample_data(ds, 10_000, np.random.default_rng(13))
    assert frechet_gaussian(pushed, data) < 0.05


def test_conditional_transport_reaches_component():
    ds = two_gaussian()
    rng = np.random.default_rng(14)
    noise = rng.standard_normal((2000, 2))
    for k in range(2):
        pushed, _ = reference_flow(
            lambda x, t, k=k: oracle_velocity(ds, x, t, label=k), noise, 0.0, 1.0, steps=512
        )
        assert np.linalg.norm(pushed.mean(axis=0) - ds.means[k]) < 0.05
        assert abs(pushed.std(axis=0).mean() - ds.scales[k]) < 0.05
