import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcm.metrics import mode_counts
from tcm.oracle import (Dataset, exact_score, load_dataset, log_density, make_dataset, oracle_denoise,
                        oracle_endpoint, pf_ode_solve, posterior_weights, read_points, save_dataset, time_grid,
                        write_points)
from tcm.oracle_checks import score_fd_error
from tcm.rng import stream

times = st.floats(0.002, 80.0)


@pytest.fixture(scope="module")
def ring():
    return make_dataset("ring8", 2048, seed=7)


def test_normalization_contract(ring):
    np.testing.assert_allclose(ring.points.std(axis=0), 0.5, atol=1e-9)
    np.testing.assert_allclose(ring.points.mean(axis=0), 0.0, atol=1e-12)


def test_dataset_rejects_bad_input():
    with pytest.raises(ValueError):
        make_dataset("spiral", 10)
    with pytest.raises(ValueError):
        Dataset(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        Dataset(np.zeros((4, 9)))


def test_points_are_read_only(ring):
    with pytest.raises(ValueError):
        ring.points[0, 0] = 1.0


def two_point_score(x, t, a):
    """Closed form for the 1-d mixture of N(-a, t^2) and N(a, t^2)."""
    return (-x + a * np.tanh(a * x / t ** 2)) / t ** 2


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 80.0))
def test_score_matches_two_point_closed_form(x, t):
    a = 0.5
    data = Dataset(np.array([[-a], [a]]))
    got = exact_score(np.array([[x]]), np.array([t]), data)[0, 0]
    want = two_point_score(x, t, a)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-9 / t ** 2)


def test_score_at_tiny_time_is_stable():
    data = Dataset(np.array([[-0.5], [0.5]]))
    s = exact_score(np.array([[3.0]]), np.array([0.002]), data)
    assert np.isfinite(s).all()
    assert s[0, 0] == pytest.approx((0.5 - 3.0) / 0.002 ** 2, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(times, st.integers(0, 1000))
def test_posterior_weights_sum_to_one(t, seed):
    data = make_dataset("grid25", 128, seed=3)
    x = stream(seed, "pw").standard_normal((5, 2))
    w = posterior_weights(x, t, data)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert (w >= 0).all()


def test_denoiser_limits(ring):
    x = stream(0, "dl").standard_normal((16, 2))
    # very large t: posterior is uniform, denoiser returns the data mean (zero)
    np.testing.assert_allclose(oracle_denoise(x, 1e4, ring), 0.0, atol=1e-6)
    # tiny t at a data point: returns that point
    np.testing.assert_allclose(oracle_denoise(ring.points[:4], 1e-4, ring), ring.points[:4], atol=1e-12)


def test_log_density_normalizes():
    data = make_dataset("ring8", 64, seed=1)
    g = np.linspace(-4, 4, 401)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    mass = np.exp(log_density(pts, 0.6, data)).sum() * (g[1] - g[0]) ** 2
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_score_vs_finite_differences(ring):
    assert score_fd_error(ring, seed=1, n=200) < 1e-6


def test_single_point_endpoint_is_linear():
    # p_t is N(x0, t^2 I); the PF ODE keeps (x - x0) / t constant
    x0 = np.array([[0.3, -0.2]])
    data = Dataset(np.vstack([x0, x0]))
    x_t = np.array([[5.0, 1.0], [-2.0, 0.5]])
    got = oracle_endpoint(x_t, 10.0, data)
    want = x0 + (0.002 / 10.0) * (x_t - x0)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_ode_identity_and_errors(ring):
    x = stream(0, "ode").standard_normal((3, 2))
    np.testing.assert_array_equal(pf_ode_solve(x, 1.0, 1.0, 10, ring), x)
    with pytest.raises(ValueError):
        pf_ode_solve(x, 1.0, 2.0, 10, ring)
    with pytest.raises(ValueError):
        pf_ode_solve(x, 1.0, 0.001, 10, ring)
    with pytest.raises(ValueError):
        oracle_endpoint(x, 0.001, ring)


@pytest.mark.parametrize("kind", ["geometric", "edm"])
def test_time_grid(kind):
    g = time_grid(80.0, 0.002, 50, kind)
    assert g[0] == 80.0 and g[-1] == 0.002 and len(g) == 51
    assert np.all(np.diff(g) < 0)


def test_dataset_file_round_trip(tmp_path, ring):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    save_dataset(a, ring)
    loaded = load_dataset(a)
    np.testing.assert_array_equal(loaded.points, ring.points)
    save_dataset(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "tcm-dataset v1 d=2 n=2048 sigma_data=0.5"


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    save_dataset(a, make_dataset("ring8", 300, seed=7))
    save_dataset(b, make_dataset("ring8", 300, seed=7))
    assert a.read_bytes() == b.read_bytes()
    save_dataset(b, make_dataset("ring8", 300, seed=8))
    assert a.read_bytes() != b.read_bytes()


def test_read_points_rejects_wrong_kind(tmp_path):
    p = tmp_path / "s.txt"
    write_points(p, np.zeros((2, 2)), 0.5, kind="tcm-samples")
    with pytest.raises(ValueError):
        read_points(p)
    pts, sigma = read_points(p, kind="tcm-samples")
    assert pts.shape == (2, 2) and sigma == 0.5


def test_grid25_has_25_detectable_modes():
    data = make_dataset("grid25", 2500, seed=7)
    counts = mode_counts(data.points, data.centers)
    assert len(data.centers) == 25 and (counts == 100).all()


def test_ring8_modes_are_balanced(ring):
    assert (mode_counts(ring.points, ring.centers) == 256).all()
    radius = np.linalg.norm(ring.centers, axis=1)
    np.testing.assert_allclose(radius, radius[0], rtol=0.01)  # per-axis scaling is not exactly isotropic
    assert math.isclose(np.linalg.norm(ring.points, axis=1).mean(), radius[0], rel_tol=0.05)
