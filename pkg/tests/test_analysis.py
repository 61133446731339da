import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distest.analysis import (
    StabilityError,
    asymptotic_variance,
    evaluate_lyapunov,
    expectation_envelope,
    lyapunov_solve,
    matrix_noise_covariance,
    mc_diagnostics,
    quantization_covariance,
    scalar_example_summary,
)
from distest.estimators import Problem, Trace, run_trials
from distest.graph import LaplacianMatrix, LinkFailureModel, laplacian_from_edges, mean_laplacian, named_laplacian
from distest.models import LinearModel, check_lu_gain_matrix, partial_observation_model, scalar_model
from distest.quantizer import QuantizerSpec, dithered_quantize, draw_dither
from distest.schedules import WeightSchedule

from oracles import lyapunov_by_quadrature


def _random_instance(rng, N, M):
    edges = [(u, v) for u in range(N) for v in range(u + 1, N) if rng.random() < 0.6]
    edges += [(n, n + 1) for n in range(N - 1) if (n, n + 1) not in edges]
    L = laplacian_from_edges(N, edges)
    mats = tuple(rng.standard_normal((int(rng.integers(1, 3)), M)) for _ in range(N))
    D = sum(m.shape[0] for m in mats)
    A = rng.standard_normal((D, D))
    model = LinearModel(mats, A @ A.T / D + 0.1 * np.eye(D))
    lam_min = check_lu_gain_matrix(1.0, L, model).lam_min
    a = (1.0 + rng.random()) / (2 * lam_min)
    return L, model, a


def test_noise_free_gives_zero_covariance():
    model = LinearModel((np.eye(2), np.eye(2)), np.zeros((4, 4)))
    rep = asymptotic_variance(1.0, 1.0, named_laplacian("complete", 2), model, np.ones(2))
    assert np.array_equal(rep.s, np.zeros((4, 4)))


def test_scalar_closed_form_identity():
    N = 10
    L = named_laplacian("complete", N)
    rep = asymptotic_variance(1.0, 1e4, L, scalar_model(N), np.array([1.0]))
    sm = scalar_example_summary(N, 1.0, 1.0, 1.0, 1e4, L)
    assert rep.mean_sensor_variance == pytest.approx(sm.s_lu, rel=1e-10)
    assert sm.s_lu == pytest.approx(sm.s_lu_star, rel=0.01)
    assert sm.s_lu_star == sm.s_c == pytest.approx(0.1)
    assert rep.lyapunov_residual < 1e-8


def test_scalar_closed_form_identity_general():
    rng = np.random.default_rng(8)
    for N in (1, 3, 7):
        L = named_laplacian("path", N) if N > 2 else laplacian_from_edges(N, [(n, n + 1) for n in range(N - 1)])
        h, sigma, b = rng.uniform(0.5, 2), rng.uniform(0.3, 2), rng.uniform(0.1, 5)
        a = rng.uniform(1.01, 3) / (2 * h * h)
        rep = asymptotic_variance(a, b, L, scalar_model(N, h, sigma), np.array([0.3]))
        sm = scalar_example_summary(N, h, sigma, a, b, L)
        assert rep.mean_sensor_variance == pytest.approx(sm.s_lu, rel=1e-10)


def test_single_sensor_variance_and_optimum():
    L1 = LaplacianMatrix(np.zeros((1, 1)))
    for a in (0.6, 1.0, 2.0):
        assert scalar_example_summary(1, 1.5, 2.0, a / 2.25, 1.0, L1).s_lu == pytest.approx(
            (a / 2.25) ** 2 * 4 * 2.25 / (2 * a - 1))
    best = scalar_example_summary(1, 1.5, 2.0, 1 / 2.25, 1.0, L1).s_lu
    assert best == pytest.approx(4 / 2.25, rel=1e-14)
    for a in (0.3, 0.4, 0.44, 0.45, 0.5, 1.0, 3.0):
        assert scalar_example_summary(1, 1.5, 2.0, a, 1.0, L1).s_lu > best


def test_stability_boundary_blows_up():
    L = named_laplacian("complete", 10)
    sm = scalar_example_summary(10, 1.0, 1.0, 0.5 * (1 + 1e-3), 1.0, L)
    assert sm.s_lu > 100 * sm.s_lu_star
    with pytest.raises(StabilityError, match="1/\\(2 h\\^2\\)"):
        scalar_example_summary(10, 1.0, 1.0, 0.5, 1.0, L)


def test_unstable_drift_is_refused_unless_overridden():
    L = named_laplacian("complete", 3)
    with pytest.raises(StabilityError, match="lam_min"):
        asymptotic_variance(0.2, 1.0, L, scalar_model(3), np.array([1.0]))
    rep = asymptotic_variance(0.2, 1.0, L, scalar_model(3), np.array([1.0]), allow_unstable=True)
    assert rep.stability_margin >= 0 and not rep.stable


def test_lyapunov_matches_quadrature_on_four_node_graph():
    rng = np.random.default_rng(4)
    L, model, a = _random_instance(rng, 4, 2)
    rep = asymptotic_variance(a, 1.0, L, model, np.array([1.0, -1.0]))
    ref = lyapunov_by_quadrature(rep.sigma_matrix, a**2 * rep.s0)
    assert np.linalg.norm(rep.s - ref) / np.linalg.norm(ref) < 1e-6
    assert np.linalg.eigvalsh(rep.s)[0] > -1e-10


def test_lyapunov_solve_handles_zero_rhs():
    assert np.array_equal(lyapunov_solve(-np.eye(3), np.zeros((3, 3))), np.zeros((3, 3)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_variance_grows_with_observation_noise(seed):
    rng = np.random.default_rng(seed)
    L, model, a = _random_instance(rng, int(rng.integers(2, 5)), int(rng.integers(1, 3)))
    theta = rng.standard_normal(model.param_dim)
    base = asymptotic_variance(a, 1.0, L, model, theta)
    B = rng.standard_normal((model.obs_dim, 2))
    bigger = LinearModel(model.mean_matrices, model.noise_cov + B @ B.T)
    more = asymptotic_variance(a, 1.0, L, bigger, theta)
    assert np.trace(more.s) >= np.trace(base.s) - 1e-12
    assert np.linalg.eigvalsh(more.s - base.s)[0] >= -1e-9


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
@settings(max_examples=50, deadline=None)
def test_lu_lyapunov_function_eigen_bounds(seed, b):
    rng = np.random.default_rng(seed)
    L, model, _ = _random_instance(rng, int(rng.integers(2, 5)), int(rng.integers(1, 3)))
    rep = check_lu_gain_matrix(b, L, model)
    theta = rng.standard_normal(model.param_dim)
    x = rng.standard_normal(model.n_sensors * model.param_dim)
    e = x - np.tile(theta, model.n_sensors)
    v = evaluate_lyapunov("lu", x, theta, b, L, model)
    tol = 1e-10 * max(1.0, e @ e * rep.lam_max)
    assert rep.lam_min * (e @ e) - tol <= v <= rep.lam_max * (e @ e) + tol


def test_lyapunov_function_examples():
    theta = np.array([1.0, 2.0])
    x = np.tile(theta, 3)
    model = partial_observation_model(3, 2)
    L = named_laplacian("path", 3)
    assert evaluate_lyapunov("lu", x, theta, 1.0, L, model) == 0.0
    assert evaluate_lyapunov("nu", x, theta, 1.0) == 0.0
    x2 = x.copy()
    x2[3] += 1.0
    assert evaluate_lyapunov("nu", x2, theta, 1.0) == 1.0
    with pytest.raises(ValueError):
        evaluate_lyapunov("lu", x, theta, 1.0)


def test_matrix_noise_covariance_analytic_vs_sampled():
    mats = (np.array([[1.0, 0.0]]), np.array([[0.0, 1.0], [1.0, 1.0]]))
    theta = np.array([0.7, -1.2])
    s = 0.3
    analytic, se = matrix_noise_covariance(LinearModel(mats, np.eye(3), matrix_noise_std=s), theta)
    assert se is None
    sampled_model = LinearModel(mats, np.eye(3),
                                matrix_noise_sampler=lambda rng, n: s * rng.standard_normal((n, 3, 2)))
    est, se = matrix_noise_covariance(sampled_model, theta, np.random.default_rng(0), 200_000)
    assert np.all(np.abs(est - analytic) <= 4 * se + 1e-12)
    with pytest.raises(ValueError, match="rng"):
        matrix_noise_covariance(sampled_model, theta)


@pytest.mark.parametrize("mode", ["independent", "exact"])
def test_quantization_covariance_against_monte_carlo(mode):
    N, M, step, p = 4, 2, 0.3, 0.25
    theta = np.array([0.41, -0.07])
    links = LinkFailureModel(named_laplacian("complete", N), "erasure", p)
    Lbar = mean_laplacian(links)
    S = quantization_covariance(Lbar, M, QuantizerSpec(step), theta, mode)
    rng = np.random.default_rng(12)
    n_iter = 100_000
    ordered = links.base.ordered_links()
    edge_of = {pair: links.edges.index(tuple(sorted(pair))) for pair in ordered}
    active = links.sample_active(rng, n_iter)
    agg = np.zeros((n_iter, N, M))
    for n, l in ordered:
        if mode == "exact":
            y = np.broadcast_to(theta, (n_iter, M))
        else:
            y = rng.uniform(-5, 5, (n_iter, M))  # the independence model averages over inputs
        nu = draw_dither((n_iter, M), step, rng)
        q, _ = dithered_quantize(y, QuantizerSpec(step), dither=nu)
        agg[:, n] -= (q - y) * active[:, edge_of[(n, l)], None]
    emp = np.cov(agg.reshape(n_iter, -1).T)
    assert np.allclose(emp, S, atol=0.03 * np.abs(S).max())


def test_quantization_covariance_disabled_and_undithered():
    L = named_laplacian("ring", 4)
    assert np.array_equal(quantization_covariance(L, 2, None), np.zeros((8, 8)))
    with pytest.raises(ValueError):
        quantization_covariance(L, 2, QuantizerSpec(0.1, dithered=False))


def test_expectation_envelope_six_nodes():
    model = partial_observation_model(6, 3)
    L = named_laplacian("ring", 6)
    chk = expectation_envelope(WeightSchedule(1.0, 1.0), 1.0, L, model, np.array([1.0, 2.0, 3.0]),
                               np.zeros(18), 2000)
    assert chk.i0 == int(np.ceil(chk.lam_max)) - 1
    assert chk.holds and chk.lyapunov_decreasing
    assert chk.errors[-1] < chk.errors[chk.i0]


def _constant_traces(theta, n=30, N=3):
    M = len(theta)
    rows = np.array([0, 10, 100])
    return [Trace(seed=s, digest="", algorithm="lu", iterations=rows, sensor_errors=np.zeros((3, N)),
                  consensus_gap=np.zeros(3), alpha=np.ones(3), consensus_weight=np.ones(3),
                  final_estimates=np.tile(theta, (N, 1))) for s in range(n)]


def test_diagnostics_on_constant_traces():
    theta = np.array([1.0, 2.0])
    rep = mc_diagnostics(_constant_traces(theta), theta)
    assert rep.sections["consistency"]["final_error"]["max"] == 0.0
    assert rep.sections["consensus"]["final_gap"]["max"] == 0.0
    assert "degenerate" in rep.sections["normality"]
    assert "degenerate" in rep.sections["mse_decay"]


def test_diagnostics_needs_enough_traces():
    with pytest.raises(ValueError, match="at least 30"):
        mc_diagnostics(_constant_traces(np.ones(1), n=29), np.ones(1))
    with pytest.raises(ValueError, match="unknown report"):
        mc_diagnostics(_constant_traces(np.ones(1)), np.ones(1), ["bogus"])


def test_mse_slope_on_scalar_benchmark():
    N = 10
    problem = Problem(LinkFailureModel(named_laplacian("complete", N)), scalar_model(N), np.array([1.0]),
                      WeightSchedule(1.0, 1.0), gain=1.0)
    traces = run_trials(problem, "lu", 20_000, range(200), stride=500)
    rep = mc_diagnostics(traces, np.array([1.0]), ["mse_decay", "normality"],
                         s_nn=asymptotic_variance(1.0, 1.0, named_laplacian("complete", N), scalar_model(N),
                                                  np.array([1.0])).s_nn)
    assert rep.sections["mse_decay"]["slope"] == pytest.approx(-1.0, abs=0.15)
    assert rep.sections["normality"]["max_relative_frobenius"] < 0.35
