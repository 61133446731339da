import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distest.estimators import (
    CHUNK,
    DivergenceError,
    EstimatorState,
    Problem,
    _assert_average_dynamics,
    lu_step,
    nlu_step,
    nu_step,
    run_trial,
    run_trials,
    substream,
)
from distest.graph import LaplacianMatrix, LinkFailureModel, laplacian_from_edges, named_laplacian
from distest.models import LinearModel, SeparableModel, cubic_model, partial_observation_model, scalar_model
from distest.quantizer import QuantizerSpec, aggregate_quant_noise, dithered_quantize, draw_dither
from distest.schedules import WeightSchedule

from oracles import dense_lu_step

NO_LINKS_1 = LaplacianMatrix(np.zeros((1, 1)))


def _noise_free_scalar(N):
    return LinearModel(tuple(np.array([[1.0]]) for _ in range(N)), np.zeros((N, N)))


# -- single steps ----------------------------------------------------------------


def test_lu_hand_step():
    K2 = named_laplacian("complete", 2)
    model = _noise_free_scalar(2)
    out = lu_step(EstimatorState(0, np.array([0.0, 2.0])), K2, np.array([1.0, 1.0]), model, 0.1, 1.0)
    assert np.allclose(out.estimates, [0.3, 1.7], atol=1e-15)
    assert out.iteration == 1
    dense = dense_lu_step(np.array([0.0, 2.0]), np.asarray(K2), [np.eye(1)] * 2, np.ones(2), 0.1, 1.0)
    assert np.allclose(out.estimates, dense, atol=1e-15)


def test_nu_hand_step():
    K2 = named_laplacian("complete", 2)
    sep = _noise_free_scalar(2).as_separable()
    out = nu_step(EstimatorState(0, np.array([0.0, 2.0])), K2, np.array([1.0, 1.0]), sep, 0.1, 1.0)
    assert np.allclose(out.estimates, [0.3, 1.7], atol=1e-15)


def test_nlu_cubic_hand_step():
    cubic = cubic_model(3, 1, sigma=0.0)
    empty = laplacian_from_edges(3, [])
    out = nlu_step(EstimatorState(0, np.zeros(3), np.zeros(3)), empty, np.full(3, 8.0), cubic, 0.1, 0.5)
    assert np.allclose(out.transformed, 0.8)
    assert np.allclose(out.estimates, np.cbrt(0.8))


def test_lu_reduces_to_robbins_monro():
    model = _noise_free_scalar(1)
    alpha = WeightSchedule(0.5, 1.0)
    c, x0 = 3.0, -1.0
    state = EstimatorState(0, np.array([x0]))
    path = [x0]
    for i in range(200):
        state = lu_step(state, NO_LINKS_1, np.array([c]), model, alpha(i), 7.0)
        path.append(state.estimates[0])
    prod = np.cumprod(1 - alpha.values(0, 200))
    assert np.allclose(np.array(path[1:]) - c, prod * (x0 - c), rtol=1e-12)
    assert np.all(np.diff(path) > 0)


def test_nlu_reduces_to_robbins_monro_on_transformed_state():
    cubic = cubic_model(1, 1, sigma=0.0)
    alpha = WeightSchedule(0.5, 1.0)
    state = EstimatorState(0, np.array([0.0]))
    xt = [0.0]
    for i in range(100):
        state = nlu_step(state, NO_LINKS_1, np.array([8.0]), cubic, alpha(i), 0.0)
        xt.append(state.transformed[0])
    prod = np.cumprod(1 - alpha.values(0, 100))
    assert np.allclose(np.array(xt[1:]) - 8.0, prod * (0.0 - 8.0), rtol=1e-12)
    assert np.allclose(state.estimates, np.cbrt(state.transformed))


def test_quantized_lu_step_matches_dense_formula():
    rng = np.random.default_rng(0)
    N, M, step = 4, 2, 0.25
    model = partial_observation_model(N, M, 1, sigma=1.0)
    L = laplacian_from_edges(N, [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)])
    links = L.ordered_links()
    x = rng.standard_normal(N * M)
    z = rng.standard_normal(N)
    nu = draw_dither((len(links), M), step, rng)
    X = x.reshape(N, M)
    _, eps = dithered_quantize(np.array([X[l] for _, l in links]), QuantizerSpec(step), dither=nu)
    agg = aggregate_quant_noise(N, links, nu, eps, laplacian=L)
    expected = dense_lu_step(x, np.asarray(L), list(model.mean_matrices), z, 0.05, 2.0, agg.upsilon, agg.psi)
    got = lu_step(EstimatorState(0, x), L, z, model, 0.05, 2.0, QuantizerSpec(step), dither=nu)
    assert np.allclose(got.estimates, expected, atol=1e-13)


def test_step_kernels_flag_divergence():
    model = _noise_free_scalar(1)
    with pytest.raises(DivergenceError) as info:
        lu_step(EstimatorState(41, np.array([1e11])), NO_LINKS_1, np.array([0.0]), model, 100.0, 1.0)
    assert info.value.iteration == 42
    log_model = SeparableModel(1, 1, sample=None, transform=lambda z: z, sensor_means=np.exp, h=np.exp, h_inv=np.log)
    with pytest.raises(DivergenceError, match="h_inv"):
        nlu_step(EstimatorState(0, np.zeros(1)), NO_LINKS_1, np.array([-5.0]), log_model, 1.0, 0.0)


edge_sets = st.integers(2, 6).flatmap(
    lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
                                             .filter(lambda e: e[0] < e[1]), unique=True, max_size=8))
)


@given(edge_sets, st.integers(1, 3), st.integers(0, 2**32 - 1), st.floats(1e-3, 1.0), st.floats(0.1, 10.0))
@settings(max_examples=100, deadline=None)
def test_truth_consensus_is_a_fixed_point(g, M, seed, alpha, weight):
    n, edges = g
    rng = np.random.default_rng(seed)
    L = laplacian_from_edges(n, edges)
    theta = rng.uniform(-10, 10, M)
    mats = tuple(rng.standard_normal((int(rng.integers(1, 3)), M)) for _ in range(n))
    model = LinearModel(mats, np.zeros((sum(m.shape[0] for m in mats),) * 2))
    x = np.tile(theta, n)
    tol = 1e-14 * max(1.0, np.abs(theta).max()) * max(1.0, weight) * 10
    z = np.concatenate([h @ theta for h in mats])
    out = lu_step(EstimatorState(0, x), L, z, model, alpha, weight)
    assert np.max(np.abs(out.estimates - x)) <= tol
    sep = model.as_separable()
    J = sep.sensor_means(np.tile(theta, (n, 1))).ravel()
    out = nu_step(EstimatorState(0, x), L, J, sep, alpha, weight)
    assert np.max(np.abs(out.estimates - x)) <= tol
    cubic = cubic_model(n, M, sigma=0.0)
    xt = np.tile(theta**3, n)
    out = nlu_step(EstimatorState(0, x, xt), L, xt, cubic, alpha, weight)
    assert np.max(np.abs(out.transformed - xt)) <= tol * max(1.0, np.abs(theta**3).max())
    assert np.allclose(out.estimates, x, rtol=1e-12, atol=1e-12)


# -- runner ----------------------------------------------------------------------


def _quantized_problem(dithered=True, matrix_noise=0.1):
    base = named_laplacian("ring", 4)
    mats = tuple(np.eye(2)[[n % 2]] for n in range(4))
    model = LinearModel(mats, 0.5 * np.eye(4), matrix_noise_std=matrix_noise)
    return Problem(
        links=LinkFailureModel(base, "erasure", 0.3),
        model=model,
        theta=np.array([1.0, -0.5]),
        alpha=WeightSchedule(0.3, 0.8),
        gain=1.5,
        quantizer=QuantizerSpec(0.25, dithered=dithered),
        x0=np.array([[0.5, 0.0], [0.0, 0.0], [-1.0, 2.0], [0.0, 1.0]]),
    )


def _cubic_problem():
    base = named_laplacian("complete", 4)
    return Problem(
        links=LinkFailureModel(base, "erasure", 0.2),
        model=cubic_model(4, 1, sigma=0.5),
        theta=np.array([1.2]),
        alpha=WeightSchedule(1.0, 1.0),
        beta=WeightSchedule(0.05, 0.505),
        quantizer=QuantizerSpec(0.125),
        epsilon1=1 / 0.49 - 2,
    )


def _replay(problem, algorithm, iterations, seed):
    """Drive the single-step kernels with the runner's documented substreams."""
    N, M = problem.n_nodes, problem.param_dim
    model = problem.model if algorithm == "lu" else problem.separable_model()
    links = problem.links
    masks = links.sample_active(substream(seed, "graph"), iterations)
    raw = model.sample(problem.theta, substream(seed, "observation"), iterations,
                       matrix_rng=substream(seed, "matrix"))
    quant = problem.quantizer if problem.quantizer.enabled else None
    nu = {}
    if quant is not None and quant.dithered:
        for n, l in links.base.ordered_links():
            nu[(n, l)] = draw_dither((iterations, M), quant.step, substream(seed, "dither", n, l))
    state = EstimatorState(0, problem.x0.ravel())
    for i in range(iterations):
        active = links.edges if masks is None else [e for e, on in zip(links.edges, masks[i]) if on]
        L = laplacian_from_edges(N, active)
        dither = np.array([nu[p][i] for p in L.ordered_links()]) if nu else None
        a = problem.alpha(i)
        if algorithm == "lu":
            state = lu_step(state, L, model.unpad_observation(raw[i]), model, a, problem.gain, quant, dither=dither)
        elif algorithm == "nu":
            state = nu_step(state, L, model.transform(raw[i]).ravel(), model, a, problem.gain, quant, dither=dither)
        else:
            state = nlu_step(state, L, model.transform(raw[i]).ravel(), model, a, problem.beta(i), quant,
                             dither=dither)
    return state


@pytest.mark.parametrize("algorithm", ["lu", "nu"])
def test_runner_matches_kernel_replay(algorithm):
    problem = _quantized_problem()
    iterations = CHUNK + 45  # crosses a block boundary
    trace = run_trial(problem, algorithm, iterations, seed=17)
    ref = _replay(problem, algorithm, iterations, 17)
    assert np.allclose(trace.final_estimates.ravel(), ref.estimates, rtol=1e-11, atol=1e-12)


def test_runner_matches_kernel_replay_nlu():
    problem = _cubic_problem()
    trace = run_trial(problem, "nlu", CHUNK + 10, seed=3)
    ref = _replay(problem, "nlu", CHUNK + 10, 3)
    assert np.allclose(trace.final_transformed.ravel(), ref.transformed, rtol=1e-11, atol=1e-12)
    assert np.allclose(trace.final_estimates.ravel(), ref.estimates, rtol=1e-11, atol=1e-12)


def test_runner_matches_kernel_replay_undithered_fixed_graph():
    p = _quantized_problem(dithered=False, matrix_noise=0.0)
    problem = Problem(LinkFailureModel(p.links.base), p.model, p.theta, p.alpha, p.gain, quantizer=p.quantizer)
    trace = run_trial(problem, "lu", 100, seed=1)
    assert np.allclose(trace.final_estimates.ravel(), _replay(problem, "lu", 100, 1).estimates, rtol=1e-11)


def test_zero_iterations():
    trace = run_trial(_quantized_problem(), "lu", 0, seed=0)
    assert trace.iterations.tolist() == [0]
    x0 = _quantized_problem().x0
    assert np.allclose(trace.sensor_errors[0], np.linalg.norm(x0 - [1.0, -0.5], axis=1))


def test_stride_and_final_row():
    trace = run_trial(_quantized_problem(), "lu", 25, seed=0, stride=10)
    assert trace.iterations.tolist() == [0, 10, 20, 25]


def test_determinism_and_batch_invariance():
    problem = _quantized_problem()
    a = run_trials(problem, "lu", 300, range(5))
    b = run_trials(problem, "lu", 300, range(5))
    single = [run_trial(problem, "lu", 300, s) for s in range(5)]
    for x, y, z in zip(a, b, single):
        for field in ("sensor_errors", "consensus_gap", "final_estimates"):
            assert np.array_equal(getattr(x, field), getattr(y, field))
            assert np.array_equal(getattr(x, field), getattr(z, field))
    split = run_trials(problem, "lu", 300, range(5), batch_size=2)
    assert all(np.array_equal(x.final_estimates, y.final_estimates) for x, y in zip(a, split))


@pytest.mark.parametrize("quant", [QuantizerSpec.disabled(), QuantizerSpec(0.25)])
def test_nu_on_linear_embedding_is_bit_identical_to_lu(quant):
    p = _quantized_problem()
    problem = Problem(p.links, p.model, p.theta, p.alpha, gain=2.0, quantizer=quant, x0=p.x0)
    lu = run_trials(problem, "lu", 150, [4, 9])
    nu = run_trials(problem, "nu", 150, [4, 9])
    for x, y in zip(lu, nu):
        assert np.array_equal(x.final_estimates, y.final_estimates)
        assert np.array_equal(x.sensor_errors, y.sensor_errors)


def test_nlu_estimates_are_inverse_of_transformed_state():
    traces = run_trials(_cubic_problem(), "nlu", 200, range(3), keep_estimates=True)
    for t in traces:
        assert np.allclose(t.final_estimates, np.cbrt(t.final_transformed), rtol=1e-9)
        assert t.transformed_error is not None


def test_nlu_average_dynamics_check_runs_clean():
    run_trials(_cubic_problem(), "nlu", 300, range(3), check_average=True)


def test_average_dynamics_check_detects_violation():
    X = np.zeros((1, 2, 1))
    Xn = np.full((1, 2, 1), 1e-6)
    J = np.zeros((1, 2, 1))
    with pytest.raises(AssertionError, match="average dynamics"):
        _assert_average_dynamics(X, Xn, 0.1, 0.1, J, X, X, None, None, 2)


def test_weight_series_expose_time_scales():
    lu = run_trial(_quantized_problem(), "lu", 50, seed=0, stride=10)
    assert np.allclose(lu.consensus_weight, lu.alpha * 1.5)
    nlu = run_trial(_cubic_problem(), "nlu", 1000, seed=0, stride=100)
    ratio = nlu.consensus_weight[1:] / nlu.alpha[1:]
    assert np.all(np.diff(ratio) > 0)


def test_divergence_is_reported_with_partial_trace():
    problem = Problem(LinkFailureModel(named_laplacian("complete", 5)), scalar_model(5), np.array([1.0]),
                      WeightSchedule(3.0, 0.51), gain=5.0)
    traces = run_trials(problem, "lu", 500, [0, 1])
    assert all(t.diverged_at is not None for t in traces)
    t = traces[0]
    assert t.iterations[-1] < t.diverged_at
    with pytest.raises(DivergenceError) as info:
        run_trial(problem, "lu", 500, 0)
    assert info.value.trace is not None and info.value.iteration == t.diverged_at


def test_h_inv_domain_failure_in_runner():
    def sample(theta, rng, size, matrix_rng=None):
        return np.exp(theta) + 10 * rng.standard_normal((size, 3, 1))

    model = SeparableModel(3, 1, sample, lambda z: z, np.exp, np.exp, np.log)
    problem = Problem(LinkFailureModel(named_laplacian("complete", 3)), model, np.array([0.0]),
                      WeightSchedule(1.0, 1.0), beta=WeightSchedule(0.1, 0.6))
    traces = run_trials(problem, "nlu", 20, range(4))
    assert any(t.diverged_at is not None and "h_inv" in t.divergence_reason for t in traces)


def test_runner_argument_errors():
    p = _quantized_problem()
    with pytest.raises(ValueError, match="unknown algorithm"):
        run_trials(p, "xyz", 10, [0])
    with pytest.raises(ValueError, match="beta"):
        run_trials(p, "nlu", 10, [0])
    with pytest.raises(ValueError):
        run_trials(p, "lu", -1, [0])
    with pytest.raises(ValueError, match="linear"):
        run_trials(_cubic_problem(), "lu", 10, [0])
    with pytest.raises(ValueError, match="sensors"):
        Problem(LinkFailureModel(named_laplacian("ring", 5)), scalar_model(4), [1.0], WeightSchedule(1.0))


def test_lu_scalar_consistency_over_seeds():
    problem = Problem(LinkFailureModel(named_laplacian("complete", 10)), scalar_model(10), np.array([1.0]),
                      WeightSchedule(1.0, 1.0), gain=1.0)
    traces = run_trials(problem, "lu", 100_000, range(100), stride=100_000)
    assert not any(t.diverged_at for t in traces)
    initial = np.median([t.max_errors[0] for t in traces])
    final = np.median([t.max_errors[-1] for t in traces])
    assert final < 0.1 * initial
