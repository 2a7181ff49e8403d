import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kppem.model import QuadraticProblem
from kppem.poisson import PoissonDeblurModel, gaussian_blur_matrix, random_instance
from kppem.solver import SolverConfig
from kppem.trust_region import (QuadraticModel, SubproblemError,
                                TrustRegionCollapsed, TrustRegionState,
                                build_quadratic_model, run_tr,
                                solve_tr_subproblem, tr_accept, tr_norm,
                                update_delta)


def make_qm(H, I, g):
    n = len(g)
    return QuadraticModel(np.zeros(n), 0.0, np.asarray(g, float),
                          np.asarray(H, float), np.asarray(I, float))


def random_subproblem(rng, n):
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, n))
    H = -(A @ A.T + 0.1 * np.eye(n))
    I = B @ B.T + 0.01 * np.eye(n)
    g = rng.normal(size=n)
    newton = np.linalg.solve(-H, g)
    delta = rng.uniform(0.01, 1.5) * np.sqrt(newton @ I @ newton)
    return make_qm(H, I, g), delta


def dual_oracle(qm, delta):
    """Grid the multiplier log-spaced over [0, 1e6] and bisect the sign change."""
    def excess(beta):
        d = np.linalg.solve(-qm.H + beta * qm.I, qm.g)
        return np.sqrt(d @ qm.I @ d) - delta, d

    if excess(0.0)[0] <= 0:
        return excess(0.0)[1], 0.0
    grid = np.concatenate([[0.0], np.logspace(-12, 6, 2000)])
    values = [excess(b)[0] for b in grid]
    j = next(i for i, v in enumerate(values) if v <= 0)
    lo, hi = grid[j - 1], grid[j]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if excess(mid)[0] > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    beta = 0.5 * (lo + hi)
    return excess(beta)[1], beta


# -- subproblem ---------------------------------------------------------------

def test_interior_newton_step():
    d, beta = solve_tr_subproblem(make_qm(-np.eye(2), np.eye(2), [1, 0]), 2.0)
    np.testing.assert_allclose(d, [1.0, 0.0])
    assert beta == 0.0


def test_active_constraint_scalar_algebra():
    d, beta = solve_tr_subproblem(make_qm(-np.eye(2), np.eye(2), [1, 0]), 0.5)
    np.testing.assert_allclose(d, [0.5, 0.0], rtol=1e-12)
    assert beta == pytest.approx(1.0, rel=1e-10)


def test_subproblem_matches_dual_oracle(rng):
    for _ in range(30):
        qm, delta = random_subproblem(rng, 3)
        d, beta = solve_tr_subproblem(qm, delta)
        d_ref, beta_ref = dual_oracle(qm, delta)
        np.testing.assert_allclose(d, d_ref, atol=1e-6 * max(1, np.abs(d_ref).max()))


def test_subproblem_kkt_and_model_increase(rng):
    for n in range(2, 7):
        for _ in range(10):
            qm, delta = random_subproblem(rng, n)
            d, beta = solve_tr_subproblem(qm, delta)
            residual = (-qm.H + beta * qm.I) @ d - qm.g
            assert np.max(np.abs(residual)) <= 1e-8 * np.max(np.abs(qm.g))
            assert beta >= 0
            norm = tr_norm(d, qm.I)
            assert norm <= delta * (1 + 1e-8)
            assert beta * (delta - norm) <= 1e-8 * delta
            assert qm.predicted_increase(d) > 0


def test_subproblem_is_approximate_kpp_step(rng):
    qm, delta = random_subproblem(rng, 4)
    d, beta = solve_tr_subproblem(qm, 0.3 * delta)
    direct = np.linalg.solve(-qm.H + beta * qm.I, qm.g)
    np.testing.assert_allclose(d, direct, rtol=1e-8)


def test_multiplier_non_increasing_in_radius(rng):
    qm, delta = random_subproblem(rng, 5)
    betas = [solve_tr_subproblem(qm, r)[1]
             for r in np.geomspace(1e-3, 2.0, 40) * delta]
    assert np.all(np.diff(betas) <= 1e-12 * max(betas))
    assert betas[-1] == 0.0


def test_zero_gradient_gives_zero_step():
    d, beta = solve_tr_subproblem(make_qm(-np.eye(3), np.eye(3), [0, 0, 0]), 1.0)
    assert np.all(d == 0) and beta == 0.0


def test_singular_penalty_metric_is_handled():
    # penalty seminorm blind to the second coordinate
    qm = make_qm(-np.eye(2), np.diag([1.0, 0.0]), [2.0, 1.0])
    d, beta = solve_tr_subproblem(qm, 0.5)
    assert tr_norm(d, qm.I) == pytest.approx(0.5, rel=1e-8)
    np.testing.assert_allclose(d, [0.5, 1.0], rtol=1e-8)


def test_subproblem_errors():
    qm = make_qm(np.eye(2), np.eye(2), [1.0, 0.0])
    with pytest.raises(SubproblemError, match="ill-posed"):
        solve_tr_subproblem(qm, 1.0)
    with pytest.raises(ValueError):
        solve_tr_subproblem(make_qm(-np.eye(2), np.eye(2), [1, 0]), 0.0)


# -- small helpers ------------------------------------------------------------

def test_tr_norm_examples():
    assert tr_norm(np.zeros(2), np.eye(2)) == 0.0
    assert tr_norm([3.0, 4.0], np.eye(2)) == 5.0
    assert tr_norm([1.0, 1.0], np.diag([4.0, 1.0])) == pytest.approx(np.sqrt(5))
    assert tr_norm([0.0, 1.0], np.diag([1.0, 0.0])) == 0.0


def test_tr_accept_examples():
    assert tr_accept(1.0, 1.0, 0.1)
    assert not tr_accept(0.0, 1.0, 0.1)
    assert tr_accept(0.05, 1.0, 0.01)
    with pytest.raises(ValueError, match="model decrease impossible"):
        tr_accept(1.0, -1e-3, 0.1)


def test_update_delta_examples():
    state = TrustRegionState(delta=1.0, gamma1=0.5, gamma2=2.0)
    assert update_delta(state, 0.0, 1.0) == 0.25
    assert update_delta(state, 1.0, 1.0) == 1.5
    mid = 0.5 * (state.m + state.m_prime)
    assert update_delta(state, mid, 1.0) == 0.75
    with pytest.raises(ValueError):
        update_delta(state, 1.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(rho=st.floats(-10, 10), delta=st.floats(1e-6, 1e6))
def test_update_delta_brackets(rho, delta):
    state = TrustRegionState(delta=delta)
    new = update_delta(state, rho, 1.0)
    if rho <= state.m:
        assert 0 < new < state.gamma1 * delta
    elif rho < state.m_prime:
        assert state.gamma1 * delta < new < delta
    else:
        assert delta < new < state.gamma2 * delta


def test_state_validation():
    with pytest.raises(ValueError):
        TrustRegionState(m=0.9, m_prime=0.5)
    with pytest.raises(ValueError):
        TrustRegionState(gamma1=1.5)
    with pytest.raises(ValueError):
        TrustRegionState(delta=0.0)


# -- quadratic model ----------------------------------------------------------

def test_quadratic_model_basics(small_model, rng):
    theta = rng.uniform(0.5, 3.0, size=4)
    qm = build_quadratic_model(small_model, theta)
    assert qm.loglik(theta) == small_model.log_likelihood(theta)
    np.testing.assert_allclose(qm.H, qm.H.T, atol=1e-12)
    np.testing.assert_allclose(qm.I, qm.I.T, atol=1e-12)
    unit = QuadraticModel(np.zeros(2), 0.0, np.zeros(2), -np.eye(2), np.eye(2))
    assert unit.penalty([3.0, 4.0]) == 12.5


def test_quadratic_model_is_second_order(small_model, rng):
    theta = rng.uniform(1.0, 3.0, size=4)
    qm = build_quadratic_model(small_model, theta)
    direction = rng.normal(size=4)
    gaps = []
    for t in (0.1, 0.05):
        cand = theta + t * direction
        gaps.append(abs(qm.loglik(cand) - small_model.log_likelihood(cand)))
    assert gaps[1] / gaps[0] == pytest.approx(1 / 8, abs=0.02)


def test_quadratic_model_dimension_check():
    with pytest.raises(ValueError):
        QuadraticModel(np.zeros(2), 0.0, np.zeros(2), np.eye(3), np.eye(2))


# -- outer loop ---------------------------------------------------------------

def test_start_at_ml_terminates_immediately(deblur8):
    model, truth = deblur8
    for mode in ("beta_driven", "delta_driven"):
        trace = run_tr(model, truth, TrustRegionState(), SolverConfig(), mode)
        assert trace.converged and trace.iterations == 0


def test_quadratic_problem_single_step():
    model = QuadraticProblem(np.array([[3.0, 1.0], [1.0, 2.0]]), [1.0, -2.0])
    trace = run_tr(model, [10.0, 10.0], TrustRegionState(delta=1e6),
                   SolverConfig(), "delta_driven")
    assert trace.converged and trace.iterations == 1
    np.testing.assert_allclose(trace.final.theta, model.center, atol=1e-12)


@pytest.mark.parametrize("mode", ["beta_driven", "delta_driven"])
def test_accepted_iterates_monotone(mode, rng):
    for _ in range(5):
        P = rng.uniform(0.05, 1.0, size=(8, 5))
        model = PoissonDeblurModel(P, P @ rng.uniform(0.5, 5.0, size=5))
        trace = run_tr(model, np.full(5, model.mean_count_level()),
                       TrustRegionState(), SolverConfig(), mode)
        values = [model.log_likelihood(t) for t in trace.iterates()]
        assert np.all(np.diff(values) >= 0)
        assert trace.margin_violations() == []


def test_rejections_keep_iterate():
    # tiny initial multiplier on a curved instance forces null steps
    P = gaussian_blur_matrix(6, 0.6)
    model = PoissonDeblurModel(P, P @ np.array([5, 0.2, 0.2, 3, 0.2, 0.2]))
    trace = run_tr(model, np.full(6, 1.5), TrustRegionState(beta=1e-8),
                   SolverConfig())
    rejected = [r for r in trace.records if r.accepted is False]
    assert rejected
    for rec in rejected:
        nxt = trace.records[rec.k + 1]
        np.testing.assert_array_equal(nxt.theta, rec.theta)
        assert nxt.beta == pytest.approx(1.6 * rec.beta)


def test_collapse_raises(monkeypatch, deblur8):
    import kppem.trust_region as tr
    model, truth = deblur8
    monkeypatch.setattr(tr, "tr_accept", lambda *a: False)
    with pytest.raises(TrustRegionCollapsed, match="collapsed"):
        run_tr(model, np.full(truth.size, 0.5), TrustRegionState(),
               SolverConfig())


def test_unknown_mode(small_model):
    with pytest.raises(ValueError):
        run_tr(small_model, np.ones(4), TrustRegionState(), SolverConfig(),
               "gamma_driven")


def test_beta_driven_32_pixel_terminal_behavior():
    from kppem.harness import rate_report
    from kppem.poisson import PhantomSpec, two_rail_phantom
    spec = PhantomSpec(p=32, rails=((12,), (20,)))
    P = gaussian_blur_matrix(32, 0.75)
    model = PoissonDeblurModel(P, P @ two_rail_phantom(spec))
    theta0 = np.full(32, model.mean_count_level())
    trace = run_tr(model, theta0, TrustRegionState(beta=1.0), SolverConfig())
    assert trace.converged
    ref = run_tr(model, trace.final.theta, TrustRegionState(beta=1e-6),
                 SolverConfig(grad_tol=trace.grad_tol / 100))
    theta_star = ref.final.theta
    dist = np.linalg.norm(trace.iterates() - theta_star, axis=1)
    report = rate_report(dist, np.linalg.norm(theta_star))
    assert report.tail[-1] < 0.1
    betas = [r.beta for r in trace.records if r.beta is not None]
    assert betas[-1] < 1e-3
