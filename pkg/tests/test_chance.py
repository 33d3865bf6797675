import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sddpc.chance import (
    MaxOuterIter,
    NominalProblem,
    PolytopeSpec,
    RiskAllocation,
    build_smpc_qp,
    condense,
    deterministic_constraints,
    iterative_risk_allocation,
    tighten,
    uniform_allocation,
    update_risk,
)
from sddpc.numerics import Infeasible, icdfn, solve_qp
from sddpc.plant import LtiModel, random_minimal_model

from helpers import scalar_model


def _scalar_spec(f=1.0, p=0.2):
    return PolytopeSpec([[1.0]], [f], [[1.0]], [f], p, p)


# -- allocation and tightening ------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        PolytopeSpec([[1.0]], [1.0], [[1.0]], [1.0], 0.6, 0.2)
    with pytest.raises(ValueError):
        PolytopeSpec([[1.0]], [1.0], [[1.0]], [1.0], 0.0, 0.2)
    with pytest.raises(ValueError):
        PolytopeSpec([[1.0]], [1.0, 2.0], [[1.0]], [1.0])
    box = PolytopeSpec.box(2, 1, 0.6, 0.4)
    assert (box.q_u, box.q_y) == (4, 2)
    assert np.array_equal(box.E_y, [[1.0], [-1.0]])


def test_uniform_allocation_examples():
    a = uniform_allocation(_scalar_spec(), 5)
    assert np.all(a.p_u == 0.2)
    spec = PolytopeSpec(np.ones((4, 1)), np.ones(4), np.ones((1, 1)), [1.0], 0.2, 0.1)
    a = uniform_allocation(spec, 3)
    assert np.all(a.p_u == 0.05)
    assert np.allclose(a.p_u.sum(axis=0), 0.2, atol=1e-15, rtol=0)


def test_tighten_examples():
    spec = _scalar_spec()
    S1 = [np.eye(1)]
    tc = tighten(spec, RiskAllocation(np.array([[0.5]]), np.array([[0.5]])), S1, S1)
    assert tc.bound_u[0, 0] == 1.0
    tc = tighten(spec, RiskAllocation(np.array([[0.2]]), np.array([[0.2]])), S1, S1)
    assert tc.bound_u[0, 0] == pytest.approx(1 + icdfn(0.2), abs=1e-15)
    assert tc.bound_u[0, 0] == pytest.approx(0.1583788, abs=1e-7)
    tc = tighten(spec, uniform_allocation(spec, 2), [np.zeros((1, 1))] * 2, [np.zeros((1, 1))] * 2)
    assert np.all(tc.bound_u == 1.0) and np.all(tc.bound_y == 1.0)


def test_tighten_reproduces_rowwise_formula():
    rng = np.random.default_rng(0)
    spec = PolytopeSpec(rng.normal(size=(3, 2)), rng.uniform(1, 2, 3),
                        rng.normal(size=(2, 2)), rng.uniform(1, 2, 2), 0.1, 0.3)
    N = 4
    Su = [(lambda M: M @ M.T)(rng.normal(size=(2, 2))) for _ in range(N)]
    Sy = [(lambda M: M @ M.T)(rng.normal(size=(2, 2))) for _ in range(N)]
    alloc = RiskAllocation(rng.dirichlet(np.ones(3), N).T * 0.1, rng.dirichlet(np.ones(2), N).T * 0.3)
    tc = tighten(spec, alloc, Su, Sy)
    for t in range(N):
        for i in range(3):
            e = spec.E_u[i]
            assert tc.bound_u[i, t] == pytest.approx(
                spec.f_u[i] + np.sqrt(e @ Su[t] @ e) * icdfn(alloc.p_u[i, t]), abs=1e-12)
        for i in range(2):
            e = spec.E_y[i]
            assert tc.bound_y[i, t] == pytest.approx(
                spec.f_y[i] + np.sqrt(e @ Sy[t] @ e) * icdfn(alloc.p_y[i, t]), abs=1e-12)


@pytest.mark.parametrize("p", [0.05, 0.2, 0.4])
def test_tightened_bound_monte_carlo_frequency(p):
    M = 10**5
    rng = np.random.default_rng(int(p * 100))
    S = np.array([[2.0, 0.3], [0.3, 0.5]])
    e, f = np.array([1.0, -2.0]), 0.7
    spec = PolytopeSpec([[1.0, 0.0]], [1.0], [e], [f], 0.2, p)
    tc = tighten(spec, RiskAllocation(np.array([[0.2]]), np.array([[p]])), [np.eye(2)], [S])
    # nominal point exactly on the tightened bound
    z = e / (e @ e) * tc.bound_y[0, 0]
    samples = z + rng.multivariate_normal(np.zeros(2), S, M)
    freq = np.mean(samples @ e > f)
    assert abs(freq - p) <= 3 * np.sqrt(p * (1 - p) / M)


# -- condensed QP -------------------------------------------------------------


def test_qp_trivial_origin():
    m = scalar_model()
    tc = deterministic_constraints(_scalar_spec(), 1)
    sol = solve_qp(build_smpc_qp(m, [0.0], tc, [[1.0]], [[1.0]], [0.0], 1))
    assert sol.x[0] == pytest.approx(0.0, abs=1e-12)


def test_qp_one_step_input_only_cost():
    m = LtiModel([[0.0]], [[1.0]], [[1.0]], [[0.0]], [[1.0]])
    tc = deterministic_constraints(_scalar_spec(f=10.0), 1)
    qp = build_smpc_qp(m, [0.0], tc, [[1.0]], [[1.0]], [2.0], 1)
    sol = solve_qp(qp)
    # brute-force grid over u of u^2 + (C mu - 2)^2
    grid = np.linspace(-3, 3, 6001)
    assert sol.x[0] == pytest.approx(grid[np.argmin(grid**2 + 4.0)], abs=1e-3)
    assert sol.x[0] == pytest.approx(0.0, abs=1e-12)


def _uncondensed_solution(model, mu, tc, Q, R, refs, N):
    """Independent solve over z = (x_0..x_N, u_0..u_{N-1}) with explicit
    dynamics equalities, solved by scipy's SLSQP."""
    from scipy.optimize import minimize

    n, m = model.n, model.m
    nx = (N + 1) * n

    def split(z):
        return z[:nx].reshape(N + 1, n), z[nx:].reshape(N, m)

    def cost(z):
        x, u = split(z)
        y = x[:N] @ model.C.T - refs
        return float(np.einsum("ti,ij,tj->", y, Q, y) + np.einsum("ti,ij,tj->", u, R, u))

    def eq(z):
        x, u = split(z)
        res = [x[0] - mu]
        res += [x[t + 1] - model.A @ x[t] - model.B @ u[t] for t in range(N)]
        return np.concatenate(res)

    def ineq(z):
        x, u = split(z)
        y = x[:N] @ model.C.T
        return np.concatenate([(tc.bound_u - tc.E_u @ u.T).ravel(), (tc.bound_y - tc.E_y @ y.T).ravel()])

    res = minimize(cost, np.zeros(nx + N * m), method="SLSQP",
                   constraints=[{"type": "eq", "fun": eq}, {"type": "ineq", "fun": ineq}],
                   options={"ftol": 1e-14, "maxiter": 1000})
    assert res.success, res.message
    return split(res.x)[1], res.fun


@pytest.mark.parametrize("seed", range(4))
def test_condensed_matches_uncondensed(seed):
    rng = np.random.default_rng(seed)
    model = random_minimal_model(rng, 2, 1, 1, sigma_w=0.01, sigma_v=0.01)
    N = 5
    spec = PolytopeSpec.box(1, 1, 0.6, 0.3)
    sig = [0.01 * np.eye(1)] * N
    tc = tighten(spec, uniform_allocation(spec, N), sig, sig)
    mu, refs = rng.normal(size=2) * 0.1, np.full((N, 1), 0.5)  # reference outside the box
    Q, R = np.eye(1) * 10, np.eye(1)
    sol = solve_qp(build_smpc_qp(model, mu, tc, Q, R, refs, N))
    u_ref, J_ref = _uncondensed_solution(model, mu, tc, Q, R, refs, N)
    prob = NominalProblem(model, mu, sig, sig, Q, R, refs, spec, N)
    assert prob.cost(sol.x) == pytest.approx(J_ref, rel=1e-6, abs=1e-8)
    assert np.allclose(sol.x, u_ref.ravel(), atol=1e-5)


def test_condense_matches_simulation():
    rng = np.random.default_rng(9)
    model = random_minimal_model(rng, 3, 2, 2)
    N = 6
    pred = condense(model, N)
    mu, U = rng.normal(size=3), rng.normal(size=(N, 2))
    x, xs, ys = mu.copy(), [mu.copy()], []
    for t in range(N):
        ys.append(model.C @ x)
        x = model.A @ x + model.B @ U[t]
        xs.append(x.copy())
    assert np.allclose(pred.Sx @ mu + pred.Su @ U.ravel(), np.concatenate(xs), atol=1e-12)
    assert np.allclose(pred.Psi @ mu + pred.Theta @ U.ravel(), np.concatenate(ys), atol=1e-12)


# -- IRA ----------------------------------------------------------------------


def _toy_problem(N=3, ref=0.5, sig_y=0.05, p_y=0.2, u_max=2.0, y_max=0.4, mu=0.0):
    model = LtiModel([[0.5]], [[1.0]], [[1.0]], [[0.0]], [[1.0]])
    spec = PolytopeSpec.box(1, 1, u_max, y_max, 0.2, p_y)
    Su = [0.01 * np.eye(1)] * N
    Sy = [sig_y * np.eye(1)] * N
    return NominalProblem(model, [mu], Su, Sy, 10 * np.eye(1), np.eye(1), np.full((N, 1), ref), spec, N)


def _check_history(res, spec):
    costs = [h.cost for h in res.history]
    for h in res.history:
        assert np.all(h.allocation.p_u > 0) and np.all(h.allocation.p_y > 0)
        assert np.max(np.abs(h.allocation.p_u.sum(axis=0) - spec.p_u)) <= 1e-12
        assert np.max(np.abs(h.allocation.p_y.sum(axis=0) - spec.p_y)) <= 1e-12
    assert all(b <= a + 1e-6 for a, b in zip(costs, costs[1:]))


def test_ira_improves_on_uniform_and_conserves_budget():
    prob = _toy_problem()
    res = iterative_risk_allocation(prob)
    _check_history(res, prob.spec)
    assert res.cost < res.history[0].cost
    assert res.history[0].allocation.p_y[0, 0] == pytest.approx(0.1)
    assert np.all(res.allocation.p_y[0, 1:] > 0.1)  # upper rows received the freed risk


def test_ira_single_row_equals_single_qp():
    model = scalar_model(a=0.5)
    spec = PolytopeSpec([[1.0]], [1.0], [[1.0]], [0.3], 0.2, 0.2)
    N = 4
    sig = [0.02 * np.eye(1)] * N
    prob = NominalProblem(model, [0.0], sig, sig, np.eye(1) * 10, np.eye(1), np.full((N, 1), 1.0), spec, N)
    res = iterative_risk_allocation(prob)
    single = solve_qp(prob.qp(prob.tighten(uniform_allocation(spec, N))))
    assert res.iterations == 1
    assert np.array_equal(res.u_nom.ravel(), single.x)
    assert np.array_equal(res.allocation.p_y, uniform_allocation(spec, N).p_y)


def test_ira_no_active_rows_keeps_optimizer():
    prob = _toy_problem(ref=0.0, mu=0.1, y_max=5.0, u_max=5.0)
    res = iterative_risk_allocation(prob)
    assert not any(h.active_u.any() or h.active_y.any() for h in res.history)
    single = solve_qp(prob.qp(prob.tighten(uniform_allocation(prob.spec, prob.N))))
    assert np.allclose(res.u_nom.ravel(), single.x, atol=1e-12)


def test_update_risk_moves_inactive_rows_toward_tail():
    E, f = np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    p = np.array([[0.1], [0.1]])
    active = np.array([[True], [False]])
    z = np.array([[0.9]])
    out = update_risk(p, active, z, [np.eye(1) * 0.01], 0.2, E, f, 0.7)
    from sddpc.numerics import cdfn

    tail = cdfn(-(1.0 + 0.9) / 0.1)
    assert out[1, 0] == pytest.approx(max(0.7 * 0.1 + 0.3 * tail, 1e-9))
    assert out[:, 0].sum() == pytest.approx(0.2, abs=1e-15)


def test_update_risk_floor():
    E, f = np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    p = np.array([[0.2 - 1e-12], [1e-12]])
    out = update_risk(p, np.array([[True], [False]]), np.array([[1.0]]), [np.eye(1) * 1e-6],
                      0.2, E, f, 0.7)
    assert out[1, 0] == 1e-9


def test_ira_matches_grid_search_oracle():
    """Two symmetric output rows, reference near the upper bound."""
    prob = _toy_problem(N=2, ref=0.5, sig_y=0.05)
    res = iterative_risk_allocation(prob, max_iter=200)

    def cost_for(p_up):
        base = uniform_allocation(prob.spec, prob.N)
        py = base.p_y.copy()
        py[:, 1] = [p_up, 0.2 - p_up]
        sol = solve_qp(prob.qp(prob.tighten(RiskAllocation(base.p_u, py))))
        return prob.cost(sol.x)

    def feasible_costs(ps):
        out = []
        for p in ps:
            try:
                out.append(cost_for(p))
            except Infeasible:
                pass
        return out

    uniform = cost_for(0.1)
    grid = min(feasible_costs(np.arange(0.01, 0.2, 0.01)))
    fine = min(feasible_costs(np.linspace(1e-6, 0.2 - 1e-6, 4001)))
    assert uniform - res.cost >= 0
    assert res.cost <= grid + 1e-9
    # no allocation does meaningfully better than the IRA answer
    assert res.cost >= fine * (1 - 1e-3)


def test_ira_cap_carries_last_iterate():
    prob = _toy_problem()
    with pytest.raises(MaxOuterIter) as info:
        iterative_risk_allocation(prob, max_iter=1, eps=0.0)
    assert info.value.result.iterations == 1
    assert info.value.result.u_nom.shape == (prob.N, 1)


def test_ira_surfaces_infeasibility():
    prob = _toy_problem(mu=3.0)  # initial output far above the bound
    with pytest.raises(Infeasible):
        iterative_risk_allocation(prob)


def test_ira_argument_checks():
    with pytest.raises(ValueError):
        iterative_risk_allocation(_toy_problem(), alpha=1.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.8, 0.8), st.floats(0.005, 0.2), st.floats(0.05, 0.5))
def test_ira_invariants_property(ref, sig_y, p_y):
    prob = _toy_problem(N=4, ref=ref, sig_y=sig_y, p_y=p_y)
    try:
        res = iterative_risk_allocation(prob, max_iter=100)
    except MaxOuterIter as exc:
        res = exc.result
    except Infeasible:
        return
    _check_history(res, prob.spec)
