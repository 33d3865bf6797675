import numpy as np
import pytest

from sddpc.chance import PolytopeSpec
from sddpc.controllers import (
    ControllerInfeasible,
    HorizonConfig,
    ReferenceSchedule,
    deepc_controller,
    future_blocks,
    mpc_controller,
    sddpc_controller,
    smpc_controller,
    spc_controller,
)
from sddpc.datadriven import OfflineData, default_sigma_rho, partition
from sddpc.estimation import GaussianBelief
from sddpc.plant import (
    LtiModel,
    random_minimal_model,
    sample_noise,
    simulate_closed_loop,
    simulate_open_loop,
    zero_noise,
)

from helpers import noise_free_data, rel_dev, scalar_model, twin_setup

BIG = 1e6


def _scalar(sw=0.0, sv=1e-2, a=0.8):
    return LtiModel([[a]], [[1.0]], [[1.0]], [[sw]], [[sv]])


# -- configuration objects ----------------------------------------------------


def test_horizon_config_validation():
    assert HorizonConfig() == HorizonConfig(10, 30, 10)
    for bad in ((0, 5, 1), (2, 5, 0), (2, 5, 6)):
        with pytest.raises(ValueError):
            HorizonConfig(*bad)


def test_reference_schedule():
    r = ReferenceSchedule([(10, 2.0), (0, 1.0)])
    assert r.at(0)[0] == 1.0 and r.at(9)[0] == 1.0 and r.at(10)[0] == 2.0 and r.at(999)[0] == 2.0
    assert np.array_equal(r.window(8, 4).ravel(), [1, 1, 2, 2])
    assert r.to_json() == [[0, [1.0]], [10, [2.0]]]
    with pytest.raises(ValueError):
        ReferenceSchedule([(5, 1.0)]).at(0)
    with pytest.raises(ValueError):
        ReferenceSchedule([(0, [1.0, 2.0]), (3, [1.0])])
    with pytest.raises(ValueError):
        ReferenceSchedule.coerce(ReferenceSchedule.constant([0.0, 0.0]), 1)
    assert np.array_equal(ReferenceSchedule.coerce(0.5, 2).at(3), [0.5, 0.5])


# -- trivial zero cases --------------------------------------------------------


def _zero_run(ctrl, model, T=12):
    return simulate_closed_loop(model, ctrl, np.zeros(model.n), zero_noise(model, T), T)


def test_all_controllers_stay_at_origin():
    model = _scalar()
    cfg = HorizonConfig(2, 6, 2)
    spec = PolytopeSpec.box(1, 1, 0.6, 0.4)
    data = noise_free_data(model, 80, np.random.default_rng(0))
    Q, R = np.eye(1) * 100, np.eye(1)
    prior = GaussianBelief([0.0], [[1e-3]])
    ctrls = [
        smpc_controller(model, cfg, spec, Q, R, 0.0, prior),
        mpc_controller(model, cfg, spec, Q, R, 0.0, prior),
        sddpc_controller(data, cfg, spec, Q, R, 0.0, default_sigma_rho(2, 1), model.Sigma_v),
        deepc_controller(data, cfg, spec, Q, R, 0.0),
        spc_controller(data, cfg, spec, Q, R, 0.0),
    ]
    for ctrl in ctrls:
        tr = _zero_run(ctrl, model)
        assert np.max(np.abs(tr.u_seq)) <= 1e-12, ctrl.name
        assert np.max(np.abs(tr.y_seq)) <= 1e-12, ctrl.name


# -- SMPC ---------------------------------------------------------------------


def _lq_oracle(model, mu, Q, R, r, N):
    """Unconstrained finite-horizon tracking by stacked least squares."""
    n, m = model.n, model.m
    rows_y, rows_mu = [], []
    for t in range(N):
        # y_t = C A^t mu + sum_{s<t} C A^{t-1-s} B u_s
        row = np.zeros((model.p, N * m))
        for s in range(t):
            row[:, s * m:(s + 1) * m] = model.C @ np.linalg.matrix_power(model.A, t - 1 - s) @ model.B
        rows_y.append(row)
        rows_mu.append(model.C @ np.linalg.matrix_power(model.A, t) @ mu)
    Th, free = np.vstack(rows_y), np.concatenate(rows_mu)
    Lq, Lr = np.linalg.cholesky(Q).T, np.linalg.cholesky(R).T
    Aq = np.vstack([np.kron(np.eye(N), Lq) @ Th, np.kron(np.eye(N), Lr)])
    b = np.concatenate([np.kron(np.eye(N), Lq) @ (np.tile(r, N) - free), np.zeros(N * m)])
    return np.linalg.lstsq(Aq, b, rcond=None)[0].reshape(N, m)


def test_smpc_unconstrained_matches_lq_tracking():
    rng = np.random.default_rng(1)
    model = random_minimal_model(rng, 2, 1, 1, sigma_w=0.0, sigma_v=1e-2)
    cfg = HorizonConfig(2, 8, 3)
    spec = PolytopeSpec.box(1, 1, BIG, BIG)
    Q, R, r = np.eye(1) * 5, np.eye(1), np.array([0.7])
    x0 = rng.normal(size=2)
    ctrl = smpc_controller(model, cfg, spec, Q, R, r, GaussianBelief(x0, np.zeros((2, 2))))
    tr = simulate_closed_loop(model, ctrl, x0, zero_noise(model, 9), 9)
    for k in (0, 3, 6):
        oracle = _lq_oracle(model, tr.x_seq[k], Q, R, r, cfg.N)
        assert np.allclose(tr.u_seq[k:k + 3], oracle[:3], atol=1e-8)


def test_smpc_determinism_and_replay():
    model = _scalar(sw=1e-3, sv=1e-3)
    cfg = HorizonConfig(2, 6, 2)
    spec = PolytopeSpec.box(1, 1, 0.6, 0.4)
    prior = GaussianBelief([0.1], [[1e-3]])
    noise = sample_noise(model, 10, seed=4)

    def run():
        ctrl = smpc_controller(model, cfg, spec, np.eye(1) * 100, np.eye(1), 0.35, prior)
        return ctrl, simulate_closed_loop(model, ctrl, [0.1], noise, 10)

    c1, a = run()
    _, b = run()
    assert np.array_equal(a.u_seq, b.u_seq) and np.array_equal(a.x_seq, b.x_seq)
    for rec in c1.log.steps:
        plan = c1.plans[rec.k]
        assert np.array_equal(plan.input(rec.t - rec.k, rec.xhat), rec.u)


def test_smpc_bookkeeping_matches_independent_filter():
    rng = np.random.default_rng(2)
    model = random_minimal_model(rng, 2, 1, 1, sigma_w=1e-3, sigma_v=1e-3)
    cfg = HorizonConfig(2, 6, 3)
    spec = PolytopeSpec.box(1, 1, 0.6, 0.4)
    prior = GaussianBelief(np.zeros(2), 1e-3 * np.eye(2))
    ctrl = smpc_controller(model, cfg, spec, np.eye(1) * 100, np.eye(1), 0.2, prior)
    seen = []
    ctrl.hooks.append(seen.append)
    tr = simulate_closed_loop(model, ctrl, np.zeros(2), sample_noise(model, 12, seed=1), 12)
    assert seen == [0, 3, 6, 9] and sorted(ctrl.beliefs) == seen
    # textbook filter run over the same data
    A, B, C, Sw, Sv = model.A, model.B, model.C, model.Sigma_w, model.Sigma_v
    mu, P = prior.mu.copy(), prior.Sigma.copy()
    for t in range(12):
        if t in ctrl.beliefs:
            assert np.allclose(ctrl.beliefs[t].mu, mu, atol=1e-12)
            assert np.allclose(ctrl.beliefs[t].Sigma, P, atol=1e-12)
        Lg = P @ C.T @ np.linalg.inv(C @ P @ C.T + Sv)
        xh = mu + Lg @ (tr.y_seq[t] - C @ mu)
        P = (np.eye(2) - Lg @ C) @ P
        mu, P = A @ xh + B @ tr.u_seq[t], A @ P @ A.T + Sw
    for k, plan in ctrl.plans.items():
        # nominal states obey the noise-free recursion
        for j in range(cfg.N):
            assert np.allclose(plan.x_nom[j + 1], A @ plan.x_nom[j] + B @ plan.u_nom[j], atol=1e-12)


def test_mpc_equals_smpc_nominal_without_feedback():
    rng = np.random.default_rng(3)
    model = random_minimal_model(rng, 3, 2, 2, sigma_w=1e-2, sigma_v=1e-2)
    cfg = HorizonConfig(2, 6, 2)
    spec = PolytopeSpec.box(2, 2, BIG, BIG)
    prior = GaussianBelief(rng.normal(size=3), 1e-2 * np.eye(3))
    args = (model, cfg, spec, np.eye(2) * 10, np.eye(2), [0.3, -0.2], prior)
    a = mpc_controller(*args).plan(0)
    b = smpc_controller(*args, K=np.zeros((2, 3))).plan(0)
    assert np.allclose(a.u_nom, b.u_nom, atol=1e-9)


def test_mpc_saturates_at_output_bound():
    model = _scalar(a=0.5)
    cfg = HorizonConfig(1, 8, 2)
    spec = PolytopeSpec.box(1, 1, 5.0, 0.4)
    ctrl = mpc_controller(model, cfg, spec, np.eye(1) * 100, np.eye(1), 1.0, GaussianBelief([0.0], [[0.0]]))
    tr = simulate_closed_loop(model, ctrl, [0.0], zero_noise(model, 20), 20)
    assert np.all(tr.y_seq <= 0.4 + 1e-9)
    # steady state: y pinned to the bound (unconstrained optimum lies above it)
    assert tr.y_seq[-1, 0] == pytest.approx(0.4, abs=1e-8)
    assert ctrl.log.count("infeasible") == 0


def test_infeasible_first_step_fallback_and_raise():
    model = _scalar(a=0.5)
    cfg = HorizonConfig(1, 4, 2)
    spec = PolytopeSpec.box(1, 1, 1.0, 0.4)
    prior = GaussianBelief([3.0], [[1e-4]])  # current output far outside the bound
    ctrl = smpc_controller(model, cfg, spec, np.eye(1), np.eye(1), 0.0, prior)
    tr = simulate_closed_loop(model, ctrl, [3.0], zero_noise(model, 6), 6)
    ev = [e for e in ctrl.log.events if e["kind"] == "infeasible"]
    assert ev[0] == {"t": 0, "kind": "infeasible", "fallback": "zero"}
    assert np.all(np.isfinite(tr.u_seq))
    ctrl = smpc_controller(model, cfg, spec, np.eye(1), np.eye(1), 0.0, prior, on_infeasible="raise")
    with pytest.raises(ControllerInfeasible) as info:
        simulate_closed_loop(model, ctrl, [3.0], zero_noise(model, 6), 6)
    assert info.value.control_step == 0


def test_fallback_holds_previous_plan():
    model = _scalar(a=0.5)
    cfg = HorizonConfig(1, 4, 2)
    spec = PolytopeSpec.box(1, 1, 1.0, 0.4)
    ctrl = mpc_controller(model, cfg, spec, np.eye(1), np.eye(1), 0.2, GaussianBelief([0.0], [[0.0]]))
    first = ctrl.plan(0).u_nom.copy()
    ctrl._xm = np.array([5.0])  # belief jump makes the next QP infeasible
    second = ctrl.plan(2).u_nom
    assert np.array_equal(second, np.vstack([first[2:], first[-1:], first[-1:]]))
    assert ctrl.log.events[-1]["fallback"] == "hold"


def test_controller_argument_checks():
    model = _scalar()
    cfg = HorizonConfig(1, 4, 2)
    spec = PolytopeSpec.box(1, 1, 1.0, 0.4)
    prior = GaussianBelief([0.0], [[0.0]])
    with pytest.raises(ValueError):
        smpc_controller(model, cfg, spec, np.eye(2), np.eye(1), 0.0, prior)
    with pytest.raises(ValueError):
        smpc_controller(model, cfg, spec, np.eye(1), np.zeros((1, 1)), 0.0, prior)
    with pytest.raises(ValueError):
        smpc_controller(model, cfg, spec, np.eye(1), np.eye(1), 0.0, prior, on_infeasible="skip")
    with pytest.raises(TypeError):
        sddpc_controller(np.zeros((4, 2)), cfg, spec, np.eye(1), np.eye(1), 0.0, np.eye(1), np.eye(1))


# -- SDDPC --------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_sddpc_matches_smpc_on_matched_twin(seed):
    s = twin_setup(seed)
    noise = sample_noise(s.model, 8, seed=seed)
    smpc = smpc_controller(s.model, s.cfg, s.spec, s.Q, s.R, s.refs, s.prior)
    sddpc = sddpc_controller(s.data, s.cfg, s.spec, s.Q, s.R, s.refs, s.Sigma_rho,
                             s.model.Sigma_v, s.aux_prior)
    a = simulate_closed_loop(s.model, smpc, s.x0, noise, 8)
    b = simulate_closed_loop(s.model, sddpc, s.x0, noise, 8)
    for f in ("x_seq", "u_seq", "y_seq"):
        assert rel_dev(getattr(a, f), getattr(b, f)) <= 1e-6


def test_sddpc_accepts_partitioned_data():
    s = twin_setup(0)
    dm = partition(s.data, s.L)
    c = sddpc_controller(dm, s.cfg, s.spec, s.Q, s.R, s.refs, s.Sigma_rho, s.model.Sigma_v)
    assert c.model.n == s.model.m * s.L + s.model.p * s.L + s.model.p * s.L**2
    with pytest.raises(ValueError):
        sddpc_controller(dm, HorizonConfig(s.L + 1, 6, 2), s.spec, s.Q, s.R, s.refs,
                         s.Sigma_rho, s.model.Sigma_v)


def test_sddpc_tikhonov_noisy_data_stays_bounded():
    model = _scalar(sw=1e-3, sv=1e-3, a=0.9)
    rng = np.random.default_rng(5)
    u = rng.standard_normal((300, 1))
    data_tr = simulate_open_loop(model, [0.0], u, sample_noise(model, 300, seed=99))
    data = OfflineData(data_tr.u_seq, data_tr.y_seq)
    cfg = HorizonConfig(2, 10, 3)
    spec = PolytopeSpec.box(1, 1, 0.6, 0.4)
    ctrl = sddpc_controller(data, cfg, spec, np.eye(1) * 100, np.eye(1),
                            ReferenceSchedule([(0, 0.3), (100, -0.3)]),
                            default_sigma_rho(2, 1), model.Sigma_v, recovery="tikhonov")
    tr = simulate_closed_loop(model, ctrl, [0.0], sample_noise(model, 200, seed=7), 200)
    assert np.all(np.isfinite(tr.y_seq))
    assert np.max(np.abs(tr.y_seq)) < 1.0
    assert np.mean(np.abs(tr.y_seq[80:100] - 0.3)) < 0.1


# -- DeePC / SPC --------------------------------------------------------------


def _bench_setup(T=120, seed=6):
    model = _scalar(a=0.7)
    data = noise_free_data(model, T, np.random.default_rng(seed))
    cfg = HorizonConfig(2, 6, 2)
    spec = PolytopeSpec.box(1, 1, 2.0, 1.0)
    return model, data, cfg, spec


def test_future_blocks_shapes():
    _, data, cfg, _ = _bench_setup()
    Up, Uf, Yp, Yf = future_blocks(data, cfg.L, cfg.N)
    h = data.T - cfg.L - cfg.N + 1
    assert Up.shape == (2, h) and Uf.shape == (6, h) and Yp.shape == (2, h) and Yf.shape == (6, h)


def test_spc_predictor_shape_and_accuracy():
    model, data, cfg, spec = _bench_setup()
    ctrl = spc_controller(data, cfg, spec, np.eye(1), np.eye(1), 0.0, lam=1e-10)
    assert ctrl.P.shape == (cfg.N, cfg.L + cfg.L + cfg.N)
    rng = np.random.default_rng(8)
    u = rng.normal(size=(cfg.L + cfg.N, 1))
    tr = simulate_open_loop(model, [0.3], u, zero_noise(model, cfg.L + cfg.N))
    pred = ctrl.predict(u[:cfg.L].ravel(), tr.y_seq[:cfg.L].ravel(), u[cfg.L:])
    assert np.max(np.abs(pred - tr.y_seq[cfg.L:].ravel())) <= 1e-6


def test_deepc_matches_spc_with_exact_data():
    model, data, cfg, spec = _bench_setup()
    r = ReferenceSchedule.constant(0.5)
    spc = spc_controller(data, cfg, spec, np.eye(1) * 10, np.eye(1), r, lam=1e-10)
    deepc = deepc_controller(data, cfg, spec, np.eye(1) * 10, np.eye(1), r, lambda_y=1e8, lambda_g=0.0)
    # identical nonzero history
    hist_u = np.array([0.4, -0.2])
    hist = simulate_open_loop(model, [0.1], hist_u, zero_noise(model, 2))
    for c in (spc, deepc):
        for t in range(2):
            c.observe(t, hist.y_seq[t], hist_u[t:t + 1])
    ua = spc(2, model.C @ hist.x_seq[2])
    ub = deepc(2, model.C @ hist.x_seq[2])
    assert ua[0] == pytest.approx(ub[0], abs=1e-4)
    assert deepc.full_row_rank


def test_deepc_large_lambda_g_drives_inputs_to_zero():
    model, data, cfg, spec = _bench_setup()
    weak = deepc_controller(data, cfg, spec, np.eye(1) * 10, np.eye(1), 0.5, lambda_g=1.0)
    strong = deepc_controller(data, cfg, spec, np.eye(1) * 10, np.eye(1), 0.5, lambda_g=1e12)
    u_weak = weak(0, np.zeros(1))
    u_strong = strong(0, np.zeros(1))
    assert abs(u_strong[0]) < 1e-6 < abs(u_weak[0])
    with pytest.raises(ValueError):
        deepc_controller(data, cfg, spec, np.eye(1), np.eye(1), 0.5, lambda_g=-1.0)


def test_benchmarks_respect_hard_constraints_noise_free():
    model, data, cfg, _ = _bench_setup()
    spec = PolytopeSpec.box(1, 1, 2.0, 0.4)
    for make in (spc_controller, deepc_controller):
        ctrl = make(data, cfg, spec, np.eye(1) * 100, np.eye(1), 1.0)
        tr = simulate_closed_loop(model, ctrl, [0.0], zero_noise(model, 20), 20)
        assert np.max(tr.y_seq) <= 0.4 + 1e-3, ctrl.name
        assert np.max(np.abs(tr.u_seq)) <= 2.0 + 1e-9, ctrl.name


def test_benchmark_infeasibility_handling():
    model, data, cfg, _ = _bench_setup()
    spec = PolytopeSpec([[1.0], [-1.0]], [-1.0, -1.0], [[1.0]], [1.0])  # empty input set
    ctrl = spc_controller(data, cfg, spec, np.eye(1), np.eye(1), 0.0)
    u = ctrl(0, np.zeros(1))
    assert np.array_equal(u, [0.0]) and ctrl.log.count("infeasible") == 1
    ctrl = spc_controller(data, cfg, spec, np.eye(1), np.eye(1), 0.0, on_infeasible="raise")
    with pytest.raises(ControllerInfeasible):
        ctrl(0, np.zeros(1))
