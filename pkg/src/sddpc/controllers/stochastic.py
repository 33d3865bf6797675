"""Model-based receding-horizon engine with Kalman filtering.

One class serves three controllers:

* SMPC on the true model (affine feedback, chance constraints via IRA),
* SDDPC on the data-built auxiliary model (same loop, different model),
* deterministic MPC (zero feedback gain, hard constraints, one QP).
"""

from __future__ import annotations

import numpy as np

from ..chance import (
    MaxOuterIter,
    NominalProblem,
    PolytopeSpec,
    condense,
    deterministic_constraints,
    iterative_risk_allocation,
)
from ..datadriven import (
    DataMatrices,
    OfflineData,
    build_aux_model,
    partition,
    recover_quantities,
)
from ..estimation import (
    GaussianBelief,
    kalman_gain,
    kalman_schedule,
    kf_predict,
    kf_update,
    io_variances,
    propagate_joint_covariance,
)
from ..numerics import Infeasible, as_matrix, solve_dare, solve_qp, symmetrize
from ..plant import LtiModel
from .base import (
    ControllerInfeasible,
    HorizonConfig,
    PolicySchedule,
    PredictiveController,
    ReferenceSchedule,
)


def lqr_output_gain(model: LtiModel, Q, R) -> np.ndarray:
    """Infinite-horizon gain for stage cost ``y'Qy + u'Ru`` (noise-free output)."""
    Q, R = as_matrix(Q, "Q"), as_matrix(R, "R")
    return solve_dare(model.A, model.B, model.C.T @ Q @ model.C, R).K


class StochasticPredictiveController(PredictiveController):
    """Receding-horizon control over affine policies with a Kalman filter.

    Args:
        model: prediction model (true plant or auxiliary realization).
        cfg: horizons; only ``N`` and ``N_c`` are used here.
        spec: constraint polytopes and violation budgets.
        Q, R: output and input weights.
        refs: reference schedule (or a constant p-vector).
        prior: belief of the model state at the first control step.
        K: feedback gain; ``None`` selects the LQR gain.
        stochastic: ``False`` gives deterministic MPC (hard constraints,
            zero gain, a single QP per step).
    """

    name = "SMPC"

    def __init__(
        self,
        model: LtiModel,
        cfg: HorizonConfig,
        spec: PolytopeSpec,
        Q,
        R,
        refs,
        prior: GaussianBelief,
        *,
        K=None,
        stochastic: bool = True,
        alpha: float = 0.7,
        eps: float = 1e-6,
        max_iter: int = 50,
        on_infeasible: str = "hold",
    ):
        super().__init__(cfg, on_infeasible=on_infeasible)
        self.model = model
        self.spec = spec
        self.Q, self.R = as_matrix(Q, "Q"), as_matrix(R, "R")
        if self.Q.shape != (model.p, model.p) or self.R.shape != (model.m, model.m):
            raise ValueError("Q/R sizes do not match the model")
        if np.linalg.eigvalsh(self.R).min() <= 0:
            raise ValueError("R must be positive definite")
        self.refs = ReferenceSchedule.coerce(refs, model.p)
        self.stochastic = stochastic
        if K is None:
            K = lqr_output_gain(model, self.Q, self.R) if stochastic else np.zeros((model.m, model.n))
        self.K = as_matrix(K, "K").reshape(model.m, model.n)
        self.alpha, self.eps, self.max_iter = alpha, eps, max_iter
        self._prediction = condense(model, cfg.N)
        self._xm = prior.mu.copy()          # prior mean of the current step
        self._Pm = prior.Sigma.copy()       # prior covariance of the current step
        self.policy: PolicySchedule | None = None
        self.plans: dict[int, PolicySchedule] = {}
        self.beliefs: dict[int, GaussianBelief] = {}
        self._gains = None
        self._P_next = None
        self._last_xhat = None

    # -- planning -------------------------------------------------------

    @property
    def prior(self) -> GaussianBelief:
        return GaussianBelief(self._xm, self._Pm)

    def _problem(self, t: int, prior: GaussianBelief):
        N = self.cfg.N
        sched = kalman_schedule(self.model, prior, N)
        if self.stochastic:
            joint = propagate_joint_covariance(self.model, self.K, sched, prior, N)
            Su, Sy = io_variances(self.model, self.K, joint)
        else:
            Su = Sy = None
        prob = NominalProblem(
            self.model, prior.mu, Su, Sy, self.Q, self.R, self.refs.window(t, N),
            self.spec, N, self._prediction,
        )
        return sched, prob

    def _solve(self, t: int, prob: NominalProblem):
        if not self.stochastic:
            tc = deterministic_constraints(self.spec, prob.N)
            sol = solve_qp(prob.qp(tc))
            self.log.ira_iterations.append(0)
            return prob.nominal(sol.x)[0], prob.cost(sol.x)
        try:
            res = iterative_risk_allocation(
                prob, alpha=self.alpha, eps=self.eps, max_iter=self.max_iter
            )
        except MaxOuterIter as exc:
            res = exc.result
            self.log.event(t, "ira_max_iter", iterations=res.iterations)
        self.log.ira_iterations.append(res.iterations)
        return res.u_nom, res.cost

    def _plan(self, t: int) -> None:
        prior = self.prior
        self.beliefs[t] = prior
        sched, prob = self._problem(t, prior)
        try:
            u_nom, cost = self._solve(t, prob)
        except Infeasible as exc:
            if self.on_infeasible == "raise":
                raise ControllerInfeasible(f"control step {t}: {exc}", t) from exc
            u_nom, cost = self._fallback_plan(t), float("nan")
        _, y_nom, x_nom = prob.nominal(u_nom.reshape(-1))
        self.policy = PolicySchedule(t, u_nom, x_nom, y_nom, self.K, cost)
        self.plans[t] = self.policy
        self._gains = sched.gains
        self._P_next = sched.P_prior[self.cfg.N_c]

    def plan(self, t: int) -> PolicySchedule:
        """Plan a control step at time ``t`` from the current prior."""
        self._plan(t)
        return self.policy

    def _fallback_plan(self, t: int) -> np.ndarray:
        """Previous nominal inputs shifted by ``N_c`` (last entry repeated)."""
        N, Nc, m = self.cfg.N, self.cfg.N_c, self.model.m
        if self.policy is None:
            self.log.event(t, "infeasible", fallback="zero")
            return np.zeros((N, m))
        prev = self.policy.u_nom
        shifted = np.vstack([prev[Nc:], np.repeat(prev[-1:], Nc, axis=0)])
        self.log.event(t, "infeasible", fallback="hold", planned_at=self.policy.k)
        return shifted

    # -- online filtering -------------------------------------------------

    def _apply(self, t: int, j: int, y: np.ndarray) -> np.ndarray:
        xhat = kf_update(self._xm, y, self._gains[j], self.model)
        u = self.policy.input(j, xhat)
        self._last_xhat = xhat
        self._xm = kf_predict(xhat, u, self.model)
        if j + 1 == self.cfg.N_c:
            self._Pm = self._P_next
        return u

    def observe(self, t: int, y, u) -> None:
        """Kalman filtering while the controller is switched off."""
        if self._j < self.cfg.N_c:
            raise RuntimeError("observe() is only valid between control steps")
        m = self.model
        Lt = kalman_gain(m, self._Pm)
        xhat = kf_update(self._xm, y, Lt, m)
        P = symmetrize((np.eye(m.n) - Lt @ m.C) @ self._Pm)
        self._xm = kf_predict(xhat, u, m)
        self._Pm = symmetrize(m.A @ P @ m.A.T + m.Sigma_w)


def smpc_controller(model, cfg, spec, Q, R, refs, prior, **kw) -> StochasticPredictiveController:
    ctrl = StochasticPredictiveController(model, cfg, spec, Q, R, refs, prior, **kw)
    ctrl.name = "SMPC"
    return ctrl


def mpc_controller(model, cfg, spec, Q, R, refs, prior, **kw) -> StochasticPredictiveController:
    """Deterministic MPC: Kalman prior mean, hard constraints, open-loop inputs."""
    kw.setdefault("K", np.zeros((model.m, model.n)))
    ctrl = StochasticPredictiveController(
        model, cfg, spec, Q, R, refs, prior, stochastic=False, **kw
    )
    ctrl.name = "MPC"
    return ctrl


def sddpc_controller(
    data,
    cfg: HorizonConfig,
    spec: PolytopeSpec,
    Q,
    R,
    refs,
    Sigma_rho,
    Sigma_v,
    prior: GaussianBelief | None = None,
    *,
    recovery: str = "exact",
    lam: float = 1e-3,
    **kw,
) -> StochasticPredictiveController:
    """Data-driven controller: the same loop run on the auxiliary model.

    ``data`` is an :class:`OfflineData` trajectory or pre-partitioned
    :class:`DataMatrices`.  A missing ``prior`` means a zero auxiliary belief.
    """
    if not isinstance(data, (DataMatrices, OfflineData)):
        raise TypeError("data must be OfflineData or DataMatrices")
    dm = data if isinstance(data, DataMatrices) else partition(data, cfg.L)
    if dm.L != cfg.L:
        raise ValueError("data matrices were built with a different L")
    rq = recover_quantities(dm, recovery, lam)
    aux = build_aux_model(rq, Sigma_rho).to_lti(Sigma_v)
    if prior is None:
        prior = GaussianBelief.zero(aux.n)
    ctrl = StochasticPredictiveController(aux, cfg, spec, Q, R, refs, prior, **kw)
    ctrl.name = "SDDPC"
    return ctrl
