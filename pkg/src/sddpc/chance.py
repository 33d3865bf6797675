"""Chance constraints: risk splitting, quantile tightening, the condensed
nominal QP and Iterative Risk Allocation (IRA)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import QpProblem, as_matrix, cdfn, icdfn, solve_qp
from .plant import LtiModel

ACTIVE_RTOL = 1e-7
RISK_FLOOR = 1e-9


class MaxOuterIter(RuntimeError):
    """IRA hit its outer iteration cap; ``result`` holds the last iterate."""

    def __init__(self, msg: str, result: "IraResult"):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class PolytopeSpec:
    """Row-wise polytopes ``E_u u <= f_u`` and ``E_y y <= f_y`` with joint
    violation budgets ``p_u`` and ``p_y``."""

    E_u: np.ndarray
    f_u: np.ndarray
    E_y: np.ndarray
    f_y: np.ndarray
    p_u: float = 0.2
    p_y: float = 0.2

    def __post_init__(self):
        E_u, E_y = as_matrix(self.E_u, "E_u"), as_matrix(self.E_y, "E_y")
        f_u = np.asarray(self.f_u, float).reshape(-1)
        f_y = np.asarray(self.f_y, float).reshape(-1)
        if f_u.size != E_u.shape[0] or f_y.size != E_y.shape[0]:
            raise ValueError("E and f row counts disagree")
        for name, pr in (("p_u", self.p_u), ("p_y", self.p_y)):
            if not 0.0 < pr <= 0.5:
                raise ValueError(f"{name}={pr} must lie in (0, 1/2]")
        object.__setattr__(self, "E_u", E_u)
        object.__setattr__(self, "E_y", E_y)
        object.__setattr__(self, "f_u", f_u)
        object.__setattr__(self, "f_y", f_y)

    @property
    def q_u(self) -> int:
        return self.E_u.shape[0]

    @property
    def q_y(self) -> int:
        return self.E_y.shape[0]

    @classmethod
    def box(cls, m: int, p: int, u_max: float, y_max: float, p_u=0.2, p_y=0.2):
        """Symmetric box ``|u_i| <= u_max``, ``|y_i| <= y_max``."""
        pm = np.array([[1.0], [-1.0]])
        return cls(
            np.kron(np.eye(m), pm), np.full(2 * m, float(u_max)),
            np.kron(np.eye(p), pm), np.full(2 * p, float(y_max)),
            p_u, p_y,
        )


@dataclass(frozen=True)
class RiskAllocation:
    p_u: np.ndarray  # (q_u, N)
    p_y: np.ndarray  # (q_y, N)


@dataclass(frozen=True)
class TightenedConstraints:
    """Per-(row, time) bounds ``e_i^T z_t <= f_i + margin[i, t]``."""

    E_u: np.ndarray
    f_u: np.ndarray
    margin_u: np.ndarray
    E_y: np.ndarray
    f_y: np.ndarray
    margin_y: np.ndarray

    @property
    def bound_u(self) -> np.ndarray:
        return self.f_u[:, None] + self.margin_u

    @property
    def bound_y(self) -> np.ndarray:
        return self.f_y[:, None] + self.margin_y

    @property
    def N(self) -> int:
        return self.margin_u.shape[1]


def uniform_allocation(spec: PolytopeSpec, N: int) -> RiskAllocation:
    return RiskAllocation(
        np.full((spec.q_u, N), spec.p_u / spec.q_u),
        np.full((spec.q_y, N), spec.p_y / spec.q_y),
    )


def _row_std(E: np.ndarray, Sigmas) -> np.ndarray:
    """``sqrt(e_i^T Sigma_t e_i)`` laid out as (rows, N)."""
    return np.sqrt(np.clip(
        np.stack([np.einsum("ij,jk,ik->i", E, S, E) for S in Sigmas], axis=1),
        0.0, None,
    ))


def tighten(
    spec: PolytopeSpec, alloc: RiskAllocation, Sigma_u_t, Sigma_y_t
) -> TightenedConstraints:
    """Deterministic surrogate of the individual chance constraints.

    A risk below one half yields a negative quantile, i.e. a tighter bound.
    """
    sd_u = _row_std(spec.E_u, Sigma_u_t)
    sd_y = _row_std(spec.E_y, Sigma_y_t)
    return TightenedConstraints(
        spec.E_u, spec.f_u, sd_u * icdfn(alloc.p_u),
        spec.E_y, spec.f_y, sd_y * icdfn(alloc.p_y),
    )


def deterministic_constraints(spec: PolytopeSpec, N: int) -> TightenedConstraints:
    """Hard constraints on every step (zero margins)."""
    return TightenedConstraints(
        spec.E_u, spec.f_u, np.zeros((spec.q_u, N)),
        spec.E_y, spec.f_y, np.zeros((spec.q_y, N)),
    )


# ----------------------------------------------------------------------
# Condensed nominal prediction and QP
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    """Stacked nominal maps: ``X = Sx mu + Su U`` (N+1 blocks) and
    ``Y = Psi mu + Theta U`` (N blocks), with ``U`` time-major."""

    Sx: np.ndarray
    Su: np.ndarray
    Psi: np.ndarray
    Theta: np.ndarray
    n: int
    m: int
    p: int
    N: int


def condense(model: LtiModel, N: int) -> Prediction:
    A, B, C = model.A, model.B, model.C
    n, m, p = model.n, model.m, model.p
    Sx = np.zeros(((N + 1) * n, n))
    Su = np.zeros(((N + 1) * n, N * m))
    Sx[:n] = np.eye(n)
    for t in range(1, N + 1):
        rows, prev = slice(t * n, (t + 1) * n), slice((t - 1) * n, t * n)
        Sx[rows] = A @ Sx[prev]
        Su[rows] = A @ Su[prev]
        Su[rows, (t - 1) * m:t * m] += B
    Cbar = np.kron(np.eye(N), C)
    return Prediction(Sx, Su, Cbar @ Sx[:N * n], Cbar @ Su[:N * n], n, m, p, N)


def _refs_array(refs, N: int, p: int) -> np.ndarray:
    r = np.asarray(refs, float)
    if r.ndim <= 1:
        r = np.broadcast_to(r.reshape(1, -1), (N, p))
    if r.shape != (N, p):
        raise ValueError(f"reference must have shape ({N}, {p}), got {r.shape}")
    return np.array(r)


def build_smpc_qp(
    model: LtiModel,
    mu,
    tightened: TightenedConstraints,
    Q,
    R,
    refs,
    N: int,
    *,
    prediction: Prediction | None = None,
) -> QpProblem:
    """Condensed nominal QP over ``u_nom`` (time-major stack).

    The nominal states are eliminated through the noise-free recursion
    started at the prior mean; the tightened rows become linear
    inequalities on ``u_nom``.
    """
    pred = prediction or condense(model, N)
    m, p = model.m, model.p
    mu = np.asarray(mu, float).reshape(-1)
    Q, R = as_matrix(Q, "Q"), as_matrix(R, "R")
    r = _refs_array(refs, N, p).reshape(-1)
    Qbar = np.kron(np.eye(N), Q)
    Rbar = np.kron(np.eye(N), R)
    Th = pred.Theta
    free = pred.Psi @ mu - r
    H = 2.0 * (Th.T @ Qbar @ Th + Rbar)
    f = 2.0 * Th.T @ (Qbar @ free)
    Gu = np.kron(np.eye(N), tightened.E_u)
    hu = tightened.bound_u.T.reshape(-1)
    Ey = np.kron(np.eye(N), tightened.E_y)
    Gy = Ey @ Th
    hy = tightened.bound_y.T.reshape(-1) - Ey @ (pred.Psi @ mu)
    return QpProblem(0.5 * (H + H.T), f, np.vstack([Gu, Gy]), np.concatenate([hu, hy]))


def _row_slacks(E, bound, Z) -> np.ndarray:
    """``bound[i, t] - e_i^T z_t`` as (rows, N)."""
    return bound - E @ Z.T


@dataclass
class NominalProblem:
    """Everything the nominal QP needs at one control step.

    ``Sigma_u`` / ``Sigma_y`` are the (decision-independent) input/output
    covariances along the horizon.
    """

    model: LtiModel
    mu: np.ndarray
    Sigma_u: list
    Sigma_y: list
    Q: np.ndarray
    R: np.ndarray
    refs: np.ndarray
    spec: PolytopeSpec
    N: int
    prediction: Prediction | None = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, float).reshape(-1)
        self.Q, self.R = as_matrix(self.Q), as_matrix(self.R)
        self.refs = _refs_array(self.refs, self.N, self.model.p)
        if self.prediction is None:
            self.prediction = condense(self.model, self.N)

    def tighten(self, alloc: RiskAllocation) -> TightenedConstraints:
        return tighten(self.spec, alloc, self.Sigma_u, self.Sigma_y)

    def qp(self, tc: TightenedConstraints) -> QpProblem:
        return build_smpc_qp(
            self.model, self.mu, tc, self.Q, self.R, self.refs, self.N,
            prediction=self.prediction,
        )

    def nominal(self, U) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(u_nom (N,m), y_nom (N,p), x_nom (N+1,n))`` for stacked ``U``."""
        U = np.asarray(U, float).reshape(-1)
        pr = self.prediction
        X = (pr.Sx @ self.mu + pr.Su @ U).reshape(self.N + 1, pr.n)
        Y = (pr.Psi @ self.mu + pr.Theta @ U).reshape(self.N, pr.p)
        return U.reshape(self.N, pr.m), Y, X

    def cost(self, U) -> float:
        u, y, _ = self.nominal(U)
        e = y - self.refs
        return float(
            np.einsum("ti,ij,tj->", e, self.Q, e) + np.einsum("ti,ij,tj->", u, self.R, u)
        )

    def active(self, tc: TightenedConstraints, U) -> tuple[np.ndarray, np.ndarray]:
        u, y, _ = self.nominal(U)
        su = _row_slacks(tc.E_u, tc.bound_u, u)
        sy = _row_slacks(tc.E_y, tc.bound_y, y)
        act_u = su <= ACTIVE_RTOL * (1.0 + np.abs(tc.f_u))[:, None]
        act_y = sy <= ACTIVE_RTOL * (1.0 + np.abs(tc.f_y))[:, None]
        return act_u, act_y


# ----------------------------------------------------------------------
# Iterative Risk Allocation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class IraStep:
    allocation: RiskAllocation
    cost: float
    active_u: np.ndarray
    active_y: np.ndarray


@dataclass
class IraResult:
    u_nom: np.ndarray  # (N, m)
    allocation: RiskAllocation
    cost: float
    iterations: int
    history: list[IraStep] = field(default_factory=list)


def update_risk(
    p, active, z_nom, Sigmas, budget: float, E, f, alpha: float,
    floor: float = RISK_FLOOR,
) -> np.ndarray:
    """One IRA reallocation for a single constraint family.

    At every step with a mix of active and inactive rows, inactive rows
    shrink toward their actual tail probability and the freed risk is
    shared equally among the active rows.
    """
    p = np.array(p, float)
    q, N = p.shape
    sd = _row_std(E, Sigmas)
    for t in range(N):
        a_t = active[:, t]
        n_act = int(a_t.sum())
        if not 0 < n_act < q:
            continue
        for i in np.flatnonzero(~a_t):
            gap = f[i] - E[i] @ z_nom[t]
            if sd[i, t] > 0:
                tail = cdfn(-gap / sd[i, t])
            else:
                tail = 0.0 if gap >= 0 else 1.0
            p[i, t] = max(alpha * p[i, t] + (1.0 - alpha) * tail, floor)
        residual = budget - p[:, t].sum()
        p[a_t, t] += residual / n_act
    return p


def iterative_risk_allocation(
    problem: NominalProblem,
    *,
    alpha: float = 0.7,
    eps: float = 1e-6,
    max_iter: int = 50,
    initial: RiskAllocation | None = None,
) -> IraResult:
    """Solve the chance-constrained nominal problem by alternating QP solves
    and risk reallocation.

    Raises:
        Infeasible: from the QP solver.
        MaxOuterIter: after ``max_iter`` solves without termination.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    spec, N = problem.spec, problem.N
    alloc = initial or uniform_allocation(spec, N)
    J_prev = math.inf
    history: list[IraStep] = []
    result = None
    for it in range(1, max_iter + 1):
        tc = problem.tighten(alloc)
        sol = solve_qp(problem.qp(tc))
        cost = problem.cost(sol.x)
        act_u, act_y = problem.active(tc, sol.x)
        history.append(IraStep(alloc, cost, act_u, act_y))
        u_nom, y_nom, _ = problem.nominal(sol.x)
        result = IraResult(u_nom, alloc, cost, it, history)
        if abs(J_prev - cost) <= eps:
            return result
        J_prev = cost
        su, sy = act_u.sum(axis=0), act_y.sum(axis=0)
        if np.all((su == 0) | (su == spec.q_u)) and np.all((sy == 0) | (sy == spec.q_y)):
            return result
        alloc = RiskAllocation(
            update_risk(alloc.p_u, act_u, u_nom, problem.Sigma_u, spec.p_u,
                        spec.E_u, spec.f_u, alpha),
            update_risk(alloc.p_y, act_y, y_nom, problem.Sigma_y, spec.p_y,
                        spec.E_y, spec.f_y, alpha),
        )
    raise MaxOuterIter(f"IRA did not terminate in {max_iter} iterations", result)
