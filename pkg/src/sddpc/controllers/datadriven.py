"""Deterministic data-driven benchmarks: regularized DeePC and SPC.

Both keep rolling buffers of the last ``L`` inputs and outputs, solve one
QP per control step with hard constraints, and apply the first ``N_c``
planned inputs open loop.
"""

from __future__ import annotations

import numpy as np

from ..chance import PolytopeSpec
from ..datadriven import OfflineData, hankel
from ..numerics import Infeasible, QpProblem, as_matrix, pinv, solve_qp, tikhonov_solve
from .base import ControllerInfeasible, HorizonConfig, PredictiveController, ReferenceSchedule


def future_blocks(data: OfflineData, L: int, N: int):
    """``(U_p, U_f, Y_p, Y_f)`` from depth ``L + N`` Hankel matrices."""
    Hu = hankel(data.u_d, L + N)
    Hy = hankel(data.y_d, L + N)
    mL, pL = data.m * L, data.p * L
    return Hu[:mL], Hu[mL:], Hy[:pL], Hy[pL:]


def _constraint_rows(spec: PolytopeSpec, N: int):
    """Stacked hard constraints on ``vec(u_f)`` and ``vec(y_f)``."""
    Gu = np.kron(np.eye(N), spec.E_u)
    Gy = np.kron(np.eye(N), spec.E_y)
    return Gu, np.tile(spec.f_u, N), Gy, np.tile(spec.f_y, N)


class _BufferedController(PredictiveController):
    def __init__(self, cfg, spec, Q, R, refs, m, p, *, on_infeasible="hold"):
        super().__init__(cfg, on_infeasible=on_infeasible)
        self.spec = spec
        self.Q, self.R = as_matrix(Q, "Q"), as_matrix(R, "R")
        self.m, self.p = m, p
        self.refs = ReferenceSchedule.coerce(refs, p)
        self._u_buf = np.zeros((cfg.L, m))
        self._y_buf = np.zeros((cfg.L, p))
        self._plan_u: np.ndarray | None = None
        self.plans: dict[int, np.ndarray] = {}
        N = cfg.N
        self._Qbar = np.kron(np.eye(N), self.Q)
        self._Rbar = np.kron(np.eye(N), self.R)
        self._Gu, self._hu, self._Gy, self._hy = _constraint_rows(spec, N)

    def _push(self, u, y) -> None:
        self._u_buf = np.vstack([self._u_buf[1:], np.reshape(u, (1, self.m))])
        self._y_buf = np.vstack([self._y_buf[1:], np.reshape(y, (1, self.p))])

    def observe(self, t: int, y, u) -> None:
        self._push(u, y)

    def _plan(self, t: int) -> None:
        u_ini, y_ini = self._u_buf.reshape(-1), self._y_buf.reshape(-1)
        r = self.refs.window(t, self.cfg.N).reshape(-1)
        try:
            u_f = self._solve(u_ini, y_ini, r)
            self.log.ira_iterations.append(0)
        except Infeasible as exc:
            if self.on_infeasible == "raise":
                raise ControllerInfeasible(f"control step {t}: {exc}", t) from exc
            u_f = self._fallback(t)
        self._plan_u = u_f.reshape(self.cfg.N, self.m)
        self.plans[t] = self._plan_u

    def _fallback(self, t: int) -> np.ndarray:
        N, Nc = self.cfg.N, self.cfg.N_c
        if self._plan_u is None:
            self.log.event(t, "infeasible", fallback="zero")
            return np.zeros((N, self.m))
        prev = self._plan_u
        self.log.event(t, "infeasible", fallback="hold")
        return np.vstack([prev[Nc:], np.repeat(prev[-1:], Nc, axis=0)])

    def _apply(self, t: int, j: int, y: np.ndarray) -> np.ndarray:
        u = self._plan_u[j].copy()
        self._push(u, y)
        return u

    def _solve(self, u_ini, y_ini, r) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


class DeePCController(_BufferedController):
    """Regularized DeePC.

    The trajectory constraint is eliminated by writing
    ``g = U_p^+ u_ini + Z z`` with ``Z`` an orthonormal basis of the null space
    of ``U_p``; ``u_f = U_f g``, ``y_f = Y_f g`` and the output slack
    ``sigma_y = Y_p g - y_ini`` are then affine in ``z``.  When ``U_p`` lacks
    full row rank the same substitution picks the least-squares ``g``.
    """

    name = "DeePC"

    def __init__(self, data: OfflineData, cfg, spec, Q, R, refs, *,
                 lambda_y=1e6, lambda_g=1e3, on_infeasible="hold"):
        super().__init__(cfg, spec, Q, R, refs, data.m, data.p, on_infeasible=on_infeasible)
        if lambda_y < 0 or lambda_g < 0:
            raise ValueError("regularization weights must be nonnegative")
        self.lambda_y, self.lambda_g = float(lambda_y), float(lambda_g)
        Up, Uf, Yp, Yf = future_blocks(data, cfg.L, cfg.N)
        self.Up, self.Uf, self.Yp, self.Yf = Up, Uf, Yp, Yf
        self.Up_pinv = pinv(Up)
        _, s, Vt = np.linalg.svd(Up)
        tol = s.max() * max(Up.shape) * np.finfo(float).eps if s.size else 0.0
        rank = int(np.sum(s > tol))
        self.full_row_rank = rank == Up.shape[0]
        self.Z = Vt[rank:].T
        # cost Hessian in z (constant across steps)
        Fz, Ez, Sz = Uf @ self.Z, Yf @ self.Z, Yp @ self.Z
        H = 2.0 * (Ez.T @ self._Qbar @ Ez + Fz.T @ self._Rbar @ Fz
                   + self.lambda_y * Sz.T @ Sz + self.lambda_g * self.Z.T @ self.Z)
        self._H = 0.5 * (H + H.T)
        self._Fz, self._Ez, self._Sz = Fz, Ez, Sz
        self._G = np.vstack([self._Gu @ Fz, self._Gy @ Ez])

    def _solve(self, u_ini, y_ini, r) -> np.ndarray:
        g0 = self.Up_pinv @ u_ini
        u0, y0, s0 = self.Uf @ g0, self.Yf @ g0, self.Yp @ g0 - y_ini
        f = 2.0 * (self._Ez.T @ (self._Qbar @ (y0 - r)) + self._Fz.T @ (self._Rbar @ u0)
                   + self.lambda_y * self._Sz.T @ s0 + self.lambda_g * self.Z.T @ g0)
        h = np.concatenate([self._hu - self._Gu @ u0, self._hy - self._Gy @ y0])
        sol = solve_qp(QpProblem(self._H, f, self._G, h))
        return u0 + self._Fz @ sol.x


class SPCController(_BufferedController):
    """Subspace predictive control with a ridge-regularized predictor
    ``y_f = P [u_ini; y_ini; u_f]``."""

    name = "SPC"

    def __init__(self, data: OfflineData, cfg, spec, Q, R, refs, *,
                 lam=1e-3, on_infeasible="hold"):
        super().__init__(cfg, spec, Q, R, refs, data.m, data.p, on_infeasible=on_infeasible)
        Up, Uf, Yp, Yf = future_blocks(data, cfg.L, cfg.N)
        self.P = tikhonov_solve(np.vstack([Up, Yp, Uf]), Yf, lam)
        mL, pL = data.m * cfg.L, data.p * cfg.L
        self.P_u, self.P_y, self.P_f = self.P[:, :mL], self.P[:, mL:mL + pL], self.P[:, mL + pL:]
        Pf = self.P_f
        H = 2.0 * (Pf.T @ self._Qbar @ Pf + self._Rbar)
        self._H = 0.5 * (H + H.T)
        self._G = np.vstack([self._Gu, self._Gy @ Pf])

    def predict(self, u_ini, y_ini, u_f) -> np.ndarray:
        return self.P_u @ u_ini + self.P_y @ y_ini + self.P_f @ np.reshape(u_f, -1)

    def _solve(self, u_ini, y_ini, r) -> np.ndarray:
        free = self.P_u @ u_ini + self.P_y @ y_ini
        f = 2.0 * self.P_f.T @ (self._Qbar @ (free - r))
        h = np.concatenate([self._hu, self._hy - self._Gy @ free])
        return solve_qp(QpProblem(self._H, f, self._G, h)).x


def deepc_controller(data, cfg, spec, Q, R, refs, lambda_y=1e6, lambda_g=1e3, **kw):
    return DeePCController(data, cfg, spec, Q, R, refs, lambda_y=lambda_y, lambda_g=lambda_g, **kw)


def spc_controller(data, cfg, spec, Q, R, refs, lam=1e-3, **kw):
    return SPCController(data, cfg, spec, Q, R, refs, lam=lam, **kw)
