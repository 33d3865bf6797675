"""Kalman filtering and closed-loop covariance propagation.

Everything here is written against a generic :class:`~sddpc.plant.LtiModel`,
so the same code serves the true plant and the data-built auxiliary model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .plant import LtiModel
from .numerics import symmetrize


@dataclass(frozen=True)
class GaussianBelief:
    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, float).reshape(-1)
        S = symmetrize(np.atleast_2d(np.asarray(self.Sigma, float)))
        if S.shape != (mu.size, mu.size):
            raise ValueError("belief mean and covariance disagree in size")
        ev = np.linalg.eigvalsh(S) if S.size else np.zeros(0)
        if ev.size and ev.min() < -1e-9 * max(1.0, ev.max()):
            raise ValueError("belief covariance is not PSD")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", S)

    @classmethod
    def zero(cls, dim: int) -> "GaussianBelief":
        return cls(np.zeros(dim), np.zeros((dim, dim)))


@dataclass(frozen=True)
class KalmanSchedule:
    """Gains ``L_t`` and covariances over one prediction horizon.

    ``P_prior`` has ``N + 1`` entries (``P^-_k ... P^-_{k+N}``); ``gains``
    and ``P_post`` have ``N``.
    """

    gains: tuple[np.ndarray, ...]
    P_post: tuple[np.ndarray, ...]
    P_prior: tuple[np.ndarray, ...]

    @property
    def N(self) -> int:
        return len(self.gains)


@dataclass(frozen=True)
class JointCovariance:
    """Covariances of ``col(xhat_t, x_t)`` for ``t = k .. k+N-1``."""

    Sigma_hatxx: tuple[np.ndarray, ...]


def kalman_gain(model: LtiModel, P_prior: np.ndarray) -> np.ndarray:
    S = model.C @ P_prior @ model.C.T + model.Sigma_v
    try:
        fac = cho_factor(symmetrize(S), lower=True)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("innovation covariance is not PD") from exc
    # L = P C^T S^{-1}  <=>  S L^T = C P
    return cho_solve(fac, model.C @ P_prior).T


def kalman_schedule(model: LtiModel, prior: GaussianBelief, N: int) -> KalmanSchedule:
    n = model.n
    P_minus = symmetrize(prior.Sigma)
    gains, posts, priors = [], [], [P_minus]
    eye = np.eye(n)
    for _ in range(N):
        Lt = kalman_gain(model, P_minus)
        P = symmetrize((eye - Lt @ model.C) @ P_minus)
        P_minus = symmetrize(model.A @ P @ model.A.T + model.Sigma_w)
        gains.append(Lt)
        posts.append(P)
        priors.append(P_minus)
    return KalmanSchedule(tuple(gains), tuple(posts), tuple(priors))


def kf_update(prior_mean, y, gain, model: LtiModel) -> np.ndarray:
    """Posterior mean ``xhat^- + L (y - C xhat^-)``."""
    xm = np.asarray(prior_mean, float).reshape(-1)
    y = np.asarray(y, float).reshape(-1)
    if xm.shape != (model.n,) or y.shape != (model.p,) or gain.shape != (model.n, model.p):
        raise ValueError("dimension mismatch in kf_update")
    return xm + gain @ (y - model.C @ xm)


def kf_predict(post_mean, u, model: LtiModel) -> np.ndarray:
    """Prior mean of the next step, ``A xhat + B u``."""
    xh = np.asarray(post_mean, float).reshape(-1)
    u = np.asarray(u, float).reshape(-1)
    if xh.shape != (model.n,) or u.shape != (model.m,):
        raise ValueError("dimension mismatch in kf_predict")
    return model.A @ xh + model.B @ u


def propagate_joint_covariance(
    model: LtiModel,
    K: np.ndarray,
    schedule: KalmanSchedule,
    prior: GaussianBelief,
    N: int,
    *,
    cross_covariance: bool = True,
) -> JointCovariance:
    """Covariance recursion for the estimate/state pair under the affine
    policy ``u = u_nom + K (xhat - x_nom)``.

    The transition at step ``t`` uses the Kalman gain of that same step.
    The process noise ``w_{t-1}`` drives both ``x_t`` and, through the
    innovation, ``xhat_t``; their cross term ``L_t C Sigma_w`` is included
    unless ``cross_covariance=False`` (block-diagonal noise term).
    """
    A, B, C = model.A, model.B, model.C
    Sx = prior.Sigma
    D0 = Sx - schedule.P_post[0]
    S = symmetrize(np.block([[D0, D0], [D0, Sx]]))
    out = [S]
    BK = B @ K
    zero = np.zeros_like(A)
    noise_y = C @ model.Sigma_w @ C.T + model.Sigma_v
    for j in range(1, N):
        Lt = schedule.gains[j]
        LCA = Lt @ C @ A
        Lam = np.block([[A + BK - LCA, LCA], [BK, A]])
        cross = Lt @ C @ model.Sigma_w if cross_covariance else zero
        Delta = np.block([[Lt @ noise_y @ Lt.T, cross], [cross.T, model.Sigma_w]])
        S = symmetrize(Lam @ S @ Lam.T + Delta)
        out.append(S)
    return JointCovariance(tuple(out))


def io_variances(
    model: LtiModel, K: np.ndarray, joint: JointCovariance
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Input and output covariances along the horizon."""
    n, m, p = model.n, model.m, model.p
    Ku = np.hstack([K, np.zeros((m, n))])
    Cy = np.hstack([np.zeros((p, n)), model.C])
    Su = [symmetrize(Ku @ S @ Ku.T) for S in joint.Sigma_hatxx]
    Sy = [symmetrize(Cy @ S @ Cy.T + model.Sigma_v) for S in joint.Sigma_hatxx]
    return Su, Sy
