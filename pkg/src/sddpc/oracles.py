"""Model-based reference quantities for validating the data-driven path.

Everything here needs the true ``(A, B, C)`` and therefore must never be
used by a data-driven controller.  The test suite and the equivalence
checker use these functions to build ground truth and matched settings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import GaussianBelief
from .numerics import matrix_rank, pinv, symmetrize
from .plant import LtiModel, extended_controllability, extended_observability


@dataclass(frozen=True)
class ModelQuantities:
    G: np.ndarray
    H: np.ndarray
    Gamma_U: np.ndarray
    Gamma_Y: np.ndarray
    O: np.ndarray
    Ctrl: np.ndarray


def _markov(model: LtiModel, k: int) -> np.ndarray:
    """``C A^{k-1} B`` for ``k >= 1``."""
    return model.C @ np.linalg.matrix_power(model.A, k - 1) @ model.B


def model_quantities(model: LtiModel, L: int) -> ModelQuantities:
    """Impulse-response blocks ``G``, ``H`` and the map ``Gamma`` from the model."""
    m, p = model.m, model.p
    G = np.zeros((p * L, m * L))
    H = np.zeros((p * L, m * L))
    for i in range(L):
        for j in range(L):
            if j < i:
                G[i * p:(i + 1) * p, j * m:(j + 1) * m] = _markov(model, i - j)
            H[i * p:(i + 1) * p, j * m:(j + 1) * m] = _markov(model, L + i - j)
    O = extended_observability(model, L)
    Ctrl = extended_controllability(model, L)
    AL = np.linalg.matrix_power(model.A, L)
    M = np.block([[np.eye(m * L), np.zeros((m * L, model.n))], [G, O]])
    Gamma = np.hstack([H, O @ AL]) @ pinv(M)
    return ModelQuantities(G, H, Gamma[:, :m * L], Gamma[:, m * L:], O, Ctrl)


def sigma_rho(model: LtiModel, L: int) -> np.ndarray:
    """Covariance of the stacked noise response ``O w``."""
    O = extended_observability(model, L)
    return symmetrize(O @ model.Sigma_w @ O.T)


@dataclass(frozen=True)
class PhiOracles:
    Phi: np.ndarray       # n x n_aux
    Phi_orig: np.ndarray  # n x n_xi
    Phi_aux: np.ndarray   # n_aux x n_xi
    G_W: np.ndarray
    C_W: np.ndarray


def build_phi_oracles(model: LtiModel, L: int) -> PhiOracles:
    """Linear maps tying the auxiliary state to the true state.

    With ``xi_t = col(u_[t-L,t), x_{t-L}, w_[t-L,t))`` one has
    ``x_t = Phi_orig xi_t``, ``xaux_t = Phi_aux xi_t`` and ``x_t = Phi xaux_t``.
    """
    n, m, p = model.n, model.m, model.p
    A, C = model.A, model.C
    mq = model_quantities(model, L)
    O, G = mq.O, mq.G
    AL = np.linalg.matrix_power(A, L)
    M = np.block([[np.eye(m * L), np.zeros((m * L, n))], [G, O]])
    PhiUY = np.hstack([mq.Ctrl, AL]) @ pinv(M)
    Phi_U, Phi_Y = PhiUY[:, :m * L], PhiUY[:, m * L:]
    C_W = np.hstack([np.linalg.matrix_power(A, L - 1 - j) for j in range(L)])
    G_W = np.zeros((p * L, n * L))
    for i in range(L):
        for j in range(i):
            G_W[i * p:(i + 1) * p, j * n:(j + 1) * n] = C @ np.linalg.matrix_power(A, i - 1 - j)
    Phi_rho = (C_W - Phi_Y @ G_W) @ np.kron(np.eye(L), pinv(O))
    Phi = np.hstack([Phi_U, Phi_Y, Phi_rho])
    Phi_orig = np.hstack([mq.Ctrl, AL, C_W])
    nrho = p * L * L
    Phi_aux = np.block([
        [np.eye(m * L), np.zeros((m * L, n)), np.zeros((m * L, n * L))],
        [G, O, G_W],
        [np.zeros((nrho, m * L)), np.zeros((nrho, n)), np.kron(np.eye(L), O)],
    ])
    return PhiOracles(Phi, Phi_orig, Phi_aux, G_W, C_W)


def matched_prior(prior: GaussianBelief, oracles: PhiOracles) -> GaussianBelief:
    """Auxiliary prior consistent with a given true-state prior."""
    Po = oracles.Phi_orig
    if matrix_rank(Po) < Po.shape[0]:
        raise np.linalg.LinAlgError("Phi_orig does not have full row rank")
    Pd = pinv(Po)
    mu_xi = Pd @ prior.mu
    S_xi = Pd @ prior.Sigma @ Pd.T
    Pa = oracles.Phi_aux
    return GaussianBelief(Pa @ mu_xi, symmetrize(Pa @ S_xi @ Pa.T))


def aux_state(model: LtiModel, u_win, x_start, w_win) -> np.ndarray:
    """Auxiliary state built from ``L`` steps of history.

    ``u_win`` (L,m) and ``w_win`` (L,n) cover ``[t-L, t)``; ``x_start`` is
    ``x_{t-L}``.
    """
    u_win = np.asarray(u_win, float).reshape(-1, model.m)
    w_win = np.asarray(w_win, float).reshape(-1, model.n)
    L = u_win.shape[0]
    O = extended_observability(model, L)
    x = np.asarray(x_start, float).reshape(model.n)
    yo = []
    for s in range(L):
        yo.append(model.C @ x)
        x = model.A @ x + model.B @ u_win[s] + w_win[s]
    rho = [O @ w for w in w_win]
    return np.concatenate([u_win.reshape(-1), np.concatenate(yo), np.concatenate(rho)])
