"""Quantities built from one offline input-output trajectory.

Hankel partitioning, persistency of excitation, recovery of the impulse
response / initial-condition maps ``(G, H, Gamma)`` and assembly of the
auxiliary state-space model whose state stacks the last ``L`` inputs,
noise-free outputs and process-noise responses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_matrix, matrix_rank, pinv, symmetrize, tikhonov_solve
from .plant import LtiModel, read_trajectory_csv


@dataclass(frozen=True)
class OfflineData:
    u_d: np.ndarray  # (T_d, m)
    y_d: np.ndarray  # (T_d, p)

    def __post_init__(self):
        u = np.asarray(self.u_d, float)
        y = np.asarray(self.y_d, float)
        u = u.reshape(u.shape[0], -1)
        y = y.reshape(y.shape[0], -1)
        if u.shape[0] != y.shape[0]:
            raise ValueError("u_d and y_d must have the same length")
        object.__setattr__(self, "u_d", u)
        object.__setattr__(self, "y_d", y)

    @property
    def T(self) -> int:
        return self.u_d.shape[0]

    @property
    def m(self) -> int:
        return self.u_d.shape[1]

    @property
    def p(self) -> int:
        return self.y_d.shape[1]

    @classmethod
    def from_csv(cls, path) -> "OfflineData":
        _, _, u, y = read_trajectory_csv(path)
        return cls(u, y)


@dataclass(frozen=True)
class DataMatrices:
    U1: np.ndarray
    U2: np.ndarray
    Y1: np.ndarray
    Y2: np.ndarray
    L: int
    m: int
    p: int

    @property
    def h(self) -> int:
        return self.U1.shape[1]

    @property
    def W(self) -> np.ndarray:
        """``col(U1, Y1, U2)``."""
        return np.vstack([self.U1, self.Y1, self.U2])


@dataclass(frozen=True)
class RecoveredQuantities:
    G: np.ndarray
    H: np.ndarray
    Gamma_U: np.ndarray
    Gamma_Y: np.ndarray
    L: int
    m: int
    p: int

    @property
    def Gamma1_U(self) -> np.ndarray:
        return self.Gamma_U[: self.p]

    @property
    def Gamma1_Y(self) -> np.ndarray:
        return self.Gamma_Y[: self.p]


@dataclass(frozen=True)
class AuxModel:
    """Auxiliary realization; ``n_aux = mL + pL + pL^2``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Sigma_w: np.ndarray
    E: np.ndarray
    F: np.ndarray
    L: int
    m: int
    p: int

    @property
    def n_aux(self) -> int:
        return self.A.shape[0]

    def to_lti(self, Sigma_v) -> LtiModel:
        return LtiModel(self.A, self.B, self.C, self.Sigma_w, Sigma_v)


def _as_seq(seq) -> np.ndarray:
    a = np.asarray(seq, float)
    return a.reshape(a.shape[0], -1)


def hankel(seq, K: int) -> np.ndarray:
    """Depth-``K`` block-Hankel matrix; column ``j`` stacks ``seq[j:j+K]``."""
    s = _as_seq(seq)
    T, d = s.shape
    if K < 1 or T < K:
        raise ValueError(f"sequence of length {T} too short for depth {K}")
    cols = T - K + 1
    return np.lib.stride_tricks.sliding_window_view(s, (K, d))[:, 0].reshape(cols, K * d).T.copy()


def is_persistently_exciting(u_d, order: int) -> bool:
    """Full row rank of the depth-``order`` Hankel matrix of ``u_d``."""
    s = _as_seq(u_d)
    if s.shape[0] < order:
        return False
    Hk = hankel(s, order)
    return Hk.shape[1] >= Hk.shape[0] and matrix_rank(Hk) == Hk.shape[0]


def partition(data: OfflineData, L: int) -> DataMatrices:
    if L < 1:
        raise ValueError("L must be >= 1")
    if data.T < 2 * L:
        raise ValueError(f"need at least 2L={2 * L} samples, got {data.T}")
    Hu = hankel(data.u_d, 2 * L)
    Hy = hankel(data.y_d, 2 * L)
    mL, pL = data.m * L, data.p * L
    return DataMatrices(Hu[:mL], Hu[mL:], Hy[:pL], Hy[pL:], L, data.m, data.p)


def recover_quantities(
    dm: DataMatrices, mode: str = "exact", lam: float = 1e-3
) -> RecoveredQuantities:
    """Estimate ``(G, H, Gamma)`` from the partitioned data.

    ``mode="exact"`` uses the pseudoinverse of ``W = col(U1, Y1, U2)`` and is
    exact for noise-free data with sufficiently rich input;
    ``mode="tikhonov"`` replaces it by the ridge inverse with weight ``lam``.
    """
    if mode == "exact":
        P = dm.Y2 @ pinv(dm.W)
    elif mode == "tikhonov":
        P = tikhonov_solve(dm.W, dm.Y2, lam)
    else:
        raise ValueError(f"unknown recovery mode {mode!r}")
    mL, pL = dm.m * dm.L, dm.p * dm.L
    P1, P2, P3 = P[:, :mL], P[:, mL:mL + pL], P[:, mL + pL:]
    return RecoveredQuantities(P3, P1 + P2 @ P3, P1, P2, dm.L, dm.m, dm.p)


def selector(j: int, L: int, p: int) -> np.ndarray:
    """``S_j`` (1-based): picks block ``j`` of a length-``L`` stack of p-vectors."""
    S = np.zeros((p, p * L))
    S[:, (j - 1) * p:j * p] = np.eye(p)
    return S


def selectors_EF(L: int, p: int) -> tuple[np.ndarray, np.ndarray]:
    """0/1 matrices ``E`` (pL x pL^2) and ``F`` (p x pL^2).

    ``E`` extracts, for each window position, the accumulated earlier noise
    responses; ``F`` extracts the full response at the next output.
    """
    pL = p * L
    E = np.zeros((pL, pL * L))
    for i in range(1, L + 1):
        for j in range(1, i):
            E[(i - 1) * p:i * p, (j - 1) * pL:j * pL] = selector(i - j, L, p)
    F = np.hstack([selector(L - j + 1, L, p) for j in range(1, L + 1)])
    return E, F


def _shift(block: int, L: int) -> np.ndarray:
    """Block up-shift: drops the oldest of ``L`` blocks of size ``block``."""
    S = np.zeros((block * L, block * L))
    S[: block * (L - 1), block:] = np.eye(block * (L - 1))
    return S


def build_aux_model(rq: RecoveredQuantities, Sigma_rho) -> AuxModel:
    L, m, p = rq.L, rq.m, rq.p
    mL, pL = m * L, p * L
    nr = pL * L
    n_aux = mL + pL + nr
    Sigma_rho = symmetrize(as_matrix(Sigma_rho, "Sigma_rho"))
    if Sigma_rho.shape != (pL, pL):
        raise ValueError(f"Sigma_rho must be {pL}x{pL}")
    E, F = selectors_EF(L, p)
    G1U, G1Y = rq.Gamma1_U, rq.Gamma1_Y
    Crho = F - G1Y @ E
    C = np.hstack([G1U, G1Y, Crho])

    A = np.zeros((n_aux, n_aux))
    iu, iy, ir = slice(0, mL), slice(mL, mL + pL), slice(mL + pL, n_aux)
    A[iu, iu] = _shift(m, L)
    A[iy, iy] = _shift(p, L)
    A[mL + pL - p:mL + pL, :] = C
    A[ir, ir] = _shift(pL, L)

    B = np.zeros((n_aux, m))
    B[mL - m:mL] = np.eye(m)

    Sw = np.zeros((n_aux, n_aux))
    Sw[n_aux - pL:, n_aux - pL:] = Sigma_rho
    return AuxModel(A, B, C, Sw, E, F, L, m, p)


def default_sigma_rho(L: int, p: int, scale: float = 1e-4) -> np.ndarray:
    """Scaled-identity tuning value used when the true noise model is unknown."""
    return scale * np.eye(p * L)
