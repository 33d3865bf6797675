"""Shared numeric kernels: pseudoinverse, ridge solve, DARE/LQR, Gaussian
quantiles and a small dense convex QP solver."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np
from scipy.linalg import solve_discrete_lyapunov, solve_triangular

_EPS = np.finfo(float).eps
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Infeasible(RuntimeError):
    """Raised when a QP has an empty feasible set."""


class MaxIter(RuntimeError):
    """Raised when an iterative routine exceeds its iteration cap."""


def as_matrix(M, name: str = "matrix") -> np.ndarray:
    """Coerce scalars / vectors / nested lists to a finite 2-D float array."""
    arr = np.atleast_2d(np.asarray(M, dtype=float))
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


# ----------------------------------------------------------------------
# Pseudoinverse, rank, Tikhonov
# ----------------------------------------------------------------------


def _svd_cutoff(s: np.ndarray, shape: tuple[int, int]) -> float:
    if s.size == 0:
        return 0.0
    return float(s[0]) * max(shape) * _EPS


def pinv(M) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``sigma_max * max(rows, cols) * eps`` are treated
    as zero.
    """
    M = as_matrix(M)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cutoff = _svd_cutoff(s, M.shape)
    s_inv = np.zeros_like(s)
    keep = s > cutoff
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def matrix_rank(M) -> int:
    """Numerical rank under the same cutoff rule as :func:`pinv`."""
    M = as_matrix(M)
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > _svd_cutoff(s, M.shape)))


def tikhonov_solve(W, Y, lam: float) -> np.ndarray:
    """Ridge estimate ``Y (W^T W + lam I)^{-1} W^T`` of ``Y W^+``.

    Evaluated through the push-through identity
    ``(W^T W + lam I)^{-1} W^T = W^T (W W^T + lam I)^{-1}`` so that only a
    ``rows(W)``-sized system is factored.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    W = as_matrix(W, "W")
    Y = as_matrix(Y, "Y")
    if Y.shape[1] != W.shape[1]:
        raise ValueError(
            f"Y has {Y.shape[1]} columns but W has {W.shape[1]}"
        )
    gram = W @ W.T + lam * np.eye(W.shape[0])
    # Y W^T gram^{-1}; gram is SPD
    c, low = np.linalg.cholesky(gram), True
    rhs = (Y @ W.T).T
    tmp = solve_triangular(c, rhs, lower=low)
    return solve_triangular(c.T, tmp, lower=not low).T


# ----------------------------------------------------------------------
# DARE / LQR
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class DareSolution:
    P_lqr: np.ndarray
    K: np.ndarray
    iterations: int


def lqr_gain(A, B, R, P) -> np.ndarray:
    """``K = -(R + B^T P B)^{-1} B^T P A``."""
    BtP = B.T @ P
    return -np.linalg.solve(R + BtP @ B, BtP @ A)


def riccati_map(A, B, Qx, R, P) -> np.ndarray:
    BtPA = B.T @ P @ A
    S = R + B.T @ P @ B
    return symmetrize(Qx + A.T @ P @ A - BtPA.T @ np.linalg.solve(S, BtPA))


def dare_residual(A, B, Qx, R, P) -> float:
    """Frobenius norm of ``P - riccati_map(P)``."""
    A, B, Qx, R, P = map(as_matrix, (A, B, Qx, R, P))
    return float(np.linalg.norm(P - riccati_map(A, B, Qx, R, P)))


def spectral_radius(M) -> float:
    M = as_matrix(M)
    return float(np.max(np.abs(np.linalg.eigvals(M)))) if M.size else 0.0


def _hewer_polish(A, B, Qx, R, P, steps: int = 3) -> np.ndarray:
    """A few policy-evaluation (Newton) steps from a converged iterate.

    The fixed-point iteration stalls at a residual proportional to
    ``tol * ||P||``; each Newton step roughly squares the error.  A step is
    kept only if it lowers the residual and its gain is stabilizing.
    """
    best, res = P, dare_residual(A, B, Qx, R, P)
    for _ in range(steps):
        K = lqr_gain(A, B, R, best)
        Acl = A + B @ K
        if spectral_radius(Acl) >= 1.0:
            break
        cand = symmetrize(solve_discrete_lyapunov(Acl.T, Qx + K.T @ R @ K))
        r = dare_residual(A, B, Qx, R, cand)
        if not r < res:
            break
        best, res = cand, r
    return best


def solve_dare(
    A, B, Qx, R, *, tol: float = 1e-10, max_iter: int = 100_000
) -> DareSolution:
    """Stabilizing DARE solution by fixed-point iteration of the Riccati map.

    Starts from ``P = Qx`` and stops once
    ``||P_{k+1} - P_k||_F <= tol * (1 + ||P_k||_F)``, then refines the
    result with a few Newton (Hewer) steps.  Works for
    non-minimal (stabilizable / detectable) realizations where
    Hamiltonian-pencil solvers struggle.
    """
    A, B, Qx, R = (as_matrix(M, nm) for M, nm in zip((A, B, Qx, R), "ABQR"))
    n = A.shape[0]
    if A.shape != (n, n) or B.shape[0] != n or Qx.shape != (n, n):
        raise ValueError("inconsistent DARE dimensions")
    if R.shape != (B.shape[1], B.shape[1]):
        raise ValueError("R must be m x m")
    P = symmetrize(Qx)
    for it in range(1, max_iter + 1):
        P_next = riccati_map(A, B, Qx, R, P)
        step = np.linalg.norm(P_next - P)
        P = P_next
        if step <= tol * (1.0 + np.linalg.norm(P)):
            P = _hewer_polish(A, B, Qx, R, P)
            return DareSolution(P, lqr_gain(A, B, R, P), it)
        if not np.all(np.isfinite(P)):
            break
    raise MaxIter(
        "Riccati iteration did not converge; (A, B) may not be stabilizable "
        "or (A, Qx^1/2) not detectable"
    )


# ----------------------------------------------------------------------
# Standard normal c.d.f. / quantile
# ----------------------------------------------------------------------

_STD_NORMAL = NormalDist()


def _cdfn_scalar(z: float) -> float:
    return 0.5 * math.erfc(-z / _SQRT2)


def _icdfn_scalar(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    # rational approximation (Wichura AS241) then Newton polishing on cdfn
    z = _STD_NORMAL.inv_cdf(p)
    for _ in range(2):
        dens = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
        if dens < 1e-300:
            break
        z -= (_cdfn_scalar(z) - p) / dens
    return z


def cdfn(z):
    """Standard normal c.d.f.; accepts scalars or arrays."""
    if np.ndim(z) == 0:
        return _cdfn_scalar(float(z))
    return np.vectorize(_cdfn_scalar, otypes=[float])(np.asarray(z, float))


def icdfn(p):
    """Standard normal quantile ``sqrt(2) erfinv(2p - 1)``; scalars or arrays."""
    if np.ndim(p) == 0:
        return _icdfn_scalar(float(p))
    return np.vectorize(_icdfn_scalar, otypes=[float])(np.asarray(p, float))


# ----------------------------------------------------------------------
# Dense convex QP
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class QpProblem:
    """``minimize 1/2 x^T H x + f^T x  subject to  G x <= h``."""

    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = as_matrix(self.H, "H")
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError("H must be square")
        scale = max(1.0, float(np.max(np.abs(H))))
        if np.max(np.abs(H - H.T)) > 1e-12 * scale:
            raise ValueError("H must be symmetric")
        f = np.asarray(self.f, dtype=float).reshape(-1)
        if f.shape != (n,):
            raise ValueError("f has wrong length")
        G = np.asarray(self.G, dtype=float).reshape(-1, n)
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if G.shape[0] != h.shape[0]:
            raise ValueError("G and h disagree on the number of rows")
        object.__setattr__(self, "H", symmetrize(H))
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)

    @property
    def n(self) -> int:
        return self.f.shape[0]

    def objective(self, x) -> float:
        x = np.asarray(x, float)
        return float(0.5 * x @ self.H @ x + self.f @ x)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    multipliers: np.ndarray  # one per row of G, zero when inactive
    objective: float
    active: tuple[int, ...]
    iterations: int


def kkt_residuals(qp: QpProblem, x, lam) -> dict[str, float]:
    """Scaled KKT residuals of a primal/dual pair.

    Each residual is normalised by one plus the magnitude of the terms it
    balances, which keeps the check meaningful for the large output weights
    used in tracking problems.
    """
    x = np.asarray(x, float)
    lam = np.asarray(lam, float)
    Hx = qp.H @ x
    Gtl = qp.G.T @ lam if lam.size else np.zeros_like(x)
    stat_scale = 1.0 + max(_inf(Hx), _inf(qp.f), _inf(Gtl))
    stationarity = _inf(Hx + qp.f + Gtl) / stat_scale
    if qp.h.size:
        Gx = qp.G @ x
        row_scale = 1.0 + np.maximum(np.abs(qp.h), np.abs(Gx))
        primal = float(np.max(np.maximum(Gx - qp.h, 0.0) / row_scale))
        dual = float(max(0.0, -np.min(lam)))
        comp = float(np.max(np.abs(lam * (qp.h - Gx)) / row_scale))
    else:
        primal = dual = comp = 0.0
    return {
        "stationarity": stationarity,
        "primal": primal,
        "dual": dual,
        "complementarity": comp,
    }


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _factor(H: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of H, with a tiny ridge if H is only PSD."""
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        n = H.shape[0]
        ridge = 1e-10 * max(1.0, float(np.trace(H)) / max(n, 1))
        return np.linalg.cholesky(H + ridge * np.eye(n))


def solve_qp(qp: QpProblem, *, max_iter: int | None = None) -> QpSolution:
    """Solve a strictly convex dense QP with the Goldfarb-Idnani dual
    active-set method, then polish on the final active set.

    Raises:
        Infeasible: the dual step is unbounded, certifying an empty
            feasible set.
        MaxIter: the active-set loop exceeded its cap.
    """
    H, f, G, h = qp.H, qp.f, qp.G, qp.h
    n, nc = qp.n, h.shape[0]
    if max_iter is None:
        max_iter = 50 * (n + nc) + 100

    Lc = _factor(H)
    Linv = solve_triangular(Lc, np.eye(n), lower=True)
    # H^{-1} = Linv^T Linv
    x = -Linv.T @ (Linv @ f)

    gnorm = np.linalg.norm(G, axis=1) if nc else np.zeros(0)
    active: list[int] = []
    lam = np.zeros(0)
    iters = 0

    def feas_tol(x_):
        return 1e-11 * (1.0 + np.abs(h) + gnorm * np.max(np.abs(x_), initial=0.0))

    def basis():
        if not active:
            return np.zeros((n, 0)), Linv.T, np.zeros((0, 0))
        Nt = Linv @ (-G[active].T)
        Qf, Rf = np.linalg.qr(Nt, mode="complete")
        q = len(active)
        return Linv.T @ Qf[:, :q], Linv.T @ Qf[:, q:], Rf[:q, :q]

    while nc:
        slack = h - G @ x
        viol = slack < -feas_tol(x)
        if not np.any(viol):
            break
        scaled = np.where(viol, slack / np.maximum(gnorm, 1e-300), np.inf)
        p = int(np.argmin(scaled))
        n_p = -G[p]
        lam_plus = np.append(lam, 0.0)
        while True:
            iters += 1
            if iters > max_iter:
                raise MaxIter("active-set iteration cap reached")
            J1, J2, Rf = basis()
            z = J2 @ (J2.T @ n_p)
            q = len(active)
            r = solve_triangular(Rf, J1.T @ n_p) if q else np.zeros(0)
            # partial (drop) step
            t1, k_drop = np.inf, -1
            for j in range(q):
                if r[j] > 1e-14 * max(1.0, np.max(np.abs(r))):
                    ratio = lam_plus[j] / r[j]
                    if ratio < t1:
                        t1, k_drop = ratio, j
            nz = float(n_p @ z)
            ref = float(np.sum((Linv @ n_p) ** 2))
            t2 = np.inf
            if nz > 1e-22 * ref:
                t2 = -(h[p] - G[p] @ x) / nz
            t = min(t1, t2)
            if not np.isfinite(t):
                raise Infeasible(f"constraint {p} cannot be satisfied")
            if not np.isfinite(t2):
                lam_plus[:q] -= t * r
                lam_plus[q] += t
                lam_plus = np.delete(lam_plus, k_drop)
                del active[k_drop]
                continue
            x = x + t * z
            lam_plus[:q] -= t * r
            lam_plus[q] += t
            if t2 <= t1:
                active.append(p)
                lam = lam_plus
                break
            lam_plus = np.delete(lam_plus, k_drop)
            del active[k_drop]

    x, lam = _polish(H, f, G, h, x, active, lam)
    mult = np.zeros(nc)
    if active:
        mult[active] = lam
    return QpSolution(x, mult, qp.objective(x), tuple(sorted(active)), iters)


def _polish(H, f, G, h, x, active, lam):
    """Re-solve the equality-constrained KKT system on the active set and
    keep the result only if it is at least as accurate."""
    if not active:
        return x, lam
    q = len(active)
    n = x.shape[0]
    GA = G[active]
    K = np.zeros((n + q, n + q))
    K[:n, :n] = H
    K[:n, n:] = GA.T
    K[n:, :n] = GA
    rhs = np.concatenate([-f, h[active]])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return x, lam
    x_p, lam_p = sol[:n], sol[n:]
    if not np.all(np.isfinite(sol)) or np.min(lam_p) < -1e-9 * (1 + np.max(np.abs(lam_p))):
        return x, lam

    def worst(xv, lv):
        stat = np.max(np.abs(H @ xv + f + GA.T @ lv))
        prim = np.max(np.maximum(G @ xv - h, 0.0))
        return max(stat, prim)

    if worst(x_p, lam_p) <= worst(x, lam):
        return x_p, np.maximum(lam_p, 0.0)
    return x, lam
