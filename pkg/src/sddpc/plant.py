"""Ground-truth stochastic LTI plant: simulation, noise sampling, CSV I/O and
structural rank diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .numerics import as_matrix, matrix_rank, symmetrize


@dataclass(frozen=True)
class LtiModel:
    """``x+ = A x + B u + w``, ``y = C x + v`` with Gaussian ``w``, ``v``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    Sigma_w: np.ndarray
    Sigma_v: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        n = A.shape[0]
        B = as_matrix(self.B, "B").reshape(n, -1)
        C = as_matrix(self.C, "C").reshape(-1, n)
        if A.shape != (n, n):
            raise ValueError("A must be square")
        p = C.shape[0]
        Sw = symmetrize(as_matrix(self.Sigma_w, "Sigma_w"))
        Sv = symmetrize(as_matrix(self.Sigma_v, "Sigma_v"))
        if Sw.shape != (n, n) or Sv.shape != (p, p):
            raise ValueError("noise covariances have inconsistent sizes")
        ew = np.linalg.eigvalsh(Sw)
        if ew.min() < -1e-12 * max(1.0, ew.max()):
            raise ValueError("Sigma_w must be positive semidefinite")
        if np.linalg.eigvalsh(Sv).min() <= 0:
            raise ValueError("Sigma_v must be positive definite")
        for name, val in (("A", A), ("B", B), ("C", C), ("Sigma_w", Sw), ("Sigma_v", Sv)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class NoiseRealization:
    w_seq: np.ndarray  # (T, n)
    v_seq: np.ndarray  # (T, p)
    seed: int
    stream: int = 0

    @property
    def horizon(self) -> int:
        return self.w_seq.shape[0]


@dataclass
class Trajectory:
    x_seq: np.ndarray  # (T+1, n)
    u_seq: np.ndarray  # (T, m)
    y_seq: np.ndarray  # (T, p)
    t0: int = 0

    @property
    def T(self) -> int:
        return self.u_seq.shape[0]


class Controller(Protocol):
    def __call__(self, t: int, y: np.ndarray) -> np.ndarray: ...


def step(model: LtiModel, x, u, w) -> np.ndarray:
    x, u, w = (np.asarray(a, float).reshape(-1) for a in (x, u, w))
    if x.shape != (model.n,) or u.shape != (model.m,) or w.shape != (model.n,):
        raise ValueError("dimension mismatch in step")
    return model.A @ x + model.B @ u + w


def output(model: LtiModel, x, v) -> np.ndarray:
    x, v = (np.asarray(a, float).reshape(-1) for a in (x, v))
    if x.shape != (model.n,) or v.shape != (model.p,):
        raise ValueError("dimension mismatch in output")
    return model.C @ x + v


def psd_sqrt(S) -> np.ndarray:
    """Symmetric square root with negative eigenvalues clamped to zero."""
    vals, vecs = np.linalg.eigh(symmetrize(as_matrix(S)))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def noise_generator(seed: int, stream: int, channel: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, stream, channel)``."""
    ss = np.random.SeedSequence([int(seed), int(stream), int(channel)])
    return np.random.Generator(np.random.Philox(ss))


def sample_noise(
    model: LtiModel, horizon: int, seed: int, stream: int = 0
) -> NoiseRealization:
    """Draw ``w_t ~ N(0, Sigma_w)`` and ``v_t ~ N(0, Sigma_v)`` for ``horizon``
    steps.  Process and measurement noise come from separate counter-based
    streams, so a longer horizon extends (never alters) a shorter one."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    zw = noise_generator(seed, stream, 0).standard_normal((horizon, model.n))
    zv = noise_generator(seed, stream, 1).standard_normal((horizon, model.p))
    w = zw @ psd_sqrt(model.Sigma_w).T
    v = zv @ psd_sqrt(model.Sigma_v).T
    return NoiseRealization(w, v, int(seed), int(stream))


def zero_noise(model: LtiModel, horizon: int) -> NoiseRealization:
    return NoiseRealization(
        np.zeros((horizon, model.n)), np.zeros((horizon, model.p)), 0
    )


def simulate_closed_loop(
    model: LtiModel,
    controller: Callable[[int, np.ndarray], np.ndarray],
    x0,
    noise: NoiseRealization,
    T: int,
    *,
    t0: int = 0,
) -> Trajectory:
    """Run the plant for ``T`` steps under ``controller(t, y_t) -> u_t``."""
    if noise.horizon < T:
        raise ValueError(f"noise covers {noise.horizon} steps, need {T}")
    x = np.asarray(x0, float).reshape(model.n).copy()
    xs = np.empty((T + 1, model.n))
    us = np.empty((T, model.m))
    ys = np.empty((T, model.p))
    xs[0] = x
    for k in range(T):
        y = model.C @ x + noise.v_seq[k]
        u = np.asarray(controller(t0 + k, y), float).reshape(model.m)
        x = model.A @ x + model.B @ u + noise.w_seq[k]
        ys[k], us[k], xs[k + 1] = y, u, x
    return Trajectory(xs, us, ys, t0)


def simulate_open_loop(model: LtiModel, x0, u_seq, noise: NoiseRealization) -> Trajectory:
    u_seq = np.asarray(u_seq, float).reshape(-1, model.m)
    return simulate_closed_loop(
        model, lambda t, y: u_seq[t], x0, noise, u_seq.shape[0]
    )


def replay_residual(model: LtiModel, traj: Trajectory, noise: NoiseRealization) -> float:
    """Largest deviation of a recorded trajectory from the plant equations."""
    res = 0.0
    xs, us, ys = traj.x_seq, traj.u_seq, traj.y_seq
    for k in range(traj.T):
        # same operation order as the simulator, so a faithful replay is exact
        y = model.C @ xs[k] + noise.v_seq[k]
        x = model.A @ xs[k] + model.B @ us[k] + noise.w_seq[k]
        res = max(res, float(np.max(np.abs(y - ys[k]))), float(np.max(np.abs(x - xs[k + 1]))))
    return res


# ----------------------------------------------------------------------
# Structural matrices
# ----------------------------------------------------------------------


def extended_observability(model: LtiModel, L: int) -> np.ndarray:
    """``col(C, CA, ..., CA^{L-1})``."""
    if L < 1:
        raise ValueError("L must be >= 1")
    blocks = [model.C]
    for _ in range(L - 1):
        blocks.append(blocks[-1] @ model.A)
    return np.vstack(blocks)


def extended_controllability(model: LtiModel, L: int) -> np.ndarray:
    """Reversed controllability matrix ``[A^{L-1}B, ..., AB, B]``."""
    if L < 1:
        raise ValueError("L must be >= 1")
    blocks = [model.B]
    for _ in range(L - 1):
        blocks.append(model.A @ blocks[-1])
    return np.hstack(blocks[::-1])


@dataclass
class AssumptionReport:
    n: int
    L: int
    obs_rank: int
    ctrl_rank: int
    observable: bool
    controllable: bool
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems


def check_assumption_dims(model: LtiModel, L: int) -> AssumptionReport:
    """Rank checks on the extended observability / controllability matrices
    plus minimality of ``(A, B, C)``."""
    n = model.n
    r_o = matrix_rank(extended_observability(model, L))
    r_c = matrix_rank(extended_controllability(model, L))
    observable = matrix_rank(extended_observability(model, n)) == n
    controllable = matrix_rank(extended_controllability(model, n)) == n
    problems = []
    if r_o < n:
        problems.append(f"observability matrix rank {r_o} < n={n} (column rank deficient)")
    if r_c < n:
        problems.append(f"controllability matrix rank {r_c} < n={n} (row rank deficient)")
    if not observable:
        problems.append("(A, C) is not observable")
    if not controllable:
        problems.append("(A, B) is not controllable")
    return AssumptionReport(n, L, r_o, r_c, observable, controllable, problems)


def minimal_L(model: LtiModel, L_max: int = 50) -> int:
    """Smallest L with full-rank extended observability and controllability."""
    for L in range(1, L_max + 1):
        rep = check_assumption_dims(model, L)
        if rep.obs_rank == model.n and rep.ctrl_rank == model.n:
            return L
    raise ValueError("no L up to L_max satisfies the rank conditions")


def random_minimal_model(
    rng: np.random.Generator,
    n: int,
    m: int,
    p: int,
    *,
    radius: tuple[float, float] = (0.5, 0.95),
    sigma_w: float = 0.01,
    sigma_v: float = 0.01,
    max_tries: int = 200,
    max_cond: float = 1e4,
) -> LtiModel:
    """Random minimal system whose ``A`` has spectral radius in ``radius``."""
    for _ in range(max_tries):
        A = rng.normal(size=(n, n))
        rho = np.max(np.abs(np.linalg.eigvals(A)))
        A *= rng.uniform(*radius) / rho
        B = rng.normal(size=(n, m))
        C = rng.normal(size=(p, n))
        model = LtiModel(A, B, C, sigma_w * np.eye(n), sigma_v * np.eye(p))
        rep = check_assumption_dims(model, n)
        if rep.observable and rep.controllable:
            # reject nearly-unobservable/uncontrollable draws
            O = extended_observability(model, n)
            Cc = extended_controllability(model, n)
            if np.linalg.cond(O) < max_cond and np.linalg.cond(Cc) < max_cond:
                return model
    raise RuntimeError("could not draw a well-conditioned minimal model")


# ----------------------------------------------------------------------
# CSV import / export
# ----------------------------------------------------------------------


def trajectory_header(n: int | None, m: int, p: int) -> list[str]:
    cols = ["t"]
    if n:
        cols += [f"x{i + 1}" for i in range(n)]
    cols += [f"u{i + 1}" for i in range(m)]
    cols += [f"y{i + 1}" for i in range(p)]
    return cols


def write_trajectory_csv(path, traj: Trajectory, *, include_state: bool = True) -> None:
    n = traj.x_seq.shape[1] if include_state else None
    m, p = traj.u_seq.shape[1], traj.y_seq.shape[1]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(trajectory_header(n, m, p))
        for k in range(traj.T):
            row = [traj.t0 + k]
            if include_state:
                row += [repr(float(v)) for v in traj.x_seq[k]]
            row += [repr(float(v)) for v in traj.u_seq[k]]
            row += [repr(float(v)) for v in traj.y_seq[k]]
            wr.writerow(row)


def read_trajectory_csv(path) -> tuple[np.ndarray | None, np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(t, x or None, u, y)`` from a trajectory CSV."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float).reshape(len(rows) - 1, -1)
    idx = {name: j for j, name in enumerate(header)}

    def cols(prefix):
        names = sorted(
            (h for h in header if h.startswith(prefix) and h[1:].isdigit()),
            key=lambda s: int(s[1:]),
        )
        return body[:, [idx[h] for h in names]] if names else None

    x = cols("x")
    u, y = cols("u"), cols("y")
    if u is None or y is None:
        raise ValueError("trajectory CSV needs u and y columns")
    return body[:, idx["t"]].astype(int), x, u, y
