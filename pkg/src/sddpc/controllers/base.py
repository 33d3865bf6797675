"""Shared controller plumbing: horizons, references, policies and event logs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ControllerInfeasible(RuntimeError):
    """Raised (when configured to) if a control step cannot be planned."""

    def __init__(self, msg: str, control_step: int):
        super().__init__(msg)
        self.control_step = control_step


@dataclass(frozen=True)
class HorizonConfig:
    """``L`` past samples, prediction horizon ``N``, control horizon ``N_c``."""

    L: int = 10
    N: int = 30
    N_c: int = 10

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if not 1 <= self.N_c <= self.N:
            raise ValueError(f"need 1 <= N_c <= N, got N_c={self.N_c}, N={self.N}")


class ReferenceSchedule:
    """Piecewise-constant reference.

    ``segments`` is a list of ``(t_start, value)`` pairs; the first segment
    must start at or before the first queried time.  The last value is held
    indefinitely.
    """

    def __init__(self, segments, p: int | None = None):
        segs = sorted(((int(t), np.atleast_1d(np.asarray(v, float))) for t, v in segments),
                      key=lambda s: s[0])
        if not segs:
            raise ValueError("reference schedule needs at least one segment")
        dims = {v.size for _, v in segs}
        if len(dims) != 1 or (p is not None and dims != {p}):
            raise ValueError("reference values have inconsistent dimension")
        self._starts = np.array([t for t, _ in segs])
        self._values = np.vstack([v for _, v in segs])

    @classmethod
    def constant(cls, value) -> "ReferenceSchedule":
        return cls([(0, value)])

    @classmethod
    def coerce(cls, refs, p: int) -> "ReferenceSchedule":
        if isinstance(refs, ReferenceSchedule):
            if refs.p != p:
                raise ValueError("reference dimension mismatch")
            return refs
        return cls([(0, np.broadcast_to(np.asarray(refs, float), (p,)))], p)

    @property
    def p(self) -> int:
        return self._values.shape[1]

    @property
    def start(self) -> int:
        return int(self._starts[0])

    def at(self, t: int) -> np.ndarray:
        if t < self._starts[0]:
            raise ValueError(f"reference undefined at t={t}")
        i = int(np.searchsorted(self._starts, t, side="right")) - 1
        return self._values[i].copy()

    def window(self, t: int, N: int) -> np.ndarray:
        return np.vstack([self.at(t + j) for j in range(N)])

    def to_json(self) -> list:
        return [[int(t), v.tolist()] for t, v in zip(self._starts, self._values)]


@dataclass(frozen=True)
class PolicySchedule:
    """Affine policies ``u_t = u_nom[t] + K (xhat_t - x_nom[t])`` planned at
    control step ``k``.  ``x_nom`` has ``N + 1`` rows."""

    k: int
    u_nom: np.ndarray
    x_nom: np.ndarray
    y_nom: np.ndarray
    K: np.ndarray
    cost: float = float("nan")

    def input(self, j: int, xhat: np.ndarray) -> np.ndarray:
        return self.u_nom[j] + self.K @ (xhat - self.x_nom[j])


@dataclass
class StepRecord:
    t: int
    k: int
    u: np.ndarray
    xhat: np.ndarray | None = None


@dataclass
class ControllerLog:
    events: list[dict[str, Any]] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    ira_iterations: list[int] = field(default_factory=list)

    def event(self, t: int, kind: str, **detail) -> None:
        self.events.append({"t": int(t), "kind": kind, **detail})

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e["kind"] == kind)


class PredictiveController:
    """Common receding-horizon skeleton.

    Subclasses implement :meth:`_plan` (called every ``N_c`` steps) and
    :meth:`_apply` (called every step).  The instance is the plant callback
    ``(t, y_t) -> u_t``.
    """

    name = "controller"

    def __init__(self, cfg: HorizonConfig, *, on_infeasible: str = "hold"):
        if on_infeasible not in ("hold", "raise"):
            raise ValueError("on_infeasible must be 'hold' or 'raise'")
        self.cfg = cfg
        self.on_infeasible = on_infeasible
        self.log = ControllerLog()
        self.hooks: list[Callable[[int], None]] = []
        self._j = cfg.N_c  # forces a plan on the first call
        self._k: int | None = None

    def on_control_step(self, k: int) -> None:
        for hook in self.hooks:
            hook(k)

    def __call__(self, t: int, y) -> np.ndarray:
        y = np.asarray(y, float).reshape(-1)
        if self._j >= self.cfg.N_c:
            self._k = t
            self._j = 0
            self.on_control_step(t)
            self._plan(t)
        u = self._apply(t, self._j, y)
        self._j += 1
        self.log.steps.append(StepRecord(t, self._k, u.copy(), getattr(self, "_last_xhat", None)))
        return u

    def _plan(self, t: int) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def _apply(self, t: int, j: int, y: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def observe(self, t: int, y, u) -> None:
        """Feed a measurement/input pair while the controller is switched off."""
        raise NotImplementedError
