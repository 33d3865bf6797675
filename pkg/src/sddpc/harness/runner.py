"""Experiment execution, metrics and reports."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..chance import PolytopeSpec
from ..controllers import (
    HorizonConfig,
    ReferenceSchedule,
    deepc_controller,
    mpc_controller,
    sddpc_controller,
    smpc_controller,
    spc_controller,
)
from ..datadriven import OfflineData, default_sigma_rho, is_persistently_exciting
from ..estimation import (
    GaussianBelief,
    io_variances,
    kalman_schedule,
    propagate_joint_covariance,
)
from ..oracles import build_phi_oracles, matched_prior, sigma_rho as model_sigma_rho
from ..plant import (
    LtiModel,
    NoiseRealization,
    Trajectory,
    check_assumption_dims,
    noise_generator,
    psd_sqrt,
    random_minimal_model,
    sample_noise,
    simulate_closed_loop,
    simulate_open_loop,
    write_trajectory_csv,
    zero_noise,
)
from .config import ConfigError, ExperimentConfig, _matrix, _vector

# stream offset separating offline-data noise from closed-loop noise
DATA_STREAM_OFFSET = 1 << 20
INPUT_CHANNEL = 2
MC_CHANNEL = 3


# ----------------------------------------------------------------------
# Building blocks from configuration
# ----------------------------------------------------------------------


def build_plant(cfg: ExperimentConfig) -> LtiModel:
    plant = cfg["plant"]
    if "random" in plant:
        gen = plant["random"]
        rng = np.random.default_rng(np.random.SeedSequence([int(gen.get("seed", cfg.seed)), 7]))
        return random_minimal_model(
            rng, int(gen["n"]), int(gen["m"]), int(gen["p"]),
            sigma_w=float(plant.get("Sigma_w", 1e-4)),
            sigma_v=float(plant.get("Sigma_v", 1e-4)),
        )
    A = np.atleast_2d(np.asarray(plant["A"], float))
    n = A.shape[0]
    B = np.asarray(plant["B"], float).reshape(n, -1)
    C = np.asarray(plant["C"], float).reshape(-1, n)
    try:
        return LtiModel(
            A, B, C,
            _matrix(plant.get("Sigma_w", 1e-4), n, n, "plant.Sigma_w"),
            _matrix(plant.get("Sigma_v", 1e-4), C.shape[0], C.shape[0], "plant.Sigma_v"),
        )
    except ValueError as exc:
        raise ConfigError(f"plant: {exc}") from exc


def build_spec(cfg: ExperimentConfig, m: int, p: int) -> PolytopeSpec:
    c = cfg["constraints"]
    try:
        if "E_u" in c:
            return PolytopeSpec(c["E_u"], c["f_u"], c["E_y"], c["f_y"], float(c["p_u"]), float(c["p_y"]))
        return PolytopeSpec.box(m, p, float(c["u_max"]), float(c["y_max"]),
                                float(c.get("p_u", 0.2)), float(c.get("p_y", 0.2)))
    except ValueError as exc:
        raise ConfigError(f"constraints: {exc}") from exc


def build_horizon(cfg: ExperimentConfig) -> HorizonConfig:
    h = cfg["horizon"]
    return HorizonConfig(int(h["L"]), int(h["N"]), int(h["N_c"]))


def build_reference(cfg: ExperimentConfig, p: int) -> ReferenceSchedule:
    try:
        segs = [(int(t), np.broadcast_to(np.asarray(v, float), (p,))) for t, v in cfg["reference"]]
        return ReferenceSchedule(segs, p)
    except ValueError as exc:
        raise ConfigError(f"reference: {exc}") from exc


def initial_state(cfg: ExperimentConfig, model: LtiModel) -> np.ndarray:
    x0 = cfg["x0"]
    return np.zeros(model.n) if x0 is None else _vector(x0, model.n, "x0")


def build_prior(cfg: ExperimentConfig, model: LtiModel) -> GaussianBelief:
    pr = cfg["prior"] or {}
    mu = _vector(pr["mean"], model.n, "prior.mean") if "mean" in pr else initial_state(cfg, model)
    Sigma = _matrix(pr.get("cov", 0.0), model.n, model.n, "prior.cov")
    try:
        return GaussianBelief(mu, Sigma)
    except ValueError as exc:
        raise ConfigError(f"prior: {exc}") from exc


def collect_offline_data(
    model: LtiModel, cfg: ExperimentConfig, *, noisy: bool | None = None
) -> OfflineData:
    """Open-loop experiment with white Gaussian input from the zero state."""
    od = cfg["offline_data"]
    if "csv" in od:
        try:
            return OfflineData.from_csv(od["csv"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"offline_data.csv: {exc}") from exc
    T_d = int(od["T_d"])
    stream = DATA_STREAM_OFFSET + cfg.stream
    u = float(od.get("input_std", 1.0)) * noise_generator(
        cfg.seed, stream, INPUT_CHANNEL).standard_normal((T_d, model.m))
    use_noise = bool(od.get("noisy", True)) if noisy is None else noisy
    noise = sample_noise(model, T_d, cfg.seed, stream) if use_noise else zero_noise(model, T_d)
    traj = simulate_open_loop(model, np.zeros(model.n), u, noise)
    return OfflineData(u, traj.y_seq)


def _sigma_rho(cfg: ExperimentConfig, model: LtiModel, L: int) -> np.ndarray:
    val = cfg["controller"]["sigma_rho"]
    pL = model.p * L
    if isinstance(val, str):
        if val != "model":
            raise ConfigError("controller.sigma_rho must be a number, a matrix or 'model'")
        return model_sigma_rho(model, L)
    if np.isscalar(val):
        return default_sigma_rho(L, model.p, float(val))
    return _matrix(val, pL, pL, "controller.sigma_rho")


def build_controller(cfg: ExperimentConfig, model: LtiModel, data: OfflineData | None = None):
    c = cfg["controller"]
    kind = cfg.controller_type
    hz = build_horizon(cfg)
    spec = build_spec(cfg, model.m, model.p)
    Q = _matrix(cfg["cost"]["Q"], model.p, model.p, "cost.Q")
    R = _matrix(cfg["cost"]["R"], model.m, model.m, "cost.R")
    refs = build_reference(cfg, model.p)
    prior = build_prior(cfg, model)
    common = dict(on_infeasible=c["on_infeasible"])
    ira = dict(alpha=float(c["alpha"]), eps=float(c["eps"]), max_iter=int(c["max_iter"]))
    try:
        if kind == "smpc":
            ctrl = smpc_controller(model, hz, spec, Q, R, refs, prior, **ira, **common)
        elif kind == "mpc":
            ctrl = mpc_controller(model, hz, spec, Q, R, refs, prior, **common)
        else:
            if data is None:
                data = collect_offline_data(model, cfg)
            if kind == "sddpc":
                Sv = model.Sigma_v if c["sigma_v"] is None else _matrix(
                    c["sigma_v"], model.p, model.p, "controller.sigma_v")
                aux_prior = None
                if c["aux_prior"] == "matched":
                    aux_prior = matched_prior(prior, build_phi_oracles(model, hz.L))
                ctrl = sddpc_controller(
                    data, hz, spec, Q, R, refs, _sigma_rho(cfg, model, hz.L), Sv, aux_prior,
                    recovery=c["recovery"], lam=float(c["lambda"]), **ira, **common,
                )
            elif kind == "deepc":
                ctrl = deepc_controller(data, hz, spec, Q, R, refs,
                                        float(c["lambda_y"]), float(c["lambda_g"]), **common)
            else:
                ctrl = spc_controller(data, hz, spec, Q, R, refs, float(c["lambda"]), **common)
    except (ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"controller setup failed: {exc}") from exc
    ctrl.name = cfg.label
    return ctrl


# ----------------------------------------------------------------------
# Reports
# ----------------------------------------------------------------------


def stage_costs(u, y, r, Q, R) -> np.ndarray:
    e = y - r
    return np.einsum("ti,ij,tj->t", e, Q, e) + np.einsum("ti,ij,tj->t", u, R, u)


def violation_amounts(E, f, z) -> np.ndarray:
    """``max(0, e_i' z_t - f_i)`` as (T, rows)."""
    return np.maximum(0.0, z @ E.T - f[None, :])


@dataclass
class RunReport:
    label: str
    seed: int
    stream: int
    warmup: int
    trajectory: Trajectory
    r: np.ndarray
    stage_cost: np.ndarray
    viol_y: np.ndarray
    viol_u: np.ndarray
    ira_iterations: list[int]
    events: list[dict]
    wall_time: float = 0.0

    @property
    def controlled(self) -> slice:
        return slice(self.warmup, None)

    @property
    def cumulative_cost(self) -> float:
        return float(np.sum(self.stage_cost[self.controlled]))

    @property
    def steps(self) -> int:
        return int(self.stage_cost[self.controlled].size)

    @property
    def violation_count(self) -> int:
        return int(np.sum(np.any(self.viol_y[self.controlled] > 0, axis=1)))

    @property
    def violation_rate(self) -> float:
        return self.violation_count / max(self.steps, 1)

    @property
    def row_violation_rate(self) -> list[float]:
        v = self.viol_y[self.controlled] > 0
        return [float(x) for x in v.mean(axis=0)] if v.size else []

    @property
    def total_violation_amount(self) -> float:
        return float(np.sum(self.viol_y[self.controlled]))

    @property
    def infeasible_events(self) -> int:
        return sum(1 for e in self.events if e["kind"] == "infeasible")

    def summary(self) -> dict:
        return {
            "controller": self.label,
            "seed": self.seed,
            "stream": self.stream,
            "steps": self.steps,
            "cumulative_cost": self.cumulative_cost,
            "violation_count": self.violation_count,
            "violation_rate": self.violation_rate,
            "row_violation_rate": self.row_violation_rate,
            "total_violation_amount": self.total_violation_amount,
            "ira_iterations": list(map(int, self.ira_iterations)),
            "infeasible_events": self.infeasible_events,
        }

    def to_dict(self) -> dict:
        tr = self.trajectory
        records = []
        for k in range(tr.T):
            records.append({
                "t": tr.t0 + k,
                "controlled": k >= self.warmup,
                "u": tr.u_seq[k].tolist(),
                "y": tr.y_seq[k].tolist(),
                "r": self.r[k].tolist(),
                "stage_cost": float(self.stage_cost[k]),
                "violation_y": self.viol_y[k].tolist(),
                "violation_u": self.viol_u[k].tolist(),
            })
        return {"summary": self.summary(), "events": self.events, "records": records}

    def write(self, out_dir, stem: str = "run") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}_trajectory.csv", out / f"{stem}_report.json"
        write_trajectory_csv(csv_path, self.trajectory)
        json_path.write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")
        return csv_path, json_path


def run_experiment(
    cfg: ExperimentConfig,
    *,
    out_dir=None,
    model: LtiModel | None = None,
    data: OfflineData | None = None,
    noise: NoiseRealization | None = None,
) -> RunReport:
    """Simulate one closed-loop run; optionally write CSV + JSON to ``out_dir``."""
    model = model or build_plant(cfg)
    ctrl = build_controller(cfg, model, data)
    T = cfg.T
    noise = noise or sample_noise(model, T, cfg.seed, cfg.stream)
    warm = cfg["warmup_inputs"]
    warm = np.zeros((0, model.m)) if warm is None else np.asarray(warm, float).reshape(-1, model.m)
    n_warm = warm.shape[0]

    def policy(t, y):
        if t < n_warm:
            ctrl.observe(t, y, warm[t])
            return warm[t]
        return ctrl(t, y)

    tic = time.perf_counter()
    traj = simulate_closed_loop(model, policy, initial_state(cfg, model), noise, T)
    wall = time.perf_counter() - tic
    refs = build_reference(cfg, model.p)
    r = np.vstack([refs.at(t) for t in range(T)])
    spec = build_spec(cfg, model.m, model.p)
    Q = _matrix(cfg["cost"]["Q"], model.p, model.p, "cost.Q")
    R = _matrix(cfg["cost"]["R"], model.m, model.m, "cost.R")
    report = RunReport(
        cfg.label, cfg.seed, cfg.stream, n_warm, traj, r,
        stage_costs(traj.u_seq, traj.y_seq, r, Q, R),
        violation_amounts(spec.E_y, spec.f_y, traj.y_seq),
        violation_amounts(spec.E_u, spec.f_u, traj.u_seq),
        list(ctrl.log.ira_iterations), list(ctrl.log.events), wall,
    )
    if out_dir is not None:
        report.write(out_dir)
    return report


# ----------------------------------------------------------------------
# Equivalence of the model-based and data-driven controllers
# ----------------------------------------------------------------------


def relative_deviation(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


@dataclass
class EquivalenceReport:
    passed: bool
    max_deviation: float
    deviations: dict
    diagnostics: list[str]
    tolerance: float
    steps: int
    smpc: Trajectory | None = None
    sddpc: Trajectory | None = None

    @property
    def assumptions_ok(self) -> bool:
        return not self.diagnostics

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_deviation": self.max_deviation,
            "deviations": self.deviations,
            "diagnostics": self.diagnostics,
            "tolerance": self.tolerance,
            "steps": self.steps,
        }


def equivalence_check(
    cfg: ExperimentConfig,
    *,
    tol: float = 1e-6,
    sigma_rho=None,
    model: LtiModel | None = None,
    noise: NoiseRealization | None = None,
) -> EquivalenceReport:
    """Run SMPC on the true model and SDDPC on noise-free data under matched
    settings and report the largest relative trajectory deviation.

    ``sigma_rho`` overrides the matched process-noise response covariance
    (used to check that a mismatch is detected); ``noise`` replaces the
    seeded plant noise.
    """
    model = model or build_plant(cfg)
    hz = build_horizon(cfg)
    L, n = hz.L, model.n
    diagnostics = list(check_assumption_dims(model, L).problems)
    data = collect_offline_data(model, cfg, noisy=False)
    if not is_persistently_exciting(data.u_d, 2 * L + n):
        diagnostics.append(f"offline input is not persistently exciting of order {2 * L + n}")
    if diagnostics:
        return EquivalenceReport(False, float("nan"), {}, diagnostics, tol, 0)
    spec = build_spec(cfg, model.m, model.p)
    Q = _matrix(cfg["cost"]["Q"], model.p, model.p, "cost.Q")
    R = _matrix(cfg["cost"]["R"], model.m, model.m, "cost.R")
    refs = build_reference(cfg, model.p)
    prior = build_prior(cfg, model)
    oracles = build_phi_oracles(model, L)
    aux_prior = matched_prior(prior, oracles)
    S_rho = model_sigma_rho(model, L) if sigma_rho is None else np.asarray(sigma_rho, float)
    ira = dict(alpha=float(cfg["controller"]["alpha"]), eps=float(cfg["controller"]["eps"]),
               max_iter=int(cfg["controller"]["max_iter"]))
    c1 = smpc_controller(model, hz, spec, Q, R, refs, prior, **ira)
    c2 = sddpc_controller(data, hz, spec, Q, R, refs, S_rho, model.Sigma_v, aux_prior,
                          recovery="exact", **ira)
    T = cfg.T
    noise = noise or sample_noise(model, T, cfg.seed, cfg.stream)
    x0 = initial_state(cfg, model)
    t1 = simulate_closed_loop(model, c1, x0, noise, T)
    t2 = simulate_closed_loop(model, c2, x0, noise, T)
    dev = {
        "x": relative_deviation(t1.x_seq, t2.x_seq),
        "u": relative_deviation(t1.u_seq, t2.u_seq),
        "y": relative_deviation(t1.y_seq, t2.y_seq),
    }
    worst = max(dev.values())
    return EquivalenceReport(worst <= tol, worst, dev, [], tol, T, t1, t2)


# ----------------------------------------------------------------------
# Monte-Carlo validation of the input/output distribution
# ----------------------------------------------------------------------


@dataclass
class McReport:
    samples: int
    horizon: int
    z_mean_u: np.ndarray
    z_mean_y: np.ndarray
    z_cov_u: np.ndarray
    z_cov_y: np.ndarray
    mean_u: np.ndarray
    mean_y: np.ndarray
    cov_u: np.ndarray
    cov_y: np.ndarray
    u_nom: np.ndarray
    y_nom: np.ndarray
    Sigma_u: np.ndarray
    Sigma_y: np.ndarray
    threshold: float = 4.0

    @property
    def max_z(self) -> float:
        return float(max(np.max(np.abs(z), initial=0.0)
                         for z in (self.z_mean_u, self.z_mean_y, self.z_cov_u, self.z_cov_y)))

    @property
    def passed(self) -> bool:
        return self.max_z <= self.threshold

    def to_dict(self) -> dict:
        return {
            "samples": self.samples,
            "horizon": self.horizon,
            "max_z": self.max_z,
            "passed": self.passed,
            "threshold": self.threshold,
            "max_z_mean_u": float(np.max(np.abs(self.z_mean_u), initial=0.0)),
            "max_z_mean_y": float(np.max(np.abs(self.z_mean_y), initial=0.0)),
            "max_z_cov_u": float(np.max(np.abs(self.z_cov_u), initial=0.0)),
            "max_z_cov_y": float(np.max(np.abs(self.z_cov_y), initial=0.0)),
        }


def _z_scores(samples: np.ndarray, mean: np.ndarray, cov: np.ndarray):
    """z-scores of the sample mean and sample covariance (Gaussian SEs)."""
    M = samples.shape[0]
    emp_mean = samples.mean(axis=0)
    c = samples - emp_mean
    emp_cov = c.T @ c / (M - 1)
    var = np.diag(cov)
    se_mean = np.sqrt(np.maximum(var, 0.0) / M)
    dm = emp_mean - mean
    z_mean = np.where(se_mean > 0, dm / np.where(se_mean > 0, se_mean, 1.0),
                      np.where(np.abs(dm) <= 1e-12 * (1 + np.abs(mean)), 0.0, np.inf))
    se_cov = np.sqrt((np.outer(var, var) + cov ** 2) / M)
    dc = emp_cov - cov
    z_cov = np.where(se_cov > 0, dc / np.where(se_cov > 0, se_cov, 1.0),
                     np.where(np.abs(dc) <= 1e-12, 0.0, np.inf))
    return z_mean, z_cov, emp_mean, emp_cov


def mc_validate_distribution(cfg: ExperimentConfig, M: int = 100_000, *,
                             model: LtiModel | None = None) -> McReport:
    """Freeze the first SMPC plan and check the closed-loop input/output
    distribution over its horizon against the propagated moments."""
    if M < 2:
        raise ConfigError("need at least two Monte-Carlo samples")
    model = model or build_plant(cfg)
    ctrl = build_controller(cfg.with_overrides(controller={"type": "smpc"}), model)
    prior = ctrl.prior
    pol = ctrl.plan(0)
    N = ctrl.cfg.N
    sched = kalman_schedule(model, prior, N)
    joint = propagate_joint_covariance(model, ctrl.K, sched, prior, N)
    Su, Sy = io_variances(model, ctrl.K, joint)
    n, m, p = model.n, model.m, model.p
    base = noise_generator(cfg.seed, cfg.stream, MC_CHANNEL)
    x = prior.mu + base.standard_normal((M, n)) @ psd_sqrt(prior.Sigma).T
    sw, sv = psd_sqrt(model.Sigma_w).T, psd_sqrt(model.Sigma_v).T
    xm = np.broadcast_to(prior.mu, (M, n)).copy()
    us = np.empty((N, M, m))
    ys = np.empty((N, M, p))
    A, B, C, K = model.A, model.B, model.C, ctrl.K
    for t in range(N):
        y = x @ C.T + base.standard_normal((M, p)) @ sv
        xhat = xm + (y - xm @ C.T) @ sched.gains[t].T
        u = pol.u_nom[t] + (xhat - pol.x_nom[t]) @ K.T
        x = x @ A.T + u @ B.T + base.standard_normal((M, n)) @ sw
        xm = xhat @ A.T + u @ B.T
        us[t], ys[t] = u, y
    zmu, zmy, zcu, zcy = [], [], [], []
    emu, emy, ecu, ecy = [], [], [], []
    for t in range(N):
        a, b, c, d = _z_scores(us[t], pol.u_nom[t], Su[t])
        zmu.append(a); zcu.append(b); emu.append(c); ecu.append(d)
        a, b, c, d = _z_scores(ys[t], pol.y_nom[t], Sy[t])
        zmy.append(a); zcy.append(b); emy.append(c); ecy.append(d)
    return McReport(
        M, N, np.array(zmu), np.array(zmy), np.array(zcu), np.array(zcy),
        np.array(emu), np.array(emy), np.array(ecu), np.array(ecy),
        pol.u_nom, pol.y_nom, np.array(Su), np.array(Sy),
    )


# ----------------------------------------------------------------------
# Controller comparison
# ----------------------------------------------------------------------

TABLE_COLUMNS = ("Controller", "Violation Rate", "Total Violation Amount",
                 "Cumulative Cost", "Runs", "Infeasible Events")


def _run_summary(raw: dict) -> dict:
    return run_experiment(ExperimentConfig.from_dict(raw)).summary()


def expand_comparison(cfg: ExperimentConfig) -> list[tuple[str, list[dict]]]:
    """Per-controller list of run configurations (run ``i`` uses stream ``i``)."""
    entries = cfg["controllers"] or [dict(cfg["controller"])]
    base = {k: v for k, v in cfg.raw.items() if k not in ("controllers", "runs")}
    out = []
    for entry in entries:
        runs = []
        for i in range(int(cfg["runs"])):
            raw = dict(base)
            raw["controller"] = {**cfg["controller"], "label": None, **entry}
            raw["stream"] = cfg.stream + i
            runs.append(raw)
        label = ExperimentConfig.from_dict(runs[0]).label
        out.append((label, runs))
    return out


def compare_controllers(cfg: ExperimentConfig, *, workers: int = 1, out_dir=None) -> list[dict]:
    """Run every listed controller on shared plant noise; one table row each.

    Rates are pooled over all controlled steps; amounts and costs are means
    over runs.
    """
    plan = expand_comparison(cfg)
    jobs = [raw for _, runs in plan for raw in runs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_run_summary, jobs))
    else:
        summaries = [_run_summary(raw) for raw in jobs]
    rows, pos = [], 0
    for label, runs in plan:
        chunk = summaries[pos:pos + len(runs)]
        pos += len(runs)
        steps = sum(s["steps"] for s in chunk)
        rows.append({
            "Controller": label,
            "Violation Rate": sum(s["violation_count"] for s in chunk) / max(steps, 1),
            "Total Violation Amount": float(np.mean([s["total_violation_amount"] for s in chunk])),
            "Cumulative Cost": float(np.mean([s["cumulative_cost"] for s in chunk])),
            "Runs": len(chunk),
            "Infeasible Events": sum(s["infeasible_events"] for s in chunk),
        })
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "comparison.csv")
    return rows


def write_table(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(TABLE_COLUMNS)
        for row in rows:
            wr.writerow([row[c] if isinstance(row[c], (str, int)) else repr(float(row[c]))
                         for c in TABLE_COLUMNS])
