"""Shared fixtures for the test suite (system draws, matched twin setups)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sddpc.chance import PolytopeSpec
from sddpc.controllers import HorizonConfig
from sddpc.datadriven import OfflineData
from sddpc.estimation import GaussianBelief
from sddpc.oracles import build_phi_oracles, matched_prior, sigma_rho
from sddpc.plant import LtiModel, minimal_L, random_minimal_model, simulate_open_loop, zero_noise


def scalar_model(a=0.5, b=1.0, c=1.0, sw=0.0, sv=1.0) -> LtiModel:
    return LtiModel([[a]], [[b]], [[c]], [[sw]], [[sv]])


def noise_free_data(model: LtiModel, T: int, rng: np.random.Generator) -> OfflineData:
    u = rng.standard_normal((T, model.m))
    traj = simulate_open_loop(model, np.zeros(model.n), u, zero_noise(model, T))
    return OfflineData(u, traj.y_seq)


def draw_system(rng, n_max=4, m_max=2, p_max=2, **kw) -> LtiModel:
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    p = int(rng.integers(1, p_max + 1))
    return random_minimal_model(rng, n, m, p, **kw)


@dataclass
class TwinSetup:
    model: LtiModel
    L: int
    cfg: HorizonConfig
    data: OfflineData
    spec: PolytopeSpec
    Q: np.ndarray
    R: np.ndarray
    refs: np.ndarray
    prior: GaussianBelief
    aux_prior: GaussianBelief
    Sigma_rho: np.ndarray
    x0: np.ndarray


def twin_setup(seed: int, *, N=6, N_c=2) -> TwinSetup:
    """Random minimal system with every hypothesis of the equivalence result
    enforced: exact data, matched noise-response covariance, matched priors.

    References are chosen so that output constraints bind on some steps.
    """
    rng = np.random.default_rng(1000 + seed)
    model = draw_system(rng, sigma_w=1e-3, sigma_v=1e-3, max_cond=100)
    L = minimal_L(model)
    T_d = max(120, 4 * (2 * L + model.n) * (model.m + 1))
    data = noise_free_data(model, T_d, rng)
    spec = PolytopeSpec.box(model.m, model.p, 0.6, 0.4)
    prior = GaussianBelief(0.05 * rng.standard_normal(model.n), 1e-3 * np.eye(model.n))
    oracles = build_phi_oracles(model, L)
    refs = rng.uniform(-0.45, 0.45, model.p)
    return TwinSetup(
        model, L, HorizonConfig(L, N, N_c), data, spec,
        1e2 * np.eye(model.p), np.eye(model.m), refs,
        prior, matched_prior(prior, oracles), sigma_rho(model, L), prior.mu.copy(),
    )


def rel_dev(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    s = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
    return 0.0 if s == 0 else float(np.max(np.abs(a - b)) / s)


# criterion number -> one summary line, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok
