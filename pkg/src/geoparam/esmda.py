"""Ensemble smoother with multiple data assimilation over latent vectors.

Each round runs the forward model on every member, then applies the Kalman-
type update with observation noise inflated by that round's factor; the
inverse inflation factors must sum to one. Observed-data perturbations are
redrawn every round from a round-indexed substream of the config seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .seeds import rng_for

DEFAULT_ALPHAS = (9.33, 7.0, 4.0, 2.0)
NOISE_FLOOR_M3_PER_DAY = 2.0
NOISE_RELATIVE = 0.01


@dataclass
class ObservationSet:
    d_obs: np.ndarray  # (N_d,)
    std: np.ndarray  # (N_d,) diagonal error standard deviations
    labels: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.d_obs = np.asarray(self.d_obs, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.d_obs.shape != self.std.shape or self.d_obs.ndim != 1:
            raise ValueError("d_obs and std must be matching 1D arrays")
        if np.any(self.std <= 0):
            raise ValueError("observation error std must be positive")

    @property
    def n_d(self) -> int:
        return self.d_obs.size

    @property
    def c_d(self) -> np.ndarray:
        return self.std**2

    def to_json(self, path) -> None:
        rows = []
        for i, (v, s) in enumerate(zip(self.d_obs, self.std)):
            meta = self.labels[i] if i < len(self.labels) else {}
            rows.append(
                {
                    "well": meta.get("well", f"obs{i}"),
                    "quantity": meta.get("quantity", "rate_m3_per_day"),
                    "time_label": meta.get("time_label", "t0"),
                    "value": float(v),
                    "std": float(s),
                }
            )
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=1)

    @staticmethod
    def from_json(path) -> "ObservationSet":
        with open(path) as fh:
            rows = json.load(fh)
        return ObservationSet(
            d_obs=np.array([r["value"] for r in rows]),
            std=np.array([r["std"] for r in rows]),
            labels=[
                {k: r[k] for k in ("well", "quantity", "time_label")} for r in rows
            ],
        )


def observation_std(values: np.ndarray) -> np.ndarray:
    """Per-datum standard deviation: 1% of magnitude, floored at 2 m^3/day."""
    return np.maximum(NOISE_RELATIVE * np.abs(values), NOISE_FLOOR_M3_PER_DAY)


@dataclass
class EsmdaConfig:
    ensemble_size: int
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    seed: int = 0

    def __post_init__(self):
        if self.ensemble_size < 2:
            raise ValueError("ensemble size must be at least 2")
        total = sum(1.0 / a for a in self.alphas)
        if abs(total - 1.0) > 1e-3:
            raise ValueError(
                f"inflation schedule inconsistent: sum(1/alpha) = {total:.6f} != 1"
            )


@dataclass
class EsmdaState:
    xi: np.ndarray  # (N_e, l)
    simulated: np.ndarray | None = None  # (N_e, N_d)
    iteration: int = 0

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=np.float64)
        if self.xi.ndim != 2:
            raise ValueError(f"latent ensemble must be 2D, got {self.xi.shape}")


def forward_all(state: EsmdaState, forward) -> np.ndarray:
    """Run the forward model for every member; rows follow ensemble order.

    `forward` maps one latent vector to the simulated data vector."""
    rows = []
    for j, xi in enumerate(state.xi):
        try:
            d = np.asarray(forward(xi), dtype=np.float64)
        except Exception as exc:
            raise RuntimeError(f"forward model failed for member {j}: {exc}") from exc
        rows.append(d)
    sim = np.stack(rows)
    state.simulated = sim
    return sim


def update(
    state: EsmdaState,
    obs: ObservationSet,
    alpha: float,
    rng: np.random.Generator,
) -> EsmdaState:
    """One assimilation: xi_u = xi + C_xd (C_dd + alpha C_d)^-1 (d* - d),
    with d* ~ N(d_obs, alpha C_d) freshly drawn per member.

    Covariances are the 1/(N_e - 1) centered ensemble estimates; the data
    system is solved through its Cholesky factorization."""
    if state.simulated is None:
        raise ValueError("run forward_all before update")
    xi = state.xi
    d = state.simulated
    n_e = xi.shape[0]
    if d.shape[0] != n_e:
        raise ValueError("simulated data rows do not match the ensemble")
    xi_c = xi - xi.mean(axis=0)
    d_c = d - d.mean(axis=0)
    c_xd = xi_c.T @ d_c / (n_e - 1)
    c_dd = d_c.T @ d_c / (n_e - 1)
    a = c_dd + alpha * np.diag(obs.c_d)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite simulated data in the update system")
    chol = np.linalg.cholesky(a)
    d_star = obs.d_obs[None, :] + np.sqrt(alpha) * obs.std[None, :] * rng.standard_normal(
        (n_e, obs.n_d)
    )
    innov = d_star - d  # (N_e, N_d)
    sol = np.linalg.solve(chol.T, np.linalg.solve(chol, innov.T))  # (N_d, N_e)
    xi_u = xi + (c_xd @ sol).T
    return EsmdaState(xi=xi_u, simulated=None, iteration=state.iteration + 1)


def data_mismatch(simulated: np.ndarray, obs: ObservationSet) -> float:
    """Ensemble-mean objective (d - d_obs)^T C_d^-1 (d - d_obs)."""
    diff = simulated - obs.d_obs[None, :]
    return float(np.mean(np.sum(diff**2 / obs.c_d[None, :], axis=1)))


def run(
    prior: EsmdaState,
    obs: ObservationSet,
    config: EsmdaConfig,
    forward,
) -> tuple[EsmdaState, list[float]]:
    """Full multiple-data-assimilation loop.

    Returns the posterior state (with posterior simulated data) and the
    mismatch history: one entry per round plus the final posterior value."""
    state = prior
    history: list[float] = []
    for round_idx, alpha in enumerate(config.alphas):
        sim = forward_all(state, forward)
        history.append(data_mismatch(sim, obs))
        rng = rng_for(config.seed, "esmda", index=round_idx)
        state = update(state, obs, alpha, rng)
    sim = forward_all(state, forward)
    history.append(data_mismatch(sim, obs))
    return state, history
