"""PCA parameterization of geomodel ensembles.

The basis comes from the thin SVD of the centered, 1/sqrt(N_r - 1)-scaled
data matrix. Since the cell count dwarfs the ensemble size, the SVD is done
on the small Gram matrix and lifted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Geomodel, GridDims, ShapeError

# relative floor below which singular values are treated as exact zeros
_SV_FLOOR = 1e-10


@dataclass
class PcaBasis:
    dims: GridDims
    mean: np.ndarray  # (N_c,)
    u: np.ndarray  # (N_c, rank) orthonormal columns
    sigma: np.ndarray  # (rank,) positive, non-increasing
    energy_spectrum: np.ndarray  # all N_r - 1 squared singular values
    n_r: int
    l: int | None = None
    p: int | None = None
    kind: str = "continuous"

    @property
    def rank(self) -> int:
        return self.sigma.size

    def require_dims(self) -> tuple[int, int]:
        if self.l is None or self.p is None:
            raise ValueError("basis dimensions unset; call select_dims first")
        return self.l, self.p


def fit(ensemble: list[Geomodel]) -> PcaBasis:
    """Build the basis from an ensemble of geomodels sharing one grid."""
    if len(ensemble) < 2:
        raise ValueError(f"need at least 2 models to fit a basis, got {len(ensemble)}")
    dims = ensemble[0].dims
    for m in ensemble[1:]:
        if m.dims != dims:
            raise ShapeError(f"ensemble mixes grids {dims} and {m.dims}")
    n_r = len(ensemble)
    data = np.stack([m.flat for m in ensemble], axis=1).astype(np.float64)  # (N_c, N_r)
    mean = data.mean(axis=1)
    y = (data - mean[:, None]) / np.sqrt(n_r - 1)

    # eigen-decomposition of the small Gram matrix, lifted to cell space
    g = y.T @ y
    evals, vecs = np.linalg.eigh(g)
    order = np.argsort(evals)[::-1]
    evals = evals[order][: n_r - 1]
    vecs = vecs[:, order][:, : n_r - 1]
    evals = np.clip(evals, 0.0, None)
    sigma_all = np.sqrt(evals)

    floor = _SV_FLOOR * (sigma_all[0] if sigma_all.size else 0.0)
    keep = sigma_all > floor
    sigma = sigma_all[keep]
    u = (y @ vecs[:, keep]) / sigma[None, :]
    return PcaBasis(
        dims=dims,
        mean=mean,
        u=u,
        sigma=sigma,
        energy_spectrum=evals,
        n_r=n_r,
        kind=ensemble[0].kind if ensemble[0].kind == "continuous" else "continuous",
    )


def select_dims(basis: PcaBasis, energy_l: float, energy_p: float) -> tuple[int, int]:
    """Smallest dimensions whose cumulative energy reaches each threshold.

    Returns (l, p) and stores them on the basis; p perturbation-exempt
    coordinates protect the large-scale features."""
    if not (0.0 < energy_p < energy_l <= 1.0):
        raise ValueError(f"need 0 < energy_p < energy_l <= 1, got ({energy_l}, {energy_p})")
    total = basis.energy_spectrum.sum()
    if total <= 0:
        raise ValueError("degenerate ensemble: zero total energy")
    cum = np.cumsum(basis.energy_spectrum) / total
    l = int(np.searchsorted(cum, energy_l - 1e-12) + 1)
    p = int(np.searchsorted(cum, energy_p - 1e-12) + 1)
    l = min(l, basis.rank)
    p = min(p, l)
    basis.l, basis.p = l, p
    return l, p


def sample(basis: PcaBasis, xi: np.ndarray) -> Geomodel:
    """Decode a latent vector: mean + U_l Sigma_l xi."""
    l, _ = basis.require_dims()
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (l,):
        raise ShapeError(f"latent has shape {xi.shape}, basis expects ({l},)")
    values = basis.mean + basis.u[:, :l] @ (basis.sigma[:l] * xi)
    return Geomodel(basis.dims, values, kind="continuous", field_name="pca")


def project(basis: PcaBasis, m: Geomodel) -> np.ndarray:
    """Latent coordinates of a model: Sigma_l^-1 U_l^T (m - mean)."""
    l, _ = basis.require_dims()
    if m.dims != basis.dims:
        raise ShapeError(f"model grid {m.dims} != basis grid {basis.dims}")
    if np.any(basis.sigma[:l] <= 0):
        raise ValueError("retained singular value is zero; reduce l before projecting")
    return (basis.u[:, :l].T @ (m.flat - basis.mean)) / basis.sigma[:l]


def reconstruct(basis: PcaBasis, m: Geomodel, l: int | None = None) -> Geomodel:
    """Project then decode with the leading l components."""
    l_eff = basis.l if l is None else int(l)
    if l_eff is None or not (1 <= l_eff <= basis.rank):
        raise ValueError(f"l must be in [1, {basis.rank}], got {l_eff}")
    coeff = basis.u[:, :l_eff].T @ (m.flat - basis.mean)
    values = basis.mean + basis.u[:, :l_eff] @ coeff
    return Geomodel(basis.dims, values, kind="continuous", field_name="pca")


def perturb_and_reconstruct(
    basis: PcaBasis, m: Geomodel, rng: np.random.Generator
) -> tuple[np.ndarray, Geomodel]:
    """Project m, add unit-normal noise to coordinates above p, and decode.

    The first p coordinates pass through untouched so only the small-scale
    content of the reconstruction is disrupted."""
    l, p = basis.require_dims()
    xi = project(basis, m)
    xi_tilde = xi.copy()
    if l > p:
        xi_tilde[p:] += rng.standard_normal(l - p)
    return xi_tilde, sample(basis, xi_tilde)


def sample_latents(basis: PcaBasis, count: int, rng: np.random.Generator) -> np.ndarray:
    """count independent standard-normal latent vectors, shape (count, l)."""
    l, _ = basis.require_dims()
    return rng.standard_normal((count, l))
