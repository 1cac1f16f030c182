"""Single-phase incompressible pressure proxy.

Two-point-flux finite volumes with harmonic inter-cell transmissibilities,
BHP-controlled wells through Peaceman well indices, and a Jacobi-
preconditioned conjugate-gradient solve of the SPD system. Reports signed
well rates in m^3/day (injection positive) and cell pressures in bar.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import WellSpec

MD_TO_M2 = 9.869232667160131e-16
BAR_TO_PA = 1.0e5
CP_TO_PAS = 1.0e-3
DAY_TO_S = 86400.0
DEFAULT_WELL_RADIUS_M = 0.1


class SolverError(RuntimeError):
    def __init__(self, message, residual_history=None):
        super().__init__(message)
        self.residual_history = residual_history or []


@dataclass
class FlowCase:
    shape: tuple[int, int, int]  # (nz, ny, nx)
    cell_size: tuple[float, float, float]  # (dz, dy, dx) meters
    permeability: np.ndarray  # md, shape == shape, > 0 everywhere
    wells: list[WellSpec]
    viscosity_cp: float = 1.0
    well_radius_m: float = DEFAULT_WELL_RADIUS_M

    def __post_init__(self):
        self.permeability = np.asarray(self.permeability, dtype=np.float64)
        if self.permeability.shape != tuple(self.shape):
            raise ValueError(
                f"permeability shape {self.permeability.shape} != grid {self.shape}"
            )
        if np.any(self.permeability <= 0):
            raise ValueError("permeability must be positive everywhere")
        roles = {w.role for w in self.wells}
        if not {"injector", "producer"} <= roles:
            raise ValueError("need at least one injector and one producer")

    @property
    def n_cells(self) -> int:
        nz, ny, nx = self.shape
        return nz * ny * nx


@dataclass
class WellRates:
    rates: dict[str, float]  # m^3/day, injection +, production -
    pressures: np.ndarray  # bar, grid shape
    residual_history: list = field(default_factory=list)

    @property
    def total_injection(self) -> float:
        return sum(r for r in self.rates.values() if r > 0)

    def mass_balance_error(self) -> float:
        total = sum(self.rates.values())
        scale = sum(abs(r) for r in self.rates.values())
        return abs(total) / scale if scale > 0 else 0.0


def _well_index(case: FlowCase, k_md: float) -> float:
    """Peaceman well index (m^3/(Pa s)) for a vertical well in one cell,
    isotropic permeability, anisotropic areal spacing."""
    dz, dy, dx = case.cell_size
    r_eq = 0.28 * np.sqrt(dx**2 + dy**2) / 2.0
    k = k_md * MD_TO_M2
    mu = case.viscosity_cp * CP_TO_PAS
    return 2.0 * np.pi * k * dz / (mu * np.log(r_eq / case.well_radius_m))


def assemble_system(case: FlowCase):
    """SPD pressure system A p = b in SI units (Pa)."""
    nz, ny, nx = case.shape
    dz, dy, dx = case.cell_size
    n = case.n_cells
    mu = case.viscosity_cp * CP_TO_PAS
    k = case.permeability * MD_TO_M2

    def idx(z, y, x):
        return (z * ny + y) * nx + x

    cell_ids = np.arange(n).reshape(nz, ny, nx)
    rows_parts, cols_parts, vals_parts = [], [], []
    diag = np.zeros(n)

    # harmonic two-point transmissibilities on interior faces
    for axis, (area, dist) in enumerate(
        ((dy * dx, dz), (dz * dx, dy), (dz * dy, dx))
    ):
        base = [slice(None)] * 3
        base[axis] = slice(None, -1)
        shifted = [slice(None)] * 3
        shifted[axis] = slice(1, None)
        ka = k[tuple(base)]
        kb = k[tuple(shifted)]
        t = ((area / (mu * dist)) * (2.0 * ka * kb / (ka + kb))).reshape(-1)
        ia = cell_ids[tuple(base)].reshape(-1)
        ib = cell_ids[tuple(shifted)].reshape(-1)
        rows_parts.extend((ia, ib))
        cols_parts.extend((ib, ia))
        vals_parts.extend((-t, -t))
        np.add.at(diag, ia, t)
        np.add.at(diag, ib, t)

    b = np.zeros(n)
    well_cells: dict[str, list[tuple[int, float]]] = {}
    for w in case.wells:
        cells = []
        for z in _perforated_z(w, nz):
            i = idx(z, w.j - 1, w.i - 1)
            wi = _well_index(case, case.permeability[z, w.j - 1, w.i - 1])
            diag[i] += wi
            b[i] += wi * w.bhp * BAR_TO_PA
            cells.append((i, wi))
        well_cells[w.name] = cells

    rows = np.concatenate(rows_parts + [np.arange(n)])
    cols = np.concatenate(cols_parts + [np.arange(n)])
    vals = np.concatenate(vals_parts + [diag])
    a = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return a, b, well_cells


def _perforated_z(w: WellSpec, nz: int) -> list[int]:
    layers: list[int] = []
    for rng in (w.perforated_channel_layers, w.perforated_levee_layers):
        if rng is not None:
            layers.extend(range(rng[0] - 1, rng[1]))
    layers = sorted(set(layers)) if layers else list(range(nz))
    return [z for z in layers if 0 <= z < nz]


def conjugate_gradient(a, b, rtol=1e-8, max_iter=None):
    """Jacobi-preconditioned CG; raises with the residual history when the
    iteration budget (10 N by default) is exhausted."""
    n = b.size
    max_iter = 10 * n if max_iter is None else max_iter
    x = np.zeros(n)
    r = b - a @ x
    norm_b = np.linalg.norm(b)
    if norm_b == 0:
        return x, []
    minv = 1.0 / a.diagonal()
    z = minv * r
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / norm_b]
    for _ in range(max_iter):
        if history[-1] <= rtol:
            return x, history
        ap = a @ p
        alpha = rz / (p @ ap)
        x += alpha * p
        r -= alpha * ap
        history.append(np.linalg.norm(r) / norm_b)
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not reach rtol {rtol} within {max_iter} iterations "
        f"(final residual {history[-1]:.3e})",
        residual_history=history,
    )


def solve_pressure(case: FlowCase, rtol: float = 1e-8) -> WellRates:
    a, b, well_cells = assemble_system(case)
    p, history = conjugate_gradient(a, b, rtol=rtol)
    rates = {}
    for w in case.wells:
        q = 0.0
        for i, wi in well_cells[w.name]:
            q += wi * (w.bhp * BAR_TO_PA - p[i])  # m^3/s, injection +
        rates[w.name] = q * DAY_TO_S
    pressures = (p / BAR_TO_PA).reshape(case.shape)
    return WellRates(rates=rates, pressures=pressures, residual_history=history)


def ensemble_statistics(
    rates_by_model: list[dict[str, float]], percentiles=(10, 50, 90)
) -> dict[str, dict[str, float]]:
    """Per-well and field-total percentile table over an ensemble of solves.

    Quantiles use linear interpolation of the empirical distribution."""
    if not rates_by_model:
        raise ValueError("empty rate set")
    wells = sorted(rates_by_model[0])
    table: dict[str, dict[str, float]] = {}
    for name in wells:
        values = np.array([r[name] for r in rates_by_model])
        table[name] = {
            f"P{q}": float(np.percentile(values, q)) for q in percentiles
        }
    totals = np.array(
        [sum(abs(v) for v in r.values()) / 2.0 for r in rates_by_model]
    )
    table["FIELD"] = {f"P{q}": float(np.percentile(totals, q)) for q in percentiles}
    return table
