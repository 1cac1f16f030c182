"""Grid geometry, geomodel containers, well specs, and hard-data masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FACIES_MUD = 0
FACIES_CHANNEL = 1
FACIES_LEVEE = 2


class ShapeError(ValueError):
    """Inconsistent grid/tensor dimensions."""


class ConditioningError(RuntimeError):
    """Hard-data conditioning could not be satisfied."""


@dataclass(frozen=True)
class GridDims:
    """Cartesian grid: nx/ny must be divisible by 4 and nz by 2 so the
    transform net's stride-2 down/upsampling cascade preserves shape."""

    nx: int
    ny: int
    nz: int
    dx: float = 20.0
    dy: float = 20.0
    dz: float = 5.0

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if getattr(self, name) <= 0:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.nx % 4 or self.ny % 4 or self.nz % 2:
            raise ShapeError(
                f"grid ({self.nx}, {self.ny}, {self.nz}) must satisfy "
                "nx % 4 == 0, ny % 4 == 0, nz % 2 == 0"
            )
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ShapeError("cell sizes must be positive")

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape (nz, ny, nx); x runs fastest in memory."""
        return (self.nz, self.ny, self.nx)


@dataclass
class Geomodel:
    """One 3D cell-property field: facies codes or a continuous property."""

    dims: GridDims
    values: np.ndarray
    kind: str = "facies"  # "facies" | "continuous"
    field_name: str = "facies"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.size != self.dims.n_cells:
            raise ShapeError(
                f"values has {self.values.size} entries, grid has {self.dims.n_cells} cells"
            )
        self.values = self.values.reshape(self.dims.shape)
        if self.kind not in ("facies", "continuous"):
            raise ValueError(f"unknown geomodel kind {self.kind!r}")
        if self.kind == "facies":
            codes = np.unique(self.values)
            if not np.all(np.isin(codes, (FACIES_MUD, FACIES_CHANNEL, FACIES_LEVEE))):
                raise ValueError(f"facies model holds non-code values {codes[:6]}")

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def copy(self) -> "Geomodel":
        return Geomodel(self.dims, self.values.copy(), self.kind, self.field_name)


@dataclass(frozen=True)
class WellSpec:
    """Vertical well at areal indices (i, j), 1-based. Layer ranges are
    1-based inclusive (top layer = 1)."""

    name: str
    i: int
    j: int
    role: str  # "injector" | "producer"
    bhp: float = 300.0
    perforated_channel_layers: tuple[int, int] | None = None
    perforated_levee_layers: tuple[int, int] | None = None

    def __post_init__(self):
        if self.role not in ("injector", "producer"):
            raise ValueError(f"well role must be injector/producer, got {self.role!r}")

    def validate(self, dims: GridDims) -> None:
        if not (1 <= self.i <= dims.nx and 1 <= self.j <= dims.ny):
            raise ShapeError(f"well {self.name} at ({self.i}, {self.j}) outside grid")
        for rng in (self.perforated_channel_layers, self.perforated_levee_layers):
            if rng is None:
                continue
            lo, hi = rng
            if not (1 <= lo <= hi <= dims.nz):
                raise ShapeError(f"well {self.name} layer range {rng} outside [1, {dims.nz}]")

    def perforated_layers(self, dims: GridDims) -> list[int]:
        """0-based z indices open to flow (declared ranges, else all layers)."""
        layers: list[int] = []
        for rng in (self.perforated_channel_layers, self.perforated_levee_layers):
            if rng is not None:
                layers.extend(range(rng[0] - 1, rng[1]))
        return sorted(set(layers)) if layers else list(range(dims.nz))


@dataclass
class HardDataMask:
    """Cell-level conditioning data: a 0/1 selector plus target values."""

    selector: np.ndarray  # bool, grid shape
    target: np.ndarray  # float, grid shape; meaningful where selector is set

    def __post_init__(self):
        self.selector = np.asarray(self.selector, dtype=bool)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.selector.shape != self.target.shape:
            raise ShapeError(
                f"selector shape {self.selector.shape} != target shape {self.target.shape}"
            )

    @property
    def count(self) -> int:
        return int(self.selector.sum())

    def honored_fraction(self, model: Geomodel, atol: float = 0.0) -> float:
        """Fraction of selected cells whose model value matches the target."""
        if self.count == 0:
            return 1.0
        sel = self.selector
        hits = np.abs(model.values[sel] - self.target[sel]) <= atol
        return float(hits.mean())


def empty_mask(dims: GridDims) -> HardDataMask:
    return HardDataMask(np.zeros(dims.shape, bool), np.zeros(dims.shape))
