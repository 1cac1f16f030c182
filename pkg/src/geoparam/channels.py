"""Object-based generation of conditional channelized facies models.

Channels are sinusoidal ribbons running the full y extent of the grid, with a
parabolic cross-section in (x, z) that is widest at the channel top. Levees,
when requested, form wings on both sides of the upper part of each channel.

Conditioning is constructive: one channel is routed through every perforated
channel interval (centerline forced through the well column), levee intervals
get a laterally offset channel whose wing covers the column, and remaining
objects are rejection-sampled away from all well columns. Facies fractions are
matched by growing filler channels and then shrinking the last one (and, for
ternary models, eroding levee wings from the outside) with a bisection on the
painted cell count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .grid import (
    FACIES_CHANNEL,
    FACIES_LEVEE,
    FACIES_MUD,
    ConditioningError,
    Geomodel,
    GridDims,
    HardDataMask,
    ShapeError,
    WellSpec,
)

_MAX_TRIES = 500
# conditioned levee cells sit at normalized wing offset <= this, so erosion
# never removes them
_LEVEE_Q_FLOOR = 0.55


@dataclass(frozen=True)
class ChannelParams:
    channel_fraction: float
    levee_fraction: float = 0.0
    width_range: tuple[float, float] = (3.0, 5.0)
    thickness_range: tuple[int, int] = (2, 4)
    amplitude_range: tuple[float, float] = (1.5, 5.0)
    wavelength_range: tuple[float, float] = (16.0, 48.0)
    levee_width_ratio: float = 0.575
    levee_thickness_ratio: float = 0.575

    def __post_init__(self):
        if not (0.0 <= self.channel_fraction < 1.0) or not (0.0 <= self.levee_fraction < 1.0):
            raise ValueError("facies fractions must lie in [0, 1)")
        if self.channel_fraction + self.levee_fraction >= 1.0:
            raise ValueError("channel + levee fraction must leave room for mud")
        if not (0.0 < self.levee_width_ratio < 1.0 and 0.0 < self.levee_thickness_ratio < 1.0):
            raise ValueError("levee ratios must lie in (0, 1)")

    @property
    def ternary(self) -> bool:
        return self.levee_fraction > 0.0


@dataclass(frozen=True)
class _ChannelGeom:
    x0: float
    amp: float
    wavelength: float
    phase: float
    z_top: int
    thickness: int
    width: float
    width_scale: float = 1.0

    def center(self, y: np.ndarray) -> np.ndarray:
        return self.x0 + self.amp * np.sin(2.0 * np.pi * y / self.wavelength + self.phase)


def _levee_thickness(params: ChannelParams, t: int) -> int:
    return max(1, round(params.levee_thickness_ratio * t))


def _paint(
    geoms: list[_ChannelGeom],
    dims: GridDims,
    params: ChannelParams,
    with_levee: bool,
):
    """Rasterize all channel objects.

    Returns (channel bool grid, levee normalized-offset grid). A cell's levee
    entry is the smallest wing offset q in (0, 1] over all objects; erosion to
    q_max keeps cells with q <= q_max.
    """
    nz, ny, nx = dims.shape
    channel = np.zeros(dims.shape, dtype=bool)
    levee_q = np.full(dims.shape, np.inf) if with_levee else None
    ys = np.arange(ny)
    for g in geoms:
        w = g.width * g.width_scale
        if w <= 0:
            continue
        xc = g.center(ys)
        t = g.thickness
        lw = params.levee_width_ratio * w
        t_lev = _levee_thickness(params, t)
        for dz in range(t):
            z = g.z_top + dz
            if not (0 <= z < nz):
                continue
            hw = 0.5 * w * math.sqrt(1.0 - dz / t)
            lo = np.ceil(xc - hw).astype(int)
            hi = np.floor(xc + hw).astype(int)
            for y in range(ny):
                if hi[y] >= 0 and lo[y] < nx:
                    channel[z, y, max(lo[y], 0) : min(hi[y], nx - 1) + 1] = True
            if with_levee and dz < t_lev and lw > 0:
                for y in range(ny):
                    for lo_x, hi_x, sign in (
                        (np.ceil(xc[y] - hw - lw), np.ceil(xc[y] - hw) - 1, -1.0),
                        (np.floor(xc[y] + hw) + 1, np.floor(xc[y] + hw + lw), 1.0),
                    ):
                        a = max(int(lo_x), 0)
                        b = min(int(hi_x), nx - 1)
                        if b < a:
                            continue
                        xs = np.arange(a, b + 1)
                        q = (np.abs(xs - xc[y]) - hw) / lw
                        valid = (q > 0) & (q <= 1.0)
                        if valid.any():
                            np.minimum.at(levee_q[z, y], xs[valid], q[valid])
    return channel, levee_q


def _facies_from_paint(channel, levee_q, q_max):
    facies = np.zeros(channel.shape)
    if levee_q is not None:
        facies[(levee_q <= q_max) & ~channel] = FACIES_LEVEE
    facies[channel] = FACIES_CHANNEL
    return facies


def _object_columns(geom, dims, params, with_levee):
    """Facies claimed by one object at every areal column, as a (code grid)."""
    channel, levee_q = _paint([geom], dims, params, with_levee)
    return _facies_from_paint(channel, levee_q, 1.0)


def _well_column_ok(code_grid, well: WellSpec, dims: GridDims) -> bool:
    """Column (i, j) must show exactly the well's declared intervals."""
    col = code_grid[:, well.j - 1, well.i - 1]
    want = np.zeros(dims.nz)
    if well.perforated_channel_layers:
        a, b = well.perforated_channel_layers
        want[a - 1 : b] = FACIES_CHANNEL
    if well.perforated_levee_layers:
        a, b = well.perforated_levee_layers
        want[a - 1 : b] = FACIES_LEVEE
    return np.array_equal(col, want)


def _touches_columns(code_grid, wells, skip=None) -> bool:
    for w in wells:
        if skip is not None and w.name == skip:
            continue
        if np.any(code_grid[:, w.j - 1, w.i - 1] != FACIES_MUD):
            return True
    return False


def _draw_geometry(params, dims, rng, z_top, thickness, width=None):
    w = rng.uniform(*params.width_range) if width is None else width
    amp = rng.uniform(*params.amplitude_range)
    lam = rng.uniform(*params.wavelength_range)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    margin = 0.5 * w + params.levee_width_ratio * w + 1.0
    lo = amp + margin
    hi = dims.nx - 1 - amp - margin
    if hi <= lo:  # wide meanders on a narrow grid: recentre and shrink
        amp = max(0.5, 0.25 * dims.nx - margin)
        lo, hi = amp + margin, dims.nx - 1 - amp - margin
        if hi <= lo:
            lo = hi = 0.5 * (dims.nx - 1)
    x0 = rng.uniform(lo, hi) if hi > lo else lo
    return _ChannelGeom(x0, amp, lam, phase, int(z_top), int(thickness), float(w))


def _conditioned_channel(well, params, dims, wells, rng) -> _ChannelGeom:
    a, b = well.perforated_channel_layers
    t = b - a + 1
    for _ in range(_MAX_TRIES):
        g = _draw_geometry(params, dims, rng, z_top=a - 1, thickness=t)
        # force the centerline through the well column
        shift = (well.i - 1) - g.center(np.array([well.j - 1]))[0]
        g = replace(g, x0=g.x0 + shift)
        if not (0 <= g.x0 - g.amp and g.x0 + g.amp <= dims.nx - 1):
            continue
        codes = _object_columns(g, dims, params, params.ternary)
        if _touches_columns(codes, wells, skip=well.name):
            continue
        col = codes[:, well.j - 1, well.i - 1]
        want = np.zeros(dims.nz)
        want[a - 1 : b] = FACIES_CHANNEL
        if np.array_equal(col, want):
            return g
    raise ConditioningError(
        f"could not route a channel through well {well.name} layers {a}-{b}"
    )


def _conditioned_levee(well, params, dims, wells, rng) -> _ChannelGeom:
    a, b = well.perforated_levee_layers
    t_lev = b - a + 1
    t = None
    for cand in range(t_lev, max(dims.nz, t_lev + 8) + 1):
        if _levee_thickness(params, cand) == t_lev and a - 1 + cand <= dims.nz:
            t = cand
            break
    if t is None:
        raise ConditioningError(
            f"no channel thickness yields a levee {t_lev} layers thick at well {well.name}"
        )
    for _ in range(_MAX_TRIES):
        g = _draw_geometry(params, dims, rng, z_top=a - 1, thickness=t)
        w = g.width
        lw = params.levee_width_ratio * w
        hw_min = 0.5 * w * math.sqrt(1.0 - (t_lev - 1) / t)
        if hw_min + lw <= 0.5 * w:  # wing cannot clear the channel top width
            continue
        offset = min(0.5 * w + 0.3 * lw, hw_min + 0.9 * lw)
        side = -1.0 if rng.random() < 0.5 else 1.0
        shift = (well.i - 1) - side * offset - g.center(np.array([well.j - 1]))[0]
        g = replace(g, x0=g.x0 + shift)
        if not (0 <= g.x0 - g.amp and g.x0 + g.amp <= dims.nx - 1):
            continue
        codes = _object_columns(g, dims, params, True)
        if _touches_columns(codes, wells, skip=well.name):
            continue
        col = codes[:, well.j - 1, well.i - 1]
        want = np.zeros(dims.nz)
        want[a - 1 : b] = FACIES_LEVEE
        if np.array_equal(col, want):
            return g
    raise ConditioningError(
        f"could not place a levee over well {well.name} layers {a}-{b}"
    )


def _filler(params, dims, wells, rng) -> _ChannelGeom | None:
    for _ in range(_MAX_TRIES):
        t = int(rng.integers(params.thickness_range[0], params.thickness_range[1] + 1))
        t = min(t, dims.nz)
        z_top = int(rng.integers(0, dims.nz - t + 1))
        g = _draw_geometry(params, dims, rng, z_top=z_top, thickness=t)
        codes = _object_columns(g, dims, params, params.ternary)
        if not _touches_columns(codes, wells):
            return g
    return None


def generate_facies(
    dims: GridDims,
    params: ChannelParams,
    wells: list[WellSpec],
    mask: HardDataMask,
    seed: int,
) -> Geomodel:
    """One conditional facies realization, deterministic per seed.

    Honors every mask cell exactly and matches the target facies fractions
    to +-1.5 percentage points (internally bisected much tighter)."""
    rng = np.random.default_rng(int(seed))
    for w in wells:
        w.validate(dims)
    n = dims.n_cells
    kind_name = "facies"

    if params.channel_fraction == 0.0:
        model = Geomodel(dims, np.zeros(dims.shape), "facies", kind_name)
        if mask.count and mask.honored_fraction(model) < 1.0:
            raise ConditioningError("mask requires channel cells but zero channels requested")
        return model

    # levee-conditioned objects need their exact geometry to keep the wing on
    # the well column; channel-conditioned ones stay valid at any width since
    # the centerline runs through the column
    fixed: list[_ChannelGeom] = []
    scalable: list[_ChannelGeom] = []
    for well in wells:
        if well.perforated_channel_layers:
            scalable.append(_conditioned_channel(well, params, dims, wells, rng))
        if well.perforated_levee_layers:
            fixed.append(_conditioned_levee(well, params, dims, wells, rng))

    target_ch = params.channel_fraction * n
    tol = 0.005 * n  # realization-level bisection band, well inside +-1.5 pp

    def channel_count(gs):
        ch, _ = _paint(gs, dims, params, False)
        return int(ch.sum()), ch

    count, _ = channel_count(fixed + scalable)
    if count > target_ch + tol:
        # conditioning alone overshoots: shrink the scalable widths
        def scaled(s):
            out = []
            for g in scalable:
                eff = max(s, 1.0 / g.width)  # keep >= 1 cell for y connectivity
                out.append(replace(g, width_scale=eff))
            return out

        lo, hi = 0.0, 1.0
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            c, _ = channel_count(fixed + scaled(mid))
            if c > target_ch:
                hi = mid
            else:
                lo = mid
        scalable = scaled(hi)
        count, _ = channel_count(fixed + scalable)
        if count > target_ch + 0.015 * n:
            raise ConditioningError(
                f"conditioning channels alone paint {count / n:.4f} of the grid; "
                f"target {params.channel_fraction:.4f} is unreachable"
            )
        geoms = fixed + scalable
    else:
        geoms = fixed + scalable
        n_conditioned = len(geoms)
        while count < target_ch - tol:
            g = _filler(params, dims, wells, rng)
            if g is None:
                raise ConditioningError("could not place a filler channel off the well columns")
            geoms.append(g)
            count, _ = channel_count(geoms)
        if count > target_ch + tol and len(geoms) > n_conditioned:
            # bisect the last filler's width to land in the band
            base = geoms[:-1]
            last = geoms[-1]
            lo, hi = 0.0, 1.0
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                c, _ = channel_count(base + [replace(last, width_scale=mid)])
                if c > target_ch:
                    hi = mid
                else:
                    lo = mid
            c_hi, _ = channel_count(base + [replace(last, width_scale=hi)])
            c_lo, _ = channel_count(base + [replace(last, width_scale=lo)])
            pick = hi if abs(c_hi - target_ch) <= abs(c_lo - target_ch) else lo
            geoms = base + [replace(last, width_scale=pick)]

    channel, levee_q = _paint(geoms, dims, params, params.ternary)
    q_max = 1.0
    if params.ternary:
        target_lev = params.levee_fraction * n

        def levee_count(q):
            return int(((levee_q <= q) & ~channel).sum())

        if levee_count(1.0) > target_lev:
            lo, hi = _LEVEE_Q_FLOOR, 1.0
            if levee_count(lo) <= target_lev:
                for _ in range(40):
                    mid = 0.5 * (lo + hi)
                    if levee_count(mid) > target_lev:
                        hi = mid
                    else:
                        lo = mid
                q_max = hi if abs(levee_count(hi) - target_lev) <= abs(levee_count(lo) - target_lev) else lo
            else:
                q_max = lo

    facies = _facies_from_paint(channel, levee_q, q_max)
    model = Geomodel(dims, facies, "facies", kind_name)

    if mask.count:
        sel = mask.selector
        bad = sel & (model.values != mask.target)
        if bad.any():
            cells = np.argwhere(bad)[:8]
            raise ConditioningError(
                f"{int(bad.sum())} mask cells unsatisfied, first (z,y,x): {cells.tolist()}"
            )

    frac_ch = float((facies == FACIES_CHANNEL).mean())
    if abs(frac_ch - params.channel_fraction) > 0.015:
        raise ConditioningError(
            f"channel fraction {frac_ch:.4f} misses target {params.channel_fraction:.4f}"
        )
    if params.ternary:
        frac_lev = float((facies == FACIES_LEVEE).mean())
        if abs(frac_lev - params.levee_fraction) > 0.015:
            raise ConditioningError(
                f"levee fraction {frac_lev:.4f} misses target {params.levee_fraction:.4f}"
            )
    return model


def build_hard_data(
    wells: list[WellSpec],
    dims: GridDims,
    template_assignment: dict[str, float] | None = None,
) -> HardDataMask:
    """Facies hard data along every well column: channel code over perforated
    channel layers, levee code over levee layers, mud elsewhere."""
    codes = {"channel": FACIES_CHANNEL, "levee": FACIES_LEVEE, "mud": FACIES_MUD}
    if template_assignment:
        codes.update(template_assignment)
    seen: dict[tuple[int, int], str] = {}
    selector = np.zeros(dims.shape, dtype=bool)
    target = np.zeros(dims.shape)
    for w in wells:
        w.validate(dims)
        key = (w.i, w.j)
        if key in seen:
            raise ShapeError(f"wells {seen[key]} and {w.name} overlap at {key}")
        seen[key] = w.name
        i, j = w.i - 1, w.j - 1
        selector[:, j, i] = True
        target[:, j, i] = codes["mud"]
        if w.perforated_channel_layers:
            a, b = w.perforated_channel_layers
            target[a - 1 : b, j, i] = codes["channel"]
        if w.perforated_levee_layers:
            a, b = w.perforated_levee_layers
            target[a - 1 : b, j, i] = codes["levee"]
    return HardDataMask(selector, target)
