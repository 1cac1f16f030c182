"""Discretization and property assembly for continuous network/PCA outputs.

Truncation cutoffs are pooled quantiles over a calibration set, so the set's
average facies fractions match the targets by construction; the rule is then
frozen and applied model by model. The ternary encoding keeps levee as the
high tail (mud 0, channel 1, levee 2), which preserves levee geometry instead
of smearing it around every channel.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .grid import FACIES_CHANNEL, FACIES_LEVEE, FACIES_MUD, Geomodel, ShapeError


@dataclass(frozen=True)
class TruncationRule:
    encoding: str  # "binary" | "ternary"
    cutoffs: tuple[float, ...]  # ascending; 1 for binary, 2 for ternary
    target_fractions: tuple[float, ...]  # (channel,) or (channel, levee)

    def __post_init__(self):
        if list(self.cutoffs) != sorted(self.cutoffs):
            raise ValueError(f"cutoffs must ascend, got {self.cutoffs}")
        want = 1 if self.encoding == "binary" else 2
        if len(self.cutoffs) != want:
            raise ValueError(f"{self.encoding} rule needs {want} cutoffs")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "encoding": self.encoding,
                    "cutoffs": list(self.cutoffs),
                    "target_fractions": list(self.target_fractions),
                },
                fh,
                indent=1,
            )

    @staticmethod
    def from_json(path) -> "TruncationRule":
        with open(path) as fh:
            d = json.load(fh)
        return TruncationRule(d["encoding"], tuple(d["cutoffs"]), tuple(d["target_fractions"]))


def calibrate_truncation(model_set: list[Geomodel], target_fractions) -> TruncationRule:
    """Pooled-quantile cutoffs so the set's average fractions hit the targets.

    Binary: one cutoff at the (1 - f_channel) quantile. Ternary (mud 0 /
    channel 1 / levee 2): cutoffs at (1 - f_levee - f_channel) and
    (1 - f_levee), putting levee in the high tail."""
    if not model_set:
        raise ValueError("empty calibration set")
    fractions = tuple(float(f) for f in np.atleast_1d(target_fractions))
    if any(not 0.0 < f < 1.0 for f in fractions) or sum(fractions) >= 1.0:
        raise ValueError(f"target fractions must lie in (0,1) and sum below 1, got {fractions}")
    pooled = np.concatenate([m.flat for m in model_set])
    if len(fractions) == 1:
        encoding = "binary"
        qs = [1.0 - fractions[0]]
    elif len(fractions) == 2:
        encoding = "ternary"
        f_ch, f_lev = fractions
        qs = [1.0 - f_lev - f_ch, 1.0 - f_lev]
    else:
        raise ValueError(f"expected 1 or 2 target fractions, got {len(fractions)}")
    cutoffs = tuple(float(np.quantile(pooled, q)) for q in qs)
    if len(cutoffs) == 2 and cutoffs[0] >= cutoffs[1]:
        raise ValueError(
            f"degenerate calibration: quantile tie at {cutoffs}; the pooled "
            "distribution has insufficient spread between the facies cuts"
        )
    rule = TruncationRule(encoding, cutoffs, fractions)

    realized = _realized_fractions(model_set, rule)
    tol = 1.0 / model_set[0].dims.n_cells + 1e-12
    for got, want in zip(realized, fractions):
        if abs(got - want) > tol:
            counts = [float((pooled == c).mean()) for c in cutoffs]
            raise ValueError(
                f"quantile ties span a facies fraction: realized {realized} vs "
                f"target {fractions}; tied mass at cutoffs: {counts}"
            )
    return rule


def _realized_fractions(model_set, rule) -> tuple[float, ...]:
    total = np.zeros(len(rule.cutoffs) + 1)
    for m in model_set:
        t = truncate(m, rule)
        total[FACIES_CHANNEL] += (t.values == FACIES_CHANNEL).mean()
        if rule.encoding == "ternary":
            total[FACIES_LEVEE] += (t.values == FACIES_LEVEE).mean()
    total /= len(model_set)
    if rule.encoding == "binary":
        return (total[FACIES_CHANNEL],)
    return (total[FACIES_CHANNEL], total[FACIES_LEVEE])


def truncate(m: Geomodel, rule: TruncationRule) -> Geomodel:
    """Cellwise interval lookup; values above the last cutoff take the top
    code. Idempotent for already-truncated models under the same rule."""
    bins = np.digitize(m.flat, rule.cutoffs, right=True)
    if rule.encoding == "binary":
        codes = np.where(bins == 0, FACIES_MUD, FACIES_CHANNEL)
    else:
        lookup = np.array([FACIES_MUD, FACIES_CHANNEL, FACIES_LEVEE])
        codes = lookup[bins]
    return Geomodel(m.dims, codes.astype(np.float64), "facies", m.field_name)


def histogram_transform(m: Geomodel, reference_set: list[Geomodel]) -> Geomodel:
    """Rank-preserving quantile mapping of m onto the pooled reference
    distribution (linear interpolation between order statistics)."""
    if not reference_set:
        raise ValueError("empty reference set")
    pooled = np.sort(np.concatenate([r.flat for r in reference_set]))
    values = m.flat
    order = np.argsort(values, kind="stable")
    n = values.size
    ranks = np.arange(n) / (n - 1) if n > 1 else np.array([0.5])
    positions = ranks * (pooled.size - 1)
    lo = np.floor(positions).astype(int)
    hi = np.minimum(lo + 1, pooled.size - 1)
    frac = positions - lo
    mapped = pooled[lo] * (1.0 - frac) + pooled[hi] * frac
    out = np.empty_like(values)
    out[order] = mapped
    return Geomodel(m.dims, out, "continuous", m.field_name)


def assemble_bimodal(facies: Geomodel, sand_props: Geomodel, mud_props: Geomodel) -> Geomodel:
    """Cookie-cutter: m_i = f_i * s_i + (1 - f_i) * mu_i cellwise."""
    if not (facies.dims == sand_props.dims == mud_props.dims):
        raise ShapeError("cookie-cutter inputs live on different grids")
    f = facies.values
    if not np.all(np.isin(f, (0.0, 1.0))):
        raise ValueError("cookie-cutter facies model must be binary (0/1)")
    values = f * sand_props.values + (1.0 - f) * mud_props.values
    return Geomodel(facies.dims, values, "continuous", "log_permeability")


def petrophysics(m_logperm: Geomodel) -> tuple[Geomodel, Geomodel]:
    """Permeability k = exp(m) in md and porosity phi = m / 40, cellwise."""
    if m_logperm.kind != "continuous":
        raise ValueError("petrophysics expects a continuous log-permeability model")
    k = np.exp(m_logperm.values)
    phi = m_logperm.values / 40.0
    if np.any(phi <= 0.0) or np.any(phi >= 0.5):
        warnings.warn(
            f"porosity outside (0, 0.5): range [{phi.min():.3f}, {phi.max():.3f}]",
            RuntimeWarning,
            stacklevel=2,
        )
    return (
        Geomodel(m_logperm.dims, k, "continuous", "permeability_md"),
        Geomodel(m_logperm.dims, phi, "continuous", "porosity"),
    )
