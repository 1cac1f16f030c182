"""End-to-end orchestration: ensemble generation, training, transform +
truncation, flow data vectors, and the bimodal decode used by assimilation.

Everything here is deterministic given (config, root seed): each stage draws
from its own named substream.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import pca as pca_mod
from .channels import build_hard_data, generate_facies
from .config import PipelineConfig
from .esmda import ObservationSet, observation_std
from .flow import FlowCase, solve_pressure
from .gaussian import generate_gaussian_field
from .grid import FACIES_CHANNEL, FACIES_LEVEE, FACIES_MUD, Geomodel, HardDataMask
from .postprocess import TruncationRule, assemble_bimodal, calibrate_truncation, truncate
from .seeds import rng_for
from .stylenet import C3dExtractor
from .trainer import LossReport, LossWeights, TrainConfig, build_training_set, train
from .transform import TransformNet


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def hard_data_for(config: PipelineConfig) -> HardDataMask:
    return build_hard_data(config.wells, config.grid)


def generate_models(config: PipelineConfig, count: int, seed: int | None = None) -> list[Geomodel]:
    """count conditional facies realizations from per-index subseeds."""
    root = config.seed if seed is None else seed
    mask = hard_data_for(config)
    out = []
    for i in range(count):
        member_seed = rng_for(root, "generate", index=i).integers(2**63)
        out.append(generate_facies(config.grid, config.channels, config.wells, mask, member_seed))
    return out


def property_hard_data(config: PipelineConfig, facies_value: float) -> HardDataMask:
    """Within-facies log-permeability hard data: the facies mean at every
    well-column cell (the synthetic well-log value all realizations honor)."""
    mask = hard_data_for(config)
    return HardDataMask(mask.selector, np.full(config.grid.shape, facies_value))


def generate_property_fields(
    config: PipelineConfig, count: int, seed: int | None = None
) -> tuple[list[Geomodel], list[Geomodel]]:
    """Sand and mud log-permeability field ensembles for the bimodal case."""
    root = config.seed if seed is None else seed
    bim = config.bimodal
    sand_mask = property_hard_data(config, bim.sand_mean)
    mud_mask = property_hard_data(config, bim.mud_mean)
    sand, mud = [], []
    for i in range(count):
        s_seed = rng_for(root, "gaussian", index=2 * i).integers(2**63)
        m_seed = rng_for(root, "gaussian", index=2 * i + 1).integers(2**63)
        sand.append(
            generate_gaussian_field(
                config.grid, bim.sand_mean, bim.sand_variance, bim.correlation_lengths,
                conditioning=sand_mask, seed=s_seed, field_name="sand_logk",
            )
        )
        mud.append(
            generate_gaussian_field(
                config.grid, bim.mud_mean, bim.mud_variance, bim.correlation_lengths,
                conditioning=mud_mask, seed=m_seed, field_name="mud_logk",
            )
        )
    return sand, mud


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainedPipeline:
    net: TransformNet
    basis: pca_mod.PcaBasis
    extractor: C3dExtractor | None
    mask: HardDataMask
    report: LossReport


def make_extractor(config: PipelineConfig) -> C3dExtractor:
    tc = config.training
    if tc.extractor_weights_path is not None:
        return C3dExtractor(seed=0, weights_path=tc.extractor_weights_path)
    return C3dExtractor(seed=tc.extractor_seed)


def fit_basis(config: PipelineConfig, models: list[Geomodel]) -> pca_mod.PcaBasis:
    basis = pca_mod.fit(models)
    pca_mod.select_dims(basis, config.training.energy_l, config.training.energy_p)
    return basis


def train_from_models(
    config: PipelineConfig,
    models: list[Geomodel],
    basis: pca_mod.PcaBasis | None = None,
) -> TrainedPipeline:
    tc = config.training
    if basis is None:
        basis = fit_basis(config, models)
    dataset = build_training_set(models, basis, config.seed)
    mask = hard_data_for(config)
    extractor = make_extractor(config) if tc.gamma_s > 0 else None
    weights = LossWeights(tc.gamma_rec, tc.gamma_s, tc.gamma_h)
    hyper = TrainConfig(lr=tc.lr, batch=tc.batch, epochs=tc.epochs, seed=tc.seed)
    net = TransformNet(seed=rng_for(config.seed, "net-init").integers(2**31))
    gm_values = np.stack([m.values for m in models])
    net.set_normalization(float(gm_values.mean()), float(gm_values.std()))
    net, report = train(net, dataset, mask, weights, hyper, extractor)
    return TrainedPipeline(net, basis, extractor, mask, report)


# ---------------------------------------------------------------------------
# transform + truncation
# ---------------------------------------------------------------------------

def target_fractions(config: PipelineConfig) -> tuple[float, ...]:
    ch = config.channels
    if ch.levee_fraction > 0:
        return (ch.channel_fraction, ch.levee_fraction)
    return (ch.channel_fraction,)


def transform_and_truncate(
    config: PipelineConfig,
    net: TransformNet,
    pca_models: list[Geomodel],
) -> tuple[list[Geomodel], TruncationRule, list[Geomodel]]:
    """Apply the trained net, calibrate cutoffs on the outputs, truncate."""
    outputs = net.transform(pca_models)
    rule = calibrate_truncation(outputs, target_fractions(config))
    return outputs, rule, [truncate(m, rule) for m in outputs]


def truncate_with_rule(models: list[Geomodel], rule: TruncationRule) -> list[Geomodel]:
    return [truncate(m, rule) for m in models]


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

def facies_permeability(model: Geomodel, config: PipelineConfig) -> np.ndarray:
    f = config.flow
    table = {FACIES_MUD: f.mud_perm, FACIES_CHANNEL: f.channel_perm, FACIES_LEVEE: f.levee_perm}
    perm = np.full(model.dims.shape, f.mud_perm)
    for code, k in table.items():
        perm[model.values == code] = k
    return perm


def permeability_for(model: Geomodel, config: PipelineConfig) -> np.ndarray:
    """Facies models map through the facies table; continuous models are
    log-permeability and exponentiate."""
    if model.kind == "facies":
        return facies_permeability(model, config)
    return np.exp(model.values)


def flow_case(config: PipelineConfig, perm: np.ndarray, producer_bhp: float | None = None) -> FlowCase:
    wells = config.wells
    if producer_bhp is not None:
        wells = [
            replace(w, bhp=producer_bhp) if w.role == "producer" else w for w in wells
        ]
    g = config.grid
    return FlowCase(
        shape=g.shape,
        cell_size=(g.dz, g.dy, g.dx),
        permeability=perm,
        wells=wells,
        viscosity_cp=config.flow.viscosity_cp,
    )


def well_rates(config: PipelineConfig, model: Geomodel) -> dict[str, float]:
    perm = permeability_for(model, config)
    return solve_pressure(flow_case(config, perm)).rates


def flow_data_vector(config: PipelineConfig, perm: np.ndarray) -> np.ndarray:
    """Assimilation data: per producer-BHP scenario, all well rates in name
    order. Scenarios stand in for the report times of a transient record."""
    names = sorted(w.name for w in config.wells)
    values = []
    for bhp in config.esmda.producer_bhps:
        rates = solve_pressure(flow_case(config, perm, producer_bhp=bhp)).rates
        values.extend(rates[n] for n in names)
    return np.asarray(values)


def data_labels(config: PipelineConfig) -> list[dict]:
    names = sorted(w.name for w in config.wells)
    return [
        {"well": n, "quantity": "rate_m3_per_day", "time_label": f"bhp_{bhp:g}"}
        for bhp in config.esmda.producer_bhps
        for n in names
    ]


# ---------------------------------------------------------------------------
# bimodal decode (facies latents + within-facies latents -> flow data)
# ---------------------------------------------------------------------------

@dataclass
class BimodalDecoder:
    config: PipelineConfig
    net: TransformNet
    facies_basis: pca_mod.PcaBasis
    sand_basis: pca_mod.PcaBasis
    mud_basis: pca_mod.PcaBasis
    rule: TruncationRule

    @property
    def split(self) -> tuple[int, int, int]:
        return (self.facies_basis.l, self.sand_basis.l, self.mud_basis.l)

    @property
    def latent_size(self) -> int:
        return sum(self.split)

    def split_latent(self, xi: np.ndarray):
        l_f, l_s, l_m = self.split
        if xi.shape != (l_f + l_s + l_m,):
            raise ValueError(f"latent has shape {xi.shape}, expected ({l_f + l_s + l_m},)")
        return xi[:l_f], xi[l_f : l_f + l_s], xi[l_f + l_s :]

    def decode_facies(self, xi_f: np.ndarray) -> Geomodel:
        m_pca = pca_mod.sample(self.facies_basis, xi_f)
        out = self.net.transform([m_pca])[0]
        return truncate(out, self.rule)

    def decode(self, xi: np.ndarray) -> Geomodel:
        """Latent vector to bimodal log-permeability model."""
        xi_f, xi_s, xi_m = self.split_latent(np.asarray(xi, dtype=np.float64))
        facies = self.decode_facies(xi_f)
        sand = pca_mod.sample(self.sand_basis, xi_s)
        mud = pca_mod.sample(self.mud_basis, xi_m)
        return assemble_bimodal(facies, sand, mud)

    def data_vector(self, xi: np.ndarray) -> np.ndarray:
        logk = self.decode(xi)
        return flow_data_vector(self.config, np.exp(logk.values))


def build_bimodal_decoder(
    config: PipelineConfig,
    trained: TrainedPipeline,
    n_property_models: int = 60,
    n_rule_models: int = 60,
) -> BimodalDecoder:
    """Within-facies bases plus a frozen truncation rule for decode."""
    sand_fields, mud_fields = generate_property_fields(config, n_property_models)
    ew = config.bimodal.energy_within
    sand_basis = pca_mod.fit(sand_fields)
    pca_mod.select_dims(sand_basis, ew, ew / 2)
    mud_basis = pca_mod.fit(mud_fields)
    pca_mod.select_dims(mud_basis, ew, ew / 2)

    rng = rng_for(config.seed, "pca-sample", index=999)
    latents = pca_mod.sample_latents(trained.basis, n_rule_models, rng)
    pca_models = [pca_mod.sample(trained.basis, x) for x in latents]
    _, rule, _ = transform_and_truncate(config, trained.net, pca_models)
    return BimodalDecoder(config, trained.net, trained.basis, sand_basis, mud_basis, rule)


def synthetic_observations(
    decoder: BimodalDecoder, seed: int
) -> tuple[np.ndarray, ObservationSet]:
    """Draw a truth latent, simulate it, and perturb per the noise model."""
    rng = rng_for(seed, "truth")
    xi_true = rng.standard_normal(decoder.latent_size)
    d_true = decoder.data_vector(xi_true)
    std = observation_std(d_true)
    d_obs = d_true + std * rng.standard_normal(d_true.size)
    return xi_true, ObservationSet(d_obs, std, labels=data_labels(decoder.config))
