"""Pipeline configuration: JSON schema, validation, and desk-scale presets.

A config fixes the geological case (binary channels, three-facies
channel-levee-mud, or bimodal log-permeability), the grid, wells, generator
targets, training hyperparameters, flow properties, and the assimilation
setup. One root seed drives every named substream, so a (config, seed) pair
reproduces a whole run.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .channels import ChannelParams
from .esmda import DEFAULT_ALPHAS
from .grid import GridDims, WellSpec

CASES = ("binary", "ternary", "bimodal")


@dataclass(frozen=True)
class TrainingConfig:
    gamma_rec: float = 500.0
    gamma_s: float = 100.0
    gamma_h: float = 10.0
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 10
    seed: int = 0
    energy_l: float = 0.8
    energy_p: float = 0.4
    extractor_seed: int | None = 17
    extractor_weights_path: str | None = None

    def __post_init__(self):
        if (self.extractor_seed is None) == (self.extractor_weights_path is None):
            raise ValueError(
                "exactly one of extractor_seed / extractor_weights_path must be set"
            )


@dataclass(frozen=True)
class BimodalConfig:
    sand_mean: float = 6.7
    sand_variance: float = 0.2
    mud_mean: float = 3.5
    mud_variance: float = 0.19
    correlation_lengths: tuple[float, float, float] = (3.0, 8.0, 8.0)  # (z, y, x) cells
    energy_within: float = 0.6  # energy threshold for the within-facies bases


@dataclass(frozen=True)
class FlowConfig:
    viscosity_cp: float = 1.0
    # facies permeabilities in md (binary/ternary proxies)
    mud_perm: float = 20.0
    channel_perm: float = 2000.0
    levee_perm: float = 200.0


@dataclass(frozen=True)
class EsmdaRunConfig:
    ensemble: int = 50
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    seed: int = 0
    # each scenario is one producer BHP (bar); injector BHPs stay as declared.
    # scenarios stand in for report times: N_d = n_wells * n_scenarios.
    producer_bhps: tuple[float, ...] = (300.0, 295.0, 290.0, 285.0, 280.0)


@dataclass
class PipelineConfig:
    case: str
    grid: GridDims
    channels: ChannelParams
    wells: list[WellSpec]
    training: TrainingConfig = field(default_factory=TrainingConfig)
    bimodal: BimodalConfig = field(default_factory=BimodalConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    esmda: EsmdaRunConfig = field(default_factory=EsmdaRunConfig)
    seed: int = 1234
    out_dir: str = "runs/out"

    def __post_init__(self):
        if self.case not in CASES:
            raise ValueError(f"case must be one of {CASES}, got {self.case!r}")
        for w in self.wells:
            w.validate(self.grid)
        if self.case == "ternary" and self.channels.levee_fraction <= 0:
            raise ValueError("ternary case needs a positive levee fraction")
        path = self.training.extractor_weights_path
        if path is not None and not Path(path).exists():
            raise FileNotFoundError(f"extractor weights not found: {path}")

    # -- serialization -----------------------------------------------------

    def to_json(self, path) -> None:
        doc = {
            "case": self.case,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "grid": asdict(self.grid),
            "channels": asdict(self.channels),
            "wells": [
                {
                    "name": w.name,
                    "i": w.i,
                    "j": w.j,
                    "role": w.role,
                    "bhp": w.bhp,
                    "channel_layers": list(w.perforated_channel_layers)
                    if w.perforated_channel_layers
                    else None,
                    "levee_layers": list(w.perforated_levee_layers)
                    if w.perforated_levee_layers
                    else None,
                }
                for w in self.wells
            ],
            "training": asdict(self.training),
            "bimodal": asdict(self.bimodal),
            "flow": asdict(self.flow),
            "esmda": asdict(self.esmda),
        }
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))

    @staticmethod
    def from_json(path) -> "PipelineConfig":
        doc = json.loads(Path(path).read_text())
        return PipelineConfig(
            case=doc["case"],
            grid=GridDims(**doc["grid"]),
            channels=ChannelParams(
                **{
                    k: tuple(v) if isinstance(v, list) else v
                    for k, v in doc["channels"].items()
                }
            ),
            wells=[
                WellSpec(
                    name=w["name"],
                    i=w["i"],
                    j=w["j"],
                    role=w["role"],
                    bhp=w["bhp"],
                    perforated_channel_layers=tuple(w["channel_layers"])
                    if w.get("channel_layers")
                    else None,
                    perforated_levee_layers=tuple(w["levee_layers"])
                    if w.get("levee_layers")
                    else None,
                )
                for w in doc["wells"]
            ],
            training=TrainingConfig(**doc.get("training", {})),
            bimodal=BimodalConfig(
                **{
                    k: tuple(v) if isinstance(v, list) else v
                    for k, v in doc.get("bimodal", {}).items()
                }
            ),
            flow=FlowConfig(**doc.get("flow", {})),
            esmda=EsmdaRunConfig(
                **{
                    k: tuple(v) if isinstance(v, list) else v
                    for k, v in doc.get("esmda", {}).items()
                }
            ),
            seed=doc.get("seed", 1234),
            out_dir=doc.get("out_dir", "runs/out"),
        )


# ---------------------------------------------------------------------------
# desk-scale presets (24 x 24 x 8 grid)
# ---------------------------------------------------------------------------

def preset_binary(out_dir: str = "runs/binary", seed: int = 1234) -> PipelineConfig:
    grid = GridDims(24, 24, 8)
    wells = [
        WellSpec("I1", 6, 3, "injector", 340.0, (3, 5)),
        WellSpec("P1", 18, 22, "producer", 300.0, (4, 6)),
    ]
    return PipelineConfig(
        case="binary",
        grid=grid,
        channels=ChannelParams(channel_fraction=0.0653),
        wells=wells,
        seed=seed,
        out_dir=out_dir,
    )


def preset_ternary(out_dir: str = "runs/ternary", seed: int = 1234) -> PipelineConfig:
    grid = GridDims(24, 24, 8)
    wells = [
        WellSpec("I1", 5, 4, "injector", 340.0, (3, 5)),
        WellSpec("I2", 20, 5, "injector", 340.0, (1, 2)),
        WellSpec("I3", 3, 12, "injector", 340.0, (6, 8)),
        WellSpec("P1", 19, 20, "producer", 300.0, (2, 3)),
        WellSpec("P2", 10, 21, "producer", 300.0, (6, 7), (4, 5)),
        WellSpec("P3", 14, 19, "producer", 300.0, (5, 6)),
    ]
    return PipelineConfig(
        case="ternary",
        grid=grid,
        channels=ChannelParams(channel_fraction=0.087, levee_fraction=0.0542),
        wells=wells,
        training=TrainingConfig(gamma_s=50.0),
        seed=seed,
        out_dir=out_dir,
    )


def preset_bimodal(out_dir: str = "runs/bimodal", seed: int = 1234) -> PipelineConfig:
    cfg = preset_binary(out_dir=out_dir, seed=seed)
    cfg.case = "bimodal"
    return cfg


PRESETS = {
    "binary": preset_binary,
    "ternary": preset_ternary,
    "bimodal": preset_bimodal,
}
