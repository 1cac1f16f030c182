"""Command-line front end.

Subcommands compose through a conventional layout under the config's output
directory (overridable with --out):

    gm/                 generator facies ensemble
    sand/ mud/ logk/    bimodal property ensembles and assembled fields
    basis.pca           facies PCA basis
    pca/                sampled PCA ensemble
    fw.ckpt, loss.csv   trained transform net and its loss trace
    cnnpca/ cnnpca_facies/ rule.json   transformed outputs and truncation
    rates.csv stats.csv flow results
    esmda/              observations, posterior latents, mismatch trace
    maps/               exported layer images

Thread env vars are set before numpy loads, so --threads/--deterministic
actually bind the BLAS pools.
"""
from __future__ import annotations

import argparse
import os
import sys


def _apply_thread_flags(args) -> None:
    n = 1 if args.deterministic else args.threads
    if n is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="geoparam",
        description="Conditional 3D geomodel generation, PCA + network parameterization, "
        "flow proxy, and ensemble history matching.",
    )
    p.add_argument("--config", required=False, help="pipeline config JSON")
    p.add_argument("--preset", choices=("binary", "ternary", "bimodal"),
                   help="use a built-in desk-scale preset instead of --config")
    p.add_argument("--seed", type=int, default=None, help="override the config root seed")
    p.add_argument("--out", default=None, help="override the config output directory")
    p.add_argument("--threads", type=int, default=None, help="BLAS/FFT thread cap")
    p.add_argument("--deterministic", action="store_true",
                   help="force single-threaded, fixed-order reductions")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", help="generate the conditional ensemble")
    sp.add_argument("--count", type=int, default=100)

    sp = sub.add_parser("pca-fit", help="fit the PCA basis from an ensemble")
    sp.add_argument("--models", default=None, help="ensemble dir (default <out>/gm)")

    sp = sub.add_parser("pca-sample", help="sample new PCA models from the basis")
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--basis", default=None)

    sp = sub.add_parser("train", help="train the transform net")
    sp.add_argument("--models", default=None)

    sp = sub.add_parser("transform", help="apply the trained net to a PCA ensemble and truncate")
    sp.add_argument("--models", default=None, help="PCA ensemble dir (default <out>/pca)")
    sp.add_argument("--net", default=None)

    sp = sub.add_parser("truncate-calibrate", help="calibrate a truncation rule for an ensemble")
    sp.add_argument("--models", required=True)
    sp.add_argument("--rule-out", default=None)

    sp = sub.add_parser("bimodal-assemble", help="cookie-cutter facies with property fields")
    sp.add_argument("--facies", required=True)
    sp.add_argument("--sand", required=True)
    sp.add_argument("--mud", required=True)

    sp = sub.add_parser("flow", help="solve the pressure proxy over an ensemble")
    sp.add_argument("--models", required=True)

    sp = sub.add_parser("esmda", help="history-match the bimodal case")
    sp.add_argument("--obs", default=None, help="observations JSON (default: synthesize)")
    sp.add_argument("--rounds-ensemble", type=int, default=None,
                    help="override config ensemble size")

    sp = sub.add_parser("export-maps", help="write areal layer images")
    sp.add_argument("--models", required=True)
    sp.add_argument("--layers", default="1", help="comma-separated 1-based layer indices")
    sp.add_argument("--format", choices=("pgm", "png"), default="pgm")
    sp.add_argument("--limit", type=int, default=8, help="max models to export")

    sp = sub.add_parser("export-stats", help="percentile table from a rates CSV")
    sp.add_argument("--rates", required=True)

    return p


def _load_config(args):
    from .config import PRESETS, PipelineConfig

    if args.config:
        cfg = PipelineConfig.from_json(args.config)
    elif args.preset:
        cfg = PRESETS[args.preset]()
    else:
        raise SystemExit("one of --config or --preset is required")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _outdir(cfg):
    from pathlib import Path

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg, args) -> list:
    from . import io as gio
    from . import pipeline as pl

    out = _outdir(cfg)
    models = pl.generate_models(cfg, args.count)
    gio.save_ensemble(out / "gm", models)
    written = [out / "gm" / "manifest.json"]
    if cfg.case == "bimodal":
        from .postprocess import assemble_bimodal

        sand, mud = pl.generate_property_fields(cfg, args.count)
        gio.save_ensemble(out / "sand", sand, prefix="sand")
        gio.save_ensemble(out / "mud", mud, prefix="mud")
        logk = [assemble_bimodal(f, s, m) for f, s, m in zip(models, sand, mud)]
        gio.save_ensemble(out / "logk", logk, prefix="logk")
        written += [out / d / "manifest.json" for d in ("sand", "mud", "logk")]
    return written


def cmd_pca_fit(cfg, args) -> list:
    from . import io as gio
    from . import pipeline as pl

    out = _outdir(cfg)
    models = gio.load_ensemble(args.models or out / "gm")
    basis = pl.fit_basis(cfg, models)
    gio.save_pca_basis(out / "basis.pca", basis)
    return [out / "basis.pca"]


def cmd_pca_sample(cfg, args) -> list:
    from . import io as gio
    from . import pca as pca_mod
    from .seeds import rng_for

    out = _outdir(cfg)
    basis = gio.load_pca_basis(args.basis or out / "basis.pca")
    rng = rng_for(cfg.seed, "pca-sample")
    latents = pca_mod.sample_latents(basis, args.count, rng)
    models = [pca_mod.sample(basis, x) for x in latents]
    gio.save_ensemble(out / "pca", models, prefix="pca")
    gio.save_latents(out / "pca" / "latents.xi", latents)
    return [out / "pca" / "manifest.json", out / "pca" / "latents.xi"]


def cmd_train(cfg, args) -> list:
    from . import io as gio
    from . import pipeline as pl

    out = _outdir(cfg)
    models = gio.load_ensemble(args.models or out / "gm")
    basis_path = out / "basis.pca"
    basis = gio.load_pca_basis(basis_path) if basis_path.exists() else None
    trained = pl.train_from_models(cfg, models, basis=basis)
    if basis is None:
        gio.save_pca_basis(basis_path, trained.basis)
    trained.net.save(out / "fw.ckpt")
    trained.report.write_csv(out / "loss.csv")
    return [out / "fw.ckpt", out / "loss.csv", basis_path]


def cmd_transform(cfg, args) -> list:
    from . import io as gio
    from . import pipeline as pl
    from .transform import TransformNet

    out = _outdir(cfg)
    models = gio.load_ensemble(args.models or out / "pca")
    net = TransformNet()
    net.load(args.net or out / "fw.ckpt")
    outputs, rule, truncated = pl.transform_and_truncate(cfg, net, models)
    gio.save_ensemble(out / "cnnpca", outputs, prefix="cnnpca")
    gio.save_ensemble(out / "cnnpca_facies", truncated, prefix="cnnpca_facies")
    rule.to_json(out / "rule.json")
    return [
        out / "cnnpca" / "manifest.json",
        out / "cnnpca_facies" / "manifest.json",
        out / "rule.json",
    ]


def cmd_truncate_calibrate(cfg, args) -> list:
    from . import io as gio
    from . import pipeline as pl
    from .postprocess import calibrate_truncation

    out = _outdir(cfg)
    models = gio.load_ensemble(args.models)
    rule = calibrate_truncation(models, pl.target_fractions(cfg))
    rule_path = args.rule_out or out / "rule.json"
    rule.to_json(rule_path)
    return [rule_path]


def cmd_bimodal_assemble(cfg, args) -> list:
    from . import io as gio
    from .postprocess import assemble_bimodal

    out = _outdir(cfg)
    facies = gio.load_ensemble(args.facies)
    sand = gio.load_ensemble(args.sand)
    mud = gio.load_ensemble(args.mud)
    if not (len(facies) == len(sand) == len(mud)):
        raise ValueError("facies/sand/mud ensembles differ in size")
    logk = [assemble_bimodal(f, s, m) for f, s, m in zip(facies, sand, mud)]
    gio.save_ensemble(out / "logk", logk, prefix="logk")
    return [out / "logk" / "manifest.json"]


def cmd_flow(cfg, args) -> list:
    import csv

    from . import io as gio
    from . import pipeline as pl
    from .flow import ensemble_statistics

    out = _outdir(cfg)
    models = gio.load_ensemble(args.models)
    all_rates = [pl.well_rates(cfg, m) for m in models]
    rates_path = out / "rates.csv"
    with open(rates_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_id", "well", "rate_m3_per_day"])
        for i, rates in enumerate(all_rates):
            for name in sorted(rates):
                w.writerow([i, name, f"{rates[name]:.10g}"])
    stats = ensemble_statistics(all_rates)
    stats_path = out / "stats.csv"
    _write_stats_csv(stats_path, stats)
    return [rates_path, stats_path]


def _write_stats_csv(path, stats) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["well", "P10", "P50", "P90"])
        for name in sorted(stats):
            row = stats[name]
            w.writerow([name, *(f"{row[k]:.10g}" for k in ("P10", "P50", "P90"))])


def cmd_esmda(cfg, args) -> list:
    import csv

    from . import io as gio
    from . import pipeline as pl
    from .esmda import EsmdaConfig, EsmdaState, ObservationSet, run
    from .seeds import rng_for
    from .transform import TransformNet

    if cfg.case != "bimodal":
        raise ValueError("esmda runs on the bimodal case")
    out = _outdir(cfg)
    models = gio.load_ensemble(out / "gm")
    basis = gio.load_pca_basis(out / "basis.pca")
    net = TransformNet()
    net.load(out / "fw.ckpt")
    trained = pl.TrainedPipeline(net, basis, None, pl.hard_data_for(cfg), None)
    decoder = pl.build_bimodal_decoder(cfg, trained)

    es_dir = out / "esmda"
    es_dir.mkdir(exist_ok=True)
    if args.obs:
        obs = ObservationSet.from_json(args.obs)
    else:
        _, obs = pl.synthetic_observations(decoder, cfg.seed)
    obs.to_json(es_dir / "obs.json")

    n_e = args.rounds_ensemble or cfg.esmda.ensemble
    es_cfg = EsmdaConfig(n_e, cfg.esmda.alphas, seed=cfg.esmda.seed)
    rng = rng_for(cfg.seed, "esmda", index=10_000)
    prior = EsmdaState(xi=rng.standard_normal((n_e, decoder.latent_size)))
    gio.save_latents(es_dir / "prior.xi", prior.xi)
    posterior, history = run(prior, obs, es_cfg, decoder.data_vector)
    gio.save_latents(es_dir / "posterior.xi", posterior.xi)
    with open(es_dir / "mismatch.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "phi"])
        for i, phi in enumerate(history):
            w.writerow([i, f"{phi:.10g}"])
    return [es_dir / "obs.json", es_dir / "prior.xi", es_dir / "posterior.xi",
            es_dir / "mismatch.csv"]


def cmd_export_maps(cfg, args) -> list:
    from . import io as gio

    out = _outdir(cfg)
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    models = gio.load_ensemble(args.models)[: args.limit]
    layers = [int(s) for s in args.layers.split(",")]
    written = []
    for mi, model in enumerate(models):
        for layer in layers:
            if not (1 <= layer <= model.dims.nz):
                raise ValueError(f"layer {layer} outside [1, {model.dims.nz}]")
            stem = maps_dir / f"model{mi:03d}_layer{layer:02d}"
            if args.format == "pgm":
                path = stem.with_suffix(".pgm")
                gio.write_pgm(path, gio.layer_to_gray(model, layer - 1))
            else:
                path = stem.with_suffix(".png")
                gio.write_png(path, gio.layer_to_rgb(model, layer - 1))
            written.append(path)
    return written


def cmd_export_stats(cfg, args) -> list:
    import csv
    from collections import defaultdict

    from .flow import ensemble_statistics

    out = _outdir(cfg)
    by_model = defaultdict(dict)
    with open(args.rates) as fh:
        for row in csv.DictReader(fh):
            by_model[int(row["model_id"])][row["well"]] = float(row["rate_m3_per_day"])
    rates = [by_model[k] for k in sorted(by_model)]
    stats_path = out / "stats.csv"
    _write_stats_csv(stats_path, ensemble_statistics(rates))
    return [stats_path]


_COMMANDS = {
    "generate": cmd_generate,
    "pca-fit": cmd_pca_fit,
    "pca-sample": cmd_pca_sample,
    "train": cmd_train,
    "transform": cmd_transform,
    "truncate-calibrate": cmd_truncate_calibrate,
    "bimodal-assemble": cmd_bimodal_assemble,
    "flow": cmd_flow,
    "esmda": cmd_esmda,
    "export-maps": cmd_export_maps,
    "export-stats": cmd_export_stats,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_flags(args)
    try:
        cfg = _load_config(args)
        written = _COMMANDS[args.command](cfg, args)
        missing = [str(p) for p in written if not os.path.exists(p)]
        if missing:
            print(f"error: declared outputs missing: {missing}", file=sys.stderr)
            return 1
        for path in written:
            print(path)
        return 0
    except Exception as exc:  # surface module errors as nonzero exits
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
