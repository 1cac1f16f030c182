"""Training-set assembly, the three-part loss, and the Adam training loop.

Each training sample is a triple: an original geomodel, its perturbed PCA
reconstruction (paired), and an independently sampled PCA model whose style
reference is the original model of the same index after a one-off shuffle.
Per mini-batch the losses of the samples are summed (not averaged) and one
Adam step is taken. Cell reductions inside the losses accumulate in float64.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .grid import Geomodel, HardDataMask, ShapeError
from .pca import PcaBasis, perturb_and_reconstruct, sample
from .seeds import rng_for
from .stylenet import C3dExtractor, gram_sets, reference_grams, style_distance
from .transform import TransformNet


@dataclass(frozen=True)
class TrainTriple:
    m_gm: Geomodel
    m_tilde: Geomodel
    m_pca_new: Geomodel

    def __post_init__(self):
        if not (self.m_gm.dims == self.m_tilde.dims == self.m_pca_new.dims):
            raise ShapeError("triple members live on different grids")


@dataclass(frozen=True)
class LossWeights:
    gamma_rec: float
    gamma_s: float
    gamma_h: float

    def __post_init__(self):
        if min(self.gamma_rec, self.gamma_s, self.gamma_h) < 0:
            raise ValueError("loss weights must be non-negative")
        if max(self.gamma_rec, self.gamma_s, self.gamma_h) == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 10
    seed: int = 0


@dataclass
class LossReport:
    batch_rows: list = field(default_factory=list)  # (epoch, batch, rec, s, h, t)
    epoch_rows: list = field(default_factory=list)  # (epoch, rec, s, h, t, honoring)

    def epoch_total(self, epoch: int) -> float:
        return self.epoch_rows[epoch][4]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "batch", "L_rec", "L_s", "L_h", "L_t"])
            for row in self.batch_rows:
                w.writerow([row[0], row[1], *(f"{v:.10g}" for v in row[2:])])


def build_training_set(
    models: list[Geomodel], basis: PcaBasis, seed: int
) -> list[TrainTriple]:
    """Triples for every ensemble member; the perturbation draw is fixed per
    pair here, and the style references are assigned by one seed-driven
    shuffle of the fresh PCA samples."""
    l, _ = basis.require_dims()
    rng_perturb = rng_for(seed, "perturb")
    rng_sample = rng_for(seed, "pca-sample")
    rng_shuffle = rng_for(seed, "shuffle")
    tildes = [perturb_and_reconstruct(basis, m, rng_perturb)[1] for m in models]
    news = [sample(basis, rng_sample.standard_normal(l)) for _ in models]
    order = rng_shuffle.permutation(len(models))
    news = [news[int(j)] for j in order]
    return [TrainTriple(g, t, n) for g, t, n in zip(models, tildes, news)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_reconstruction(target: ad.Tensor, out_tilde: ad.Tensor) -> ad.Tensor:
    """L1 distance summed over cells (and the batch)."""
    if target.shape != out_tilde.shape:
        raise ShapeError(f"shapes differ: {target.shape} vs {out_tilde.shape}")
    return ad.tsum(ad.absval(ad.sub(target, out_tilde)))


def loss_style(
    extractor: C3dExtractor, ref_grams: list[np.ndarray], out_new: ad.Tensor
) -> ad.Tensor:
    """Gram distance of the network output to its (unrelated) reference."""
    return style_distance(ref_grams, gram_sets(extractor, out_new))


def loss_hard_data(
    target: ad.Tensor,
    out_new: ad.Tensor,
    out_tilde: ad.Tensor,
    mask: HardDataMask,
) -> ad.Tensor:
    """(1/N_h) * [sum_mask (gm - out_new)^2 + sum_mask (gm - out_tilde)^2]."""
    n_h = mask.count
    if n_h == 0:
        raise ValueError("hard-data loss undefined for an empty mask")
    sel = ad.Tensor(
        np.broadcast_to(
            mask.selector[None, None].astype(target.dtype), target.shape
        ).copy()
    )
    total = None
    for out in (out_new, out_tilde):
        d = ad.mul(ad.sub(target, out), sel)
        term = ad.tsum(ad.mul(d, d))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / n_h)


def _nearest_code(values: np.ndarray, n_codes: int) -> np.ndarray:
    return np.clip(np.rint(values), 0, n_codes - 1)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(
    net: TransformNet,
    dataset: list[TrainTriple],
    mask: HardDataMask,
    weights: LossWeights,
    config: TrainConfig,
    extractor: C3dExtractor | None = None,
) -> tuple[TransformNet, LossReport]:
    """Mini-batch Adam training; deterministic per config.seed (epoch
    shuffling included). Aborts with the offending term on non-finite loss."""
    if not dataset:
        raise ValueError("empty training set")
    if weights.gamma_s > 0 and extractor is None:
        raise ValueError("style loss requested but no extractor supplied")
    dims = dataset[0].m_gm.dims
    for t in dataset:
        if t.m_gm.dims != dims:
            raise ShapeError("training set mixes grids")
    need_new = weights.gamma_s > 0 or weights.gamma_h > 0

    dtype = net.dtype
    gm_stack = np.stack([t.m_gm.values for t in dataset])[:, None].astype(dtype)
    tilde_stack = np.stack([t.m_tilde.values for t in dataset])[:, None].astype(dtype)
    new_stack = np.stack([t.m_pca_new.values for t in dataset])[:, None].astype(dtype)

    refs = None
    if weights.gamma_s > 0:
        refs = []
        for start in range(0, len(dataset), max(config.batch, 1)):
            chunk = [t.m_gm for t in dataset[start : start + config.batch]]
            refs.append(reference_grams(extractor, chunk))
        refs = [np.concatenate([r[k] for r in refs]) for k in range(len(refs[0]))]

    params = net.named_parameters()
    state = ad.AdamState(learning_rate=config.lr)
    report = LossReport()
    n = len(dataset)
    n_codes = int(gm_stack.max()) + 1 if gm_stack.max() >= 1 else 2

    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, epoch]).permutation(n)
        ep = np.zeros(4)
        honored = 0
        honored_total = 0
        for bi, start in enumerate(range(0, n, config.batch)):
            idx = perm[start : start + config.batch]
            gm_t = ad.Tensor(gm_stack[idx])
            out_tilde = net(ad.Tensor(tilde_stack[idx]), mode="train")
            l_rec = loss_reconstruction(gm_t, out_tilde)
            out_new = None
            if need_new:
                out_new = net(ad.Tensor(new_stack[idx]), mode="train")
            l_s = None
            if weights.gamma_s > 0:
                batch_refs = [r[idx] for r in refs]
                l_s = loss_style(extractor, batch_refs, out_new)
            l_h = None
            if weights.gamma_h > 0:
                l_h = loss_hard_data(gm_t, out_new, out_tilde, mask)

            vals = {
                "L_rec": l_rec.item(),
                "L_s": l_s.item() if l_s is not None else 0.0,
                "L_h": l_h.item() if l_h is not None else 0.0,
            }
            for name, v in vals.items():
                if not np.isfinite(v):
                    raise FloatingPointError(
                        f"non-finite {name} at epoch {epoch} batch {bi}: {v}"
                    )

            total = ad.scale(l_rec, weights.gamma_rec)
            if l_s is not None:
                total = ad.add(total, ad.scale(l_s, weights.gamma_s))
            if l_h is not None:
                total = ad.add(total, ad.scale(l_h, weights.gamma_h))
            l_t = total.item()

            for _, p in params:
                p.zero_grad()
            total.backward()
            ad.adam_step(params, [p.grad for _, p in params], state)

            report.batch_rows.append(
                (epoch, bi, vals["L_rec"], vals["L_s"], vals["L_h"], l_t)
            )
            ep += (vals["L_rec"], vals["L_s"], vals["L_h"], l_t)

            if mask.count:
                sel = mask.selector
                targets = mask.target[sel]
                for out in (out_new, out_tilde):
                    if out is None:
                        continue
                    for b in range(out.shape[0]):
                        got = _nearest_code(out.data[b, 0][sel], n_codes)
                        honored += int((got == targets).sum())
                        honored_total += targets.size
        rate = honored / honored_total if honored_total else 1.0
        report.epoch_rows.append((epoch, *ep.tolist(), rate))

    _refresh_bn_statistics(net, gm_stack, tilde_stack, new_stack if need_new else None, config)
    return net, report


def _refresh_bn_statistics(net, gm_stack, tilde_stack, new_stack, config) -> None:
    """Re-estimate BN running statistics at the final weights.

    During a short run the EMA statistics lag the fast-moving activations and
    eval mode then mis-normalizes. One no-grad pass with cumulative averaging
    pins the running arrays to the converged weights."""
    bns = net.bn_modules()
    for bn in bns:
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 1.0
    stacks = [tilde_stack] if new_stack is None else [tilde_stack, new_stack]
    n = gm_stack.shape[0]
    step = 0
    saved = [bn.momentum for bn in bns]
    try:
        for stack in stacks:
            for start in range(0, n, config.batch):
                for bn in bns:
                    bn.momentum = 1.0 / (step + 1)
                with ad.no_grad():
                    net(ad.Tensor(stack[start : start + config.batch]), mode="train")
                step += 1
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m
