"""Fixed 3D convolutional feature extractor and Gram-based style distance.

Six stride-1 conv/ReLU layers (64, 128, 256, 256, 512, 512 channels, all
3x3x3 kernels) interleaved with max pools of (1,2,2), (2,2,2), (2,2,2);
features are tapped after layers 1, 2, 4 and 6. Weights are He-seeded
from a single seed by default, or loaded from a checkpoint file. The
extractor is never trained, but extraction is differentiable with respect
to its input so style gradients can reach an upstream network.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .grid import Geomodel, ShapeError

_CHANNELS = (64, 128, 256, 256, 512, 512)
_POOL_AFTER = {1: (1, 2, 2), 2: (2, 2, 2), 4: (2, 2, 2)}  # layer index -> pool
TAP_LAYERS = (1, 2, 4, 6)


class C3dExtractor:
    """Feature extractor over (batch, 1, nz, ny, nx) geomodel tensors.

    Spatial dims must be divisible by 8 in x/y and by 4 in z so the pool
    cascade stays aligned. Convolutions use circular padding, matching the
    periodic geometry of the rest of the pipeline.
    """

    # tap gain: sets how much one unit of Gram mismatch weighs against the
    # cell-space losses; calibrated once so the style term of the total loss
    # is commensurate with the reconstruction term at the shipped weights
    TAP_GAIN = 20.0

    def __init__(self, seed: int = 0, weights_path=None, dtype=np.float32):
        rng = np.random.default_rng(int(seed))
        self.seed = int(seed)
        self.layers: list[ad.Conv3d] = []
        self.tap_scales = [1.0] * len(TAP_LAYERS)
        in_ch = 3
        for out_ch in _CHANNELS:
            spec = ad.Conv3dSpec(out_ch, in_ch, (3, 3, 3), (1, 1, 1), "circular")
            layer = ad.Conv3d(spec, rng, dtype=dtype)
            layer.weight.requires_grad = False
            layer.bias.requires_grad = False
            self.layers.append(layer)
            in_ch = out_ch
        if weights_path is not None:
            self.load_weights(weights_path)
        else:
            self._calibrate(rng)

    def _calibrate(self, rng: np.random.Generator) -> None:
        """Normalize the seeded feature scales on a fixed probe batch.

        Two stages: per-layer weight rescaling to unit activation RMS (He
        draws keep variance only for white zero-mean signals; real inputs
        correlate and would drift over six layers), then per-tap output
        scales so every tap's probe Gram carries the same normalized mass,
        times the global gain."""
        probe = ad.Tensor(rng.standard_normal((2, 3, 4, 16, 16)).astype(np.float32))
        with ad.no_grad():
            h = probe
            tap_i = 0
            for k, layer in enumerate(self.layers, start=1):
                h = ad.relu(layer(h))
                rms = float(np.sqrt(np.mean(h.data.astype(np.float64) ** 2)))
                if rms > 0:
                    layer.weight.data /= rms
                    layer.weight._version += 1
                    h = ad.Tensor(h.data / rms)
                if k in TAP_LAYERS:
                    g = ad.gram(h).data
                    mass = float(np.abs(g).sum() / len(g)) / g.shape[-1] ** 2
                    self.tap_scales[tap_i] = self.TAP_GAIN / np.sqrt(max(mass, 1e-30))
                    tap_i += 1
                pool = _POOL_AFTER.get(k)
                if pool is not None:
                    h = ad.maxpool3d(h, pool)

    def load_weights(self, path) -> None:
        tensors = ad.load_checkpoint(path)
        for k, layer in enumerate(self.layers, start=1):
            wname, bname = f"c3d.conv{k}.weight", f"c3d.conv{k}.bias"
            if wname not in tensors or bname not in tensors:
                raise KeyError(f"{path} missing {wname}/{bname}")
            if tensors[wname].shape != layer.weight.shape:
                raise ShapeError(
                    f"{wname} has shape {tensors[wname].shape}, expected {layer.weight.shape}"
                )
            layer.weight.data = tensors[wname].astype(layer.weight.dtype)
            layer.bias.data = tensors[bname].astype(layer.bias.dtype)
            layer.weight._version += 1

    def save_weights(self, path) -> None:
        tensors = {}
        for k, layer in enumerate(self.layers, start=1):
            tensors[f"c3d.conv{k}.weight"] = layer.weight.data
            tensors[f"c3d.conv{k}.bias"] = layer.bias.data
        ad.save_checkpoint(path, tensors)

    def check_dims(self, spatial) -> None:
        nz, ny, nx = spatial
        if nz % 4 or ny % 8 or nx % 8:
            raise ShapeError(
                f"extractor needs z % 4 == 0 and y, x % 8 == 0, got {spatial}"
            )

    def extract(self, x: ad.Tensor) -> list[ad.Tensor]:
        """Tap activations (post-ReLU) at layers 1, 2, 4, 6.

        Accepts single-channel input and replicates it to the 3 channels the
        first convolution expects."""
        if x.ndim != 5:
            raise ShapeError(f"extractor input must be 5-axis, got {x.shape}")
        self.check_dims(x.shape[2:])
        if x.shape[1] == 1:
            x = ad.repeat_channels(x, 3)
        elif x.shape[1] != 3:
            raise ShapeError(f"extractor input must have 1 or 3 channels, got {x.shape[1]}")
        taps = []
        h = x
        for k, layer in enumerate(self.layers, start=1):
            h = ad.relu(layer(h))
            if k in TAP_LAYERS:
                scale = self.tap_scales[len(taps)]
                taps.append(ad.scale(h, scale) if scale != 1.0 else h)
            pool = _POOL_AFTER.get(k)
            if pool is not None:
                h = ad.maxpool3d(h, pool)
        return taps


def batch_tensor(models: list[Geomodel], dtype=np.float32) -> ad.Tensor:
    """Stack geomodels into a (B, 1, nz, ny, nx) constant tensor."""
    data = np.stack([m.values for m in models])[:, None]
    return ad.Tensor(data.astype(dtype))


def gram_sets(extractor: C3dExtractor, x: ad.Tensor) -> list[ad.Tensor]:
    """Per-layer Gram matrices, each (B, C_k, C_k)."""
    return [ad.gram(t) for t in extractor.extract(x)]


def reference_grams(extractor: C3dExtractor, models: list[Geomodel]) -> list[np.ndarray]:
    """Tape-free Gram sets for constant reference models."""
    with ad.no_grad():
        return [g.data for g in gram_sets(extractor, batch_tensor(models))]


def style_distance(grams_a, grams_b) -> ad.Tensor:
    """Sum over tap layers of the channel-normalized L1 Gram difference:
    sum_k |G_k(a) - G_k(b)|_1 / N_{z,k}^2, summed over the batch."""
    if len(grams_a) != len(grams_b):
        raise ShapeError(f"layer sets differ: {len(grams_a)} vs {len(grams_b)}")
    total = None
    for ga, gb in zip(grams_a, grams_b):
        ga = ad.as_tensor(ga)
        gb = ad.as_tensor(gb)
        if ga.shape != gb.shape:
            raise ShapeError(f"gram shapes differ: {ga.shape} vs {gb.shape}")
        n_z = ga.shape[-1]
        term = ad.scale(ad.tsum(ad.absval(ad.sub(ga, gb))), 1.0 / n_z**2)
        total = term if total is None else ad.add(total, term)
    return total


def style_distance_value(grams_a, grams_b) -> float:
    """Plain-number style distance between two constant Gram sets."""
    total = 0.0
    for ga, gb in zip(grams_a, grams_b):
        n_z = ga.shape[-1]
        total += float(np.abs(ga - gb).sum(dtype=np.float64)) / n_z**2
    return total
