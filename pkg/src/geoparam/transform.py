"""The model transform network: an encoder, five residual blocks, and a
nearest-neighbor-upsampling decoder, all circular-padded so the output grid
equals the input grid.

Layer stack (channels, kernel, stride/upsample):
    Conv 32, 3x9x9, stride 1        + BN + ReLU
    Conv 64, 3x3x3, stride (2,2,2)  + BN + ReLU
    Conv 128, 3x3x3, stride (1,2,2) + BN + ReLU
    5 x [Conv 128 + BN + ReLU, Conv 128 + BN, skip add]
    upsample (1,2,2), Conv 64, 3x3x3 + BN + ReLU
    upsample (2,2,2), Conv 32, 3x3x3 + BN + ReLU
    Conv 1, 3x9x9 (bare: no BN, no activation)

The final convolution takes the 32 channels the previous layer emits and its
output is unbounded; discretization happens downstream.

By default a delta-initialized single-channel convolution of the
(standardized) input is added to the stack output, so the whole net begins as
the identity map and training only has to learn a correction: the skip
convolution captures full-resolution local filtering (the strided bottleneck
can only express block-scale corrections), while the stack adds the
nonlinear, longer-range part. Short desk-scale budgets cannot recover
input-tracking behavior from a random init without this; the skip preserves
shape and shift equivariance.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .grid import Geomodel, GridDims, ShapeError

_N_RES_BLOCKS = 5


class _ConvBN:
    def __init__(self, spec: ad.Conv3dSpec, rng, act: bool, momentum: float, dtype):
        self.conv = ad.Conv3d(spec, rng, dtype=dtype)
        self.bn = ad.BatchNorm3d(spec.out_channels, momentum=momentum, dtype=dtype)
        self.act = act

    def __call__(self, x, mode):
        h = self.bn(self.conv(x), mode)
        return ad.relu(h) if self.act else h


class _ResidualBlock:
    def __init__(self, channels, rng, momentum, dtype):
        spec = ad.Conv3dSpec(channels, channels, (3, 3, 3), (1, 1, 1), "circular")
        self.a = _ConvBN(spec, rng, act=True, momentum=momentum, dtype=dtype)
        self.b = _ConvBN(spec, rng, act=False, momentum=momentum, dtype=dtype)
        # zero-started second scale: each block begins as the identity, so
        # early optimizer steps go into the encoder/decoder path
        self.b.bn.gamma.data[:] = 0.0

    def __call__(self, x, mode):
        return ad.add(x, self.b(self.a(x, mode), mode))


class TransformNet:
    def __init__(self, seed: int = 0, momentum: float = 0.1, dtype=np.float32,
                 identity_skip: bool = True):
        rng = np.random.default_rng(int(seed))
        self.seed = int(seed)
        self.dtype = dtype
        self.identity_skip = bool(identity_skip)
        # fixed input/output affine: the net sees standardized fields and its
        # raw output is mapped back to model units, so facies-coded inputs
        # with small positive means still give signed gradients everywhere
        self.norm_mean = 0.0
        self.norm_std = 1.0
        c = lambda o, i, k, s: ad.Conv3dSpec(o, i, k, s, "circular")
        self.enc1 = _ConvBN(c(32, 1, (3, 9, 9), (1, 1, 1)), rng, True, momentum, dtype)
        self.enc2 = _ConvBN(c(64, 32, (3, 3, 3), (2, 2, 2)), rng, True, momentum, dtype)
        self.enc3 = _ConvBN(c(128, 64, (3, 3, 3), (1, 2, 2)), rng, True, momentum, dtype)
        self.res = [_ResidualBlock(128, rng, momentum, dtype) for _ in range(_N_RES_BLOCKS)]
        self.dec1 = _ConvBN(c(64, 128, (3, 3, 3), (1, 1, 1)), rng, True, momentum, dtype)
        self.dec2 = _ConvBN(c(32, 64, (3, 3, 3), (1, 1, 1)), rng, True, momentum, dtype)
        self.out = ad.Conv3d(c(1, 32, (3, 9, 9), (1, 1, 1)), rng, dtype=dtype)
        # zero-started readout: the initial output is flat, so the few
        # optimizer steps of a short training run shape it from a blank
        # slate instead of first unlearning init noise
        self.out.weight.data[:] = 0.0
        self.skip = None
        if self.identity_skip:
            self.skip = ad.Conv3d(c(1, 1, (3, 9, 9), (1, 1, 1)), rng, dtype=dtype)
            self.skip.weight.data[:] = 0.0
            self.skip.weight.data[0, 0, 1, 4, 4] = 1.0  # delta kernel: identity

    # -- structure ---------------------------------------------------------

    def _blocks(self):
        yield "enc1", self.enc1
        yield "enc2", self.enc2
        yield "enc3", self.enc3
        for i, r in enumerate(self.res):
            yield f"res{i + 1}.a", r.a
            yield f"res{i + 1}.b", r.b
        yield "dec1", self.dec1
        yield "dec2", self.dec2

    def named_parameters(self) -> list[tuple[str, ad.Tensor]]:
        params = []
        for name, blk in self._blocks():
            params.append((f"fw.{name}.weight", blk.conv.weight))
            params.append((f"fw.{name}.bias", blk.conv.bias))
            params.append((f"fw.{name}.gamma", blk.bn.gamma))
            params.append((f"fw.{name}.beta", blk.bn.beta))
        params.append(("fw.out.weight", self.out.weight))
        params.append(("fw.out.bias", self.out.bias))
        if self.skip is not None:
            params.append(("fw.skip.weight", self.skip.weight))
            params.append(("fw.skip.bias", self.skip.bias))
        return params

    def bn_modules(self) -> list[ad.BatchNorm3d]:
        return [blk.bn for _, blk in self._blocks()]

    def param_count(self) -> int:
        return sum(int(np.prod(p.shape)) for _, p in self.named_parameters())

    # -- forward -----------------------------------------------------------

    @staticmethod
    def check_dims(dims: GridDims | tuple) -> None:
        nz, ny, nx = dims.shape if isinstance(dims, GridDims) else dims
        if nx % 4 or ny % 4 or nz % 2:
            raise ShapeError(
                f"transform net needs nx % 4 == 0, ny % 4 == 0, nz % 2 == 0; got "
                f"(nz={nz}, ny={ny}, nx={nx})"
            )

    def set_normalization(self, mean: float, std: float) -> None:
        if std <= 0:
            raise ValueError(f"normalization std must be positive, got {std}")
        self.norm_mean = float(mean)
        self.norm_std = float(std)

    def forward(self, x: ad.Tensor, mode: str = "eval") -> ad.Tensor:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"input must be (B, 1, nz, ny, nx), got {x.shape}")
        self.check_dims(x.shape[2:])
        x_n = ad.affine(x, 1.0 / self.norm_std, -self.norm_mean / self.norm_std)
        h = self.enc1(x_n, mode)
        h = self.enc2(h, mode)
        h = self.enc3(h, mode)
        for r in self.res:
            h = r(h, mode)
        h = self.dec1(ad.upsample_nearest3d(h, (1, 2, 2)), mode)
        h = self.dec2(ad.upsample_nearest3d(h, (2, 2, 2)), mode)
        h = self.out(h)
        if self.skip is not None:
            h = ad.add(h, self.skip(x_n))
        return ad.affine(h, self.norm_std, self.norm_mean)

    def __call__(self, x: ad.Tensor, mode: str = "eval") -> ad.Tensor:
        return self.forward(x, mode)

    def transform(self, models: list[Geomodel], batch: int = 16) -> list[Geomodel]:
        """Eval-mode application to a list of geomodels."""
        out: list[Geomodel] = []
        for start in range(0, len(models), batch):
            chunk = models[start : start + batch]
            data = np.stack([m.values for m in chunk])[:, None].astype(self.dtype)
            with ad.no_grad():
                y = self.forward(ad.Tensor(data), mode="eval")
            for m, vals in zip(chunk, y.data[:, 0]):
                out.append(Geomodel(m.dims, vals.astype(np.float64), "continuous", "transformed"))
        return out

    # -- persistence -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {name: p.data for name, p in self.named_parameters()}
        for name, blk in self._blocks():
            tensors[f"fw.{name}.running_mean"] = blk.bn.running_mean
            tensors[f"fw.{name}.running_var"] = blk.bn.running_var
        tensors["fw.norm"] = np.array([self.norm_mean, self.norm_std])
        return tensors

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.state_tensors())

    def load(self, path) -> None:
        tensors = ad.load_checkpoint(path)
        for name, p in self.named_parameters():
            if name not in tensors:
                raise KeyError(f"{path} missing {name}")
            if tensors[name].shape != p.shape:
                raise ShapeError(f"{name}: shape {tensors[name].shape} != {p.shape}")
            p.data = tensors[name].astype(p.dtype)
            p._version += 1
        for name, blk in self._blocks():
            blk.bn.running_mean[:] = tensors[f"fw.{name}.running_mean"]
            blk.bn.running_var[:] = tensors[f"fw.{name}.running_var"]
        if "fw.norm" in tensors:
            self.set_normalization(*tensors["fw.norm"].tolist())


def init(seed: int) -> TransformNet:
    return TransformNet(seed=seed)
