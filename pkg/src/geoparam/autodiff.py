"""Dense 5-axis tensors (batch, channels, z, y, x) with reverse-mode autodiff.

The op set is exactly what the transform net and the style extractor need:
3D convolution (circular or zero padding, arbitrary stride), batch
normalization, ReLU, nearest-neighbor upsampling, max pooling, channel
replication, Gram matrices, and elementwise/reduction arithmetic. Convolution
forward/backward run as gather + GEMM so BLAS does the heavy lifting; cell
reductions accumulate in float64 regardless of activation precision.

Tensors are immutable once created except through op outputs; `backward`
accumulates gradients in a fixed topological order, so repeated runs on the
same graph are bit-identical.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _sfft

from .grid import ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape construction (eval-mode forwards, reference features)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn",
                 "_version", "_spec_cache")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._version = 0  # bumped on in-place parameter updates
        self._spec_cache: dict | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def backward(self, seed=None):
        """Reverse-mode accumulation from this (typically scalar) tensor."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def _node(data, parents, backward_fn):
    """Wrap an op result; joins the tape only when a parent requires grad."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _node(a.data * c, (a,), bwd)


def affine(a: Tensor, mult: float, shift: float) -> Tensor:
    """Elementwise mult * a + shift with scalar constants."""
    mult = float(mult)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mult)

    return _node(a.data * mult + shift, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _node(a.data * mask, (a,), bwd)


def absval(a: Tensor) -> Tensor:
    sgn = np.sign(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * sgn)

    return _node(np.abs(a.data), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, accumulated in float64."""
    val = np.asarray(a.data.sum(dtype=np.float64))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.full(a.shape, float(g), dtype=np.float64))

    return _node(val, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def repeat_channels(a: Tensor, times: int) -> Tensor:
    """Replicate the channel axis of a (B, C, Z, Y, X) tensor `times`-fold."""
    if a.ndim != 5:
        raise ShapeError(f"repeat_channels expects a 5-axis tensor, got {a.shape}")
    B, C = a.shape[:2]

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(B, C, times, *a.shape[2:]).sum(axis=2))

    return _node(np.repeat(a.data, times, axis=1), (a,), bwd)


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv3dSpec:
    out_channels: int
    in_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding_mode: str = "circular"

    def __post_init__(self):
        if self.out_channels <= 0 or self.in_channels <= 0:
            raise ShapeError("channel counts must be positive")
        if any(k <= 0 or k % 2 == 0 for k in self.kernel):
            raise ShapeError(f"kernel dims must be positive odd, got {self.kernel}")
        if any(s <= 0 for s in self.stride):
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding_mode not in ("circular", "zero"):
            raise ValueError(f"padding_mode must be circular/zero, got {self.padding_mode!r}")

    def out_spatial(self, spatial) -> tuple[int, int, int]:
        # same-padding: output dim = ceil(input dim / stride)
        return tuple(-(-d // s) for d, s in zip(spatial, self.stride))


_GATHER_CACHE: dict[tuple, tuple] = {}


def _gather_plan(spatial, kernel, stride, padding):
    """Flat gather indices (K, out_spatial) for an im2col convolution.

    Circular mode indexes the unpadded volume modulo each axis; zero mode
    indexes a zero-padded copy (pad = kernel // 2 per side).
    """
    key = (spatial, kernel, stride, padding)
    hit = _GATHER_CACHE.get(key)
    if hit is not None:
        return hit
    Z, Y, X = spatial
    kz, ky, kx = kernel
    sz, sy, sx = stride
    pz, py, px = kz // 2, ky // 2, kx // 2
    oz, oy, ox = (-(-Z // sz), -(-Y // sy), -(-X // sx))

    def axis_idx(n, k, s, p, wrap):
        out = np.arange(-(-n // s)) * s
        off = np.arange(k) - p
        raw = out[None, :] + off[:, None]  # (k, o)
        return raw % n if wrap else raw + p  # zero mode indexes the padded axis

    wrap = padding == "circular"
    zi = axis_idx(Z, kz, sz, pz, wrap)
    yi = axis_idx(Y, ky, sy, py, wrap)
    xi = axis_idx(X, kx, sx, px, wrap)
    if wrap:
        strides = (Y * X, X, 1)
    else:
        strides = ((Y + 2 * py) * (X + 2 * px), X + 2 * px, 1)
    idx = (
        zi[:, None, None, :, None, None] * strides[0]
        + yi[None, :, None, None, :, None] * strides[1]
        + xi[None, None, :, None, None, :] * strides[2]
    ).reshape(kz * ky * kx, oz * oy * ox)
    padded = None if wrap else (Z + 2 * pz, Y + 2 * py, X + 2 * px, pz, py, px)
    plan = (idx, (oz, oy, ox), padded)
    _GATHER_CACHE[key] = plan
    return plan


def _pad_zero(xd, padded):
    Zp, Yp, Xp, pz, py, px = padded
    B, C = xd.shape[:2]
    out = np.zeros((B, C, Zp, Yp, Xp), dtype=xd.dtype)
    out[:, :, pz : Zp - pz, py : Yp - py, px : Xp - px] = xd
    return out


# im2col pays off only for tiny stride-1 workloads; above this kernel*grid
# work size the cyclic-correlation FFT route is faster and allocates far less.
_FFT_THRESHOLD = 3_000


def _fft_eligible(kernel, stride, padding, spatial):
    if stride != (1, 1, 1) or padding != "circular":
        return False
    return int(np.prod(kernel)) * int(np.prod(spatial)) >= _FFT_THRESHOLD


_PHASE_CACHE: dict[tuple, tuple] = {}


def _phase_matrix(kernel, spatial, dtype):
    """Synthesis matrix E[k, f] = exp(-2i*pi*sum_a f_a*off_a/n_a) over the
    rfftn half-spectrum, plus Hermitian double-count weights.

    The centered kernel's spectrum is then W_mat @ E; offsets that alias
    under wrap fold automatically through the periodic exponent.
    """
    ftype = np.float64 if dtype == np.float64 else np.float32
    key = (kernel, spatial, ftype)
    hit = _PHASE_CACHE.get(key)
    if hit is not None:
        return hit
    Z, Y, X = spatial
    kz, ky, kx = kernel
    oz = np.arange(kz) - kz // 2
    oy = np.arange(ky) - ky // 2
    ox = np.arange(kx) - kx // 2
    fz = np.arange(Z)
    fy = np.arange(Y)
    fx = np.arange(X // 2 + 1)
    pz = np.exp(-2j * np.pi * np.outer(oz, fz) / Z)
    py = np.exp(-2j * np.pi * np.outer(oy, fy) / Y)
    px = np.exp(-2j * np.pi * np.outer(ox, fx) / X)
    E = (
        pz[:, None, None, :, None, None]
        * py[None, :, None, None, :, None]
        * px[None, None, :, None, None, :]
    ).reshape(kz * ky * kx, -1)
    cw = np.full(X // 2 + 1, 2.0, dtype=ftype)
    cw[0] = 1.0
    if X % 2 == 0:
        cw[-1] = 1.0
    cw = np.broadcast_to(cw, (Z, Y, X // 2 + 1)).reshape(-1).copy()
    plan = (
        np.ascontiguousarray(E.real, dtype=ftype),
        np.ascontiguousarray(E.imag, dtype=ftype),
        cw,
        (Z, Y, X // 2 + 1),
    )
    _PHASE_CACHE[key] = plan
    return plan


def _kernel_spectrum(wd, spatial):
    Er, Ei, _, fsh = _phase_matrix(wd.shape[2:], spatial, wd.dtype)
    wm = wd.reshape(-1, Er.shape[0])
    wh = np.empty((wm.shape[0], Er.shape[1]), dtype=np.result_type(wd.dtype, np.complex64))
    wh.real = wm @ Er
    wh.imag = wm @ Ei
    return wh.reshape(wd.shape[0], wd.shape[1], -1), fsh


class _SpectrumEntry:
    """Kernel spectrum plus lazily built GEMM layouts, valid while the
    parameter version and a content fingerprint both match (the fingerprint
    catches in-place edits that bypass adam_step)."""

    __slots__ = ("version", "fingerprint", "wh", "fsh", "fwd_t", "bwd_t")

    def __init__(self, version, fingerprint, wh, fsh):
        self.version = version
        self.fingerprint = fingerprint
        self.wh = wh
        self.fsh = fsh
        self.fwd_t = None  # (F, Cin, Cout), conjugated
        self.bwd_t = None  # (F, Cout, Cin)


def _fingerprint(arr) -> float:
    return float(arr.sum(dtype=np.float64))


def _spectrum_entry(weights, spatial) -> _SpectrumEntry:
    if weights._spec_cache is None:
        weights._spec_cache = {}
    ent = weights._spec_cache.get(spatial)
    fp = _fingerprint(weights.data)
    if ent is None or ent.version != weights._version or ent.fingerprint != fp:
        wh, fsh = _kernel_spectrum(weights.data, spatial)
        ent = _SpectrumEntry(weights._version, fp, wh, fsh)
        weights._spec_cache[spatial] = ent
    return ent


def _conv3d_fwd_fft(xd, bd, spatial, ent: _SpectrumEntry):
    B, Cin = xd.shape[:2]
    Cout = ent.wh.shape[0]
    xh = _sfft.rfftn(xd, axes=(2, 3, 4)).reshape(B, Cin, -1)
    # correlation: Y^[b,o,f] = sum_i X^[b,i,f] conj(W^)[o,i,f]
    if Cin == 1:
        yh = xh[:, 0][:, None, :] * np.conj(ent.wh)[None, :, 0, :]
    elif Cout == 1:
        yh = (xh * np.conj(ent.wh[0])[None]).sum(axis=1)[:, None, :]
    else:
        if ent.fwd_t is None:
            ent.fwd_t = np.ascontiguousarray(np.conj(ent.wh).transpose(2, 1, 0))
        at = np.ascontiguousarray(xh.transpose(2, 0, 1))  # (F, B, Cin)
        yh = np.matmul(at, ent.fwd_t).transpose(1, 2, 0)
    out = _sfft.irfftn(yh.reshape(B, Cout, *ent.fsh), s=spatial, axes=(2, 3, 4))
    if bd is not None:
        out += bd[:, None, None, None].astype(xd.dtype, copy=False)
    return out


def _conv3d_bwd_fft(xd, gd, spatial, ent: _SpectrumEntry, kernel, need_w, need_x):
    """Shared-spectrum backward for the FFT route."""
    B, Cin = xd.shape[:2]
    Cout = gd.shape[1]
    gh = _sfft.rfftn(gd, axes=(2, 3, 4))
    ghf = gh.reshape(B, Cout, -1)
    dw = db = dx = None
    if need_w:
        xh = _sfft.rfftn(xd, axes=(2, 3, 4)).reshape(B, Cin, -1)
        # corr(dY, X) over the batch: dV^[o,i,f] = sum_b conj(dY^)[b,o,f] X^[b,i,f]
        cg = np.conj(ghf)
        if Cout == 1:
            dvh = (cg[:, 0][:, None, :] * xh).sum(axis=0)[None]
        elif Cin == 1:
            dvh = (cg * xh[:, 0][:, None, :]).sum(axis=0)[:, None, :]
        else:
            at = np.ascontiguousarray(cg.transpose(2, 1, 0))  # (F, Cout, B)
            bt = np.ascontiguousarray(xh.transpose(2, 0, 1))  # (F, B, Cin)
            dvh = np.matmul(at, bt).transpose(1, 2, 0)
        # sample dV = irfftn(dV^) at the kernel offsets via the phase matrix
        Er, Ei, cw, _ = _phase_matrix(kernel, spatial, xd.dtype)
        dvf = dvh.reshape(Cout * Cin, -1)
        n_cells = float(np.prod(spatial))
        dw = ((dvf.real * cw) @ Er.T + (dvf.imag * cw) @ Ei.T) / n_cells
        dw = dw.reshape(Cout, Cin, *kernel)
        db = gd.sum(axis=(0, 2, 3, 4), dtype=np.float64)
    if need_x:
        # convolution: dX^[b,i,f] = sum_o dY^[b,o,f] W^[o,i,f]
        if Cout == 1:
            dxh = ghf[:, 0][:, None, :] * ent.wh[0][None]
        elif Cin == 1:
            dxh = (ghf * ent.wh[:, 0][None]).sum(axis=1)[:, None, :]
        else:
            if ent.bwd_t is None:
                ent.bwd_t = np.ascontiguousarray(ent.wh.transpose(2, 0, 1))
            at = np.ascontiguousarray(ghf.transpose(2, 0, 1))  # (F, B, Cout)
            dxh = np.matmul(at, ent.bwd_t).transpose(1, 2, 0)
        dx = _sfft.irfftn(dxh.reshape(B, Cin, *ent.fsh), s=spatial, axes=(2, 3, 4))
    return dw, db, dx


def _conv3d_fwd(xd, wd, bd, stride, padding):
    B, Cin, Z, Y, X = xd.shape
    Cout = wd.shape[0]
    kernel = wd.shape[2:]
    if _fft_eligible(kernel, stride, padding, (Z, Y, X)):
        wh, fsh = _kernel_spectrum(wd, (Z, Y, X))
        return _conv3d_fwd_fft(xd, bd, (Z, Y, X), _SpectrumEntry(0, 0.0, wh, fsh))
    idx, osp, padded = _gather_plan((Z, Y, X), kernel, stride, padding)
    K = idx.shape[0]
    src = _pad_zero(xd, padded) if padded is not None else xd
    sf = src.reshape(B, Cin, -1)
    wm = wd.reshape(Cout, Cin * K)
    out = np.empty((B, Cout, idx.shape[1]), dtype=xd.dtype)
    flat_idx = idx.reshape(-1)
    for b in range(B):
        col = sf[b][:, flat_idx].reshape(Cin * K, idx.shape[1])
        np.matmul(wm, col, out=out[b])
    if bd is not None:
        out += bd[:, None].astype(xd.dtype, copy=False)
    return out.reshape(B, Cout, *osp)


def _conv3d_bwd_w(xd, gd, kernel, stride, padding):
    """dL/dW via the recomputed im2col matrix; dL/db by reduction."""
    B, Cin, Z, Y, X = xd.shape
    Cout = gd.shape[1]
    idx, osp, padded = _gather_plan((Z, Y, X), kernel, stride, padding)
    K = idx.shape[0]
    src = _pad_zero(xd, padded) if padded is not None else xd
    sf = src.reshape(B, Cin, -1)
    gf = gd.reshape(B, Cout, -1)
    flat_idx = idx.reshape(-1)
    dw = np.zeros((Cout, Cin * K), dtype=xd.dtype)
    for b in range(B):
        col = sf[b][:, flat_idx].reshape(Cin * K, idx.shape[1])
        dw += gf[b] @ col.T
    db = gf.sum(axis=(0, 2), dtype=np.float64)
    return dw.reshape(Cout, Cin, *kernel), db


def _conv3d_bwd_x(gd, wd, in_spatial, stride, padding):
    """dL/dX. Stride 1 is a convolution with the flipped, transposed kernel;
    strided convs scatter-add through the forward gather plan."""
    B = gd.shape[0]
    Cout, Cin = wd.shape[0], wd.shape[1]
    kernel = wd.shape[2:]
    if stride == (1, 1, 1):
        wback = np.ascontiguousarray(wd.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
        return _conv3d_fwd(gd, wback, None, (1, 1, 1), padding)
    idx, osp, padded = _gather_plan(in_spatial, kernel, stride, padding)
    K = idx.shape[0]
    osize = idx.shape[1]
    gf = gd.reshape(B, Cout, osize)
    wm = wd.reshape(Cout, Cin * K)
    if padded is not None:
        Zp, Yp, Xp, pz, py, px = padded
        flat_shape = Zp * Yp * Xp
    else:
        flat_shape = int(np.prod(in_spatial))
    dxf = np.zeros((B, Cin, flat_shape), dtype=gd.dtype)
    for b in range(B):
        u = (wm.T @ gf[b]).reshape(Cin, K, osize)
        for k in range(K):
            dxf[b][:, idx[k]] += u[:, k]
    if padded is not None:
        dxp = dxf.reshape(B, Cin, Zp, Yp, Xp)
        return dxp[:, :, pz : Zp - pz, py : Yp - py, px : Xp - px]
    return dxf.reshape(B, Cin, *in_spatial)


def conv3d(x: Tensor, weights: Tensor, spec: Conv3dSpec, bias: Tensor | None = None) -> Tensor:
    """3D cross-correlation with same-padding (circular or zero) and stride."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d input must be 5-axis (B,C,Z,Y,X), got {x.shape}")
    if weights.shape != (spec.out_channels, spec.in_channels, *spec.kernel):
        raise ShapeError(
            f"conv3d weights {weights.shape} do not match spec "
            f"({spec.out_channels}, {spec.in_channels}, {spec.kernel})"
        )
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv3d input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    spatial = x.shape[2:]
    bd = bias.data if bias is not None else None
    use_fft = _fft_eligible(spec.kernel, spec.stride, spec.padding_mode, spatial)
    if use_fft:
        out = _conv3d_fwd_fft(x.data, bd, spatial, _spectrum_entry(weights, spatial))
    else:
        out = _conv3d_fwd(x.data, weights.data, bd, spec.stride, spec.padding_mode)
    parents = (x, weights) if bias is None else (x, weights, bias)

    def bwd(g):
        need_w = weights.requires_grad or (bias is not None and bias.requires_grad)
        if use_fft:
            ent = _spectrum_entry(weights, spatial)
            dw, db, dx = _conv3d_bwd_fft(
                x.data, g, spatial, ent, spec.kernel, need_w, x.requires_grad
            )
            if weights.requires_grad:
                weights._accumulate(dw)
            if bias is not None and bias.requires_grad:
                bias._accumulate(db)
            if x.requires_grad:
                x._accumulate(dx)
            return
        if need_w:
            dw, db = _conv3d_bwd_w(x.data, g, spec.kernel, spec.stride, spec.padding_mode)
            if weights.requires_grad:
                weights._accumulate(dw)
            if bias is not None and bias.requires_grad:
                bias._accumulate(db)
        if x.requires_grad:
            x._accumulate(_conv3d_bwd_x(g, weights.data, spatial, spec.stride, spec.padding_mode))

    return _node(out, parents, bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm3d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Train mode normalizes with batch statistics and updates the running
    arrays in place (population variance, clamped below by eps). Eval mode
    applies the stored statistics as constants.
    """
    if x.ndim != 5:
        raise ShapeError(f"batch_norm3d input must be 5-axis, got {x.shape}")
    B, C = x.shape[:2]
    if B == 0:
        raise ShapeError("batch_norm3d: zero batch")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train/eval, got {mode!r}")
    axes = (0, 2, 3, 4)
    view = (1, C, 1, 1, 1)
    if mode == "train":
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = x.data.astype(np.float64).var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean
        var = running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(view).astype(x.dtype)) * inv.reshape(view)
    out = gamma.data.reshape(view).astype(x.dtype) * xhat + beta.data.reshape(view).astype(x.dtype)
    n = B * x.shape[2] * x.shape[3] * x.shape[4]

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes, dtype=np.float64))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes, dtype=np.float64))
        if x.requires_grad:
            gxh = g * gamma.data.reshape(view).astype(x.dtype)
            if mode == "train":
                s1 = gxh.sum(axis=axes, dtype=np.float64).reshape(view)
                s2 = (gxh * xhat).sum(axis=axes, dtype=np.float64).reshape(view)
                dx = (inv.reshape(view) / n) * (n * gxh - s1 - xhat * s2)
                x._accumulate(dx.astype(x.dtype))
            else:
                x._accumulate(gxh * inv.reshape(view))

    return _node(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------

def maxpool3d(x: Tensor, kernel, stride=None) -> Tensor:
    """Max over non-overlapping (or strided) windows; the gradient routes to
    the first (lowest linear index) maximum in each window."""
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d input must be 5-axis, got {x.shape}")
    kernel = tuple(kernel)
    stride = kernel if stride is None else tuple(stride)
    B, C, Z, Y, X = x.shape
    for d, k, s in zip((Z, Y, X), kernel, stride):
        if d % s != 0 or d < k or (d - k) % s != 0:
            raise ShapeError(
                f"maxpool3d: spatial dims {(Z, Y, X)} not divisible by stride {stride} "
                f"with kernel {kernel}"
            )
    win = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=(2, 3, 4))
    win = win[:, :, :: stride[0], :: stride[1], :: stride[2]]
    oz, oy, ox = win.shape[2:5]
    wr = win.reshape(B, C, oz, oy, ox, -1)
    am = wr.argmax(axis=-1)
    out = np.take_along_axis(wr, am[..., None], axis=-1)[..., 0]
    overlapping = any(k > s for k, s in zip(kernel, stride))

    def bwd(g):
        if not x.requires_grad:
            return
        kz, ky, kx = kernel
        dz, rem = np.divmod(am, ky * kx)
        dy, dx_ = np.divmod(rem, kx)
        izg = np.arange(oz)[:, None, None] * stride[0] + dz
        iyg = np.arange(oy)[None, :, None] * stride[1] + dy
        ixg = np.arange(ox)[None, None, :] * stride[2] + dx_
        flat = (izg * Y + iyg) * X + ixg
        dxf = np.zeros((B, C, Z * Y * X), dtype=x.dtype)
        bi = np.arange(B)[:, None, None, None, None]
        ci = np.arange(C)[None, :, None, None, None]
        if overlapping:
            np.add.at(dxf, (bi, ci, flat), g)
        else:
            dxf[bi, ci, flat] = g
        x._accumulate(dxf.reshape(B, C, Z, Y, X))

    return _node(out, (x,), bwd)


def upsample_nearest3d(x: Tensor, factors) -> Tensor:
    """Replicate each cell into an fz*fy*fx block."""
    if x.ndim != 5:
        raise ShapeError(f"upsample input must be 5-axis, got {x.shape}")
    fz, fy, fx = (int(f) for f in factors)
    if min(fz, fy, fx) < 1:
        raise ShapeError(f"upsample factors must be >= 1, got {factors}")
    B, C, Z, Y, X = x.shape
    out = x.data.repeat(fz, axis=2).repeat(fy, axis=3).repeat(fx, axis=4)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(
                g.reshape(B, C, Z, fz, Y, fy, X, fx).sum(axis=(3, 5, 7), dtype=np.float64)
            )

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Gram matrices
# ---------------------------------------------------------------------------

def gram(features: Tensor) -> Tensor:
    """Per-sample channel Gram matrix G = F F^T / (spatial * channels).

    Input (B, C, Z, Y, X); output (B, C, C) in float64. Spatial positions are
    interchangeable, so G is a location-free statistic of the feature map.
    """
    if features.ndim != 5:
        raise ShapeError(f"gram expects a 5-axis feature map, got {features.shape}")
    B, C = features.shape[:2]
    S = int(np.prod(features.shape[2:]))
    if S == 0:
        raise ShapeError("gram: empty feature map")
    F = features.data.reshape(B, C, S).astype(np.float64)
    norm = 1.0 / (S * C)
    G = np.matmul(F, F.transpose(0, 2, 1)) * norm

    def bwd(g):
        if features.requires_grad:
            dF = np.matmul(g + g.transpose(0, 2, 1), F) * norm
            features._accumulate(dF.reshape(features.shape))

    return _node(G, (features,), bwd)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv3d:
    """Convolution layer with He-initialized weights and zero bias."""

    def __init__(self, spec: Conv3dSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        std = np.sqrt(2.0 / fan_in)
        self.weight = Tensor(
            rng.standard_normal((spec.out_channels, spec.in_channels, *spec.kernel)) * std,
            requires_grad=True,
            dtype=dtype,
        )
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.spec, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class BatchNorm3d:
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm3d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            mode, self.momentum, self.eps,
        )

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def state_arrays(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(named_params, grads, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter tensors.

    `named_params` is a sequence of (name, Tensor); `grads` the matching
    gradient arrays. Moments are kept in float64 keyed by parameter name.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for (name, p), g in zip(named_params, grads, strict=True):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            state.first_moment[name] = m
            state.second_moment[name] = np.zeros(p.shape, dtype=np.float64)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**t)
        vhat = v / (1.0 - b2**t)
        p.data -= (state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)).astype(p.dtype)
        p._version += 1  # invalidates cached kernel spectra
    return state


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"GPT1"


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Binary container: magic, u32 count, then per tensor u16 name length,
    UTF-8 name, u8 ndims, u32 dims, little-endian f32 payload."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint container")
        (count,) = struct.unpack("<I", fh.read(4))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape).copy()
    return out
