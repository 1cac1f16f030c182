import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoparam import autodiff as ad
from geoparam.grid import ShapeError

from util_grad import check_grad


def t64(arr, grad=False):
    return ad.Tensor(np.asarray(arr), requires_grad=grad, dtype=np.float64)


# ---------------------------------------------------------------------------
# conv3d
# ---------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = t64(np.full((1, 1, 1, 3, 3), 2.5))
    w = t64(np.ones((1, 1, 1, 1, 1)))
    y = ad.conv3d(x, w, ad.Conv3dSpec(1, 1, (1, 1, 1)))
    assert np.array_equal(y.data, x.data)


def test_conv_circular_hand_unrolled():
    # circular window sums of [1,2,3,4] with a 3-tap box kernel
    x = t64(np.array([1.0, 2, 3, 4]).reshape(1, 1, 1, 1, 4))
    w = t64(np.ones((1, 1, 1, 1, 3)))
    y = ad.conv3d(x, w, ad.Conv3dSpec(1, 1, (1, 1, 3)))
    assert np.array_equal(y.data.ravel(), [7, 6, 9, 8])


@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 2), (1, 2, 2)])
@pytest.mark.parametrize("padding", ["circular", "zero"])
def test_conv_gradients_match_fd(stride, padding):
    rng = np.random.default_rng(0)
    x = t64(rng.standard_normal((2, 3, 4, 4, 4)), grad=True)
    w = t64(rng.standard_normal((2, 3, 3, 3, 3)) * 0.3, grad=True)
    b = t64(rng.standard_normal(2), grad=True)
    spec = ad.Conv3dSpec(2, 3, (3, 3, 3), stride, padding)
    c = rng.standard_normal((2, 2, *spec.out_spatial((4, 4, 4))))
    ad.tsum(ad.mul(ad.conv3d(x, w, spec, b), ad.Tensor(c))).backward()

    def loss_w(wd):
        return float((ad._conv3d_fwd(x.data, wd, b.data, stride, padding) * c).sum())

    def loss_x(xd):
        return float((ad._conv3d_fwd(xd, w.data, b.data, stride, padding) * c).sum())

    check_grad(loss_w, w.data, w.grad, rng, rtol=1e-6)
    check_grad(loss_x, x.data, x.grad, rng, rtol=1e-6)
    assert np.allclose(b.grad, c.sum(axis=(0, 2, 3, 4)))


def test_conv_fft_route_matches_gemm_route():
    # big-kernel stride-1 circular convs dispatch through the FFT path;
    # compare against the direct gather/GEMM computation
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 8, 24, 24))
    w = rng.standard_normal((4, 3, 3, 9, 9)) * 0.2
    via_fft = ad._conv3d_fwd(x, w, None, (1, 1, 1), "circular")
    idx, osp, _ = ad._gather_plan((8, 24, 24), (3, 9, 9), (1, 1, 1), "circular")
    wm = w.reshape(4, -1)
    direct = np.stack(
        [wm @ x[b].reshape(3, -1)[:, idx.reshape(-1)].reshape(3 * 243, -1) for b in range(2)]
    ).reshape(2, 4, 8, 24, 24)
    assert np.abs(via_fft - direct).max() < 1e-10


def test_conv_translation_equivariance_exact():
    # integer-valued inputs below the FFT-dispatch size keep the gather/GEMM
    # arithmetic exact, so cyclic shifts commute with the convolution bitwise
    rng = np.random.default_rng(2)
    x = rng.integers(-4, 5, size=(1, 2, 4, 4, 4)).astype(np.float64)
    w = rng.integers(-2, 3, size=(3, 2, 3, 3, 3)).astype(np.float64)
    spec = ad.Conv3dSpec(3, 2, (3, 3, 3))
    base = ad.conv3d(t64(x), t64(w), spec).data
    for shift in ((1, 0, 0), (0, 2, 0), (0, 0, 3), (2, 1, 3)):
        shifted = ad.conv3d(t64(np.roll(x, shift, axis=(2, 3, 4))), t64(w), spec).data
        assert np.array_equal(np.roll(base, shift, axis=(2, 3, 4)), shifted)


def test_conv_translation_equivariance_fft_route():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, 8, 16, 16))
    w = rng.standard_normal((3, 2, 3, 9, 9)) * 0.2
    spec = ad.Conv3dSpec(3, 2, (3, 9, 9))
    base = ad.conv3d(t64(x), t64(w), spec).data
    for shift in ((1, 0, 0), (0, 5, 0), (3, 2, 7)):
        shifted = ad.conv3d(t64(np.roll(x, shift, axis=(2, 3, 4))), t64(w), spec).data
        assert np.allclose(np.roll(base, shift, axis=(2, 3, 4)), shifted, atol=1e-11)


def test_conv_shape_errors():
    x = t64(np.zeros((1, 2, 4, 4, 4)))
    w = t64(np.zeros((3, 3, 3, 3, 3)))
    with pytest.raises(ShapeError, match="channels"):
        ad.conv3d(x, w, ad.Conv3dSpec(3, 3, (3, 3, 3)))
    with pytest.raises(ShapeError, match="odd"):
        ad.Conv3dSpec(3, 2, (2, 3, 3))


def test_conv_output_dims_ceil_rule():
    spec = ad.Conv3dSpec(1, 1, (3, 3, 3), (2, 2, 2))
    assert spec.out_spatial((5, 6, 7)) == (3, 3, 4)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

def test_batchnorm_constant_input_gives_beta():
    x = t64(np.full((2, 2, 2, 2, 2), 3.7))
    beta = np.array([1.5, -2.0])
    out = ad.batch_norm3d(
        x, t64(np.ones(2)), t64(beta), np.zeros(2), np.ones(2), "train"
    )
    assert np.allclose(out.data[:, 0], 1.5) and np.allclose(out.data[:, 1], -2.0)


def test_batchnorm_symmetric_two_values():
    vals = np.array([1.0, 3.0] * 8).reshape(1, 1, 1, 4, 4)
    out = ad.batch_norm3d(
        t64(vals), t64(np.ones(1)), t64(np.zeros(1)), np.zeros(1), np.ones(1), "train"
    )
    assert np.allclose(sorted(np.unique(out.data.round(5))), [-1.0, 1.0], atol=1e-2)


def test_batchnorm_gradients_match_fd():
    rng = np.random.default_rng(3)
    x = t64(rng.standard_normal((2, 3, 2, 4, 4)), grad=True)
    gamma = t64(rng.standard_normal(3) + 1.0, grad=True)
    beta = t64(rng.standard_normal(3), grad=True)
    c = rng.standard_normal((2, 3, 2, 4, 4))
    out = ad.batch_norm3d(x, gamma, beta, np.zeros(3), np.ones(3), "train")
    ad.tsum(ad.mul(out, ad.Tensor(c))).backward()

    def make_loss(k):
        def loss(arr):
            args = [x.data, gamma.data, beta.data]
            args[k] = arr
            o = ad.batch_norm3d(
                t64(args[0]), t64(args[1]), t64(args[2]), np.zeros(3), np.ones(3), "train"
            )
            return float((o.data * c).sum())

        return loss

    check_grad(make_loss(0), x.data, x.grad, rng, rtol=1e-6)
    check_grad(make_loss(1), gamma.data, gamma.grad, rng, rtol=1e-6)
    check_grad(make_loss(2), beta.data, beta.grad, rng, rtol=1e-6)


def test_batchnorm_running_stats_and_eval():
    rng = np.random.default_rng(4)
    rm, rv = np.zeros(2), np.ones(2)
    x = rng.standard_normal((4, 2, 2, 2, 2)) * 3.0 + 1.0
    ad.batch_norm3d(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, "train", momentum=1.0)
    assert np.allclose(rm, x.mean(axis=(0, 2, 3, 4)))
    out = ad.batch_norm3d(t64(x), t64(np.ones(2)), t64(np.zeros(2)), rm, rv, "eval")
    assert abs(out.data.mean()) < 1e-10


def test_batchnorm_zero_batch_errors():
    with pytest.raises(ShapeError, match="zero batch"):
        ad.batch_norm3d(
            t64(np.zeros((0, 2, 2, 2, 2))), t64(np.ones(2)), t64(np.zeros(2)),
            np.zeros(2), np.ones(2), "train",
        )


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------

def test_maxpool_exhaustive_window_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 2, 4, 6, 6))
    out = ad.maxpool3d(t64(x), (2, 2, 2)).data
    for b in range(2):
        for c in range(2):
            for z in range(2):
                for y in range(3):
                    for xx in range(3):
                        window = x[b, c, 2 * z : 2 * z + 2, 2 * y : 2 * y + 2, 2 * xx : 2 * xx + 2]
                        assert out[b, c, z, y, xx] == window.max()


def test_maxpool_trivial_and_tie_break():
    x = t64(np.array([[1.0, 2], [3, 4]]).reshape(1, 1, 1, 2, 2), grad=True)
    out = ad.maxpool3d(x, (1, 2, 2))
    assert out.data.ravel()[0] == 4.0
    ties = t64(np.ones((1, 1, 2, 2, 2)), grad=True)
    pooled = ad.maxpool3d(ties, (2, 2, 2))
    pooled.backward(np.ones_like(pooled.data))
    grad = ties.grad.ravel()
    assert grad[0] == 1.0 and grad[1:].sum() == 0.0  # lowest linear index wins


def test_maxpool_indivisible_dims_error():
    with pytest.raises(ShapeError, match="divisible"):
        ad.maxpool3d(t64(np.zeros((1, 1, 3, 4, 4))), (2, 2, 2))


def test_maxpool_gradient_matches_fd():
    rng = np.random.default_rng(6)
    x = t64(rng.standard_normal((1, 2, 2, 4, 4)), grad=True)
    c = rng.standard_normal((1, 2, 1, 2, 2))
    ad.tsum(ad.mul(ad.maxpool3d(x, (2, 2, 2)), ad.Tensor(c))).backward()

    def loss(arr):
        return float((ad.maxpool3d(t64(arr), (2, 2, 2)).data * c).sum())

    check_grad(loss, x.data, x.grad, rng, rtol=1e-6)


def test_upsample_examples_and_gradient():
    x = t64(np.array([1.0, 2.0]).reshape(1, 1, 1, 1, 2), grad=True)
    assert np.array_equal(
        ad.upsample_nearest3d(x, (1, 1, 2)).data.ravel(), [1, 1, 2, 2]
    )
    same = ad.upsample_nearest3d(x, (1, 1, 1))
    assert np.array_equal(same.data, x.data)

    rng = np.random.default_rng(7)
    y = t64(rng.standard_normal((1, 2, 2, 2, 2)), grad=True)
    c = rng.standard_normal((1, 2, 4, 4, 4))
    ad.tsum(ad.mul(ad.upsample_nearest3d(y, (2, 2, 2)), ad.Tensor(c))).backward()

    def loss(arr):
        return float((ad.upsample_nearest3d(t64(arr), (2, 2, 2)).data * c).sum())

    check_grad(loss, y.data, y.grad, rng, rtol=1e-6)


# ---------------------------------------------------------------------------
# elementwise / reductions / gram
# ---------------------------------------------------------------------------

def test_elementwise_gradients():
    rng = np.random.default_rng(8)
    for op, ref in [
        (ad.relu, lambda v: np.maximum(v, 0)),
        (ad.absval, np.abs),
    ]:
        x = t64(rng.standard_normal((2, 1, 2, 2, 2)) + 0.3, grad=True)
        c = rng.standard_normal(x.shape)
        ad.tsum(ad.mul(op(x), ad.Tensor(c))).backward()

        def loss(arr, ref=ref):
            return float((ref(arr) * c).sum())

        check_grad(loss, x.data, x.grad, rng, rtol=1e-5)


def test_gram_gradient_and_affine():
    rng = np.random.default_rng(9)
    x = t64(rng.standard_normal((2, 3, 1, 2, 2)), grad=True)
    c = rng.standard_normal((2, 3, 3))
    ad.tsum(ad.mul(ad.gram(x), ad.Tensor(c))).backward()

    def loss(arr):
        f = arr.reshape(2, 3, 4)
        return float((np.matmul(f, f.transpose(0, 2, 1)) / 12.0 * c).sum())

    check_grad(loss, x.data, x.grad, rng, rtol=1e-6)

    y = t64(rng.standard_normal((1, 1, 1, 2, 2)), grad=True)
    ad.tsum(ad.affine(y, 2.5, -1.0)).backward()
    assert np.allclose(y.grad, 2.5)


def test_sum_accumulates_float64():
    # 16M float32 ones sum exactly only with a wide accumulator
    x = ad.Tensor(np.ones(1 << 24, dtype=np.float32))
    assert ad.tsum(x).item() == float(1 << 24)


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = ad.AdamState()
    ad.adam_step([("p", p)], [np.zeros(2)], state)
    assert np.array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_bias_corrected():
    p = ad.Tensor(np.array([0.0]), requires_grad=True)
    state = ad.AdamState(learning_rate=1e-3)
    ad.adam_step([("p", p)], [np.array([1.0])], state)
    assert abs(p.data[0] + 1e-3 / (1 + 1e-8)) < 1e-12


def test_adam_descends_quadratic():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    state = ad.AdamState(learning_rate=0.01)
    history = [abs(p.data[0])]
    for _ in range(100):
        ad.adam_step([("p", p)], [2.0 * p.data], state)
        history.append(abs(float(p.data[0])))
    assert history[-1] < 0.5 * history[0]
    assert all(b <= a + 1e-12 for a, b in zip(history[10:], history[11:]))


def test_adam_rejects_nonfinite_gradient():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(FloatingPointError, match="'p'"):
        ad.adam_step([("p", p)], [np.array([np.nan])], ad.AdamState())


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    tensors = {
        "a.weight": rng.standard_normal((2, 3, 3, 3, 3)).astype(np.float32),
        "a.bias": rng.standard_normal(2).astype(np.float32),
        "scalarish": np.array([3.0], dtype=np.float32),
    }
    path = tmp_path / "net.ckpt"
    ad.save_checkpoint(path, tensors)
    back = ad.load_checkpoint(path)
    assert set(back) == set(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
    with open(path, "rb") as fh:
        assert fh.read(4) == b"GPT1"


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_bit_reproducible(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
    w = rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32)
    spec = ad.Conv3dSpec(2, 2, (3, 3, 3))
    a = ad.conv3d(ad.Tensor(x), ad.Tensor(w), spec).data
    b = ad.conv3d(ad.Tensor(x), ad.Tensor(w), spec).data
    assert np.array_equal(a, b)
