import numpy as np
import pytest

from rhanet.blocks import (
    Conv2d,
    DecoderStep,
    DSConv,
    EncoderBlock,
    HybridAttention,
    ResidualBlock,
    zero_parameters,
)
from rhanet.tensor import ShapeError, Tensor

from conftest import grad_errors, leaf

F64 = np.float64


def T(a):
    return Tensor(np.asarray(a, dtype=F64))


def as_leaves(module):
    """Turn a module's parameters into the list of leaves for a gradient check."""
    return [p for p in module.parameters()]


# -- scalar reference implementations ------------------------------------------
def _relu(v):
    return v if v > 0 else 0.0


def _conv1x1(block, vec):
    w = block.weight.data[:, :, 0, 0]
    b = block.bias.data
    return [sum(w[o, i] * vec[i] for i in range(len(vec))) + b[o] for o in range(w.shape[0])]


def scalar_channel_attention(hab, f_l, f_h):
    """Per-sample loop version of the channel branch. Returns N x C."""
    n, c, h, w = f_l.shape
    out = []
    for s in range(n):
        gap_l = [f_l[s, k].sum() / (h * w) for k in range(c)]
        gap_h = [f_h[s, k].sum() / (h * w) for k in range(c)]
        gap_p = [(f_l[s, k] + f_h[s, k]).sum() / (h * w) for k in range(c)]
        m_p = [_relu(v) for v in _conv1x1(hab.conv_p, gap_p)]
        m_l = [_relu(v) for v in _conv1x1(hab.conv_l, gap_l)]
        m_h = [_relu(v) for v in _conv1x1(hab.conv_h, gap_h)]
        t = [m_p[k] * m_l[k] + m_h[k] for k in range(c)]
        z = [_relu(v) for v in _conv1x1(hab.conv_c, t)]
        mx = max(z)
        e = [np.exp(v - mx) for v in z]
        out.append([v / sum(e) for v in e])
    return np.array(out)


def scalar_spatial_attention(hab, f_lp, f_h):
    n, c, h, w = f_lp.shape
    out = np.zeros((n, h, w))
    for s in range(n):
        for i in range(h):
            for j in range(w):
                a = _relu(_conv1x1(hab.conv_s1, f_lp[s, :, i, j])[0])
                b = _relu(_conv1x1(hab.conv_s2, f_h[s, :, i, j])[0])
                out[s, i, j] = 1.0 / (1.0 + np.exp(-(a + b)))
    return out


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        p.data[...] = rng.standard_normal(p.shape) * scale


# -- DS unit -------------------------------------------------------------------
def test_ds_weight_count_example(rng):
    u = DSConv(3, 16, rng)
    assert u.weight_count() == 75
    assert 9 * 3 * 16 == 432
    n_bn = 2 * 3 + 2 * 16
    assert sum(p.size for p in u.parameters()) == 75 + n_bn


@pytest.mark.parametrize("cin,cout", [(1, 2), (3, 16), (16, 16), (64, 128), (256, 512)])
def test_ds_undercuts_dense(cin, cout, rng):
    assert DSConv(cin, cout, rng).weight_count() < 9 * cin * cout


def test_ds_zero_weights_give_zero(rng):
    u = DSConv(3, 4, rng, F64)
    zero_parameters(u)
    out = u(T(rng.standard_normal((2, 3, 5, 5)))).data
    assert np.all(out == 0)


def test_ds_preserves_spatial_size(rng):
    assert DSConv(3, 5, rng)(Tensor(rng.standard_normal((2, 3, 7, 9)).astype(np.float32))).shape == (2, 5, 7, 9)


# -- residual ----------------------------------------------------------------------
def test_zero_body_residual_is_identity(rng):
    r = ResidualBlock(4, rng, F64)
    zero_parameters(r)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
    y = r(x)
    np.testing.assert_array_equal(y.data, x.data)
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_residual_is_x_plus_body(rng):
    r = ResidualBlock(3, rng, F64)
    x = T(rng.standard_normal((2, 3, 4, 4)))
    np.testing.assert_allclose(r(x).data - r.body(x).data, x.data, atol=1e-12)


# -- attention ---------------------------------------------------------------------
def test_channel_attention_single_channel_is_one(rng):
    hab = HybridAttention(1, rng, F64)
    randomize(hab, rng)
    m = hab.channel_attention(T(rng.standard_normal((3, 1, 4, 4))), T(rng.standard_normal((3, 1, 4, 4))))
    np.testing.assert_array_equal(m.data, np.ones((3, 1, 1, 1)))


def test_zero_weight_attention_is_uniform(rng):
    hab = HybridAttention(5, rng, F64)
    zero_parameters(hab)
    f_l, f_h = T(rng.standard_normal((2, 5, 4, 4))), T(rng.standard_normal((2, 5, 4, 4)))
    np.testing.assert_allclose(hab.channel_attention(f_l, f_h).data, 0.2)
    np.testing.assert_array_equal(hab.spatial_attention(f_l, f_h).data, 0.5)
    np.testing.assert_array_equal(hab(f_l, f_h).data, 0.5 * f_l.data)


@pytest.mark.parametrize("seed", range(100))
def test_channel_attention_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 9))
    hab = HybridAttention(c, rng, F64)
    randomize(hab, rng, scale=rng.uniform(0.1, 3))
    shape = (int(rng.integers(1, 4)), c, 4, 4)
    m = hab.channel_attention(T(rng.standard_normal(shape) * 3), T(rng.standard_normal(shape) * 3)).data
    assert np.all(np.abs(m.sum(axis=1) - 1) < 1e-6)


def test_channel_attention_matches_scalar_oracle(rng):
    hab = HybridAttention(4, rng, F64)
    randomize(hab, rng)
    f_l, f_h = rng.standard_normal((2, 2, 4, 3, 3))
    got = hab.channel_attention(T(f_l), T(f_h)).data[:, :, 0, 0]
    np.testing.assert_allclose(got, scalar_channel_attention(hab, f_l, f_h), atol=1e-12)
    np.testing.assert_allclose(got.sum(axis=1), 1, atol=1e-6)


def test_spatial_attention_matches_scalar_oracle_and_range(rng):
    hab = HybridAttention(3, rng, F64)
    randomize(hab, rng, scale=2.0)
    f_lp, f_h = rng.standard_normal((2, 2, 3, 5, 4)) * 2
    got = hab.spatial_attention(T(f_lp), T(f_h)).data
    assert got.shape == (2, 1, 5, 4)
    np.testing.assert_allclose(got[:, 0], scalar_spatial_attention(hab, f_lp, f_h), atol=1e-12)
    assert np.all(got >= 0.5) and np.all(got < 1)


def test_hab_output_composition(rng):
    hab = HybridAttention(3, rng, F64)
    randomize(hab, rng)
    f_l, f_h = rng.standard_normal((2, 1, 3, 4, 4))
    m_c = scalar_channel_attention(hab, f_l, f_h)[:, :, None, None]
    m_s = scalar_spatial_attention(hab, m_c * f_l, f_h)[:, None]
    np.testing.assert_allclose(hab(T(f_l), T(f_h)).data, m_s * f_l, atol=1e-12)


def test_hab_zero_low_level_gives_zero(rng):
    hab = HybridAttention(3, rng, F64)
    randomize(hab, rng)
    out = hab(T(np.zeros((1, 3, 4, 4))), T(rng.standard_normal((1, 3, 4, 4)))).data
    assert np.all(out == 0)


def test_hab_scaling_keeps_channel_map_normalized(rng):
    hab = HybridAttention(4, rng, F64)
    randomize(hab, rng)
    f_l, f_h = rng.standard_normal((2, 1, 4, 4, 4))
    for alpha in (0.1, 1.0, 7.0):
        m = hab.channel_attention(T(alpha * f_l), T(f_h)).data
        np.testing.assert_allclose(m.sum(axis=1), 1, atol=1e-12)


def test_hab_shape_mismatch(rng):
    hab = HybridAttention(2, rng, F64)
    with pytest.raises(ShapeError):
        hab(T(np.zeros((1, 2, 4, 4))), T(np.zeros((1, 2, 2, 2))))


# -- encoder / decoder --------------------------------------------------------------
def test_encoder_shape_contract(rng):
    enc = EncoderBlock(16, 32, rng)
    assert enc(Tensor(np.zeros((2, 16, 64, 64), dtype=np.float32))).shape == (2, 32, 32, 32)


def test_decoder_shape_contract(rng):
    dec = DecoderStep(512, 128, rng)
    assert dec(Tensor(np.zeros((1, 512, 30, 40), dtype=np.float32))).shape == (1, 128, 60, 80)


def test_encoder_rejects_odd_extent(rng):
    with pytest.raises(ShapeError):
        EncoderBlock(2, 4, rng)(Tensor(np.zeros((1, 2, 5, 4), dtype=np.float32)))


def test_conv_param_count(rng):
    assert sum(p.size for p in Conv2d(3, 16, 3, rng).parameters()) == 448


# -- gradient checks ------------------------------------------------------------------
def _block_case(name, rng):
    if name == "ds_unit":
        m = DSConv(2, 3, rng, F64)
        randomize(m, rng)
        x = leaf(rng, 2, 2, 4, 4)
        return m, (lambda: m(x)), [x]
    if name == "residual":
        m = ResidualBlock(2, rng, F64)
        randomize(m, rng)
        x = leaf(rng, 2, 2, 4, 4)
        return m, (lambda: m(x)), [x]
    hab = HybridAttention(2, rng, F64)
    randomize(hab, rng)
    f_l, f_h = leaf(rng, 1, 2, 4, 4), leaf(rng, 1, 2, 4, 4)
    if name == "channel_attention":
        return hab, (lambda: hab.channel_attention(f_l, f_h)), [f_l, f_h]
    if name == "spatial_attention":
        return hab, (lambda: hab.spatial_attention(f_l, f_h)), [f_l, f_h]
    if name == "hab":
        return hab, (lambda: hab(f_l, f_h)), [f_l, f_h]
    raise KeyError(name)


BLOCKS = ["ds_unit", "residual", "channel_attention", "spatial_attention", "hab"]


@pytest.mark.parametrize("name", BLOCKS)
def test_block_gradients(name):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        module, fn, inputs = _block_case(name, rng)
        worst = max(worst, max(grad_errors(fn, inputs + as_leaves(module), rng, joint=True).values()))
    assert worst < 1e-4, f"{name}: {worst:.2e}"
