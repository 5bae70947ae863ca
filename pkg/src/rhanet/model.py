"""The five network variants and their parameter/FLOP accounting.

Level widths are W, 2W, 4W, 8W, 16W for levels 0..4. Decoder level k merges
the attention output S_k with the upsampled features F_h_k by channel
concatenation; the merged map feeds the next decoder step (or the head at
level 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .blocks import (
    Conv2d,
    DecoderStep,
    DSConv,
    EncoderBlock,
    HybridAttention,
    Module,
    ResidualBlock,
    conv_unit,
)
from .tensor import ShapeError, Tensor

VARIANTS = ("baseline", "baseline-rb", "baseline-hab", "rha", "rha-lite")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "rha"
    base_width: int = 16
    in_channels: int = 3
    classes: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")

    @property
    def residual(self) -> bool:
        return self.variant in ("baseline-rb", "rha", "rha-lite")

    @property
    def attention(self) -> bool:
        return self.variant in ("baseline-hab", "rha", "rha-lite")

    @property
    def lite(self) -> bool:
        return self.variant == "rha-lite"

    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(5)]


class Head(Module):
    def __init__(self, width: int, classes: int, rng, lite: bool, dtype):
        self.conv = conv_unit(2 * width, width, rng, lite, dtype)
        self.classifier = Conv2d(width, classes, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.softmax(self.classifier(self.conv(x)), axis=1)


class Model(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        w = cfg.widths()
        lite = cfg.lite
        self.init = conv_unit(cfg.in_channels, w[0], rng, lite, dtype)
        self.enc1 = EncoderBlock(w[0], w[1], rng, lite, dtype)
        self.enc2 = EncoderBlock(w[1], w[2], rng, lite, dtype)
        self.enc3 = EncoderBlock(w[2], w[3], rng, lite, dtype)
        self.enc4 = EncoderBlock(w[3], w[4], rng, lite, dtype)
        if cfg.residual:
            self.res1 = ResidualBlock(w[4], rng, dtype)
            self.res2 = ResidualBlock(w[4], rng, dtype)
        if cfg.attention:
            for level in (4, 3, 2, 1, 0):
                setattr(self, f"hab{level}", HybridAttention(w[level], rng, dtype))
        # merged input to dec_k is concat(S_{k+1}, F_h_{k+1}): 2 * w[k+1] channels
        for level in (3, 2, 1, 0):
            setattr(self, f"dec{level}", DecoderStep(2 * w[level + 1], w[level], rng, lite, dtype))
        self.head = Head(w[0], cfg.classes, rng, lite, dtype)

    @property
    def init_dtype(self):
        return self.head.classifier.weight.dtype

    def _attend(self, level: int, f_l: Tensor, f_h: Tensor) -> Tensor:
        if not self.cfg.attention:
            return f_l
        return getattr(self, f"hab{level}")(f_l, f_h)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected N x {self.cfg.in_channels} x H x W input, got {x.shape}")
        h, w = x.shape[2:]
        if h % 16 or w % 16:
            raise ShapeError(
                f"input spatial size {h} x {w} is not divisible by 16; "
                "pad it first (rhanet.data.pad_to_multiple)"
            )
        feats = [self.init(x)]
        for enc in (self.enc1, self.enc2, self.enc3, self.enc4):
            feats.append(enc(feats[-1]))
        f_h = feats[4]
        if self.cfg.residual:
            f_h = self.res2(self.res1(f_h))
        g = ops.concat_channels(self._attend(4, feats[4], f_h), f_h)
        for level in (3, 2, 1, 0):
            f_h = getattr(self, f"dec{level}")(g)
            g = ops.concat_channels(self._attend(level, feats[level], f_h), f_h)
        return self.head(g)

    __call__ = forward


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(cfg, seed, dtype)


def count_params(m: Module) -> int:
    """Learnable scalars, BN gamma/beta included, running statistics excluded."""
    for unit in m.modules():
        if isinstance(unit, DSConv) and unit.cout > 1:
            assert unit.weight_count() < 9 * unit.cin * unit.cout, "DS conv must undercut a dense 3x3 conv"
    return sum(p.size for p in m.parameters())


def ds_replacements(m: Module) -> list[tuple[int, int, int, int]]:
    """(C_in, C_out, DS weight count, dense 3x3 weight count) for every DS unit."""
    return [
        (u.cin, u.cout, u.weight_count(), 9 * u.cin * u.cout)
        for u in m.modules()
        if isinstance(u, DSConv)
    ]


# -- FLOP accounting -----------------------------------------------------------
# Convention: a multiply-accumulate is 2 FLOPs; bias add, ReLU, elementwise add
# and mul are 1 per output element; BN is 2 per element (scale and shift);
# sigmoid 3 and softmax 4 per element; maxpool 3 comparisons per output;
# bilinear x2 7 per output (4 mul, 3 add); global average pooling 1 per input.

def _conv_flops(cin: int, cout: int, k: int, hw: int, bias: bool) -> int:
    return 2 * cin * cout * k * k * hw + (cout * hw if bias else 0)


def _unit_flops(u: Module, hw: int) -> int:
    if isinstance(u, DSConv):
        c, o = u.cin, u.cout
        dw = 2 * 9 * c * hw + 2 * c * hw + c * hw
        pw = 2 * c * o * hw + 2 * o * hw + o * hw
        return dw + pw
    if isinstance(u, Conv2d):
        return _conv_flops(u.cin, u.cout, u.k, hw, u.bias is not None)
    conv = u.conv  # ConvReLU
    return _conv_flops(conv.cin, conv.cout, conv.k, hw, True) + conv.cout * hw


def _residual_flops(r: ResidualBlock, c: int, hw: int) -> int:
    return _unit_flops(r.ds1, hw) + _unit_flops(r.ds2, hw) + c * hw


def _hab_flops(hab: HybridAttention, c: int, hw: int) -> int:
    f = 0
    f += c * hw  # F_l + F_h
    f += 3 * c * hw  # three global pools
    f += 3 * (_conv_flops(c, c, 1, 1, True) + c)  # conv_p/l/h + ReLU
    f += 2 * c  # M_p * M_l + M_h
    f += c  # identity average pool
    f += _conv_flops(c, c, 1, 1, True) + c + 4 * c  # conv_c + ReLU + softmax
    f += c * hw  # F_l' = M_c * F_l
    f += 2 * (_conv_flops(c, 1, 1, hw, True) + hw)  # conv_s1/s2 + ReLU
    f += hw + 3 * hw  # add + sigmoid
    f += c * hw  # M_s * F_l
    return f


def count_flops(m: Model, input_shape: tuple) -> int:
    """Analytic forward FLOPs for one batch of ``input_shape`` (N, C, H, W) or (C, H, W)."""
    if len(input_shape) == 3:
        input_shape = (1, *input_shape)
    n, _, h, w = input_shape
    if h % 16 or w % 16:
        raise ShapeError(f"input spatial size {h} x {w} is not divisible by 16")
    cfg = m.cfg
    widths = cfg.widths()
    hw = [(h >> lv) * (w >> lv) for lv in range(5)]

    f = _unit_flops(m.init, hw[0])
    for lv, enc in enumerate((m.enc1, m.enc2, m.enc3, m.enc4), start=1):
        f += 3 * widths[lv - 1] * hw[lv]  # maxpool
        f += _unit_flops(enc.conv1, hw[lv]) + _unit_flops(enc.conv2, hw[lv])
    if cfg.residual:
        f += _residual_flops(m.res1, widths[4], hw[4]) + _residual_flops(m.res2, widths[4], hw[4])
    if cfg.attention:
        f += _hab_flops(m.hab4, widths[4], hw[4])
    for lv in (3, 2, 1, 0):
        dec = getattr(m, f"dec{lv}")
        f += 7 * 2 * widths[lv + 1] * hw[lv]  # upsample of the merged map
        f += _unit_flops(dec.conv, hw[lv])
        if cfg.attention:
            f += _hab_flops(getattr(m, f"hab{lv}"), widths[lv], hw[lv])
    f += _unit_flops(m.head.conv, hw[0])
    f += _unit_flops(m.head.classifier, hw[0]) + 4 * cfg.classes * hw[0]
    return n * f


def param_table(width: int, input_shape: tuple = (3, 640, 480), seed: int = 0) -> list[dict]:
    rows = []
    for variant in VARIANTS:
        m = build(ModelConfig(variant, width), seed)
        rows.append({"variant": variant, "params": count_params(m), "flops": count_flops(m, input_shape)})
    return rows


def crack_probability(m: Model, x: Tensor) -> Tensor:
    """Channel 1 of the softmax output, N x H x W."""
    return m(x)[:, 1]


def named_state(m: Model) -> list[tuple[str, np.ndarray]]:
    """Parameters then BN running statistics, in stable order."""
    return [(n, p.data) for n, p in m.named_parameters()] + list(m.named_buffers())


def load_state(m: Model, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
    expected = dict(named_state(m))
    if strict:
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, arr in tensors.items():
        target: Optional[np.ndarray] = expected.get(name)
        if target is None:
            continue
        if target.shape != arr.shape:
            raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
        target[...] = arr
