"""Composite building blocks: conv units, DS conv, residual and hybrid attention.

Blocks are plain parameter containers. ``Module.named_parameters`` walks the
attributes in definition order, which gives every weight a stable dotted name
such as ``enc2.conv1.weight`` (used by checkpoints).
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .ops import BatchNormState
from .tensor import ShapeError, Tensor


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, BatchNormState):
                yield f"{name}.gamma", val.gamma
                yield f"{name}.beta", val.beta
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, BatchNormState):
                yield f"{name}.running_mean", val.running_mean
                yield f"{name}.running_var", val.running_var
            elif isinstance(val, Module):
                yield from val.named_buffers(f"{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()

    def batchnorms(self) -> Iterator[BatchNormState]:
        for m in self.modules():
            for val in vars(m).values():
                if isinstance(val, BatchNormState):
                    yield val

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        for bn in self.batchnorms():
            bn.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args):
        return self.forward(*args)

    def forward(self, *args):
        raise NotImplementedError


def _kaiming(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


class Conv2d(Module):
    """Conventional k x k convolution with optional bias, 'same' padding."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.weight = _kaiming(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None
        self.padding = (k - 1) // 2

    @property
    def cin(self) -> int:
        return self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, padding=self.padding)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias


class ConvReLU(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.conv = Conv2d(cin, cout, 3, rng, dtype=dtype)

    @property
    def cin(self) -> int:
        return self.conv.cin

    @property
    def cout(self) -> int:
        return self.conv.cout

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.conv(x))


class DSConv(Module):
    """Depthwise 3x3 + BN + ReLU, then pointwise 1x1 + BN + ReLU. No conv biases."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        self.depthwise = _kaiming(rng, (cin, 1, 3, 3), 9, dtype)
        self.bn1 = BatchNormState.create(cin, dtype)
        self.pointwise = _kaiming(rng, (cout, cin, 1, 1), cin, dtype)
        self.bn2 = BatchNormState.create(cout, dtype)

    @property
    def cin(self) -> int:
        return self.depthwise.shape[0]

    @property
    def cout(self) -> int:
        return self.pointwise.shape[0]

    def weight_count(self) -> int:
        """Conv weights only (BN excluded): 9*C_in + C_in*C_out."""
        return self.depthwise.size + self.pointwise.size

    def forward(self, x: Tensor) -> Tensor:
        y = ops.relu(ops.batchnorm2d(ops.depthwise_conv2d(x, self.depthwise), self.bn1))
        return ops.relu(ops.batchnorm2d(ops.conv2d(y, self.pointwise), self.bn2))


def conv_unit(cin: int, cout: int, rng: np.random.Generator, lite: bool, dtype=np.float32) -> Module:
    """A 3x3 conv + ReLU, or its depthwise separable replacement when ``lite``."""
    return DSConv(cin, cout, rng, dtype) if lite else ConvReLU(cin, cout, rng, dtype)


class ResidualBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.ds1 = DSConv(channels, channels, rng, dtype)
        self.ds2 = DSConv(channels, channels, rng, dtype)

    def body(self, x: Tensor) -> Tensor:
        return self.ds2(self.ds1(x))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class HybridAttention(Module):
    """Fuses low-level features F_l with same-shaped high-level features F_h.

    The channel branch produces a softmax-normalised N x C x 1 x 1 weight
    vector, the spatial branch a sigmoid N x 1 x H x W gate; the output is the
    gate applied to F_l.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        c = channels
        self.conv_p = Conv2d(c, c, 1, rng, dtype=dtype)
        self.conv_l = Conv2d(c, c, 1, rng, dtype=dtype)
        self.conv_h = Conv2d(c, c, 1, rng, dtype=dtype)
        self.conv_c = Conv2d(c, c, 1, rng, dtype=dtype)
        self.conv_s1 = Conv2d(c, 1, 1, rng, dtype=dtype)
        self.conv_s2 = Conv2d(c, 1, 1, rng, dtype=dtype)

    def channel_attention(self, f_l: Tensor, f_h: Tensor) -> Tensor:
        _same_shape(f_l, f_h)
        m_p = ops.relu(self.conv_p(ops.global_avg_pool(f_l + f_h)))
        m_l = ops.relu(self.conv_l(ops.global_avg_pool(f_l)))
        m_h = ops.relu(self.conv_h(ops.global_avg_pool(f_h)))
        t = m_p * m_l + m_h
        # the second average pooling acts on a 1x1 map, so it is the identity
        t = ops.global_avg_pool(t)
        return ops.softmax(ops.relu(self.conv_c(t)), axis=1)

    def spatial_attention(self, f_l_prime: Tensor, f_h: Tensor) -> Tensor:
        _same_shape(f_l_prime, f_h)
        return ops.sigmoid(ops.relu(self.conv_s1(f_l_prime)) + ops.relu(self.conv_s2(f_h)))

    def forward(self, f_l: Tensor, f_h: Tensor) -> Tensor:
        m_c = self.channel_attention(f_l, f_h)
        m_s = self.spatial_attention(m_c * f_l, f_h)
        return m_s * f_l


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"attention inputs must have the same shape, got {a.shape} and {b.shape}")


class EncoderBlock(Module):
    """maxpool 2x2, then two 3x3 conv units: halves H, W and maps cin -> cout."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, lite: bool = False, dtype=np.float32):
        self.conv1 = conv_unit(cin, cout, rng, lite, dtype)
        self.conv2 = conv_unit(cout, cout, rng, lite, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(self.conv1(ops.maxpool2x2(x)))


class DecoderStep(Module):
    """x2 bilinear upsampling followed by one 3x3 conv unit."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, lite: bool = False, dtype=np.float32):
        self.conv = conv_unit(cin, cout, rng, lite, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ops.bilinear_upsample_x2(x))


def zero_parameters(m: Module, keep: Optional[set] = None) -> None:
    """Zero every parameter except BN gammas and names listed in ``keep``."""
    keep = keep or set()
    for name, p in m.named_parameters():
        if name in keep or name.endswith(".gamma"):
            continue
        p.data[...] = 0
