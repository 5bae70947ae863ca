"""Adam with bias-corrected moments."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Iterable[tuple[str, Tensor]], s: AdamState) -> None:
    """Update every named parameter in place from its ``.grad``.

    Moment buffers are created lazily (zeros) on first use. The step counter is
    incremented before bias correction, so the first update uses t = 1.
    """
    params = list(params)
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient; call backward() or zero_grad() first")
    s.step += 1
    t = s.step
    c1 = 1.0 - s.beta1**t
    c2 = 1.0 - s.beta2**t
    for name, p in params:
        g = p.grad
        m = s.m.get(name)
        if m is None:
            m = s.m[name] = np.zeros_like(p.data)
            s.v[name] = np.zeros_like(p.data)
        v = s.v[name]
        m *= s.beta1
        m += (1.0 - s.beta1) * g
        v *= s.beta2
        v += (1.0 - s.beta2) * (g * g)
        p.data -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)
