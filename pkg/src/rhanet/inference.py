"""Running a model on single images with padding and crop-back."""

from __future__ import annotations

import time

import numpy as np

from .data import crop, pad_array
from .model import Model
from .tensor import Tensor, no_grad


def predict_probability(model: Model, image: np.ndarray) -> np.ndarray:
    """Crack probability (H x W) for a 3 x H x W image of any size.

    The image is reflect-padded to a multiple of 16 and the output cropped
    back. The model's train/eval mode is left as the caller set it.
    """
    h, w = image.shape[-2:]
    x = pad_array(np.asarray(image, dtype=model.init_dtype), 16)[None]
    with no_grad():
        probs = model(Tensor(x)).data[0, 1]
    return np.ascontiguousarray(crop(probs, (h, w)))


def timed_predict(model: Model, image: np.ndarray) -> tuple[np.ndarray, float]:
    t0 = time.perf_counter()
    prob = predict_probability(model, image)
    return prob, time.perf_counter() - t0


def benchmark(model: Model, shape: tuple, iters: int = 10, seed: int = 0) -> dict:
    """Mean/stddev forward latency (inference mode, no graph) at ``shape`` = (N, C, H, W)."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random(shape).astype(model.init_dtype))
    was_training = model.training
    model.eval()
    times = []
    with no_grad():
        model(x)  # warm-up
        for _ in range(iters):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    model.train(was_training)
    return {"mean": float(np.mean(times)), "std": float(np.std(times)), "iters": iters, "shape": list(shape)}
