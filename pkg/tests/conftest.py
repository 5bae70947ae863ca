import numpy as np
import pytest

from rhanet.tensor import Tensor, finite_diff_grad, rel_error


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def grad_errors(fn, leaves, rng, h=1e-6, joint=False):
    """Relative error between autodiff and central differences for sum(fn() * R).

    A fixed random projection R keeps outputs with constant sums (softmax) from
    having trivially zero gradients. With ``joint`` the error is measured once
    over all leaves concatenated (returned under key "all"); use it when some
    leaves have structurally zero gradients, e.g. BN shifts feeding another
    training-mode BN, where a per-leaf ratio would compare round-off to round-off.
    """
    proj = Tensor(rng.standard_normal(fn().shape))

    def loss(_=None):
        return (fn() * proj).sum()

    for t in leaves:
        t.grad = None
    loss().backward()
    autos, fds = [], []
    for t in leaves:
        fds.append(finite_diff_grad(loss, t, h))
        autos.append(t.grad if t.grad is not None else np.zeros_like(t.data))
    if joint:
        return {"all": rel_error(np.concatenate([a.ravel() for a in autos]), np.concatenate([f.ravel() for f in fds]))}
    return {i: rel_error(a, f) for i, (a, f) in enumerate(zip(autos, fds))}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sampled_model_grad_error(model, x, rng, k=20, h=1e-6):
    """Norm-wise relative error over ``k`` randomly chosen parameter scalars.

    The loss is sum(model(x) * R) for a fixed random R.
    """
    proj = Tensor(rng.standard_normal(model(x).shape))

    def loss():
        return (model(x) * proj).sum()

    params = model.parameters()
    model.zero_grad()
    loss().backward()
    sizes = np.array([p.size for p in params])
    flat = rng.choice(sizes.sum(), size=k, replace=False)
    bounds = np.cumsum(sizes)
    auto, fd = np.zeros(k), np.zeros(k)
    for j, f in enumerate(flat):
        pi = int(np.searchsorted(bounds, f, side="right"))
        p = params[pi]
        idx = np.unravel_index(int(f - (bounds[pi] - sizes[pi])), p.shape)
        auto[j] = p.grad[idx]
        orig = p.data[idx]
        p.data[idx] = orig + h
        up = float(loss().data)
        p.data[idx] = orig - h
        down = float(loss().data)
        p.data[idx] = orig
        fd[j] = (up - down) / (2 * h)
    return rel_error(auto, fd)


def write_stripe_dataset(root, n=4, size=32):
    """Write the synthetic stripe set as PNGs plus a split list; returns the list path."""
    from PIL import Image

    from rhanet.data import stripe_samples

    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in stripe_samples(n, size):
        img = (s.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(img).save(root / s.image_path.name)
        Image.fromarray((s.mask * 255).astype(np.uint8)).save(root / s.mask_path.name)
        lines.append(f"{s.image_path.name}\t{s.mask_path.name}")
    split = root / "split.txt"
    split.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return split
