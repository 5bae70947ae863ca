"""Acceptance gate: one PASS/FAIL line per primary criterion.

Lines are written straight to the terminal (capture disabled), so they show up
in a plain ``pytest`` run as well as with ``-v``.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from rhanet.blocks import HybridAttention, ResidualBlock, zero_parameters
from rhanet.checkpoint import load_checkpoint, save_checkpoint
from rhanet.cli import main
from rhanet.data import stripe_samples
from rhanet.inference import benchmark
from rhanet.metrics import ToleranceConfusion, confusion_with_tolerance, evaluate_set, pr_re_f1
from rhanet.model import ModelConfig, build, count_flops, count_params, ds_replacements
from rhanet.tensor import Tensor
from rhanet.training import Schedule, fit, resume, weighted_bce

from conftest import grad_errors, sampled_model_grad_error, write_stripe_dataset
from test_blocks import BLOCKS, _block_case, as_leaves, randomize
from test_cli import strip_timing
from test_metrics import brute_force, counts, random_pair
from test_ops import OPS, _case


@pytest.fixture
def verdict(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return emit


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst_ops = 0.0
    for name in OPS:
        for seed in range(10):
            rng = np.random.default_rng(seed)
            fn, leaves = _case(name, rng)
            worst_ops = max(worst_ops, *grad_errors(fn, leaves, rng).values())
    worst_blocks = 0.0
    for name in BLOCKS:
        for seed in range(10):
            rng = np.random.default_rng(seed)
            module, fn, inputs = _block_case(name, rng)
            worst_blocks = max(worst_blocks, *grad_errors(fn, inputs + as_leaves(module), rng, joint=True).values())
    worst_model = 0.0
    for variant in ("rha", "rha-lite"):
        rng = np.random.default_rng(0)
        m = build(ModelConfig(variant, 2), seed=0, dtype=np.float64).eval()
        for bn in m.batchnorms():
            bn.running_var[:] = rng.uniform(0.5, 2.0, bn.running_var.shape)
        worst_model = max(worst_model, sampled_model_grad_error(m, Tensor(rng.random((1, 3, 16, 16))), rng))
        m.train()
        worst_model = max(worst_model, sampled_model_grad_error(m, Tensor(rng.random((2, 3, 16, 16))), rng))
    elapsed = time.perf_counter() - t0
    ok = worst_ops < 1e-4 and worst_blocks < 1e-4 and worst_model < 1e-3 and elapsed < 60
    verdict("gradient suite", ok,
            f"ops {worst_ops:.1e}, blocks {worst_blocks:.1e} (< 1e-4), W=2 model {worst_model:.1e} (< 1e-3), "
            f"{elapsed:.1f} s (< 60 s)")


def test_attention_invariants(verdict):
    worst_sum = 0.0
    s_min, s_max = 1.0, 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(1, 9))
        hab = HybridAttention(c, rng, np.float64)
        randomize(hab, rng, scale=rng.uniform(0.1, 3))
        shape = (int(rng.integers(1, 4)), c, 4, 4)
        f_l = Tensor(rng.standard_normal(shape) * 3)
        f_h = Tensor(rng.standard_normal(shape) * 3)
        worst_sum = max(worst_sum, float(np.abs(hab.channel_attention(f_l, f_h).data.sum(axis=1) - 1).max()))
        # spatial range on unit-scale weights: sigmoid rounds to exactly 1.0 in
        # float64 once its argument passes ~36.7, so huge logits cannot show "< 1"
        randomize(hab, rng, scale=1.0)
        ms = hab.spatial_attention(Tensor(rng.standard_normal(shape)), Tensor(rng.standard_normal(shape))).data
        s_min, s_max = min(s_min, ms.min()), max(s_max, ms.max())
    rng = np.random.default_rng(0)
    hab = HybridAttention(6, rng, np.float64)
    zero_parameters(hab)
    f_l = Tensor(rng.standard_normal((2, 6, 8, 8)))
    exact = np.array_equal(hab(f_l, Tensor(rng.standard_normal((2, 6, 8, 8)))).data, 0.5 * f_l.data)
    ok = worst_sum < 1e-6 and s_min >= 0.5 and s_max < 1 and exact
    verdict("attention invariants", ok,
            f"max |sum-1| {worst_sum:.1e} over 100 cases; spatial range [{s_min:.6f}, 1 - {1 - s_max:.1e}]; "
            f"zero-weight HAB == 0.5*F_l: {exact}")


def test_residual_identity(verdict):
    rng = np.random.default_rng(0)
    r = ResidualBlock(8, rng, np.float64)
    zero_parameters(r)
    x = rng.standard_normal((2, 8, 8, 8))
    verdict("residual identity", np.array_equal(r(Tensor(x)).data, x), "zero-body block output equals input exactly")


def test_metric_oracle(verdict):
    mismatches = 0
    for tol in (0, 1, 2, 5):
        rng = np.random.default_rng(100 + tol)
        for _ in range(100):
            pred, gt = random_pair(rng)
            mismatches += counts(confusion_with_tolerance(pred, gt, tol)) != brute_force(pred, gt, tol)
    rng = np.random.default_rng(7)
    exact0 = True
    for _ in range(20):
        pred, gt = random_pair(rng)
        c = confusion_with_tolerance(pred, gt, 0)
        exact0 &= c.matched_pred == c.matched_gt == int((pred & gt).sum())
    f1 = pr_re_f1(ToleranceConfusion(4, 4, 2, 4))[2]
    ok = mismatches == 0 and exact0 and f1 == 2 / 3
    verdict("metric oracle", ok, f"{mismatches} mismatches in 400 pairs; tol=0 exact: {exact0}; F1(1, 0.5) = {f1!r}")


def test_overfit_smoke(verdict):
    t0 = time.perf_counter()
    data = stripe_samples(4, 32)
    m = build(ModelConfig("rha", 4), seed=0)
    steps = []
    hist = fit(m, data, schedule=Schedule(epochs=300, batch_size=4, seed=0, augment=False, checkpoint_interval=1000),
               max_steps=300, on_epoch=steps.append)
    f1 = evaluate_set(m, data).macro["f1"]
    elapsed = time.perf_counter() - t0
    ok = len(steps) <= 300 and f1 >= 0.95 and elapsed < 300 and hist.rows[-1]["train_loss"] < hist.rows[0]["train_loss"]
    verdict("overfit smoke test", ok, f"{len(steps)} steps, macro F1 {f1:.4f} (>= 0.95), {elapsed:.1f} s (< 300 s)")


def test_parameter_calibration(verdict):
    rha = count_params(build(ModelConfig("rha", 16)))
    lite = count_params(build(ModelConfig("rha-lite", 16)))
    orderings = True
    for w in (2, 4, 8, 16):
        p = {v: count_params(build(ModelConfig(v, w))) for v in ("baseline", "baseline-rb", "baseline-hab", "rha", "rha-lite")}
        orderings &= p["rha-lite"] < p["rha"] and p["baseline"] < p["baseline-rb"] and p["baseline-hab"] < p["rha"]
        orderings &= p["baseline"] < p["baseline-hab"]
    ok = 0.8e6 <= rha <= 3.4e6 and 0.3e6 <= lite <= 1.2e6 and orderings
    verdict("parameter calibration", ok,
            f"rha {rha:,} in [0.8M, 3.4M]; rha-lite {lite:,} in [0.3M, 1.2M]; orderings at W=2,4,8,16: {orderings}")


def test_ds_reduction(verdict):
    m = build(ModelConfig("rha-lite", 16))
    count_params(m)  # asserts the inequality for every DS unit
    reps = ds_replacements(m)
    ok = all(ds == 9 * ci + ci * co and ds < dense for ci, co, ds, dense in reps)
    verdict("DS reduction", ok, f"{len(reps)} DS units, each 9*C_in + C_in*C_out < 9*C_in*C_out")


def test_loss_values(verdict):
    v = float(weighted_bce(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]), 2.0).data)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        p, y = rng.random(n), (rng.random(n) < 0.5).astype(np.float64)
        pc = np.clip(p, 1e-7, 1 - 1e-7)
        ref = -np.sum(y * np.log(pc) + (1 - y) * np.log(1 - pc))
        worst = max(worst, abs(float(weighted_bce(Tensor(p), y, 1.0).data) - ref) / max(1.0, ref))
    ok = abs(v - 3 * math.log(2)) < 1e-6 and worst < 1e-9
    verdict("loss values", ok, f"weighted_bce = {v:.9f} vs 3 ln 2 = {3 * math.log(2):.9f}; omega=1 vs BCE max rel diff {worst:.1e}")


def test_persistence(verdict, tmp_path):
    data = stripe_samples(4, 32)
    sched = dict(batch_size=4, seed=2, augment=True, checkpoint_interval=3)
    fit(build(ModelConfig("rha", 2), seed=1), data, schedule=Schedule(epochs=3, out_dir=tmp_path, **sched))
    first = tmp_path / "epoch_3.rhac"
    save_checkpoint(tmp_path / "again.rhac", load_checkpoint(first))
    same_bytes = first.read_bytes() == (tmp_path / "again.rhac").read_bytes()
    full = fit(build(ModelConfig("rha", 2), seed=1), data, schedule=Schedule(epochs=8, **sched))
    _, resumed = resume(first, data, schedule=Schedule(epochs=8, **sched))
    a = [r["train_loss"] for r in full.rows[3:]]
    b = [r["train_loss"] for r in resumed.rows]
    ok = same_bytes and len(a) == 5 and a == b
    verdict("persistence", ok, f"re-save byte-identical: {same_bytes}; resumed losses bitwise equal for {len(b)} steps: {a == b}")


def test_determinism(verdict, tmp_path):
    root = tmp_path / "data"
    split = write_stripe_dataset(root)
    artifacts = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["train", "--data-root", str(root), "--train-list", str(split), "--val-list", str(split),
                     "--epochs", "4", "--width", "2", "--batch", "2", "--seed", "11", "--out", str(out)]) == 0
        assert main(["eval", "--data-root", str(root), "--list", str(split), "--checkpoint", str(out / "epoch_4.rhac"),
                     "--out", str(out / "eval")]) == 0
        artifacts.append((
            (out / "history.csv").read_bytes(),
            strip_timing(json.loads((out / "report.json").read_text(encoding="utf-8"))),
            strip_timing(json.loads((out / "eval" / "report.json").read_text(encoding="utf-8"))),
            (out / "epoch_4.rhac").read_bytes(),
        ))
    with (tmp_path / "run0" / "history.csv").open(encoding="utf-8") as fh:
        rows = len(list(csv.DictReader(fh)))
    same = [x == y for x, y in zip(*artifacts)]
    verdict("determinism", all(same) and rows == 4,
            f"history/train report/eval report/checkpoint identical: {same} (timing fields excluded)")


def test_relative_speed(verdict):
    rha, lite = build(ModelConfig("rha", 16)), build(ModelConfig("rha-lite", 16))
    f_rha, f_lite = count_flops(rha, (3, 640, 480)), count_flops(lite, (3, 640, 480))
    shape = (1, 3, 256, 256)
    t_rha = benchmark(rha, shape, iters=3)["mean"]
    t_lite = benchmark(lite, shape, iters=3)["mean"]
    ok = f_rha >= 2 * f_lite and t_lite <= t_rha
    verdict("relative speed", ok,
            f"FLOPs {f_rha / 1e9:.2f} G vs {f_lite / 1e9:.2f} G ({f_rha / f_lite:.1f}x >= 2x); "
            f"latency at 256x256 rha {t_rha * 1e3:.0f} ms, rha-lite {t_lite * 1e3:.0f} ms")
