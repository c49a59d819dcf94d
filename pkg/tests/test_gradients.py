"""Finite-difference checks for every differentiable primitive and the whole U-Net."""
import time

import numpy as np
import pytest

from retina_ssl.tensor import RngStream, Tensor, grad_check, mul, sum_
from retina_ssl.tensor.checks import CASES, check_case, run_suite
from retina_ssl.unet import UNetConfig, build_unet

SEEDS = range(20)


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradient_twenty_seeds(name):
    worst = max(check_case(name, s) for s in SEEDS)
    assert worst < 1e-3, f"{name}: {worst:.3g}"


def test_suite_covers_training_primitives():
    needed = {"conv2d_same", "conv_transpose2d", "maxpool2", "batchnorm_train", "relu", "sigmoid",
              "binary_cross_entropy", "info_nce", "l2_normalize", "linear", "concat", "global_avg_pool"}
    assert needed <= set(CASES)


def test_run_suite_reports_every_pair():
    rows = run_suite(seeds=[0, 1], names=["add", "relu"])
    assert [(n, s) for n, s, _ in rows] == [("add", 0), ("add", 1), ("relu", 0), ("relu", 1)]


def unet_composite_error(seed=0, entries=12):
    model = build_unet(UNetConfig(), RngStream(seed))
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((1, 3, 16, 16)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 1, 16, 16)).astype(np.float32))
    picked = ["encoder.0.conv1.w", "encoder.1.res.w", "encoder.3.conv2.w", "decoder.0.up.w",
              "decoder.1.conv1.w", "decoder.2.res.w", "head.w", "head.b"]
    tensors = [model.params[n] for n in picked]

    def loss(x, *_):
        return sum_(mul(model.forward(x, train=False), w))

    return grad_check(loss, [x, *tensors], max_entries=entries, rng=np.random.default_rng(seed))


def test_unet_composite_gradient():
    assert unet_composite_error() < 1e-2


def test_full_suite_runtime_budget():
    t = time.perf_counter()
    run_suite(seeds=range(2))
    unet_composite_error(entries=4)
    # 20 seeds is ten times the two run here; five minutes is the budget
    assert (time.perf_counter() - t) * 10 < 300
