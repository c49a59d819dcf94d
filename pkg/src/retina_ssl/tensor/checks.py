"""Finite-difference checks for every differentiable primitive.

Each case builds random float32 inputs and reduces the op's output to a
scalar with a fixed random weighting, so every output entry contributes to
the gradient.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import core, nn
from .core import Tensor
from .gradcheck import grad_check

Case = Callable[[np.random.Generator], tuple]


def _t(rng, *shape, scale=1.0, offset=0.0) -> Tensor:
    return Tensor((rng.standard_normal(shape) * scale + offset).astype(np.float32), requires_grad=True)


def _weighted(op: Callable[..., Tensor]):
    """fn(*inputs) = sum(op(*inputs) * W) with W drawn once on first call."""
    cache = {}

    def fn(*inputs):
        out = op(*inputs)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(12345).standard_normal(out.shape)
        w = Tensor(cache["w"].astype(out.data.dtype))
        return core.sum_(core.mul(out, w))

    return fn


def _bn_state(rng, c):
    s = nn.BatchNormState.create(c)
    s.gamma = _t(rng, c, scale=0.5, offset=1.0)
    s.beta = _t(rng, c, scale=0.5)
    s.running_mean[...] = rng.standard_normal(c).astype(np.float32) * 0.1
    s.running_var[...] = rng.uniform(0.5, 1.5, c).astype(np.float32)
    return s


def _batchnorm_case(train: bool) -> Case:
    def build(rng):
        x = _t(rng, 3, 2, 4, 4)
        s = _bn_state(rng, 2)

        def op(x, g, b):
            s.gamma, s.beta = g, b
            return nn.batchnorm(x, s, train)

        return _weighted(op), [x, s.gamma, s.beta]

    return build


def _away_from_zero(rng, *shape, margin=0.05):
    d = rng.standard_normal(shape)
    d = np.where(np.abs(d) < margin, np.sign(d + 1e-12) * margin, d)
    return Tensor(d.astype(np.float32), requires_grad=True)


def _maxpool_case(rng):
    # distinct values per window so the max is well separated from the runner-up
    vals = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1
    x = Tensor((vals + rng.uniform(-0.01, 0.01, vals.shape)).astype(np.float32), requires_grad=True)
    return _weighted(nn.maxpool2), [x]


def _bce_case(rng):
    target = rng.random((2, 1, 3, 3)) > 0.5
    fov = rng.random((2, 1, 3, 3)) > 0.3
    fov[0, 0, 0, 0] = True
    p = Tensor(rng.uniform(0.1, 0.9, (2, 1, 3, 3)).astype(np.float32), requires_grad=True)
    return (lambda p: nn.binary_cross_entropy(p, target, fov)), [p]


def _info_nce_case(rng):
    from ..moco import info_nce

    q = _t(rng, 4, 8)
    k = rng.standard_normal((4, 8))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    queue = rng.standard_normal((6, 8))
    queue /= np.linalg.norm(queue, axis=1, keepdims=True)
    return (lambda q: info_nce(nn.l2_normalize(q), k, queue, 0.5)), [q]


def _project_case(rng):
    from ..moco import project
    from .params import ModelParams

    feats = _t(rng, 2, 6, 3, 3)
    w1, b1, w2, b2 = _t(rng, 6, 5, scale=0.5), _t(rng, 5, scale=0.1), _t(rng, 5, 4, scale=0.5), _t(rng, 4, scale=0.1)

    def op(f, w1, b1, w2, b2):
        p = ModelParams()
        for n, t in (("fc1.w", w1), ("fc1.b", b1), ("fc2.w", w2), ("fc2.b", b2)):
            p.tensors["proj." + n] = t
        return project(f, p)

    return _weighted(op), [feats, w1, b1, w2, b2]


CASES: dict[str, Case] = {
    "add": lambda r: (_weighted(core.add), [_t(r, 3, 4), _t(r, 4)]),
    "neg": lambda r: (_weighted(core.neg), [_t(r, 3, 4)]),
    "mul": lambda r: (_weighted(core.mul), [_t(r, 3, 4), _t(r, 3, 1)]),
    "reciprocal": lambda r: (_weighted(core.reciprocal), [_t(r, 3, 4, scale=0.3, offset=2.0)]),
    "exp": lambda r: (_weighted(core.exp), [_t(r, 3, 4)]),
    "log": lambda r: (_weighted(core.log), [Tensor(r.uniform(0.5, 2.0, (3, 4)).astype(np.float32), requires_grad=True)]),
    "sum": lambda r: (_weighted(lambda a: core.sum_(a, axis=1)), [_t(r, 3, 4)]),
    "mean": lambda r: (_weighted(lambda a: core.mean(a, axis=0, keepdims=True)), [_t(r, 3, 4)]),
    "reshape": lambda r: (_weighted(lambda a: core.reshape(a, (4, 3))), [_t(r, 3, 4)]),
    "matmul": lambda r: (_weighted(core.matmul), [_t(r, 3, 4), _t(r, 4, 2)]),
    "concat": lambda r: (_weighted(lambda a, b: core.concat([a, b], axis=1)), [_t(r, 2, 3, 2, 2), _t(r, 2, 1, 2, 2)]),
    "conv2d_same": lambda r: (_weighted(lambda x, w, b: nn.conv2d(x, w, b)), [_t(r, 2, 3, 5, 6), _t(r, 4, 3, 3, 3), _t(r, 4)]),
    "conv2d_valid": lambda r: (_weighted(lambda x, w, b: nn.conv2d(x, w, b, padding="valid")),
                               [_t(r, 2, 2, 6, 5), _t(r, 3, 2, 3, 3), _t(r, 3)]),
    "conv2d_stride2": lambda r: (_weighted(lambda x, w: nn.conv2d(x, w, None, stride=2)), [_t(r, 1, 2, 6, 6), _t(r, 2, 2, 3, 3)]),
    "conv2d_1x1": lambda r: (_weighted(lambda x, w, b: nn.conv2d(x, w, b)), [_t(r, 2, 3, 4, 4), _t(r, 2, 3, 1, 1), _t(r, 2)]),
    "conv_transpose2d": lambda r: (_weighted(nn.conv_transpose2d), [_t(r, 2, 3, 3, 2), _t(r, 3, 2, 2, 2), _t(r, 2)]),
    "maxpool2": _maxpool_case,
    "batchnorm_train": _batchnorm_case(True),
    "batchnorm_eval": _batchnorm_case(False),
    "relu": lambda r: (_weighted(nn.relu), [_away_from_zero(r, 3, 4)]),
    "sigmoid": lambda r: (_weighted(nn.sigmoid), [_t(r, 3, 4, scale=2.0)]),
    "global_avg_pool": lambda r: (_weighted(nn.global_avg_pool), [_t(r, 2, 3, 3, 4)]),
    "linear": lambda r: (_weighted(nn.linear), [_t(r, 3, 4), _t(r, 4, 5), _t(r, 5)]),
    "l2_normalize": lambda r: (_weighted(nn.l2_normalize), [_t(r, 3, 5)]),
    "cross_entropy": lambda r: (lambda z: nn.cross_entropy(z, np.array([0, 2, 1])), [_t(r, 3, 4)]),
    "binary_cross_entropy": _bce_case,
    "info_nce": _info_nce_case,
    "project": _project_case,
}


def check_case(name: str, seed: int, eps: float = 1e-6) -> float:
    fn, inputs = CASES[name](np.random.default_rng(seed))
    return grad_check(fn, inputs, eps=eps)


def run_suite(seeds=range(20), names=None, eps: float = 1e-6) -> list[tuple[str, int, float]]:
    """(case, seed, relative error) for every case and seed."""
    names = list(CASES) if names is None else list(names)
    return [(name, int(s), check_case(name, int(s), eps)) for name in names for s in seeds]
