"""Finite-difference verification of every differentiable operation.

Each case builds a scalar loss ``sum(R * op(...))`` with a random weight
tensor R, so no gradient is identically zero by symmetry, and compares the
backward pass against central differences in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from ..contrastive import KeyQueue, KeyQueuePair, combined_loss, contrastive_pair_loss, info_nce
from ..model import DualModel, ModelConfig
from ..numcore import (
    BatchNormState,
    Tensor,
    add,
    batchnorm,
    conv2d,
    finite_difference_check,
    global_avg_pool,
    l2_normalize,
    linear,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
    total,
)
from ..numcore.ops import NormalizationError, power

TOLERANCE = 1e-3
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    return total(mul(out, Tensor(r)))


def _unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# each case: rng -> list of (f, x) pairs, one per differentiated argument
Case = Callable[[np.random.Generator], list]


def _binary(op, shape_a, shape_b, positive=False):
    def case(rng):
        a = rng.standard_normal(shape_a)
        b = rng.standard_normal(shape_b)
        if positive:
            a, b = np.abs(a) + 0.5, np.abs(b) + 0.5
        r = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
        ta, tb = Tensor(a), Tensor(b)
        return [(lambda t: _weighted(op(t, tb), r), ta), (lambda t: _weighted(op(ta, t), r), tb)]

    return case


def _unary(op, shape, transform=None):
    def case(rng):
        x = rng.standard_normal(shape)
        if transform is not None:
            x = transform(x, rng)
        r = rng.standard_normal(op(Tensor(x)).shape)
        return [(lambda t: _weighted(op(t), r), Tensor(x))]

    return case


def _away_from_zero(x, rng):
    return np.sign(x) * (np.abs(x) + 0.05)


def _conv(stride):
    def case(rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        r = rng.standard_normal(conv2d(x, w, stride=stride).shape)
        return [
            (lambda t: _weighted(conv2d(t, w, stride=stride), r), x),
            (lambda t: _weighted(conv2d(x, t, stride=stride), r), w),
        ]

    return case


def _batchnorm(shape, train):
    def case(rng):
        ch = shape[1]
        x = Tensor(rng.standard_normal(shape) * 2 + 0.5)
        g = Tensor(rng.uniform(0.5, 1.5, ch))
        b = Tensor(rng.standard_normal(ch))
        state = BatchNormState(rng.standard_normal(ch), rng.uniform(0.5, 2.0, ch))
        r = rng.standard_normal(shape)

        def run(xx, gg, bb):
            return _weighted(batchnorm(xx, gg, bb, state, train=train, track=False), r)

        return [
            (lambda t: run(t, g, b), x),
            (lambda t: run(x, t, b), g),
            (lambda t: run(x, g, t), b),
        ]

    return case


def _cross_entropy(rng):
    logits = Tensor(rng.standard_normal((5, 4)) * 2)
    labels = rng.integers(0, 4, 5)
    return [(lambda t: softmax_cross_entropy(t, labels), logits)]


def _info_nce(include_positive):
    def case(rng):
        q = Tensor(_unit(rng, 4, 6))
        k = _unit(rng, 4, 6)
        queue = _unit(rng, 8, 6)
        return [(lambda t: info_nce(l2_normalize(t), k, queue, 0.2, include_positive), q)]

    return case


def _pair_loss(rng):
    d = 6
    queues = KeyQueuePair(KeyQueue(8, d, np.float64), KeyQueue(8, d, np.float64))
    queues.enqueue(_unit(rng, 8, d), _unit(rng, 8, d))
    q, qs = Tensor(_unit(rng, 4, d)), Tensor(_unit(rng, 4, d))
    k, ks = _unit(rng, 4, d), _unit(rng, 4, d)

    def run(a, b):
        return contrastive_pair_loss(l2_normalize(a), l2_normalize(b), k, ks, queues, 0.2)

    return [(lambda t: run(t, qs), q), (lambda t: run(q, t), qs)]


KINK_MARGIN = 1e-3


def _kink_margin(model: DualModel, *inputs: np.ndarray) -> float:
    """Smallest |pre-activation| at any query-side relu for the given batches."""
    smallest = np.inf
    with no_grad():
        for x in inputs:
            h = Tensor(x)
            enc = model.query_encoder
            for w, g, b, st, s in zip(enc.weights, enc.gammas, enc.betas, enc.bn, enc.strides):
                pre = batchnorm(conv2d(h, w, stride=s), g, b, st, train=True, track=False)
                smallest = min(smallest, float(np.abs(pre.data).min()))
                h = relu(pre)
            h = global_avg_pool(h)
            for blk in (model.query_projector, model.predictor):
                if blk is None:
                    continue
                h = linear(h, blk.weight, blk.bias)
                if not blk.plain:
                    h = batchnorm(h, blk.gamma, blk.beta, blk.bn, train=True, track=False)
                    smallest = min(smallest, float(np.abs(h.data).min()))
                    h = relu(h)
    return smallest


def _tiny_network(rng, n_inputs: int = 1, **kw):
    """A float64 model and input batches whose relus all sit at least
    KINK_MARGIN away from their kink, where central differences are valid."""
    while True:
        cfg = ModelConfig(in_channels=3, num_classes=3, widths=(3, 4, 6), proj_dim=8, dtype="float64", **kw)
        model = DualModel(cfg, seed=int(rng.integers(2**31)))
        xs = [rng.standard_normal((3, 3, 4, 4)) for _ in range(n_inputs)]
        try:
            for x in xs:  # tiny widths can leave an all-zero embedding row
                model.key_forward(x)
                with no_grad():
                    model.query_forward(x, track=False)
        except NormalizationError:
            continue
        if _kink_margin(model, *xs) > KINK_MARGIN:
            return model, xs


def _network_classifier(rng):
    model, (x,) = _tiny_network(rng)
    x = Tensor(x)
    y = rng.integers(0, 3, 3)
    first_conv = next(p for _, p in model.query_encoder.named_parameters())

    def loss(inp):
        return softmax_cross_entropy(model.classify(model.query_forward(inp)[0]), y)

    return [(loss, x), (lambda _t: loss(x), first_conv)]


def _network_embedding(rng, **kw):
    model, (x,) = _tiny_network(rng, **kw)
    r = rng.standard_normal((3, 8))
    return [(lambda t: _weighted(model.query_forward(t)[1], r), Tensor(x))]


def _network_joint(rng):
    """The full joint objective: cross-entropy plus scaled contrastive pair loss."""
    model, (x, xs) = _tiny_network(rng, n_inputs=2)
    x = Tensor(x)
    y = rng.integers(0, 3, 3)
    queues = KeyQueuePair(KeyQueue(6, 8, np.float64), KeyQueue(6, 8, np.float64))
    queues.enqueue(_unit(rng, 6, 8), _unit(rng, 6, 8))
    k, ks = model.key_forward(x.data), model.key_forward(xs)
    last_conv = [p for _, p in model.query_encoder.named_parameters()][-3]

    def loss(inp):
        feats, q = model.query_forward(inp)
        _, qs = model.query_forward(xs)
        cls = softmax_cross_entropy(model.classify(feats), y)
        return combined_loss(cls, contrastive_pair_loss(q, qs, k, ks, queues, 0.2), 0.5)

    return [(loss, x), (lambda _t: loss(x), last_conv)]


CASES: dict[str, Case] = {
    "add": _binary(add, (3, 4), (4,)),
    "mul": _binary(mul, (3, 4), (3, 4)),
    "scale": _unary(lambda t: scale(t, -1.7), (3, 4)),
    "power": _unary(lambda t: power(t, 3.0), (3, 4), lambda x, rng: np.abs(x) + 0.5),
    "sum": _unary(lambda t: total(t) * Tensor(np.ones((1, 1))), (3, 4)),
    "reshape": _unary(lambda t: reshape(t, (6, 2)), (3, 4)),
    "relu": _unary(relu, (3, 5), _away_from_zero),
    "matmul": _binary(matmul, (3, 4), (4, 2)),
    "linear": lambda rng: _linear_case(rng),
    "conv2d_stride1": _conv(1),
    "conv2d_stride2": _conv(2),
    "global_avg_pool": _unary(global_avg_pool, (2, 3, 4, 4)),
    "batchnorm_train_2d": _batchnorm((6, 3), True),
    "batchnorm_train_4d": _batchnorm((3, 2, 3, 3), True),
    "batchnorm_eval_4d": _batchnorm((3, 2, 3, 3), False),
    "softmax_cross_entropy": _cross_entropy,
    "l2_normalize": _unary(l2_normalize, (4, 5)),
    "info_nce": _info_nce(True),
    "info_nce_negatives_only": _info_nce(False),
    "contrastive_pair_loss": _pair_loss,
    "network_classifier": _network_classifier,
    "network_query_embedding": _network_embedding,
    "network_ablated_embedding": lambda rng: _network_embedding(rng, use_predictor=False, use_projector=False),
    "network_joint_loss": _network_joint,
}


def _linear_case(rng):
    x, w, b = (Tensor(rng.standard_normal(s)) for s in ((5, 3), (3, 4), (4,)))
    r = rng.standard_normal((5, 4))
    return [
        (lambda t: _weighted(linear(t, w, b), r), x),
        (lambda t: _weighted(linear(x, t, b), r), w),
        (lambda t: _weighted(linear(x, w, t), r), b),
    ]


def run_case(name: str, seeds: int = 20) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 4099]))
        for f, x in CASES[name](rng):
            worst = max(worst, finite_difference_check(f, x, EPS))
    return CheckResult(name, seeds, worst)


def run_suite(seeds: int = 20, names=None) -> Iterator[CheckResult]:
    for name in names or CASES:
        yield run_case(name, seeds)
