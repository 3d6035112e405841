import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import info_nce_oracle as oracle
from ssal.augment import augment_batch
from ssal.contrastive import (
    KeyQueue,
    KeyQueuePair,
    LossWeights,
    QueueContractError,
    combined_loss,
    contrastive_pair_loss,
    contrastive_scores,
    info_nce,
    per_sample_contrastive_score,
)
from ssal.model import DualModel, ModelConfig
from ssal.numcore import Tensor, finite_difference_check, l2_normalize


def unit(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def queue_with(keys, capacity=None):
    keys = np.asarray(keys, dtype=np.float64)
    q = KeyQueue(capacity or max(len(keys), 1), keys.shape[1], np.float64)
    if len(keys):
        q.enqueue(keys)
    return q


# ---------------------------------------------------------------- closed forms


def test_empty_queue_gives_zero():
    rng = np.random.default_rng(0)
    q = Tensor(unit(rng, 3, 4))
    assert float(info_nce(q, unit(rng, 3, 4), KeyQueue(8, 4, np.float64), 0.2).data) == 0.0


@pytest.mark.parametrize("n", [1, 3, 255])
def test_uniform_logits_give_ln_n_plus_one(n):
    # positive and every negative share one similarity
    e = np.zeros((1, 4))
    e[0, 0] = 1.0
    loss = info_nce(Tensor(e), e, queue_with(np.repeat(e, n, axis=0)), 0.2)
    assert abs(float(loss.data) - math.log(n + 1)) < 1e-6


def test_symmetric_pair_loss():
    e = np.zeros((2, 4))
    e[:, 1] = 1.0
    queues = KeyQueuePair(queue_with(np.repeat(e[:1], 3, 0)), queue_with(np.repeat(e[:1], 3, 0)))
    loss = contrastive_pair_loss(Tensor(e), Tensor(e), e, e, queues, 0.2)
    assert abs(float(loss.data) - 2 * math.log(4)) < 1e-6


def test_pair_loss_empty_queues():
    e = unit(np.random.default_rng(1), 2, 4)
    assert float(contrastive_pair_loss(Tensor(e), Tensor(e), e, e, KeyQueuePair.create(4, 4), 0.2).data) == 0.0


def test_combined_loss_examples():
    assert combined_loss(1.0, 2.0, 0.5) == 2.0
    assert combined_loss(1.3, 7.0, 0.0) == 1.3
    assert combined_loss(0.0, 2.5, 1.0) == 2.5
    t = combined_loss(Tensor(1.0), Tensor(2.0), 0.5)
    assert float(t.data) == 2.0


def test_loss_weight_validation():
    assert LossWeights().temperature == 0.2 and LossWeights().contrastive_scale == 0.5
    with pytest.raises(ValueError):
        LossWeights(temperature=0)
    with pytest.raises(ValueError):
        info_nce(Tensor(np.ones((1, 2)) / math.sqrt(2)), np.ones((1, 2)) / math.sqrt(2),
                 queue_with(np.eye(2)), -1.0)


# ---------------------------------------------------------------- oracle equivalence


def test_frozen_oracle_values():
    inst = oracle.instance(2024)
    a = {k: np.array(v) for k, v in inst.items()}
    got = float(info_nce(Tensor(a["q"]), a["ks"], queue_with(a["strong"]), 0.2).data)
    assert abs(got - 3.0457401224317686) < 1e-6
    got = float(info_nce(Tensor(a["q"]), a["ks"], queue_with(a["strong"]), 0.2, include_positive=False).data)
    assert abs(got - 2.8374163132971506) < 1e-6
    queues = KeyQueuePair(queue_with(a["weak"]), queue_with(a["strong"]))
    got = float(contrastive_pair_loss(Tensor(a["q"]), Tensor(a["qs"]), a["k"], a["ks"], queues, 0.2).data)
    assert abs(got - 5.005761839505677) < 1e-6


@pytest.mark.parametrize("seed", range(50))
def test_matches_direct_oracle(seed):
    inst = oracle.instance(seed, batch=1 + seed % 5, n=1 + seed % 9)
    a = {k: np.array(v) for k, v in inst.items()}
    queues = KeyQueuePair(queue_with(a["weak"]), queue_with(a["strong"]))
    for pos in (True, False):
        got = float(contrastive_pair_loss(Tensor(a["q"]), Tensor(a["qs"]), a["k"], a["ks"], queues, 0.2, pos).data)
        want = oracle.pair_loss(inst["q"], inst["qs"], inst["k"], inst["ks"], inst["weak"], inst["strong"], 0.2, pos)
        assert abs(got - want) < 1e-6


# ---------------------------------------------------------------- properties


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.integers(0, 12))
def test_non_negative_and_zero_iff_empty(seed, n):
    rng = np.random.default_rng(seed)
    q = unit(rng, 3, 5)
    val = float(info_nce(Tensor(q), unit(rng, 3, 5), queue_with(unit(rng, n, 5) if n else np.empty((0, 5))), 0.2).data)
    assert val >= 0
    assert (val == 0) == (n == 0)


def test_monotone_in_similarities():
    q = np.array([[1.0, 0.0, 0.0]])
    k = np.array([[0.6, 0.8, 0.0]])
    negs = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    base = float(info_nce(Tensor(q), k, queue_with(negs), 0.2).data)
    closer_neg = negs.copy()
    closer_neg[0] = [0.6, 0.0, 0.8]
    assert float(info_nce(Tensor(q), k, queue_with(closer_neg), 0.2).data) > base
    closer_pos = np.array([[0.8, 0.6, 0.0]])
    assert float(info_nce(Tensor(q), closer_pos, queue_with(negs), 0.2).data) < base


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("pos", [True, False])
def test_gradient_wrt_query(seed, pos):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 6)))
    k, negs = unit(rng, 4, 6), queue_with(unit(rng, 8, 6))
    assert finite_difference_check(lambda t: info_nce(l2_normalize(t), k, negs, 0.2, pos), x) < 1e-3


def test_keys_receive_no_gradient():
    rng = np.random.default_rng(0)
    q = Tensor(unit(rng, 2, 3), requires_grad=True)
    k = Tensor(unit(rng, 2, 3), requires_grad=True)
    info_nce(q, k, queue_with(unit(rng, 4, 3)), 0.2).backward()
    assert q.grad is not None and k.grad is None


# ---------------------------------------------------------------- queues


def test_fifo_examples():
    rng = np.random.default_rng(2)
    keys = unit(rng, 6, 3)
    q = KeyQueue(4, 3, np.float64)
    q.enqueue(keys[:3])
    assert q.occupancy == 3
    q.enqueue(keys[3:])
    assert q.occupancy == 4
    np.testing.assert_array_equal(q.keys(), keys[2:])
    big = KeyQueue(4, 3, np.float64)
    big.enqueue(keys)
    np.testing.assert_array_equal(big.keys(), keys[-4:])


def test_enqueue_rejects_bad_keys():
    q = KeyQueue(4, 3)
    with pytest.raises(QueueContractError):
        q.enqueue(np.ones((2, 3)))
    with pytest.raises(QueueContractError):
        q.enqueue(np.eye(4)[:2])


def test_stored_keys_are_copies():
    keys = np.eye(3)
    q = KeyQueue(4, 3, np.float64)
    q.enqueue(keys)
    keys[0, 0] = 5.0
    assert q.keys()[0, 0] == 1.0
    with pytest.raises(ValueError):
        q.keys()[0, 0] = 2.0


def test_exhaustive_fifo_reference():
    """Every split of every arrival sequence up to length 12 into batches, capacities 1..4."""
    arrivals = np.eye(12)
    for cap in range(1, 5):
        for total in range(1, 13):
            # each composition of `total` into positive batch sizes
            for cuts in itertools.product([0, 1], repeat=total - 1):
                q = KeyQueue(cap, 12, np.float64)
                start = 0
                for i, c in enumerate(list(cuts) + [1]):
                    if c:
                        q.enqueue(arrivals[start : i + 1])
                        start = i + 1
                    assert q.occupancy <= cap
                np.testing.assert_array_equal(q.keys(), arrivals[max(0, total - cap) : total])
                np.testing.assert_allclose(np.linalg.norm(q.keys(), axis=1), 1.0, atol=1e-6)


def test_snapshot_is_frozen():
    pair = KeyQueuePair.create(4, 2, np.float64)
    pair.enqueue(np.eye(2), np.eye(2))
    snap = pair.snapshot()
    pair.enqueue(np.eye(2)[::-1], np.eye(2)[::-1])
    assert snap.weak.occupancy == 2 and pair.weak.occupancy == 4


# ---------------------------------------------------------------- per-sample score


@pytest.fixture(scope="module")
def scoring_setup():
    cfg = ModelConfig(widths=(8, 16, 16), proj_dim=16, dtype="float64")
    model = DualModel(cfg, seed=1)
    images = np.random.default_rng(3).random((10, 3, 8, 8))
    for _ in range(20):  # settle running statistics for eval mode
        model.query_forward(images)
    for q, k in model.paired():
        k[...] = q
    queues = KeyQueuePair.create(16, 16, np.float64)
    rng = np.random.default_rng(4)
    queues.enqueue(unit(rng, 16, 16), unit(rng, 16, 16))
    return model, images, queues


def test_scores_zero_with_empty_queues(scoring_setup):
    model, images, _ = scoring_setup
    scores = contrastive_scores(model, KeyQueuePair.create(8, 16, np.float64), images, np.arange(10), 0)
    assert not scores.any()


def test_scores_are_deterministic_and_batch_independent(scoring_setup):
    model, images, queues = scoring_setup
    a = contrastive_scores(model, queues, images, np.arange(10), 5)
    b = contrastive_scores(model, queues, images, np.arange(10), 5, batch_size=3)
    assert a.tobytes() == contrastive_scores(model, queues, images, np.arange(10), 5).tobytes()
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert (a >= 0).all()
    single = per_sample_contrastive_score(model, queues, images[7], 7, 5)
    assert abs(single - a[7]) < 1e-12


def test_scores_agree_with_oracle(scoring_setup):
    model, images, queues = scoring_setup
    ids = np.arange(10)
    scores = contrastive_scores(model, queues, images, ids, 5)
    weak_q = queues.weak.keys().tolist()
    strong_q = queues.strong.keys().tolist()
    want = []
    for i in ids:
        xw = augment_batch(images[i : i + 1], [i], 5, (), strong=False)
        xs = augment_batch(images[i : i + 1], [i], 5, (), strong=True)
        q = model.query_forward(xw, train=False)[1].data.tolist()
        qs = model.query_forward(xs, train=False)[1].data.tolist()
        k = model.key_forward(xw, train=False).tolist()
        ks = model.key_forward(xs, train=False).tolist()
        want.append(oracle.pair_loss(q, qs, k, ks, weak_q, strong_q, 0.2))
    np.testing.assert_allclose(scores, want, atol=1e-6)
    assert list(np.argsort(scores, kind="stable")) == list(np.argsort(want, kind="stable"))
