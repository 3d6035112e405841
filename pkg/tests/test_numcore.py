import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssal.numcore import (
    BatchNormState,
    DegenerateBatchError,
    DimensionError,
    GraphError,
    LabelError,
    MissingGradientError,
    NormalizationError,
    SgdState,
    StepLrSchedule,
    Tensor,
    batchnorm,
    conv2d,
    finite_difference_check,
    global_avg_pool,
    l2_normalize,
    linear,
    lr_at,
    matmul,
    no_grad,
    relu,
    sgd_step,
    softmax_cross_entropy,
)
from ssal.numcore.ops import mul, total

SEEDS = range(20)


def weighted(out, r):
    return total(mul(out, Tensor(r)))


# ---------------------------------------------------------------- tensor / tape


def test_backward_populates_every_reachable_grad():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    h = a * b
    loss = (h + a).sum()
    loss.backward()
    np.testing.assert_array_equal(a.grad, [4.0, 5.0])
    np.testing.assert_array_equal(b.grad, [1.0, 2.0])
    np.testing.assert_array_equal(h.grad, [1.0, 1.0])


def test_second_backward_is_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    loss = (a * 2.0).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = (a * 3.0).sum()
    assert out.node is None
    with pytest.raises(GraphError):
        out.backward()


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [8.0])


def test_integer_input_is_promoted_to_float64():
    assert Tensor([1, 2, 3]).dtype == np.float64
    assert Tensor(np.zeros(2, dtype=np.float32)).dtype == np.float32


# ---------------------------------------------------------------- matmul / linear


def test_matmul_examples():
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[5.0, 6], [7, 8]])).data, [[5, 6], [7, 8]])
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data, [[11]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((3, 5)))
    r = rng.standard_normal((4, 5))
    assert finite_difference_check(lambda t: weighted(matmul(t, b), r), a) < 1e-4
    assert finite_difference_check(lambda t: weighted(matmul(a, t), r), b) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w, b = Tensor(rng.standard_normal((5, 3))), Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal(4))
    r = rng.standard_normal((5, 4))
    for f, t in [(lambda t: linear(t, w, b), x), (lambda t: linear(x, t, b), w), (lambda t: linear(x, w, t), b)]:
        assert finite_difference_check(lambda u: weighted(f(u), r), t) < 1e-4


# ---------------------------------------------------------------- conv


def test_conv_zero_input_gives_zero():
    out = conv2d(Tensor(np.zeros((2, 3, 5, 5))), Tensor(np.ones((4, 3, 3, 3))))
    assert out.shape == (2, 4, 5, 5)
    assert not out.data.any()


def test_conv_ones_center_is_nine():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0  # corner sees a 2x2 window


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 3, 6, 5)), rng.standard_normal((4, 3, 3, 3))
    for stride in (1, 2):
        out = conv2d(Tensor(x), Tensor(w), stride=stride).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ho, wo = (6 - 1) // stride + 1, (5 - 1) // stride + 1
        ref = np.zeros((2, 4, ho, wo))
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, :, i * stride : i * stride + 3, j * stride : j * stride + 3]
                ref[:, :, i, j] = np.einsum("nchw,fchw->nf", patch, w)
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_output_size_formula():
    for h in (3, 4, 7, 8):
        assert conv2d(Tensor(np.ones((1, 1, h, h))), Tensor(np.ones((2, 1, 3, 3))), stride=2).shape[2] == (h - 1) // 2 + 1


def test_conv_errors():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 5, 5))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=3)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradient(seed, stride):
    rng = np.random.default_rng(seed)
    x, w = Tensor(rng.standard_normal((2, 3, 8, 8))), Tensor(rng.standard_normal((2, 3, 3, 3)))
    r = rng.standard_normal(conv2d(x, w, stride=stride).shape)
    assert finite_difference_check(lambda t: weighted(conv2d(t, w, stride=stride), r), x) < 1e-4
    assert finite_difference_check(lambda t: weighted(conv2d(x, t, stride=stride), r), w) < 1e-4


# ---------------------------------------------------------------- batchnorm


def test_batchnorm_train_standardizes():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((16, 3, 4, 4)) * 5 + 2)
    st = BatchNormState.create(3, np.float64)
    out = batchnorm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), st).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(1).standard_normal((6, 4)))
    beta = np.array([1.0, -2.0, 3.0, 0.5])
    out = batchnorm(x, Tensor(np.zeros(4)), Tensor(beta), BatchNormState.create(4, np.float64)).data
    np.testing.assert_array_equal(out, np.broadcast_to(beta, (6, 4)))


def test_batchnorm_running_stats_update():
    x = np.array([[1.0], [3.0]])
    st = BatchNormState.create(1, np.float64)
    batchnorm(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), st)
    # mean 2; unbiased variance 2
    np.testing.assert_allclose(st.running_mean, [0.2])
    np.testing.assert_allclose(st.running_var, [0.9 * 1 + 0.1 * 2])


def test_batchnorm_track_false_leaves_state():
    st = BatchNormState.create(2, np.float64)
    batchnorm(Tensor(np.random.default_rng(0).standard_normal((5, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
              st, track=False)
    np.testing.assert_array_equal(st.running_mean, 0)
    np.testing.assert_array_equal(st.running_var, 1)


def test_batchnorm_eval_uses_running_stats():
    st = BatchNormState(np.array([1.0]), np.array([4.0]))
    out = batchnorm(Tensor(np.array([[5.0]])), Tensor(np.ones(1)), Tensor(np.zeros(1)), st, train=False)
    np.testing.assert_allclose(out.data, [[4.0 / math.sqrt(4.0 + 1e-5)]])


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        batchnorm(Tensor(np.ones((1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)), BatchNormState.create(3))


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_gradient(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((8, 4)))
    g, b = Tensor(rng.uniform(0.5, 2, 4)), Tensor(rng.standard_normal(4))
    st = BatchNormState.create(4, np.float64)
    r = rng.standard_normal((8, 4))
    run = lambda xx, gg, bb: weighted(batchnorm(xx, gg, bb, st), r)  # noqa: E731
    assert finite_difference_check(lambda t: run(t, g, b), x) < 1e-3
    assert finite_difference_check(lambda t: run(x, t, b), g) < 1e-3
    assert finite_difference_check(lambda t: run(x, g, t), b) < 1e-3


# ---------------------------------------------------------------- small layers


def test_relu_example_and_kink():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    out = relu(x)
    np.testing.assert_array_equal(out.data, [0, 0, 2])
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_global_avg_pool_constant():
    out = global_avg_pool(Tensor(np.full((2, 3, 4, 4), 2.5)))
    np.testing.assert_array_equal(out.data, np.full((2, 3), 2.5))


def test_softmax_cross_entropy_examples():
    assert abs(float(softmax_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9]).data) - math.log(10)) < 1e-6
    logits = np.zeros((2, 4))
    logits[[0, 1], [1, 3]] = 20.0
    assert float(softmax_cross_entropy(Tensor(logits), [1, 3]).data) < 1e-4


def test_softmax_cross_entropy_is_stable_for_large_logits():
    loss = softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [1])
    assert abs(float(loss.data) - 1000.0) < 1e-9


def test_softmax_cross_entropy_label_range():
    with pytest.raises(LabelError):
        softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.standard_normal((5, 4)))
    labels = rng.integers(0, 4, 5)
    assert finite_difference_check(lambda t: softmax_cross_entropy(t, labels), logits) < 1e-4


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]])
    unit = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(l2_normalize(Tensor(unit)).data, unit)
    with pytest.raises(NormalizationError):
        l2_normalize(Tensor(np.zeros((1, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_l2_normalize_gradient(seed):
    rng = np.random.default_rng(seed)
    x, r = Tensor(rng.standard_normal((3, 5))), rng.standard_normal((3, 5))
    assert finite_difference_check(lambda t: weighted(l2_normalize(t), r), x) < 1e-4


# ---------------------------------------------------------------- gradient checker


def test_checker_on_closed_forms():
    assert finite_difference_check(lambda t: t.sum(), Tensor(np.random.default_rng(0).standard_normal(5))) < 1e-10
    assert finite_difference_check(lambda t: (t * t).sum(), Tensor(np.array([1.0, 2.0]))) < 1e-8


def test_checker_detects_a_wrong_gradient():
    from ssal.numcore.tensor import record

    def bad_square(t):
        return record("bad", (t.data**2).sum(), (t,), lambda g: (g * t.data,))  # missing factor 2

    assert finite_difference_check(bad_square, Tensor(np.array([1.0, 2.0]))) > 0.1


# ---------------------------------------------------------------- optimizer / schedule


def test_sgd_plain_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([2.0])
    sgd_step([p], SgdState(learning_rate=0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [0.8])
    assert p.grad is None


def test_sgd_zero_gradient_is_identity():
    p = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    sgd_step([p], SgdState(learning_rate=0.5, momentum=0.9, weight_decay=0.0))
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_sgd_two_steps_match_unrolled_recurrence():
    lr, mu, wd = 0.1, 0.9, 0.01
    theta, g1, g2 = 1.0, 0.5, -0.25
    v1 = g1
    t1 = theta - lr * (v1 + wd * theta)
    v2 = mu * v1 + g2
    t2 = t1 - lr * (v2 + wd * t1)

    p = Tensor(np.array([theta]), requires_grad=True)
    state = SgdState(lr, mu, wd)
    p.grad = np.array([g1])
    sgd_step([p], state)
    p.grad = np.array([g2])
    sgd_step([p], state)
    np.testing.assert_allclose(p.data, [t2], rtol=1e-15)


def test_sgd_missing_gradient():
    with pytest.raises(MissingGradientError):
        sgd_step([Tensor(np.ones(2), requires_grad=True)], SgdState())


def test_sgd_state_validation():
    with pytest.raises(ValueError):
        SgdState(learning_rate=0.0)
    with pytest.raises(ValueError):
        SgdState(momentum=1.0)


@pytest.mark.parametrize("epoch,expected", [(0, 0.01), (119, 0.01), (120, 0.001), (130, 0.001), (160, 1e-4), (170, 1e-4)])
def test_lr_schedule(epoch, expected):
    assert lr_at(StepLrSchedule(), epoch, 200) == pytest.approx(expected, rel=1e-12)


def test_lr_schedule_validation():
    with pytest.raises(ValueError):
        StepLrSchedule(milestones=(0.8, 0.6))
    with pytest.raises(ValueError):
        StepLrSchedule(milestones=(0.0, 0.5))


@given(st.integers(1, 400), st.lists(st.floats(0.01, 0.99), min_size=1, max_size=4, unique=True))
def test_lr_non_increasing(total_epochs, ms):
    sched = StepLrSchedule(0.1, tuple(sorted(ms)), 0.5)
    lrs = [lr_at(sched, e, total_epochs) for e in range(total_epochs)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_forward_is_bit_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((2, 3, 6, 6)).astype(np.float32), rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        st_ = BatchNormState.create(4)
        h = relu(batchnorm(conv2d(Tensor(x), Tensor(w), stride=2), Tensor(np.ones(4, np.float32)),
                           Tensor(np.zeros(4, np.float32)), st_))
        return global_avg_pool(h).data

    np.testing.assert_array_equal(run(), run())
