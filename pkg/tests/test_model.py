import math
import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from yasgd.model import (
    BN_EPSILON,
    BN_MOMENTUM,
    BatchNormState,
    FlatParams,
    ModelSpec,
    ParamSegment,
    SegmentKind,
    accuracy,
    backward,
    batchnorm_update,
    check_segments,
    forward,
    init_bn_states,
    init_params,
    layout,
    smooth_labels,
)
from yasgd.rng import uniform


def _random_batch(seed, n, d, k):
    r = np.random.default_rng(seed)
    return r.normal(size=(n, d)), r.integers(0, k, size=n)


def _random_params64(spec, seed):
    p = init_params(spec, seed).astype(np.float64)
    r = np.random.default_rng(seed + 1)
    # perturb non-weight segments so biases and BN affine terms matter
    p.values += 0.1 * r.normal(size=p.values.size)
    return p


# ---------------------------------------------------------- model spec / layout
def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec((4,))
    with pytest.raises(ValueError):
        ModelSpec((4, 1))
    with pytest.raises(ValueError):
        ModelSpec((4, 0, 3))
    with pytest.raises(ValueError):
        ModelSpec((4, 8, 3), use_batchnorm=(True, False))
    assert ModelSpec((4, 8, 8, 3), True).use_batchnorm == (True, True)


def test_layout_tiles_buffer():
    spec = ModelSpec((32, 64, 64, 10), (True, False))
    segs = layout(spec)
    check_segments(segs, segs[-1].end)
    names = [s.name for s in segs]
    assert names == ["fc0.weight", "bn0.gamma", "bn0.beta", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
    assert segs[-1].end == 32 * 64 + 2 * 64 + 64 * 64 + 64 + 64 * 10 + 10


def test_check_segments_rejects_gaps_and_overlaps():
    a = ParamSegment("a", 0, 2, (2,), SegmentKind.BIAS)
    with pytest.raises(ValueError):
        check_segments([a, ParamSegment("b", 3, 1, (1,), SegmentKind.BIAS)], 4)
    with pytest.raises(ValueError):
        check_segments([a, ParamSegment("b", 1, 2, (2,), SegmentKind.BIAS)], 3)
    with pytest.raises(ValueError):
        check_segments([a], 3)


# ------------------------------------------------------------------------ init
@pytest.mark.parametrize("seed", [1, 100000, 2**63 + 5])
def test_init_is_rank_and_thread_invariant(seed):
    spec = ModelSpec((32, 64, 64, 10), True)
    out = [None] * 4

    def work(rank):
        out[rank] = init_params(spec, seed).values

    threads = [threading.Thread(target=work, args=(r,)) for r in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(out[0], o) for o in out[1:])
    assert out[0].dtype == np.float32


def test_init_seed_changes_weights():
    spec = ModelSpec((8, 16, 3))
    assert not np.array_equal(init_params(spec, 1).values, init_params(spec, 2).values)


def test_init_zero_and_one_kinds():
    spec = ModelSpec((8, 16, 16, 3), (True, False))
    p = init_params(spec, 9)
    for seg in p.segments:
        v = p.view(seg.name)
        if seg.kind in (SegmentKind.BIAS, SegmentKind.BN_BETA):
            assert not v.any()
        elif seg.kind is SegmentKind.BN_GAMMA:
            assert (v == 1).all()
        else:
            std = math.sqrt(2.0 / seg.shape[0])
            assert np.abs(v).max() <= 2 * std + 1e-6


def test_bias_segments_are_zero_for_any_seed():
    spec = ModelSpec((3, 2))
    for seed in (0, 5, 100000):
        assert not init_params(spec, seed).view("fc0.bias").any()


# ---------------------------------------------------------------- label smoothing
def test_smooth_labels_examples():
    v = smooth_labels(3, 0.1, 10)
    expected = np.full(10, 0.01)
    expected[3] = 0.91
    assert np.allclose(v, expected, rtol=0, atol=1e-15)
    assert np.array_equal(smooth_labels(0, 0.0, 5), np.eye(5)[0])
    with pytest.raises(ValueError):
        smooth_labels(5, 0.1, 5)
    with pytest.raises(ValueError):
        smooth_labels(0, 1.0, 5)


@given(st.integers(2, 50), st.data(), st.floats(0, 0.999))
def test_smooth_labels_is_a_distribution(k, data, eps):
    cls = data.draw(st.integers(0, k - 1))
    v = smooth_labels(cls, eps, k)
    assert math.isclose(math.fsum(v), 1.0, rel_tol=0, abs_tol=1e-12)
    assert v.min() == pytest.approx(eps / k, abs=1e-15)
    assert v.argmax() == cls


# ---------------------------------------------------------------- batch norm
def test_batchnorm_update_examples():
    s = BatchNormState(np.zeros(1), np.ones(1), 0.9)
    assert batchnorm_update(s, [1.0], [1.0]).running_mean[0] == pytest.approx(0.1)
    frozen = BatchNormState(np.array([0.3]), np.array([2.0]), 1.0)
    out = batchnorm_update(frozen, [5.0], [7.0])
    assert out.running_mean[0] == 0.3 and out.running_var[0] == 2.0
    with pytest.raises(ValueError):
        batchnorm_update(s, [0.0], [-1.0])
    with pytest.raises(ValueError):
        batchnorm_update(s, [np.nan], [1.0])


def test_batchnorm_defaults():
    s = BatchNormState.fresh(4)
    assert s.momentum == BN_MOMENTUM == 0.9
    assert s.epsilon == BN_EPSILON == 1e-5


@given(st.floats(0.0, 0.99), st.floats(-10, 10), st.integers(1, 60))
def test_batchnorm_converges_geometrically(m, target, steps):
    s = BatchNormState(np.zeros(1), np.ones(1), m)
    for _ in range(steps):
        s = batchnorm_update(s, [target], [abs(target)])
    # closed form of the recurrence started at 0
    expected = target * (1 - m**steps)
    assert s.running_mean[0] == pytest.approx(expected, abs=1e-9)


# ---------------------------------------------------------------- forward
def test_eval_mode_is_pure():
    spec = ModelSpec((5, 7, 3), True)
    p = init_params(spec, 3)
    bn = [BatchNormState(np.arange(7.0).astype(np.float32), np.full(7, 2.0, np.float32))]
    before = [b.copy() for b in bn]
    x, y = _random_batch(0, 6, 5, 3)
    l1, _ = forward(p, bn, (x, y), "eval")
    l2, _ = forward(p, bn, (x, y), "eval")
    assert l1 == l2
    assert np.array_equal(bn[0].running_mean, before[0].running_mean)
    assert np.array_equal(bn[0].running_var, before[0].running_var)


def test_train_mode_updates_running_stats():
    spec = ModelSpec((5, 7, 3), True)
    p = init_params(spec, 3)
    bn = init_bn_states(spec)
    x, y = _random_batch(0, 6, 5, 3)
    forward(p, bn, (x, y), "train")
    assert bn[0].running_mean.any()


def test_uniform_logits_give_log_k():
    spec = ModelSpec((4, 2))
    p = FlatParams(np.zeros(10, np.float64), layout(spec), spec)
    x, y = _random_batch(1, 5, 4, 2)
    loss, _ = forward(p, [], (x, y), "train", 0.0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_forward_rejects_bad_inputs():
    spec = ModelSpec((4, 3))
    p = init_params(spec, 0)
    with pytest.raises(ValueError):
        forward(p, [], (np.zeros((2, 5)), [0, 1]))
    with pytest.raises(ValueError):
        forward(p, [], (np.zeros((0, 4)), []))
    with pytest.raises(ValueError):
        forward(p, [], (np.zeros((2, 4)), [0, 1]), mode="predict")


def _scalar_loss(params, spec, x, y, eps):
    """Loop-by-loop re-implementation of the train-mode loss (float64, math module)."""
    h = [list(map(float, row)) for row in x]
    n = len(h)
    for i in range(spec.num_layers):
        w = params.view(f"fc{i}.weight")
        fan_in, fan_out = w.shape
        z = [[math.fsum(h[s][a] * float(w[a, b]) for a in range(fan_in)) for b in range(fan_out)] for s in range(n)]
        if spec.has_bn(i):
            g, beta = params.view(f"bn{i}.gamma"), params.view(f"bn{i}.beta")
            for b in range(fan_out):
                col = [z[s][b] for s in range(n)]
                mean = math.fsum(col) / n
                var = math.fsum((c - mean) ** 2 for c in col) / n
                for s in range(n):
                    z[s][b] = (z[s][b] - mean) / math.sqrt(var + BN_EPSILON) * float(g[b]) + float(beta[b])
        else:
            bias = params.view(f"fc{i}.bias")
            z = [[z[s][b] + float(bias[b]) for b in range(fan_out)] for s in range(n)]
        h = [[max(v, 0.0) for v in row] for row in z] if i < spec.num_layers - 1 else z
    k = spec.num_classes
    total = 0.0
    for s in range(n):
        m = max(h[s])
        lse = m + math.log(math.fsum(math.exp(v - m) for v in h[s]))
        q = smooth_labels(int(y[s]), eps, k)
        total += -math.fsum(float(q[c]) * (h[s][c] - lse) for c in range(k))
    return total / n


@pytest.mark.parametrize("bn", [False, True])
def test_train_loss_matches_scalar_oracle(bn):
    spec = ModelSpec((3, 5, 4, 3), bn)
    p = _random_params64(spec, 12)
    x, y = _random_batch(4, 2, 3, 3)
    loss, _ = forward(p, init_bn_states(spec), (x, y), "train", 0.1)
    assert loss == pytest.approx(_scalar_loss(p, spec, x, y, 0.1), abs=1e-12)


# ---------------------------------------------------------------- backward
def finite_difference_error(spec, seed, n=8, eps_ls=0.0, step=1e-4):
    """Max elementwise relative error between backward and central differences (float64)."""
    p = _random_params64(spec, seed)
    x, y = _random_batch(seed + 2, n, spec.input_dim, spec.num_classes)
    bn = init_bn_states(spec)
    _, cache = forward(p, bn, (x, y), "train", eps_ls)
    analytic = backward(cache).values
    numeric = np.empty_like(analytic)
    for j in range(p.values.size):
        orig = p.values[j]
        p.values[j] = orig + step
        up, _ = forward(p, init_bn_states(spec), (x, y), "train", eps_ls)
        p.values[j] = orig - step
        down, _ = forward(p, init_bn_states(spec), (x, y), "train", eps_ls)
        p.values[j] = orig
        numeric[j] = (up - down) / (2 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / scale).max())


@pytest.mark.parametrize("bn", [False, True])
def test_gradient_matches_finite_differences(bn):
    assert finite_difference_error(ModelSpec((2, 16, 3), bn), seed=5) < 1e-5


def test_gradient_with_label_smoothing():
    assert finite_difference_error(ModelSpec((4, 6, 5, 3), (True, False)), seed=8, eps_ls=0.1) < 1e-5


def test_dead_bias_has_zero_gradient():
    spec = ModelSpec((3, 4, 2))
    p = init_params(spec, 1).astype(np.float64)
    p.view("fc1.weight")[1, :] = 0.0  # hidden unit 1 feeds nothing downstream
    x, y = _random_batch(0, 6, 3, 2)
    _, cache = forward(p, [], (x, y))
    g = backward(cache)
    assert g.view("fc0.bias")[1] == 0.0


def test_gradient_is_linear_in_batch_split():
    spec = ModelSpec((6, 8, 8, 4))
    p = _random_params64(spec, 3)
    x, y = _random_batch(9, 11, 6, 4)
    a, b = 4, 7

    def grad(xs, ys):
        return backward(forward(p, [], (xs, ys))[1]).values

    whole = grad(x, y)
    combined = (a * grad(x[:a], y[:a]) + b * grad(x[a:], y[a:])) / (a + b)
    assert np.abs(whole - combined).max() < 1e-10


def test_backward_reports_segments_in_reverse_offset_order():
    spec = ModelSpec((4, 6, 6, 3), (True, False))
    p = init_params(spec, 2)
    x, y = _random_batch(0, 5, 4, 3)
    seen = []
    backward(forward(p, init_bn_states(spec), (x, y))[1], seen.append)
    assert seen == list(reversed(range(len(p.segments))))


def test_backward_needs_train_cache():
    spec = ModelSpec((4, 3))
    p = init_params(spec, 0)
    _, cache = forward(p, [], (np.zeros((2, 4)), [0, 1]), "eval")
    with pytest.raises(ValueError):
        backward(cache)


def test_accuracy_counts():
    spec = ModelSpec((2, 2))
    p = FlatParams(np.array([1, 0, 0, 1, 0, 0], np.float32), layout(spec), spec)
    x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 1.0]])
    assert accuracy(p, [], x, [0, 1, 1]) == (2, 3)
    assert accuracy(p, [], x[:0], []) == (0, 0)
