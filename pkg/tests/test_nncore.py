"""Kernel tests: forward oracles, gradient checks, Adam behavior."""

import numpy as np
import pytest

from ecdctr import nncore
from ecdctr.errors import ConfigError, DataError, NumericError, StaleCacheError
from ecdctr.nncore import (
    AdamState,
    AttentionParams,
    BatchNormState,
    LinearLayer,
    MlpParams,
    adam_step,
    attention_backward,
    attention_forward,
    bce_loss,
    bn_forward,
    mean_pool,
    mlp_backward,
    mlp_forward,
    self_attention,
    sigmoid,
)


def rand_mlp(rng, dims, activation="relu"):
    layers = []
    for i in range(len(dims) - 1):
        act = activation if i < len(dims) - 2 else "identity"
        layers.append(LinearLayer(w=rng.normal(size=(dims[i], dims[i + 1])),
                                  b=rng.normal(size=dims[i + 1]), activation=act))
    return MlpParams(layers)


def rand_attn(rng, d):
    return AttentionParams(wq=rng.normal(size=(d, d)),
                           wk=rng.normal(size=(d, d)),
                           wv=rng.normal(size=(d, d)))


def central_diff(f, arr, h=1e-5):
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def assert_close_rel(analytic, numeric, rel=1e-4):
    denom = np.maximum(np.abs(numeric), 1e-6)
    assert np.max(np.abs(analytic - numeric) / denom) < rel


# ---------------------------------------------------------------------------
# mlp forward


def test_mlp_zero_weights_gives_zero_logits():
    p = MlpParams([LinearLayer(np.zeros((3, 2)), np.zeros(2), "relu"),
                   LinearLayer(np.zeros((2, 1)), np.zeros(1), "identity")])
    logits, _ = mlp_forward(np.ones((4, 3)), p, mode="infer")
    assert np.all(logits == 0.0)


def test_mlp_identity_single_layer():
    p = MlpParams([LinearLayer(np.array([[1.0]]), np.zeros(1), "identity")])
    logits, _ = mlp_forward(np.array([[2.0]]), p, mode="infer")
    assert logits[0] == pytest.approx(2.0)


def test_mlp_matches_direct_recomputation():
    rng = np.random.default_rng(7)
    p = rand_mlp(rng, (5, 4, 1))
    x = rng.normal(size=(4, 5))
    logits, _ = mlp_forward(x, p, mode="infer")
    # independent straightforward path
    h = np.maximum(x @ p.layers[0].w + p.layers[0].b, 0.0)
    expected = (h @ p.layers[1].w + p.layers[1].b)[:, 0]
    np.testing.assert_allclose(logits, expected, atol=1e-10)


def test_mlp_dimension_mismatch():
    p = MlpParams([LinearLayer(np.zeros((3, 1)), np.zeros(1), "identity")])
    with pytest.raises(ConfigError):
        mlp_forward(np.zeros((2, 4)), p)


def test_mlp_nonfinite_activation_names_layer():
    p = MlpParams([LinearLayer(np.array([[1e308]]), np.zeros(1), "identity")])
    with pytest.raises(NumericError, match="layer 0"):
        mlp_forward(np.array([[1e308], [1e308]]), p, mode="infer")


def test_bn_train_requires_batch_of_two():
    p = MlpParams([LinearLayer(np.zeros((2, 1)), np.zeros(1), "identity")])
    bn = [BatchNormState.fresh(2)]
    with pytest.raises(ConfigError):
        mlp_forward(np.zeros((1, 2)), p, bn=bn, mode="train")


def test_bn_infer_never_mutates_running_stats():
    bn = BatchNormState.fresh(3)
    bn.running_mean[:] = 0.5
    bn.running_var[:] = 2.0
    before = (bn.running_mean.copy(), bn.running_var.copy())
    rng = np.random.default_rng(0)
    bn_forward(rng.normal(size=(6, 3)), bn, "infer")
    np.testing.assert_array_equal(bn.running_mean, before[0])
    np.testing.assert_array_equal(bn.running_var, before[1])


def test_bn_train_updates_running_stats():
    bn = BatchNormState.fresh(2, momentum=0.5)
    x = np.array([[0.0, 2.0], [2.0, 4.0]])
    bn_forward(x, bn, "train")
    np.testing.assert_allclose(bn.running_mean, [0.5, 1.5])


# ---------------------------------------------------------------------------
# mlp backward


def test_backward_zero_dlogits_gives_zero_grads():
    rng = np.random.default_rng(1)
    p = rand_mlp(rng, (3, 4, 1))
    _, cache = mlp_forward(rng.normal(size=(5, 3)), p, mode="train")
    grads, dx = mlp_backward(cache, np.zeros(5))
    assert all(np.all(g == 0.0) for g in grads.values())
    assert np.all(dx == 0.0)


def test_backward_single_linear_closed_form():
    p = MlpParams([LinearLayer(np.array([[0.3], [0.7]]), np.zeros(1), "identity")])
    x = np.array([[1.5, -2.0]])
    _, cache = mlp_forward(x, p, mode="train")
    grads, _ = mlp_backward(cache, np.array([0.25]))
    np.testing.assert_allclose(grads["layer0.w"], x.T * 0.25)


def test_backward_finite_difference():
    rng = np.random.default_rng(2)
    p = rand_mlp(rng, (4, 6, 1))
    bn = [BatchNormState.fresh(4), None]
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 2, size=6).astype(float)

    def loss():
        bn_copy = [BatchNormState.fresh(4), None]
        bn_copy[0].gamma = bn[0].gamma
        bn_copy[0].beta = bn[0].beta
        logits, _ = mlp_forward(x, p, bn=bn_copy, mode="train")
        l, _ = bce_loss(y, sigmoid(logits))
        return l.sum()

    logits, cache = mlp_forward(x, p, bn=[BatchNormState.fresh(4), None],
                                mode="train")
    _, dlogit = bce_loss(y, sigmoid(logits))
    grads, _ = mlp_backward(cache, dlogit)
    for name, arr in (("layer0.w", p.layers[0].w), ("layer0.b", p.layers[0].b),
                      ("layer1.w", p.layers[1].w), ("bn0.gamma", bn[0].gamma),
                      ("bn0.beta", bn[0].beta)):
        assert_close_rel(grads[name], central_diff(loss, arr), rel=1e-4)


def test_stale_cache_detected():
    rng = np.random.default_rng(3)
    p = rand_mlp(rng, (3, 1))
    _, cache = mlp_forward(rng.normal(size=(2, 3)), p, mode="train")
    p.version += 1  # simulate an optimizer step
    with pytest.raises(StaleCacheError):
        mlp_backward(cache, np.ones(2))


# ---------------------------------------------------------------------------
# attention and pooling


def test_attention_identical_rows():
    rng = np.random.default_rng(4)
    d = 5
    p = rand_attn(rng, d)
    v = rng.normal(size=d)
    e = np.tile(v, (3, 1))
    out = self_attention(e, p)
    for row in out:
        np.testing.assert_allclose(row, v @ p.wv, atol=1e-12)


def test_attention_uniform_softmax_gives_column_mean():
    rng = np.random.default_rng(5)
    d = 4
    p = AttentionParams(np.zeros((d, d)), np.zeros((d, d)), np.eye(d))
    e = rng.normal(size=(3, d))
    out = self_attention(e, p)
    for row in out:
        np.testing.assert_allclose(row, e.mean(axis=0), atol=1e-12)


def test_attention_matches_stepwise_oracle():
    rng = np.random.default_rng(6)
    d = 4
    p = rand_attn(rng, d)
    e = rng.normal(size=(3, d))
    out = self_attention(e, p)
    q, k, v = e @ p.wq, e @ p.wk, e @ p.wv
    s = q @ k.T / np.sqrt(d)
    a = np.exp(s)
    a = a / a.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out, a @ v, atol=1e-10)


def test_attention_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = int(rng.integers(2, 9))
        _, cache = attention_forward(rng.normal(size=(3, d)), rand_attn(rng, d))
        a = cache[4]
        np.testing.assert_allclose(a.sum(axis=2), 1.0, atol=1e-12)


def test_attention_requires_three_rows():
    p = rand_attn(np.random.default_rng(0), 3)
    with pytest.raises(ConfigError):
        self_attention(np.zeros((2, 3)), p)


def test_attention_gradients_finite_difference():
    rng = np.random.default_rng(8)
    d = 4
    p = rand_attn(rng, d)
    e = rng.normal(size=(3, d))
    w = rng.normal(size=(3, d))  # fixed projection to a scalar loss

    def loss():
        out, _ = attention_forward(e, p)
        return float((out * w).sum())

    out, cache = attention_forward(e, p)
    grads, de = attention_backward(cache, w)
    for name, arr in (("wq", p.wq), ("wk", p.wk), ("wv", p.wv)):
        assert_close_rel(grads[name], central_diff(loss, arr))
    assert_close_rel(de, central_diff(loss, e))


def test_mean_pool():
    np.testing.assert_array_equal(
        mean_pool(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])), [3.0, 4.0])
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(mean_pool(np.tile(v, (3, 1))), v)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 8))
    np.testing.assert_array_equal(mean_pool(x), x.sum(axis=0) / 3.0)


# ---------------------------------------------------------------------------
# loss


def test_bce_values():
    loss, _ = bce_loss(1.0, 1.0 - 1e-7)
    assert loss == pytest.approx(1e-7, rel=1e-2)
    loss, _ = bce_loss(0.0, 0.5)
    assert loss == pytest.approx(np.log(2.0), abs=1e-9)


def test_bce_rejects_bad_labels():
    with pytest.raises(DataError):
        bce_loss(0.5, 0.5)


def test_bce_gradient_finite_difference():
    rng = np.random.default_rng(10)
    for _ in range(20):
        z = np.array([rng.normal()])
        y = float(rng.integers(0, 2))
        _, d = bce_loss(y, sigmoid(z))

        def loss(zv):
            l, _ = bce_loss(y, sigmoid(np.array([zv])))
            return float(l[0])

        h = 1e-6
        num = (loss(z[0] + h) - loss(z[0] - h)) / (2 * h)
        assert abs(d[0] - num) / max(abs(num), 1e-8) < 1e-6


# ---------------------------------------------------------------------------
# adam


def test_adam_zero_gradients_leave_params_unchanged():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState(learning_rate=0.1)
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([0.0, 0.0])}
    st = AdamState(learning_rate=0.1)
    adam_step(p, {"w": np.array([3.0, -0.5])}, st)
    np.testing.assert_allclose(p["w"], [-0.1, 0.1], rtol=1e-6)


def test_adam_converges_on_quadratic():
    # reference recurrence, written independently of adam_step
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x_ref, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        g = 2 * (x_ref - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x_ref -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

    p = {"x": np.array([0.0])}
    st = AdamState(learning_rate=0.1)
    for _ in range(100):
        adam_step(p, {"x": 2 * (p["x"] - 3.0)}, st)
    assert abs(p["x"][0] - x_ref) < 1e-12
    assert abs(p["x"][0] - 3.0) < 0.05


def test_adam_rejects_nan_gradient():
    st = AdamState(learning_rate=0.1)
    with pytest.raises(NumericError, match="w"):
        adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, st)


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(42)
        p = rand_mlp(rng, (3, 4, 1))
        st = AdamState(learning_rate=0.01)
        x = rng.normal(size=(8, 3))
        y = rng.integers(0, 2, size=8).astype(float)
        for _ in range(10):
            logits, cache = mlp_forward(x, p, mode="train")
            _, dlogit = bce_loss(y, sigmoid(logits))
            grads, _ = mlp_backward(cache, dlogit / 8)
            params = {f"layer{i}.{n}": getattr(l, n)
                      for i, l in enumerate(p.layers) for n in ("w", "b")}
            adam_step(params, grads, st)
            p.version += 1
        return np.concatenate([l.w.ravel() for l in p.layers])

    a, b = run(), run()
    assert np.array_equal(a, b)
