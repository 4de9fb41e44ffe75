"""Minimal deterministic neural-network kernel.

Forward, manual backward, and Adam for the small MLP / batch-norm /
single-head attention blocks the tiny and complete CTR models are built
from. Everything is float64 numpy; snapshots downcast to float32 at the
storage boundary, not here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, NumericError, StaleCacheError

PROB_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LinearLayer:
    w: np.ndarray  # (in_dim, out_dim)
    b: np.ndarray  # (out_dim,)
    activation: str = "relu"  # "relu" | "identity"


@dataclass
class MlpParams:
    layers: list[LinearLayer]
    # bumped whenever an optimizer mutates the weights; lets backward detect
    # a cache that no longer matches the parameters it was built from
    version: int = 0

    @property
    def in_dim(self) -> int:
        return self.layers[0].w.shape[0]

    def validate(self) -> None:
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.w.shape[1] != b.w.shape[0]:
                raise ConfigError(
                    f"layer {i} out_dim {a.w.shape[1]} != layer {i + 1} "
                    f"in_dim {b.w.shape[0]}"
                )
        if self.layers[-1].w.shape[1] != 1:
            raise ConfigError("final layer must have out_dim 1")


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def fresh(cls, dim: int, momentum: float = 0.1, epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            momentum=momentum,
            epsilon=epsilon,
        )

    def is_fresh(self) -> bool:
        return bool(
            np.all(self.gamma == 1.0)
            and np.all(self.beta == 0.0)
            and np.all(self.running_mean == 0.0)
            and np.all(self.running_var == 1.0)
        )


@dataclass
class AttentionParams:
    wq: np.ndarray  # (d, d)
    wk: np.ndarray
    wv: np.ndarray

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


@dataclass
class AdamState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def slot(self, name: str, shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        return self.m[name], self.v[name]


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int,
                activation: str = "relu", scale: float = 0.05) -> LinearLayer:
    """Uniform(-scale, scale) weights, zero bias."""
    w = rng.uniform(-scale, scale, size=(in_dim, out_dim))
    return LinearLayer(w=w, b=np.zeros(out_dim), activation=activation)


# ---------------------------------------------------------------------------
# batch norm


def bn_forward(x: np.ndarray, bn: BatchNormState, mode: str):
    """Returns (out, cache). Running stats mutate only in train mode."""
    if mode == "train":
        if x.shape[0] < 2:
            raise ConfigError("batch norm in train mode needs batch >= 2")
        mean = x.mean(axis=0)
        xc = x - mean
        var = np.mean(xc * xc, axis=0)
        inv_std = 1.0 / np.sqrt(var + bn.epsilon)
        xhat = xc * inv_std
        bn.running_mean *= 1.0 - bn.momentum
        bn.running_mean += bn.momentum * mean
        bn.running_var *= 1.0 - bn.momentum
        bn.running_var += bn.momentum * var
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.epsilon)
        xhat = (x - bn.running_mean) * inv_std
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    out = bn.gamma * xhat + bn.beta
    cache = (xhat, inv_std, bn.gamma)
    return out, cache


def bn_backward(cache, dout: np.ndarray):
    """Gradients for a train-mode bn_forward. Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma = cache
    n = dout.shape[0]
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpCache:
    params: MlpParams
    version: int
    layer_inputs: list[np.ndarray]  # post-BN input to each linear layer
    pre_acts: list[np.ndarray]
    bn_caches: list
    bns: list


def mlp_forward(x: np.ndarray, p: MlpParams, bn=None, mode: str = "train"):
    """Run the MLP, returning (logits, cache).

    ``bn`` is an optional list with one entry per layer (None allowed per
    slot); bn[i] normalizes the input of layer i, which realizes input-BN
    plus BN after each hidden activation.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.in_dim:
        raise ConfigError(
            f"input shape {x.shape} incompatible with MLP in_dim {p.in_dim}"
        )
    bns = list(bn) if bn is not None else [None] * len(p.layers)
    if len(bns) != len(p.layers):
        raise ConfigError("bn list length must match layer count")

    layer_inputs, pre_acts, bn_caches = [], [], []
    h = x
    for i, layer in enumerate(p.layers):
        if bns[i] is not None:
            h, c = bn_forward(h, bns[i], mode)
            bn_caches.append(c)
        else:
            bn_caches.append(None)
        layer_inputs.append(h)
        z = h @ layer.w + layer.b
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite activation at layer {i}")
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z

    logits = h[:, 0]
    cache = MlpCache(p, p.version, layer_inputs, pre_acts, bn_caches, bns)
    return logits, cache


def mlp_backward(cache: MlpCache, dlogits: np.ndarray):
    """Backprop through a train-mode forward. Returns (grads, dx).

    grads keys: ``layer{i}.w``, ``layer{i}.b`` and, where BN is present,
    ``bn{i}.gamma``, ``bn{i}.beta``.
    """
    p = cache.params
    if cache.version != p.version:
        raise StaleCacheError("MLP parameters changed since forward pass")
    grads: dict[str, np.ndarray] = {}
    dh = np.asarray(dlogits, dtype=np.float64)[:, None]
    for i in range(len(p.layers) - 1, -1, -1):
        layer = p.layers[i]
        dz = dh
        if layer.activation == "relu":
            dz = dh * (cache.pre_acts[i] > 0.0)
        grads[f"layer{i}.w"] = cache.layer_inputs[i].T @ dz
        grads[f"layer{i}.b"] = dz.sum(axis=0)
        dh = dz @ layer.w.T
        if cache.bn_caches[i] is not None:
            dh, dgamma, dbeta = bn_backward(cache.bn_caches[i], dh)
            grads[f"bn{i}.gamma"] = dgamma
            grads[f"bn{i}.beta"] = dbeta
    return grads, dh


# ---------------------------------------------------------------------------
# attention over the three monthly history slots


def attention_forward(e: np.ndarray, p: AttentionParams):
    """Single-head scaled dot-product attention over (..., 3, d) inputs.

    Accepts a single (3, d) matrix or a batch (B, 3, d); returns
    (out, cache) with out shaped like ``e``.
    """
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 2
    if single:
        e = e[None]
    if e.shape[1] != 3:
        raise ConfigError(f"attention expects 3 history rows, got {e.shape[1]}")
    d = p.dim
    if e.shape[2] != d:
        raise ConfigError(f"embedding dim {e.shape[2]} != attention dim {d}")

    q = e @ p.wq
    k = e @ p.wk
    v = e @ p.wv
    scale = 1.0 / np.sqrt(d)
    s = (q @ k.transpose(0, 2, 1)) * scale
    s -= s.max(axis=2, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=2, keepdims=True)
    out = a @ v
    cache = (e, q, k, v, a, p, scale, single)
    return (out[0] if single else out), cache


def attention_backward(cache, dout: np.ndarray):
    """Returns (grads, de) with grads keys wq, wk, wv."""
    e, q, k, v, a, p, scale, single = cache
    dout = np.asarray(dout, dtype=np.float64)
    if single:
        dout = dout[None]
    at = a.transpose(0, 2, 1)
    dv = at @ dout
    da = dout @ v.transpose(0, 2, 1)
    ds = a * (da - (da * a).sum(axis=2, keepdims=True))
    dq = (ds @ k) * scale
    dk = (ds.transpose(0, 2, 1) @ q) * scale
    d = p.dim
    ef = e.reshape(-1, d)
    grads = {
        "wq": ef.T @ dq.reshape(-1, d),
        "wk": ef.T @ dk.reshape(-1, d),
        "wv": ef.T @ dv.reshape(-1, d),
    }
    de = dq @ p.wq.T + dk @ p.wk.T + dv @ p.wv.T
    if single:
        de = de[0]
    return grads, de


def self_attention(e: np.ndarray, p: AttentionParams) -> np.ndarray:
    """softmax(QK^T/sqrt(d)) V over the three stacked monthly embeddings."""
    e = np.asarray(e)
    if e.ndim != 2 or e.shape[0] != 3:
        raise ConfigError(f"expected a 3xd matrix, got shape {e.shape}")
    out, _ = attention_forward(e, p)
    return out


def mean_pool(x: np.ndarray) -> np.ndarray:
    """Column-wise mean over the 3 history rows; batched over (B, 3, d)."""
    x = np.asarray(x, dtype=np.float64)
    axis = x.ndim - 2
    if x.shape[axis] != 3:
        raise ConfigError(f"expected 3 rows to pool, got {x.shape[axis]}")
    return x.mean(axis=axis)


# ---------------------------------------------------------------------------
# loss and optimizer


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(y, p_hat):
    """Binary cross entropy and its gradient w.r.t. the logit.

    Works elementwise on arrays; p_hat is clamped away from {0, 1} before
    the log. Returns (loss, dloss_dlogit) with dloss_dlogit = p_hat - y.
    """
    y = np.asarray(y, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("labels must be 0 or 1")
    pc = np.clip(p_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -y * np.log(pc) - (1.0 - y) * np.log(1.0 - pc)
    return loss, p_hat - y


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One bias-corrected Adam step, in place. Increments state.t once."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name in sorted(params):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m, v = state.slot(name, params[name].shape)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


def adam_step_rows(table: np.ndarray, grad_rows: np.ndarray, rows: np.ndarray,
                   state: AdamState, name: str) -> None:
    """Lazy per-row Adam update for an embedding table.

    Only the given rows (unique indices) move; untouched rows keep their
    moments, so ids that never appear in a window are bitwise unchanged.
    Shares the caller-advanced global step counter for bias correction.
    """
    if not np.all(np.isfinite(grad_rows)):
        raise NumericError(f"non-finite gradient for parameter {name!r}")
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    m, v = state.slot(name, table.shape)
    mr = state.beta1 * m[rows] + (1.0 - state.beta1) * grad_rows
    vr = state.beta2 * v[rows] + (1.0 - state.beta2) * grad_rows * grad_rows
    m[rows] = mr
    v[rows] = vr
    table[rows] -= state.learning_rate * (mr / c1) / (np.sqrt(vr / c2) + state.epsilon)
