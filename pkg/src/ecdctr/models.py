"""The tiny pre-training model and the complete CTR model.

The tiny model is five key-feature embedding tables plus a one-hidden-
layer MLP and exists to produce monthly user/item embedding snapshots.
The complete model (shared structure between the natural-domain
pre-training run and the ad-domain fine-tune) adds the full feature set,
batch norm, and the pooled user/item history path.
"""

from __future__ import annotations

import struct

import numpy as np

from . import nncore
from .datagen import (
    COMPLETE_FIELDS,
    CONTEXT_FIELDS,
    CONTEXT_VOCAB,
    KEY_FIELDS,
    N_CATEGORIES,
    PROFILE_BUCKETS,
    WorldConfig,
)
from .errors import ConfigError, DataError, FormatError, TransferError
from .nncore import (
    AdamState,
    AttentionParams,
    BatchNormState,
    MlpParams,
    adam_step,
    adam_step_rows,
    attention_backward,
    attention_forward,
    bce_loss,
    init_linear,
    mean_pool,
    mlp_backward,
    mlp_forward,
    sigmoid,
)

TRANSFER_VARIANTS = ("all", "embeddings_only", "mlp_wo_bn", "all_with_bn")


def field_cardinalities(world_config: WorldConfig) -> dict[str, int]:
    card = {
        "user_id": world_config.users,
        "item_id": world_config.items,
        "category_id": N_CATEGORIES,
        "user_profile": PROFILE_BUCKETS,
        "item_profile": PROFILE_BUCKETS,
    }
    for f in CONTEXT_FIELDS:
        card[f] = CONTEXT_VOCAB
    return card


def _init_table(rng: np.random.Generator, cardinality: int, d: int) -> np.ndarray:
    # one extra reserved row for out-of-vocabulary values
    return rng.uniform(-0.05, 0.05, size=(cardinality + 1, d))


def _rows_for(values: np.ndarray, cardinality: int) -> np.ndarray:
    """Map raw categorical values to table rows; unseen -> the OOV row."""
    rows = np.asarray(values, dtype=np.int64)
    return np.where((rows >= 0) & (rows < cardinality), rows, cardinality)


def _as_batch(sample) -> np.ndarray:
    """Accept a single structured record or a structured array."""
    arr = np.asarray(sample)
    return arr[None] if arr.ndim == 0 else arr


class TinyModel:
    """Key-feature embedding tables + shallow MLP, no batch norm."""

    fields = KEY_FIELDS

    def __init__(self, cardinalities: dict[str, int], d: int = 16,
                 hidden: int = 32, learning_rate: float = 0.01, seed: int = 0):
        self.cardinalities = {f: cardinalities[f] for f in self.fields}
        self.d = d
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x71EE]))
        self.tables = {f: _init_table(rng, self.cardinalities[f], d)
                       for f in self.fields}
        in_dim = len(self.fields) * d
        self.mlp = MlpParams([
            init_linear(rng, in_dim, hidden, "relu"),
            init_linear(rng, hidden, 1, "identity"),
        ])
        self.adam = AdamState(learning_rate=learning_rate)

    def _input(self, batch: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        rows = {f: _rows_for(batch[f], self.cardinalities[f]) for f in self.fields}
        x = np.concatenate([self.tables[f][rows[f]] for f in self.fields], axis=1)
        return x, rows

    def predict(self, batch: np.ndarray) -> np.ndarray:
        x, _ = self._input(_as_batch(batch))
        logits, _ = mlp_forward(x, self.mlp, mode="infer")
        return sigmoid(logits)

    def train_step(self, batch: np.ndarray, labels: np.ndarray) -> float:
        n = len(batch)
        x, rows = self._input(batch)
        logits, cache = mlp_forward(x, self.mlp, mode="train")
        p_hat = sigmoid(logits)
        losses, dlogit = bce_loss(labels, p_hat)
        grads, dx = mlp_backward(cache, dlogit / n)

        dense = {f"mlp.{k}": g for k, g in grads.items()}
        params = {f"mlp.layer{i}.w": l.w for i, l in enumerate(self.mlp.layers)}
        params.update({f"mlp.layer{i}.b": l.b for i, l in enumerate(self.mlp.layers)})
        adam_step(params, dense, self.adam)
        self.mlp.version += 1

        for j, f in enumerate(self.fields):
            sl = dx[:, j * self.d:(j + 1) * self.d]
            uniq, inv = np.unique(rows[f], return_inverse=True)
            grad_rows = np.zeros((len(uniq), self.d))
            np.add.at(grad_rows, inv, sl)
            adam_step_rows(self.tables[f], grad_rows, uniq, self.adam, f"table.{f}")
        return float(losses.mean())

    def user_table(self) -> np.ndarray:
        return self.tables["user_id"][:-1]  # drop the OOV row

    def item_table(self) -> np.ndarray:
        return self.tables["item_id"][:-1]


def tiny_forward(model: TinyModel, sample) -> float:
    """Click probability for one sample from its five key fields."""
    batch = _as_batch(sample)
    for f in model.fields:
        if f not in batch.dtype.names:
            raise DataError(f"sample missing key field {f!r}")
    return float(model.predict(batch)[0])


class CompleteModel:
    """Full-feature CTR model with BN and the pooled history path."""

    def __init__(self, cardinalities: dict[str, int], d: int = 16,
                 hidden: tuple[int, ...] = (128, 64, 32),
                 use_history: bool = True, history_months: int = 3,
                 share_attention: bool = False, learning_rate: float = 0.001,
                 bn_momentum: float = 0.1, seed: int = 0):
        self.fields = COMPLETE_FIELDS
        self.cardinalities = {f: cardinalities[f] for f in self.fields}
        self.d = d
        self.hidden = tuple(hidden)
        self.use_history = use_history
        self.history_months = history_months
        self.share_attention = share_attention
        self.learning_rate = learning_rate
        self.bn_momentum = bn_momentum

        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC09]))
        self.tables = {f: _init_table(rng, self.cardinalities[f], d)
                       for f in self.fields}

        def attn() -> AttentionParams:
            return AttentionParams(
                wq=rng.uniform(-0.05, 0.05, size=(d, d)),
                wk=rng.uniform(-0.05, 0.05, size=(d, d)),
                wv=rng.uniform(-0.05, 0.05, size=(d, d)),
            )

        if use_history:
            self.attn_user = attn()
            self.attn_item = self.attn_user if share_attention else attn()
        else:
            self.attn_user = self.attn_item = None

        in_dim = len(self.fields) * d + (2 * d if use_history else 0)
        dims = (in_dim,) + self.hidden
        layers = [init_linear(rng, dims[i], dims[i + 1], "relu")
                  for i in range(len(self.hidden))]
        layers.append(init_linear(rng, dims[-1], 1, "identity"))
        self.mlp = MlpParams(layers)
        # input BN plus BN after every hidden activation
        self.bns = [BatchNormState.fresh(dims[i], momentum=bn_momentum)
                    for i in range(len(layers))]
        self.adam = AdamState(learning_rate=learning_rate)

    def init_args(self) -> dict:
        return dict(d=self.d, hidden=self.hidden, use_history=self.use_history,
                    history_months=self.history_months,
                    share_attention=self.share_attention,
                    learning_rate=self.learning_rate,
                    bn_momentum=self.bn_momentum)

    # -- forward ----------------------------------------------------------

    def _field_input(self, batch: np.ndarray):
        rows = {f: _rows_for(batch[f], self.cardinalities[f]) for f in self.fields}
        x = np.concatenate([self.tables[f][rows[f]] for f in self.fields], axis=1)
        return x, rows

    def _truncate_history(self, hist: np.ndarray) -> np.ndarray:
        if self.history_months >= 3:
            return hist
        out = np.array(hist, dtype=np.float64)
        out[:, self.history_months:, :] = 0.0
        return out

    def _forward(self, batch, hist_u, hist_i, mode, pooled=None):
        x, rows = self._field_input(batch)
        att_caches = None
        if self.use_history:
            if pooled is None:
                hu = self._truncate_history(np.asarray(hist_u, dtype=np.float64))
                hi = self._truncate_history(np.asarray(hist_i, dtype=np.float64))
                if hu.shape[2] != self.d or hi.shape[2] != self.d:
                    raise ConfigError("history dim does not match embedding dim")
                au, cu = attention_forward(hu, self.attn_user)
                ai, ci = attention_forward(hi, self.attn_item)
                pooled_u, pooled_i = mean_pool(au), mean_pool(ai)
                att_caches = (cu, ci)
            else:
                pooled_u, pooled_i = pooled
            x = np.concatenate([x, pooled_u, pooled_i], axis=1)
        logits, cache = mlp_forward(x, self.mlp, bn=self.bns, mode=mode)
        return logits, (cache, rows, att_caches)

    def predict(self, batch, hist_u=None, hist_i=None) -> np.ndarray:
        batch = _as_batch(batch)
        if self.use_history and hist_u is None:
            raise ConfigError("model uses history features; pass hist_u/hist_i")
        logits, _ = self._forward(batch, hist_u, hist_i, "infer")
        return sigmoid(logits)

    def predict_pooled(self, batch, pooled_u, pooled_i) -> np.ndarray:
        """Serve from pre-merged tables: pooled vectors enter directly."""
        batch = _as_batch(batch)
        logits, _ = self._forward(batch, None, None, "infer",
                                  pooled=(np.asarray(pooled_u, dtype=np.float64),
                                          np.asarray(pooled_i, dtype=np.float64)))
        return sigmoid(logits)

    # -- training ---------------------------------------------------------

    def dense_params(self) -> dict[str, np.ndarray]:
        p: dict[str, np.ndarray] = {}
        for i, l in enumerate(self.mlp.layers):
            p[f"mlp.layer{i}.w"] = l.w
            p[f"mlp.layer{i}.b"] = l.b
        for i, bn in enumerate(self.bns):
            p[f"bn{i}.gamma"] = bn.gamma
            p[f"bn{i}.beta"] = bn.beta
        if self.use_history:
            p["attn_u.wq"] = self.attn_user.wq
            p["attn_u.wk"] = self.attn_user.wk
            p["attn_u.wv"] = self.attn_user.wv
            if not self.share_attention:
                p["attn_i.wq"] = self.attn_item.wq
                p["attn_i.wk"] = self.attn_item.wk
                p["attn_i.wv"] = self.attn_item.wv
        return p

    def train_step(self, batch, labels, hist_u=None, hist_i=None) -> float:
        batch = _as_batch(batch)
        n = len(batch)
        logits, (cache, rows, att_caches) = self._forward(
            batch, hist_u, hist_i, "train")
        p_hat = sigmoid(logits)
        losses, dlogit = bce_loss(labels, p_hat)
        grads, dx = mlp_backward(cache, dlogit / n)

        dense_grads = {f"mlp.layer{i}.w": grads[f"layer{i}.w"]
                       for i in range(len(self.mlp.layers))}
        dense_grads.update({f"mlp.layer{i}.b": grads[f"layer{i}.b"]
                            for i in range(len(self.mlp.layers))})
        for i in range(len(self.bns)):
            dense_grads[f"bn{i}.gamma"] = grads[f"bn{i}.gamma"]
            dense_grads[f"bn{i}.beta"] = grads[f"bn{i}.beta"]

        if self.use_history:
            d = self.d
            base = len(self.fields) * d
            dpool_u = dx[:, base:base + d]
            dpool_i = dx[:, base + d:base + 2 * d]
            cu, ci = att_caches
            gu, _ = attention_backward(cu, np.repeat(dpool_u[:, None, :], 3, axis=1) / 3.0)
            gi, _ = attention_backward(ci, np.repeat(dpool_i[:, None, :], 3, axis=1) / 3.0)
            if self.share_attention:
                for k in ("wq", "wk", "wv"):
                    dense_grads[f"attn_u.{k}"] = gu[k] + gi[k]
            else:
                for k in ("wq", "wk", "wv"):
                    dense_grads[f"attn_u.{k}"] = gu[k]
                    dense_grads[f"attn_i.{k}"] = gi[k]

        adam_step(self.dense_params(), dense_grads, self.adam)
        self.mlp.version += 1

        for j, f in enumerate(self.fields):
            sl = dx[:, j * self.d:(j + 1) * self.d]
            uniq, inv = np.unique(rows[f], return_inverse=True)
            grad_rows = np.zeros((len(uniq), self.d))
            np.add.at(grad_rows, inv, sl)
            adam_step_rows(self.tables[f], grad_rows, uniq, self.adam, f"table.{f}")
        return float(losses.mean())

    # -- parameter tree ---------------------------------------------------

    def param_tree(self) -> dict[str, np.ndarray]:
        """Every named tensor, BN state included (live views)."""
        tree = {f"table.{f}": t for f, t in self.tables.items()}
        tree.update(self.dense_params())
        for i, bn in enumerate(self.bns):
            tree[f"bn{i}.running_mean"] = bn.running_mean
            tree[f"bn{i}.running_var"] = bn.running_var
        return tree


def is_bn_tensor(name: str) -> bool:
    return name.startswith("bn")


def transfer_parameters(source: CompleteModel, variant: str,
                        seed: int = 0) -> CompleteModel:
    """Build a fresh model and load the chosen parameter subset from source.

    ``all`` (the default transfer) copies embeddings, MLP, and attention
    while re-initializing every BN state and the optimizer;
    ``embeddings_only`` / ``mlp_wo_bn`` copy just that subset;
    ``all_with_bn`` additionally carries the BN state over.
    """
    if variant not in TRANSFER_VARIANTS:
        raise ConfigError(f"unknown transfer variant {variant!r}")
    target = CompleteModel(source.cardinalities, seed=seed, **source.init_args())

    src_tree, tgt_tree = source.param_tree(), target.param_tree()
    for name in sorted(src_tree):
        if name not in tgt_tree or src_tree[name].shape != tgt_tree[name].shape:
            raise TransferError(f"structural mismatch at parameter {name!r}")

    if variant == "embeddings_only":
        selected = [n for n in src_tree if n.startswith("table.")]
    elif variant == "mlp_wo_bn":
        selected = [n for n in src_tree if n.startswith("mlp.")]
    else:  # all, all_with_bn
        selected = [n for n in src_tree if variant == "all_with_bn" or not is_bn_tensor(n)]

    for name in selected:
        tgt_tree[name][...] = src_tree[name]
    return target


def complete_forward(model: CompleteModel, sample, history_u, history_i,
                     mode: str = "infer") -> float:
    """Score one sample given its (newest-first) user/item history triples."""
    hu = np.stack([np.asarray(v, dtype=np.float64) for v in history_u])[None]
    hi = np.stack([np.asarray(v, dtype=np.float64) for v in history_i])[None]
    batch = _as_batch(sample)
    logits, _ = model._forward(batch, hu, hi, mode)
    return float(sigmoid(logits)[0])


# ---------------------------------------------------------------------------
# checkpoints: named-tensor container, float32 payloads
#
# magic "ECKP" | version u16 | tensor count u32 | per tensor:
#   name_len u16 + UTF-8 name | flags u8 (bit 0: BN running stat) |
#   ndim u8 | ndim x dim u32 | float32 payload

CKPT_MAGIC = b"ECKP"
CKPT_VERSION = 1


def save_checkpoint(model: CompleteModel, path) -> None:
    tree = model.param_tree()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(tree)))
        for name in sorted(tree):
            arr = np.ascontiguousarray(tree[name], dtype="<f4")
            nb = name.encode("utf-8")
            flags = 1 if "running_" in name else 0
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<BB", flags, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, cardinalities: dict[str, int],
                    init_args: dict, seed: int = 0) -> CompleteModel:
    model = CompleteModel(cardinalities, seed=seed, **init_args)
    tree = model.param_tree()
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10 or head[:4] != CKPT_MAGIC:
            raise FormatError("bad checkpoint magic")
        version, count = struct.unpack("<HI", head[4:])
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            _flags, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape)
            if name not in tree:
                raise FormatError(f"unexpected tensor {name!r} in checkpoint")
            if tree[name].shape != data.shape:
                raise FormatError(f"shape mismatch for tensor {name!r}")
            tree[name][...] = data.astype(np.float64)
    return model
