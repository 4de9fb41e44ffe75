"""Versioned user/item embedding snapshot store.

Holds the month-tagged float32 tables produced by the tiny pre-training
model, keeps only the newest `retention_k` per side, answers history
lookups (newest month first), and can fold the three monthly tables into
a single serving table under fixed attention parameters.

On-disk format (little-endian):
    magic "ECDT" | version u16 | side u8 | month_tag u32 | dim u16 |
    count u64 | count records of (id u64, dim x float32), sorted by id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, InsufficientHistoryError, OrderingError
from .nncore import AttentionParams, attention_forward, mean_pool

MAGIC = b"ECDT"
FORMAT_VERSION = 1
SIDES = ("user", "item")
_HEADER = struct.Struct("<4sHBIHQ")


@dataclass
class EmbeddingSnapshot:
    side: str  # "user" | "item"
    month_tag: int
    dim: int
    ids: np.ndarray  # (n,) uint64, sorted
    vectors: np.ndarray  # (n, dim) float32

    def __post_init__(self):
        if self.side not in SIDES:
            raise ConfigError(f"side must be one of {SIDES}, got {self.side!r}")
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.shape != (len(self.ids), self.dim):
            raise ConfigError("vector block shape does not match ids/dim")
        order = np.argsort(self.ids, kind="stable")
        self.ids = self.ids[order]
        self.vectors = self.vectors[order]
        self._index = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise FormatError("duplicate id in snapshot")

    @classmethod
    def from_table(cls, side: str, month_tag: int, table: np.ndarray) -> "EmbeddingSnapshot":
        """Snapshot a dense (vocab, d) table; row index is the id."""
        return cls(side=side, month_tag=month_tag, dim=table.shape[1],
                   ids=np.arange(table.shape[0], dtype=np.uint64),
                   vectors=table.astype(np.float32))

    def get(self, id_: int) -> np.ndarray:
        """Vector for id, or zeros when absent."""
        row = self._index.get(int(id_))
        if row is None:
            return np.zeros(self.dim, dtype=np.float32)
        return self.vectors[row]

    def get_many(self, ids: np.ndarray) -> np.ndarray:
        """(len(ids), dim) float32 block, zero rows for missing ids."""
        out = np.zeros((len(ids), self.dim), dtype=np.float32)
        pos = np.searchsorted(self.ids, ids.astype(np.uint64))
        pos_c = np.minimum(pos, len(self.ids) - 1) if len(self.ids) else pos
        if len(self.ids):
            hit = self.ids[pos_c] == ids.astype(np.uint64)
            out[hit] = self.vectors[pos_c[hit]]
        return out

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingSnapshot)
            and self.side == other.side
            and self.month_tag == other.month_tag
            and self.dim == other.dim
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.vectors, other.vectors)
        )


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])


def save_snapshot(snapshot: EmbeddingSnapshot, path) -> None:
    records = np.empty(len(snapshot.ids), dtype=_record_dtype(snapshot.dim))
    records["id"] = snapshot.ids
    records["vec"] = snapshot.vectors
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, SIDES.index(snapshot.side),
                              snapshot.month_tag, snapshot.dim, len(snapshot.ids)))
        fh.write(records.tobytes())


def load_snapshot(path) -> EmbeddingSnapshot:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"truncated header at byte offset {len(head)}")
        magic, version, side_code, month_tag, dim, count = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} at byte offset 0")
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version} at byte offset 4")
        if side_code >= len(SIDES):
            raise FormatError(f"unknown side code {side_code} at byte offset 6")
        record = 8 + 4 * dim
        payload = fh.read(record * count)
        if len(payload) != record * count:
            raise FormatError(
                f"truncated payload at byte offset {_HEADER.size + len(payload)}")
        records = np.frombuffer(payload, dtype=_record_dtype(dim), count=count)
        ids = records["id"].copy()
        vectors = records["vec"].reshape(count, dim).copy()
        if count and np.any(ids[1:] <= ids[:-1]):
            bad = int(np.argmax(ids[1:] <= ids[:-1])) + 1
            raise FormatError(
                f"ids not strictly increasing at byte offset {_HEADER.size + bad * record}")
    return EmbeddingSnapshot(side=SIDES[side_code], month_tag=month_tag,
                             dim=dim, ids=ids, vectors=vectors)


def snapshot_file_size(count: int, dim: int) -> int:
    """Exact on-disk size for a snapshot with `count` entries."""
    return _HEADER.size + count * (8 + 4 * dim)


@dataclass
class SnapshotStore:
    retention_k: int = 3
    snapshots: dict[str, list[EmbeddingSnapshot]] = field(
        default_factory=lambda: {s: [] for s in SIDES})

    def put_snapshot(self, snapshot: EmbeddingSnapshot) -> list[EmbeddingSnapshot]:
        """Append a snapshot for its side, evicting beyond retention_k.

        Returns the evicted snapshots (so a disk-backed caller can unlink
        their files).
        """
        side_list = self.snapshots[snapshot.side]
        if side_list and snapshot.month_tag <= side_list[-1].month_tag:
            raise OrderingError(
                f"month_tag {snapshot.month_tag} not after latest "
                f"{side_list[-1].month_tag} for side {snapshot.side!r}")
        side_list.append(snapshot)
        evicted = []
        while len(side_list) > self.retention_k:
            evicted.append(side_list.pop(0))
        return evicted

    def tags(self, side: str) -> list[int]:
        return [s.month_tag for s in self.snapshots[side]]

    def warmed_up(self, side: str | None = None) -> bool:
        sides = [side] if side else list(SIDES)
        return all(len(self.snapshots[s]) >= 3 for s in sides)

    def _triple(self, side: str) -> list[EmbeddingSnapshot]:
        side_list = self.snapshots[side]
        if len(side_list) != 3:
            raise InsufficientHistoryError(
                f"need exactly 3 {side} snapshots, have {len(side_list)}")
        return side_list[::-1]  # newest first

    def lookup_history(self, side: str, id_: int) -> tuple[np.ndarray, ...]:
        """(emb_1, emb_2, emb_3): newest month first, zeros when absent."""
        return tuple(s.get(id_) for s in self._triple(side))

    def lookup_history_many(self, side: str, ids: np.ndarray,
                            months: int = 3) -> np.ndarray:
        """(len(ids), 3, dim) float64 history block, newest month first.

        `months` < 3 zero-fills the older slots (history-length ablation).
        """
        triple = self._triple(side)
        out = np.zeros((len(ids), 3, triple[0].dim))
        for j in range(min(months, 3)):
            out[:, j, :] = triple[j].get_many(ids)
        return out

    def merge_tables(self, side: str, attention: AttentionParams) -> "MergedTable":
        """Fold the three monthly tables into one via fixed attention+pool."""
        triple = self._triple(side)
        dim = triple[0].dim
        if attention.dim != dim:
            raise ConfigError(
                f"attention dim {attention.dim} != snapshot dim {dim}")
        union = np.unique(np.concatenate([s.ids for s in triple]))
        stacked = np.stack([s.get_many(union) for s in triple], axis=1)
        merged, _ = attention_forward(stacked.astype(np.float64), attention)
        vectors = mean_pool(merged).astype(np.float32)
        return MergedTable(
            side=side, dim=dim, ids=union, vectors=vectors,
            source_tags=tuple(s.month_tag for s in triple),
            attention_fingerprint=attention_fingerprint(attention))


def attention_fingerprint(p: AttentionParams) -> str:
    import hashlib

    h = hashlib.sha256()
    for arr in (p.wq, p.wk, p.wv):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


@dataclass
class MergedTable:
    side: str
    dim: int
    ids: np.ndarray
    vectors: np.ndarray  # (n, dim) float32
    source_tags: tuple[int, ...]
    attention_fingerprint: str

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self._index = {int(i): r for r, i in enumerate(self.ids)}

    def get(self, id_: int) -> np.ndarray:
        row = self._index.get(int(id_))
        if row is None:
            return np.zeros(self.dim, dtype=np.float32)
        return self.vectors[row]

    def get_many(self, ids: np.ndarray) -> np.ndarray:
        out = np.zeros((len(ids), self.dim), dtype=np.float32)
        for r, id_ in enumerate(ids):
            row = self._index.get(int(id_))
            if row is not None:
                out[r] = self.vectors[row]
        return out

    def save(self, path) -> None:
        """Same container as snapshots; month_tag = newest source tag.

        A plain-text `.provenance` sidecar records the source months and
        attention fingerprint.
        """
        snap = EmbeddingSnapshot(side=self.side, month_tag=max(self.source_tags),
                                 dim=self.dim, ids=self.ids, vectors=self.vectors)
        save_snapshot(snap, path)
        with open(str(path) + ".provenance", "w") as fh:
            fh.write(f"source_months={','.join(map(str, self.source_tags))}\n")
            fh.write(f"attention_fingerprint={self.attention_fingerprint}\n")
