"""
Interaction logs, k-core filtering and leave-one-out splits.

Input files hold one interaction per line, either tab-separated
``user<TAB>item<TAB>timestamp[<TAB>rating]`` or JSON objects with the Amazon
review fields ``reviewerID``, ``asin`` and ``unixReviewTime``. Gzipped files
are read transparently.

Item indices start at 1; 0 is the padding id everywhere in the package.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataFormatError, EmptyCoreError, EmptyLogError, InsufficientNegativesError


@dataclass
class InteractionLog:
    """Deduplicated (user, item, timestamp) records in file order.

    ``users`` holds dense 0-based user indices, ``items`` 1-based item
    indices; ``user_ids[u]`` and ``item_ids[i - 1]`` map back to external ids.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    user_ids: list
    item_ids: list

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_actions(self) -> int:
        return int(self.users.size)

    def stats(self) -> dict:
        return {"users": self.num_users, "items": self.num_items, "actions": self.num_actions}

    @classmethod
    def from_records(cls, records) -> "InteractionLog":
        """Build from (user_id, item_id, timestamp) tuples, assigning ids by first appearance."""
        user_vocab: dict = {}
        item_vocab: dict = {}
        seen = set()
        users, items, stamps = [], [], []
        for u, i, ts in records:
            key = (u, i, ts)
            if key in seen:
                continue
            seen.add(key)
            users.append(user_vocab.setdefault(u, len(user_vocab)))
            items.append(item_vocab.setdefault(i, len(item_vocab) + 1))
            stamps.append(ts)
        return cls(
            users=np.asarray(users, dtype=np.int64),
            items=np.asarray(items, dtype=np.int64),
            timestamps=np.asarray(stamps, dtype=np.int64),
            user_ids=list(user_vocab),
            item_ids=list(item_vocab),
        )

    def records(self):
        for u, i, ts in zip(self.users, self.items, self.timestamps):
            yield self.user_ids[u], self.item_ids[i - 1], int(ts)


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


def _detect_format(path: Path) -> str:
    suffixes = [s for s in path.suffixes if s != ".gz"]
    return "jsonl" if suffixes and suffixes[-1] in (".json", ".jsonl") else "tsv"


def _parse_tsv(line: str, lineno: int):
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) not in (3, 4):
        raise DataFormatError(f"expected 3 or 4 tab-separated fields, got {len(parts)}", lineno)
    user, item, ts = parts[:3]
    if not user or not item:
        raise DataFormatError("empty user or item id", lineno)
    try:
        return user, item, int(ts)
    except ValueError:
        raise DataFormatError(f"timestamp {ts!r} is not an integer", lineno) from None


def _parse_json(line: str, lineno: int):
    try:
        obj = json.loads(line)
        return str(obj["reviewerID"]), str(obj["asin"]), int(obj["unixReviewTime"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"bad review record ({exc.__class__.__name__}: {exc})", lineno) from None


def ingest(path, fmt: Optional[str] = None) -> InteractionLog:
    """Read an interaction file. ``fmt`` is "tsv", "jsonl" or None to guess from the suffix."""
    path = Path(path)
    fmt = fmt or _detect_format(path)
    if fmt not in ("tsv", "jsonl"):
        raise DataFormatError(f"unknown format {fmt!r}")
    parse = _parse_tsv if fmt == "tsv" else _parse_json

    def records():
        with _open_text(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    yield parse(line, lineno)

    log = InteractionLog.from_records(records())
    if log.num_actions == 0:
        raise EmptyLogError(f"{path} contains no interactions")
    return log


def k_core_filter(log: InteractionLog, k: int = 10) -> InteractionLog:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    keep = np.ones(log.num_actions, dtype=bool)
    while True:
        user_counts = np.bincount(log.users[keep], minlength=log.num_users)
        item_counts = np.bincount(log.items[keep], minlength=log.num_items + 1)
        new_keep = keep & (user_counts[log.users] >= k) & (item_counts[log.items] >= k)
        if new_keep.sum() == keep.sum():
            break
        keep = new_keep
    if not keep.any():
        raise EmptyCoreError(f"no interactions survive the {k}-core")
    records = (
        (log.user_ids[u], log.item_ids[i - 1], int(ts))
        for u, i, ts in zip(log.users[keep], log.items[keep], log.timestamps[keep])
    )
    return InteractionLog.from_records(records)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SequenceDataset:
    """Per-user chronological training sequences, held-out last items and eval negatives."""

    num_items: int
    train_seqs: list
    heldout: np.ndarray
    eval_negatives: np.ndarray
    seed: int
    user_ids: list = field(default_factory=list)
    item_ids: list = field(default_factory=list)
    _member_keys: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def num_users(self) -> int:
        return len(self.train_seqs)

    @property
    def vocab_size(self) -> int:
        return self.num_items + 1

    @property
    def num_actions(self) -> int:
        return int(sum(len(s) for s in self.train_seqs) + len(self.heldout))

    def full_sequence(self, user: int) -> np.ndarray:
        return np.append(self.train_seqs[user], self.heldout[user])

    def stats(self) -> dict:
        return {"users": self.num_users, "items": self.num_items, "actions": self.num_actions}

    def member_keys(self) -> np.ndarray:
        """Sorted ``user * (num_items + 1) + item`` for every item in every full sequence."""
        if self._member_keys is None:
            stride = self.num_items + 1
            keys = [u * stride + self.full_sequence(u) for u in range(self.num_users)]
            self._member_keys = np.unique(np.concatenate(keys)) if keys else np.zeros(0, np.int64)
        return self._member_keys

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = self.member_keys()
        q = np.asarray(users, dtype=np.int64) * (self.num_items + 1) + np.asarray(items, dtype=np.int64)
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return keys[pos] == q


def sample_train_negative(user_items, num_items: int, rng: np.random.Generator) -> int:
    """One item drawn uniformly from 1..num_items excluding ``user_items``."""
    excluded = set(int(i) for i in user_items)
    if sum(1 for i in excluded if 1 <= i <= num_items) >= num_items:
        raise InsufficientNegativesError("user has interacted with every item")
    while True:
        item = int(rng.integers(1, num_items + 1))
        if item not in excluded:
            return item


def sample_negatives(dataset: SequenceDataset, users: np.ndarray, rng: np.random.Generator, shape=None) -> np.ndarray:
    """Vectorised ``sample_train_negative``: one uniform non-member item per entry.

    ``users`` broadcasts against ``shape`` (default ``users.shape``).
    """
    users = np.asarray(users, dtype=np.int64)
    shape = users.shape if shape is None else tuple(shape)
    users = np.broadcast_to(users, shape)
    out = rng.integers(1, dataset.num_items + 1, size=shape)
    bad = dataset.contains(users, out)
    while bad.any():
        out[bad] = rng.integers(1, dataset.num_items + 1, size=int(bad.sum()))
        bad = dataset.contains(users, out)
    return out


def _sample_eval_negatives(seq: np.ndarray, num_items: int, count: int, rng: np.random.Generator) -> list:
    excluded = set(int(i) for i in seq)
    if num_items - len(excluded) < count:
        raise InsufficientNegativesError(
            f"only {num_items - len(excluded)} items outside a user's sequence, need {count}"
        )
    chosen: list = []
    taken = set()
    while len(chosen) < count:
        for item in rng.integers(1, num_items + 1, size=2 * (count - len(chosen)) + 8):
            item = int(item)
            if item in excluded or item in taken:
                continue
            taken.add(item)
            chosen.append(item)
            if len(chosen) == count:
                break
    return chosen


def build_split(log: InteractionLog, num_negatives: int = 100, seed: int = 0) -> SequenceDataset:
    """Leave-one-out split: each user's last interaction is held out for evaluation.

    Sequences are ordered by timestamp, ties kept in file order. Evaluation
    negatives are drawn without replacement from items the user never touched.
    """
    order = np.lexsort((np.arange(log.num_actions), log.timestamps, log.users))
    users, items = log.users[order], log.items[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    per_user = np.split(items, bounds)
    if len(per_user) != log.num_users:
        raise ValueError("log has users without interactions")
    short = [log.user_ids[u] for u, s in enumerate(per_user) if len(s) < 2]
    if short:
        raise ValueError(f"{len(short)} users have fewer than 2 interactions (e.g. {short[0]!r})")
    rng = np.random.default_rng(seed)
    negatives = np.zeros((log.num_users, num_negatives), dtype=np.int64)
    for u, seq in enumerate(per_user):
        negatives[u] = _sample_eval_negatives(seq, log.num_items, num_negatives, rng)
    return SequenceDataset(
        num_items=log.num_items,
        train_seqs=[s[:-1].copy() for s in per_user],
        heldout=np.array([s[-1] for s in per_user], dtype=np.int64),
        eval_negatives=negatives,
        seed=seed,
        user_ids=list(log.user_ids),
        item_ids=list(log.item_ids),
    )


# ---------------------------------------------------------------------------
# binary split files
# ---------------------------------------------------------------------------

SPLIT_MAGIC = b"MRIFSPLT"
SPLIT_VERSION = 1
_HEADER = struct.Struct("<8sIQIIQI")


def write_split(dataset: SequenceDataset, path) -> None:
    """Serialise a dataset.

    Layout (little-endian): header ``magic[8] version:u32 seed:u64
    num_users:u32 num_items:u32 num_actions:u64 num_negatives:u32``, then
    int32 arrays ``train_lengths[U]``, ``train_items[sum]``, ``heldout[U]``,
    ``negatives[U * K]``, then ``u64`` length + UTF-8 JSON
    ``{"user_ids": [...], "item_ids": [...]}``.
    """
    lengths = np.array([len(s) for s in dataset.train_seqs], dtype="<i4")
    flat = np.concatenate(dataset.train_seqs).astype("<i4") if dataset.train_seqs else np.zeros(0, "<i4")
    vocab = json.dumps({"user_ids": dataset.user_ids, "item_ids": dataset.item_ids}).encode()
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                SPLIT_MAGIC,
                SPLIT_VERSION,
                dataset.seed,
                dataset.num_users,
                dataset.num_items,
                dataset.num_actions,
                dataset.eval_negatives.shape[1],
            )
        )
        for arr in (lengths, flat, dataset.heldout.astype("<i4"), dataset.eval_negatives.astype("<i4")):
            fh.write(arr.tobytes())
        fh.write(struct.pack("<Q", len(vocab)))
        fh.write(vocab)


def read_split(path) -> SequenceDataset:
    raw = Path(path).read_bytes()
    magic, version, seed, U, V, actions, K = _HEADER.unpack_from(raw, 0)
    if magic != SPLIT_MAGIC:
        raise DataFormatError(f"{path}: not a split file")
    if version != SPLIT_VERSION:
        raise DataFormatError(f"{path}: unsupported split version {version}")
    off = _HEADER.size

    def take(count):
        nonlocal off
        arr = np.frombuffer(raw, dtype="<i4", count=count, offset=off).astype(np.int64)
        off += 4 * count
        return arr

    lengths = take(U)
    flat = take(int(lengths.sum()))
    heldout = take(U)
    negatives = take(U * K).reshape(U, K)
    (vlen,) = struct.unpack_from("<Q", raw, off)
    vocab = json.loads(raw[off + 8 : off + 8 + vlen])
    seqs = np.split(flat, np.cumsum(lengths)[:-1]) if U else []
    ds = SequenceDataset(V, [s.copy() for s in seqs], heldout, negatives, seed, vocab["user_ids"], vocab["item_ids"])
    if ds.num_actions != actions:
        raise DataFormatError(f"{path}: header says {actions} actions, body has {ds.num_actions}")
    return ds


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def prepare_split(source, out_dir, k: int = 10, seed: int = 0, num_negatives: int = 100, fmt=None):
    """Ingest, filter and split ``source`` once; later calls reuse the cached file.

    The cache file name encodes the source hash, ``k``, the seed and the
    negative count. Returns ``(path, dataset, reused)``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = file_digest(source)[:16]
    path = out_dir / f"split-{digest}-k{k}-s{seed}-neg{num_negatives}.bin"
    if path.exists():
        return path, read_split(path), True
    log = ingest(source, fmt)
    if k > 1:
        log = k_core_filter(log, k)
    dataset = build_split(log, num_negatives=num_negatives, seed=seed)
    tmp = path.with_suffix(".tmp")
    write_split(dataset, tmp)
    tmp.replace(path)
    return path, dataset, False
