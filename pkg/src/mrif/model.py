"""
The multi-resolution interest fusion network.

A user's item sequence is embedded (item table plus positional table), passed
through a stack of causal transformer layers to get per-step "instantaneous"
interests ``H[0]``, then through ``num_agg_layers`` sliding-window aggregation
layers that produce progressively coarser interest sequences ``H[1..L]``. A
candidate item attends over every level separately; the per-level attention
readouts are summed into one user vector and scored by a dot product with the
candidate's embedding.

All batched functions work on right-padded index arrays of shape (B, m) with
``0`` as the padding id and a boolean mask marking real positions.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ContractError, DegenerateRowError, VocabularyLookupError
from .tensor import Tensor

AGGREGATORS = ("mean", "max", "attn")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n: int = 50
    d: int = 64
    heads: int = 2
    num_transformer_layers: int = 2
    num_agg_layers: int = 2
    half_window: int = 1
    aggregator: str = "attn"
    keep_prob: float = 0.8

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ContractError("vocab_size must include the padding id and at least one item")
        if self.n < 1 or self.d < 2 or self.heads < 1:
            raise ContractError(f"invalid sizes n={self.n} d={self.d} heads={self.heads}")
        if self.d % self.heads:
            raise ContractError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.num_transformer_layers < 1:
            raise ContractError("need at least one transformer layer")
        if self.num_agg_layers < 0 or self.half_window < 0:
            raise ContractError("num_agg_layers and half_window must be >= 0")
        if self.aggregator not in AGGREGATORS:
            raise ContractError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ContractError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")

    @property
    def window(self) -> int:
        return 2 * self.half_window + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})


def pad_sequences(seqs: Sequence[Sequence[int]], n: int, trim: bool = True):
    """Right-pad item sequences into an index array, keeping the last ``n`` items.

    With ``trim`` the width is the longest (clipped) sequence in the batch;
    otherwise it is ``n``. Returns ``(idx, mask)``.
    """
    clipped = [list(s)[-n:] if len(s) > n else list(s) for s in seqs]
    width = max((len(s) for s in clipped), default=0) if trim else n
    width = max(width, 1)
    idx = np.zeros((len(clipped), width), dtype=np.int64)
    for row, s in enumerate(clipped):
        idx[row, : len(s)] = s
    return idx, idx != 0


def strip_padding(histories) -> list:
    """Item lists from either lists of ids or a right-padded (B, m) index array."""
    if isinstance(histories, np.ndarray):
        return [[int(i) for i in row if i != 0] for row in histories]
    return [list(h) for h in histories]


def _reduce_windows(windows: Tensor, kind: str, logits: Optional[Tensor]) -> Tensor:
    """Collapse the window axis (-2) of ``windows`` (..., k, d) to (..., d)."""
    if kind == "mean":
        return T.reduce_mean(windows, axis=-2)
    if kind == "attn":
        if logits is None:
            raise ContractError("attentional aggregator needs logits")
        weights = T.softmax(logits)
        return T.reduce_sum(T.mul(windows, T.reshape(weights, (-1, 1))), axis=-2)
    if kind == "max":
        norms = np.sqrt(np.sum(windows.data * windows.data, axis=-1))
        # argmax returns the first maximum, which is the tie rule we want
        pick = np.argmax(norms, axis=-1)[..., None, None]
        pick = np.broadcast_to(pick, windows.shape[:-2] + (1, windows.shape[-1]))
        return T.reshape(T.take_along_axis(windows, pick, axis=-2), windows.shape[:-2] + (windows.shape[-1],))
    raise ContractError(f"unknown aggregator {kind!r}")


def mean_agg(window) -> Tensor:
    return _reduce_windows(T.as_tensor(window), "mean", None)


def max_agg(window) -> Tensor:
    return _reduce_windows(T.as_tensor(window), "max", None)


def attn_agg(window, logits) -> Tensor:
    return _reduce_windows(T.as_tensor(window), "attn", T.as_tensor(logits))


def aggregate(H, kind: str, w: int, logits=None, mask: Optional[np.ndarray] = None) -> Tensor:
    """One aggregation layer: window of width 2w+1 around every position.

    ``H`` is (..., n, d). Positions outside the sequence contribute zero
    vectors. When ``mask`` is given the output is zeroed at padded positions so
    the next layer sees padding exactly like the out-of-range boundary.
    """
    H = T.as_tensor(H)
    if 2 * w + 1 > H.shape[-2] and mask is None:
        raise ContractError(f"window {2 * w + 1} is wider than the sequence ({H.shape[-2]})")
    windows = T.sliding_window(H, w)
    out = _reduce_windows(windows, kind, None if logits is None else T.as_tensor(logits))
    if mask is not None:
        out = T.mul(out, mask[..., None].astype(out.dtype))
    return out


def fuse(levels: Sequence[Tensor], targets: Tensor, mask: np.ndarray) -> Tensor:
    """Target-attentive fusion summed over interest levels.

    ``levels`` are (B, m, d) tensors, ``targets`` is (B, C, d) and ``mask`` is
    (B, m). Returns the fused user vectors (B, C, d), one per candidate.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise DegenerateRowError("cannot fuse interests of a sequence with no real item")
    attn_mask = mask[:, None, :]
    fused = None
    for H in levels:
        sims = T.matmul(targets, T.swapaxes(H, -1, -2))
        weights = T.softmax(sims, mask=attn_mask)
        readout = T.matmul(weights, H)
        fused = readout if fused is None else T.add(fused, readout)
    return fused


def score(h, item_embedding) -> Tensor:
    """Raw logit h . e over the last axis."""
    return T.reduce_sum(T.mul(h, item_embedding), axis=-1)


class MrifModel:
    """Parameters plus forward computation.

    Parameters live in ``self.params`` (name -> Tensor). Per-head query, key
    and value projections are stored side by side as column blocks of one
    (d, d) matrix per transformer layer.
    """

    EXTRACTOR_PREFIXES = ("item_embedding", "pos_embedding", "trm")

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.training = False
        init_seq, drop_seq = np.random.SeedSequence(seed).spawn(2)
        self.dropout_rng = np.random.default_rng(drop_seq)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(init_seq))

    # -- parameters --------------------------------------------------------

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        bound = 0.5 / math.sqrt(c.d)

        def uniform(*shape):
            return rng.uniform(-bound, bound, size=shape)

        item = uniform(c.vocab_size, c.d)
        item[0] = 0.0
        self._add("item_embedding", item)
        self._add("pos_embedding", uniform(c.n, c.d))
        for i in range(c.num_transformer_layers):
            p = f"trm{i}."
            for name in ("wq", "wk", "wv", "wo", "ffn_w1", "ffn_w2"):
                self._add(p + name, uniform(c.d, c.d))
            self._add(p + "ffn_b1", np.zeros(c.d))
            self._add(p + "ffn_b2", np.zeros(c.d))
            for ln in ("ln1", "ln2"):
                self._add(p + ln + "_gain", np.ones(c.d))
                self._add(p + ln + "_bias", np.zeros(c.d))
        if c.aggregator == "attn":
            for l in range(c.num_agg_layers):
                self._add(f"agg{l}.logits", np.zeros(c.window))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    def is_extractor_param(self, name: str) -> bool:
        return name.startswith(self.EXTRACTOR_PREFIXES)

    def named_parameters(self, include_extractor: bool = True) -> list:
        return [(k, v) for k, v in self.params.items() if include_extractor or not self.is_extractor_param(k)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.dtype).copy()

    def train(self, mode: bool = True) -> "MrifModel":
        self.training = mode
        return self

    def eval(self) -> "MrifModel":
        return self.train(False)

    # -- forward pieces ----------------------------------------------------

    def embed_indices(self, idx: np.ndarray):
        """E = M[idx] + P for (B, m) indices; padded rows are all zero."""
        c = self.config
        idx = np.asarray(idx)
        if idx.shape[-1] > c.n:
            raise ContractError(f"sequence width {idx.shape[-1]} exceeds n={c.n}")
        if idx.size and (idx.min() < 0 or idx.max() >= c.vocab_size):
            raise VocabularyLookupError(f"item index outside [0, {c.vocab_size})")
        mask = idx != 0
        m = idx.shape[-1]
        items = T.embedding_lookup(self.params["item_embedding"], idx)
        pos = self.params["pos_embedding"]
        if m != c.n:
            pos = T.slice_(pos, np.s_[:m])
        pos = T.mul(pos, mask[..., None].astype(self.dtype))
        return T.add(items, pos), mask

    def embed(self, sequence: Sequence[int]):
        """Embed a single sequence padded to length n. Returns (Tensor[n x d], mask[n])."""
        idx, _ = pad_sequences([sequence], self.config.n, trim=False)
        E, mask = self.embed_indices(idx)
        return T.reshape(E, E.shape[1:]), mask[0]

    def transformer_layer(self, X: Tensor, mask: np.ndarray, causal: bool = True, layer: int = 0) -> Tensor:
        """Self-attention block then feed-forward block, each with dropout, residual and layer norm.

        ``X`` is (B, m, d) or (m, d); ``mask`` marks real positions. Queries
        never attend to padded keys, and with ``causal`` not to later keys.
        """
        c = self.config
        p = lambda name: self.params[f"trm{layer}.{name}"]
        squeeze = X.ndim == 2
        if squeeze:
            X = T.reshape(X, (1,) + X.shape)
            mask = np.asarray(mask)[None]
        B, m, d = X.shape
        dh = d // c.heads

        def split_heads(t):
            return T.swapaxes(T.reshape(t, (B, m, c.heads, dh)), 1, 2)

        q = split_heads(T.matmul(X, p("wq")))
        k = split_heads(T.matmul(X, p("wk")))
        v = split_heads(T.matmul(X, p("wv")))
        logits = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
        allowed = np.broadcast_to(np.asarray(mask, dtype=bool)[:, None, None, :], (B, 1, m, m))
        if causal:
            allowed = allowed & np.tril(np.ones((m, m), dtype=bool))
        # a padded query with no real key to its left attends to itself only
        allowed = allowed | np.eye(m, dtype=bool)
        attn = T.softmax(logits, mask=allowed)
        heads = T.reshape(T.swapaxes(T.matmul(attn, v), 1, 2), (B, m, d))
        multihead = T.matmul(heads, p("wo"))

        keep, train, rng = c.keep_prob, self.training, self.dropout_rng
        sa = T.layer_norm(T.add(T.dropout(multihead, keep, train, rng), X), p("ln1_gain"), p("ln1_bias"))
        hidden = T.relu(T.add(T.matmul(sa, p("ffn_w1")), p("ffn_b1")))
        ffn = T.add(T.matmul(hidden, p("ffn_w2")), p("ffn_b2"))
        out = T.layer_norm(T.add(T.dropout(ffn, keep, train, rng), sa), p("ln2_gain"), p("ln2_bias"))
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out

    def extract_interests(self, E: Tensor, mask: np.ndarray) -> Tensor:
        """H0: the transformer stack with causal masking; padded rows set to zero."""
        X = E
        for i in range(self.config.num_transformer_layers):
            X = self.transformer_layer(X, mask, causal=True, layer=i)
        return T.mul(X, np.asarray(mask)[..., None].astype(self.dtype))

    def interest_stack(self, idx: np.ndarray) -> tuple:
        """Embed and extract, then run the aggregation layers. Returns ([H0..HL], mask)."""
        c = self.config
        E, mask = self.embed_indices(idx)
        levels = [self.extract_interests(E, mask)]
        for l in range(c.num_agg_layers):
            logits = self.params[f"agg{l}.logits"] if c.aggregator == "attn" else None
            levels.append(aggregate(levels[-1], c.aggregator, c.half_window, logits, mask=mask))
        return levels, mask

    def item_vectors(self, items: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.params["item_embedding"], np.asarray(items))

    def candidate_logits(self, idx: np.ndarray, candidates: np.ndarray) -> Tensor:
        """Logits (B, C) for candidate items (B, C) given history indices (B, m)."""
        levels, mask = self.interest_stack(idx)
        targets = self.item_vectors(candidates)
        h = fuse(levels, targets, mask)
        return score(h, targets)

    def pretrain_logits(self, H0: Tensor, items: np.ndarray) -> Tensor:
        """Per-position logits H0[t] . M[item[t]] for an (B, m) array of items."""
        return score(H0, self.item_vectors(items))

    def score_candidates(self, histories, candidates: np.ndarray) -> np.ndarray:
        """Eval-mode scores (B, C) for each history against its row of candidates.

        ``histories`` may be item lists or a right-padded index array; both are
        re-padded only to the longest history, so extra trailing padding never
        changes a score.
        """
        idx, _ = pad_sequences(strip_padding(histories), self.config.n, trim=True)
        prev = self.training
        self.eval()
        try:
            with T.no_grad():
                return self.candidate_logits(idx, np.asarray(candidates)).data.copy()
        finally:
            self.training = prev


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"MRIFCKPT"
_VERSION = 1


def save_checkpoint(model: MrifModel, path) -> None:
    """Write a manifest header followed by little-endian float32 arrays.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header ``{"config": ..., "tensors": [{"name", "shape", "offset"}]}``, then
    the raw arrays; offsets count bytes from the start of the array block.
    """
    entries, blobs, offset = [], [], 0
    for name, t in model.params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": model.config.to_dict(), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None, dtype=np.float64) -> MrifModel:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start : start + hlen])
    config = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config != config:
        raise CheckpointError(f"checkpoint config {config} does not match expected {expected_config}")
    data = raw[start + hlen :]
    state = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"])
    model = MrifModel(config, dtype=dtype)
    model.load_state_dict(state)
    return model
