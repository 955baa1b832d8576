"""
Two-phase training.

Phase 1 pre-trains the embedding tables and transformer stack on next-item
prediction at every step of each user's training sequence. Phase 2 trains the
whole network on the fused score: for every user, the last training item is
the positive target for the history before it and a freshly sampled item the
user never touched is the negative. Both phases use the paired binary
cross-entropy loss and an Adam optimizer.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .data import SequenceDataset, sample_negatives
from .errors import ContractError, NonFiniteError
from .model import MrifModel, pad_sequences

PRECISIONS = {"float64": np.float64, "float32": np.float32}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs_pretrain: int = 20
    epochs_train: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    freeze_extractor: bool = False
    precision: str = "float64"

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"learning rate must be positive, got {self.lr}")
        if self.epochs_pretrain < 0 or self.epochs_train < 0:
            raise ContractError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.precision not in PRECISIONS:
            raise ContractError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self) -> dict:
        return asdict(self)


def bce_pair_loss(pos_logit, neg_logit, weights=None) -> T.Tensor:
    """Summed -log sigmoid(pos) - log(1 - sigmoid(neg)).

    Computed as softplus(-pos) + softplus(neg). ``weights`` (0/1 array)
    drops entries that are padding.
    """
    per = T.add(T.softplus(T.scale(pos_logit, -1.0)), T.softplus(neg_logit))
    if weights is not None:
        per = T.mul(per, np.asarray(weights, dtype=per.dtype))
    return T.reduce_sum(per)


@dataclass
class OptimizerState:
    """Adam moments per parameter name plus the step counter."""

    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


def optimizer_step(
    params: list,
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update on ``(name, Tensor)`` pairs that hold a gradient."""
    for name, p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.first[name], state.second[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class MetricsLogger:
    """Prints one line per epoch and appends JSON lines to ``path`` when given."""

    def __init__(self, path=None, stream=None, quiet: bool = False):
        self.path = path
        self.stream = stream
        self.quiet = quiet
        self.records: list = []

    def __call__(self, record: dict) -> None:
        self.records.append(record)
        if not self.quiet:
            extras = " ".join(f"{k}={v}" for k, v in record.items() if k not in ("phase", "epoch", "loss", "elapsed"))
            print(
                f"[{record['phase']}] epoch {record['epoch']:3d}  loss {record['loss']:.4f}"
                f"  ({record['elapsed']:.1f}s){'  ' + extras if extras else ''}",
                file=self.stream or sys.stdout,
                flush=True,
            )
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


class _Trainer:
    def __init__(self, model: MrifModel, config: TrainConfig, log: Optional[Callable]):
        self.model = model
        self.config = config
        self.log = log or MetricsLogger(quiet=True)
        self.state = OptimizerState()

    def step(self, loss: T.Tensor, params: list) -> None:
        self.model.zero_grad()
        T.backward(loss)
        c = self.config
        optimizer_step(params, self.state, c.lr, c.beta1, c.beta2, c.eps)
        # padding row stays pinned at zero
        self.model.params["item_embedding"].data[0] = 0.0


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start : start + size]


def pretrain(model: MrifModel, dataset: SequenceDataset, config: TrainConfig, log: Optional[Callable] = None, state=None):
    """Next-item pre-training of embeddings and transformer layers.

    Each real position t of a user's training sequence predicts the item at
    t + 1 against one sampled negative. Returns the per-epoch mean loss.
    """
    trainer = _Trainer(model, config, log)
    if state is not None:
        trainer.state = state
    rng = np.random.default_rng([config.seed, 1])
    n = model.config.n
    users = np.array([u for u, s in enumerate(dataset.train_seqs) if len(s) >= 2], dtype=np.int64)
    params = [(k, v) for k, v in model.named_parameters() if model.is_extractor_param(k)]
    history = []
    model.train()
    start = time.perf_counter()
    for epoch in range(config.epochs_pretrain):
        total, terms = 0.0, 0
        for batch in _batches(rng.permutation(users), config.batch_size):
            seqs = [dataset.train_seqs[u] for u in batch]
            idx, mask = pad_sequences([s[:-1] for s in seqs], n, trim=True)
            pos, _ = pad_sequences([s[1:] for s in seqs], n, trim=True)
            neg = sample_negatives(dataset, batch[:, None], rng, shape=pos.shape)
            neg[~mask] = 0
            E, _ = model.embed_indices(idx)
            H0 = model.extract_interests(E, mask)
            loss = bce_pair_loss(model.pretrain_logits(H0, pos), model.pretrain_logits(H0, neg), mask)
            trainer.step(loss, params)
            total += float(loss.data)
            terms += int(mask.sum())
        mean = total / max(terms, 1)
        history.append(mean)
        trainer.log({"phase": "pretrain", "epoch": epoch + 1, "loss": mean, "elapsed": time.perf_counter() - start})
    model.eval()
    return history


def train_full(model: MrifModel, dataset: SequenceDataset, config: TrainConfig, log: Optional[Callable] = None, state=None):
    """Fused-score training: last training item vs one fresh negative per user per epoch.

    With ``freeze_extractor`` only the aggregation parameters move; if the
    aggregator has none the phase is a no-op apart from loss logging.
    Returns the per-epoch mean loss.
    """
    trainer = _Trainer(model, config, log)
    if state is not None:
        trainer.state = state
    rng = np.random.default_rng([config.seed, 2])
    n = model.config.n
    users = np.array([u for u, s in enumerate(dataset.train_seqs) if len(s) >= 2], dtype=np.int64)
    params = model.named_parameters(include_extractor=not config.freeze_extractor)
    frozen = [p for k, p in model.named_parameters() if config.freeze_extractor and model.is_extractor_param(k)]
    for p in frozen:
        p.requires_grad = False
    history = []
    model.train()
    start = time.perf_counter()
    try:
        for epoch in range(config.epochs_train):
            total = 0.0
            for batch in _batches(rng.permutation(users), config.batch_size):
                seqs = [dataset.train_seqs[u] for u in batch]
                idx, _ = pad_sequences([s[:-1] for s in seqs], n, trim=True)
                pos = np.array([s[-1] for s in seqs], dtype=np.int64)
                neg = sample_negatives(dataset, batch, rng)
                logits = model.candidate_logits(idx, np.stack([pos, neg], axis=1))
                loss = bce_pair_loss(T.slice_(logits, np.s_[:, 0]), T.slice_(logits, np.s_[:, 1]))
                if loss.requires_grad and params:
                    trainer.step(loss, params)
                total += float(loss.data)
            mean = total / max(len(users), 1)
            history.append(mean)
            trainer.log({"phase": "train", "epoch": epoch + 1, "loss": mean, "elapsed": time.perf_counter() - start})
    finally:
        for p in frozen:
            p.requires_grad = True
        model.eval()
    return history


def fit(model: MrifModel, dataset: SequenceDataset, config: TrainConfig, log: Optional[Callable] = None) -> dict:
    """Run both phases; returns their loss histories."""
    return {
        "pretrain": pretrain(model, dataset, config, log),
        "train": train_full(model, dataset, config, log),
    }
