"""
Synthetic interaction data with planted short- and long-range structure.

Items are grouped into ``num_categories`` blocks of ``items_per_category``.
Each user owns ``long_term_categories`` favourite categories (the long-range
signal). Histories are built from two kinds of event:

* with probability ``p_burst`` a burst of ``burst_len`` consecutive items
  from one favourite category, stepping through the block in order
  (the short-range signal);
* otherwise a single uniformly random item, which acts as a decoy.

The final item, which becomes the held-out positive, is a uniformly random
item from one of the favourite categories. A scorer that attends to
individual clicks is distracted by decoys that share a category with a
negative; smoothing over a window favours the bursts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import InteractionLog, SequenceDataset, build_split


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int = 2000
    num_categories: int = 40
    items_per_category: int = 10
    long_term_categories: int = 2
    min_len: int = 12
    max_len: int = 20
    burst_len: int = 3
    p_burst: float = 0.3

    @property
    def num_items(self) -> int:
        return self.num_categories * self.items_per_category

    def to_dict(self) -> dict:
        return asdict(self)


def category_of(item: int, spec: SyntheticSpec) -> int:
    return (item - 1) // spec.items_per_category


def generate_sequences(spec: SyntheticSpec, seed: int = 0) -> list:
    """Per-user lists of 1-based item indices."""
    rng = np.random.default_rng(seed)
    S = spec.items_per_category
    seqs = []
    for _ in range(spec.num_users):
        favourites = rng.choice(spec.num_categories, size=spec.long_term_categories, replace=False)
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        seq: list = []
        while len(seq) < length - 1:
            if rng.random() < spec.p_burst:
                cat, start = int(rng.choice(favourites)), int(rng.integers(S))
                seq.extend(cat * S + (start + b) % S + 1 for b in range(spec.burst_len))
            else:
                seq.append(int(rng.integers(spec.num_items)) + 1)
        seq = seq[: length - 1]
        seq.append(int(rng.choice(favourites)) * S + int(rng.integers(S)) + 1)
        seqs.append(seq)
    return seqs


def synthetic_log(spec: SyntheticSpec, seed: int = 0) -> InteractionLog:
    """Interaction log whose item ids are the synthetic indices (as strings)."""
    records = []
    # register items in index order so vocabulary index == synthetic index
    for i in range(1, spec.num_items + 1):
        records.append(("__catalog__", str(i), -1))
    for u, seq in enumerate(generate_sequences(spec, seed)):
        for t, item in enumerate(seq):
            records.append((f"user{u}", str(item), t))
    log = InteractionLog.from_records(records)
    keep = log.users != 0
    return InteractionLog(
        users=log.users[keep] - 1,
        items=log.items[keep],
        timestamps=log.timestamps[keep],
        user_ids=log.user_ids[1:],
        item_ids=log.item_ids,
    )


def synthetic_dataset(spec: SyntheticSpec = SyntheticSpec(), seed: int = 0, num_negatives: int = 100) -> SequenceDataset:
    return build_split(synthetic_log(spec, seed), num_negatives=num_negatives, seed=seed)
