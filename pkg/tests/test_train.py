import math

import numpy as np
import pytest

from mrif import tensor as T
from mrif.data import SequenceDataset
from mrif.errors import NonFiniteError
from mrif.model import MrifModel, ModelConfig, pad_sequences
from mrif.train import (
    MetricsLogger,
    OptimizerState,
    TrainConfig,
    bce_pair_loss,
    optimizer_step,
    pretrain,
    train_full,
)
from oracles import finite_difference_grad, grad_rel_err


def cyclic_dataset(num_users=64, vocab=40, length=8, seed=0):
    """Item t+1 = item t + 1 (mod vocab); eval negatives are unused here."""
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(num_users):
        start = int(rng.integers(vocab))
        seqs.append(np.array([(start + t) % vocab + 1 for t in range(length)]))
    return SequenceDataset(
        num_items=vocab,
        train_seqs=[s[:-1] for s in seqs],
        heldout=np.array([s[-1] for s in seqs]),
        eval_negatives=np.zeros((num_users, 0), dtype=np.int64),
        seed=seed,
    )


# -- loss --------------------------------------------------------------------


def test_bce_pair_loss_values():
    assert bce_pair_loss(0.0, 0.0).data == pytest.approx(2 * math.log(2))
    assert bce_pair_loss(1.0, -1.0).data == pytest.approx(2 * math.log1p(math.exp(-1)), rel=1e-14)
    assert 2 * math.log1p(math.exp(-1)) == pytest.approx(0.6265, abs=1e-4)
    assert bce_pair_loss(800.0, -800.0).data == 0.0
    assert bce_pair_loss(5.0, 3.0).data > 0


def test_bce_pair_loss_masks_padding():
    assert bce_pair_loss(np.zeros(3), np.zeros(3), np.array([1, 0, 1])).data == pytest.approx(4 * math.log(2))


# -- optimizer ---------------------------------------------------------------


def test_zero_gradient_leaves_parameters():
    p = T.Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.zeros(2)
    optimizer_step([("p", p)], OptimizerState(), lr=0.1)
    assert p.data.tolist() == [1.0, -2.0]


def test_one_step_descends_on_square():
    x = T.Tensor(1.0, requires_grad=True)
    state = OptimizerState()
    T.backward(T.mul(x, x))
    optimizer_step([("x", x)], state, lr=0.1)
    assert x.data < 1.0 and state.step == 1


def test_adam_converges_on_quadratic():
    # f = (x - a)^T D (x - a); the optimum is a
    target = np.array([0.7, -1.3])
    D = np.array([1.0, 4.0])
    x = T.Tensor(np.zeros(2), requires_grad=True)
    state = OptimizerState()
    for step in range(200):
        x.grad = None
        diff = T.sub(x, target)
        T.backward(T.reduce_sum(T.mul(T.mul(diff, diff), D)))
        lr = 0.1 if step < 150 else 0.01
        optimizer_step([("x", x)], state, lr=lr)
    assert np.linalg.norm(x.data - target) < 1e-3


def test_nan_gradient_names_parameter():
    p = T.Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError, match="'weights'"):
        optimizer_step([("weights", p)], OptimizerState(), lr=0.1)


def test_train_config_validation():
    with pytest.raises(Exception):
        TrainConfig(lr=0)
    with pytest.raises(Exception):
        TrainConfig(epochs_train=-1)


# -- end-to-end gradients ----------------------------------------------------


def _fused_loss(model, idx, cands):
    logits = model.candidate_logits(idx, cands)
    return bce_pair_loss(T.slice_(logits, np.s_[:, 0]), T.slice_(logits, np.s_[:, 1]))


@pytest.mark.parametrize("kind", ["attn", "mean", "max"])
def test_full_loss_gradients_match_finite_differences(kind):
    cfg = ModelConfig(vocab_size=15, n=6, d=8, heads=2, num_agg_layers=2, half_window=1, aggregator=kind, keep_prob=1.0)
    model = MrifModel(cfg, seed=1)
    rng = np.random.default_rng(0)
    for p in model.params.values():  # move away from the symmetric init
        p.data = p.data + rng.normal(scale=0.3, size=p.shape)
    model.params["item_embedding"].data[0] = 0.0
    idx, _ = pad_sequences([[1, 2, 3, 4, 5, 6], [7, 8, 9]], 6, trim=False)
    cands = np.array([[10, 11], [12, 13]])
    model.zero_grad()
    T.backward(_fused_loss(model, idx, cands))
    analytic, numeric = [], []
    for name, p in model.params.items():
        flat = [np.unravel_index(i, p.shape) for i in rng.choice(p.data.size, size=min(4, p.data.size), replace=False)]
        if name == "item_embedding":
            flat = [(i, j) for i in (1, 7, 10, 13) for j in (0, 5)]
        f = lambda: float(_fused_loss(model, idx, cands).data)
        num = finite_difference_grad(f, p.data, step=1e-5, indices=flat)
        analytic += [p.grad[i] for i in flat]
        numeric += [num[i] for i in flat]
    assert len(analytic) >= 50
    assert grad_rel_err(analytic, numeric) < 1e-3


# -- training loops ----------------------------------------------------------


def test_pretrain_zero_epochs_is_noop():
    ds = cyclic_dataset()
    model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=8, d=8, heads=2), seed=0)
    before = model.state_dict()
    assert pretrain(model, ds, TrainConfig(epochs_pretrain=0)) == []
    after = model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_pretrain_learns_cyclic_successor():
    ds = cyclic_dataset()
    model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=8, d=16, heads=2, keep_prob=1.0), seed=0)
    history = pretrain(model, ds, TrainConfig(lr=1e-2, batch_size=16, epochs_pretrain=15, seed=0))
    assert history[-1] < history[0]
    # next-item HR@1 on the training sequences. The candidate pool is the
    # target plus every item the user never touched, which is the pool
    # negatives are drawn from; the user's own items are never pushed down.
    idx, mask = pad_sequences([s[:-1] for s in ds.train_seqs], 8, trim=True)
    target, _ = pad_sequences([s[1:] for s in ds.train_seqs], 8, trim=True)
    with T.no_grad():
        E, _ = model.embed_indices(idx)
        H0 = model.extract_interests(E, mask).data
    logits = H0 @ model.params["item_embedding"].data.T
    hits = []
    for u, seq in enumerate(ds.train_seqs):
        seen = np.zeros(ds.vocab_size, dtype=bool)
        seen[seq] = seen[ds.heldout[u]] = seen[0] = True
        for t in np.flatnonzero(mask[u]):
            row = np.where(seen, -np.inf, logits[u, t])
            hits.append(logits[u, t, target[u, t]] > row.max())
    assert np.mean(hits) > 0.9


def test_pretrain_is_deterministic():
    def run():
        ds = cyclic_dataset(num_users=16)
        model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=8, d=8, heads=2), seed=4)
        pretrain(model, ds, TrainConfig(batch_size=8, epochs_pretrain=2, seed=4))
        return model.state_dict()

    a, b = run(), run()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_train_full_overfits_single_user():
    ds = cyclic_dataset(num_users=1, length=8)
    model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=8, d=16, heads=2, keep_prob=1.0), seed=0)
    history = train_full(model, ds, TrainConfig(lr=1e-2, batch_size=1, epochs_train=200, seed=0))
    assert len(history) == 200
    assert history[-1] < 0.01


def test_first_batch_loss_near_two_log_two():
    ds = cyclic_dataset(num_users=64)
    model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=8, d=64, heads=2), seed=0)
    logger = MetricsLogger(quiet=True)
    history = train_full(model, ds, TrainConfig(lr=1e-12, batch_size=64, epochs_train=1, seed=0), log=logger)
    assert abs(history[0] - 2 * math.log(2)) < 0.3


def test_freeze_extractor_keeps_transformer_bitwise():
    ds = cyclic_dataset(num_users=32)
    model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=8, d=8, heads=2), seed=0)
    before = model.state_dict()
    train_full(model, ds, TrainConfig(lr=1e-2, batch_size=8, epochs_train=1, freeze_extractor=True))
    after = model.state_dict()
    for k in before:
        if model.is_extractor_param(k):
            assert before[k].tobytes() == after[k].tobytes(), k
    assert any(before[k].tobytes() != after[k].tobytes() for k in before if k.startswith("agg"))
    assert all(p.requires_grad for p in model.params.values())


def test_metrics_log_file(tmp_path):
    ds = cyclic_dataset(num_users=8)
    model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=8, d=8, heads=2), seed=0)
    log_path = tmp_path / "metrics.jsonl"
    logger = MetricsLogger(path=log_path, quiet=True)
    pretrain(model, ds, TrainConfig(epochs_pretrain=2, batch_size=4), log=logger)
    train_full(model, ds, TrainConfig(epochs_train=1, batch_size=4), log=logger)
    import json

    lines = [json.loads(l) for l in log_path.read_text().splitlines()]
    assert [(l["phase"], l["epoch"]) for l in lines] == [("pretrain", 1), ("pretrain", 2), ("train", 1)]
    assert all({"loss", "elapsed"} <= set(l) for l in lines)


def test_float32_training_runs():
    ds = cyclic_dataset(num_users=16)
    cfg = TrainConfig(epochs_pretrain=1, epochs_train=1, batch_size=8, precision="float32")
    model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=8, d=8, heads=2), seed=0, dtype=cfg.dtype)
    pretrain(model, ds, cfg)
    train_full(model, ds, cfg)
    assert all(p.data.dtype == np.float32 for p in model.params.values())


def test_loss_decreases_over_training():
    from mrif.synthetic import SyntheticSpec, synthetic_dataset

    ds = synthetic_dataset(SyntheticSpec(num_users=200), seed=0)
    model = MrifModel(ModelConfig(vocab_size=ds.vocab_size, n=12, d=16, heads=2), seed=0)
    history = train_full(model, ds, TrainConfig(lr=3e-3, batch_size=32, epochs_train=20, seed=0))
    tenth = len(history) // 10
    assert np.median(history[-tenth:]) < np.median(history[:tenth])
