import csv
from dataclasses import dataclass

import numpy as np
import pytest

from attvad import autodiff as ad
from attvad import model as M
from attvad import trainer as T
from attvad.dataprep import Utterance
from attvad.layers import named_buffers, named_params
from attvad.loss import LossSpec, batch_loss


@dataclass
class W:
    w: np.ndarray
    b: np.ndarray = None


TINY = M.ModelConfig(input_dim=4, layers=2, hidden=4, attention="da2", t_train=10)


def toy_corpus(seed=0, n_train=6, n_valid=2, frames=35):
    r = np.random.default_rng(seed)
    utts = []
    for i in range(n_train + n_valid):
        labels = (np.sin(np.arange(frames) / 4.0 + i) > 0).astype(np.int8)
        feats = r.normal(size=(frames, 4)) + 3.0 * labels[:, None]
        utts.append(Utterance(f"u{i}", feats, labels, "train" if i < n_train else "valid"))
    return utts


def test_make_chunks_drops_short_tail():
    u98 = Utterance("a", np.zeros((98, 4)), np.zeros(98, np.int8))
    u100 = Utterance("b", np.ones((100, 4)), np.ones(100, np.int8))
    chunks = T.make_chunks([u98], 50)
    assert len(chunks) == 1 and chunks[0][0].shape == (50, 4)
    assert len(T.make_chunks([u100], 50)) == 2
    assert all(c[0].shape[0] == 50 and c[1].shape[0] == 50 for c in T.make_chunks([u98, u100], 50))
    with pytest.raises(ValueError):
        T.make_chunks([Utterance("c", np.zeros((60, 4)), np.zeros(59))], 50)


def test_epoch_order_is_seeded():
    assert np.array_equal(T.epoch_order(20, 3, 1), T.epoch_order(20, 3, 1))
    assert not np.array_equal(T.epoch_order(20, 3, 1), T.epoch_order(20, 3, 2))
    assert sorted(T.epoch_order(20, 3, 1)) == list(range(20))


def test_sgd_step_arithmetic():
    tree = W(np.array([1.0]), np.array([[2.0, -1.0]]))
    out = T.sgd_step(tree, [np.array([2.0]), np.array([[1.0, 1.0]])], 0.1)
    assert out.w[0] == pytest.approx(0.8) and np.allclose(out.b, [[1.9, -1.1]])
    same = T.sgd_step(tree, [np.array([5.0]), np.ones((1, 2))], 0.0)
    assert np.array_equal(same.w, tree.w) and np.array_equal(same.b, tree.b)
    assert tree.w[0] == 1.0  # inputs untouched


def test_sgd_on_quadratic():
    w = W(np.array([1.0]))
    tape = ad.Tape()
    leaf = tape.param(w.w)
    loss = ad.mul(ad.sum_(ad.mul(leaf, leaf)), 0.5)
    (g,) = ad.backward(tape, loss, [leaf])
    w1 = T.sgd_step(w, [g], 0.1).w
    assert w1[0] == pytest.approx(0.9, abs=1e-15)
    assert 0.5 * w1[0] ** 2 < 0.5


def test_sgd_rejects_non_finite_and_mismatched():
    with pytest.raises(T.NumericalAbort, match="for w"):
        T.sgd_step(W(np.ones(2)), [np.array([1.0, np.nan])], 0.1)
    with pytest.raises(ValueError):
        T.sgd_step(W(np.ones(2)), [], 0.1)
    with pytest.raises(ad.ShapeError):
        T.sgd_step(W(np.ones(2)), [np.ones(3)], 0.1)


@pytest.mark.parametrize("seed", range(10))
def test_small_step_decreases_batch_loss(seed):
    params = M.build(TINY, seed)
    r = np.random.default_rng(seed)
    x = r.normal(size=(4, 10, 4))
    y = (r.random((4, 10, 1)) > 0.5).astype(float)
    spec = LossSpec("fl", 0.8)
    before, grads = T.loss_and_grads(params, x, y, spec, track_stats=False)
    after_params = T.sgd_step(params, grads, 1e-3)
    after = float(batch_loss(spec, M.forward(after_params, x, "train", track_stats=False), y))
    assert after < before


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(initial_lr=1e-6, lr_floor=1e-5)
    with pytest.raises(ValueError):
        T.TrainConfig(bptt_T=0)


def test_zero_epochs_returns_initial_model():
    ckpt, log = T.train(TINY, T.TrainConfig(epochs=0, bptt_T=10), toy_corpus())
    assert log == []
    init = M.build(TINY, 0)
    for (_, a), (_, b) in zip(named_params(init), named_params(ckpt.params)):
        assert np.array_equal(a, b)


def test_training_learns_and_schedule_is_valid(tmp_path):
    cfg = T.TrainConfig(initial_lr=1.0, epochs=8, batch_size=4, bptt_T=10, lr_floor=1e-3)
    ckpt, log = T.train(TINY, cfg, toy_corpus(), tmp_path)
    assert len(log) == 8
    assert log[-1].train_loss < log[0].train_loss
    lrs = [r.lr for r in log]
    assert all(a >= b for a, b in zip(lrs, lrs[1:])) and min(lrs) >= 1e-3
    assert max(r.val_auc for r in log) > 0.9
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert [int(r["epoch"]) for r in rows] == list(range(1, 9))
    saved = M.load_checkpoint(tmp_path / "checkpoint.bin")
    assert M.checkpoint_bytes(saved) == M.checkpoint_bytes(ckpt)


def test_lr_decays_on_stall_with_floor():
    utts = toy_corpus()
    cfg = T.TrainConfig(initial_lr=1e-2, lr_decay=0.1, lr_floor=1e-4, epochs=5, batch_size=4, bptt_T=10)
    _, log = T.train(TINY, cfg, utts)
    best = -1.0
    lr = cfg.initial_lr
    for rec in log:
        assert rec.lr == pytest.approx(lr)
        if rec.val_auc > best:
            best = rec.val_auc
        else:
            lr = max(lr * cfg.lr_decay, cfg.lr_floor)


def test_training_is_deterministic():
    cfg = T.TrainConfig(initial_lr=0.3, epochs=2, batch_size=3, bptt_T=10, seed=5)
    a, log_a = T.train(TINY, cfg, toy_corpus(1))
    b, log_b = T.train(TINY, cfg, toy_corpus(1))
    assert M.checkpoint_bytes(a) == M.checkpoint_bytes(b)
    strip = [(r.epoch, r.train_loss, r.val_auc, r.lr) for r in log_a]
    assert strip == [(r.epoch, r.train_loss, r.val_auc, r.lr) for r in log_b]


def test_requires_splits_and_long_enough_utterances():
    utts = toy_corpus()
    with pytest.raises(ValueError, match="valid"):
        T.train(TINY, T.TrainConfig(bptt_T=10), [u for u in utts if u.split == "train"])
    with pytest.raises(ValueError, match="frames"):
        T.train(TINY, T.TrainConfig(bptt_T=100, epochs=1), utts)


def test_divergence_aborts_and_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    real = T.loss_and_grads
    calls = []

    def poisoned(params, x, y, spec, track_stats=True):
        loss, grads = real(params, x, y, spec, track_stats)
        calls.append(1)
        if len(calls) == 6:  # first batch of the second epoch
            grads[0] = grads[0] * np.nan
        return loss, grads

    monkeypatch.setattr(T, "loss_and_grads", poisoned)
    cfg = T.TrainConfig(initial_lr=0.5, epochs=3, batch_size=4, bptt_T=10)
    with pytest.raises(T.NumericalAbort, match="epoch 1, batch 0"):
        T.train(TINY, cfg, toy_corpus(), tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert len(rows) == 1
    saved = M.load_checkpoint(tmp_path / "checkpoint.bin")
    assert all(np.all(np.isfinite(v)) for _, v in named_params(saved.params))


def test_running_stats_update_during_training():
    ckpt, _ = T.train(TINY, T.TrainConfig(initial_lr=0.1, epochs=1, batch_size=4, bptt_T=10), toy_corpus())
    rm = dict(named_buffers(ckpt.params))
    assert any(np.any(v != 0) for k, v in rm.items() if k.endswith("running_mean"))
