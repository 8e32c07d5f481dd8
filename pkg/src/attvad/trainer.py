"""Mini-batch SGD with fixed-length truncated BPTT chunks."""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .evaluate import pooled_auc
from .features import NormStats, apply_norm, fit_norm
from .layers import bind, map_params, named_params
from .loss import LossSpec, batch_loss
from .model import Checkpoint, ModelConfig, ModelParams, build, forward, save_checkpoint

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    initial_lr: float = 0.1
    lr_decay: float = 0.1
    lr_floor: float = 1e-5
    epochs: int = 20
    batch_size: int = 128
    bptt_T: int = 50
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    patience: int = 1

    def __post_init__(self):
        if not 0 < self.lr_floor <= self.initial_lr:
            raise ValueError("need 0 < lr_floor <= initial_lr")
        if self.bptt_T < 1 or self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("bptt_T, batch_size and patience must be >= 1; epochs >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    lr: float
    seconds: float


def make_chunks(utterances, bptt_T: int, norm: NormStats | None = None):
    """Non-overlapping ``bptt_T``-frame (features, labels) chunks; short tails are dropped."""
    chunks = []
    for utt in utterances:
        feats = apply_norm(norm, utt.features) if norm is not None else utt.features
        labels = np.asarray(utt.labels, dtype=np.float64)
        if labels.size != feats.shape[0]:
            raise ValueError(f"{utt.utt_id}: {labels.size} labels for {feats.shape[0]} frames")
        for start in range(0, feats.shape[0] - bptt_T + 1, bptt_T):
            chunks.append((feats[start:start + bptt_T], labels[start:start + bptt_T]))
    return chunks


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), 7]).permutation(n)


def sgd_step(params, grads, lr: float):
    """Plain SGD ``w <- w - lr * g``; ``grads`` follow :func:`named_params` order."""
    names = [n for n, _ in named_params(params)]
    if len(grads) != len(names):
        raise ValueError(f"{len(grads)} gradients for {len(names)} parameters")
    for name, g in zip(names, grads):
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalAbort(f"non-finite gradient for {name} ({bad} entries)")
    it = iter(grads)

    def update(w):
        g = next(it)
        if np.shape(g) != np.shape(w):
            raise ad.ShapeError("sgd_step", np.shape(w), np.shape(g))
        return w - lr * g

    return map_params(update, params)


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray, spec: LossSpec,
                   track_stats: bool = True):
    tape = ad.Tape()
    bound, leaves = bind(params, tape)
    probs = forward(bound, x, "train", track_stats=track_stats)
    loss = batch_loss(spec, probs, y.reshape(probs.shape))
    return float(loss.value), ad.backward(tape, loss, leaves)


def write_log(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_auc", "lr", "seconds"])
        for r in records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_auc), repr(r.lr), f"{r.seconds:.3f}"])


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, utterances, out_dir=None,
          progress=None):
    """Train on the ``train`` split, select the epoch with the best ``valid`` AUC.

    ``utterances`` carry raw features; normalization statistics are fitted
    on the training split and stored in the checkpoint.  Returns
    ``(best checkpoint, epoch records)``.  With ``out_dir`` the best
    checkpoint and the log are written as training proceeds.
    """
    train_utts = [u for u in utterances if u.split == "train"]
    valid_utts = [u for u in utterances if u.split == "valid"]
    if not train_utts:
        raise ValueError("no utterances in the train split")
    if not valid_utts:
        raise ValueError("no utterances in the valid split")
    if model_cfg.t_train != train_cfg.bptt_T:
        model_cfg = ModelConfig(model_cfg.input_dim, model_cfg.layers, model_cfg.hidden,
                                model_cfg.attention, train_cfg.bptt_T)

    norm = fit_norm([u.features for u in train_utts])
    chunks = make_chunks(train_utts, train_cfg.bptt_T, norm)
    if not chunks and train_cfg.epochs:
        raise ValueError(f"no training utterance reaches {train_cfg.bptt_T} frames")
    params = build(model_cfg, train_cfg.seed)
    best = Checkpoint(copy.deepcopy(params), norm)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(best, out_dir / "checkpoint.bin")

    records: list[EpochRecord] = []
    best_auc = -math.inf
    stall = 0
    lr = train_cfg.initial_lr
    feats = np.stack([c[0] for c in chunks]) if chunks else None
    labels = np.stack([c[1] for c in chunks]) if chunks else None
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = epoch_order(len(chunks), train_cfg.seed, epoch)
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            try:
                loss, grads = loss_and_grads(params, feats[idx], labels[idx], train_cfg.loss)
                if not math.isfinite(loss):
                    raise NumericalAbort(f"epoch {epoch}: loss is {loss}")
                params = sgd_step(params, grads, lr)
            except (FloatingPointError, NumericalAbort) as exc:
                if out_dir is not None:
                    write_log(out_dir / "train_log.csv", records)
                raise NumericalAbort(f"epoch {epoch}, batch {start // train_cfg.batch_size}: {exc}") from exc
            losses.append(loss * len(idx))
        train_loss = float(np.sum(losses) / len(order))
        val_auc = pooled_auc(Checkpoint(params, norm), valid_utts)
        records.append(EpochRecord(epoch + 1, train_loss, val_auc, lr, time.perf_counter() - t0))
        if progress is not None:
            progress(records[-1])
        log.info("epoch %d loss %.5f val_auc %.4f lr %g", epoch + 1, train_loss, val_auc, lr)
        if val_auc > best_auc:
            best_auc = val_auc
            best = Checkpoint(copy.deepcopy(params), norm)
            stall = 0
            if out_dir is not None:
                save_checkpoint(best, out_dir / "checkpoint.bin")
        else:
            stall += 1
            if stall >= train_cfg.patience:
                lr = max(lr * train_cfg.lr_decay, train_cfg.lr_floor)
                stall = 0
        if out_dir is not None:
            write_log(out_dir / "train_log.csv", records)
    return best, records
