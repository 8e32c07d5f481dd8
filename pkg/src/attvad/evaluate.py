"""ROC/AUC scoring, per-condition aggregation and hidden-map dumps."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import apply_norm
from .model import Checkpoint, count_params, forward


class DegenerateLabelsError(ValueError):
    pass


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def roc_curve(scores, labels) -> RocCurve:
    """ROC points for a sweep over the distinct scores, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.size != labels.size:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0:
        raise DegenerateLabelsError("no positive (speech) labels; AUC undefined")
    if n_neg == 0:
        raise DegenerateLabelsError("no negative (non-speech) labels; AUC undefined")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[last_of_run]])


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve (ties get half credit)."""
    c = roc_curve(scores, labels)
    return float(np.sum(np.diff(c.fpr) * (c.tpr[1:] + c.tpr[:-1])) / 2.0)


def relative_improvement(auc: float, base: float) -> float:
    """Share of the baseline's remaining error removed: ``(auc - base) / (1 - base)``."""
    if base >= 1.0:
        return math.nan
    return (auc - base) / (1.0 - base)


@dataclass
class CellResult:
    auc: float
    n_frames: int


@dataclass
class EvalReport:
    cells: dict = field(default_factory=dict)  # (noise, snr) -> CellResult
    per_snr: dict = field(default_factory=dict)  # snr -> mean AUC over noises
    overall: float = math.nan
    pooled_auc: float = math.nan
    n_frames: int = 0
    missing: list = field(default_factory=list)
    param_counts: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["noise", "snr_db", "auc", "n_frames"])
            for (noise, snr), cell in sorted(self.cells.items()):
                w.writerow([noise, f"{snr:g}", repr(cell.auc), cell.n_frames])

    def summary(self, baseline: "EvalReport | None" = None) -> str:
        lines = []
        for snr in sorted(self.per_snr):
            lines.append(f"snr {snr:g} dB: mean AUC {100 * self.per_snr[snr]:.2f}%")
        line = f"overall: {100 * self.overall:.2f}%"
        if baseline is not None:
            ri = relative_improvement(self.overall, baseline.overall)
            line += f" (RI {100 * ri:.2f}% vs baseline {100 * baseline.overall:.2f}%)"
        lines.append(line)
        lines.append(f"pooled AUC: {100 * self.pooled_auc:.2f}%  frames: {self.n_frames}")
        if self.param_counts:
            lines.append("params: " + ", ".join(f"{k}={v}" for k, v in self.param_counts.items()))
        for cell in self.missing:
            lines.append(f"missing cell: noise={cell[0]} snr={cell[1]:g}")
        return "\n".join(lines)


def score_utterance(ckpt: Checkpoint, features: np.ndarray) -> np.ndarray:
    """Eval-mode frame probabilities for one (un-normalized) utterance."""
    feats = apply_norm(ckpt.norm, features) if ckpt.norm is not None else features
    return np.asarray(forward(ckpt.params, feats, "eval")).reshape(-1)


def evaluate(ckpt: Checkpoint, utterances) -> EvalReport:
    """Score each utterance full-length and pool frames per (noise, SNR) cell."""
    utterances = sorted(utterances, key=lambda u: u.utt_id)
    pools: dict = defaultdict(lambda: ([], []))
    all_scores, all_labels = [], []
    for utt in utterances:
        probs = score_utterance(ckpt, utt.features)
        key = (utt.noise_type, float(utt.snr_db))
        pools[key][0].append(probs)
        pools[key][1].append(utt.labels)
        all_scores.append(probs)
        all_labels.append(utt.labels)

    report = EvalReport(param_counts=count_params(ckpt.params).breakdown | {
        "total": count_params(ckpt.params).total})
    noises = sorted({k[0] for k in pools})
    snrs = sorted({k[1] for k in pools})
    for noise in noises:
        for snr in snrs:
            if (noise, snr) not in pools:
                report.missing.append((noise, snr))
                continue
            s = np.concatenate(pools[(noise, snr)][0])
            y = np.concatenate(pools[(noise, snr)][1])
            try:
                report.cells[(noise, snr)] = CellResult(roc_auc(s, y), int(s.size))
            except DegenerateLabelsError:
                report.missing.append((noise, snr))
    for snr in snrs:
        vals = [c.auc for (n, s), c in report.cells.items() if s == snr]
        if vals:
            report.per_snr[snr] = float(np.mean(vals))
    if report.per_snr:
        report.overall = float(np.mean(list(report.per_snr.values())))
    if all_scores:
        s, y = np.concatenate(all_scores), np.concatenate(all_labels)
        report.n_frames = int(s.size)
        try:
            report.pooled_auc = roc_auc(s, y)
        except DegenerateLabelsError:
            pass
    return report


def pooled_auc(ckpt: Checkpoint, utterances) -> float:
    scores = [score_utterance(ckpt, u.features) for u in utterances]
    return roc_auc(np.concatenate(scores), np.concatenate([u.labels for u in utterances]))


def summarize_imbalance(values) -> tuple[float, float]:
    """Mean and population standard deviation of overall AUCs across conditions.

    Accepts :class:`EvalReport` objects or plain numbers.
    """
    vals = np.array([v.overall if isinstance(v, EvalReport) else float(v) for v in values])
    if vals.size < 2:
        raise ValueError("summarize_imbalance needs at least two condition results")
    return float(vals.mean()), float(vals.std())


def dump_hidden_maps(ckpt: Checkpoint, features: np.ndarray, labels, start: int, stop: int,
                     out_dir) -> dict:
    """Write the last layer's hidden map before and after refinement for frames ``[start, stop)``.

    Files: ``hidden_pre.csv`` and ``hidden_post.csv`` (rows = frames, columns
    = hidden units) and ``frames.csv`` (frame, truth, probability, predicted).
    """
    steps = features.shape[0]
    if not 0 <= start < stop <= steps:
        raise ValueError(f"frame range [{start}, {stop}) outside utterance of {steps} frames")
    feats = apply_norm(ckpt.norm, features) if ckpt.norm is not None else features
    trace: list = []
    probs = np.asarray(forward(ckpt.params, feats, "eval", trace=trace)).reshape(-1)
    pre, post = trace[-1]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "pre": out_dir / "hidden_pre.csv",
        "post": out_dir / "hidden_post.csv",
        "frames": out_dir / "frames.csv",
    }
    np.savetxt(paths["pre"], pre[start:stop], delimiter=",", fmt="%.17g")
    np.savetxt(paths["post"], post[start:stop], delimiter=",", fmt="%.17g")
    with open(paths["frames"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "truth", "probability", "predicted"])
        for t in range(start, stop):
            truth = int(labels[t]) if labels is not None else ""
            w.writerow([t, truth, repr(float(probs[t])), int(probs[t] >= 0.5)])
    return paths
