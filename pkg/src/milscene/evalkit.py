"""Accuracy, confidence statistics, instance ROC and export utilities."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datasets import clip_features
from .fusenet import ModelConfig
from .gradcore import ParamSet
from .milhead import aggregate_smi, confidences, decide_cmi
from .trainer import Example, predict_logits

log = logging.getLogger(__name__)


@dataclass
class Model:
    """Trained parameters plus what is needed to run them."""

    params: ParamSet
    config: ModelConfig
    objective: str = "bce"

    def instance_outputs(self, examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode instance vectors ``(M, N, d)`` and confidences ``(M, N, C)``."""
        vecs, z = predict_logits(self.params, self.config, examples)
        return vecs, confidences(z, self.objective)


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: list[float]
    confusion: list[list[int]]
    rule: str
    n_clips: int
    skipped: int = 0

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


@dataclass
class ConfidenceStats:
    instance_mean: list[list[float]]
    bag_mean: list[list[float]]
    positive_fraction: list[float]

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @property
    def diagonal_instance_mean(self) -> np.ndarray:
        return np.diag(np.array(self.instance_mean))


def decide(y: np.ndarray, rule: str) -> int:
    if rule == "smi":
        return aggregate_smi(y)[1]
    if rule == "cmi":
        return decide_cmi(y)
    raise ValueError(f"unknown decision rule {rule!r}")


def report_from_predictions(labels: Sequence[int], preds: Sequence[int], n_classes: int, rule: str,
                            skipped: int = 0) -> EvalReport:
    conf = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(labels, preds):
        conf[t, p] += 1
    totals = conf.sum(axis=1)
    per_class = [float(conf[c, c] / totals[c]) if totals[c] else float("nan") for c in range(n_classes)]
    total = int(conf.sum())
    acc = float(np.trace(conf) / total) if total else float("nan")
    return EvalReport(acc, per_class, conf.tolist(), rule, total, skipped)


def evaluate(model: Model, examples: Sequence[Example], rule: str = "smi", skipped: int = 0) -> EvalReport:
    if not examples:
        raise ValueError("evaluate needs at least one clip")
    _, y = model.instance_outputs(examples)
    preds = [decide(yi, rule) for yi in y]
    return report_from_predictions([e.label for e in examples], preds, model.config.n_classes, rule, skipped)


def load_readable(records, cache_dir=None) -> tuple[list[Example], int]:
    """Feature examples for every decodable record; the rest are logged and counted."""
    examples, skipped = [], 0
    for r in records:
        try:
            examples.append(Example(r.clip_id, clip_features(r, cache_dir), r.scene))
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", r.path, exc)
            skipped += 1
    return examples, skipped


def evaluate_records(model: Model, records, rule: str = "smi", cache_dir=None) -> EvalReport:
    examples, skipped = load_readable(records, cache_dir)
    return evaluate(model, examples, rule, skipped)


def stats_from_confidences(y: np.ndarray, labels: Sequence[int], n_classes: int) -> ConfidenceStats:
    """Per-true-class averages of instance confidences, bag maxima and positive fractions."""
    labels = np.asarray(labels)
    inst = np.full((n_classes, n_classes), np.nan)
    bag = np.full((n_classes, n_classes), np.nan)
    pos = np.full(n_classes, np.nan)
    for t in range(n_classes):
        sel = y[labels == t]
        if len(sel) == 0:
            continue
        inst[t] = sel.reshape(-1, n_classes).mean(axis=0)
        bag[t] = sel.max(axis=1).mean(axis=0)
        pos[t] = (np.argmax(sel, axis=-1) == t).mean(axis=1).mean()
    return ConfidenceStats(inst.tolist(), bag.tolist(), pos.tolist())


def confidence_stats(model: Model, examples: Sequence[Example]) -> ConfidenceStats:
    _, y = model.instance_outputs(examples)
    return stats_from_confidences(y, [e.label for e in examples], model.config.n_classes)


# ----------------------------------------------------------------------------
# ROC


def roc_curve(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Threshold sweep over observed scores plus sentinels {0, 1}.

    A sample is called positive at threshold ``th`` when ``score > th``, as in
    ``threshold_positives``. The curve is closed with (0, 0) and (1, 1).
    Returns (thresholds, fpr, tpr, trapezoidal AUC).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    thresholds = np.unique(np.concatenate([scores, [0.0, 1.0]]))[::-1]
    thresholds = np.concatenate([[np.inf], thresholds, [-np.inf]])
    order = np.argsort(-scores, kind="stable")
    p_sorted = positive[order]
    cum_tp = np.concatenate([[0], np.cumsum(p_sorted)])
    cum_fp = np.concatenate([[0], np.cumsum(~p_sorted)])
    counts = len(scores) - np.searchsorted(np.sort(scores), thresholds, side="right")
    tpr = cum_tp[counts] / n_pos
    fpr = cum_fp[counts] / n_neg
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return thresholds, fpr, tpr, auc


def instance_roc_from_confidences(y: np.ndarray, labels: Sequence[int], cls: int):
    """One-vs-rest ROC: instances of clips whose true class is ``cls`` are positives."""
    labels = np.asarray(labels)
    n = y.shape[1]
    scores = y[:, :, cls].reshape(-1)
    positive = np.repeat(labels == cls, n)
    return roc_curve(scores, positive)


def instance_roc(model: Model, examples: Sequence[Example], cls: int):
    _, y = model.instance_outputs(examples)
    return instance_roc_from_confidences(y, [e.label for e in examples], cls)


# ----------------------------------------------------------------------------
# exports


def confidence_mask(instance_conf: np.ndarray, n_frames: int, factor: int = 8) -> np.ndarray:
    """Nearest-neighbour upsampling of per-instance values to ``n_frames``; the tail repeats the last."""
    idx = np.minimum(np.arange(n_frames) // factor, len(instance_conf) - 1)
    return np.asarray(instance_conf)[idx]


def masked_spectrogram(spec: np.ndarray, instance_conf: np.ndarray, factor: int = 8) -> np.ndarray:
    lo, hi = spec.min(), spec.max()
    norm = (spec - lo) / (hi - lo) if hi > lo else np.zeros_like(spec)
    return norm * confidence_mask(instance_conf, spec.shape[1], factor)[None, :]


def write_pgm(path, image: np.ndarray):
    """8-bit binary PGM; values in [0, 1], first row at the top."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def export_masks(model: Model, example: Example, out_path) -> np.ndarray:
    """Write ``<out>.csv`` (rows = mel bins) and ``<out>.pgm``; returns the masked array."""
    _, y = model.instance_outputs([example])
    y = y[0]
    pred = aggregate_smi(y)[1]
    masked = masked_spectrogram(example.features, y[:, pred], 2 ** sum(model.config.pools))
    out = Path(out_path)
    np.savetxt(out.with_suffix(".csv"), masked, delimiter=",", fmt="%.6f")
    # low mel bins at the bottom of the image
    write_pgm(out.with_suffix(".pgm"), masked[::-1])
    return masked


def export_instances(model: Model, examples: Sequence[Example], out_path, scene_names: Sequence[str]) -> int:
    """CSV of every instance vector with its clip, scene, positivity and predicted class."""
    vecs, y = model.instance_outputs(examples)
    d = vecs.shape[-1]
    rows = 0
    with Path(out_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "true_scene", "instance_index", "positive", "predicted_class"]
                   + [f"v{i}" for i in range(d)])
        for e, v, yi in zip(examples, vecs, y):
            arg = np.argmax(yi, axis=1)
            for i in range(len(v)):
                w.writerow([e.clip_id, scene_names[e.label], i, int(arg[i] == e.label), int(arg[i])]
                           + [f"{val:.7g}" for val in v[i]])
                rows += 1
    return rows
