"""Instance detector, MIL decision rules, instance labels and losses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .fusenet import BagOfInstances, ModelConfig, instance_generator_forward
from .gradcore import ParamSet, Tensor

TAU_SCENES = (
    "airport",
    "shopping_mall",
    "metro_station",
    "street_pedestrian",
    "public_square",
    "street_traffic",
    "park",
    "metro",
    "bus",
    "tram",
)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class SceneTaxonomy:
    names: tuple[str, ...] = TAU_SCENES

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ValueError("a taxonomy needs at least two scenes")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate scene names in {self.names}")

    @property
    def C(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def first(cls, n: int) -> SceneTaxonomy:
        if n <= len(TAU_SCENES):
            return cls(TAU_SCENES[:n])
        return cls(tuple(f"scene_{i}" for i in range(n)))


@dataclass
class BagConfidence:
    scores: np.ndarray  # (C,)
    argmax_rows: np.ndarray  # (C,)


@dataclass
class InstanceLabels:
    labels: np.ndarray  # (..., N, C) in {0, 1}
    positive_mask: np.ndarray  # (..., N)


@dataclass
class LossConfig:
    alpha: float | None = None  # None -> C - 1
    instance_label_mode: str = "pnl"  # none | pnl | gt
    objective: str = "bce"  # bce | ce
    ce_negative: str = "exclude"  # exclude | uniform

    def __post_init__(self):
        if self.instance_label_mode not in ("none", "pnl", "gt"):
            raise ValueError(f"unknown instance_label_mode {self.instance_label_mode!r}")
        if self.objective not in ("bce", "ce"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.ce_negative not in ("exclude", "uniform"):
            raise ValueError(f"unknown ce_negative {self.ce_negative!r}")
        if self.alpha is not None and self.alpha < 1:
            raise ValueError("alpha must be >= 1")

    def resolved_alpha(self, n_classes: int) -> float:
        return float(n_classes - 1) if self.alpha is None else float(self.alpha)


@dataclass
class LossBreakdown:
    bag_loss: float
    instance_loss: float
    total: float
    tensor: Tensor = field(repr=False)
    labels: InstanceLabels | None = field(default=None, repr=False)


# ----------------------------------------------------------------------------
# detector and forward pipeline


def detect_instances(bag: BagOfInstances | np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-instance sigmoid confidences; ``W`` is ``(C, d)``."""
    x = bag.vectors if isinstance(bag, BagOfInstances) else np.asarray(bag)
    return gc.activate(gc.dense(Tensor(x), Tensor(W), Tensor(b)), "sigmoid").data


def forward(x: Tensor, params: ParamSet, cfg: ModelConfig, train: bool = True) -> tuple[Tensor, Tensor]:
    """Log-mel batch ``(B, 1, F, T)`` -> (instance vectors, instance logits ``(B, N, C)``)."""
    inst = instance_generator_forward(x, params, cfg, train)
    return inst, gc.dense(inst, params["det.w"], params["det.b"])


def confidences(logits: np.ndarray, objective: str = "bce") -> np.ndarray:
    if objective == "ce":
        return gc.softmax_rows_np(logits)
    return gc._sigmoid(logits)


# ----------------------------------------------------------------------------
# decision rules


def aggregate_smi(y: np.ndarray) -> tuple[BagConfidence, int]:
    y = np.asarray(y)
    arg = np.argmax(y, axis=0)
    scores = y[arg, np.arange(y.shape[1])]
    return BagConfidence(scores, arg), int(np.argmax(scores))


def decide_cmi(y: np.ndarray) -> int:
    """Class with the most instance-argmax votes; ties go to the lowest index."""
    y = np.asarray(y)
    votes = np.bincount(np.argmax(y, axis=1), minlength=y.shape[1])
    return int(np.argmax(votes))


def threshold_positives(y: np.ndarray, theta: float) -> np.ndarray:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    return np.asarray(y) > theta


def assign_instance_labels(y: np.ndarray, t, mode: str = "pnl") -> InstanceLabels:
    """Instance labels from confidences ``(..., N, C)`` and bag targets ``t``.

    ``pnl`` gives e^(t) to rows whose argmax is t and zeros elsewhere; ``gt``
    gives every row e^(t).
    """
    y = np.asarray(y)
    t = np.asarray(t)
    n_classes = y.shape[-1]
    t_b = t[..., None]
    if mode == "pnl":
        positive = np.argmax(y, axis=-1) == t_b
    elif mode == "gt":
        positive = np.ones(y.shape[:-1], dtype=bool)
    else:
        raise ValueError(f"unknown label mode {mode!r}")
    onehot = (np.arange(n_classes) == t_b[..., None]).astype(y.dtype)
    labels = onehot * positive[..., None]
    return InstanceLabels(labels, positive)


# ----------------------------------------------------------------------------
# losses


def wbce_mean(pred, target: np.ndarray, alpha: float) -> Tensor:
    """Mean over all entries of the class-weighted binary cross-entropy."""
    pred = gc.as_tensor(pred)
    y = np.asarray(target, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise gc.DimensionError(f"wbce_mean: pred {pred.shape} vs target {y.shape}")
    p = np.clip(pred.data, PROB_CLAMP, 1 - PROB_CLAMP)
    n = p.size
    value = -(alpha * y * np.log(p) + (1 - y) * np.log1p(-p)).sum() / n
    inside = (pred.data > PROB_CLAMP) & (pred.data < 1 - PROB_CLAMP)

    def backward(g):
        return (g * inside * (-(alpha * y / p - (1 - y) / (1 - p)) / n),)

    return gc._node(np.asarray(value, dtype=pred.dtype), (pred,), backward)


def _row_ce(logits: np.ndarray, target_dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(target_dist * logp).sum(axis=-1), np.exp(logp)


def ce_loss(pred_logits, t, level: str = "bag", labels: InstanceLabels | None = None,
            negative: str = "exclude") -> Tensor:
    """Categorical cross-entropy on softmax probabilities.

    ``bag``: logits ``(..., C)`` against targets ``t``. ``instance``: logits
    ``(..., N, C)``; rows with a positive label target e^(t). Zero-label rows
    are dropped (``negative='exclude'``) or target the uniform distribution.
    """
    z = gc.as_tensor(pred_logits)
    n_classes = z.shape[-1]
    t = np.asarray(t)
    if level == "bag":
        target = (np.arange(n_classes) == t[..., None]).astype(z.dtype)
        weight = np.ones(z.shape[:-1], dtype=z.dtype)
    elif level == "instance":
        if labels is None:
            raise ValueError("instance-level CE needs instance labels")
        target = labels.labels.astype(z.dtype)
        weight = labels.positive_mask.astype(z.dtype)
        if negative == "uniform":
            target = np.where(labels.positive_mask[..., None], target, 1.0 / n_classes).astype(z.dtype)
            weight = np.ones_like(weight)
    else:
        raise ValueError(f"unknown CE level {level!r}")
    count = weight.sum()
    if count == 0:
        return gc._node(np.asarray(0.0, dtype=z.dtype), (z,), lambda g: (np.zeros(z.shape, dtype=z.dtype),))
    row, prob = _row_ce(z.data, target)
    value = (row * weight).sum() / count

    def backward(g):
        # d/dz of -sum(q log softmax(z)) is softmax(z) * sum(q) - q
        return (g * weight[..., None] * (prob * target.sum(axis=-1, keepdims=True) - target) / count,)

    return gc._node(np.asarray(value, dtype=z.dtype), (z,), backward)


def total_loss(bag_pred: Tensor, instance_pred: Tensor, t, cfg: LossConfig,
               labels: InstanceLabels | None = None) -> LossBreakdown:
    """Bag loss plus instance loss.

    For the BCE objective the predictions are sigmoid confidences; for CE they
    are logits (bag logits being the per-class instance maximum). Instance
    labels are derived from ``instance_pred`` unless supplied, and never
    carry gradient.
    """
    t = np.asarray(t)
    n_classes = bag_pred.shape[-1]
    alpha = cfg.resolved_alpha(n_classes)
    if cfg.objective == "bce":
        target = (np.arange(n_classes) == t[..., None]).astype(bag_pred.dtype)
        bag = wbce_mean(bag_pred, target, alpha)
    else:
        bag = ce_loss(bag_pred, t, "bag")
    if cfg.instance_label_mode == "none":
        return LossBreakdown(float(bag.data), 0.0, float(bag.data), bag, None)
    if labels is None:
        labels = assign_instance_labels(instance_pred.data, t, cfg.instance_label_mode)
    if cfg.objective == "bce":
        ins = wbce_mean(instance_pred, labels.labels, alpha)
    else:
        ins = ce_loss(instance_pred, t, "instance", labels, cfg.ce_negative)
    tot = gc.add(bag, ins)
    return LossBreakdown(float(bag.data), float(ins.data), float(tot.data), tot, labels)


def loss_from_logits(logits: Tensor, t, cfg: LossConfig, labels: InstanceLabels | None = None) -> LossBreakdown:
    """Aggregate instance logits ``(B, N, C)`` under the standard MIL rule and score them."""
    if cfg.objective == "bce":
        inst = gc.activate(logits, "sigmoid")
    else:
        inst = logits
    bag, _ = gc.reduce_max_rows(inst)
    return total_loss(bag, inst, t, cfg, labels)
