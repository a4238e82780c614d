"""Training recipe: warmup + cosine schedule, SGD epochs, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .fusenet import ModelConfig, init_params
from .gradcore import ParamSet, Tensor
from .milhead import LossConfig, SceneTaxonomy, TAU_SCENES, confidences, forward, loss_from_logits

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    initial_lr: float = 0.06
    weight_decay: float = 0.001
    batch_size: int = 48
    epochs: int = 100
    warmup_epochs: int = 5
    momentum: float = 0.9
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 1
    scenes: list[str] = field(default_factory=lambda: list(TAU_SCENES))
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.initial_lr <= 0 or self.batch_size <= 0 or self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("learning rate and batch size must be positive; decay and momentum non-negative")
        self.scenes = list(self.scenes)

    @property
    def taxonomy(self) -> SceneTaxonomy:
        return SceneTaxonomy(tuple(self.scenes))

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{**self.model, "n_classes": len(self.scenes)})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    total_loss: float
    bag_loss: float
    instance_loss: float
    positive_fraction: float
    val_accuracy: float | None = None


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def final_val_accuracy(self) -> float | None:
        vals = [r.val_accuracy for r in self.records if r.val_accuracy is not None]
        return vals[-1] if vals else None

    @property
    def best_val_accuracy(self) -> float | None:
        vals = [r.val_accuracy for r in self.records if r.val_accuracy is not None]
        return max(vals) if vals else None

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "final_val_accuracy": self.final_val_accuracy,
            "best_val_accuracy": self.best_val_accuracy,
        }


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    if epoch < cfg.warmup_epochs:
        return cfg.initial_lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    progress = min(1.0, (epoch - cfg.warmup_epochs) / span)
    return max(0.0, 0.5 * cfg.initial_lr * (1.0 + math.cos(math.pi * progress)))


# ----------------------------------------------------------------------------
# checkpoint format


MILC_MAGIC = b"MILC"
MILC_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ParamSet, epoch: int, path):
    """Write parameters, buffers and momentum to a MILC file (float32, little-endian)."""
    records: list[tuple[str, np.ndarray]] = []
    for name, t in params:
        records.append((name, t.data))
        if name in params.momentum:
            records.append((f"{name}.m", params.momentum[name]))
    chunks = [MILC_MAGIC, struct.pack("<III", MILC_VERSION, epoch, len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[ParamSet, int, list[str]]:
    """Read a MILC file. Returns the parameter set, the epoch, and the record names."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated at offset {pos} (needed {n} more bytes)")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MILC_MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    version, epoch, count = struct.unpack("<III", take(12))
    if version != MILC_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at offset 4")
    arrays: dict[str, np.ndarray] = {}
    names: list[str] = []
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        names.append(name)
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
    params = ParamSet()
    for name in names:
        if name.endswith(".m") and name[:-2] in arrays:
            continue
        params.add(name, arrays[name], trainable=f"{name}.m" in arrays)
        if f"{name}.m" in arrays:
            params.momentum[name] = arrays[f"{name}.m"].copy()
    return params, epoch, names


# ----------------------------------------------------------------------------
# data batches


@dataclass
class Example:
    clip_id: str
    features: np.ndarray  # (F, T) float32
    label: int


def _check_lengths(examples: Sequence[Example]):
    lengths = {e.features.shape for e in examples}
    if len(lengths) > 1:
        raise ValueError(f"clips in a batch must share one shape, found {sorted(lengths)}")


def stack_batch(examples: Sequence[Example], dtype=np.float32) -> tuple[Tensor, np.ndarray]:
    _check_lengths(examples)
    x = np.stack([e.features for e in examples]).astype(dtype)[:, None]
    return Tensor(x), np.array([e.label for e in examples])


def predict_logits(params: ParamSet, mcfg: ModelConfig, examples: Sequence[Example],
                   batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode instance vectors and logits for every example."""
    vecs, logits = [], []
    for start in range(0, len(examples), batch_size):
        x, _ = stack_batch(examples[start : start + batch_size], params["det.w"].dtype)
        inst, z = forward(x, params, mcfg, train=False)
        vecs.append(inst.data)
        logits.append(z.data)
    return np.concatenate(vecs), np.concatenate(logits)


def smi_accuracy(params: ParamSet, mcfg: ModelConfig, examples: Sequence[Example], objective: str = "bce") -> float:
    _, z = predict_logits(params, mcfg, examples)
    y = confidences(z, objective)
    pred = np.argmax(y.max(axis=1), axis=1)
    return float(np.mean(pred == np.array([e.label for e in examples])))


# ----------------------------------------------------------------------------
# training loop


class NonFiniteLoss(FloatingPointError):
    pass


def train_epoch(params: ParamSet, mcfg: ModelConfig, cfg: TrainConfig, examples: Sequence[Example],
                epoch: int) -> EpochRecord:
    lr = lr_at(epoch, cfg)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(examples))
    sums = np.zeros(4)
    n_seen = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [examples[i] for i in order[start : start + cfg.batch_size]]
        x, t = stack_batch(batch, params["det.w"].dtype)
        _, logits = forward(x, params, mcfg, train=True)
        lb = loss_from_logits(logits, t, cfg.loss)
        if not np.isfinite(lb.total):
            raise NonFiniteLoss(f"non-finite loss at epoch {epoch} for clips {[e.clip_id for e in batch]}")
        params.zero_grad()
        lb.tensor.backward()
        gc.sgd_step(params, lr, cfg.momentum, cfg.weight_decay)
        pos = np.mean(np.argmax(logits.data, axis=-1) == t[:, None])
        sums += len(batch) * np.array([lb.total, lb.bag_loss, lb.instance_loss, pos])
        n_seen += len(batch)
    m = sums / n_seen
    return EpochRecord(epoch, lr, float(m[0]), float(m[1]), float(m[2]), float(m[3]))


def fit(
    train_set: Sequence[Example],
    val_set: Sequence[Example],
    cfg: TrainConfig,
    params: ParamSet | None = None,
    start_epoch: int = 0,
    history: TrainHistory | None = None,
    stop_epoch: int | None = None,
    on_epoch: Callable[[ParamSet, EpochRecord], None] | None = None,
) -> tuple[ParamSet, TrainHistory]:
    """Train for epochs ``start_epoch .. stop_epoch-1`` (default: to ``cfg.epochs``)."""
    if not train_set:
        raise ValueError("empty training set")
    mcfg = cfg.model_config()
    if params is None:
        params = init_params(mcfg, cfg.seed)
    history = history or TrainHistory()
    stop = cfg.epochs if stop_epoch is None else stop_epoch
    for epoch in range(start_epoch, stop):
        rec = train_epoch(params, mcfg, cfg, train_set, epoch)
        last = epoch == cfg.epochs - 1 or epoch == stop - 1
        if val_set and ((epoch + 1) % max(1, cfg.eval_every) == 0 or last):
            rec.val_accuracy = smi_accuracy(params, mcfg, val_set, cfg.loss.objective)
        history.records.append(rec)
        log.info("epoch %d lr %.4f loss %.4f (bag %.4f ins %.4f) pos %.3f val %s", rec.epoch, rec.lr,
                 rec.total_loss, rec.bag_loss, rec.instance_loss, rec.positive_fraction, rec.val_accuracy)
        if on_epoch is not None:
            on_epoch(params, rec)
    return params, history
