"""TAU-style metadata ingestion and the synthetic desk-scale scene corpus."""

from __future__ import annotations

import csv
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import featex
from .milhead import SceneTaxonomy
from .trainer import Example


@dataclass
class ClipRecord:
    path: Path
    scene: int
    device: str | None = None

    @property
    def clip_id(self) -> str:
        return self.path.stem


class MetaError(ValueError):
    pass


def parse_meta(path, taxonomy: SceneTaxonomy | None = None, audio_root=None) -> list[ClipRecord]:
    """Read a DCASE-style TSV (``filename``, ``scene_label``, optional ``source_label``).

    Filenames resolve against ``audio_root``, defaulting to the TSV's own directory.
    """
    taxonomy = taxonomy or SceneTaxonomy()
    path = Path(path)
    root = path.parent if audio_root is None else Path(audio_root)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None or header[:2] != ["filename", "scene_label"]:
            raise MetaError(f"{path}: expected header 'filename\\tscene_label', got {header}")
        dev_col = header.index("source_label") if "source_label" in header else None
        records = []
        for row_no, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise MetaError(f"{path}:{row_no}: expected at least two columns, got {row}")
            name, scene = row[0], row[1]
            if scene not in taxonomy.names:
                raise MetaError(f"{path}:{row_no}: unknown scene {scene!r}")
            device = (row[dev_col] or None) if dev_col is not None and dev_col < len(row) else None
            records.append(ClipRecord(root / name, taxonomy.index(scene), device))
    return records


def write_meta(path, records: Sequence[ClipRecord], taxonomy: SceneTaxonomy):
    path = Path(path)
    with_device = any(r.device for r in records)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["filename", "scene_label"] + (["source_label"] if with_device else []))
        for r in records:
            rel = os.path.relpath(r.path, path.parent)
            w.writerow([rel, taxonomy.names[r.scene]] + ([r.device or ""] if with_device else []))


# ----------------------------------------------------------------------------
# features


def _threads() -> int:
    env = os.environ.get("MILSCENE_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def cache_path(cache_dir, record: ClipRecord) -> Path:
    digest = hashlib.sha1(str(record.path.resolve()).encode()).hexdigest()[:10]
    return Path(cache_dir) / f"{record.clip_id}-{digest}.lmel"


def clip_features(record: ClipRecord, cache_dir=None) -> np.ndarray:
    if cache_dir is not None:
        cp = cache_path(cache_dir, record)
        if cp.exists():
            return featex.load_features(cp)
    values = featex.extract(record.path).values.astype(np.float32)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        featex.save_features(values, cache_path(cache_dir, record))
    return values


def load_examples(records: Sequence[ClipRecord], cache_dir=None, threads: int | None = None) -> list[Example]:
    threads = threads or _threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            feats = list(pool.map(lambda r: clip_features(r, cache_dir), records))
    else:
        feats = [clip_features(r, cache_dir) for r in records]
    return [Example(r.clip_id, f, r.scene) for r, f in zip(records, feats)]


# ----------------------------------------------------------------------------
# synthetic corpus


def default_tones(n_classes: int) -> list[list[float]]:
    return [[round(350.0 * 1.28**k, 1), round(875.0 * 1.28**k, 1)] for k in range(n_classes)]


def default_pairs(n_classes: int) -> list[tuple[int, int]]:
    return [(k, k + 1) for k in range(0, n_classes - 1, 2)]


@dataclass
class SynthConfig:
    n_classes: int = 4
    clips_per_class: int = 10
    clip_seconds: float = 2.0
    sample_rate: int = 16000
    event_tones: list[list[float]] | None = None
    ambiguity_pairs: list[tuple[int, int]] | None = None
    seed: int = 0
    burst_seconds: float = 0.2
    noise_rms: float = 0.05
    tone_amplitude: tuple[float, float] = (0.1, 0.3)
    clip_offset: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.clip_seconds < 0.5:
            raise ValueError("clip_seconds must be >= 0.5")
        if self.event_tones is None:
            self.event_tones = default_tones(self.n_classes)
        if self.ambiguity_pairs is None:
            self.ambiguity_pairs = default_pairs(self.n_classes)
        if len(self.event_tones) != self.n_classes:
            raise ValueError("event_tones needs one frequency list per class")

    def family(self, cls: int) -> int:
        """Background family shared by the classes of an ambiguity pair."""
        for i, (a, b) in enumerate(self.ambiguity_pairs):
            if cls in (a, b):
                return i
        return len(self.ambiguity_pairs) + cls


def background(family: int, n: int, sr: int, rng: np.random.Generator, rms: float) -> np.ndarray:
    """Colored noise whose spectral slope and resonance depend only on ``family``."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.fft.rfftfreq(n, 1.0 / sr)
    slope = 0.6 + 0.5 * (family % 3)
    centre = 200.0 * (1 + family) * (1.7 if family % 2 else 1.0)
    shape = (1.0 + f / 100.0) ** (-slope / 2) * (1.0 + 3.0 * np.exp(-0.5 * ((f - centre) / (0.25 * centre)) ** 2))
    noise = np.fft.irfft(spec * shape, n)
    return noise * (rms / (np.sqrt(np.mean(noise**2)) + 1e-12))


def synth_clip(cfg: SynthConfig, cls: int, index: int) -> tuple[np.ndarray, list[tuple[float, float]]]:
    """One clip of class ``cls``: background plus 1-3 tone bursts. Returns samples and (onset, freq) events."""
    rng = np.random.default_rng([cfg.seed, cls, index])
    sr = cfg.sample_rate
    n = int(round(cfg.clip_seconds * sr))
    x = background(cfg.family(cls), n, sr, rng, cfg.noise_rms * rng.uniform(0.8, 1.25))
    burst = int(round(cfg.burst_seconds * sr))
    ramp = max(1, int(0.01 * sr))
    env = np.ones(burst)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[-ramp:] = np.linspace(1, 0, ramp)
    t = np.arange(burst) / sr
    events = []
    for _ in range(int(rng.integers(1, 4))):
        freq = float(rng.choice(cfg.event_tones[cls]))
        onset = int(rng.integers(0, n - burst + 1))
        amp = rng.uniform(*cfg.tone_amplitude)
        phase = rng.uniform(0, 2 * np.pi)
        x[onset : onset + burst] += amp * env * np.sin(2 * np.pi * freq * t + phase)
        events.append((onset / sr, freq))
    peak = np.abs(x).max()
    if peak > 0.99:
        x *= 0.99 / peak
    return x, events


def synth_generate(cfg: SynthConfig, out_dir, taxonomy: SceneTaxonomy | None = None) -> Path:
    """Write WAVs plus ``meta.tsv`` under ``out_dir``; returns the meta path."""
    taxonomy = taxonomy or SceneTaxonomy.first(cfg.n_classes)
    if taxonomy.C != cfg.n_classes:
        raise ValueError(f"taxonomy has {taxonomy.C} scenes, config asks for {cfg.n_classes}")
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    records = []
    for cls in range(cfg.n_classes):
        for i in range(cfg.clips_per_class):
            idx = cfg.clip_offset + i
            x, _ = synth_clip(cfg, cls, idx)
            path = out_dir / "audio" / f"{taxonomy.names[cls]}-{cfg.seed}-{idx:04d}.wav"
            featex.write_wav(path, x, cfg.sample_rate)
            records.append(ClipRecord(path, cls))
    meta = out_dir / "meta.tsv"
    write_meta(meta, records, taxonomy)
    return meta
