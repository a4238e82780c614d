"""Audio decoding, resampling and log-mel feature extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TARGET_SR = 16000
WIN_LENGTH = 2048  # 128 ms at 16 kHz
HOP_LENGTH = 512  # 32 ms at 16 kHz
N_MELS = 256
LOG_FLOOR = 1e-10
RESAMPLE_HALF_TAPS = 32

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray  # (channels, n)
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.shape[0] not in (1, 2):
            raise ValueError(f"expected 1 or 2 channels, got {self.samples.shape[0]}")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames)
    sample_rate: int = TARGET_SR
    window_ms: float = 1000.0 * WIN_LENGTH / TARGET_SR
    hop_ms: float = 1000.0 * HOP_LENGTH / TARGET_SR
    n_mels: int = field(init=False)

    def __post_init__(self):
        self.n_mels = self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


# ----------------------------------------------------------------------------
# WAV I/O


def decode_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file holding 16-bit PCM or 32-bit float samples."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            if cid == b"data":
                raise AudioFormatError(f"{path}: truncated data chunk ({len(body)} of {size} bytes)")
            raise AudioFormatError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise AudioFormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise AudioFormatError(f"{path}: missing data chunk")
    tag, channels, sr, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels not in (1, 2):
        raise AudioFormatError(f"{path}: {channels} channels unsupported")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise AudioFormatError(f"{path}: unsupported encoding (format tag {tag:#06x}, {bits} bits)")
    n_frames = len(data) // block_align
    if n_frames * block_align != len(data):
        raise AudioFormatError(f"{path}: data size {len(data)} is not a multiple of block size {block_align}")
    arr = np.frombuffer(data, dtype=dtype).reshape(n_frames, channels).T.astype(np.float64) * scale
    return AudioClip(arr, sr)


def write_wav(path, samples: np.ndarray, sample_rate: int, encoding: str = "pcm16"):
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    channels = samples.shape[0]
    if encoding == "pcm16":
        q = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
        tag, bits = _PCM, 16
    elif encoding == "float32":
        q = samples.astype("<f4")
        tag, bits = _IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    payload = q.T.tobytes()
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * block, block, bits)
    out = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(out)) + out)


# ----------------------------------------------------------------------------
# preprocessing


def resample(x: np.ndarray, sr_in: int, sr_out: int, half_taps: int = RESAMPLE_HALF_TAPS) -> np.ndarray:
    """Hann-windowed sinc interpolation of a 1-D signal.

    The lowpass cutoff sits at the lower Nyquist rate; the kernel keeps
    ``half_taps`` zero crossings on each side.
    """
    if sr_in == sr_out:
        return x.copy()
    ratio = sr_out / sr_in
    cutoff = min(1.0, ratio)
    half_width = int(np.ceil(half_taps / cutoff))
    n_out = int(np.floor(len(x) * ratio))
    offsets = np.arange(-half_width + 1, half_width + 1)
    xp = np.pad(x, (half_width, half_width + 1))
    out = np.empty(n_out)
    chunk = max(1, 2_000_000 // len(offsets))
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(n_out, start + chunk))
        centre = n / ratio
        base = np.floor(centre).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        u = centre[:, None] - idx
        window = 0.5 + 0.5 * np.cos(np.pi * u / half_width)
        window[np.abs(u) >= half_width] = 0.0
        kernel = cutoff * np.sinc(cutoff * u) * window
        out[start : start + len(n)] = (xp[idx + half_width] * kernel).sum(axis=1)
    return out


def preprocess(clip: AudioClip) -> AudioClip:
    """Downmix to mono and resample to 16 kHz."""
    if clip.num_samples == 0:
        raise ValueError("cannot preprocess an empty clip")
    if clip.channels == 1 and clip.sample_rate == TARGET_SR:
        return clip
    mono = clip.samples.mean(axis=0)
    if clip.sample_rate != TARGET_SR:
        mono = resample(mono, clip.sample_rate, TARGET_SR)
    return AudioClip(mono[None, :], TARGET_SR)


# ----------------------------------------------------------------------------
# log-mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = WIN_LENGTH,
    sr: int = TARGET_SR,
    fmin: float = 0.0,
    fmax: float = TARGET_SR / 2,
) -> np.ndarray:
    """Unnormalized triangular filters on the HTK mel scale, shape (n_mels, n_fft//2 + 1)."""
    fft_freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (centre - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centres(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = TARGET_SR / 2) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


_FB_CACHE: dict[tuple, np.ndarray] = {}


def power_spectrogram(x: np.ndarray, n_fft: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    pad = n_fft // 2
    mode = "reflect" if len(x) > pad else "constant"
    xp = np.pad(x, pad, mode=mode)
    n_frames = 1 + (len(xp) - n_fft) // hop
    frames = np.lib.stride_tricks.as_strided(
        xp, shape=(n_frames, n_fft), strides=(xp.strides[0] * hop, xp.strides[0])
    )
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


def logmel(clip: AudioClip, n_mels: int = N_MELS) -> LogMelSpectrogram:
    if clip.channels != 1 or clip.sample_rate != TARGET_SR:
        raise ValueError("logmel expects mono 16 kHz audio; run preprocess() first")
    if clip.num_samples < HOP_LENGTH:
        raise ValueError(f"clip of {clip.num_samples} samples is shorter than one hop ({HOP_LENGTH})")
    key = (n_mels, WIN_LENGTH, TARGET_SR)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(n_mels)
    power = power_spectrogram(clip.samples[0])
    energy = _FB_CACHE[key] @ power
    return LogMelSpectrogram(np.log(energy + LOG_FLOOR))


def expected_frames(num_samples: int, hop: int = HOP_LENGTH) -> int:
    return 1 + num_samples // hop


def extract(path) -> LogMelSpectrogram:
    return logmel(preprocess(decode_wav(path)))


# ----------------------------------------------------------------------------
# feature cache

LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1


def save_features(spec: LogMelSpectrogram | np.ndarray, path):
    values = spec.values if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)
    n_mels, n_frames = values.shape
    header = LMEL_MAGIC + struct.pack("<III", LMEL_VERSION, n_mels, n_frames)
    Path(path).write_bytes(header + np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != LMEL_MAGIC:
        raise ValueError(f"{path}: bad LMEL magic")
    version, n_mels, n_frames = struct.unpack_from("<III", raw, 4)
    if version != LMEL_VERSION:
        raise ValueError(f"{path}: unsupported LMEL version {version}")
    need = 16 + 4 * n_mels * n_frames
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(n_mels, n_frames).astype(np.float32)
