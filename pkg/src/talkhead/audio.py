"""Waveform I/O and the frozen TCN feature extractor."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .autodiff import Tensor, no_grad, ops
from .errors import DataError, FormatError, NonFiniteError, ShapeError
from .io_utils import atomic_write

DEFAULT_RATE = 16000


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise ShapeError(f"waveform must be mono (1-D), got shape {s.shape}")
        if self.sample_rate <= 0:
            raise DataError("sample rate must be positive")
        if not np.all(np.isfinite(s)):
            raise NonFiniteError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)

    def slice_seconds(self, t0: float, t1: float) -> "Waveform":
        a = int(round(t0 * self.sample_rate))
        b = int(round(t1 * self.sample_rate))
        return Waveform(self.samples[a:b], self.sample_rate)


@dataclass
class AudioFeatureSequence:
    features: np.ndarray  # (T_a, d_a)
    native_rate: float

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class TcnConfig:
    kernels: tuple = (10, 3, 3, 3, 3, 2, 2)
    strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    channels: int = 64
    sample_rate: int = DEFAULT_RATE

    def __post_init__(self):
        if len(self.kernels) != len(self.strides) or not self.kernels:
            raise ValueError("TCN kernels and strides must be non-empty and equal length")
        if min(self.strides) < 1 or min(self.kernels) < 1:
            raise ValueError("TCN kernels and strides must be >= 1")
        if self.channels <= 0:
            raise ValueError("TCN channels must be positive")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.total_stride

    def min_samples(self) -> int:
        """Shortest input that yields one output frame."""
        n = 1
        for k, s in zip(reversed(self.kernels), reversed(self.strides)):
            n = (n - 1) * s + k
        return n

    def output_length(self, n_samples: int) -> int:
        n = n_samples
        for k, s in zip(self.kernels, self.strides):
            if n < k:
                return 0
            n = (n - k) // s + 1
        return n

    def to_dict(self) -> dict:
        return {"kernels": list(self.kernels), "strides": list(self.strides),
                "channels": self.channels, "sample_rate": self.sample_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "TcnConfig":
        return cls(tuple(d["kernels"]), tuple(d["strides"]), int(d["channels"]), int(d.get("sample_rate", DEFAULT_RATE)))


@dataclass
class TcnWeights:
    kernels: list = field(default_factory=list)  # (C_out, C_in, K) per layer
    biases: list = field(default_factory=list)   # (C_out,) per layer

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"tcn/w{i}"] = w
            out[f"tcn/b{i}"] = b
        return out

    @classmethod
    def from_named(cls, d: dict[str, np.ndarray]) -> "TcnWeights":
        n = sum(1 for k in d if k.startswith("tcn/w"))
        return cls([d[f"tcn/w{i}"] for i in range(n)], [d[f"tcn/b{i}"] for i in range(n)])


def init_tcn_weights(cfg: TcnConfig, seed: int) -> TcnWeights:
    """He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    c_in = 1
    for k in cfg.kernels:
        ws.append(rng.standard_normal((cfg.channels, c_in, k)) * np.sqrt(2.0 / (c_in * k)))
        bs.append(np.zeros(cfg.channels))
        c_in = cfg.channels
    return TcnWeights(ws, bs)


def load_wav(path) -> Waveform:
    try:
        rate, data = wavfile.read(os.fspath(path))
    except FileNotFoundError:
        raise DataError(f"{path}: no such audio file") from None
    except (ValueError, OSError) as err:
        raise FormatError(f"{path}: unreadable WAVE file ({err})") from None
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype} (need 16-bit PCM or 32-bit float)")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise DataError(f"{path}: empty audio")
    return Waveform(x, int(rate))


def save_wav(path, w: Waveform) -> None:
    """Writes 32-bit float samples (lossless for float32-representable input)."""
    with atomic_write(path, "wb") as fh:
        wavfile.write(fh, int(w.sample_rate), w.samples.astype(np.float32))


def resample(w: Waveform, target_rate: int) -> Waveform:
    if target_rate <= 0:
        raise DataError("target rate must be positive")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    n_out = max(1, int(round(len(w) * target_rate / w.sample_rate)))
    t_src = np.arange(len(w)) / w.sample_rate
    t_out = np.arange(n_out) / target_rate
    return Waveform(np.interp(t_out, t_src, w.samples), int(target_rate))


def tcn_extract(w: Waveform, cfg: TcnConfig, weights: TcnWeights) -> AudioFeatureSequence:
    """conv -> layer norm over channels -> GELU, per layer."""
    if w.sample_rate != cfg.sample_rate:
        raise DataError(f"tcn_extract: audio at {w.sample_rate} Hz, expected {cfg.sample_rate} Hz (resample first)")
    need = cfg.min_samples()
    if len(w) < need:
        raise DataError(f"tcn_extract: audio has {len(w)} samples, receptive field needs at least {need}")
    if len(weights.kernels) != len(cfg.kernels):
        raise ShapeError(f"tcn_extract: {len(weights.kernels)} weight layers for a {len(cfg.kernels)}-layer config")
    c_in = 1
    for i, (wk, k) in enumerate(zip(weights.kernels, cfg.kernels)):
        if wk.shape != (cfg.channels, c_in, k):
            raise ShapeError(f"tcn_extract: layer {i} kernel {wk.shape}, expected {(cfg.channels, c_in, k)}")
        c_in = cfg.channels
    with no_grad():
        h = Tensor(w.samples[None, :])
        for wk, b, s in zip(weights.kernels, weights.biases, cfg.strides):
            h = ops.conv1d(h, wk, b, stride=s)                          # (C, L)
            h = ops.gelu(ops.layer_norm(ops.transpose(h)))             # (L, C)
            h = ops.transpose(h)
    return AudioFeatureSequence(np.ascontiguousarray(h.data.T), cfg.frame_rate)


def align_to_fps(f: AudioFeatureSequence, fps: float, T: int) -> np.ndarray:
    """Linear interpolation from T_a feature rows to T video frames, endpoints to endpoints.

    A single feature row is replicated.  ``fps`` is carried for bookkeeping only:
    the mapping depends on the two lengths.
    """
    if T < 1:
        raise DataError("align_to_fps: T must be >= 1")
    if fps <= 0:
        raise DataError("align_to_fps: fps must be positive")
    if f.T == T:
        return f.features.copy()
    return ops.interp_matrix(f.T, T) @ f.features
