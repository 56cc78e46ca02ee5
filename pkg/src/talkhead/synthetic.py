"""Synthetic neutral-talk / laugh-talk corpus with known ground truth.

Neutral clips: band-limited noise bursts; the jaw opens and a few expression
coefficients follow the burst envelope.  Laugh clips: the same plus an 8 Hz
amplitude-modulated tone during laugh segments, where a smile offset is added
to the expression coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .audio import Waveform
from .head.assets import HeadAssets
from .head.model import AnimationSequence, animate
from .metrics import geometric_descriptor
from .training import TrainingSample


@dataclass(frozen=True)
class SynthConfig:
    n_neutral: int = 20
    n_laugh: int = 20
    n_val: int = 4
    n_test: int = 4
    duration: float = 3.5
    fps: float = 25.0
    sample_rate: int = 16000
    jaw_gain: float = 0.25
    smile_gain: float = 3.0
    beta_std: float = 0.5
    seed: int = 0


def _ramp_mask(n: int, segments, sr: int, ramp: float = 0.04) -> np.ndarray:
    """Indicator of [t0, t1) segments with raised-cosine edges."""
    t = np.arange(n) / sr
    out = np.zeros(n)
    for t0, t1 in segments:
        up = np.clip((t - t0) / ramp, 0, 1)
        down = np.clip((t1 - t) / ramp, 0, 1)
        out = np.maximum(out, 0.5 - 0.5 * np.cos(np.pi * np.minimum(up, down)))
    return out


def _segments(rng, total: float, count: int, lo: float, hi: float, gap: float = 0.15) -> list[tuple[float, float]]:
    segs: list[tuple[float, float]] = []
    for _ in range(50):
        if len(segs) == count:
            break
        d = rng.uniform(lo, hi)
        t0 = rng.uniform(0.1, max(0.1, total - d - 0.1))
        if all(t0 + d + gap < a or t0 > b + gap for a, b in segs):
            segs.append((t0, t0 + d))
    return sorted(segs)


def smile_direction(assets: HeadAssets, h: float = 1e-3) -> np.ndarray:
    """Unit psi direction that most increases mouth width plus corner lift at rest."""
    from .head.model import FacialFrame, flame_forward
    beta = np.zeros(assets.n_beta)
    g = np.zeros(assets.n_psi)
    for i in range(assets.n_psi):
        e = np.zeros(assets.n_psi)
        e[i] = h
        dp = geometric_descriptor(flame_forward(assets, beta, FacialFrame(e, np.zeros(3))).landmarks, assets.landmark_roles)
        dm = geometric_descriptor(flame_forward(assets, beta, FacialFrame(-e, np.zeros(3))).landmarks, assets.landmark_roles)
        g[i] = ((dp[0] + dp[3]) - (dm[0] + dm[3])) / (2 * h)
    return g / np.linalg.norm(g)


def make_clip(clip_id: str, kind: str, assets: HeadAssets, cfg: SynthConfig, rng: np.random.Generator,
              smile_dir: np.ndarray | None = None) -> tuple[TrainingSample, dict]:
    sr, fps = cfg.sample_rate, cfg.fps
    T = int(cfg.duration * fps)
    n = int(round(T * sr / fps))
    period = n // T
    dur = n / sr

    bursts = _segments(rng, dur, int(rng.integers(3, 6)), 0.25, 0.7)
    env = _ramp_mask(n, bursts, sr) * rng.uniform(0.6, 1.0)
    sos = butter(4, [200, 3000], btype="band", fs=sr, output="sos")
    noise = sosfiltfilt(sos, rng.standard_normal(n))
    audio = 0.3 * env * noise / np.std(noise)

    env_f = env[: T * period].reshape(T, period).mean(axis=1)
    psi = np.zeros((T, assets.n_psi))
    psi[:, 0] = 1.5 * env_f
    psi[:, 1] = -0.8 * env_f
    jaw = np.zeros((T, 3))
    jaw[:, 0] = cfg.jaw_gain * env_f

    laughs: list[tuple[float, float]] = []
    if kind == "laugh":
        if smile_dir is None:
            smile_dir = smile_direction(assets)
        laughs = _segments(rng, dur, int(rng.integers(1, 3)), 0.8, 1.4, gap=0.3)
        lm = _ramp_mask(n, laughs, sr, ramp=0.1)
        t = np.arange(n) / sr
        tone = np.sin(2 * np.pi * rng.uniform(300, 500) * t) * (0.5 + 0.5 * np.sin(2 * np.pi * 8.0 * t))
        audio = audio + 0.25 * lm * tone
        smile_f = lm[: T * period].reshape(T, period).mean(axis=1)
        psi += cfg.smile_gain * smile_f[:, None] * smile_dir[None, :]
    elif kind != "neutral":
        raise ValueError(f"unknown clip kind {kind!r}")

    beta = cfg.beta_std * rng.standard_normal(assets.n_beta)
    frames = AnimationSequence(np.concatenate([psi, jaw], axis=1), fps)
    meshes = animate(assets, beta, frames)
    sample = TrainingSample(
        id=clip_id, waveform=Waveform(np.clip(audio, -1, 1), sr), frames=frames, beta=beta,
        landmarks=np.stack([m.landmarks for m in meshes]), vertices=np.stack([m.vertices for m in meshes]),
        subset=kind)
    info = {"bursts": bursts, "laughs": laughs}
    return sample, info


@dataclass
class SynthCorpus:
    train: list
    val: list
    test: list

    def all(self) -> list:
        return self.train + self.val + self.test


def make_corpus(assets: HeadAssets, cfg: SynthConfig = SynthConfig()) -> SynthCorpus:
    rng = np.random.default_rng(cfg.seed)
    sd = smile_direction(assets)
    train, val, test = [], [], []
    for kind, count in (("neutral", cfg.n_neutral), ("laugh", cfg.n_laugh)):
        n_train = count - cfg.n_val - cfg.n_test
        if n_train < 1:
            raise ValueError(f"{kind}: {count} clips leave nothing for training")
        for i in range(count):
            s, _ = make_clip(f"{kind}{i:03d}", kind, assets, cfg, rng, sd)
            (train if i < n_train else val if i < n_train + cfg.n_val else test).append(s)
    return SynthCorpus(train, val, test)
