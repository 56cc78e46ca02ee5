"""Autoregressive audio-to-face transformer, and the two-stage composition.

A StageModel is: frozen TCN -> linear -> sinusoidal PE -> post-norm encoder,
then a post-norm decoder whose queries are [start token, projected history
frames], with causal self-attention and cross attention onto the audio
representation.  The output at query position i predicts frame i + 1.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .audio import TcnConfig, TcnWeights, Waveform, align_to_fps, init_tcn_weights, tcn_extract
from .autodiff import Tensor, as_tensor, no_grad, ops
from .errors import ShapeError
from .head.assets import HeadAssets
from .head.model import AnimationSequence, MeshOutput, animate


@dataclass(frozen=True)
class ModelConfig:
    n_psi: int = 12
    d_model: int = 128
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ff_dim: int = 0            # 0 means 4 * d_model
    max_T: int = 1000
    align_bias: bool = True
    bias_period: int = 1
    align_slope: float = 1.0
    zero_output: bool = False  # stage-2 starts as an exact zero residual
    fps: float = 25.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if min(self.n_psi, self.d_model, self.heads, self.max_T, self.bias_period) < 1:
            raise ValueError("model sizes must be positive")
        if self.enc_layers < 0 or self.dec_layers < 1:
            raise ValueError("need >= 0 encoder layers and >= 1 decoder layer")

    @property
    def out_dim(self) -> int:
        return self.n_psi + 3

    @property
    def ff(self) -> int:
        return self.ff_dim or 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sinusoidal_pe(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    div = np.exp(np.arange(0, d, 2) * (-math.log(10000.0) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: d // 2])
    return pe


def alignment_bias(n_q: int, n_k: int, period: int, slope: float) -> np.ndarray:
    """Additive prior favouring key s for query t: -slope * floor(|t - s| / period)."""
    t = np.arange(n_q)[:, None]
    s = np.arange(n_k)[None, :]
    return -slope * np.floor(np.abs(t - s) / period)


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def _init_params(cfg: ModelConfig, d_audio: int, rng: np.random.Generator) -> dict[str, Tensor]:
    p: dict[str, np.ndarray] = {}
    d, ff = cfg.d_model, cfg.ff

    def dense(name, n_in, n_out):
        p[name + ".w"] = rng.standard_normal((n_in, n_out)) / math.sqrt(n_in)
        p[name + ".b"] = np.zeros(n_out)

    def norm(name):
        p[name + ".g"] = np.ones(d)
        p[name + ".b"] = np.zeros(d)

    def attn(name):
        for k in ("q", "k", "v", "o"):
            dense(f"{name}.{k}", d, d)

    dense("enc.in", d_audio, d)
    for i in range(cfg.enc_layers):
        attn(f"enc.{i}.self")
        norm(f"enc.{i}.n1")
        dense(f"enc.{i}.ff1", d, ff)
        dense(f"enc.{i}.ff2", ff, d)
        norm(f"enc.{i}.n2")
    p["dec.start"] = np.zeros(d)
    dense("dec.in", cfg.out_dim, d)
    for i in range(cfg.dec_layers):
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.n1")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.n2")
        dense(f"dec.{i}.ff1", d, ff)
        dense(f"dec.{i}.ff2", ff, d)
        norm(f"dec.{i}.n3")
    dense("dec.out", d, cfg.out_dim)
    if cfg.zero_output:
        p["dec.out.w"][:] = 0.0
    else:
        p["dec.out.w"] *= 0.1
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


class StageModel:
    """One stage (E, D) with its own frozen TCN."""

    def __init__(self, cfg: ModelConfig, tcn_cfg: TcnConfig, tcn: TcnWeights, params: dict[str, Tensor],
                 frozen: bool = False):
        self.cfg = cfg
        self.tcn_cfg = tcn_cfg
        self.tcn = tcn
        self.params = params
        self.frozen = frozen

    @classmethod
    def init(cls, cfg: ModelConfig, tcn_cfg: TcnConfig | None = None, seed: int = 0) -> "StageModel":
        tcn_cfg = tcn_cfg or TcnConfig()
        rng = np.random.default_rng(seed)
        tcn = init_tcn_weights(tcn_cfg, seed + 7919)
        return cls(cfg, tcn_cfg, tcn, _init_params(cfg, tcn_cfg.channels, rng))

    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_weights(self, w: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in w:
                raise ShapeError(f"checkpoint lacks weight {k!r}")
            if w[k].shape != t.shape:
                raise ShapeError(f"weight {k!r}: checkpoint {w[k].shape}, model {t.shape}")
            t.data = np.array(w[k], dtype=np.float64)

    def freeze(self) -> "StageModel":
        self.frozen = True
        for t in self.params.values():
            t.requires_grad = False
            t._tracked = False
            t.grad = None
        return self


# -- layers --------------------------------------------------------------------

def _dense(p, name, x):
    return ops.add(ops.matmul(x, p[name + ".w"]), p[name + ".b"])


def _norm(p, name, x):
    return ops.add(ops.mul(ops.layer_norm(x), p[name + ".g"]), p[name + ".b"])


def _attention(p, name, xq, xkv, heads, mask=None, bias=None) -> Tensor:
    n_q, d = xq.shape
    n_k = xkv.shape[0]
    dh = d // heads
    q = ops.transpose(ops.reshape(_dense(p, name + ".q", xq), (n_q, heads, dh)), (1, 0, 2))
    k = ops.transpose(ops.reshape(_dense(p, name + ".k", xkv), (n_k, heads, dh)), (1, 2, 0))
    v = ops.transpose(ops.reshape(_dense(p, name + ".v", xkv), (n_k, heads, dh)), (1, 0, 2))
    scores = ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dh))          # (h, n_q, n_k)
    if bias is not None:
        scores = ops.add(scores, bias)
    if mask is not None:
        scores = ops.masked_fill(scores, mask)
    o = ops.matmul(ops.softmax(scores), v)                                 # (h, n_q, dh)
    o = ops.reshape(ops.transpose(o, (1, 0, 2)), (n_q, d))
    return _dense(p, name + ".o", o)


def _ff(p, name, x):
    return _dense(p, name + "2", ops.gelu(_dense(p, name + "1", x)))


# -- encoder -------------------------------------------------------------------

def audio_features(m: StageModel, w: Waveform, T: int) -> np.ndarray:
    """Frozen part of the encoder: TCN features aligned to T frames."""
    feats = tcn_extract(w, m.tcn_cfg, m.tcn)
    return align_to_fps(feats, m.cfg.fps, T)


def encode_features(m: StageModel, feats: np.ndarray) -> Tensor:
    T = feats.shape[0]
    if T > m.cfg.max_T:
        raise ShapeError(f"sequence of {T} frames exceeds max_T={m.cfg.max_T}")
    p = m.params
    x = ops.add(_dense(p, "enc.in", feats), sinusoidal_pe(T, m.cfg.d_model))
    for i in range(m.cfg.enc_layers):
        x = _norm(p, f"enc.{i}.n1", ops.add(x, _attention(p, f"enc.{i}.self", x, x, m.cfg.heads)))
        x = _norm(p, f"enc.{i}.n2", ops.add(x, _ff(p, f"enc.{i}.ff", x)))
    return x


def encode_audio(m: StageModel, w: Waveform, T: int) -> Tensor:
    """Speech representation, T x d_model."""
    if T < 1:
        raise ShapeError("encode_audio: T must be >= 1")
    return encode_features(m, audio_features(m, w, T))


# -- decoder -------------------------------------------------------------------

def decode_sequence(m: StageModel, repr_: Tensor, history) -> Tensor:
    """Predictions for frames 1..L+1 given history frames 1..L (L may be 0).

    Row i depends on history rows < i only.  Used with ground-truth history
    for teacher forcing and by ``decode_step``.
    """
    cfg, p = m.cfg, m.params
    hist = as_tensor(np.zeros((0, cfg.out_dim)) if history is None else history)
    if hist.ndim != 2 or hist.shape[1] != cfg.out_dim:
        raise ShapeError(f"decode: history frames have shape {hist.shape}, expected (L, {cfg.out_dim})")
    n = hist.shape[0] + 1
    if n > repr_.shape[0]:
        raise ShapeError(f"decode: {n} query positions but only {repr_.shape[0]} audio frames")
    start = ops.reshape(p["dec.start"], (1, cfg.d_model))
    tokens = ops.concat([start, _dense(p, "dec.in", hist)], axis=0) if n > 1 else start
    x = ops.add(tokens, sinusoidal_pe(n, cfg.d_model))
    mask = causal_mask(n)
    bias = alignment_bias(n, repr_.shape[0], cfg.bias_period, cfg.align_slope) if cfg.align_bias else None
    for i in range(cfg.dec_layers):
        x = _norm(p, f"dec.{i}.n1", ops.add(x, _attention(p, f"dec.{i}.self", x, x, cfg.heads, mask=mask)))
        x = _norm(p, f"dec.{i}.n2", ops.add(x, _attention(p, f"dec.{i}.cross", x, repr_, cfg.heads, bias=bias)))
        x = _norm(p, f"dec.{i}.n3", ops.add(x, _ff(p, f"dec.{i}.ff", x)))
    return _dense(p, "dec.out", x)


def decode_step(m: StageModel, repr_: Tensor, history) -> np.ndarray:
    """f_t from the speech representation and frames 1..t-1."""
    with no_grad():
        return decode_sequence(m, repr_, history).data[-1].copy()


def teacher_forced(m: StageModel, repr_: Tensor, target) -> Tensor:
    """All T predictions in one causal pass, history = target shifted by one."""
    target = np.asarray(target)
    return decode_sequence(m, repr_, target[:-1])


def generate_from_repr(m: StageModel, repr_: Tensor, T: int) -> np.ndarray:
    out = np.zeros((0, m.cfg.out_dim))
    with no_grad():
        for _ in range(T):
            f = decode_sequence(m, repr_, out).data[-1]
            out = np.vstack([out, f[None, :]])
    return out


def generate(m: StageModel, w: Waveform, T: int) -> AnimationSequence:
    if T < 1:
        raise ShapeError("generate: T must be >= 1")
    with no_grad():
        r = encode_audio(m, w, T)
    return AnimationSequence(generate_from_repr(m, r, T), m.cfg.fps)


# -- composition -----------------------------------------------------------------

@dataclass
class ComposedAnimator:
    stage1: StageModel
    stage2: StageModel

    def __post_init__(self):
        a, b = self.stage1.cfg, self.stage2.cfg
        if a.out_dim != b.out_dim or a.fps != b.fps:
            raise ShapeError("stage models disagree on frame size or fps")


def compose(stage1_out: AnimationSequence, residual: AnimationSequence) -> AnimationSequence:
    if stage1_out.params.shape != residual.params.shape:
        raise ShapeError(f"compose: shapes {stage1_out.params.shape} and {residual.params.shape} differ")
    if stage1_out.fps != residual.fps:
        raise ShapeError(f"compose: fps {stage1_out.fps} vs {residual.fps}")
    return AnimationSequence(stage1_out.params + residual.params, stage1_out.fps)


@dataclass
class TwoStageOutput:
    composed: AnimationSequence
    stage1: AnimationSequence
    stage2: AnimationSequence
    meshes: list = field(default_factory=list)


def run_two_stage(c: ComposedAnimator, w: Waveform, T: int, beta, assets: HeadAssets) -> TwoStageOutput:
    if not c.stage1.frozen:
        raise ValueError("run_two_stage: stage-1 model must be frozen")
    s1 = generate(c.stage1, w, T)
    s2 = generate(c.stage2, w, T)
    out = compose(s1, s2)
    meshes: Sequence[MeshOutput] = animate(assets, beta, out)
    return TwoStageOutput(out, s1, s2, list(meshes))
