"""Stage losses, cropping and the two-stage training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .animator import (ModelConfig, StageModel, audio_features, decode_sequence, encode_features,
                       generate_from_repr)
from .audio import TcnConfig, TcnWeights, Waveform
from .autodiff import AdamState, Tensor, adam_step, as_tensor, backward, get_tape, no_grad, ops, zero_grads
from .containers import Checkpoint, config_hash
from .errors import DataError, NonFiniteError, NumericalAbort, ShapeError
from .head.assets import HeadAssets
from .head.model import AnimationSequence, frames_forward

log = logging.getLogger(__name__)

# Subset selectors: MEAD-like clips carry the neutral-talk tag, CelebV-like the laugh-talk tag.
SUBSETS = {"mead": ("neutral",), "celeb": ("laugh",), "both": ("neutral", "laugh")}


@dataclass(frozen=True)
class LossWeights:
    lam_exp: float = 1.0
    lam_lmk: float = 1.0
    # landmark / vertex coordinates enter the losses in millimetres
    length_scale: float = 1000.0

    def __post_init__(self):
        if self.lam_exp < 0 or self.lam_lmk < 0 or self.length_scale <= 0:
            raise ValueError("loss weights must be non-negative (length scale positive)")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 1
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-6
    crop_len: int = 100
    seed: int = 0
    stage: int = 1
    subset: str = "both"
    max_steps: int = 0  # 0: no cap
    # teacher-forcing regularizers on the history stream (0 disables)
    history_noise: float = 0.0
    history_dropout: float = 0.0

    def __post_init__(self):
        if self.lr <= 0 or self.max_epochs < 1 or self.patience < 1 or self.crop_len < 1:
            raise ValueError("training hyperparameters must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.subset not in SUBSETS:
            raise ValueError(f"subset must be one of {sorted(SUBSETS)}, got {self.subset!r}")


@dataclass
class TrainingSample:
    id: str
    waveform: Waveform
    frames: AnimationSequence
    beta: np.ndarray
    landmarks: np.ndarray           # (T, n_j, 3)
    vertices: np.ndarray            # (T, n_v, 3)
    subset: str = "neutral"         # neutral-talk | laugh-talk
    offset: int = 0                 # first frame index inside the parent clip

    def __post_init__(self):
        T = self.frames.T
        if self.landmarks.shape[0] != T or self.vertices.shape[0] != T:
            raise ShapeError(f"sample {self.id}: landmark/vertex sequences do not have {T} frames")
        period = self.waveform.sample_rate / self.frames.fps
        if abs(len(self.waveform) - T * period) > period + 1e-9:
            raise DataError(f"sample {self.id}: audio lasts {self.waveform.duration:.3f} s "
                            f"but {T} frames at {self.frames.fps} fps need {T / self.frames.fps:.3f} s")

    @property
    def T(self) -> int:
        return self.frames.T


def sample_crop(sample: TrainingSample, crop_len: int, rng: np.random.Generator) -> TrainingSample:
    """Random contiguous window; frame t covers samples [t/fps, (t+1)/fps)."""
    if crop_len < 1:
        raise ValueError("crop_len must be >= 1")
    T = sample.T
    if crop_len >= T:
        return sample
    k = int(rng.integers(0, T - crop_len + 1))
    sr, fps = sample.waveform.sample_rate, sample.frames.fps
    a = int(round(k * sr / fps))
    b = min(int(round((k + crop_len) * sr / fps)), len(sample.waveform))
    return TrainingSample(
        id=sample.id, waveform=Waveform(sample.waveform.samples[a:b], sr),
        frames=AnimationSequence(sample.frames.params[k:k + crop_len], fps),
        beta=sample.beta, landmarks=sample.landmarks[k:k + crop_len],
        vertices=sample.vertices[k:k + crop_len], subset=sample.subset, offset=sample.offset + k)


def _frames_tensor(pred) -> Tensor:
    return as_tensor(pred.params if isinstance(pred, AnimationSequence) else pred)


def loss_stage1(pred, gt: TrainingSample, assets: HeadAssets, weights: LossWeights = LossWeights()) -> Tensor:
    """lam_exp * MSE(psi) + lam_lmk * MSE(3-D landmarks of M(beta_gt, pred))."""
    pred = _frames_tensor(pred)
    if pred.shape != gt.frames.params.shape:
        raise ShapeError(f"loss_stage1: prediction {pred.shape} vs ground truth {gt.frames.params.shape}")
    n_psi = assets.n_psi
    psi_hat = ops.index(pred, (slice(None), slice(0, n_psi)))
    loss = ops.scale(ops.mse(psi_hat, gt.frames.psi), weights.lam_exp)
    if weights.lam_lmk > 0:
        _, lmk = frames_forward(assets, gt.beta, pred)
        s = weights.length_scale
        loss = ops.add(loss, ops.scale(ops.mse(ops.scale(lmk, s), gt.landmarks * s), weights.lam_lmk))
    return loss


def loss_stage2(composed_pred, gt: TrainingSample, assets: HeadAssets, weights: LossWeights = LossWeights()) -> Tensor:
    """MSE between GT vertices and M(beta_gt, F_hat + F_hat')."""
    pred = _frames_tensor(composed_pred)
    if pred.shape != gt.frames.params.shape:
        raise ShapeError(f"loss_stage2: prediction {pred.shape} vs ground truth {gt.frames.params.shape}")
    verts, _ = frames_forward(assets, gt.beta, pred)
    s = weights.length_scale
    return ops.mse(ops.scale(verts, s), gt.vertices * s)


def select_subset(samples: Sequence[TrainingSample], subset: str) -> list[TrainingSample]:
    tags = SUBSETS[subset]
    return [s for s in samples if s.subset in tags]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list = field(default_factory=list)
    initial_train_loss: float = float("nan")
    final_train_loss: float = float("nan")
    steps: int = 0


class _Runner:
    """Per-run caches for frozen computations (TCN features, stage-1 outputs)."""

    def __init__(self, model: StageModel, stage1: StageModel | None, assets: HeadAssets, weights: LossWeights,
                 cfg: TrainConfig | None = None):
        self.model = model
        self.cfg = cfg or TrainConfig()
        self.stage1 = stage1
        self.assets = assets
        self.weights = weights
        self._feats: dict = {}
        self._s1: dict = {}

    def feats(self, m: StageModel, s: TrainingSample) -> np.ndarray:
        key = (id(m), s.id, s.offset, s.T)
        if key not in self._feats:
            self._feats[key] = audio_features(m, s.waveform, s.T)
        return self._feats[key]

    def stage1_frames(self, s: TrainingSample) -> np.ndarray:
        """Free-running frozen stage-1 output for this window."""
        key = (s.id, s.offset, s.T)
        if key not in self._s1:
            with no_grad():
                r = encode_features(self.stage1, self.feats(self.stage1, s))
                self._s1[key] = generate_from_repr(self.stage1, r, s.T)
        return self._s1[key]

    def _history(self, target: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        hist = target[:-1]
        if rng is None or not (self.cfg.history_noise or self.cfg.history_dropout):
            return hist
        hist = hist + self.cfg.history_noise * hist.std(axis=0, keepdims=True) * rng.standard_normal(hist.shape)
        if self.cfg.history_dropout:
            keep = rng.random(hist.shape[0]) >= self.cfg.history_dropout
            hist = hist * keep[:, None]
        return hist

    def loss(self, s: TrainingSample, rng: np.random.Generator | None = None) -> Tensor:
        """Teacher-forced stage loss; ``rng`` switches on history regularization."""
        r = encode_features(self.model, self.feats(self.model, s))
        if self.stage1 is None:
            pred = decode_sequence(self.model, r, self._history(s.frames.params, rng))
            return loss_stage1(pred, s, self.assets, self.weights)
        base = self.stage1_frames(s)
        pred = decode_sequence(self.model, r, self._history(s.frames.params - base, rng))
        return loss_stage2(ops.add(base, pred), s, self.assets, self.weights)

    def eval_loss(self, samples: Sequence[TrainingSample]) -> float:
        if not samples:
            return float("nan")
        with no_grad():
            return float(np.mean([self.loss(s).item() for s in samples]))


def _eval_windows(samples: Sequence[TrainingSample], cfg: TrainConfig) -> list[TrainingSample]:
    # deterministic evaluation window: the first crop_len frames
    out = []
    for s in samples:
        if s.T > cfg.crop_len:
            s = sample_crop(s, cfg.crop_len, _FirstWindow())
        out.append(s)
    return out


class _FirstWindow:
    def integers(self, lo, hi):
        return lo


def model_meta(model: StageModel) -> dict:
    return {"model": model.cfg.to_dict(), "tcn": model.tcn_cfg.to_dict()}


def make_checkpoint(model: StageModel, stage: int, adam: AdamState | None = None, meta: dict | None = None,
                    chash: str | None = None) -> Checkpoint:
    weights = {f"w/{k}": v.copy() for k, v in model.weights().items()}
    weights.update({k: v.copy() for k, v in model.tcn.named().items()})
    m = dict(model_meta(model), **(meta or {}))
    if adam is not None:
        for k in model.params:
            if k in adam.m:
                weights[f"adam_m/{k}"] = adam.m[k]
                weights[f"adam_v/{k}"] = adam.v[k]
        m["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step}
    return Checkpoint(stage, weights, m, chash if chash is not None else config_hash(m.get("config", m["model"])))


def model_from_checkpoint(ck: Checkpoint) -> StageModel:
    cfg = ModelConfig.from_dict(ck.meta["model"])
    tcn_cfg = TcnConfig.from_dict(ck.meta["tcn"])
    m = StageModel.init(cfg, tcn_cfg, seed=0)
    m.tcn = TcnWeights.from_named(ck.weights)
    m.load_weights({k[2:]: v for k, v in ck.weights.items() if k.startswith("w/")})
    return m


def train_stage(model: StageModel, train_set: Sequence[TrainingSample], val_set: Sequence[TrainingSample],
                assets: HeadAssets, cfg: TrainConfig, stage1: StageModel | None = None,
                weights: LossWeights = LossWeights(), chash: str | None = None,
                on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Epoch loop with seeded shuffling, per-sample crops, Adam and early stopping.

    Stage 2 needs the stage-1 model, which is frozen here and never updated.
    The returned checkpoint holds the best-validation weights, which are also
    restored into ``model``.
    """
    if cfg.stage == 2 and stage1 is None:
        raise ValueError("stage-2 training needs a stage-1 model")
    if cfg.stage == 1 and stage1 is not None:
        raise ValueError("stage-1 training takes no stage-1 model")
    if model.frozen:
        raise ValueError("cannot train a frozen model")
    train_set = select_subset(train_set, cfg.subset)
    val_set = select_subset(val_set, cfg.subset)
    if not train_set:
        raise DataError(f"no training samples for subset {cfg.subset!r}")
    if stage1 is not None:
        stage1.freeze()

    run = _Runner(model, stage1, assets, weights, cfg)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState(lr=cfg.lr)
    params = model.params
    train_eval = _eval_windows(train_set, cfg)
    val_eval = _eval_windows(val_set, cfg) or train_eval

    initial = run.eval_loss(train_eval)
    best = run.eval_loss(val_eval)
    best_w = {k: v.data.copy() for k, v in params.items()}
    best_adam = (dict(adam.m), dict(adam.v), adam.step)
    best_epoch, wait = 0, 0
    history = [{"epoch": 0, "split": "val", "loss": best, "train": initial}]
    val_history = [best]
    steps = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for i in rng.permutation(len(train_set)):
            s = sample_crop(train_set[i], cfg.crop_len, rng)
            get_tape().clear()
            zero_grads(params)
            try:
                loss = run.loss(s, rng)
                backward(loss)
                adam_step(params, None, adam)
                for k, p in params.items():
                    if not np.all(np.isfinite(p.data)):
                        raise NonFiniteError(f"parameter {k} became non-finite")
            except NonFiniteError as err:
                raise NumericalAbort(f"training: epoch {epoch}, sample {s.id} (offset {s.offset}): {err}") from None
            losses.append(loss.item())
            steps += 1
            if cfg.max_steps and steps >= cfg.max_steps:
                break
        val = run.eval_loss(val_eval)
        rec = {"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "val": val}
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
        log.info("stage %d epoch %d train %.6g val %.6g", cfg.stage, epoch, rec["loss"], val)
        if val < best - cfg.min_delta:
            best, best_epoch, wait = val, epoch, 0
            best_w = {k: v.data.copy() for k, v in params.items()}
            best_adam = (dict(adam.m), dict(adam.v), adam.step)
            val_history.append(val)
        else:
            wait += 1
        if wait >= cfg.patience or (cfg.max_steps and steps >= cfg.max_steps):
            break

    model.load_weights(best_w)
    adam.m, adam.v, adam.step = best_adam
    final = run.eval_loss(train_eval)
    meta = {
        "epoch": best_epoch, "epochs_run": history[-1]["epoch"], "val_history": val_history,
        "train": asdict(cfg), "loss_weights": asdict(weights),
        "initial_train_loss": initial, "final_train_loss": final,
    }
    ck = make_checkpoint(model, cfg.stage, adam, meta, chash)
    return TrainResult(ck, history, initial, final, steps)


def dumps_history(history: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in history)
