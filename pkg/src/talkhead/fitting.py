"""Per-clip landmark fitting: shared beta, per-frame psi, full pose and a
weak-perspective camera, optimized with Adam against 2-D landmark tracks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, get_tape, no_grad, ops, zero_grads
from .containers import SampleFile, save_sample
from .errors import DataError, FormatError, NonFiniteError, NumericalAbort, ShapeError
from .head.assets import HeadAssets
from .head.model import POSE_DIM, JAW_SLICE, flame_lbs
from .io_utils import atomic_write


@dataclass
class LandmarkTrack:
    points: np.ndarray       # (T, n_j, 2) pixels
    confidence: np.ndarray   # (T, n_j) in [0, 1]
    fps: float = 25.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 2:
            raise ShapeError(f"track points must be (T, n_j, 2), got {self.points.shape}")
        if self.confidence.shape != self.points.shape[:2]:
            raise ShapeError(f"confidence {self.confidence.shape} does not match points {self.points.shape[:2]}")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise DataError("confidence values must lie in [0, 1]")
        seen = self.confidence > 0
        if not np.all(np.isfinite(self.points[seen])):
            raise NonFiniteError("track has non-finite points with positive confidence")

    @property
    def T(self) -> int:
        return self.points.shape[0]

    @property
    def n_j(self) -> int:
        return self.points.shape[1]


def save_track(path, track: LandmarkTrack) -> None:
    """Text schema: header ``# fps=<fps> n_j=<n>``, then per frame ``x y c`` triples."""
    with atomic_write(path, "w", encoding="utf-8") as fh:
        fh.write(f"# fps={float(track.fps)!r} n_j={track.n_j}\n")
        for t in range(track.T):
            vals = []
            for j in range(track.n_j):
                x, y = track.points[t, j]
                vals += [repr(float(x)), repr(float(y)), repr(float(track.confidence[t, j]))]
            fh.write(" ".join(vals) + "\n")


def load_track(path) -> LandmarkTrack:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise FormatError(f"{path}: missing '# fps=... n_j=...' header")
    try:
        head = dict(kv.split("=") for kv in lines[0][1:].split())
        fps, n_j = float(head["fps"]), int(head["n_j"])
        rows = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
    except (KeyError, ValueError) as err:
        raise FormatError(f"{path}: malformed landmark track ({err})") from None
    if rows.ndim != 2 or rows.shape[1] != 3 * n_j:
        raise FormatError(f"{path}: expected {3 * n_j} values per frame")
    rows = rows.reshape(len(rows), n_j, 3)
    return LandmarkTrack(rows[..., :2], rows[..., 2], fps)


@dataclass
class WeakPerspectiveCam:
    scale: np.ndarray        # (T,) pixels per metre
    translation: np.ndarray  # (T, 2) pixels

    def __post_init__(self):
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64))
        self.translation = np.atleast_2d(np.asarray(self.translation, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise DataError("camera scale must be positive")


def project(J3d, cam: WeakPerspectiveCam) -> np.ndarray:
    """p = s * (x, y) + t; z is dropped.  J3d: (n_j, 3) or (T, n_j, 3)."""
    J = np.asarray(J3d, dtype=np.float64)
    if J.ndim == 2:
        return cam.scale[0] * J[:, :2] + cam.translation[0]
    return cam.scale[:, None, None] * J[..., :2] + cam.translation[:, None, :]


@dataclass(frozen=True)
class FitConfig:
    w_reproj: float = 1.0
    w_smooth: float = 0.1
    w_reg: float = 1e-3
    iterations: int = 500
    lr: float = 1e-2
    lr_final: float = 1e-3     # geometric decay to this value over the last part of the run
    decay_start: float = 0.8   # fraction of iterations run at the full learning rate
    seed: int = 0
    log_every: int = 25

    def __post_init__(self):
        if min(self.w_reproj, self.w_smooth, self.w_reg) < 0:
            raise ValueError("fit weights must be non-negative")
        if self.iterations < 1 or self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("iterations and learning rates must be positive")


@dataclass
class FitResult:
    beta: np.ndarray
    psi: np.ndarray          # (T, n_psi)
    pose: np.ndarray         # (T, 15)
    cam: WeakPerspectiveCam
    energy: float
    reproj: float
    history: list = field(default_factory=list)  # (iteration, best-so-far energy)

    @property
    def frames(self) -> np.ndarray:
        return np.concatenate([self.psi, self.pose[:, JAW_SLICE]], axis=1)


def _init_camera(track: LandmarkTrack, template_lmk: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale from bounding-box diagonals, translation from centroids (confident points only)."""
    T = track.T
    s0 = np.zeros(T)
    t0 = np.zeros((T, 2))
    for t in range(T):
        seen = track.confidence[t] > 0
        if seen.sum() < 2:
            seen = np.any(track.confidence > 0, axis=0) if seen.sum() == 0 else seen
        pts = track.points[t][seen] if np.all(np.isfinite(track.points[t][seen])) else None
        if pts is None or len(pts) < 2:
            # fall back to neighbours later
            s0[t] = np.nan
            continue
        ref = template_lmk[seen, :2]
        ext_p = np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))
        ext_r = np.linalg.norm(ref.max(axis=0) - ref.min(axis=0))
        s0[t] = ext_p / ext_r if ext_r > 0 else 1.0
        t0[t] = pts.mean(axis=0) - s0[t] * ref.mean(axis=0)
    bad = ~np.isfinite(s0) | (s0 <= 0)
    if np.all(bad):
        raise DataError("fit: no frame has two confident landmarks")
    if np.any(bad):
        good = np.flatnonzero(~bad)
        for t in np.flatnonzero(bad):
            k = good[np.argmin(np.abs(good - t))]
            s0[t], t0[t] = s0[k], t0[k]
    return s0, t0


def fit_clip(track: LandmarkTrack, assets: HeadAssets, cfg: FitConfig = FitConfig()) -> FitResult:
    """Minimize confidence-weighted reprojection error + smoothness + regularizers.

    Camera parameters are optimized relative to their initial values
    (log-scale and translation in units of the initial scale), which keeps
    Adam's per-step moves comparable across parameter groups.
    """
    T, n_j = track.T, track.n_j
    if T < 2:
        raise DataError("fit_clip needs at least 2 frames")
    if n_j != assets.n_j:
        raise ShapeError(f"track has {n_j} landmarks, assets define {assets.n_j}")
    conf = track.confidence
    if not np.any(conf > 0):
        raise DataError("fit_clip: every landmark has zero confidence")
    obs = np.where(conf[..., None] > 0, track.points, 0.0)
    w = conf / conf.sum(axis=1, keepdims=True).clip(min=1e-300) * (conf.sum(axis=1, keepdims=True) > 0)

    with no_grad():
        template_lmk = assets.landmark_matrix @ assets.template
    s0, t0 = _init_camera(track, template_lmk)

    params = {
        "beta": Tensor(np.zeros(assets.n_beta), requires_grad=True),
        "psi": Tensor(np.zeros((T, assets.n_psi)), requires_grad=True),
        "pose": Tensor(np.zeros((T, POSE_DIM)), requires_grad=True),
        "log_s": Tensor(np.zeros(T), requires_grad=True),
        "tau": Tensor(np.zeros((T, 2)), requires_grad=True),
    }

    def energy(p) -> tuple[Tensor, Tensor]:
        _, lmk = flame_lbs(assets, p["beta"], p["psi"], p["pose"])
        s = ops.mul(ops.exp(p["log_s"]), s0)                                    # (T,)
        xy = ops.index(lmk, (slice(None), slice(None), slice(0, 2)))            # (T, n_j, 2)
        trans = ops.add(t0, ops.mul(p["tau"], s0[:, None]))                     # (T, 2)
        proj = ops.add(ops.mul(xy, ops.reshape(s, (T, 1, 1))), ops.reshape(trans, (T, 1, 2)))
        d = ops.sub(proj, obs)
        per_pt = ops.sum(ops.square(d), axis=2)                                 # (T, n_j)
        reproj = ops.scale(ops.sum(ops.mul(per_pt, w)), 1.0 / T)
        dpsi = ops.sub(ops.index(p["psi"], slice(1, None)), ops.index(p["psi"], slice(0, -1)))
        dpose = ops.sub(ops.index(p["pose"], slice(1, None)), ops.index(p["pose"], slice(0, -1)))
        smooth = ops.add(ops.sum(ops.square(dpsi)), ops.sum(ops.square(dpose)))
        reg = ops.add(ops.scale(ops.sum(ops.square(p["psi"])), 1.0 / T), ops.sum(ops.square(p["beta"])))
        total = ops.add(ops.add(ops.scale(reproj, cfg.w_reproj), ops.scale(smooth, cfg.w_smooth / T)),
                        ops.scale(reg, cfg.w_reg))
        return total, reproj

    adam = AdamState(lr=cfg.lr)
    n_hold = int(cfg.decay_start * cfg.iterations)
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(1, cfg.iterations - n_hold))
    best = (math.inf, math.inf, {k: v.data.copy() for k, v in params.items()})
    history = []
    for it in range(cfg.iterations + 1):
        get_tape().clear()
        zero_grads(params)
        try:
            total, reproj = energy(params)
        except NonFiniteError as err:
            raise NumericalAbort(f"fit_clip: iteration {it}: {err}") from None
        e = total.item()
        if not math.isfinite(e):
            raise NumericalAbort(f"fit_clip: energy became {e} at iteration {it}")
        if e < best[0]:
            best = (e, reproj.item(), {k: v.data.copy() for k, v in params.items()})
        if it % cfg.log_every == 0 or it == cfg.iterations:
            history.append((it, best[0]))
        if it == cfg.iterations:
            get_tape().clear()
            break
        backward(total)
        adam.lr = cfg.lr * decay ** max(0, it - n_hold)
        adam_step(params, None, adam)

    e, r, p = best
    cam = WeakPerspectiveCam(s0 * np.exp(p["log_s"]), t0 + p["tau"] * s0[:, None])
    return FitResult(p["beta"], p["psi"], p["pose"], cam, e, r, history)


def export_pseudo_gt(fit: FitResult, assets: HeadAssets, audio_path: str, path, fps: float = 25.0,
                     extra: dict | None = None) -> SampleFile:
    """Write the fitted clip as a sample container; meshes use the full fitted pose."""
    with no_grad():
        V, J = flame_lbs(assets, fit.beta, fit.psi, fit.pose)
    T = fit.psi.shape[0]
    header = {"fps": fps, "audio": audio_path, "energy": fit.energy, "reproj": fit.reproj,
              "duration": T / fps}
    header.update(extra or {})
    s = SampleFile(header, fit.frames, J.data, V.data, fit.beta, fit.pose)
    save_sample(path, s)
    return s
