"""Lip vertex error, rigid alignment with known correspondence, and the
expression feature distance with a pluggable descriptor."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .head.assets import HeadAssets
from .head.model import MeshOutput

# raw metres -> the "x 1e-4 mm" presentation unit
LVE_SCALE = 1e7


def lve(pred_V, gt_V, lip_indices) -> float:
    """Per-frame max lip-vertex distance, averaged over frames (metres)."""
    p = np.asarray(pred_V, dtype=np.float64)
    g = np.asarray(gt_V, dtype=np.float64)
    lips = np.asarray(lip_indices, dtype=np.int64)
    if p.shape != g.shape or p.ndim != 3 or p.shape[2] != 3:
        raise ShapeError(f"lve: sequences have shapes {p.shape} and {g.shape}, expected equal (T, n_v, 3)")
    if lips.size == 0:
        raise DataError("lve: empty lip index set")
    if lips.min() < 0 or lips.max() >= p.shape[1]:
        raise DataError(f"lve: lip index out of range for {p.shape[1]} vertices")
    d = np.linalg.norm(p[:, lips] - g[:, lips], axis=2)   # (T, n_lip)
    return float(d.max(axis=1).mean())


def lve_scaled(raw_m: float) -> float:
    return raw_m * LVE_SCALE


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def rigid_align(src, dst, weights=None, iterations: int = 1) -> RigidTransform:
    """Weighted least-squares R, t minimizing sum w ||R src + t - dst||^2.

    Closed form through the SVD of the centred cross-covariance; a negative
    determinant is fixed by flipping the weakest singular direction, so the
    result is always a proper rotation.  With known correspondence further
    iterations cannot improve the fit; ``iterations`` is kept for ICP-style
    call sites and re-runs the solve on the moved points.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError(f"rigid_align: point sets {src.shape} and {dst.shape} must both be (n, 3)")
    if src.shape[0] < 3:
        raise DataError("rigid_align: need at least 3 points")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(src),) or np.any(w < 0) or w.sum() <= 0:
        raise DataError("rigid_align: weights must be non-negative, one per point, not all zero")
    total = RigidTransform.identity()
    if np.array_equal(src, dst):
        return total
    moved = src
    for _ in range(max(1, iterations)):
        step = _procrustes(moved, dst, w / w.sum())
        moved = step.apply(moved)
        total = RigidTransform(step.rotation @ total.rotation, step.rotation @ total.translation + step.translation)
    return total


def _procrustes(src: np.ndarray, dst: np.ndarray, w: np.ndarray) -> RigidTransform:
    mu_s = w @ src
    mu_d = w @ dst
    a = src - mu_s
    b = dst - mu_d
    sv = np.linalg.svd(a * np.sqrt(w)[:, None], compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise DataError("rigid_align: degenerate source points (fewer than 2 independent directions)")
    H = (a * w[:, None]).T @ b
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, mu_d - R @ mu_s)


# -- descriptor ------------------------------------------------------------------

DESCRIPTOR_NAMES = ("mouth_width", "mouth_aperture", "mouth_angle", "corner_lift",
                    "eye_left_aperture", "eye_right_aperture", "brow_left_height", "brow_right_height")


def geometric_descriptor(landmarks, roles: dict) -> np.ndarray:
    """Rigid-invariant expression descriptor from role-tagged 3-D landmarks.

    Distances are divided by the outer-eye-corner distance.  "Up" is the
    face-internal direction from the mouth centre to the eye midpoint,
    made orthogonal to the eye axis.
    """
    if not roles:
        raise DataError("geometric_descriptor: assets declare no landmark roles")
    P = landmarks.landmarks if isinstance(landmarks, MeshOutput) else np.asarray(landmarks, dtype=np.float64)
    try:
        g = {k: P[roles[k]] for k in ("mouth_left", "mouth_right", "lip_top", "lip_bottom",
                                      "eye_left_top", "eye_left_bottom", "eye_right_top", "eye_right_bottom",
                                      "brow_left", "brow_right", "eye_left_outer", "eye_right_outer")}
    except KeyError as err:
        raise DataError(f"geometric_descriptor: missing landmark role {err}") from None
    across = g["eye_right_outer"] - g["eye_left_outer"]
    iod = np.linalg.norm(across)
    if iod <= 0:
        raise DataError("geometric_descriptor: eye corners coincide")
    x = across / iod
    mouth_c = 0.5 * (g["mouth_left"] + g["mouth_right"])
    up = 0.5 * (g["eye_left_outer"] + g["eye_right_outer"]) - mouth_c
    up = up - (up @ x) * x
    up = up / np.linalg.norm(up)
    width = np.linalg.norm(g["mouth_right"] - g["mouth_left"])
    aperture = np.linalg.norm(g["lip_top"] - g["lip_bottom"])
    lip_c = 0.5 * (g["lip_top"] + g["lip_bottom"])
    return np.array([
        width / iod,
        aperture / iod,
        np.arctan2(aperture, width),
        (mouth_c - lip_c) @ up / iod,
        np.linalg.norm(g["eye_left_top"] - g["eye_left_bottom"]) / iod,
        np.linalg.norm(g["eye_right_top"] - g["eye_right_bottom"]) / iod,
        (g["brow_left"] - g["eye_left_top"]) @ up / iod,
        (g["brow_right"] - g["eye_right_top"]) @ up / iod,
    ])


@dataclass(frozen=True)
class FeatureExtractorSpec:
    name: str
    fn: Callable[[MeshOutput], np.ndarray]
    dim: int

    def __call__(self, mesh: MeshOutput) -> np.ndarray:
        out = np.asarray(self.fn(mesh), dtype=np.float64)
        if out.shape != (self.dim,):
            raise ShapeError(f"extractor {self.name}: produced {out.shape}, declared ({self.dim},)")
        return out


def geometric_extractor(assets: HeadAssets) -> FeatureExtractorSpec:
    roles = dict(assets.landmark_roles)
    if not roles:
        raise DataError("geometric extractor needs assets with landmark roles")
    return FeatureExtractorSpec("geometric", lambda m: geometric_descriptor(m.landmarks, roles), len(DESCRIPTOR_NAMES))


def efd(pred: Sequence[MeshOutput], gt: Sequence[MeshOutput], extractor: FeatureExtractorSpec) -> float:
    """Mean per-frame descriptor distance after aligning each predicted frame onto GT."""
    if len(pred) != len(gt) or not pred:
        raise ShapeError(f"efd: sequences have {len(pred)} and {len(gt)} frames")
    dists = []
    for p, g in zip(pred, gt):
        tf = rigid_align(p.vertices, g.vertices)
        aligned = MeshOutput(tf.apply(p.vertices), tf.apply(p.landmarks))
        dists.append(np.linalg.norm(extractor(aligned) - extractor(g)))
    return float(np.mean(dists))


def vertex_mse(pred_V, gt_V) -> float:
    p, g = np.asarray(pred_V), np.asarray(gt_V)
    if p.shape != g.shape:
        raise ShapeError(f"vertex_mse: shapes {p.shape} and {g.shape}")
    return float(np.mean((p - g) ** 2))


# -- reports ---------------------------------------------------------------------

@dataclass
class ClipScore:
    id: str
    lve_raw: float
    efd: float
    vertex_mse: float = float("nan")

    @property
    def lve_scaled(self) -> float:
        return lve_scaled(self.lve_raw)


@dataclass
class EvalReport:
    clips: list = field(default_factory=list)
    name: str = ""

    @property
    def count(self) -> int:
        return len(self.clips)

    def _mean(self, attr: str) -> float:
        return float(np.mean([getattr(c, attr) for c in self.clips])) if self.clips else float("nan")

    @property
    def mean_lve(self) -> float:
        return self._mean("lve_raw")

    @property
    def mean_lve_scaled(self) -> float:
        return lve_scaled(self.mean_lve)

    @property
    def mean_efd(self) -> float:
        return self._mean("efd")

    @property
    def mean_vertex_mse(self) -> float:
        return self._mean("vertex_mse")

    def to_text(self) -> str:
        lines = [f"# eval report {self.name}".rstrip(), "# id lve_m lve_x1e-4mm efd vertex_mse"]
        for c in self.clips:
            vals = (c.lve_raw, c.lve_scaled, c.efd, c.vertex_mse)
            lines.append(c.id + " " + " ".join(repr(float(v)) for v in vals))
        lines.append(f"# mean clips={self.count} lve_m={float(self.mean_lve)!r} lve_x1e-4mm={float(self.mean_lve_scaled)!r} "
                     f"efd={float(self.mean_efd)!r} vertex_mse={float(self.mean_vertex_mse)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        rep = cls()
        for line in text.splitlines():
            if line.startswith("# eval report"):
                rep.name = line[len("# eval report"):].strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DataError(f"report line has {len(parts)} fields, expected 5: {line!r}")
            rep.clips.append(ClipScore(parts[0], float(parts[1]), float(parts[3]), float(parts[4])))
        return rep


def evaluate_clip(clip_id: str, pred: Sequence[MeshOutput], gt: Sequence[MeshOutput], assets: HeadAssets,
                  extractor: FeatureExtractorSpec | None = None) -> ClipScore:
    pv = np.stack([m.vertices for m in pred])
    gv = np.stack([m.vertices for m in gt])
    ex = extractor or geometric_extractor(assets)
    return ClipScore(clip_id, lve(pv, gv, assets.lip_indices), efd(pred, gt, ex), vertex_mse(pv, gv))
