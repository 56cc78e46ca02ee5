"""Differentiable FLAME-style head model: blendshapes, joint regression and
linear blend skinning over the global root plus k = 4 joints."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..autodiff import Tensor, as_tensor
from ..autodiff import ops
from ..errors import NonFiniteError, ShapeError
from .assets import NUM_JOINTS, PARENTS, HeadAssets

POSE_DIM = 3 * NUM_JOINTS + 3
JAW_SLICE = slice(6, 9)


@dataclass(frozen=True)
class FacialFrame:
    psi: np.ndarray   # (n_psi,)
    jaw: np.ndarray   # (3,) axis-angle, radians

    def vector(self) -> np.ndarray:
        return np.concatenate([self.psi, self.jaw])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "FacialFrame":
        v = np.asarray(v, dtype=np.float64)
        return cls(psi=v[:-3].copy(), jaw=v[-3:].copy())


@dataclass(frozen=True)
class PoseParams:
    theta: np.ndarray  # (15,) global, neck, jaw, left eye, right eye

    def __post_init__(self):
        if np.shape(self.theta) != (POSE_DIM,):
            raise ShapeError(f"pose must have {POSE_DIM} entries, got {np.shape(self.theta)}")
        if not np.all(np.isfinite(self.theta)):
            raise NonFiniteError("pose contains non-finite values")

    @property
    def jaw(self) -> np.ndarray:
        return self.theta[JAW_SLICE]


class AnimationSequence:
    """T frames of f_t = [psi_t, jaw_t], stored as a (T, n_psi + 3) array."""

    def __init__(self, params, fps: float = 25.0):
        arr = np.array(params, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 4:
            raise ShapeError(f"animation needs shape (T >= 1, n_psi + 3), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("animation contains non-finite values")
        if fps <= 0:
            raise ValueError("fps must be positive")
        self.params = arr
        self.fps = float(fps)

    @classmethod
    def from_frames(cls, frames: Sequence[FacialFrame], fps: float = 25.0) -> "AnimationSequence":
        return cls(np.stack([f.vector() for f in frames]), fps)

    @property
    def T(self) -> int:
        return self.params.shape[0]

    @property
    def n_psi(self) -> int:
        return self.params.shape[1] - 3

    @property
    def psi(self) -> np.ndarray:
        return self.params[:, :-3]

    @property
    def jaw(self) -> np.ndarray:
        return self.params[:, -3:]

    @property
    def frames(self) -> list[FacialFrame]:
        return [FacialFrame.from_vector(r) for r in self.params]

    def __len__(self) -> int:
        return self.T

    def __eq__(self, other) -> bool:
        return (isinstance(other, AnimationSequence) and self.fps == other.fps
                and np.array_equal(self.params, other.params))

    def __repr__(self) -> str:
        return f"AnimationSequence(T={self.T}, n_psi={self.n_psi}, fps={self.fps})"


@dataclass(frozen=True)
class MeshOutput:
    vertices: np.ndarray   # (n_v, 3) metres
    landmarks: np.ndarray  # (n_j, 3) metres


_SKEW = np.zeros((3, 9))
# K = [[0, -z, y], [z, 0, -x], [-y, x, 0]] flattened row-major
_SKEW[2, 1], _SKEW[1, 2] = -1.0, 1.0
_SKEW[2, 3], _SKEW[0, 5] = 1.0, -1.0
_SKEW[1, 6], _SKEW[0, 7] = -1.0, 1.0


def rodrigues(rotvec) -> Tensor:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    r = as_tensor(rotvec)
    if r.shape[-1] != 3:
        raise ShapeError(f"rodrigues: last axis must be 3, got {r.shape}")
    lead = r.shape[:-1]
    sq = ops.sum(ops.square(r), axis=-1, keepdims=True)              # (..., 1)
    a = ops.reshape(ops.sinc_sq(sq), lead + (1, 1))
    b = ops.reshape(ops.versine_sq(sq), lead + (1, 1))
    k = ops.reshape(ops.matmul(ops.reshape(r, (-1, 3)), _SKEW), lead + (3, 3))
    return ops.add(ops.add(np.eye(3), ops.mul(a, k)), ops.mul(b, ops.matmul(k, k)))


def flame_lbs(assets: HeadAssets, beta, expr, pose) -> tuple[Tensor, Tensor]:
    """Batched M(beta, psi, theta).

    beta: (n_beta,), expr: (T, n_psi), pose: (T, 15).  Returns vertices
    (T, n_v, 3) and landmarks (T, n_j, 3).  Inputs may be Tensors (tracked or
    not) or arrays.
    """
    beta, expr, pose = as_tensor(beta), as_tensor(expr), as_tensor(pose)
    if beta.shape != (assets.n_beta,):
        raise ShapeError(f"flame: beta has shape {beta.shape}, assets expect ({assets.n_beta},)")
    if expr.ndim != 2 or expr.shape[1] != assets.n_psi:
        raise ShapeError(f"flame: expression has shape {expr.shape}, assets expect (T, {assets.n_psi})")
    T = expr.shape[0]
    if pose.shape != (T, POSE_DIM):
        raise ShapeError(f"flame: pose has shape {pose.shape}, expected ({T}, {POSE_DIM})")
    n_v = assets.n_v

    id_offsets = ops.reshape(ops.matmul(ops.reshape(beta, (1, -1)), assets.shapedirs_flat), (1, n_v, 3))
    ex_offsets = ops.reshape(ops.matmul(expr, assets.exprdirs_flat), (T, n_v, 3))
    shaped = ops.add(ops.add(assets.template, id_offsets), ex_offsets)          # (T, n_v, 3)
    joints = ops.matmul(assets.joint_regressor, shaped)                         # (T, 5, 3)

    rot = rodrigues(ops.reshape(pose, (T, NUM_JOINTS + 1, 3)))                  # (T, 5, 3, 3)
    posed = shaped
    if assets.posedirs is not None:
        feat = ops.sub(ops.index(rot, (slice(None), slice(1, None))), np.eye(3))
        pose_off = ops.matmul(ops.reshape(feat, (T, 9 * NUM_JOINTS)), assets.posedirs_flat)
        posed = ops.add(shaped, ops.reshape(pose_off, (T, n_v, 3)))

    rots_w: list[Tensor] = []
    trans_w: list[Tensor] = []
    for j, parent in enumerate(PARENTS):
        r_j = ops.index(rot, (slice(None), j))                                  # (T, 3, 3)
        j_pos = ops.index(joints, (slice(None), j))                             # (T, 3)
        if parent < 0:
            rots_w.append(r_j)
            trans_w.append(j_pos)
            continue
        rel = ops.sub(j_pos, ops.index(joints, (slice(None), parent)))
        r_p = rots_w[parent]
        rots_w.append(ops.matmul(r_p, r_j))
        moved = ops.reshape(ops.matmul(r_p, ops.reshape(rel, (T, 3, 1))), (T, 3))
        trans_w.append(ops.add(moved, trans_w[parent]))
    r_all = ops.stack(rots_w, axis=1)                                           # (T, 5, 3, 3)
    t_all = ops.stack(trans_w, axis=1)                                          # (T, 5, 3)
    # remove rest-pose joint locations: x -> R (x - J) + t
    rj = ops.reshape(ops.matmul(r_all, ops.reshape(joints, (T, NUM_JOINTS + 1, 3, 1))), (T, NUM_JOINTS + 1, 3))
    t_rel = ops.sub(t_all, rj)

    r_blend = ops.reshape(ops.matmul(assets.weights, ops.reshape(r_all, (T, NUM_JOINTS + 1, 9))), (T, n_v, 3, 3))
    t_blend = ops.matmul(assets.weights, t_rel)                                 # (T, n_v, 3)
    verts = ops.add(ops.reshape(ops.matmul(r_blend, ops.reshape(posed, (T, n_v, 3, 1))), (T, n_v, 3)), t_blend)
    lmks = ops.matmul(assets.landmark_matrix, verts)
    return verts, lmks


def full_pose(jaw, extra_pose=None) -> Tensor:
    """Assemble (T, 15) pose from jaw rotations; other joints come from ``extra_pose`` or are zero."""
    jaw = as_tensor(jaw)
    T = jaw.shape[0]
    if extra_pose is None:
        zeros = np.zeros((T, 6))
        return ops.concat([zeros, jaw, zeros], axis=1)
    extra = as_tensor(extra_pose)
    if extra.shape != (T, POSE_DIM):
        extra = ops.reshape(extra, (T, POSE_DIM)) if extra.size == T * POSE_DIM else extra
    if extra.shape != (T, POSE_DIM):
        raise ShapeError(f"extra pose must be ({T}, {POSE_DIM}), got {extra.shape}")
    return ops.concat([ops.index(extra, (slice(None), slice(0, 6))), jaw,
                       ops.index(extra, (slice(None), slice(9, 15)))], axis=1)


def frames_forward(assets: HeadAssets, beta, frames, extra_pose=None) -> tuple[Tensor, Tensor]:
    """M(beta, F_1:T) for a (T, n_psi + 3) frame tensor (differentiable)."""
    frames = as_tensor(frames)
    if frames.ndim != 2 or frames.shape[1] != assets.n_psi + 3:
        raise ShapeError(f"frames have shape {frames.shape}, expected (T, {assets.n_psi + 3})")
    expr = ops.index(frames, (slice(None), slice(0, assets.n_psi)))
    jaw = ops.index(frames, (slice(None), slice(assets.n_psi, assets.n_psi + 3)))
    return flame_lbs(assets, beta, expr, full_pose(jaw, extra_pose))


def _check_beta(assets: HeadAssets, beta) -> np.ndarray:
    b = np.asarray(beta, dtype=np.float64)
    if b.shape != (assets.n_beta,):
        raise ShapeError(f"beta has shape {b.shape}, assets expect ({assets.n_beta},)")
    if not np.all(np.isfinite(b)):
        raise NonFiniteError("beta contains non-finite values")
    return b


def flame_forward(assets: HeadAssets, beta, frame: FacialFrame, extra_pose: PoseParams | None = None) -> MeshOutput:
    beta = _check_beta(assets, beta)
    vec = frame.vector()
    if vec.shape != (assets.n_psi + 3,):
        raise ShapeError(f"frame has {vec.shape[0]} values, assets expect {assets.n_psi + 3}")
    extra = None if extra_pose is None else extra_pose.theta[None, :]
    v, j = frames_forward(assets, beta, vec[None, :], extra)
    return MeshOutput(vertices=v.data[0], landmarks=j.data[0])


def animate(assets: HeadAssets, beta, seq: AnimationSequence, extra_poses: np.ndarray | None = None) -> list[MeshOutput]:
    """V_1:T = M(beta, F_1:T) with a shared shape vector."""
    beta = _check_beta(assets, beta)
    if seq.n_psi != assets.n_psi:
        raise ShapeError(f"animation has n_psi={seq.n_psi}, assets expect {assets.n_psi}")
    try:
        v, j = frames_forward(assets, beta, seq.params, extra_poses)
    except NonFiniteError as err:
        bad = [t for t in range(seq.T) if not np.all(np.isfinite(seq.params[t]))]
        raise NonFiniteError(f"animate: frame {bad[0] if bad else '?'}: {err}") from None
    return [MeshOutput(vertices=v.data[t], landmarks=j.data[t]) for t in range(seq.T)]


def vertex_sequence(meshes: Sequence[MeshOutput]) -> np.ndarray:
    return np.stack([m.vertices for m in meshes])


def lip_vertices(assets: HeadAssets, vertices: np.ndarray) -> np.ndarray:
    v = np.asarray(vertices)
    if v.shape[-2:] != (assets.n_v, 3):
        raise ShapeError(f"lip_vertices: expected (..., {assets.n_v}, 3), got {v.shape}")
    return v[..., assets.lip_indices, :]
