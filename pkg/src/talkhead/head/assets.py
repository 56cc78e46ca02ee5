"""Head-model assets: template mesh, blendshape bases, joints, skinning weights,
landmark embedding and lip vertex set, plus the ``LTHA`` binary container.

Container layout (little-endian)::

    b"LTHA" | u32 version
    dims:     u32 n_v, n_j, k, n_beta, n_psi, n_faces, has_pose
    tensors:  u32 count, then named tensor records (autodiff.serialize)
    landmark: u32 mode (0 = vertex, 1 = barycentric), n_j entries of
              u64 vertex  |  u64 face + 3 x f64 weights
    lips:     u32 count, u64 indices
    roles:    u32 count, (u32-prefixed UTF-8 name, u64 landmark index) pairs

A converter from an official FLAME release only needs to fill these fields:
``v_template``, ``shapedirs[:, :, :n_beta]``, ``shapedirs[:, :, 300:300 + n_psi]``,
``posedirs`` (reshaped to n_v x 3 x 36), ``J_regressor`` (dense), ``weights``,
``f``, the static landmark embedding (faces + barycentrics) and the lip index
list published with the model.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import BinaryIO

import numpy as np
from scipy.spatial import ConvexHull

from ..autodiff.serialize import read_exact, read_str, read_tensors, read_u32, write_str, write_tensors, write_u32
from ..errors import AssetError, FormatError
from ..io_utils import atomic_write

MAGIC = b"LTHA"
VERSION = 1
NUM_JOINTS = 4  # k: neck, jaw, left eye, right eye (plus the global root)
PARENTS = (-1, 0, 1, 1, 1)
JOINT_NAMES = ("global", "neck", "jaw", "eye_left", "eye_right")

# Roles the geometric expression descriptor needs.
DESCRIPTOR_ROLES = (
    "mouth_left", "mouth_right", "lip_top", "lip_bottom",
    "eye_left_top", "eye_left_bottom", "eye_right_top", "eye_right_bottom",
    "brow_left", "brow_right", "eye_left_outer", "eye_right_outer",
)

# iBUG-68 indices for full FLAME assets.
IBUG68_ROLES = {
    "mouth_left": 48, "mouth_right": 54, "lip_top": 51, "lip_bottom": 57,
    "eye_left_top": 37, "eye_left_bottom": 41, "eye_right_top": 44, "eye_right_bottom": 46,
    "brow_left": 19, "brow_right": 24, "eye_left_outer": 36, "eye_right_outer": 45,
}


@dataclass(frozen=True)
class HeadAssets:
    template: np.ndarray          # (n_v, 3) metres
    shapedirs: np.ndarray         # (n_v, 3, n_beta)
    exprdirs: np.ndarray          # (n_v, 3, n_psi)
    joint_regressor: np.ndarray   # (k + 1, n_v)
    weights: np.ndarray           # (n_v, k + 1)
    faces: np.ndarray             # (n_f, 3) int
    lip_indices: np.ndarray       # (n_lip,) int
    lmk_vertices: np.ndarray | None = None     # (n_j,) int, plain-vertex landmarks
    lmk_faces: np.ndarray | None = None        # (n_j,) int, barycentric landmarks
    lmk_bary: np.ndarray | None = None         # (n_j, 3)
    posedirs: np.ndarray | None = None         # (n_v, 3, 9k)
    landmark_roles: dict = field(default_factory=dict)

    @property
    def n_v(self) -> int:
        return self.template.shape[0]

    @property
    def n_beta(self) -> int:
        return self.shapedirs.shape[2]

    @property
    def n_psi(self) -> int:
        return self.exprdirs.shape[2]

    @property
    def n_j(self) -> int:
        return len(self.lmk_vertices) if self.lmk_vertices is not None else len(self.lmk_faces)

    @property
    def k(self) -> int:
        return self.joint_regressor.shape[0] - 1

    @cached_property
    def landmark_matrix(self) -> np.ndarray:
        """(n_j, n_v) matrix L with J3d = L @ V, for either landmark form."""
        lm = np.zeros((self.n_j, self.n_v))
        if self.lmk_vertices is not None:
            lm[np.arange(self.n_j), self.lmk_vertices] = 1.0
        else:
            tri = self.faces[self.lmk_faces]
            for c in range(3):
                np.add.at(lm, (np.arange(self.n_j), tri[:, c]), self.lmk_bary[:, c])
        return lm

    @cached_property
    def shapedirs_flat(self) -> np.ndarray:
        return self.shapedirs.reshape(self.n_v * 3, self.n_beta).T.copy()

    @cached_property
    def exprdirs_flat(self) -> np.ndarray:
        return self.exprdirs.reshape(self.n_v * 3, self.n_psi).T.copy()

    @cached_property
    def posedirs_flat(self) -> np.ndarray | None:
        if self.posedirs is None:
            return None
        return self.posedirs.reshape(self.n_v * 3, -1).T.copy()

    def validate(self) -> "HeadAssets":
        validate_assets(self)
        return self


def validate_assets(a: HeadAssets) -> None:
    n_v = a.template.shape[0] if a.template.ndim == 2 else -1
    if a.template.ndim != 2 or a.template.shape[1] != 3:
        raise AssetError(f"template must be n_v x 3, got {a.template.shape}")
    if a.shapedirs.ndim != 3 or a.shapedirs.shape[:2] != (n_v, 3):
        raise AssetError(f"shape basis must be {n_v} x 3 x n_beta, got {a.shapedirs.shape}")
    if a.exprdirs.ndim != 3 or a.exprdirs.shape[:2] != (n_v, 3):
        raise AssetError(f"expression basis must be {n_v} x 3 x n_psi, got {a.exprdirs.shape}")
    if a.joint_regressor.shape != (NUM_JOINTS + 1, n_v):
        raise AssetError(f"joint regressor must be {NUM_JOINTS + 1} x {n_v}, got {a.joint_regressor.shape}")
    if a.weights.shape != (n_v, NUM_JOINTS + 1):
        raise AssetError(f"skinning weights must be {n_v} x {NUM_JOINTS + 1}, got {a.weights.shape}")
    if a.posedirs is not None and a.posedirs.shape != (n_v, 3, 9 * NUM_JOINTS):
        raise AssetError(f"pose basis must be {n_v} x 3 x {9 * NUM_JOINTS}, got {a.posedirs.shape}")
    for name in ("template", "shapedirs", "exprdirs", "joint_regressor", "weights"):
        if not np.all(np.isfinite(getattr(a, name))):
            raise AssetError(f"{name} contains non-finite values")
    if np.any(a.weights < 0):
        row = int(np.argwhere(a.weights < 0)[0, 0])
        raise AssetError(f"skinning weight row {row} has negative entries")
    sums = a.weights.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
    if bad.size:
        raise AssetError(f"skinning weight row {int(bad[0])} sums to {sums[bad[0]]!r}, expected 1")
    if a.faces.ndim != 2 or a.faces.shape[1] != 3 or (a.faces.size and (a.faces.min() < 0 or a.faces.max() >= n_v)):
        raise AssetError("faces must be n_f x 3 vertex indices < n_v")
    if (a.lmk_vertices is None) == (a.lmk_faces is None):
        raise AssetError("exactly one landmark form (vertex or barycentric) must be given")
    if a.lmk_vertices is not None:
        if len(a.lmk_vertices) < 1 or a.lmk_vertices.min() < 0 or a.lmk_vertices.max() >= n_v:
            raise AssetError(f"landmark vertex index out of range [0, {n_v})")
    else:
        if a.lmk_bary is None or a.lmk_bary.shape != (len(a.lmk_faces), 3):
            raise AssetError("barycentric landmarks need n_j x 3 weights")
        if a.lmk_faces.min() < 0 or a.lmk_faces.max() >= len(a.faces):
            raise AssetError(f"landmark face index out of range [0, {len(a.faces)})")
    if len(a.lip_indices) == 0:
        raise AssetError("lip index set is empty")
    if a.lip_indices.min() < 0 or a.lip_indices.max() >= n_v:
        bad_idx = int(a.lip_indices[(a.lip_indices < 0) | (a.lip_indices >= n_v)][0])
        raise AssetError(f"lip index {bad_idx} out of range [0, {n_v})")
    n_j = len(a.lmk_vertices) if a.lmk_vertices is not None else len(a.lmk_faces)
    for role, idx in a.landmark_roles.items():
        if not 0 <= idx < n_j:
            raise AssetError(f"landmark role {role!r} points at {idx}, outside [0, {n_j})")


# -- mini assets -------------------------------------------------------------

# Ellipsoid head radii (x, y, z), metres.  +y up, +z forward (face side).
_RADII = np.array([0.08, 0.11, 0.10])

_ROLE_XY = {
    "mouth_left": (-0.025, -0.045), "mouth_right": (0.025, -0.045),
    "lip_top": (0.0, -0.033), "lip_bottom": (0.0, -0.057),
    "eye_left_top": (-0.03, 0.036), "eye_left_bottom": (-0.03, 0.021),
    "eye_right_top": (0.03, 0.036), "eye_right_bottom": (0.03, 0.021),
    "brow_left": (-0.032, 0.058), "brow_right": (0.032, 0.058),
    "eye_left_outer": (-0.047, 0.028), "eye_right_outer": (0.047, 0.028),
}
_EXTRA_XY = [
    (-0.012, -0.045), (0.012, -0.045), (0.0, 0.0), (0.0, -0.085), (-0.055, -0.02), (0.055, -0.02),
    (0.0, 0.075), (-0.015, 0.01), (0.015, 0.01), (-0.04, -0.065), (0.04, -0.065), (0.0, 0.03),
]

_JOINT_TARGETS = np.array([
    [0.0, -0.095, -0.015],   # global root, base of skull
    [0.0, -0.06, -0.025],    # neck
    [0.0, -0.03, -0.005],    # jaw hinge
    [-0.03, 0.028, 0.07],    # left eye
    [0.03, 0.028, 0.07],     # right eye
])


def _on_front(xy) -> np.ndarray:
    x, y = xy
    r = 1.0 - (x / _RADII[0]) ** 2 - (y / _RADII[1]) ** 2
    return np.array([x, y, _RADII[2] * np.sqrt(max(r, 0.0))])


def _fibonacci(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


def _oriented_hull(points: np.ndarray) -> np.ndarray:
    hull = ConvexHull(points)
    faces = hull.simplices.copy()
    if len(np.unique(faces)) != len(points):
        raise AssetError("mini mesh: some vertices are not on the hull")
    centroid = points.mean(axis=0)
    a, b, c = points[faces[:, 0]], points[faces[:, 1]], points[faces[:, 2]]
    normal = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", normal, a - centroid) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
    return faces[order].astype(np.int64)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    w = e / e.sum(axis=1, keepdims=True)
    # renormalise so each row sums to 1 to the last bit we can manage
    return w / w.sum(axis=1, keepdims=True)


def _smooth_basis(rng: np.random.Generator, verts: np.ndarray, n: int, rms: float,
                  against: np.ndarray | None = None) -> np.ndarray:
    """n orthogonal displacement fields, each a random low-frequency function of position."""
    n_v = len(verts)
    p = verts / _RADII
    cols = []
    for _ in range(n):
        freq = rng.normal(size=(3, 3)) * 2.0
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.normal(size=(3, 3))
        field_ = np.sin(p @ freq + phase) @ amp
        cols.append(field_.reshape(-1))
    mat = np.stack(cols, axis=1)
    if against is not None:
        mat = mat - against @ (against.T @ mat)
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))[None, :]
    return (q * rms * np.sqrt(n_v)).reshape(n_v, 3, n)


def make_mini_assets(seed: int = 0, n_v: int = 128, n_j: int = 16, n_beta: int = 10, n_psi: int = 12) -> HeadAssets:
    """Deterministic stand-in with the same structure as the full model.

    The mesh is the convex hull of points on an ellipsoid; landmarks sit at
    designed positions on the face side, so ``n_j >= 12`` also yields the role
    map the geometric descriptor needs.
    """
    if n_v < 12 or n_j < 4 or n_beta < 1 or n_psi < 1:
        raise AssetError(f"invalid mini dims n_v={n_v} n_j={n_j} n_beta={n_beta} n_psi={n_psi}")
    if n_j > n_v or n_j > len(_ROLE_XY) + len(_EXTRA_XY):
        raise AssetError(f"n_j={n_j} too large for n_v={n_v} (max {min(n_v, len(_ROLE_XY) + len(_EXTRA_XY))})")
    if n_beta + n_psi > n_v * 3:
        raise AssetError("basis size exceeds vertex degrees of freedom")
    rng = np.random.default_rng(seed)

    designed = [_on_front(xy) for xy in _ROLE_XY.values()] + [_on_front(xy) for xy in _EXTRA_XY]
    # every designed point becomes a vertex (when n_v allows); the first n_j are landmarks
    lmk_pts = np.array(designed[:max(n_j, min(n_v, len(designed)))])
    n_rest = n_v - len(lmk_pts)
    m = n_rest
    while True:
        cand = _fibonacci(m) * _RADII
        d = np.linalg.norm(cand[:, None, :] - lmk_pts[None, :, :], axis=2).min(axis=1)
        cand = cand[d > 0.006]
        if len(cand) >= n_rest:
            break
        m += max(1, n_rest - len(cand))
    rest = cand[np.linspace(0, len(cand) - 1, n_rest).round().astype(int)] if n_rest else np.zeros((0, 3))
    template = np.concatenate([lmk_pts, rest], axis=0)
    faces = _oriented_hull(template)

    shapedirs = _smooth_basis(rng, template, n_beta, rms=0.004)
    exprdirs = _smooth_basis(rng, template, n_psi, rms=0.002,
                             against=(shapedirs.reshape(-1, n_beta) / np.linalg.norm(shapedirs.reshape(-1, n_beta), axis=0)))

    # joint regressor: convex kernel weights around each target
    d2 = ((template[None, :, :] - _JOINT_TARGETS[:, None, :]) ** 2).sum(axis=2)
    sig = np.array([0.05, 0.05, 0.04, 0.01, 0.01])[:, None]
    reg = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / (2 * sig ** 2))
    reg = reg / reg.sum(axis=1, keepdims=True)
    joints = reg @ template

    dist = np.linalg.norm(template[:, None, :] - joints[None, :, :], axis=2)
    y = template[:, 1]
    lower = 1.0 / (1.0 + np.exp((y - (-0.045)) / 0.004))  # ~1 below the mouth line
    logits = np.stack([
        -dist[:, 0] / 0.03,
        -dist[:, 1] / 0.08 + 1.5,
        -dist[:, 2] / 0.04 + 6.0 * lower - 2.0,
        -dist[:, 3] / 0.006 - 1.0,
        -dist[:, 4] / 0.006 - 1.0,
    ], axis=1)
    weights = _softmax_rows(logits)

    roles = {name: i for i, name in enumerate(_ROLE_XY) if i < n_j} if n_j >= len(_ROLE_XY) else {}
    mouth_xy = np.array([[-0.025, -0.045], [0.025, -0.045], [0.0, -0.033], [0.0, -0.057],
                         [-0.012, -0.045], [0.012, -0.045]])
    lip_d = np.linalg.norm(template[:, None, :2] - mouth_xy[None], axis=2).min(axis=1)
    front = template[:, 2] > 0
    lips = np.flatnonzero(front & (lip_d < 0.008))
    if len(lips) == 0:
        lips = np.array([int(np.argmin(np.where(front, lip_d, np.inf)))])

    return HeadAssets(
        template=template, shapedirs=shapedirs, exprdirs=exprdirs, joint_regressor=reg,
        weights=weights, faces=faces, lip_indices=lips.astype(np.int64),
        lmk_vertices=np.arange(n_j, dtype=np.int64), landmark_roles=roles,
    ).validate()


# -- container I/O -----------------------------------------------------------

def _write_assets(fh: BinaryIO, a: HeadAssets) -> None:
    fh.write(MAGIC)
    write_u32(fh, VERSION)
    for v in (a.n_v, a.n_j, a.k, a.n_beta, a.n_psi, len(a.faces), int(a.posedirs is not None)):
        write_u32(fh, v)
    tensors = {
        "template": a.template, "shapedirs": a.shapedirs, "exprdirs": a.exprdirs,
        "joint_regressor": a.joint_regressor, "weights": a.weights,
        "faces": a.faces.astype(np.float64),
    }
    if a.posedirs is not None:
        tensors["posedirs"] = a.posedirs
    write_tensors(fh, tensors)
    if a.lmk_vertices is not None:
        write_u32(fh, 0)
        fh.write(np.asarray(a.lmk_vertices, dtype="<u8").tobytes())
    else:
        write_u32(fh, 1)
        for f, w in zip(a.lmk_faces, a.lmk_bary):
            fh.write(struct.pack("<Q3d", int(f), *map(float, w)))
    write_u32(fh, len(a.lip_indices))
    fh.write(np.asarray(a.lip_indices, dtype="<u8").tobytes())
    write_u32(fh, len(a.landmark_roles))
    for role, idx in a.landmark_roles.items():
        write_str(fh, role)
        fh.write(struct.pack("<Q", int(idx)))


def save_assets(path: str | os.PathLike, assets: HeadAssets) -> None:
    with atomic_write(path) as fh:
        _write_assets(fh, assets)


def _read_assets(fh: BinaryIO) -> HeadAssets:
    if read_exact(fh, 4) != MAGIC:
        raise FormatError("not an LTHA asset file (bad magic)")
    version = read_u32(fh)
    if version != VERSION:
        raise FormatError(f"unsupported LTHA version {version}")
    n_v, n_j, k, n_beta, n_psi, n_f, has_pose = (read_u32(fh) for _ in range(7))
    if k != NUM_JOINTS:
        raise FormatError(f"asset declares k={k}, expected {NUM_JOINTS}")
    t = read_tensors(fh)
    required = ["template", "shapedirs", "exprdirs", "joint_regressor", "weights", "faces"]
    missing = [r for r in required + (["posedirs"] if has_pose else []) if r not in t]
    if missing:
        raise FormatError(f"asset file missing tensors: {missing}")
    mode = read_u32(fh)
    lmk_vertices = lmk_faces = lmk_bary = None
    if mode == 0:
        lmk_vertices = np.frombuffer(read_exact(fh, 8 * n_j), dtype="<u8").astype(np.int64)
    elif mode == 1:
        raw = np.frombuffer(read_exact(fh, 32 * n_j), dtype=np.dtype([("f", "<u8"), ("w", "<f8", 3)]))
        lmk_faces = raw["f"].astype(np.int64)
        lmk_bary = raw["w"].astype(np.float64)
    else:
        raise FormatError(f"unknown landmark mode {mode}")
    n_lip = read_u32(fh)
    lips = np.frombuffer(read_exact(fh, 8 * n_lip), dtype="<u8").astype(np.int64)
    roles = {}
    for _ in range(read_u32(fh)):
        role = read_str(fh)
        roles[role] = struct.unpack("<Q", read_exact(fh, 8))[0]
    if fh.read(1):
        raise FormatError("trailing bytes after asset payload")
    faces = t["faces"].astype(np.int64)
    if faces.shape != (n_f, 3) or t["template"].shape != (n_v, 3):
        raise FormatError("asset dims block disagrees with tensor shapes")
    if t["shapedirs"].shape[2:] != (n_beta,) or t["exprdirs"].shape[2:] != (n_psi,):
        raise FormatError("asset dims block disagrees with basis sizes")
    return HeadAssets(
        template=t["template"], shapedirs=t["shapedirs"], exprdirs=t["exprdirs"],
        joint_regressor=t["joint_regressor"], weights=t["weights"], faces=faces,
        lip_indices=lips, lmk_vertices=lmk_vertices, lmk_faces=lmk_faces, lmk_bary=lmk_bary,
        posedirs=t.get("posedirs"), landmark_roles=roles,
    )


def load_assets(path: str | os.PathLike) -> HeadAssets:
    with open(path, "rb") as fh:
        assets = _read_assets(fh)
    return assets.validate()


def assets_equal(a: HeadAssets, b: HeadAssets) -> bool:
    arrays = ["template", "shapedirs", "exprdirs", "joint_regressor", "weights", "faces", "lip_indices",
              "lmk_vertices", "lmk_faces", "lmk_bary", "posedirs"]
    for name in arrays:
        x, y = getattr(a, name), getattr(b, name)
        if (x is None) != (y is None):
            return False
        if x is not None and (x.shape != y.shape or not np.array_equal(x, y)):
            return False
    return a.landmark_roles == b.landmark_roles
