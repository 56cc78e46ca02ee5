"""On-disk formats: checkpoints (LTCK), pseudo-GT samples (LTSM), anim-json and OBJ sequences.

LTCK:  b"LTCK", u32 version, str config hash, str metadata JSON, tensor records.
LTSM:  b"LTSM", u32 version, str header JSON, tensor records
       (frames, landmarks, vertices, beta, optional pose).
Strings are u32 length + UTF-8; tensor records follow autodiff.serialize.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autodiff.serialize import read_str, read_tensors, read_u32, write_str, write_tensors, write_u32
from .errors import FormatError, ShapeError
from .head.assets import HeadAssets
from .head.model import AnimationSequence, animate, vertex_sequence
from .io_utils import atomic_write

CKPT_MAGIC = b"LTCK"
SAMPLE_MAGIC = b"LTSM"
VERSION = 1


def config_hash(obj: Any) -> str:
    text = obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _open_checked(path, magic: bytes):
    fh = open(path, "rb")
    got = fh.read(4)
    if got != magic:
        fh.close()
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    version = read_u32(fh)
    if version != VERSION:
        fh.close()
        raise FormatError(f"{path}: unsupported version {version}")
    return fh


def _expect_eof(fh, path) -> None:
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes after last record")


# -- checkpoints -------------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: int
    weights: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def val_history(self) -> list:
        return list(self.meta.get("val_history", []))


def save_checkpoint(path, ck: Checkpoint) -> None:
    meta = dict(ck.meta, stage=ck.stage)
    with atomic_write(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        write_u32(fh, VERSION)
        write_str(fh, ck.config_hash)
        write_str(fh, json.dumps(meta, sort_keys=True))
        write_tensors(fh, dict(sorted(ck.weights.items())))


def load_checkpoint(path) -> Checkpoint:
    with _open_checked(path, CKPT_MAGIC) as fh:
        chash = read_str(fh)
        try:
            meta = json.loads(read_str(fh))
        except json.JSONDecodeError as err:
            raise FormatError(f"{path}: corrupt checkpoint metadata ({err})") from None
        weights = read_tensors(fh)
        _expect_eof(fh, path)
    if "stage" not in meta:
        raise FormatError(f"{path}: checkpoint metadata lacks the stage number")
    return Checkpoint(int(meta["stage"]), weights, meta, chash)


# -- samples -----------------------------------------------------------------------

@dataclass
class SampleFile:
    header: dict
    frames: np.ndarray       # (T, n_psi + 3)
    landmarks: np.ndarray    # (T, n_j, 3)
    vertices: np.ndarray     # (T, n_v, 3)
    beta: np.ndarray
    pose: np.ndarray | None = None  # (T, 15) full pose from fitting, when known


def save_sample(path, s: SampleFile) -> None:
    T = s.frames.shape[0]
    if s.landmarks.shape[0] != T or s.vertices.shape[0] != T:
        raise ShapeError("sample: frames, landmarks and vertices disagree on T")
    header = dict(s.header, T=T, n_frame=int(s.frames.shape[1]), n_j=int(s.landmarks.shape[1]),
                  n_v=int(s.vertices.shape[1]), n_beta=int(s.beta.shape[0]))
    tensors = {"frames": s.frames, "landmarks": s.landmarks, "vertices": s.vertices, "beta": s.beta}
    if s.pose is not None:
        tensors["pose"] = s.pose
    with atomic_write(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        write_u32(fh, VERSION)
        write_str(fh, json.dumps(header, sort_keys=True))
        write_tensors(fh, tensors)


def load_sample(path) -> SampleFile:
    with _open_checked(path, SAMPLE_MAGIC) as fh:
        try:
            header = json.loads(read_str(fh))
        except json.JSONDecodeError as err:
            raise FormatError(f"{path}: corrupt sample header ({err})") from None
        t = read_tensors(fh)
        _expect_eof(fh, path)
    for key in ("frames", "landmarks", "vertices", "beta"):
        if key not in t:
            raise FormatError(f"{path}: sample lacks tensor {key!r}")
    if t["frames"].shape[0] != header.get("T"):
        raise FormatError(f"{path}: header T={header.get('T')} but frames have {t['frames'].shape[0]} rows")
    return SampleFile(header, t["frames"], t["landmarks"], t["vertices"], t["beta"], t.get("pose"))


# -- animation json ----------------------------------------------------------------

def anim_to_json(seq: AnimationSequence, beta) -> dict:
    # repr() of a Python float round-trips exactly, so re-import is bitwise.
    return {
        "fps": seq.fps,
        "beta": [float(b) for b in np.asarray(beta)],
        "frames": [{"psi": [float(v) for v in f.psi], "jaw": [float(v) for v in f.jaw]} for f in seq.frames],
    }


def save_anim_json(path, seq: AnimationSequence, beta) -> None:
    with atomic_write(path, "w", encoding="utf-8") as fh:
        json.dump(anim_to_json(seq, beta), fh, indent=1)
        fh.write("\n")


def load_anim_json(path) -> tuple[AnimationSequence, np.ndarray]:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        rows = [list(f["psi"]) + list(f["jaw"]) for f in doc["frames"]]
        if not rows or any(len(f["jaw"]) != 3 for f in doc["frames"]):
            raise FormatError(f"{path}: animation needs >= 1 frame with 3 jaw values each")
        return AnimationSequence(np.array(rows, dtype=np.float64), float(doc["fps"])), np.array(doc["beta"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as err:
        if isinstance(err, FormatError):
            raise
        raise FormatError(f"{path}: malformed animation file ({err})") from None


# -- OBJ sequences -----------------------------------------------------------------

def write_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    with atomic_write(path, "w", encoding="ascii") as fh:
        for v in vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.array(verts), np.array(faces, dtype=np.int64)


def export_obj_sequence(out_dir, seq: AnimationSequence, assets: HeadAssets, beta) -> list[str]:
    """frame_00000.obj, frame_00001.obj, ... one per animation frame."""
    verts = vertex_sequence(animate(assets, beta, seq))
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for t, v in enumerate(verts):
        p = os.path.join(out_dir, f"frame_{t:05d}.obj")
        write_obj(p, v, assets.faces)
        paths.append(p)
    return paths
