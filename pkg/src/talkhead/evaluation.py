"""Dataset directories of sample containers, and model evaluation over them."""
from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from .animator import ComposedAnimator, StageModel, generate, run_two_stage
from .audio import load_wav, save_wav
from .containers import SampleFile, load_sample, save_sample
from .errors import DataError
from .head.assets import HeadAssets
from .head.model import AnimationSequence, MeshOutput, animate
from .metrics import EvalReport, FeatureExtractorSpec, evaluate_clip, geometric_extractor
from .training import TrainingSample

SPLITS = ("train", "val", "test")


def save_dataset(directory, splits: dict[str, Sequence[TrainingSample]]) -> list[str]:
    """One ``<id>.wav`` + ``<id>.ltsm`` pair per clip; the header records subset and split."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for split, samples in splits.items():
        for s in samples:
            wav = f"{s.id}.wav"
            save_wav(os.path.join(directory, wav), s.waveform)
            header = {"id": s.id, "fps": s.frames.fps, "audio": wav, "subset": s.subset, "split": split,
                      "sample_rate": s.waveform.sample_rate}
            path = os.path.join(directory, f"{s.id}.ltsm")
            save_sample(path, SampleFile(header, s.frames.params, s.landmarks, s.vertices, s.beta))
            written.append(path)
    return written


def sample_from_file(path) -> tuple[TrainingSample, str]:
    sf = load_sample(path)
    h = sf.header
    if "audio" not in h:
        raise DataError(f"{path}: sample header names no audio file")
    audio = h["audio"] if os.path.isabs(h["audio"]) else os.path.join(os.path.dirname(os.path.abspath(path)), h["audio"])
    w = load_wav(audio)
    clip_id = h.get("id", os.path.splitext(os.path.basename(path))[0])
    s = TrainingSample(clip_id, w, AnimationSequence(sf.frames, float(h.get("fps", 25.0))), sf.beta,
                       sf.landmarks, sf.vertices, h.get("subset", "neutral"))
    return s, h.get("split", "train")


def load_dataset(directory) -> dict[str, list[TrainingSample]]:
    if not os.path.isdir(directory):
        raise DataError(f"dataset directory {directory} does not exist")
    out: dict[str, list[TrainingSample]] = {k: [] for k in SPLITS}
    names = sorted(n for n in os.listdir(directory) if n.endswith(".ltsm"))
    if not names:
        raise DataError(f"{directory}: no .ltsm samples")
    for n in names:
        s, split = sample_from_file(os.path.join(directory, n))
        if split not in out:
            raise DataError(f"{n}: unknown split {split!r}")
        out[split].append(s)
    return out


def predict(stage1: StageModel, stage2: StageModel | None, s: TrainingSample, assets: HeadAssets):
    """Frames and meshes for one clip, through stage 1 alone or the composed pair."""
    if stage2 is None:
        seq = generate(stage1, s.waveform, s.T)
        return seq, animate(assets, s.beta, seq)
    out = run_two_stage(ComposedAnimator(stage1, stage2), s.waveform, s.T, s.beta, assets)
    return out.composed, out.meshes


def evaluate_models(stage1: StageModel, stage2: StageModel | None, samples: Sequence[TrainingSample],
                    assets: HeadAssets, name: str = "", extractor: FeatureExtractorSpec | None = None) -> EvalReport:
    ex = extractor or geometric_extractor(assets)
    clips = []
    for s in samples:
        _, meshes = predict(stage1, stage2, s, assets)
        gt = [MeshOutput(v, l) for v, l in zip(s.vertices, s.landmarks)]
        clips.append(evaluate_clip(s.id, meshes, gt, assets, ex))
    return EvalReport(clips, name)


def mean_vertex_mse(report: EvalReport) -> float:
    return float(np.mean([c.vertex_mse for c in report.clips])) if report.clips else float("nan")
