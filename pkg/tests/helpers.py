"""Shared builders for tests: synthetic landmark tracks with known parameters."""
import numpy as np

from talkhead.autodiff import no_grad
from talkhead.fitting import LandmarkTrack, WeakPerspectiveCam, project
from talkhead.head.model import POSE_DIM, flame_lbs


def known_clip(assets, seed, T=30):
    """Smooth ground-truth parameters and camera for a clip of T frames."""
    r = np.random.default_rng(seed)
    tt = np.linspace(0.0, 1.0, T)[:, None]
    beta = r.normal(size=assets.n_beta) * 0.3
    psi = r.normal(size=(1, assets.n_psi)) * 0.3 + np.sin(2 * np.pi * tt * r.uniform(0.5, 1.5)) * r.normal(
        size=assets.n_psi) * 0.2
    pose = np.zeros((T, POSE_DIM))
    pose[:, 0:3] = r.normal(size=3) * 0.05 + tt * r.normal(size=3) * 0.05
    pose[:, 6] = 0.1 + 0.1 * np.sin(2 * np.pi * tt[:, 0] * 2.0)
    cam = WeakPerspectiveCam(np.full(T, r.uniform(800.0, 1200.0)), np.tile(r.uniform(200.0, 300.0, 2), (T, 1)))
    return beta, psi, pose, cam


def track_from(assets, beta, psi, pose, cam, noise=0.0, seed=0):
    with no_grad():
        V, J = flame_lbs(assets, beta, psi, pose)
    pts = project(J.data, cam)
    if noise:
        pts = pts + np.random.default_rng(seed).normal(size=pts.shape) * noise
    return LandmarkTrack(pts, np.ones(pts.shape[:2])), V.data


# -- curation fixture with known final counts ------------------------------

COUNTS_FRACTIONS = {"mead": 64 / 438, "celeb": 50 / 505}


def counts_records():
    """943 survivors (438 neutral, 505 laughing) plus distractors for every filter."""
    from talkhead.curation import ClipRecord
    r = np.random.default_rng(7)
    recs = []

    def add(cid, source, tags, dur, laughter=None, speaker=None, scenes=None, identity=None):
        start = float(r.uniform(0, 30))
        laugh = None if laughter is None else [[start + a, start + b, p] for a, b, p in laughter]
        cuts = None if scenes is None else [start + c for c in scenes]
        recs.append(ClipRecord(cid, source, tags, start, start + dur, 25.0, laugh, speaker, cuts, identity=identity))

    # neutral: 430 single-scene clips + 4 clips cut into two usable scenes
    for i in range(430):
        add(f"m{i:03d}", "mead", ["neutral", "talk"], float(r.uniform(3.5, 8.0)), identity=f"p{i % 30}")
    for i in range(4):
        add(f"mc{i}", "mead", ["neutral"], 9.0, scenes=[4.0])
    # neutral distractors
    for i in range(20):
        add(f"ma{i}", "mead", ["angry"], 5.0)
    for i in range(5):
        add(f"ms{i}", "mead", ["neutral"], 5.0, scenes=[1.0, 2.0])   # segments 1, 1, 3 s: all dropped
    for i in range(3):
        add(f"mq{i}", "mead", ["neutral"], 3.0)                      # too short
    for i in range(2):
        add(f"mx{i}", "mead", ["neutral"], 6.0)                      # manually excluded
    # laughing: 503 ordinary + 2 exactly on the thresholds
    for i in range(503):
        d = float(r.uniform(4.0, 9.0))
        add(f"c{i:03d}", "celeb", ["laugh", "talk"] if i % 2 else ["happy"], d,
            laughter=[[0.2, 0.2 + min(d - 0.3, 3.6 + 0.5 * r.uniform()), 0.9]], speaker=[0.8] * int(np.ceil(d)))
    add("cb_laugh", "celeb", ["smile"], 5.0, laughter=[[0.5, 2.5, 0.5], [3.0, 4.5, 0.7]], speaker=[0.6] * 5)
    add("cb_speak", "celeb", ["laugh"], 5.0, laughter=[[0.0, 4.0, 0.9]], speaker=[0.25, 0.75] * 2 + [0.5])
    # laughing distractors
    for i in range(15):
        add(f"cs{i}", "celeb", ["laugh"], 6.0, laughter=[[0.0, 2.0, 0.9], [3.0, 4.4, 0.9]], speaker=[0.9] * 6)
    for i in range(10):
        add(f"cp{i}", "celeb", ["laugh"], 6.0, laughter=[[0.0, 5.0, 0.4]], speaker=[0.9] * 6)
    for i in range(10):
        add(f"ck{i}", "celeb", ["laugh"], 6.0, laughter=[[0.0, 5.0, 0.9]], speaker=[0.2] * 6)
    for i in range(10):
        add(f"ct{i}", "celeb", ["talk"], 6.0, laughter=[[0.0, 5.0, 0.9]], speaker=[0.9] * 6)
    for i in range(5):
        add(f"cn{i}", "celeb", ["laugh"], 6.0)
    return recs


COUNTS_EXCLUDES = [("mx0", "profile view"), ("mx1", "occluded"), ("mx1", "occluded"), ("nope", "missing")]
