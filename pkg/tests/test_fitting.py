import numpy as np
import pytest

from helpers import known_clip, track_from
from talkhead.containers import load_sample
from talkhead.errors import DataError, FormatError, ShapeError
from talkhead.fitting import (FitConfig, LandmarkTrack, WeakPerspectiveCam, export_pseudo_gt, fit_clip, load_track,
                              project, save_track)
from talkhead.head import AnimationSequence, animate

QUICK = FitConfig(iterations=150)


def test_project_examples():
    J = np.array([[0.01, 0.02, 0.5], [-0.03, 0.0, -1.0], [0.1, -0.2, 0.0]])
    one = WeakPerspectiveCam(1.0, np.zeros((1, 2)))
    assert np.array_equal(project(J, one), J[:, :2])
    cam = WeakPerspectiveCam(1000.0, [[320.0, 240.0]])
    p = project(J, cam)
    # hand arithmetic: 1000 * (x, y) + (320, 240)
    np.testing.assert_allclose(p, [[330.0, 260.0], [290.0, 240.0], [420.0, 40.0]], rtol=0, atol=1e-12)
    p2 = project(J, WeakPerspectiveCam(2000.0, [[320.0, 240.0]]))
    np.testing.assert_allclose(p2 - [320.0, 240.0], 2 * (p - [320.0, 240.0]), rtol=0, atol=1e-12)
    with pytest.raises(DataError):
        WeakPerspectiveCam(0.0, [[0.0, 0.0]])


def test_track_text_round_trip(tmp_path, assets):
    tr, _ = track_from(assets, *known_clip(assets, 3, T=4))
    tr.confidence[1, 2] = 0.25
    save_track(tmp_path / "t.txt", tr)
    back = load_track(tmp_path / "t.txt")
    assert np.array_equal(back.points, tr.points) and np.array_equal(back.confidence, tr.confidence)
    (tmp_path / "bad.txt").write_text("0 1 2\n")
    with pytest.raises(FormatError):
        load_track(tmp_path / "bad.txt")


def test_track_validation():
    with pytest.raises(ShapeError):
        LandmarkTrack(np.zeros((3, 4, 3)), np.ones((3, 4)))
    with pytest.raises(DataError):
        LandmarkTrack(np.zeros((3, 4, 2)), np.full((3, 4), 1.5))


def test_fit_reduces_reprojection_and_best_energy_is_monotone(assets):
    tr, V = track_from(assets, *known_clip(assets, 0))
    res = fit_clip(tr, assets, QUICK)
    energies = [e for _, e in res.history]
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    assert res.energy < 0.01 * energies[0]
    assert res.reproj < 0.1


def test_fit_is_deterministic(assets):
    tr, _ = track_from(assets, *known_clip(assets, 1, T=8))
    a = fit_clip(tr, assets, FitConfig(iterations=40))
    b = fit_clip(tr, assets, FitConfig(iterations=40))
    assert np.array_equal(a.psi, b.psi) and np.array_equal(a.pose, b.pose) and a.energy == b.energy


def test_static_track_gives_identical_frames(assets):
    beta, psi, pose, cam = known_clip(assets, 2, T=10)
    psi[:] = psi[0]
    pose[:] = pose[0]
    tr, _ = track_from(assets, beta, psi, pose, cam)
    res = fit_clip(tr, assets, QUICK)
    assert np.max(np.abs(np.diff(res.psi, axis=0))) < 1e-4
    smooth = np.sum(np.diff(res.psi, axis=0) ** 2) + np.sum(np.diff(res.pose, axis=0) ** 2)
    assert smooth < 1e-12


def test_occluded_landmark_is_ignored(assets):
    tr, _ = track_from(assets, *known_clip(assets, 4, T=6))
    tr.confidence[:, 5] = 0.0
    cfg = FitConfig(iterations=60)
    a = fit_clip(tr, assets, cfg)
    moved = LandmarkTrack(tr.points.copy(), tr.confidence.copy())
    moved.points[:, 5] += np.random.default_rng(0).normal(size=(6, 2)) * 500.0
    b = fit_clip(moved, assets, cfg)
    assert np.array_equal(a.psi, b.psi) and np.array_equal(a.beta, b.beta) and a.energy == b.energy


def test_fit_errors(assets):
    tr, _ = track_from(assets, *known_clip(assets, 5, T=3))
    with pytest.raises(DataError):
        fit_clip(LandmarkTrack(tr.points, np.zeros_like(tr.confidence)), assets, QUICK)
    with pytest.raises(DataError):
        fit_clip(LandmarkTrack(tr.points[:1], tr.confidence[:1]), assets, QUICK)
    with pytest.raises(ShapeError):
        fit_clip(LandmarkTrack(tr.points[:, :5], tr.confidence[:, :5]), assets, QUICK)


def test_export_round_trip(assets, tmp_path):
    tr, _ = track_from(assets, *known_clip(assets, 6, T=5))
    res = fit_clip(tr, assets, FitConfig(iterations=30))
    written = export_pseudo_gt(res, assets, "clip.wav", tmp_path / "c.ltsm", extra={"id": "c"})
    back = load_sample(tmp_path / "c.ltsm")
    for k in ("frames", "landmarks", "vertices", "beta", "pose"):
        assert np.array_equal(getattr(back, k), getattr(written, k))
    assert back.header["audio"] == "clip.wav" and back.header["id"] == "c"
    assert back.header["duration"] == 5 / 25.0
    meshes = animate(assets, back.beta, AnimationSequence(back.frames), back.pose)
    assert np.array_equal(np.stack([m.vertices for m in meshes]), back.vertices)
