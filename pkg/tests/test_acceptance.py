"""Acceptance checks 1-9.  Each test records one PASS/FAIL line; conftest.py
prints them together at the end of the session.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or as a script:
``python tests/test_acceptance.py``.
"""
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from helpers import COUNTS_EXCLUDES, COUNTS_FRACTIONS, known_clip, counts_records, track_from  # noqa: E402
from test_autodiff import CASES  # noqa: E402
from test_head import lbs_naive, random_config  # noqa: E402

from talkhead.animator import ComposedAnimator, ModelConfig, StageModel, encode_audio, run_two_stage, teacher_forced  # noqa: E402
from talkhead.autodiff import OPS, get_tape, gradient_check, ops  # noqa: E402
from talkhead.cli import model_config  # noqa: E402
from talkhead.config import load_config  # noqa: E402
from talkhead.containers import (SampleFile, load_anim_json, load_checkpoint, load_sample, save_anim_json,  # noqa: E402
                                 save_checkpoint, save_sample)
from talkhead.curation import (ClipRecord, CurateConfig, Manifest, filter_active_speaker, filter_laughter,  # noqa: E402
                               run_pipeline, scene_segments, stats)
from talkhead.evaluation import evaluate_models  # noqa: E402
from talkhead.fitting import fit_clip  # noqa: E402
from talkhead.head import (AnimationSequence, animate, assets_equal, flame_lbs, load_assets, make_mini_assets,  # noqa: E402
                           save_assets)
from talkhead.metrics import efd, geometric_extractor, lve, rigid_align  # noqa: E402
from talkhead.synthetic import SynthConfig, make_clip, make_corpus, smile_direction  # noqa: E402
from talkhead.training import (TrainConfig, TrainingSample, loss_stage1, loss_stage2, model_from_checkpoint,  # noqa: E402
                               train_stage)

RESULTS = {}
SMALL = dict(d_model=32, heads=4, enc_layers=1, dec_layers=1)


def report(n, checks, note=""):
    """checks: list of (label, ok).  Records one line (echoed in the session summary) and returns the status."""
    ok = all(c for _, c in checks)
    bad = [label for label, c in checks if not c]
    detail = "; ".join(label for label, _ in checks) if ok else "failed: " + "; ".join(bad)
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}" + (f" [{note}]" if note else "")
    RESULTS[n] = line
    print(line)
    return ok


def _assets():
    return make_mini_assets(0)


def _sub(s, T):
    return TrainingSample(s.id, s.waveform.slice_seconds(0, T / 25), AnimationSequence(s.frames.params[:T]), s.beta,
                          s.landmarks[:T], s.vertices[:T], subset=s.subset)


# -- 1 -----------------------------------------------------------------------------

def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    worst_op = 0.0
    missing = sorted(set(OPS) - set(CASES))
    for name in sorted(CASES):
        point, f = CASES[name]
        worst_op = max(worst_op, gradient_check(f, point, h=1e-5))
        get_tape().clear()
    a = _assets()
    s, _ = make_clip("g", "laugh", a, SynthConfig(duration=1.2), np.random.default_rng(0), smile_direction(a))
    sub = _sub(s, 6)
    r = np.random.default_rng(1)
    p0 = sub.frames.params + r.normal(size=sub.frames.params.shape) * 0.05
    e1 = gradient_check(lambda x: loss_stage1(x, sub, a), p0)
    get_tape().clear()
    e2 = gradient_check(lambda x: loss_stage2(x, sub, a), p0)
    get_tape().clear()
    psi = sub.frames.psi
    e3 = gradient_check(lambda j: loss_stage2(ops.concat([psi, j], axis=1), sub, a), sub.frames.jaw + 0.05)
    get_tape().clear()
    dt = time.perf_counter() - t0
    ok = report(1, [
        (f"{len(CASES)} op cases cover all {len(OPS)} registered ops", not missing),
        (f"worst op rel. error {worst_op:.2e} < 1e-4", worst_op < 1e-4),
        (f"landmark loss {e1:.2e} < 1e-4", e1 < 1e-4),
        (f"vertex loss {max(e2, e3):.2e} < 1e-4", max(e2, e3) < 1e-4),
        (f"runtime {dt:.1f}s < 60s", dt < 60),
    ])
    assert ok, RESULTS[1]


# -- 2 -----------------------------------------------------------------------------

def test_criterion_2_head_model_oracle():
    worst = 0.0
    for seed in range(100):
        a, beta, psi, theta = random_config(seed)
        V, J = flame_lbs(a, beta, psi[None], theta[None])
        Vr, Jr = lbs_naive(a, beta, psi, theta)
        worst = max(worst, np.max(np.abs(V.data[0] - Vr)), np.max(np.abs(J.data[0] - Jr)))
    a = _assets()
    m = animate(a, np.zeros(a.n_beta), AnimationSequence(np.zeros((1, a.n_psi + 3))))[0]
    zero = np.max(np.abs(m.vertices - a.template))
    ok = report(2, [(f"100 configs max error {worst:.1e} < 1e-10", worst < 1e-10),
                    (f"zero parameters give template within {zero:.0e} <= 1e-12", zero < 1e-12)])
    assert ok, RESULTS[2]


# -- 3 -----------------------------------------------------------------------------

def test_criterion_3_causality_and_freezing(tmp_path):
    a = _assets()
    rng = np.random.default_rng(3)
    m = StageModel.init(ModelConfig(n_psi=a.n_psi, **SMALL), seed=0)
    s, _ = make_clip("c", "laugh", a, SynthConfig(duration=1.2), rng, smile_direction(a))
    r = encode_audio(m, s.waveform, s.T)
    target = rng.normal(size=(s.T, a.n_psi + 3))
    base = teacher_forced(m, r, target).data
    causal = True
    for t in range(0, s.T - 1, 3):
        pert = target.copy()
        pert[t + 1:] += rng.normal(size=pert[t + 1:].shape) * 10.0
        causal &= bool(np.array_equal(teacher_forced(m, r, pert).data[:t + 2], base[:t + 2]))

    corpus = [make_clip(f"k{i}", kind, a, SynthConfig(duration=1.2), rng, smile_direction(a))[0]
              for i, kind in enumerate(["neutral", "neutral", "laugh", "laugh"])]
    s1 = StageModel.init(ModelConfig(n_psi=a.n_psi, **SMALL), seed=1)
    r1 = train_stage(s1, corpus, corpus, a, TrainConfig(stage=1, subset="mead", max_epochs=2, crop_len=20))
    save_checkpoint(tmp_path / "s1.ltck", r1.checkpoint)
    before = (tmp_path / "s1.ltck").read_bytes()
    frozen = model_from_checkpoint(load_checkpoint(tmp_path / "s1.ltck"))
    w0 = {k: v.copy() for k, v in frozen.weights().items()}
    s2 = StageModel.init(ModelConfig(n_psi=a.n_psi, zero_output=True, **SMALL), seed=2)
    train_stage(s2, corpus, corpus, a, TrainConfig(stage=2, subset="celeb", max_epochs=2, crop_len=20,
                                                    history_dropout=0.5), stage1=frozen)
    bytes_same = (tmp_path / "s1.ltck").read_bytes() == before
    weights_same = all(np.array_equal(w0[k], v) for k, v in frozen.weights().items())

    zero2 = StageModel.init(ModelConfig(n_psi=a.n_psi, zero_output=True, **SMALL), seed=5)
    out = run_two_stage(ComposedAnimator(frozen, zero2), s.waveform, s.T, s.beta, a)
    v1 = np.stack([x.vertices for x in animate(a, s.beta, out.stage1)])
    exact = out.composed == out.stage1 and np.array_equal(np.stack([x.vertices for x in out.meshes]), v1)
    ok = report(3, [("teacher-forced outputs invariant to future history", causal),
                    ("stage-1 checkpoint bytes unchanged by stage-2 training", bytes_same and weights_same),
                    ("zero residual composes to the stage-1 output exactly", exact)])
    assert ok, RESULTS[3]


# -- 4 -----------------------------------------------------------------------------

def _rot(r):
    from scipy.spatial.transform import Rotation
    return Rotation.random(random_state=int(r.integers(2**31))).as_matrix()


def test_criterion_4_metric_oracles():
    worst_lve = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        p, g = r.normal(size=(5, 30, 3)), r.normal(size=(5, 30, 3))
        lips = r.choice(30, 8, replace=False)
        brute = sum(max(np.sqrt(sum((p[t, i, c] - g[t, i, c]) ** 2 for c in range(3))) for i in lips)
                    for t in range(5)) / 5
        worst_lve = max(worst_lve, abs(lve(p, g, lips) - brute))
    g = np.zeros((7, 10, 3))
    p = g.copy()
    p[3, 4, 1] = 0.0123
    analytic = lve(p, g, [2, 4, 6]) == 0.0123 / 7

    r = np.random.default_rng(99)
    worst_r = worst_t = 0.0
    for _ in range(1000):
        src = r.normal(size=(int(r.integers(4, 40)), 3))
        R, t = _rot(r), r.normal(size=3) * 5
        tf = rigid_align(src, src @ R.T + t)
        worst_r = max(worst_r, np.linalg.norm(tf.rotation - R))
        worst_t = max(worst_t, np.linalg.norm(tf.translation - t))

    from talkhead.head import MeshOutput
    a = _assets()
    ex = geometric_extractor(a)
    params = np.concatenate([r.normal(size=(6, a.n_psi)), r.normal(size=(6, 3)) * 0.1], axis=1)
    gt = animate(a, r.normal(size=a.n_beta) * 0.5, AnimationSequence(params))
    R, t = _rot(r), r.normal(size=3)
    moved = [MeshOutput(m.vertices @ R.T + t, m.landmarks @ R.T + t) for m in gt]
    e = efd(moved, gt, ex)
    ok = report(4, [(f"LVE vs brute force {worst_lve:.1e} < 1e-12", worst_lve < 1e-12),
                    ("analytic d/F case exact", analytic),
                    (f"1000 rigid motions: rotation {worst_r:.1e}, translation {worst_t:.1e} < 1e-10",
                     worst_r < 1e-10 and worst_t < 1e-10),
                    (f"EFD of rigidly moved copy {e:.1e} < 1e-10", e < 1e-10)])
    assert ok, RESULTS[4]


# -- 5 -----------------------------------------------------------------------------

def test_criterion_5_fitting_round_trip():
    a = _assets()
    t0 = time.perf_counter()
    reproj, verr = [], []
    for seed in range(10):
        tr, V = track_from(a, *known_clip(a, seed, T=30))
        res = fit_clip(tr, a)
        reproj.append(res.reproj)
        Vf, _ = flame_lbs(a, res.beta, res.psi, res.pose)
        verr.append(float(np.max(np.abs(Vf.data - V))))
    dt = time.perf_counter() - t0
    worst = max(reproj)
    ok = report(5, [(f"worst reprojection energy {worst:.2e} px^2 < 1e-6 (median {np.median(reproj):.2e})",
                     worst < 1e-6),
                    (f"runtime {dt:.1f}s < 120s", dt < 120)],
                note=f"max vertex deviation {max(verr):.2e} m, not asserted")
    assert ok, RESULTS[5]


# -- 6 and 7 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    """Synthetic corpus, the two-stage model and the three single-stage ablations."""
    a = _assets()
    t0 = time.perf_counter()
    corpus = make_corpus(a, SynthConfig())
    cfg = load_config()
    tcfg = cfg["train"]

    def fit(stage, subset, stage1=None):
        mc, seed = model_config(cfg, stage, a.n_psi)
        m = StageModel.init(mc, seed=seed)
        tc = TrainConfig(lr=tcfg["lr"], max_epochs=tcfg["max_epochs"], patience=tcfg["patience"],
                         min_delta=tcfg["min_delta"], crop_len=tcfg["crop_len"], seed=tcfg["seed"], stage=stage,
                         subset=subset, history_dropout=tcfg["stage2_history_dropout"] if stage == 2 else 0.0)
        res = train_stage(m, corpus.train, corpus.val, a, tc, stage1)
        return m, res

    s1, r1 = fit(1, "mead")
    s1.freeze()
    s2, r2 = fit(2, "celeb", s1)
    celeb_only, _ = fit(1, "celeb")
    both, _ = fit(1, "both")
    held_out = [s for s in corpus.test if s.subset == "laugh"]
    reports = {
        "stage1": evaluate_models(s1, None, held_out, a, "mead-only"),
        "two-stage": evaluate_models(s1, s2, held_out, a, "two-stage"),
        "celeb-only": evaluate_models(celeb_only.freeze(), None, held_out, a, "celeb-only"),
        "both": evaluate_models(both.freeze(), None, held_out, a, "single-stage-both"),
    }
    return {"r1": r1, "r2": r2, "reports": reports, "seconds": time.perf_counter() - t0}


@pytest.mark.slow
def test_criterion_6_two_stage_behaviour(trained):
    r1, rep = trained["r1"], trained["reports"]
    drop = 1.0 - r1.final_train_loss / r1.initial_train_loss
    m1, m2 = rep["stage1"].mean_vertex_mse, rep["two-stage"].mean_vertex_mse
    gain = 1.0 - m2 / m1
    e1, e2 = rep["stage1"].mean_efd, rep["two-stage"].mean_efd
    dt = trained["seconds"]
    ok = report(6, [(f"stage-1 loss fell {100 * drop:.1f}% >= 90%", drop >= 0.9),
                    (f"held-out laugh vertex MSE {m1:.3e} -> {m2:.3e} ({100 * gain:.1f}% lower, >= 30%)", gain >= 0.3),
                    (f"EFD {e1:.4f} -> {e2:.4f} strictly lower", e2 < e1),
                    (f"runtime incl. ablations {dt / 60:.1f} min < 30 min", dt < 1800)])
    assert ok, RESULTS[6]


@pytest.mark.slow
def test_criterion_7_ablation_parity(trained):
    rep = trained["reports"]
    names = {"stage1": "mead-only", "celeb-only": "celeb-only", "both": "single-stage-both"}
    complete = all(r.count == rep["two-stage"].count and r.count > 0 for r in rep.values())
    best = rep["two-stage"].mean_vertex_mse
    rival = min(rep[k].mean_vertex_mse for k in names)
    summary = ", ".join(f"{names[k]} {rep[k].mean_vertex_mse:.3e}" for k in names)
    # "tied" means within 5% relative of the best rival
    ok = report(7, [("all configurations produced comparable reports", complete),
                    (f"two-stage {best:.3e} best or tied vs {summary}", best <= 1.05 * rival)])
    assert ok, RESULTS[7]


# -- 8 -----------------------------------------------------------------------------

def test_criterion_8_curation_fixture():
    out = run_pipeline(Manifest(counts_records()), CurateConfig(test_fraction=COUNTS_FRACTIONS), COUNTS_EXCLUDES)
    s = stats(out)
    mead, celeb = s["sources"]["mead"], s["sources"]["celeb"]
    counts = (s["total"], mead["total"], celeb["total"], mead["train"], mead["test"], celeb["train"], celeb["test"])
    r = np.random.default_rng(8)
    worst = 0.0
    for _ in range(500):
        start, dur = r.uniform(0, 100), r.uniform(0.5, 60)
        rec = ClipRecord("x", "mead", [], start, start + dur, scenes=list(start + r.uniform(0, dur, r.integers(0, 12))))
        worst = max(worst, abs(sum(b - a for a, b in scene_segments(rec)) - rec.duration))
    edge = Manifest([ClipRecord("l", "celeb", ["laugh"], 0.0, 6.0, laughter=[[0.0, 3.5, 0.5]], speaker=[0.5] * 6),
                     ClipRecord("m", "celeb", ["laugh"], 0.0, 6.0, laughter=[[0.0, 3.49, 0.5]], speaker=[0.5] * 6),
                     ClipRecord("n", "celeb", ["laugh"], 0.0, 6.0, laughter=[[0.0, 3.5, 0.49]], speaker=[0.5] * 6),
                     ClipRecord("o", "celeb", ["laugh"], 0.0, 6.0, laughter=[[0.0, 3.5, 0.5]], speaker=[0.49] * 6)])
    kept = filter_active_speaker(filter_laughter(edge, 3.5, 0.5), 0.5).ids()
    ok = report(8, [(f"counts {counts} == (943, 438, 505, 374, 64, 455, 50)",
                     counts == (943, 438, 505, 374, 64, 455, 50)),
                    (f"scene time conservation {worst:.1e} <= 1e-9 s", worst <= 1e-9),
                    (f"threshold boundaries keep {kept} == ['l']", kept == ["l"])])
    assert ok, RESULTS[8]


# -- 9 -----------------------------------------------------------------------------

def test_criterion_9_determinism_and_formats(tmp_path):
    a = _assets()
    rng = np.random.default_rng(9)
    corpus = [make_clip(f"d{i}", kind, a, SynthConfig(duration=1.2), rng, smile_direction(a))[0]
              for i, kind in enumerate(["neutral", "laugh", "neutral", "laugh"])]
    blobs = []
    for run in range(2):
        m = StageModel.init(ModelConfig(n_psi=a.n_psi, **SMALL), seed=4)
        res = train_stage(m, corpus, corpus, a, TrainConfig(stage=1, subset="both", max_epochs=2, crop_len=20))
        save_checkpoint(tmp_path / f"c{run}.ltck", res.checkpoint)
        m.freeze()
        rep = evaluate_models(m, None, corpus[:2], a, "det")
        (tmp_path / f"r{run}.txt").write_text(rep.to_text())
        from talkhead.animator import generate
        save_anim_json(tmp_path / f"a{run}.json", generate(m, corpus[0].waveform, corpus[0].T), corpus[0].beta)
        blobs.append([(tmp_path / f"{k}{run}.{e}").read_bytes() for k, e in (("c", "ltck"), ("r", "txt"), ("a", "json"))])
    deterministic = blobs[0] == blobs[1]

    save_assets(tmp_path / "m.lta", a)
    assets_rt = assets_equal(load_assets(tmp_path / "m.lta"), a)
    ck = load_checkpoint(tmp_path / "c0.ltck")
    save_checkpoint(tmp_path / "c0b.ltck", ck)
    ck_rt = (tmp_path / "c0b.ltck").read_bytes() == (tmp_path / "c0.ltck").read_bytes()
    s = corpus[1]
    sf = SampleFile({"id": s.id}, s.frames.params, s.landmarks, s.vertices, s.beta)
    save_sample(tmp_path / "s.ltsm", sf)
    back = load_sample(tmp_path / "s.ltsm")
    sample_rt = all(np.array_equal(getattr(back, k), getattr(sf, k)) for k in ("frames", "landmarks", "vertices", "beta"))
    seq, beta = load_anim_json(tmp_path / "a0.json")
    ref, _ = load_anim_json(tmp_path / "a1.json")
    v_ref = np.stack([x.vertices for x in animate(a, beta, ref)])
    save_anim_json(tmp_path / "again.json", seq, beta)
    seq2, beta2 = load_anim_json(tmp_path / "again.json")
    anim_rt = np.array_equal(np.stack([x.vertices for x in animate(a, beta2, seq2)]), v_ref)
    ok = report(9, [("identical seeds give byte-identical checkpoints, animations and reports", deterministic),
                    ("asset, checkpoint and sample containers round-trip losslessly", assets_rt and ck_rt and sample_rt),
                    ("anim-json re-import reproduces vertices bitwise", anim_rt)])
    assert ok, RESULTS[9]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
