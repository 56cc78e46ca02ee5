import json
import os
import re
import subprocess
import sys

import numpy as np
import pytest

from helpers import COUNTS_FRACTIONS, known_clip, counts_records, track_from
from talkhead.audio import Waveform, save_wav
from talkhead.cli import main, split_overrides
from talkhead.containers import load_anim_json, load_checkpoint, load_sample, read_obj
from talkhead.curation import Manifest, load_manifest, save_manifest
from talkhead.fitting import save_track
from talkhead.head import load_assets

TINY = ["--synth.n_neutral", "3", "--synth.n_laugh", "3", "--synth.n_val", "1", "--synth.n_test", "1",
        "--synth.duration", "1.2", "--train.max_epochs", "2", "--train.crop_len", "20"]
for _s in ("stage1", "stage2"):
    TINY += [f"--model.{_s}.d_model", "16", f"--model.{_s}.enc_layers", "1", f"--model.{_s}.dec_layers", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["make-mini-assets", "--out", str(d / "mini.lta")]) == 0
    assert main(["synth-corpus", "--assets", str(d / "mini.lta"), "--out", str(d / "data")] + TINY) == 0
    assert main(["train", "--stage", "1", "--data", str(d / "data"), "--assets", str(d / "mini.lta"),
                 "--out", str(d / "s1.ltck"), "--log", str(d / "s1.jsonl")] + TINY) == 0
    assert main(["train", "--stage", "2", "--data", str(d / "data"), "--assets", str(d / "mini.lta"),
                 "--ckpt1", str(d / "s1.ltck"), "--out", str(d / "s2.ltck")] + TINY) == 0
    save_wav(d / "speech.wav", Waveform(np.sin(np.arange(16000) * 0.05) * 0.3, 16000))
    return d


def test_split_overrides():
    rest, over = split_overrides(["train", "--train.lr", "1e-3", "--fit.iterations=5", "--stage", "1"])
    assert rest == ["train", "--stage", "1"] and over == {"train.lr": "1e-3", "fit.iterations": "5"}


def test_usage_errors(capsys, workdir):
    assert run(capsys)[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "generate", "--audio", "x.wav")[0] == 1
    code, _, err = run(capsys, "train", "--stage", "2", "--data", workdir / "data", "--assets", workdir / "mini.lta",
                       "--out", workdir / "x.ltck")
    assert code == 1 and "--ckpt1" in err
    assert run(capsys, "stats", "--manifest", "m.jsonl", "--train.bogus", "1")[0] == 1


def test_data_errors(capsys, workdir, tmp_path):
    code, _, err = run(capsys, "stats", "--manifest", tmp_path / "missing.jsonl")
    assert code == 2 and err
    code, _, err = run(capsys, "train", "--stage", "1", "--data", workdir / "data", "--assets", workdir / "mini.lta",
                       "--out", tmp_path / "x.ltck", "--train.lr", "-1")
    assert code == 2
    code, _, err = run(capsys, "generate", "--audio", workdir / "speech.wav", "--ckpt1", workdir / "s2.ltck",
                       "--out", tmp_path / "a.json")
    assert code == 2 and "stage" in err


def test_every_run_reports_seed_and_hash(capsys, workdir, tmp_path):
    code, out, _ = run(capsys, "make-mini-assets", "--out", tmp_path / "a.lta")
    assert code == 0 and re.match(r"seed=\d+ config_hash=[0-9a-f]{64}", out)


def test_training_outputs(workdir):
    ck1, ck2 = load_checkpoint(workdir / "s1.ltck"), load_checkpoint(workdir / "s2.ltck")
    assert ck1.stage == 1 and ck2.stage == 2 and ck1.meta["subset"] == "mead" and ck2.meta["subset"] == "celeb"
    assert ck1.config_hash and ck1.meta["config"]["model"]["stage1"]["d_model"] == 16
    rows = [json.loads(line) for line in (workdir / "s1.jsonl").read_text().splitlines()]
    assert rows and "epoch" in rows[0]


def test_generate_contract(capsys, workdir, tmp_path):
    code, out, _ = run(capsys, "generate", "--audio", workdir / "speech.wav", "--ckpt1", workdir / "s1.ltck",
                       "--ckpt2", workdir / "s2.ltck", "--out", tmp_path / "a.json")
    assert code == 0 and "T=25" in out
    seq, beta = load_anim_json(tmp_path / "a.json")
    assert seq.T == 25 and seq.params.shape[1] == 15 and not np.any(beta)
    # resampled input and explicit frame count
    save_wav(tmp_path / "s8k.wav", Waveform(np.sin(np.arange(8000) * 0.1) * 0.3, 8000))
    code, _, _ = run(capsys, "generate", "--audio", tmp_path / "s8k.wav", "--ckpt1", workdir / "s1.ltck",
                     "--frames", "7", "--beta", ",".join(["0.1"] * 10), "--out", tmp_path / "b.json")
    seq_b, beta_b = load_anim_json(tmp_path / "b.json")
    assert code == 0 and seq_b.T == 7 and np.all(beta_b == 0.1)
    # determinism: same inputs, same bytes
    run(capsys, "generate", "--audio", workdir / "speech.wav", "--ckpt1", workdir / "s1.ltck",
        "--ckpt2", workdir / "s2.ltck", "--out", tmp_path / "c.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "c.json").read_bytes()


def test_export_and_evaluate(capsys, workdir, tmp_path):
    run(capsys, "generate", "--audio", workdir / "speech.wav", "--ckpt1", workdir / "s1.ltck", "--frames", "3",
        "--out", tmp_path / "a.json")
    code, out, _ = run(capsys, "export", "--anim", tmp_path / "a.json", "--assets", workdir / "mini.lta",
                       "--format", "obj-seq", "--out", tmp_path / "objs")
    assert code == 0 and sorted(os.listdir(tmp_path / "objs")) == [f"frame_0000{i}.obj" for i in range(3)]
    v, f = read_obj(tmp_path / "objs" / "frame_00000.obj")
    assert v.shape == (load_assets(workdir / "mini.lta").n_v, 3)
    code, out, _ = run(capsys, "evaluate", "--ckpt1", workdir / "s1.ltck", "--ckpt2", workdir / "s2.ltck",
                       "--data", workdir / "data", "--assets", workdir / "mini.lta", "--name", "two-stage",
                       "--out", tmp_path / "r.txt")
    assert code == 0 and "# mean clips=" in out
    run(capsys, "evaluate", "--ckpt1", workdir / "s1.ltck", "--ckpt2", workdir / "s2.ltck", "--data", workdir / "data",
        "--assets", workdir / "mini.lta", "--name", "two-stage", "--out", tmp_path / "r2.txt")
    assert (tmp_path / "r.txt").read_bytes() == (tmp_path / "r2.txt").read_bytes()


def test_fit_subcommand(capsys, workdir, tmp_path):
    assets = load_assets(workdir / "mini.lta")
    tr, _ = track_from(assets, *known_clip(assets, 0, T=10))
    save_track(tmp_path / "t.txt", tr)
    save_wav(tmp_path / "clip.wav", Waveform(np.zeros(6400), 16000))
    code, out, _ = run(capsys, "fit", "--track", tmp_path / "t.txt", "--assets", workdir / "mini.lta",
                       "--audio", tmp_path / "clip.wav", "--out", tmp_path / "clip.ltsm", "--fit.iterations", "20")
    assert code == 0 and "T=10" in out
    s = load_sample(tmp_path / "clip.ltsm")
    assert s.header["id"] == "clip" and s.header["audio"] == "clip.wav" and s.frames.shape == (10, 15)


def test_curate_and_stats_subcommands(capsys, tmp_path):
    save_manifest(tmp_path / "m.jsonl", Manifest(counts_records(), {"source": "fixture"}))
    (tmp_path / "ex.tsv").write_text("mx0\tprofile\nmx1\toccluded\n")
    frac = ",".join(f"{k}:{v!r}" for k, v in COUNTS_FRACTIONS.items())
    code, out, err = run(capsys, "curate", "--manifest", tmp_path / "m.jsonl", "--exclude", tmp_path / "ex.tsv",
                         "--out", tmp_path / "out.jsonl", "--curate.test_fraction", frac)
    assert code == 0 and "total 943" in out and "mead total=438 train=374 test=64" in out
    assert "celeb total=505 train=455 test=50" in out
    assert len(load_manifest(tmp_path / "out.jsonl").active()) == 943
    code, out, _ = run(capsys, "stats", "--manifest", tmp_path / "out.jsonl")
    assert code == 0 and "total 943" in out


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "talkhead", "make-mini-assets", "--out", str(tmp_path / "a.lta")],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "config_hash=" in r.stdout
    r = subprocess.run([sys.executable, "-m", "talkhead"], capture_output=True, text=True)
    assert r.returncode == 1
