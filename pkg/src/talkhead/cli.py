"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numerical abort.
Config values come from a TOML file (``--config`` or $TALKHEAD_CONFIG) and
``--section.key value`` overrides; every run prints its seed and config hash.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import traceback

import numpy as np

from . import config as cfgmod
from .animator import ModelConfig, StageModel, compose, generate
from .audio import TcnConfig, load_wav, resample
from .containers import load_anim_json, load_checkpoint, save_anim_json, save_checkpoint, export_obj_sequence
from .errors import DataError, NumericalAbort, TalkheadError, UsageError
from .head.assets import load_assets, make_mini_assets, save_assets
from .io_utils import atomic_write

SUBCOMMANDS = ("make-mini-assets", "curate", "fit", "train", "generate", "evaluate", "export", "stats",
               "synth-corpus")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="talkhead", description="Two-stage speech-driven facial animation toolkit.")
    p.add_argument("--config", help="TOML config file (default: $%s)" % cfgmod.ENV_CONFIG)
    sub = p.add_subparsers(dest="cmd", metavar="SUBCOMMAND", parser_class=_Parser)

    s = sub.add_parser("make-mini-assets", help="write a procedurally generated head asset file")
    s.add_argument("--out", required=True)

    s = sub.add_parser("curate", help="run the curation pipeline over a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--scores", help="directory of <id>.<laugh|speaker|scenes>.txt score files")
    s.add_argument("--exclude", help="exclude list (id<TAB>reason per line)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("fit", help="fit head parameters to a landmark track, write a pseudo-GT sample")
    s.add_argument("--track", required=True)
    s.add_argument("--assets", required=True)
    s.add_argument("--audio", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--id")
    s.add_argument("--subset", choices=("neutral", "laugh"), default="neutral")
    s.add_argument("--split", choices=("train", "val", "test"), default="train")

    s = sub.add_parser("train", help="train stage 1 or the residual stage 2")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--subset", choices=("mead", "celeb", "both"))
    s.add_argument("--data", required=True, help="directory of .ltsm samples with their audio")
    s.add_argument("--assets", required=True)
    s.add_argument("--ckpt1", help="frozen stage-1 checkpoint (required for --stage 2)")
    s.add_argument("--out", required=True)
    s.add_argument("--log", help="write per-epoch records as JSON lines")

    s = sub.add_parser("generate", help="animate an audio file")
    s.add_argument("--audio", required=True)
    s.add_argument("--ckpt1", required=True)
    s.add_argument("--ckpt2")
    s.add_argument("--beta", default="zeros", help="'zeros', comma-separated values or a .npy file")
    s.add_argument("--frames", type=int, help="number of frames (default: audio duration x fps)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", help="LVE / EFD / vertex MSE report over a dataset split")
    s.add_argument("--ckpt1", required=True)
    s.add_argument("--ckpt2")
    s.add_argument("--data", required=True)
    s.add_argument("--assets", required=True)
    s.add_argument("--split")
    s.add_argument("--name", default="")
    s.add_argument("--out", required=True)

    s = sub.add_parser("export", help="export an animation as OBJ frames or anim-json")
    s.add_argument("--anim", required=True)
    s.add_argument("--assets", required=True)
    s.add_argument("--format", choices=("obj-seq", "anim-json"))
    s.add_argument("--beta", help="identity override: 'zeros', comma-separated values or a .npy file")
    s.add_argument("--out", required=True)

    s = sub.add_parser("stats", help="clip counts, splits and durations of a manifest")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("synth-corpus", help="write the synthetic neutral/laugh corpus as a dataset directory")
    s.add_argument("--assets", required=True)
    s.add_argument("--out", required=True)
    return p


def split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull ``--section.key value`` / ``--section.key=value`` pairs out of argv."""
    rest, over = [], {}
    i = 0
    while i < len(argv):
        a = argv[i]
        key = a[2:].split("=", 1)[0] if a.startswith("--") else ""
        if "." in key:
            if "=" in a:
                over[key] = a.split("=", 1)[1]
            elif i + 1 < len(argv):
                over[key] = argv[i + 1]
                i += 1
            else:
                raise UsageError(f"override --{key} needs a value")
        else:
            rest.append(a)
        i += 1
    return rest, over


# -- config to objects ----------------------------------------------------------------

def tcn_config(cfg: dict) -> TcnConfig:
    a = cfg["audio"]
    return TcnConfig(tuple(a["kernels"]), tuple(a["strides"]), a["channels"], a["sample_rate"])


def model_config(cfg: dict, stage: int, n_psi: int) -> tuple[ModelConfig, int]:
    m = dict(cfg["model"][f"stage{stage}"])
    seed = m.pop("seed")
    return ModelConfig(n_psi=n_psi, zero_output=stage == 2, fps=cfg["audio"]["fps"], **m), seed


def train_config(cfg: dict, stage: int, subset: str):
    from .training import LossWeights, TrainConfig
    t = cfg["train"]
    tc = TrainConfig(lr=t["lr"], max_epochs=t["max_epochs"], patience=t["patience"], min_delta=t["min_delta"],
                     crop_len=t["crop_len"], seed=t["seed"], stage=stage, subset=subset,
                     history_noise=t["stage2_history_noise"] if stage == 2 else 0.0,
                     history_dropout=t["stage2_history_dropout"] if stage == 2 else 0.0)
    return tc, LossWeights(t["lam_exp"], t["lam_lmk"], t["length_scale"])


def fit_config(cfg: dict):
    from .fitting import FitConfig
    return FitConfig(**cfg["fit"])


def curate_config(cfg: dict):
    from .curation import CurateConfig
    c = dict(cfg["curate"])
    c["laugh_tags"], c["neutral_tags"] = tuple(c["laugh_tags"]), tuple(c["neutral_tags"])
    return CurateConfig(**c)


def synth_config(cfg: dict):
    from .synthetic import SynthConfig
    return SynthConfig(fps=cfg["audio"]["fps"], sample_rate=cfg["audio"]["sample_rate"], **cfg["synth"])


def parse_beta(spec: str | None, n_beta: int) -> np.ndarray:
    if spec is None or spec == "zeros":
        return np.zeros(n_beta)
    if spec.endswith(".npy"):
        try:
            b = np.load(spec)
        except FileNotFoundError:
            raise DataError(f"beta file {spec} not found") from None
    else:
        try:
            b = np.array([float(v) for v in spec.split(",")])
        except ValueError:
            raise UsageError(f"--beta expects 'zeros', comma-separated numbers or a .npy file, got {spec!r}") from None
    b = np.asarray(b, dtype=np.float64).ravel()
    if b.shape != (n_beta,):
        raise DataError(f"beta has {b.size} values, expected {n_beta}")
    return b


def _load_stage(path: str, stage: int) -> StageModel:
    from .training import model_from_checkpoint
    ck = load_checkpoint(path)
    if ck.stage != stage:
        raise DataError(f"{path}: checkpoint is stage {ck.stage}, expected stage {stage}")
    return model_from_checkpoint(ck)


# -- subcommands -----------------------------------------------------------------------

def cmd_make_mini_assets(args, cfg):
    a = cfg["assets"]
    assets = make_mini_assets(a["seed"], a["n_v"], a["n_j"], a["n_beta"], a["n_psi"])
    save_assets(args.out, assets)
    print(f"wrote {args.out}: n_v={assets.n_v} n_j={assets.n_j} n_beta={assets.n_beta} n_psi={assets.n_psi}")


def cmd_curate(args, cfg):
    from .curation import (DetectorSpec, attach_scores, format_stats, load_manifest,
                           read_exclude_list, run_pipeline, save_manifest, stats)
    m = load_manifest(args.manifest)
    if args.scores:
        m = attach_scores(m, [DetectorSpec(k, args.scores) for k in ("laugh", "speaker", "scenes")])
    excludes = read_exclude_list(args.exclude) if args.exclude else ()
    out = run_pipeline(m, curate_config(cfg), excludes)
    save_manifest(args.out, out)
    for w in out.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(format_stats(stats(out)))


def cmd_fit(args, cfg):
    from .fitting import export_pseudo_gt, fit_clip, load_track
    assets = load_assets(args.assets)
    track = load_track(args.track)
    res = fit_clip(track, assets, fit_config(cfg))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    audio = os.path.relpath(os.path.abspath(args.audio), out_dir)
    clip_id = args.id or os.path.splitext(os.path.basename(args.out))[0]
    export_pseudo_gt(res, assets, audio, args.out, track.fps,
                     {"id": clip_id, "subset": args.subset, "split": args.split})
    print(f"fit {clip_id}: T={track.T} energy={res.energy:.6g} reprojection={res.reproj:.6g} px^2")


def cmd_train(args, cfg):
    from .evaluation import load_dataset
    from .training import dumps_history, train_stage
    if args.stage == 2 and not args.ckpt1:
        raise UsageError("train --stage 2 needs --ckpt1 (the frozen stage-1 checkpoint)")
    if args.stage == 1 and args.ckpt1:
        raise UsageError("train --stage 1 takes no --ckpt1")
    subset = args.subset or ("celeb" if args.stage == 2 else "mead")
    assets = load_assets(args.assets)
    data = load_dataset(args.data)
    tc, lw = train_config(cfg, args.stage, subset)
    mc, seed = model_config(cfg, args.stage, assets.n_psi)
    model = StageModel.init(mc, tcn_config(cfg), seed)
    stage1 = _load_stage(args.ckpt1, 1) if args.stage == 2 else None
    chash = cfgmod.config_hash(cfg)
    res = train_stage(model, data["train"], data["val"], assets, tc, stage1, lw, chash)
    res.checkpoint.meta.update({"config": cfg, "n_beta": assets.n_beta, "subset": subset})
    save_checkpoint(args.out, res.checkpoint)
    if args.log:
        with atomic_write(args.log, "w", encoding="utf-8") as fh:
            fh.write(dumps_history(res.history))
    print(f"stage {args.stage} subset={subset}: steps={res.steps} epochs={res.history[-1]['epoch']} "
          f"train loss {res.initial_train_loss:.6g} -> {res.final_train_loss:.6g} "
          f"best epoch {res.checkpoint.meta['epoch']}")


def cmd_generate(args, cfg):
    s1 = _load_stage(args.ckpt1, 1).freeze()
    s2 = _load_stage(args.ckpt2, 2) if args.ckpt2 else None
    ck_meta = load_checkpoint(args.ckpt1).meta
    n_beta = int(ck_meta.get("n_beta", cfg["assets"]["n_beta"]))
    beta = parse_beta(args.beta, n_beta)
    w = load_wav(args.audio)
    if w.sample_rate != s1.tcn_cfg.sample_rate:
        w = resample(w, s1.tcn_cfg.sample_rate)
    T = args.frames if args.frames is not None else int(math.floor(w.duration * s1.cfg.fps + 1e-9))
    if T < 1:
        raise DataError(f"{args.audio}: audio too short for a single frame")
    seq = generate(s1, w, T)
    if s2 is not None:
        seq = compose(seq, generate(s2, w, T))
    save_anim_json(args.out, seq, beta)
    print(f"wrote {args.out}: T={T} fps={seq.fps} stages={'1+2' if s2 else '1'}")


def cmd_evaluate(args, cfg):
    from .evaluation import evaluate_models, load_dataset
    assets = load_assets(args.assets)
    data = load_dataset(args.data)
    split = args.split or cfg["eval"]["split"]
    if split not in data:
        raise DataError(f"unknown split {split!r}")
    if not data[split]:
        raise DataError(f"{args.data}: split {split!r} is empty")
    if cfg["eval"]["extractor"] != "geometric":
        raise DataError(f"unknown expression extractor {cfg['eval']['extractor']!r}")
    s1 = _load_stage(args.ckpt1, 1).freeze()
    s2 = _load_stage(args.ckpt2, 2) if args.ckpt2 else None
    rep = evaluate_models(s1, s2, data[split], assets, args.name)
    text = rep.to_text()
    with atomic_write(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text.splitlines()[-1])


def cmd_export(args, cfg):
    assets = load_assets(args.assets)
    seq, beta = load_anim_json(args.anim)
    if args.beta is not None:
        beta = parse_beta(args.beta, assets.n_beta)
    fmt = args.format or cfg["export"]["format"]
    if fmt == "obj-seq":
        paths = export_obj_sequence(args.out, seq, assets, beta)
        print(f"wrote {len(paths)} OBJ frames to {args.out}")
    elif fmt == "anim-json":
        save_anim_json(args.out, seq, beta)
        print(f"wrote {args.out}")
    else:
        raise DataError(f"unknown export format {fmt!r}")


def cmd_stats(args, cfg):
    from .curation import format_stats, load_manifest, stats
    print(format_stats(stats(load_manifest(args.manifest))))


def cmd_synth_corpus(args, cfg):
    from .evaluation import save_dataset
    from .synthetic import make_corpus
    assets = load_assets(args.assets)
    c = make_corpus(assets, synth_config(cfg))
    paths = save_dataset(args.out, {"train": c.train, "val": c.val, "test": c.test})
    print(f"wrote {len(paths)} samples to {args.out}")


_COMMANDS = {
    "make-mini-assets": (cmd_make_mini_assets, ("assets", "seed")),
    "curate": (cmd_curate, ("curate", "seed")),
    "fit": (cmd_fit, ("fit", "seed")),
    "train": (cmd_train, ("train", "seed")),
    "generate": (cmd_generate, ("train", "seed")),
    "evaluate": (cmd_evaluate, ("train", "seed")),
    "export": (cmd_export, ("assets", "seed")),
    "stats": (cmd_stats, ("curate", "seed")),
    "synth-corpus": (cmd_synth_corpus, ("synth", "seed")),
}


def _failing_module(err: BaseException) -> str:
    mod = "cli"
    for fr in traceback.extract_tb(err.__traceback__):
        parts = os.path.normpath(fr.filename).split(os.sep)
        if "talkhead" in parts:
            mod = ".".join(parts[parts.index("talkhead") + 1:])[:-3] or mod
    return mod


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    cmd = "talkhead"
    try:
        rest, over = split_overrides(argv)
        args = _build_parser().parse_args(rest)
        if not args.cmd:
            raise UsageError(f"missing subcommand (one of: {', '.join(SUBCOMMANDS)})")
        cmd = args.cmd
        cfg = cfgmod.load_config(args.config, over)
        fn, (section, key) = _COMMANDS[cmd]
        print(f"seed={cfg[section][key]} config_hash={cfgmod.config_hash(cfg)}")
        fn(args, cfg)
        return 0
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except NumericalAbort as err:
        print(f"{cmd}: numerical abort [{_failing_module(err)}]: {err}", file=sys.stderr)
        return 3
    except (DataError, TalkheadError, ValueError, OSError, json.JSONDecodeError) as err:
        print(f"{cmd}: error [{_failing_module(err)}]: {err}", file=sys.stderr)
        return 2
