"""Manifest-driven clip curation: attribute query, detector-score filters,
scene splitting, manual exclusion, trimming and train/test split.

Records are never dropped by filters; they are marked excluded with a reason,
and a later stage never clears an earlier exclusion.  Thresholds use >=.
"""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, FormatError
from .io_utils import atomic_write

log = logging.getLogger(__name__)

PIPELINE_VERSION = "1"
SOURCES = ("mead", "celeb")
RECORD_FIELDS = ("id", "source", "tags", "start", "end", "fps", "laughter", "speaker", "scenes",
                 "split", "excluded", "reason", "identity", "parent")


@dataclass
class ClipRecord:
    id: str
    source: str                       # mead | celeb
    tags: list = field(default_factory=list)
    start: float = 0.0
    end: float = 0.0
    fps: float = 25.0
    laughter: list | None = None      # [[t0, t1, p], ...] absolute seconds
    speaker: list | None = None       # one score per second from start
    scenes: list | None = None        # cut timestamps, absolute seconds
    split: str = "unassigned"         # train | test | unassigned
    excluded: bool = False
    reason: str = ""
    identity: str | None = None
    parent: str | None = None

    def __post_init__(self):
        if self.end <= self.start:
            raise DataError(f"record {self.id}: end {self.end} must exceed start {self.start}")
        for seg in self.laughter or []:
            t0, t1, p = seg
            if not (self.start - 1e-9 <= t0 <= t1 <= self.end + 1e-9):
                raise DataError(f"record {self.id}: laughter segment {seg} outside [{self.start}, {self.end}]")
            if not 0.0 <= p <= 1.0:
                raise DataError(f"record {self.id}: laughter probability {p} outside [0, 1]")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def exclude(self, reason: str) -> None:
        if not self.excluded:
            self.excluded = True
            self.reason = reason


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    header: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"manifest has duplicate ids: {dup[:5]}")

    def __len__(self) -> int:
        return len(self.records)

    def active(self) -> list[ClipRecord]:
        return [r for r in self.records if not r.excluded]

    def ids(self, include_excluded: bool = False) -> list[str]:
        return [r.id for r in self.records if include_excluded or not r.excluded]

    def derive(self, records: list, **header) -> "Manifest":
        h = copy.deepcopy(self.header)
        h.update(header)
        return Manifest(records, h, list(self.warnings))


def _copy(m: Manifest) -> list[ClipRecord]:
    return [copy.deepcopy(r) for r in m.records]


def _steps(m: Manifest, step: str) -> list:
    return list(m.header.get("steps", [])) + [step]


# -- filters -------------------------------------------------------------------

def query_attributes(m: Manifest, tags: Iterable[str], mode: str = "any") -> Manifest:
    tags = set(tags)
    if not tags:
        raise DataError("query_attributes: need at least one tag")
    if mode not in ("any", "all"):
        raise DataError(f"query_attributes: mode must be 'any' or 'all', got {mode!r}")
    test = (lambda r: bool(tags & set(r.tags))) if mode == "any" else (lambda r: tags <= set(r.tags))
    keep = [copy.deepcopy(r) for r in m.records if test(r)]
    return m.derive(keep, query={"tags": sorted(tags), "mode": mode},
                    steps=_steps(m, f"query:{mode}:{','.join(sorted(tags))}"))


def _merge_runs(segs: list[tuple[float, float]]) -> list[float]:
    """Durations of runs of touching/overlapping segments."""
    runs: list[list[float]] = []
    for t0, t1 in sorted(segs):
        if runs and t0 <= runs[-1][1] + 1e-9:
            runs[-1][1] = max(runs[-1][1], t1)
        else:
            runs.append([t0, t1])
    return [b - a for a, b in runs]


def laughter_seconds(r: ClipRecord, min_prob: float, contiguous: bool = False) -> float:
    segs = [(t0, t1) for t0, t1, p in (r.laughter or []) if p >= min_prob]
    if contiguous:
        runs = _merge_runs(segs)
        return max(runs) if runs else 0.0
    return float(sum(t1 - t0 for t0, t1 in segs))


def filter_laughter(m: Manifest, min_duration: float = 3.5, min_prob: float = 0.5,
                    contiguous: bool = False, strict: bool = False) -> Manifest:
    out = _copy(m)
    for r in out:
        if r.excluded:
            continue
        if r.laughter is None:
            if strict:
                raise DataError(f"filter_laughter: record {r.id} has no laughter scores")
            r.exclude("no-scores")
        elif laughter_seconds(r, min_prob, contiguous) < min_duration - 1e-9:
            r.exclude("laughter<min")
    return m.derive(out, laughter_mode="contiguous" if contiguous else "total",
                    steps=_steps(m, f"laughter>={min_duration}@p>={min_prob}"))


def filter_active_speaker(m: Manifest, min_mean_score: float = 0.5, strict: bool = False) -> Manifest:
    out = _copy(m)
    for r in out:
        if r.excluded:
            continue
        if not r.speaker:
            if strict:
                raise DataError(f"filter_active_speaker: record {r.id} has no speaker scores")
            r.exclude("no-scores")
        elif float(np.mean(r.speaker)) < min_mean_score:
            r.exclude("speaker<min")
    return m.derive(out, steps=_steps(m, f"speaker>={min_mean_score}"))


def _sub_record(r: ClipRecord, k: int, a: float, b: float) -> ClipRecord:
    laugh = None
    if r.laughter is not None:
        laugh = [[max(t0, a), min(t1, b), p] for t0, t1, p in r.laughter if min(t1, b) > max(t0, a)]
    speaker = None
    if r.speaker is not None:
        i0 = int(np.floor(a - r.start + 1e-9))
        i1 = int(np.ceil(b - r.start - 1e-9))
        speaker = list(r.speaker[i0:max(i1, i0 + 1)])
    return ClipRecord(id=f"{r.id}#{k}", source=r.source, tags=list(r.tags), start=a, end=b, fps=r.fps,
                      laughter=laugh, speaker=speaker, scenes=[], split=r.split, identity=r.identity, parent=r.id)


def scene_segments(r: ClipRecord) -> list[tuple[float, float]]:
    cuts = sorted(set(r.scenes or []))
    for c in cuts:
        if c < r.start or c > r.end:
            raise DataError(f"split_scenes: record {r.id} has cut {c} outside [{r.start}, {r.end}]")
    bounds = [r.start] + [c for c in cuts if r.start < c < r.end] + [r.end]
    return list(zip(bounds[:-1], bounds[1:]))


def split_scenes(m: Manifest, min_len: float = 3.5) -> Manifest:
    out: list[ClipRecord] = []
    for r in m.records:
        if r.excluded:
            out.append(copy.deepcopy(r))
            continue
        segs = scene_segments(r)
        if len(segs) == 1:
            rr = copy.deepcopy(r)
            if rr.duration < min_len - 1e-9:
                rr.exclude("scene<min")
            out.append(rr)
            continue
        for k, (a, b) in enumerate(segs):
            if b - a >= min_len - 1e-9:
                out.append(_sub_record(r, k, a, b))
    return m.derive(out, steps=_steps(m, f"scenes>={min_len}"))


def read_exclude_list(path) -> list[tuple[str, str]]:
    """One ``id<TAB>reason`` per line; '#' starts a comment line."""
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cid, _, reason = line.partition("\t")
            items.append((cid.strip(), reason.strip() or "manual"))
    return items


def apply_excludes(m: Manifest, exclude_list: Iterable) -> Manifest:
    out = _copy(m)
    by_id = {r.id: r for r in out}
    warnings = list(m.warnings)
    for item in exclude_list:
        cid, reason = (item, "manual") if isinstance(item, str) else (item[0], item[1])
        if cid in by_id:
            by_id[cid].exclude(reason)
        else:
            msg = f"exclude list names unknown id {cid!r}"
            if msg not in warnings:
                warnings.append(msg)
                log.warning(msg)
    res = m.derive(out, steps=_steps(m, "excludes"))
    res.warnings = warnings
    return res


def trim_and_split(m: Manifest, train_len: float = 3.5, test_fraction: float | Mapping[str, float] = 0.1,
                   seed: int = 0, by_identity: bool = False) -> Manifest:
    """Seeded split, stratified by source; train clips trimmed to ``train_len``.

    Per source, round(fraction * n) clips go to test.  Clips shorter than
    ``train_len`` cannot serve as training clips and are marked excluded
    first.  With ``by_identity`` whole identities are assigned to test until
    the quota is met.
    """
    out = _copy(m)
    for r in out:
        if not r.excluded and r.duration < train_len - 1e-9:
            r.exclude("short<train_len")
    active = [r for r in out if not r.excluded]
    if len(active) < 2:
        raise DataError(f"trim_and_split: need at least 2 usable records, have {len(active)}")
    rng = np.random.default_rng(seed)
    for src in sorted({r.source for r in active}):
        group = [r for r in active if r.source == src]
        frac = test_fraction.get(src, 0.0) if isinstance(test_fraction, Mapping) else float(test_fraction)
        if not 0.0 <= frac <= 1.0:
            raise DataError(f"trim_and_split: test fraction {frac} outside [0, 1]")
        n_test = int(round(frac * len(group)))
        if by_identity and all(r.identity for r in group):
            idents = sorted({r.identity for r in group})
            order = [idents[i] for i in rng.permutation(len(idents))]
            test_ids: set = set()
            chosen = 0
            for ident in order:
                if chosen >= n_test:
                    break
                members = [r for r in group if r.identity == ident]
                test_ids.update(r.id for r in members)
                chosen += len(members)
            is_test = [r.id in test_ids for r in group]
        else:
            perm = rng.permutation(len(group))
            test_idx = set(perm[:n_test].tolist())
            is_test = [i in test_idx for i in range(len(group))]
        for r, t in zip(group, is_test):
            if t:
                r.split = "test"
            else:
                r.split = "train"
                r.end = r.start + train_len
                if r.laughter is not None:
                    r.laughter = [[t0, min(t1, r.end), p] for t0, t1, p in r.laughter if t0 < r.end]
    return m.derive(out, split={"train_len": train_len, "seed": seed,
                                "test_fraction": dict(test_fraction) if isinstance(test_fraction, Mapping) else test_fraction},
                    steps=_steps(m, "trim_and_split"))


def stats(m: Manifest) -> dict:
    """Table-style counts over non-excluded records."""
    act = m.active()
    out: dict = {"total": len(act), "excluded": len(m.records) - len(act), "sources": {}}
    for src in sorted(set(SOURCES) | {r.source for r in act}):
        rs = [r for r in act if r.source == src]
        row = {"total": len(rs)}
        for split in ("train", "test", "unassigned"):
            sub = [r for r in rs if r.split == split]
            row[split] = len(sub)
            row[f"{split}_mean_duration"] = float(np.mean([r.duration for r in sub])) if sub else 0.0
        out["sources"][src] = row
    return out


def format_stats(s: dict) -> str:
    lines = [f"total {s['total']}", f"excluded {s['excluded']}"]
    for src, row in s["sources"].items():
        lines.append(f"{src} total={row['total']} train={row['train']} test={row['test']} "
                     f"train_mean_s={row['train_mean_duration']:.3f} test_mean_s={row['test_mean_duration']:.3f}")
    return "\n".join(lines) + "\n"


# -- files ---------------------------------------------------------------------

def save_manifest(path, m: Manifest) -> None:
    header = dict(m.header, manifest=PIPELINE_VERSION, fields=list(RECORD_FIELDS))
    with atomic_write(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in m.records:
            d = asdict(r)
            fh.write(json.dumps({k: d[k] for k in RECORD_FIELDS}) + "\n")


def load_manifest(path) -> Manifest:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest (missing header line)")
    try:
        header = json.loads(lines[0])
        if "manifest" not in header:
            raise FormatError(f"{path}: first line is not a manifest header")
        records = []
        for i, ln in enumerate(lines[1:], start=2):
            d = json.loads(ln)
            unknown = set(d) - set(RECORD_FIELDS)
            if unknown:
                raise FormatError(f"{path}:{i}: unknown record fields {sorted(unknown)}")
            records.append(ClipRecord(**d))
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: invalid JSON ({err})") from None
    except TypeError as err:
        raise FormatError(f"{path}: bad record ({err})") from None
    header.pop("fields", None)
    return Manifest(records, header)


@dataclass(frozen=True)
class DetectorSpec:
    """Stub detector reading precomputed score files ``<id>.<kind>.txt`` from a directory."""
    kind: str      # laugh | speaker | scenes
    directory: str

    def __post_init__(self):
        if self.kind not in ("laugh", "speaker", "scenes"):
            raise ValueError(f"unknown detector kind {self.kind!r}")

    def path(self, clip_id: str) -> str:
        return os.path.join(self.directory, f"{clip_id}.{self.kind}.txt")

    def detect(self, clip_id: str):
        p = self.path(clip_id)
        if not os.path.exists(p):
            return None
        with open(p, encoding="utf-8") as fh:
            rows = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
        try:
            if self.kind == "laugh":
                return [[float(a), float(b), float(c)] for a, b, c in rows]
            return [float(r[0]) for r in rows]
        except ValueError as err:
            raise FormatError(f"{p}: malformed {self.kind} scores ({err})") from None


def attach_scores(m: Manifest, detectors: Sequence[DetectorSpec]) -> Manifest:
    out = _copy(m)
    field_of = {"laugh": "laughter", "speaker": "speaker", "scenes": "scenes"}
    for r in out:
        for det in detectors:
            scores = det.detect(r.id)
            if scores is not None:
                setattr(r, field_of[det.kind], scores)
        ClipRecord.__post_init__(r)
    return m.derive(out, detectors=[d.kind for d in detectors])


@dataclass(frozen=True)
class CurateConfig:
    laugh_tags: tuple = ("laugh", "smile", "happy")
    neutral_tags: tuple = ("neutral",)
    min_laughter: float = 3.5
    min_prob: float = 0.5
    contiguous: bool = False
    min_speaker: float = 0.5
    min_len: float = 3.5
    train_len: float = 3.5
    test_fraction: float | Mapping[str, float] = 0.1   # one value or per source
    seed: int = 0


def run_pipeline(m: Manifest, cfg: CurateConfig = CurateConfig(), excludes: Iterable = ()) -> Manifest:
    """CelebV-like clips: laugh query, laughter and speaker filters.  MEAD-like
    clips: neutral query.  Then scene split, manual excludes, trim and split."""
    celeb = Manifest([r for r in m.records if r.source == "celeb"], m.header)
    mead = Manifest([r for r in m.records if r.source == "mead"], m.header)
    celeb = query_attributes(celeb, cfg.laugh_tags, "any")
    celeb = filter_laughter(celeb, cfg.min_laughter, cfg.min_prob, cfg.contiguous)
    celeb = filter_active_speaker(celeb, cfg.min_speaker)
    mead = query_attributes(mead, cfg.neutral_tags, "any")
    merged = Manifest(mead.records + celeb.records,
                      dict(m.header, pipeline=PIPELINE_VERSION, laughter_mode="contiguous" if cfg.contiguous else "total"))
    merged = split_scenes(merged, cfg.min_len)
    merged = apply_excludes(merged, excludes)
    return trim_and_split(merged, cfg.train_len, cfg.test_fraction, cfg.seed)
