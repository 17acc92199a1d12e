"""Defense measurements (disparity, quality, rank correlation) and their aggregation.

Aggregates follow the leaderboard layout: inside a (defense, case) group each
attack x strength x metric cell is averaged first, then the cell means are
averaged with equal weight. The reported dispersion is the population
standard deviation across those cell means.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .measures import PSNR_CEILING, srocc

RECORDS_VERSION = "iqadefbench-records v1"
CERT_RECORDS_VERSION = "iqadefbench-cert-records v1"


@dataclass
class EvaluationRecord:
    metric_id: str
    attack_id: str
    strength: str
    defense_id: str
    defense_name: str
    defense_param: str
    case: str
    image_id: str
    mos: float
    diam: float
    score_source: float
    score_adv: float
    score_def_adv: float
    score_def_clean: float
    q_ssim: float
    q_psnr: float
    seed: int
    wall_time_ms: float = field(default=0.0, compare=False)

    def __post_init__(self):
        for name in ("score_source", "score_adv", "score_def_adv", "score_def_clean"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.wall_time_ms < 0:
            raise ValueError("wall_time_ms must be >= 0")

    @property
    def key(self) -> tuple:
        return (self.case, self.defense_id, self.metric_id, self.attack_id, self.strength, self.image_id)


@dataclass
class CertRecord:
    metric_id: str
    attack_id: str
    strength: str
    defense_id: str
    kind: str
    image_id: str
    mos: float
    diam: float
    smoothed_clean: float
    smoothed_adv: float
    radius: float
    abstained: int
    relative_delta: float
    samples: int
    sigma: float
    alpha: float
    seed: int
    wall_time_ms: float = field(default=0.0, compare=False)

    @property
    def key(self) -> tuple:
        return (self.defense_id, self.metric_id, self.attack_id, self.strength, self.image_id)


def _need(records):
    records = list(records)
    if not records:
        raise ValueError("no records")
    return records


def d_score(records: Iterable[EvaluationRecord]) -> float:
    """Mean |f(P(x')) - f(x)| / diam, in percent."""
    r = _need(records)
    return float(np.mean([abs(e.score_def_adv - e.score_source) / e.diam for e in r]) * 100.0)


def d_score_defended(records: Iterable[EvaluationRecord]) -> float:
    """Mean |f(P(x')) - f(P(x))| / diam, in percent."""
    r = _need(records)
    return float(np.mean([abs(e.score_def_adv - e.score_def_clean) / e.diam for e in r]) * 100.0)


def q_score_value(ssim_value: float, psnr_value: float) -> float:
    return ssim_value + psnr_value / PSNR_CEILING


def q_score(records: Iterable[EvaluationRecord]) -> float:
    r = _need(records)
    return float(np.mean([q_score_value(e.q_ssim, e.q_psnr) for e in r]))


def _per_image(records, attr):
    seen = {}
    for e in records:
        seen.setdefault(e.image_id, (e.mos, getattr(e, attr)))
    mos, vals = zip(*seen.values()) if seen else ((), ())
    return list(mos), list(vals)


def srocc_clear(records: Iterable[EvaluationRecord]) -> float:
    """Rank correlation of MOS with defended clean scores (one value per image)."""
    mos, vals = _per_image(_need(records), "score_def_clean")
    return srocc(mos, vals)


def srocc_adv(records: Iterable[EvaluationRecord]) -> float:
    r = _need(records)
    return srocc([e.mos for e in r], [e.score_def_adv for e in r])


def _safe(fn, records):
    try:
        return fn(records)
    except ValueError:
        return math.nan


# ---------------------------------------------------------------------------
# aggregation

PURIFICATION_MEASURES = ("srocc_clear", "time_ms", "d_score", "d_score_defended", "srocc_adv", "q_score")
CERTIFIED_MEASURES = ("d_score_defended", "srocc_adv", "srocc_clear", "cert_radius", "abstention", "cert_rel_delta")


@dataclass
class AggregateRow:
    key: dict
    measures: dict  # name -> (mean, dispersion)
    count: int
    cells: int

    def mean(self, name: str) -> float:
        return self.measures[name][0]

    def flat(self) -> dict:
        out = dict(self.key)
        for name, (m, s) in self.measures.items():
            out[f"{name}_mean"] = m
            out[f"{name}_std"] = s
        out["count"] = self.count
        out["cells"] = self.cells
        return out


def _mean_std(vals) -> tuple:
    v = np.array([x for x in vals if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return (math.nan, math.nan)
    return (float(v.mean()), float(v.std()))


def _cell_measures(cell) -> dict:
    return {
        "srocc_clear": _safe(srocc_clear, cell),
        "time_ms": float(np.mean([e.wall_time_ms for e in cell])),
        "d_score": d_score(cell),
        "d_score_defended": d_score_defended(cell),
        "srocc_adv": _safe(srocc_adv, cell),
        "q_score": q_score(cell),
    }


def _cert_cell_measures(cell) -> dict:
    radii = [e.radius for e in cell if e.kind == "classification" and not e.abstained]
    deltas = [e.relative_delta * 100.0 for e in cell if e.kind == "regression"]
    cls = [e for e in cell if e.kind == "classification"]
    return {
        "d_score_defended": float(np.mean([abs(e.smoothed_adv - e.smoothed_clean) / e.diam for e in cell]) * 100),
        "srocc_adv": _safe(lambda c: srocc([e.mos for e in c], [e.smoothed_adv for e in c]), cell),
        "srocc_clear": _safe(lambda c: srocc([e.mos for e in c], [e.smoothed_clean for e in c]), cell),
        "cert_radius": float(np.mean(radii)) if radii else math.nan,
        "abstention": float(np.mean([e.abstained for e in cls]) * 100) if cls else math.nan,
        "cert_rel_delta": float(np.mean(deltas)) if deltas else math.nan,
    }


def aggregate(records: Sequence, grouping: Sequence[str] = ("case", "defense_name", "defense_param", "defense_id"),
              cell_keys: Sequence[str] = ("metric_id", "attack_id", "strength")) -> list:
    """One AggregateRow per distinct ``grouping`` value, sorted by key."""
    records = _need(records)
    certified = isinstance(records[0], CertRecord)
    measure_fn = _cert_cell_measures if certified else _cell_measures
    groups = defaultdict(lambda: defaultdict(list))
    for e in records:
        gk = tuple(getattr(e, g) for g in grouping)
        ck = tuple(getattr(e, c) for c in cell_keys)
        groups[gk][ck].append(e)
    rows = []
    for gk in sorted(groups):
        cells = groups[gk]
        per_cell = [measure_fn(sorted(cells[ck], key=lambda e: e.key)) for ck in sorted(cells)]
        names = per_cell[0].keys()
        measures = {n: _mean_std([c[n] for c in per_cell]) for n in names}
        rows.append(AggregateRow(dict(zip(grouping, gk)), measures,
                                 sum(len(v) for v in cells.values()), len(cells)))
    return rows


def select_best_defense_params(rows: Sequence[AggregateRow], name_key: str = "defense_name") -> list:
    """Per defense keep the parameter set with the highest SROCC_adv; ties go to higher Q_score."""
    best = {}
    for r in rows:
        name = r.key[name_key]
        rank = (_nan_low(r.mean("srocc_adv")), _nan_low(r.measures.get("q_score", (math.nan,))[0]),
                str(r.key.get("defense_param", "")))
        if name not in best or rank[:2] > best[name][0][:2]:
            best[name] = (rank, r)
    return [best[n][1] for n in sorted(best)]


def _nan_low(v):
    return -math.inf if v is None or math.isnan(v) else v


# ---------------------------------------------------------------------------
# persistence

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def _record_fields(cls, with_time: bool):
    return [f for f in fields(cls) if with_time or f.name != "wall_time_ms"]


def records_to_csv(records: Sequence, with_time: bool = False) -> str:
    """Deterministic delimited text. Wall time is excluded unless ``with_time``:
    timings differ run to run and live in a separate sidecar file."""
    records = sorted(records, key=lambda e: e.key)
    cls = type(records[0]) if records else EvaluationRecord
    version = CERT_RECORDS_VERSION if cls is CertRecord else RECORDS_VERSION
    cols = _record_fields(cls, with_time)
    buf = io.StringIO()
    buf.write(f"# {version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in cols])
    for e in records:
        w.writerow([_fmt(getattr(e, f.name)) for f in cols])
    return buf.getvalue()


def write_records(path, records: Sequence, with_time: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_to_csv(records, with_time))
    return path


def _convert(f, text):
    if f.type in ("float", float):
        return float(text)
    if f.type in ("int", int):
        return int(text)
    return text


def parse_records(text: str) -> list:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ValueError("missing records version header")
    version = lines[0][2:].strip()
    if version == RECORDS_VERSION:
        cls = EvaluationRecord
    elif version == CERT_RECORDS_VERSION:
        cls = CertRecord
    else:
        raise ValueError(f"unsupported records version {version!r}")
    reader = csv.DictReader(lines[1:])
    by_name = {f.name: f for f in fields(cls)}
    out = []
    for row in reader:
        kwargs = {k: _convert(by_name[k], v) for k, v in row.items()}
        out.append(cls(**kwargs))
    return out


def read_records(path) -> list:
    return parse_records(Path(path).read_text())


def write_timings(path, records: Sequence) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "wall_time_ms"])
        for e in sorted(records, key=lambda e: e.key):
            w.writerow(["|".join(map(str, e.key)), repr(float(e.wall_time_ms))])
    return path


def attach_timings(records: Sequence, path) -> list:
    path = Path(path)
    if not path.exists():
        return list(records)
    with path.open() as fh:
        times = {row["key"]: float(row["wall_time_ms"]) for row in csv.DictReader(fh)}
    for e in records:
        e.wall_time_ms = times.get("|".join(map(str, e.key)), e.wall_time_ms)
    return list(records)


def record_dict(e) -> dict:
    return asdict(e)
