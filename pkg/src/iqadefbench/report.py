"""Leaderboard rendering for purification and certified-defense results."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .evaluation import CertRecord, EvaluationRecord, aggregate, select_best_defense_params
from .measures import PSNR_CEILING

FORMATS = ("delimited", "markdown")

DISPLAY_NAMES = {
    "none": "W/o Defense", "flip": "Flip", "unsharp": "Unsharp", "jpeg": "JPEG",
    "color_quant": "Color Quantization", "diffjpeg": "DiffJPEG", "random_noise": "Random Noise",
    "crop": "Crop", "resize": "Resize", "rotate": "Rotate", "bilinear_upscale": "Bilinear Upscale",
    "median_blur": "Median Blur", "gaussian_blur": "Gaussian Blur",
}


@dataclass(frozen=True)
class Column:
    key: str
    title: str
    higher_is_better: bool
    digits: int


PURIFICATION_COLUMNS = (
    Column("srocc_clear", "SROCC_clear", True, 3),
    Column("time_ms", "Mean Time(ms)", False, 2),
    Column("na_d_score", "Non-adaptive D_score,%", False, 2),
    Column("na_srocc_adv", "Non-adaptive SROCC_adv", True, 3),
    Column("na_q_score", "Non-adaptive Q_score", True, 2),
    Column("ad_d_score", "Adaptive D_score,%", False, 2),
    Column("ad_srocc_adv", "Adaptive SROCC_adv", True, 3),
)

CERTIFIED_COLUMNS = (
    Column("d_score_defended", "D_score^(D),%", False, 2),
    Column("srocc_adv", "SROCC_adv", True, 2),
    Column("srocc_clear", "SROCC_clear", True, 2),
    Column("cert_radius", "Cert.R", True, 2),
    Column("abstention", "Abst.,%", False, 2),
    Column("cert_rel_delta", "Cert.RD,%", True, 2),
)

DISPERSION_NOTE = ("± is the population standard deviation across attack x strength x metric cell means; "
                   "each cell carries equal weight in the mean.")
MARK_NOTE = "**bold** marks the best value in a column, <u>underline</u> the second best."

FOOTER = (
    DISPERSION_NOTE,
    f"PSNR is clamped at {PSNR_CEILING:g} dB, so Q_score = SSIM + PSNR/{PSNR_CEILING:g} <= 2.",
    "Parameters per defense are those with the highest non-adaptive SROCC_adv (ties: higher Q_score).",
    "Mean Time is the per-image wall time of the defense call only.",
    "--- marks a cell that was not run "
    "(non-differentiable defenses and adversarially trained models have no adaptive case).",
)

CERTIFIED_FOOTER = (
    DISPERSION_NOTE,
    "Cert.R averages the certified l2 radius over non-abstained inputs of classification-based variants.",
    "Cert.RD is the certified score interval width over the epsilon ball, divided by the metric range.",
    "--- marks a measure that does not apply (Cert.R and Abst. for regression, Cert.RD for classification).",
)

NAN = (math.nan, math.nan)


@dataclass
class TableRow:
    label: str
    param: str
    values: dict  # column key -> (mean, std)


def _label(name: str) -> str:
    return DISPLAY_NAMES.get(name, name)


def purification_rows(records: Sequence[EvaluationRecord]) -> list:
    """Table rows: one per defense, parameters chosen on the non-adaptive case."""
    grouping = ("case", "defense_name", "defense_param")
    rows = aggregate(records, grouping)
    na = [r for r in rows if r.key["case"] in ("non_adaptive", "adv_training")]
    ad = {(r.key["defense_name"], r.key["defense_param"]): r for r in rows if r.key["case"] == "adaptive"}
    chosen = select_best_defense_params(na) if na else []
    if not na:
        # adaptive-only input: pick by adaptive SROCC_adv instead
        chosen = select_best_defense_params(list(ad.values()))
    out = []
    for r in chosen:
        name, param = r.key["defense_name"], r.key["defense_param"]
        a = ad.get((name, param))
        base = r if r.key["case"] != "adaptive" else None
        values = {
            "srocc_clear": r.measures["srocc_clear"],
            "time_ms": r.measures["time_ms"],
            "na_d_score": base.measures["d_score"] if base else NAN,
            "na_srocc_adv": base.measures["srocc_adv"] if base else NAN,
            "na_q_score": base.measures["q_score"] if base else NAN,
            "ad_d_score": a.measures["d_score"] if a else NAN,
            "ad_srocc_adv": a.measures["srocc_adv"] if a else NAN,
        }
        out.append(TableRow(_label(name), param, values))
    out.sort(key=lambda t: (t.label != "W/o Defense", -_num(t.values["srocc_clear"][0]), t.label, t.param))
    return out


def certified_rows(records: Sequence[CertRecord]) -> list:
    rows = aggregate(records, ("defense_id",))
    return [TableRow(r.key["defense_id"], "", {c.key: r.measures[c.key] for c in CERTIFIED_COLUMNS}) for r in rows]


def _num(v: float) -> float:
    return -math.inf if math.isnan(v) else v


def _marks(rows: Sequence[TableRow], columns: Sequence[Column]) -> dict:
    """(row index, column key) -> 'best' | 'second'. Ties share a mark."""
    marks = {}
    for c in columns:
        vals = sorted({round(r.values[c.key][0], c.digits) for r in rows if not math.isnan(r.values[c.key][0])},
                      reverse=c.higher_is_better)
        for i, r in enumerate(rows):
            v = r.values[c.key][0]
            if math.isnan(v):
                continue
            v = round(v, c.digits)
            if vals and v == vals[0]:
                marks[(i, c.key)] = "best"
            elif len(vals) > 1 and v == vals[1]:
                marks[(i, c.key)] = "second"
    return marks


def _cell(mean: float, std: float, digits: int, mark: Optional[str]) -> str:
    if math.isnan(mean):
        return "---"
    text = f"{mean:.{digits}f}±{std:.{digits}f}"
    if mark == "best":
        return f"**{text}**"
    if mark == "second":
        return f"<u>{text}</u>"
    return text


def render_markdown(title: str, rows: Sequence[TableRow], columns: Sequence[Column],
                    footer: Sequence[str] = FOOTER) -> str:
    marks = _marks(rows, columns)
    head = ["Defense", "Params"] + [c.title + (" ↑" if c.higher_is_better else " ↓") for c in columns]
    lines = [f"### {title}", "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for i, r in enumerate(rows):
        cells = [_cell(*r.values[c.key], c.digits, marks.get((i, c.key))) for c in columns]
        lines.append("| " + " | ".join([r.label, r.param or "-"] + cells) + " |")
    lines.append("")
    lines.extend(f"- {f}" for f in footer)
    lines.append(f"- {MARK_NOTE}")
    return "\n".join(lines) + "\n"


def render_delimited(title: str, rows: Sequence[TableRow], columns: Sequence[Column],
                     footer: Sequence[str] = FOOTER) -> str:
    marks = _marks(rows, columns)
    buf = io.StringIO()
    buf.write(f"# {title}\n")
    for f in footer:
        buf.write(f"# {f}\n")
    w = csv.writer(buf, lineterminator="\n")
    header = ["defense", "params"]
    for c in columns:
        header += [f"{c.key}_mean", f"{c.key}_std", f"{c.key}_mark"]
    w.writerow(header)
    for i, r in enumerate(rows):
        out = [r.label, r.param]
        for c in columns:
            m, s = r.values[c.key]
            out += [repr(float(m)), repr(float(s)), marks.get((i, c.key), "")]
        w.writerow(out)
    return buf.getvalue()


def parse_delimited(text: str) -> list:
    """Inverse of the delimited format: list of dicts with float means/stds."""
    body = [line for line in text.splitlines() if not line.startswith("#")]
    out = []
    for row in csv.DictReader(body):
        d = {"defense": row.pop("defense"), "params": row.pop("params")}
        for k, v in row.items():
            d[k] = v if k.endswith("_mark") else float(v)
        out.append(d)
    return out


PURIFICATION_TITLE = "Purification defenses"
CERTIFIED_TITLE = "Certified defenses"


def emit_report(records: Sequence, format: str = "markdown") -> str:
    """Render Table 4-shaped (purification) and/or Table 5-shaped (certified) leaderboards."""
    if format not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    render = render_markdown if format == "markdown" else render_delimited
    parts = []
    ev = [r for r in records if isinstance(r, EvaluationRecord)]
    cert = [r for r in records if isinstance(r, CertRecord)]
    if ev:
        parts.append(render(PURIFICATION_TITLE, purification_rows(ev), PURIFICATION_COLUMNS))
    if cert:
        parts.append(render(CERTIFIED_TITLE, certified_rows(cert), CERTIFIED_COLUMNS, CERTIFIED_FOOTER))
    return "\n".join(parts)


def write_report(records: Sequence, out_dir) -> list:
    """Write ``leaderboard.md`` plus one delimited file per table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = list(records)
    if not records:
        raise ValueError("no records to report")
    paths = [out_dir / "leaderboard.md"]
    paths[0].write_text(emit_report(records, "markdown"))
    ev = [r for r in records if isinstance(r, EvaluationRecord)]
    cert = [r for r in records if isinstance(r, CertRecord)]
    if ev:
        p = out_dir / "purification.csv"
        p.write_text(emit_report(ev, "delimited"))
        paths.append(p)
    if cert:
        p = out_dir / "certified.csv"
        p.write_text(emit_report(cert, "delimited"))
        paths.append(p)
    return paths
