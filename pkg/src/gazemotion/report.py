"""Report files (CSV / JSON Lines) and hand-built SVG charts."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, fields
from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from .harness import FLOOR_METRICS, MetricRow
from .hand import active_hands, palm_positions
from .synth import TrajectorySample

log = logging.getLogger(__name__)

COLUMNS = tuple(f.name for f in fields(MetricRow))
GAZE_COLORS = {True: "#d62728", False: "#2ca02c"}
FUSION_DASH = {"linear": "", "convolution": "6 3", "summation": "2 3"}
FONT = "Helvetica, Arial, sans-serif"


# ------------------------------------------------------------------- tables


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(rows: Sequence[MetricRow], path: str | Path, fmt: str | None = None) -> bool:
    """Write rows as CSV or JSON Lines (chosen by ``fmt`` or the file suffix)."""
    if not rows:
        log.warning("empty report; nothing written to %s", path)
        return False
    fmt = fmt or ("jsonl" if str(path).endswith(".jsonl") else "csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in rows:
                w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        elif fmt == "jsonl":
            for r in rows:
                fh.write(json.dumps(asdict(r), separators=(",", ":")) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return True


def _row_from_strings(d: dict) -> MetricRow:
    fold = d["fold"]
    return MetricRow(
        validation=d["validation"],
        fold=int(fold) if str(fold).lstrip("-").isdigit() else fold,
        fusion=d["fusion"],
        gaze=d["gaze"] in (True, "true"),
        input_frames=int(d["input_frames"]),
        noise_e=float(d["noise_e"]),
        metric=d["metric"],
        value=float(d["value"]),
        units=d["units"],
    )


def read_report(path: str | Path) -> list[MetricRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        if str(path).endswith(".jsonl"):
            return [_row_from_strings(json.loads(line)) for line in fh if line.strip()]
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: header {reader.fieldnames} != {list(COLUMNS)}")
        return [_row_from_strings(d) for d in reader]


def squared(rows: Sequence[MetricRow]) -> list[MetricRow]:
    """Square every value (distances to MSE-style units), as used for noise-sweep reports."""
    out = []
    for r in rows:
        units = f"{r.units}^2" if r.units else r.units
        out.append(MetricRow(r.validation, r.fold, r.fusion, r.gaze, r.input_frames, r.noise_e,
                             r.metric, r.value * r.value, units))
    return out


# -------------------------------------------------------------------- charts


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((1, 2, 2.5, 5, 10), key=lambda m: abs(m * mag - raw)) * mag
    start = math.floor(lo / step) * step
    return [round(start + i * step, 10) for i in range(int((hi - start) / step + 1.5))]


def _header(w: int, h: int, title: str) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" '
            f'font-family="{FONT}" font-size="11">',
            f"<title>{escape(title)}</title>",
            f'<rect width="{w}" height="{h}" fill="white"/>']


def plot_report(rows: Sequence[MetricRow], metric: str = "end_pose", x: str = "input_frames",
                title: str | None = None) -> str:
    """Error versus ``x`` with one panel per validation mode.

    Gaze runs are red, no-gaze runs green, fusion variants differ by dash pattern,
    and the VQ-VAE floor for the metric (when present) is a grey dashed line.
    """
    floor_name = FLOOR_METRICS.get(metric)
    data = [r for r in rows if r.metric == metric and not math.isnan(r.value)]
    if not data:
        raise ValueError(f"no rows for metric {metric!r}")
    floors = {r.validation: r.value for r in rows if r.metric == floor_name}
    validations = [v for v in ("CS", "CM", "CSM") if any(r.validation == v for r in data)]
    xs = sorted({getattr(r, x) for r in data})
    vals = [r.value for r in data] + list(floors.values())
    yticks = _ticks(0.0, max(vals) * 1.05)
    ytop = yticks[-1]
    pw, ph, ml, mt, gap = 260, 200, 55, 40, 30
    W = ml + len(validations) * (pw + gap) + 130
    H = mt + ph + 50
    units = data[0].units
    out = _header(W, H, title or f"{metric} vs {x}")
    out.append(f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="14">'
               f"{escape(title or f'{metric} ({units}) vs {x}')}</text>")
    x0, x1 = xs[0], xs[-1] if xs[-1] != xs[0] else xs[0] + 1

    for p, v in enumerate(validations):
        left = ml + p * (pw + gap)

        def sx(val, left=left):
            return left + (val - x0) / (x1 - x0) * pw

        def sy(val):
            return mt + ph - val / ytop * ph

        out.append(f'<g class="panel" data-validation="{v}">')
        out.append(f'<rect x="{left}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
        out.append(f'<text x="{left + pw / 2}" y="{mt - 6}" text-anchor="middle">{v}</text>')
        for t in yticks:
            out.append(f'<line x1="{left}" x2="{left + pw}" y1="{sy(t):.1f}" y2="{sy(t):.1f}" stroke="#eee"/>')
            if p == 0:
                out.append(f'<text x="{left - 5}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:g}</text>')
        for t in xs:
            out.append(f'<text x="{sx(t):.1f}" y="{mt + ph + 15}" text-anchor="middle">{t:g}</text>')
        out.append(f'<text x="{left + pw / 2}" y="{mt + ph + 32}" text-anchor="middle">{x}</text>')
        if v in floors:
            y = sy(floors[v])
            out.append(f'<line class="floor" x1="{left}" x2="{left + pw}" y1="{y:.1f}" y2="{y:.1f}" '
                       f'stroke="#888" stroke-width="1.5" stroke-dasharray="5 4"/>')
        series = sorted({(r.fusion, r.gaze) for r in data if r.validation == v}, key=str)
        for fusion, gaze in series:
            pts = {}
            for r in data:
                if r.validation == v and r.fusion == fusion and r.gaze == gaze:
                    pts.setdefault(getattr(r, x), []).append(r.value)
            path = " ".join(f"{sx(k):.1f},{sy(float(np.mean(pts[k]))):.1f}" for k in sorted(pts))
            dash = FUSION_DASH.get(fusion, "")
            dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
            out.append(f'<polyline class="series" data-fusion="{fusion}" data-gaze="{str(gaze).lower()}" '
                       f'points="{path}" fill="none" stroke="{GAZE_COLORS[gaze]}" stroke-width="2"{dash_attr}/>')
        out.append("</g>")

    lx = ml + len(validations) * (pw + gap)
    legend = [(GAZE_COLORS[True], "", "with gaze"), (GAZE_COLORS[False], "", "without gaze"),
              ("#888", "5 4", "VQ-VAE floor")]
    for i, (color, dash, label) in enumerate(legend):
        y = mt + 10 + i * 18
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        out.append(f'<line x1="{lx}" x2="{lx + 25}" y1="{y}" y2="{y}" stroke="{color}" stroke-width="2"{dash_attr}/>')
        out.append(f'<text x="{lx + 30}" y="{y + 4}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _star(cx: float, cy: float, r: float) -> str:
    pts = []
    for i in range(10):
        rad = r if i % 2 == 0 else r * 0.45
        a = -math.pi / 2 + i * math.pi / 5
        pts.append(f"{cx + rad * math.cos(a):.1f},{cy + rad * math.sin(a):.1f}")
    return " ".join(pts)


def plot_prediction(sample: TrajectorySample, predicted: np.ndarray, input_frames: int,
                    partial: Sequence[np.ndarray] = (), target_radius: float = 0.05,
                    size: int = 420) -> str:
    """Top view (x right, y up) of palm paths: start dot, arrowed prediction chain, target star.

    ``partial`` holds intermediate full-length predictions; their end points are
    drawn as faint dots to show how the forecast settles.
    """
    hands = active_hands(sample.frames)
    gt = palm_positions(sample.frames, hands)[:, :2]
    pred = palm_positions(predicted, hands)[:, :2]
    target = sample.objects[sample.target].centroid[:2]
    objs = [o.points[:, :2] for o in sample.objects]
    pts = np.concatenate([gt, pred, target[None]] + objs)
    lo, hi = pts.min(axis=0) - 0.08, pts.max(axis=0) + 0.08
    span = float(max(hi - lo))
    pad = 20

    def sx(p):
        return pad + (p[0] - lo[0]) / span * (size - 2 * pad)

    def sy(p):
        return size - pad - (p[1] - lo[1]) / span * (size - 2 * pad)

    out = _header(size, size, f"{sample.motion} subject {sample.subject} top view")
    out.append('<defs><marker id="arrow" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="6" '
               'markerHeight="6" orient="auto-start-reverse"><path d="M0,0 L10,5 L0,10 z" fill="#d62728"/>'
               "</marker></defs>")
    for o, spec in zip(objs, sample.objects):
        for p in o:
            out.append(f'<circle cx="{sx(p):.1f}" cy="{sy(p):.1f}" r="2.5" fill="#999"/>')
        c = spec.centroid[:2]
        out.append(f'<text x="{sx(c) + 5:.1f}" y="{sy(c) - 5:.1f}" fill="#666">{escape(spec.kind)}</text>')
    gt_path = " ".join(f"{sx(p):.1f},{sy(p):.1f}" for p in gt)
    out.append(f'<polyline class="ground-truth" points="{gt_path}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>')
    chain = pred[input_frames - 1::4] if input_frames >= 1 else pred[::4]
    if len(chain) and not np.array_equal(chain[-1], pred[-1]):
        chain = np.concatenate([chain, pred[-1:]])
    for a, b in zip(chain[:-1], chain[1:]):
        out.append(f'<line class="prediction" x1="{sx(a):.1f}" y1="{sy(a):.1f}" x2="{sx(b):.1f}" '
                   f'y2="{sy(b):.1f}" stroke="#d62728" stroke-width="1.5" marker-end="url(#arrow)"/>')
    for p in partial:
        end = palm_positions(p, hands)[-1, :2]
        out.append(f'<circle class="partial" cx="{sx(end):.1f}" cy="{sy(end):.1f}" r="3" fill="#d62728" '
                   f'fill-opacity="0.35"/>')
    out.append(f'<circle class="start" cx="{sx(gt[0]):.1f}" cy="{sy(gt[0]):.1f}" r="5" fill="#1f77b4"/>')
    r = target_radius / span * (size - 2 * pad)
    out.append(f'<circle class="target-zone" cx="{sx(target):.1f}" cy="{sy(target):.1f}" r="{r:.1f}" '
               f'fill="none" stroke="#444" stroke-dasharray="4 3"/>')
    out.append(f'<polygon class="target" points="{_star(sx(target), sy(target), 8)}" fill="#ffbf00" stroke="#444"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
