"""Experiment outputs: versioned metric CSVs, deterministic SVG plots,
canonical config hashing and atomic file writes.

Every artifact a command writes carries (or sits next to) the resolved
config hash and seed, so a finished output directory fully identifies the
run that produced it.  Writes go through a temp-file rename so a crashed
run never leaves half-written artifacts.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
from pathlib import Path

import numpy as np

from .metrics import MetricRecord

__all__ = [
    "CSV_SCHEMA_VERSION",
    "CSV_COLUMNS",
    "ReportError",
    "config_hash",
    "canonical_json",
    "atomic_write_bytes",
    "atomic_write_text",
    "metric_row",
    "write_metric_csv",
    "read_metric_csv",
    "write_train_log_csv",
    "axis_bounds",
    "emit_svg",
]

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = [
    "schema_version",
    "config_hash",
    "seed",
    "method",
    "noise_kind",
    "sigma_tr_a",
    "sigma_tr_sigma",
    "sigma_val",
    "psnr_db",
    "ssim",
    "residual_std",
    "n_images",
]


class ReportError(Exception):
    """CSV schema violation or malformed report file."""


def _canon(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _canon(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (set, frozenset)):
        return sorted(str(v) for v in obj)
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj) -> str:
    """Stable JSON text: sorted keys, sets ordered, no insignificant whitespace."""
    return json.dumps(_canon(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    """16 hex chars of SHA-256 over the canonical JSON of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def metric_row(record: MetricRecord, *, cfg_hash: str, seed: int, method: str,
               sigma_tr_a: float, sigma_tr_sigma: float) -> dict[str, str]:
    """One CSV row; the conditioning is recorded as the explicit (a, sigma) pair."""
    return {
        "schema_version": str(CSV_SCHEMA_VERSION),
        "config_hash": cfg_hash,
        "seed": str(int(seed)),
        "method": method,
        "noise_kind": record.noise_kind,
        "sigma_tr_a": _fmt(sigma_tr_a),
        "sigma_tr_sigma": _fmt(sigma_tr_sigma),
        "sigma_val": _fmt(record.sigma_val),
        "psnr_db": _fmt(record.psnr_db),
        "ssim": _fmt(record.ssim),
        "residual_std": _fmt(record.residual_std),
        "n_images": str(int(record.n_images)),
    }


def write_metric_csv(path, rows: list[dict[str, str]]) -> None:
    buf = io.StringIO(newline="")
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        extra = set(row) - set(CSV_COLUMNS)
        if extra:
            raise ReportError(f"row has non-schema columns {sorted(extra)}")
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def read_metric_csv(path) -> list[dict[str, str]]:
    """Read a metric CSV, rejecting unknown schema versions or columns."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise ReportError(
                f"{path}: column header {reader.fieldnames} does not match schema {CSV_COLUMNS}"
            )
        rows = list(reader)
    for i, row in enumerate(rows):
        if row["schema_version"] != str(CSV_SCHEMA_VERSION):
            raise ReportError(
                f"{path}: row {i} has schema_version {row['schema_version']!r}, "
                f"this reader supports only {CSV_SCHEMA_VERSION}"
            )
    return rows


def write_train_log_csv(path, *, cfg_hash: str, seed: int, epoch_losses: list[float]) -> None:
    """Per-epoch training loss log (separate from the metric schema)."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "seed", "config_hash"])
    for epoch, loss in enumerate(epoch_losses, start=1):
        writer.writerow([epoch, _fmt(loss), int(seed), cfg_hash])
    atomic_write_text(path, buf.getvalue())


def axis_bounds(values) -> tuple[float, float]:
    """Data min/max padded by 5% of the span (or 0.5 for a degenerate span)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ReportError("axis_bounds needs at least one value")
    lo, hi = float(arr.min()), float(arr.max())
    pad = 0.05 * (hi - lo) if hi > lo else 0.5
    return lo - pad, hi + pad


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#e377c2"]

_VIEW_W, _VIEW_H = 640, 440
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 160, 40, 50


def emit_svg(curves: dict[str, tuple[list[float], list[float]]], *, title: str,
             xlabel: str, ylabel: str, path=None) -> str:
    """Render labeled series as a deterministic standalone SVG line plot.

    One polyline per series, fixed viewport, 5%-padded axis bounds, legend on
    the right.  Identical input always produces identical bytes.
    """
    if not curves:
        raise ReportError("emit_svg needs at least one series")
    for label, (xs, ys) in curves.items():
        if len(xs) != len(ys) or not xs:
            raise ReportError(f"series {label!r} must have equal, non-zero point counts")
    x_lo, x_hi = axis_bounds([x for xs, _ in curves.values() for x in xs])
    y_lo, y_hi = axis_bounds([y for _, ys in curves.values() for y in ys])
    plot_w = _VIEW_W - _MARGIN_L - _MARGIN_R
    plot_h = _VIEW_H - _MARGIN_T - _MARGIN_B

    def sx(x: float) -> str:
        return f"{_MARGIN_L + plot_w * (x - x_lo) / (x_hi - x_lo):.2f}"

    def sy(y: float) -> str:
        return f"{_MARGIN_T + plot_h * (1.0 - (y - y_lo) / (y_hi - y_lo)):.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_VIEW_W}" height="{_VIEW_H}" '
        f'viewBox="0 0 {_VIEW_W} {_VIEW_H}" font-family="monospace" font-size="12">',
        f'<rect x="0" y="0" width="{_VIEW_W}" height="{_VIEW_H}" fill="white"/>',
        f'<text x="{_VIEW_W // 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333333" stroke-width="1"/>',
        f'<text x="{_MARGIN_L + plot_w // 2}" y="{_VIEW_H - 12}" text-anchor="middle">{xlabel}</text>',
        f'<text x="18" y="{_MARGIN_T + plot_h // 2}" text-anchor="middle" '
        f'transform="rotate(-90 18 {_MARGIN_T + plot_h // 2})">{ylabel}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(
            f'<text x="{sx(xv)}" y="{_MARGIN_T + plot_h + 16}" text-anchor="middle">{xv:.4g}</text>'
        )
        parts.append(
            f'<text x="{_MARGIN_L - 6}" y="{sy(yv)}" text-anchor="end" dominant-baseline="middle">{yv:.4g}</text>'
        )
    for i, (label, (xs, ys)) in enumerate(curves.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(x)},{sy(y)}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = _MARGIN_T + 14 + 18 * i
        lx = _VIEW_W - _MARGIN_R + 12
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        parts.append(f'<text x="{lx + 24}" y="{ly}">{label}</text>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if path is not None:
        atomic_write_text(path, text)
    return text
