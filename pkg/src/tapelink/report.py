"""Sweep reports: a delimited curve table plus rendered SVG figures.

Output is byte-stable for identical inputs: numbers use fixed significant
digits and the figures are written without timestamps and with a pinned
hash salt.
"""

from __future__ import annotations

import csv
import logging
import os

import matplotlib

matplotlib.rcParams["svg.hashsalt"] = "tapelink"

import matplotlib.pyplot as plt

from .metrics import ImpurityPoint, MetricsError, equal_impurity_point

log = logging.getLogger(__name__)

_COLUMNS = ("threshold", "der", "speaker_impurity", "cluster_impurity")


def write_report_csv(points: list[ImpurityPoint], path) -> None:
    """Threshold curve table, one row per swept threshold."""
    if not points:
        raise MetricsError("no sweep points to report")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_COLUMNS)
        for p in points:
            writer.writerow(
                [
                    format(p.threshold, ".10g"),
                    format(p.der, ".10g"),
                    format(p.speaker_impurity, ".10g"),
                    format(p.cluster_impurity, ".10g"),
                ]
            )


def read_report_csv(path) -> list[ImpurityPoint]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != _COLUMNS:
            raise MetricsError(f"{path}: expected columns {', '.join(_COLUMNS)}")
        points = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(_COLUMNS):
                raise MetricsError(f"{path}:{lineno}: expected {len(_COLUMNS)} fields")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise MetricsError(f"{path}:{lineno}: {exc}") from None
            points.append(
                ImpurityPoint(
                    threshold=values[0],
                    der=values[1],
                    speaker_impurity=values[2],
                    cluster_impurity=values[3],
                )
            )
    if not points:
        raise MetricsError(f"{path}: no data rows")
    return points


def render_sweep_figure(
    points: list[ImpurityPoint], path, baseline_der: float | None = None
) -> None:
    """DER and impurity curves against the linking threshold.

    The stage-1 baseline, when given, is drawn as a black dashed line. The
    equal-impurity crossing is marked when the curves cross."""
    if not points:
        raise MetricsError("no sweep points to plot")
    thresholds = [p.threshold for p in points]

    fig, (ax_der, ax_imp) = plt.subplots(
        2, 1, sharex=True, figsize=(7.0, 6.0), constrained_layout=True
    )
    ax_der.plot(thresholds, [p.der for p in points], marker="o", color="#1f77b4")
    if baseline_der is not None:
        ax_der.axhline(
            baseline_der, color="black", linestyle="--", linewidth=1.2,
            label="no linking",
        )
        ax_der.legend()
    ax_der.set_ylabel("DER")
    ax_der.grid(True, alpha=0.3)

    ax_imp.plot(
        thresholds,
        [p.speaker_impurity for p in points],
        marker="o",
        color="#d62728",
        label="speaker impurity",
    )
    ax_imp.plot(
        thresholds,
        [p.cluster_impurity for p in points],
        marker="s",
        color="#2ca02c",
        label="cluster impurity",
    )
    try:
        cross_t, cross_i = equal_impurity_point(points)
        ax_imp.plot([cross_t], [cross_i], marker="x", color="black", markersize=9)
        ax_imp.annotate(
            f"{cross_i:.3f} @ {cross_t:.3g}",
            (cross_t, cross_i),
            textcoords="offset points",
            xytext=(6, 6),
            fontsize=8,
        )
    except MetricsError:
        log.info("impurity curves do not cross; no marker drawn")
    ax_imp.set_xlabel("linking threshold (-llr)")
    ax_imp.set_ylabel("impurity")
    ax_imp.grid(True, alpha=0.3)
    ax_imp.legend()

    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_report(
    points: list[ImpurityPoint],
    out_dir,
    stem: str = "sweep",
    baseline_der: float | None = None,
) -> tuple[str, str]:
    """Write <stem>.csv and <stem>.svg under out_dir; returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(os.fspath(out_dir), f"{stem}.csv")
    svg_path = os.path.join(os.fspath(out_dir), f"{stem}.svg")
    write_report_csv(points, csv_path)
    render_sweep_figure(points, svg_path, baseline_der=baseline_der)
    return csv_path, svg_path
