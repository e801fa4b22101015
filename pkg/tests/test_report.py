import numpy as np
import pytest

from tapelink.metrics import ImpurityPoint, MetricsError
from tapelink.report import (
    read_report_csv,
    render_sweep_figure,
    write_report,
    write_report_csv,
)


def _points(n=5, seed=0):
    rng = np.random.default_rng(seed)
    thresholds = np.sort(rng.uniform(-2.0, 4.0, size=n))
    out = []
    for k, t in enumerate(thresholds):
        frac = k / max(n - 1, 1)
        out.append(
            ImpurityPoint(
                threshold=float(t),
                speaker_impurity=float(0.4 * (1 - frac)),
                cluster_impurity=float(0.3 * frac),
                der=float(rng.uniform(0.05, 0.6)),
            )
        )
    return out


def test_csv_round_trip_six_significant_digits(tmp_path):
    points = _points(7, seed=3)
    path = tmp_path / "sweep.csv"
    write_report_csv(points, path)
    back = read_report_csv(path)
    assert len(back) == len(points)
    for got, want in zip(back, points):
        assert got.threshold == pytest.approx(want.threshold, rel=1e-6)
        assert got.der == pytest.approx(want.der, rel=1e-6)
        assert got.speaker_impurity == pytest.approx(want.speaker_impurity, rel=1e-6)
        assert got.cluster_impurity == pytest.approx(want.cluster_impurity, rel=1e-6)


def test_csv_header_and_rows(tmp_path):
    points = _points(2)
    path = tmp_path / "two.csv"
    write_report_csv(points, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "threshold,der,speaker_impurity,cluster_impurity"
    assert len(lines) == 3


def test_csv_read_errors(tmp_path):
    bad_header = tmp_path / "h.csv"
    bad_header.write_text("a,b,c,d\n1,2,3,4\n")
    with pytest.raises(MetricsError, match="columns"):
        read_report_csv(bad_header)

    bad_row = tmp_path / "r.csv"
    bad_row.write_text(
        "threshold,der,speaker_impurity,cluster_impurity\n1.0,0.2,oops,0.1\n"
    )
    with pytest.raises(MetricsError, match=":2"):
        read_report_csv(bad_row)

    short_row = tmp_path / "s.csv"
    short_row.write_text("threshold,der,speaker_impurity,cluster_impurity\n1.0,0.2\n")
    with pytest.raises(MetricsError, match="fields"):
        read_report_csv(short_row)

    empty = tmp_path / "e.csv"
    empty.write_text("threshold,der,speaker_impurity,cluster_impurity\n")
    with pytest.raises(MetricsError, match="no data"):
        read_report_csv(empty)

    with pytest.raises(MetricsError):
        write_report_csv([], tmp_path / "none.csv")


def test_svg_well_formed_and_deterministic(tmp_path):
    points = _points(6, seed=11)
    first = tmp_path / "a.svg"
    second = tmp_path / "b.svg"
    render_sweep_figure(points, first, baseline_der=0.5)
    render_sweep_figure(points, second, baseline_der=0.5)
    payload = first.read_bytes()
    assert payload == second.read_bytes()
    text = payload.decode()
    assert text.lstrip().startswith("<?xml")
    assert text.rstrip().endswith("</svg>")
    assert "stroke-dasharray" in text


def test_svg_without_crossing_still_renders(tmp_path):
    points = [
        ImpurityPoint(threshold=1.0, speaker_impurity=0.5, cluster_impurity=0.1, der=0.2),
        ImpurityPoint(threshold=2.0, speaker_impurity=0.4, cluster_impurity=0.2, der=0.2),
    ]
    path = tmp_path / "nocross.svg"
    render_sweep_figure(points, path)
    assert path.stat().st_size > 0


def test_write_report_returns_both_paths(tmp_path):
    points = _points(4, seed=2)
    csv_path, svg_path = write_report(points, tmp_path / "out", stem="curve")
    assert csv_path.endswith("curve.csv")
    assert svg_path.endswith("curve.svg")
    assert read_report_csv(csv_path)[0].threshold == pytest.approx(
        points[0].threshold, rel=1e-6
    )
