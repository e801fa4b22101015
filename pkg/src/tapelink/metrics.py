"""Diarization-style scoring of linked archives.

All metrics run on one shared kernel that slices each tape's timeline into
elementary intervals (between segment and region boundaries) and reports,
per interval, the active reference speaker and hypothesis labels. Reference
segments must not overlap; hypothesis segments may.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import Segment, TapelinkError
from .linking import (
    CondensedMatrix,
    apply_linking,
    cut_merges,
    resolve_identities,
)


class MetricsError(TapelinkError):
    """Invalid reference/hypothesis material or an impossible request."""


# ---------------------------------------------------------------------------
# Timeline kernel

def _by_tape(segments: list[Segment]) -> dict[str, list[Segment]]:
    out: dict[str, list[Segment]] = {}
    for seg in segments:
        out.setdefault(seg.tape_id, []).append(seg)
    return out


def _merge_spans(spans: list[tuple[float, float]]) -> list[tuple[float, float]]:
    merged: list[list[float]] = []
    for start, end in sorted(spans):
        if merged and start <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], end)
        else:
            merged.append([start, end])
    return [(s, e) for s, e in merged if e > s]


def _subtract_spans(
    spans: list[tuple[float, float]], cuts: list[tuple[float, float]]
) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for start, end in spans:
        cursor = start
        for c_start, c_end in cuts:
            if c_end <= cursor:
                continue
            if c_start >= end:
                break
            if c_start > cursor:
                out.append((cursor, c_start))
            cursor = max(cursor, c_end)
            if cursor >= end:
                break
        if cursor < end:
            out.append((cursor, end))
    return out


def _us(t: float) -> int:
    return int(round(t * 1e6))


def _tape_intervals(
    tape_id: str,
    ref: list[Segment],
    hyp: list[Segment],
    regions: list[tuple[float, float]],
):
    """Yield (dt, ref_label or None, hyp_labels tuple) inside regions.

    Rejects overlapping reference segments anywhere on the tape. Event
    times are quantized to integer microseconds so that segments touching
    at a boundary stay touching despite float addition error (0.1 + 0.2
    must meet a segment starting at 0.3); ends sort before starts at equal
    times. dt is in seconds.
    """
    events: list[tuple[int, int, int, str]] = []
    KIND_REF, KIND_HYP, KIND_REGION = 0, 1, 2
    for seg in ref:
        events.append((_us(seg.onset), 1, KIND_REF, seg.label))
        events.append((_us(seg.end), -1, KIND_REF, seg.label))
    for seg in hyp:
        events.append((_us(seg.onset), 1, KIND_HYP, seg.label))
        events.append((_us(seg.end), -1, KIND_HYP, seg.label))
    for start, end in regions:
        events.append((_us(start), 1, KIND_REGION, ""))
        events.append((_us(end), -1, KIND_REGION, ""))

    active_ref: dict[str, int] = {}
    active_hyp: dict[str, int] = {}
    in_region = 0
    prev_time: int | None = None
    for time, delta, kind, label in sorted(events):
        if prev_time is not None and time > prev_time and in_region > 0:
            ref_label = next(iter(active_ref)) if active_ref else None
            yield (time - prev_time) / 1e6, ref_label, tuple(active_hyp)
        prev_time = time
        if kind == KIND_REF:
            if delta > 0:
                if active_ref:
                    other = next(iter(active_ref))
                    raise MetricsError(
                        f"tape {tape_id!r}: reference segments overlap at "
                        f"{time / 1e6:.3f} ({other!r} vs {label!r})"
                    )
                active_ref[label] = 1
            else:
                active_ref.pop(label, None)
        elif kind == KIND_HYP:
            if delta > 0:
                active_hyp[label] = active_hyp.get(label, 0) + 1
            else:
                remaining = active_hyp[label] - 1
                if remaining:
                    active_hyp[label] = remaining
                else:
                    del active_hyp[label]
        else:
            in_region += delta


def _prepare_tapes(
    reference: list[Segment],
    hypothesis: list[Segment],
    scoring_regions: dict[str, list[tuple[float, float]]] | None,
    collar: float = 0.0,
):
    """Per tape: segments plus collar-adjusted scoring spans."""
    if collar < 0.0:
        raise MetricsError("collar must be >= 0")
    ref_by = _by_tape(reference)
    hyp_by = _by_tape(hypothesis)
    if scoring_regions is None:
        tapes = set(ref_by) | set(hyp_by)
    else:
        # Regions define where scoring happens; tapes without one are skipped.
        tapes = set(scoring_regions)
    for tape_id in sorted(tapes):
        ref = ref_by.get(tape_id, [])
        hyp = hyp_by.get(tape_id, [])
        if scoring_regions is None:
            horizon = max(
                [seg.end for seg in ref] + [seg.end for seg in hyp], default=0.0
            )
            spans = [(0.0, horizon + 1.0)]
        else:
            spans = _merge_spans(
                [(onset, onset + dur) for onset, dur in scoring_regions.get(tape_id, [])]
            )
        if collar > 0.0 and spans:
            cuts = []
            for seg in ref:
                cuts.append((seg.onset - collar, seg.onset + collar))
                cuts.append((seg.end - collar, seg.end + collar))
            spans = _subtract_spans(spans, _merge_spans(cuts))
        yield tape_id, ref, hyp, spans


# ---------------------------------------------------------------------------
# Overlap statistics and speaker mapping

@dataclass
class OverlapStats:
    """Co-occurrence seconds between reference speakers and hypothesis labels."""

    pair_seconds: dict[tuple[str, str], float] = field(default_factory=dict)
    ref_seconds: dict[str, float] = field(default_factory=dict)
    hyp_seconds: dict[str, float] = field(default_factory=dict)
    missed_seconds: float = 0.0
    falarm_seconds: float = 0.0

    @property
    def total_reference(self) -> float:
        return sum(self.ref_seconds.values())

    @property
    def total_hypothesis(self) -> float:
        return sum(self.hyp_seconds.values())


def overlap_matrix(
    reference: list[Segment],
    hypothesis: list[Segment],
    scoring_regions: dict[str, list[tuple[float, float]]] | None = None,
) -> OverlapStats:
    """Accumulate speaker/label co-occurrence over scoring regions.

    With no regions given, each tape is scored over its whole extent.
    """
    stats = OverlapStats()
    for tape_id, ref, hyp, spans in _prepare_tapes(
        reference, hypothesis, scoring_regions
    ):
        for dt, ref_label, hyp_labels in _tape_intervals(tape_id, ref, hyp, spans):
            n_ref = 1 if ref_label is not None else 0
            n_hyp = len(hyp_labels)
            if ref_label is not None:
                stats.ref_seconds[ref_label] = (
                    stats.ref_seconds.get(ref_label, 0.0) + dt
                )
                for h in hyp_labels:
                    key = (ref_label, h)
                    stats.pair_seconds[key] = stats.pair_seconds.get(key, 0.0) + dt
            for h in hyp_labels:
                stats.hyp_seconds[h] = stats.hyp_seconds.get(h, 0.0) + dt
            stats.missed_seconds += max(0, n_ref - n_hyp) * dt
            stats.falarm_seconds += max(0, n_hyp - n_ref) * dt
    return stats


def map_speakers_optimal(stats: OverlapStats) -> dict[str, str]:
    """One-to-one hypothesis-label to reference-speaker map maximizing
    total co-occurrence seconds. Labels with no positive overlap stay
    unmapped."""
    refs = sorted(stats.ref_seconds)
    hyps = sorted(stats.hyp_seconds)
    if not refs or not hyps:
        return {}
    gain = np.zeros((len(hyps), len(refs)))
    for (r, h), seconds in stats.pair_seconds.items():
        gain[hyps.index(h), refs.index(r)] = seconds
    rows, cols = linear_sum_assignment(gain, maximize=True)
    return {
        hyps[i]: refs[j] for i, j in zip(rows, cols) if gain[i, j] > 0.0
    }


# ---------------------------------------------------------------------------
# DER

@dataclass(frozen=True)
class DerBreakdown:
    missed: float
    false_alarm: float
    confusion: float
    total_reference: float
    der: float = field(init=False)

    def __post_init__(self) -> None:
        if self.total_reference <= 0.0:
            raise MetricsError("zero total reference time in scoring regions")
        object.__setattr__(
            self,
            "der",
            (self.missed + self.false_alarm + self.confusion) / self.total_reference,
        )


def compute_der(
    reference: list[Segment],
    hypothesis: list[Segment],
    scoring_regions: dict[str, list[tuple[float, float]]] | None = None,
    collar: float = 0.0,
) -> DerBreakdown:
    """Diarization error rate with an optimal speaker mapping.

    Two passes: co-occurrence statistics feed the assignment, then the
    timeline is re-swept counting missed, false-alarm, and confusion time.
    ``collar`` seconds around each reference boundary are excluded.
    """
    prepared = list(
        _prepare_tapes(reference, hypothesis, scoring_regions, collar=collar)
    )
    stats = OverlapStats()
    for tape_id, ref, hyp, spans in prepared:
        for dt, ref_label, hyp_labels in _tape_intervals(tape_id, ref, hyp, spans):
            n_ref = 1 if ref_label is not None else 0
            if ref_label is not None:
                stats.ref_seconds[ref_label] = (
                    stats.ref_seconds.get(ref_label, 0.0) + dt
                )
                for h in hyp_labels:
                    key = (ref_label, h)
                    stats.pair_seconds[key] = stats.pair_seconds.get(key, 0.0) + dt
            for h in hyp_labels:
                stats.hyp_seconds[h] = stats.hyp_seconds.get(h, 0.0) + dt
    mapping = map_speakers_optimal(stats)

    missed = falarm = confusion = total_ref = 0.0
    for tape_id, ref, hyp, spans in prepared:
        for dt, ref_label, hyp_labels in _tape_intervals(tape_id, ref, hyp, spans):
            n_ref = 1 if ref_label is not None else 0
            n_hyp = len(hyp_labels)
            total_ref += n_ref * dt
            missed += max(0, n_ref - n_hyp) * dt
            falarm += max(0, n_hyp - n_ref) * dt
            if ref_label is not None:
                correct = any(mapping.get(h) == ref_label for h in hyp_labels)
                confusion += (min(n_ref, n_hyp) - (1 if correct else 0)) * dt
    return DerBreakdown(
        missed=missed,
        false_alarm=falarm,
        confusion=confusion,
        total_reference=total_ref,
    )


# ---------------------------------------------------------------------------
# Impurities

def compute_impurities(
    reference: list[Segment],
    hypothesis: list[Segment],
    scoring_regions: dict[str, list[tuple[float, float]]] | None = None,
) -> tuple[float, float]:
    """(speaker_impurity, cluster_impurity).

    Cluster impurity is the fraction of hypothesis time outside each
    label's dominant reference speaker; speaker impurity is the fraction of
    reference time outside each speaker's dominant label."""
    stats = overlap_matrix(reference, hypothesis, scoring_regions)
    total_ref = stats.total_reference
    total_hyp = stats.total_hypothesis
    if total_ref <= 0.0:
        raise MetricsError("zero total reference time in scoring regions")
    if total_hyp <= 0.0:
        raise MetricsError("zero total hypothesis time in scoring regions")

    best_for_hyp: dict[str, float] = {h: 0.0 for h in stats.hyp_seconds}
    best_for_ref: dict[str, float] = {r: 0.0 for r in stats.ref_seconds}
    for (r, h), seconds in stats.pair_seconds.items():
        if seconds > best_for_hyp[h]:
            best_for_hyp[h] = seconds
        if seconds > best_for_ref[r]:
            best_for_ref[r] = seconds
    cluster = 1.0 - sum(best_for_hyp.values()) / total_hyp
    speaker = 1.0 - sum(best_for_ref.values()) / total_ref
    return speaker, cluster


# ---------------------------------------------------------------------------
# Threshold sweeps

@dataclass(frozen=True)
class ImpurityPoint:
    threshold: float
    speaker_impurity: float
    cluster_impurity: float
    der: float


@dataclass
class SweepContext:
    """Everything needed to re-cut and re-score the linking at a threshold."""

    matrix: CondensedMatrix
    items: list
    hypothesis: list[Segment]
    reference: list[Segment]
    scoring_regions: dict[str, list[tuple[float, float]]] | None = None
    collar: float = 0.0


def sweep_thresholds(
    ctx: SweepContext, thresholds: list[float]
) -> list[ImpurityPoint]:
    """Cluster, link, and score at each threshold (ascending).

    The dendrogram is built once; each threshold is an O(n) cut. Speaker
    impurity must fall and cluster impurity must rise along the sweep
    (partitions are nested); a violation is an internal error.
    """
    if not thresholds:
        raise MetricsError("empty threshold sweep")
    thresholds = [float(t) for t in thresholds]
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise MetricsError("sweep thresholds must be strictly increasing")

    merges = ctx.matrix.linkage()
    points = []
    for tau in thresholds:
        labels = cut_merges(merges, ctx.matrix.n, tau)
        result = resolve_identities(labels, ctx.items, ctx.matrix, tau)
        hyp = apply_linking(result, ctx.hypothesis)
        der = compute_der(ctx.reference, hyp, ctx.scoring_regions, collar=ctx.collar)
        speaker, cluster = compute_impurities(
            ctx.reference, hyp, ctx.scoring_regions
        )
        points.append(
            ImpurityPoint(
                threshold=tau,
                speaker_impurity=speaker,
                cluster_impurity=cluster,
                der=der.der,
            )
        )
    for prev, nxt in zip(points, points[1:]):
        if nxt.speaker_impurity > prev.speaker_impurity + 1e-12:
            raise MetricsError(
                f"speaker impurity rose along the sweep at {nxt.threshold}"
            )
        if nxt.cluster_impurity < prev.cluster_impurity - 1e-12:
            raise MetricsError(
                f"cluster impurity fell along the sweep at {nxt.threshold}"
            )
    return points


def equal_impurity_point(points: list[ImpurityPoint]) -> tuple[float, float]:
    """Threshold where the impurity curves cross, with the impurity there.

    Exact hits return the swept point; otherwise both curves are
    interpolated linearly inside the bracketing interval."""
    if len(points) < 2:
        raise MetricsError("need at least 2 sweep points to locate a crossing")
    gaps = [p.speaker_impurity - p.cluster_impurity for p in points]
    for p, gap in zip(points, gaps):
        if gap == 0.0:
            return p.threshold, p.speaker_impurity
    for (p0, g0), (p1, g1) in zip(zip(points, gaps), zip(points[1:], gaps[1:])):
        if g0 * g1 < 0.0:
            frac = g0 / (g0 - g1)
            threshold = p0.threshold + frac * (p1.threshold - p0.threshold)
            impurity = p0.speaker_impurity + frac * (
                p1.speaker_impurity - p0.speaker_impurity
            )
            return threshold, impurity
    raise MetricsError("impurity curves do not cross in the swept range")
