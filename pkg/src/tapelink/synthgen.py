"""Synthetic longitudinal archives with a controllable first-stage error model.

Speakers get an identity vector y ~ N(0, sigma_b_scale I); each segment
embedding is y plus N(0, sigma_w_scale I) noise, length-normalized. Tape
durations are log-normal, recurring speakers appear on a heavy-tailed
number of tapes, and segments tile each tape without overlap. The
"stage 1" hypothesis corrupts per-tape diarization with speaker splits and
segment label noise. Everything is driven by one seed; all times are
quantized to 1 ms so emitted RTTM round-trips exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    ArchiveManifest,
    Embedding,
    ManifestEntry,
    Segment,
    TapelinkError,
    emit_rttm,
    write_evec,
    write_manifest,
)
from .plda import PldaModel, PreprocessParams, write_plda


class SynthError(TapelinkError):
    """Infeasible or inconsistent generator configuration."""


def _ms(x: float) -> float:
    return float(np.round(x * 1000.0) / 1000.0)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_tapes: int = 50
    n_speakers: int = 40
    recurring_speakers: int = 8
    known_speakers: int = 0
    dim: int = 64
    tape_duration_mean: float = 1737.0
    tape_duration_std: float = 800.0
    segments_min: int = 6
    segments_max: int = 16
    sigma_b_scale: float = 1.0
    sigma_w_scale: float = 0.3
    stage1_split_prob: float = 0.0
    stage1_split_minority: float = 0.25
    stage1_label_noise: float = 0.0
    annotated_fraction: float = 1.0

    def validate(self) -> None:
        if self.n_tapes < 1:
            raise SynthError("need at least one tape")
        if self.n_speakers < 1:
            raise SynthError("need at least one speaker")
        if not 0 <= self.recurring_speakers <= self.n_speakers:
            raise SynthError(
                f"recurring_speakers={self.recurring_speakers} must be in "
                f"[0, n_speakers={self.n_speakers}]"
            )
        if self.recurring_speakers > 0 and self.n_tapes < 2:
            raise SynthError("recurring speakers need at least 2 tapes to recur")
        if not 0 <= self.known_speakers <= self.n_speakers:
            raise SynthError(
                f"known_speakers={self.known_speakers} must be in "
                f"[0, n_speakers={self.n_speakers}]"
            )
        if self.dim < 1:
            raise SynthError("dim must be >= 1")
        if self.tape_duration_mean <= 0 or self.tape_duration_std < 0:
            raise SynthError("tape duration mean must be > 0 and std >= 0")
        if not 1 <= self.segments_min <= self.segments_max:
            raise SynthError(
                f"need 1 <= segments_min <= segments_max, got "
                f"({self.segments_min}, {self.segments_max})"
            )
        if self.sigma_b_scale <= 0 or self.sigma_w_scale <= 0:
            raise SynthError("sigma scales must be > 0")
        for name in ("stage1_split_prob", "stage1_label_noise", "annotated_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SynthError(f"{name}={value} must be in [0, 1]")
        if not 0.0 < self.stage1_split_minority < 1.0:
            raise SynthError(
                f"stage1_split_minority={self.stage1_split_minority} must be in (0, 1)"
            )


@dataclass
class SynthArchive:
    manifest: ArchiveManifest
    reference: list[Segment]
    hypothesis: list[Segment]
    segment_embeddings: dict[int, Embedding]
    known_embeddings: list[Embedding]
    model: PldaModel
    speaker_names: list[str] = field(default_factory=list)


def _speaker_name(idx: int) -> str:
    return f"spk{idx:04d}"


def _tape_name(idx: int) -> str:
    return f"tape{idx:04d}"


def generate_archive(config: SynthConfig) -> SynthArchive:
    """Draw a full archive: manifest, reference and stage-1 segments,
    per-segment embeddings, known-speaker enrollments, and the true model.

    The first ``recurring_speakers`` speakers recur across tapes (2 or more
    each, heavy-tailed); the rest appear on a single tape. Known speakers
    are taken from the recurring ones first. Enrollment vectors are fresh
    draws, never copies of segment embeddings.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_tapes = config.n_tapes
    n_speakers = config.n_speakers

    # Tape durations: log-normal matching the requested mean and std.
    mean, std = config.tape_duration_mean, config.tape_duration_std
    if std > 0:
        var_ln = float(np.log1p((std / mean) ** 2))
        mu_ln = float(np.log(mean)) - var_ln / 2.0
        durations = rng.lognormal(mu_ln, np.sqrt(var_ln), size=n_tapes)
    else:
        durations = np.full(n_tapes, mean)
    floor = max(60.0, 2.0 * config.segments_max)
    durations = np.maximum(durations, floor)
    durations = np.round(durations * 1000.0) / 1000.0

    # Which tapes each speaker visits.
    cast: list[list[int]] = [[] for _ in range(n_tapes)]
    for spk in range(config.recurring_speakers):
        count = 2 + int(rng.zipf(2.5)) - 1
        count = min(count, n_tapes)
        for tape in sorted(rng.choice(n_tapes, size=count, replace=False)):
            cast[tape].append(spk)
    for spk in range(config.recurring_speakers, n_speakers):
        cast[int(rng.integers(n_tapes))].append(spk)
    if config.recurring_speakers > 0:
        for tape in range(n_tapes):
            if not cast[tape]:
                extra = int(rng.integers(config.recurring_speakers))
                cast[tape].append(extra)

    # Segment geometry and reference labels.
    reference: list[Segment] = []
    seg_speaker: list[int] = []
    for tape in range(n_tapes):
        members = sorted(set(cast[tape]))
        if not members:
            continue
        tape_id = _tape_name(tape)
        duration = float(durations[tape])
        count = int(rng.integers(config.segments_min, config.segments_max + 1))
        count = max(count, len(members))
        weights = rng.random(count) + 0.25
        bounds = np.cumsum(weights) / weights.sum() * duration
        bounds = np.round(bounds * 1000.0) / 1000.0
        bounds[-1] = duration
        onsets = np.concatenate([[0.0], bounds[:-1]])
        slots = list(rng.permutation(count))
        speakers = np.empty(count, dtype=np.int64)
        for position, member in zip(slots[: len(members)], members):
            speakers[position] = member
        for position in slots[len(members) :]:
            speakers[position] = members[int(rng.integers(len(members)))]
        for k in range(count):
            seg_dur = float(bounds[k]) - float(onsets[k])
            if seg_dur <= 0.0:
                raise SynthError(
                    f"tape {tape_id}: zero-length segment after quantization; "
                    "tape too short for the requested segment count"
                )
            reference.append(
                Segment(
                    tape_id,
                    _ms(float(onsets[k])),
                    _ms(seg_dur),
                    _speaker_name(int(speakers[k])),
                )
            )
            seg_speaker.append(int(speakers[k]))

    # Manifest with optional annotated regions.
    entries = []
    for tape in range(n_tapes):
        duration = float(durations[tape])
        annotated = None
        if config.annotated_fraction > 0.0:
            if config.annotated_fraction >= 1.0:
                annotated = (0.0, duration)
            else:
                length = _ms(config.annotated_fraction * duration)
                start = _ms(float(rng.uniform(0.0, duration - length)))
                annotated = (start, length)
        entries.append(ManifestEntry(_tape_name(tape), duration, annotated))
    manifest = ArchiveManifest(tuple(entries))

    # Embeddings.
    identities = rng.standard_normal((n_speakers, config.dim)) * np.sqrt(
        config.sigma_b_scale
    )
    noise_scale = float(np.sqrt(config.sigma_w_scale))
    segment_embeddings: dict[int, Embedding] = {}
    per_tape_index: dict[str, int] = {}
    for idx, seg in enumerate(reference):
        k = per_tape_index.get(seg.tape_id, 0)
        per_tape_index[seg.tape_id] = k + 1
        vec = identities[seg_speaker[idx]] + rng.standard_normal(config.dim) * noise_scale
        vec = vec / np.linalg.norm(vec)
        segment_embeddings[idx] = Embedding(f"{seg.tape_id}|{k:05d}", vec)

    recurring = list(range(config.recurring_speakers))
    singles = list(range(config.recurring_speakers, n_speakers))
    known_ids = (recurring + singles)[: config.known_speakers]
    known_embeddings = []
    for spk in known_ids:
        vec = identities[spk] + rng.standard_normal(config.dim) * noise_scale
        vec = vec / np.linalg.norm(vec)
        known_embeddings.append(Embedding(_speaker_name(spk), vec))

    model = PldaModel(
        mu=np.zeros(config.dim),
        sigma_b=config.sigma_b_scale * np.eye(config.dim),
        sigma_w=config.sigma_w_scale * np.eye(config.dim),
    )

    hypothesis = inject_stage1_errors(reference, config, rng=rng.spawn(1)[0])
    return SynthArchive(
        manifest=manifest,
        reference=reference,
        hypothesis=hypothesis,
        segment_embeddings=segment_embeddings,
        known_embeddings=known_embeddings,
        model=model,
        speaker_names=[_speaker_name(i) for i in range(n_speakers)],
    )


def inject_stage1_errors(
    reference: list[Segment], config: SynthConfig, rng=None
) -> list[Segment]:
    """Corrupt reference labels into per-tape diarization output.

    Each true speaker first gets a fresh tape-local label S<k>. A speaker
    with 2+ segments is split into two labels with probability
    ``stage1_split_prob`` (a ``stage1_split_minority`` share of its
    segments moves to the new label); afterwards each segment is reassigned
    to a different label on the same tape with probability
    ``stage1_label_noise``. Labels carry no cross-tape meaning.
    """
    config.validate()
    if rng is None:
        rng = np.random.default_rng(config.seed)

    by_tape: dict[str, list[int]] = {}
    for idx, seg in enumerate(reference):
        by_tape.setdefault(seg.tape_id, []).append(idx)

    labels: dict[int, str] = {}
    for tape_id in sorted(by_tape):
        indices = by_tape[tape_id]
        order: list[str] = []
        per_speaker: dict[str, list[int]] = {}
        for idx in indices:
            spk = reference[idx].label
            if spk not in per_speaker:
                per_speaker[spk] = []
                order.append(spk)
            per_speaker[spk].append(idx)

        next_label = 0
        for spk in order:
            for idx in per_speaker[spk]:
                labels[idx] = f"S{next_label}"
            next_label += 1
        for spk in order:
            segs = per_speaker[spk]
            if len(segs) < 2:
                continue
            if rng.random() >= config.stage1_split_prob:
                continue
            minority = int(round(config.stage1_split_minority * len(segs)))
            minority = min(max(minority, 1), len(segs) - 1)
            moved = rng.choice(len(segs), size=minority, replace=False)
            for j in moved:
                labels[segs[int(j)]] = f"S{next_label}"
            next_label += 1

        pool = sorted({labels[idx] for idx in indices})
        if len(pool) >= 2:
            for idx in indices:
                if rng.random() < config.stage1_label_noise:
                    others = [lab for lab in pool if lab != labels[idx]]
                    labels[idx] = others[int(rng.integers(len(others)))]
        else:
            for idx in indices:
                rng.random()

    return [
        Segment(seg.tape_id, seg.onset, seg.duration, labels[idx])
        for idx, seg in enumerate(reference)
    ]


def write_archive(archive: SynthArchive, out_dir) -> dict[str, str]:
    """Write the archive to disk; returns logical name -> path.

    segments.evec records are in hypothesis RTTM line order. train.evec
    carries reference speaker labels as an id prefix (<speaker>/<utt>) for
    model training. truth.plda stores the generating model with a zero
    preprocessing mean."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    def emit(name: str, data) -> None:
        path = os.path.join(os.fspath(out_dir), name)
        mode = "wb" if isinstance(data, bytes) else "w"
        with open(path, mode) as fh:
            fh.write(data)
        paths[name] = path

    emit("manifest.jsonl", write_manifest(archive.manifest))
    emit("reference.rttm", emit_rttm(archive.reference))
    emit("hypothesis.rttm", emit_rttm(archive.hypothesis))
    segment_order = [archive.segment_embeddings[i] for i in range(len(archive.reference))]
    emit("segments.evec", write_evec(segment_order))
    train = [
        Embedding(f"{seg.label}/{emb.id}", emb.vector)
        for seg, emb in zip(archive.reference, segment_order)
    ]
    emit("train.evec", write_evec(train))
    if archive.known_embeddings:
        emit("known.evec", write_evec(archive.known_embeddings))
    emit(
        "truth.plda",
        write_plda(archive.model, PreprocessParams(np.zeros(archive.model.dim))),
    )
    return paths
