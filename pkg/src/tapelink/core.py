"""Domain types and file formats for longitudinal-archive speaker linking.

Times are seconds (float), tape-local. Embeddings are fixed-dimension float
vectors; all arithmetic is done in float64 regardless of on-disk precision.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class TapelinkError(Exception):
    """Base class for data and format errors raised by this package."""


class RttmError(TapelinkError):
    """Malformed RTTM content. Carries the 1-based line number."""


class EvecError(TapelinkError):
    """Malformed or truncated EVEC1 payload."""


class ManifestError(TapelinkError):
    """Invalid archive manifest."""


PSEUDO = "pseudo"
KNOWN = "known"


@dataclass(frozen=True)
class Segment:
    """A labelled span of one tape."""

    tape_id: str
    onset: float
    duration: float
    label: str

    def __post_init__(self) -> None:
        if not self.tape_id:
            raise TapelinkError("segment tape_id must be non-empty")
        if not self.label:
            raise TapelinkError("segment label must be non-empty")
        if not np.isfinite(self.onset) or self.onset < 0.0:
            raise TapelinkError(f"segment onset must be >= 0, got {self.onset}")
        if not np.isfinite(self.duration) or self.duration <= 0.0:
            raise TapelinkError(f"segment duration must be > 0, got {self.duration}")

    @property
    def end(self) -> float:
        return self.onset + self.duration


@dataclass(frozen=True, eq=False)
class Embedding:
    """An identified float vector. The vector is read-only after construction."""

    id: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        if not self.id:
            raise TapelinkError("embedding id must be non-empty")
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.size == 0:
            raise TapelinkError(f"embedding {self.id!r}: vector must be 1-D and non-empty")
        if not np.all(np.isfinite(vec)):
            raise TapelinkError(f"embedding {self.id!r}: vector contains non-finite values")
        vec = vec.copy()
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True, eq=False)
class PseudoSpeaker:
    """One voice on one tape (kind="pseudo"), or an enrolled identity (kind="known")."""

    id: str
    tape_id: str
    total_duration: float
    embedding: Embedding
    kind: str = PSEUDO

    def __post_init__(self) -> None:
        if self.kind not in (PSEUDO, KNOWN):
            raise TapelinkError(f"unknown speaker kind {self.kind!r}")
        if self.total_duration < 0.0:
            raise TapelinkError("total_duration must be >= 0")


@dataclass(frozen=True)
class ManifestEntry:
    tape_id: str
    duration: float
    annotated: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if not self.tape_id:
            raise ManifestError("manifest entry tape_id must be non-empty")
        if not np.isfinite(self.duration) or self.duration <= 0.0:
            raise ManifestError(f"tape {self.tape_id!r}: duration must be > 0")
        if self.annotated is not None:
            onset, dur = self.annotated
            if dur <= 0.0 or onset < 0.0 or onset + dur > self.duration + 1e-9:
                raise ManifestError(
                    f"tape {self.tape_id!r}: annotated region ({onset}, {dur}) "
                    f"does not fit in duration {self.duration}"
                )


@dataclass(frozen=True)
class ArchiveManifest:
    """Tape inventory: recording durations plus optional annotated regions."""

    entries: tuple[ManifestEntry, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        entries = tuple(self.entries)
        by_id: dict[str, ManifestEntry] = {}
        for entry in entries:
            if entry.tape_id in by_id:
                raise ManifestError(f"duplicate tape_id {entry.tape_id!r} in manifest")
            by_id[entry.tape_id] = entry
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, tape_id: str) -> bool:
        return tape_id in self._by_id

    def entry(self, tape_id: str) -> ManifestEntry:
        try:
            return self._by_id[tape_id]
        except KeyError:
            raise ManifestError(f"tape {tape_id!r} not in manifest") from None

    def scoring_regions(self) -> dict[str, list[tuple[float, float]]]:
        """Annotated (onset, duration) spans per tape, skipping unannotated tapes."""
        return {
            e.tape_id: [e.annotated] for e in self.entries if e.annotated is not None
        }


# ---------------------------------------------------------------------------
# RTTM

_RTTM_LINE = "SPEAKER {tape} 1 {onset:.3f} {dur:.3f} <NA> <NA> {label} <NA> <NA>"


def parse_rttm(text: str) -> list[Segment]:
    """Parse RTTM text into segments.

    Only SPEAKER lines are consumed; other record types, blank lines and
    ``;;`` comments are skipped. The channel field is ignored. Errors carry
    the 1-based line number.
    """
    segments: list[Segment] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";;"):
            continue
        fields = line.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) < 9:
            raise RttmError(
                f"line {lineno}: expected at least 9 fields, got {len(fields)}"
            )
        tape_id = fields[1]
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError:
            raise RttmError(
                f"line {lineno}: onset/duration not numeric: "
                f"{fields[3]!r} {fields[4]!r}"
            ) from None
        label = fields[7]
        try:
            segments.append(Segment(tape_id, onset, duration, label))
        except TapelinkError as exc:
            raise RttmError(f"line {lineno}: {exc}") from None
    return segments


def emit_rttm(segments: list[Segment]) -> str:
    """Render segments as RTTM SPEAKER lines, times fixed to 3 decimals."""
    lines = [
        _RTTM_LINE.format(tape=s.tape_id, onset=s.onset, dur=s.duration, label=s.label)
        for s in segments
    ]
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# EVEC1: identified embedding vectors

_EVEC_MAGIC = b"EVEC1\n"


def write_evec(embeddings: list[Embedding]) -> bytes:
    """Serialize embeddings: magic, u32 count, u32 dim, then per record a
    u16 id byte-length, the UTF-8 id, and dim little-endian float32 values.
    """
    if not embeddings:
        raise EvecError("refusing to write an empty embedding file")
    dim = embeddings[0].dim
    out = [_EVEC_MAGIC, struct.pack("<II", len(embeddings), dim)]
    for emb in embeddings:
        if emb.dim != dim:
            raise EvecError(
                f"embedding {emb.id!r} has dim {emb.dim}, expected {dim}"
            )
        ident = emb.id.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise EvecError(f"embedding id too long ({len(ident)} bytes)")
        out.append(struct.pack("<H", len(ident)))
        out.append(ident)
        out.append(emb.vector.astype("<f4").tobytes())
    return b"".join(out)


def read_evec(data: bytes) -> list[Embedding]:
    """Parse EVEC1 bytes. Raises EvecError on bad magic or truncation."""
    if data[: len(_EVEC_MAGIC)] != _EVEC_MAGIC:
        raise EvecError("bad magic: not an EVEC1 payload")
    pos = len(_EVEC_MAGIC)
    if len(data) < pos + 8:
        raise EvecError(f"truncated header at byte {len(data)}")
    count, dim = struct.unpack_from("<II", data, pos)
    pos += 8
    if dim == 0:
        raise EvecError("dimension must be positive")
    vec_bytes = 4 * dim
    embeddings: list[Embedding] = []
    for rec in range(count):
        if len(data) < pos + 2:
            raise EvecError(f"record {rec}: truncated at byte {pos}")
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if len(data) < pos + id_len + vec_bytes:
            raise EvecError(f"record {rec}: truncated at byte {pos}")
        try:
            ident = data[pos : pos + id_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EvecError(f"record {rec}: id is not valid UTF-8 ({exc})") from None
        pos += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += vec_bytes
        try:
            embeddings.append(Embedding(ident, vec))
        except TapelinkError as exc:
            raise EvecError(f"record {rec}: {exc}") from None
    if pos != len(data):
        raise EvecError(f"{len(data) - pos} trailing bytes after record {count - 1}")
    return embeddings


# ---------------------------------------------------------------------------
# Manifest JSONL

def write_manifest(manifest: ArchiveManifest) -> str:
    lines = []
    for e in manifest.entries:
        rec = {
            "tape_id": e.tape_id,
            "duration": e.duration,
            "annotated": list(e.annotated) if e.annotated is not None else None,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def read_manifest(text: str) -> ArchiveManifest:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc})") from None
        try:
            annotated = rec["annotated"]
            entry = ManifestEntry(
                tape_id=rec["tape_id"],
                duration=float(rec["duration"]),
                annotated=tuple(annotated) if annotated is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"line {lineno}: {exc!r}") from None
        except ManifestError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
        entries.append(entry)
    return ArchiveManifest(tuple(entries))


# ---------------------------------------------------------------------------
# Pseudo-speaker construction

def merge_pseudo_speakers(
    segments: list[Segment],
    embeddings: dict[int, Embedding],
    min_duration: float = 10.0,
) -> list[PseudoSpeaker]:
    """Collapse per-segment embeddings into one pseudo-speaker per
    (tape_id, label) group.

    The representative vector is the duration-weighted mean of the member
    vectors, re-normalized to unit length. Groups totalling less than
    ``min_duration`` seconds are dropped. ``embeddings`` maps segment index
    (position in ``segments``) to that segment's embedding; a missing entry
    is an error. The result does not depend on the order of ``segments``.
    """
    groups: dict[tuple[str, str], list[int]] = {}
    for idx, seg in enumerate(segments):
        if idx not in embeddings:
            raise TapelinkError(
                f"segment {idx} ({seg.tape_id}/{seg.label} @ {seg.onset:.3f}) "
                "has no embedding"
            )
        groups.setdefault((seg.tape_id, seg.label), []).append(idx)

    dims = {embeddings[i].dim for i in range(len(segments))}
    if len(dims) > 1:
        raise TapelinkError(f"mixed embedding dimensions: {sorted(dims)}")

    speakers: list[PseudoSpeaker] = []
    for (tape_id, label), members in sorted(groups.items()):
        # Canonical member order makes the accumulation bit-reproducible
        # under permutations of the input segment list.
        members.sort(key=lambda i: (segments[i].onset, segments[i].duration))
        total = 0.0
        acc = np.zeros(embeddings[members[0]].dim, dtype=np.float64)
        for i in members:
            dur = segments[i].duration
            total += dur
            acc += dur * embeddings[i].vector
        if total < min_duration:
            continue
        acc /= total
        norm = float(np.linalg.norm(acc))
        if norm == 0.0:
            raise TapelinkError(
                f"pseudo-speaker {tape_id}/{label}: mean embedding has zero norm"
            )
        speakers.append(
            PseudoSpeaker(
                id=f"{tape_id}/{label}",
                tape_id=tape_id,
                total_duration=total,
                embedding=Embedding(f"{tape_id}/{label}", acc / norm),
                kind=PSEUDO,
            )
        )
    return speakers
