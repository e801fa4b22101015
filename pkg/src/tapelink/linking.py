"""Cross-tape linking: pairwise scoring, agglomeration, identity resolution.

Items (pseudo-speakers and known enrollments) are scored all-vs-all into a
condensed distance matrix (distance = negative LLR, float32), clustered by
complete linkage, and cut at a threshold. Clusters containing a known
enrollment inherit its name.
"""

from __future__ import annotations

import json
import mmap as mmap_mod
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass

import numpy as np

from .core import KNOWN, PSEUDO, PseudoSpeaker, Segment, TapelinkError
from .plda import FastScorer


class LinkingError(TapelinkError):
    """Invalid matrix payload, undersized input, or clustering misuse."""


_COND_MAGIC = b"COND1\n"
_COND_HEADER = len(_COND_MAGIC) + 8  # magic + u64 item count
_ADVISE_BYTES = 512 << 20


def condensed_index(n: int, i: int, j: int) -> int:
    """Position of pair (i, j), i < j, in row-major upper-triangle order."""
    if not 0 <= i < j < n:
        raise LinkingError(f"bad condensed pair ({i}, {j}) for n={n}")
    return n * i - (i * (i + 1)) // 2 + (j - i - 1)


class CondensedMatrix:
    """Upper-triangle pairwise distances for n items, memory or file backed.

    ``values`` has length n(n-1)/2 in row-major pair order and is read-only
    once construction finishes. The complete-linkage dendrogram is computed
    lazily and cached.
    """

    def __init__(self, n: int, values: np.ndarray, path=None, _mm=None, _fh=None):
        self.n = int(n)
        self.values = values
        self.path = path
        self._mm = _mm
        self._fh = _fh
        self._merges: np.ndarray | None = None

    # -- construction

    @classmethod
    def allocate(cls, n: int, backing: str, path=None) -> "CondensedMatrix":
        if n < 2:
            raise LinkingError(f"need at least 2 items, got {n}")
        count = n * (n - 1) // 2
        if backing == "memory":
            return cls(n, np.empty(count, dtype=np.float32))
        if backing != "disk":
            raise LinkingError(f"unknown backing {backing!r}")
        if path is None:
            fd, path = tempfile.mkstemp(suffix=".cond")
            os.close(fd)
        path = os.fspath(path)
        with open(path, "wb") as fh:
            fh.write(_COND_MAGIC)
            fh.write(np.uint64(n).tobytes())
            fh.truncate(_COND_HEADER + 4 * count)
        fh = open(path, "r+b")
        mm = mmap_mod.mmap(fh.fileno(), 0)
        values = np.frombuffer(mm, dtype="<f4", count=count, offset=_COND_HEADER)
        return cls(n, values, path=path, _mm=mm, _fh=fh)

    def finalize(self) -> None:
        if self._mm is not None:
            self._mm.flush()
            self._mm.madvise(mmap_mod.MADV_DONTNEED)
        self.values.flags.writeable = False

    def advise_dontneed(self) -> None:
        """Drop resident pages of a disk-backed store (data stays in the file)."""
        if self._mm is not None:
            self._mm.madvise(mmap_mod.MADV_DONTNEED)

    def close(self) -> None:
        self.values = None
        if self._mm is not None:
            self._mm.close()
            self._mm = None
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @property
    def backing(self) -> str:
        return "memory" if self._mm is None and self.path is None else "disk"

    # -- access

    def get(self, i: int, j: int) -> float:
        if i > j:
            i, j = j, i
        return float(self.values[condensed_index(self.n, i, j)])

    # -- persistence

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_COND_MAGIC)
            fh.write(np.uint64(self.n).tobytes())
            fh.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, use_mmap: bool = True) -> "CondensedMatrix":
        size = os.path.getsize(path)
        with open(path, "rb") as probe:
            head = probe.read(_COND_HEADER)
        if head[: len(_COND_MAGIC)] != _COND_MAGIC:
            raise LinkingError(f"{path}: bad magic, not a COND1 payload")
        if len(head) < _COND_HEADER:
            raise LinkingError(f"{path}: truncated header")
        n = int(np.frombuffer(head, dtype="<u8", count=1, offset=len(_COND_MAGIC))[0])
        if n < 2:
            raise LinkingError(f"{path}: item count {n} is too small")
        count = n * (n - 1) // 2
        expected = _COND_HEADER + 4 * count
        if size != expected:
            raise LinkingError(f"{path}: file is {size} bytes, expected {expected}")
        if use_mmap:
            fh = open(path, "rb")
            mm = mmap_mod.mmap(fh.fileno(), 0, access=mmap_mod.ACCESS_READ)
            values = np.frombuffer(mm, dtype="<f4", count=count, offset=_COND_HEADER)
            out = cls(n, values, path=os.fspath(path), _mm=mm, _fh=fh)
        else:
            with open(path, "rb") as fh2:
                fh2.seek(_COND_HEADER)
                values = np.fromfile(fh2, dtype="<f4", count=count)
            values.flags.writeable = False
            out = cls(n, values)
        for lo in range(0, count, 1 << 24):
            if not np.all(np.isfinite(out.values[lo : lo + (1 << 24)])):
                raise LinkingError(f"{path}: non-finite distances")
        return out

    # -- clustering

    def linkage(self) -> np.ndarray:
        """(n-1, 3) merge list [slot_a, slot_b, height], heights non-decreasing."""
        if self._merges is None:
            self._merges = _nn_chain(self.values, self.n)
        return self._merges


# ---------------------------------------------------------------------------
# Similarity construction

def build_similarity(
    scorer: FastScorer,
    items: list[PseudoSpeaker],
    block_size: int = 1024,
    backing: str = "auto",
    memory_budget: int = 2 << 30,
    path=None,
    threads: int | None = None,
    progress=None,
) -> CondensedMatrix:
    """Score every item pair and store distances d = -llr as float32.

    The self and projected terms are computed once over all items, so the
    condensed result is bit-identical for any ``block_size`` and thread
    count. ``backing="auto"`` spills to a file at ``path`` when the store
    would exceed ``memory_budget`` bytes. ``progress`` is called as
    progress(pairs_done, pairs_total) after each finished block.
    """
    n = len(items)
    if n < 2:
        raise LinkingError(f"need at least 2 items to link, got {n}")
    if block_size < 1:
        raise LinkingError("block_size must be >= 1")
    dims = {it.embedding.dim for it in items}
    if len(dims) != 1 or dims.pop() != scorer.dim:
        raise LinkingError(
            f"item embedding dims {sorted({it.embedding.dim for it in items})} "
            f"do not match scorer dim {scorer.dim}"
        )

    count = n * (n - 1) // 2
    need = 4 * count
    if backing == "auto":
        backing = "disk" if need > memory_budget else "memory"
    elif backing == "memory" and need > memory_budget:
        raise LinkingError(
            f"store needs {need} bytes but the budget is {memory_budget}; "
            "use disk backing or raise the budget"
        )
    matrix = CondensedMatrix.allocate(n, backing, path=path)

    emb = np.stack([it.embedding.vector for it in items])
    q = scorer.self_terms(emb)
    proj = scorer.project(emb)
    offset = scorer.offset
    values = matrix.values

    def fill(i0: int, i1: int, j0: int, j1: int) -> int:
        cross = np.einsum("ik,jk->ij", proj[i0:i1], emb[j0:j1], optimize=False)
        llr = ((2.0 * cross + q[i0:i1, None]) + q[None, j0:j1]) + offset
        dist = (-llr).astype(np.float32)
        done = 0
        for i in range(i0, i1):
            jlo = max(j0, i + 1)
            if jlo >= j1:
                continue
            start = condensed_index(n, i, jlo)
            values[start : start + (j1 - jlo)] = dist[i - i0, jlo - j0 :]
            done += j1 - jlo
        return done

    tasks = []
    for i0 in range(0, n, block_size):
        i1 = min(i0 + block_size, n)
        for j0 in range(i0, n, block_size):
            tasks.append((i0, i1, j0, min(j0 + block_size, n)))

    workers = threads if threads is not None else (os.cpu_count() or 1)
    done_pairs = 0
    dirty = 0
    if workers <= 1:
        for task in tasks:
            done_pairs += fill(*task)
            dirty += 1
            if matrix.backing == "disk" and dirty * 4 * block_size * block_size >= _ADVISE_BYTES:
                matrix.advise_dontneed()
                dirty = 0
            if progress is not None:
                progress(done_pairs, count)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(fill, *task) for task in tasks]
            for fut in as_completed(futures):
                done_pairs += fut.result()
                dirty += 1
                if matrix.backing == "disk" and dirty * 4 * block_size * block_size >= _ADVISE_BYTES:
                    matrix.advise_dontneed()
                    dirty = 0
                if progress is not None:
                    progress(done_pairs, count)
    if done_pairs != count:
        raise LinkingError(f"filled {done_pairs} pairs, expected {count}")
    matrix.finalize()
    return matrix


# ---------------------------------------------------------------------------
# Complete-linkage clustering (nearest-neighbor chain)

def _row_indices(n: int, base: np.ndarray, x: int) -> tuple[np.ndarray, int, int]:
    """Condensed positions of column x for rows < x, plus the contiguous
    span [start, stop) holding row x's entries for columns > x."""
    before = base[:x] + (x - 1) - np.arange(x, dtype=np.int64)
    start = base[x]
    return before, int(start), int(start + (n - 1 - x))


def _row_load(vals: np.ndarray, n: int, base: np.ndarray, x: int, out: np.ndarray) -> None:
    before, start, stop = _row_indices(n, base, x)
    out[:x] = vals[before]
    out[x] = np.inf
    out[x + 1 :] = vals[start:stop]


def _row_store(vals: np.ndarray, n: int, base: np.ndarray, x: int, row: np.ndarray) -> None:
    before, start, stop = _row_indices(n, base, x)
    vals[before] = row[:x]
    vals[start:stop] = row[x + 1 :]


def _nn_chain(values32: np.ndarray, n: int) -> np.ndarray:
    """Complete-linkage merge list via the nearest-neighbor chain.

    O(n^2) time; mutates a transient float64 copy of the condensed values.
    Slots are item indices; a merged cluster keeps the smaller slot. Ties
    in the neighbor scan prefer the chain predecessor, then the smallest
    index, so the result is deterministic.
    """
    if n < 1:
        raise LinkingError("cannot cluster an empty matrix")
    merges = np.empty((max(n - 1, 0), 3), dtype=np.float64)
    if n == 1:
        return merges
    dists = values32.astype(np.float64)
    idx = np.arange(n, dtype=np.int64)
    base = idx * n - (idx * (idx + 1)) // 2
    active = np.ones(n, dtype=bool)
    chain = np.empty(n, dtype=np.int64)
    chain_len = 0
    row = np.empty(n, dtype=np.float64)
    row_x = np.empty(n, dtype=np.float64)
    row_y = np.empty(n, dtype=np.float64)

    for k in range(n - 1):
        if chain_len == 0:
            chain[0] = int(np.argmax(active))
            chain_len = 1
        while True:
            x = int(chain[chain_len - 1])
            _row_load(dists, n, base, x, row)
            row[~active] = np.inf
            jmin = int(np.argmin(row))
            if chain_len > 1:
                prev = int(chain[chain_len - 2])
                if row[jmin] < row[prev]:
                    y = jmin
                else:
                    y = prev
            else:
                y = jmin
            if chain_len > 1 and y == chain[chain_len - 2]:
                height = row[y]
                break
            chain[chain_len] = y
            chain_len += 1
        chain_len -= 2
        a, b = (x, y) if x < y else (y, x)
        merges[k] = (a, b, height)
        _row_load(dists, n, base, a, row_x)
        _row_load(dists, n, base, b, row_y)
        np.maximum(row_x, row_y, out=row_x)
        _row_store(dists, n, base, a, row_x)
        active[b] = False
    # The chain discovers merges out of height order; sort into canonical
    # dendrogram order. Complete linkage is monotone, so dependent merges
    # keep their relative order under a stable sort.
    return merges[np.argsort(merges[:, 2], kind="stable")]


def cut_merges(merges: np.ndarray, n: int, threshold: float) -> np.ndarray:
    """Flat clustering from a merge list: apply merges with height <=
    threshold, then number clusters densely by first occurrence."""
    parent = np.arange(n, dtype=np.int64)

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for a, b, height in merges:
        if height <= threshold:
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                if ra > rb:
                    ra, rb = rb, ra
                parent[rb] = ra

    labels = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for i in range(n):
        root = find(i)
        if labels[root] < 0:
            labels[root] = next_id
            next_id += 1
        labels[i] = labels[root]
    return labels


def complete_linkage_cluster(matrix: CondensedMatrix, threshold: float) -> np.ndarray:
    """Item-index -> dense cluster id at the given distance threshold."""
    return cut_merges(matrix.linkage(), matrix.n, threshold)


def brute_force_cluster(matrix: CondensedMatrix, threshold: float) -> np.ndarray:
    """Reference clustering: repeatedly merge the globally closest pair.

    Quadratic scans per merge; capped at n=2000. Ties pick the
    lexicographically smallest (i, j); the merged cluster keeps slot i.
    """
    n = matrix.n
    if n > 2000:
        raise LinkingError(f"brute-force oracle is capped at n=2000, got {n}")
    upper = np.full((n, n), np.inf, dtype=np.float64)
    upper[np.triu_indices(n, 1)] = matrix.values.astype(np.float64)
    parent = np.arange(n, dtype=np.int64)

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    cols = np.arange(n)
    for _ in range(n - 1):
        flat = int(np.argmin(upper))
        height = upper.flat[flat]
        if not height <= threshold:
            break
        i, j = divmod(flat, n)
        parent[find(j)] = find(i)
        merged_i = np.where(cols < i, upper[:, i], upper[i, :])
        merged_j = np.where(cols < j, upper[:, j], upper[j, :])
        merged = np.maximum(merged_i, merged_j)
        merged[i] = np.inf
        merged[j] = np.inf
        upper[:i, i] = merged[:i]
        upper[i, i + 1 :] = merged[i + 1 :]
        upper[:j, j] = np.inf
        upper[j, j + 1 :] = np.inf

    labels = np.full(n, -1, dtype=np.int64)
    next_id = 0
    for i in range(n):
        root = find(i)
        if labels[root] < 0:
            labels[root] = next_id
            next_id += 1
        labels[i] = labels[root]
    return labels


# ---------------------------------------------------------------------------
# Identity resolution

@dataclass(frozen=True)
class LinkingResult:
    """Cluster labels per item plus known-name resolution.

    assignment maps item id -> cluster label "L<k>"; identified maps a
    cluster label to a known speaker name where one was resolved; conflicts
    lists clusters that captured two or more known enrollments.
    """

    threshold: float
    assignment: dict[str, str]
    identified: dict[str, str]
    conflicts: tuple[tuple[str, tuple[str, ...]], ...] = ()


def resolve_identities(
    labels: np.ndarray,
    items: list[PseudoSpeaker],
    matrix: CondensedMatrix,
    threshold: float,
) -> LinkingResult:
    """Name clusters that contain known enrollments.

    A cluster with exactly one known takes its name. A cluster with several
    knowns is a conflict; it takes the known with the smallest mean distance
    to the cluster's pseudo members (to its fellow knowns when there are no
    pseudo members), ties broken by name.
    """
    labels = np.asarray(labels)
    if len(items) != labels.shape[0] or labels.shape[0] != matrix.n:
        raise LinkingError(
            f"got {len(items)} items, {labels.shape[0]} labels, matrix n={matrix.n}"
        )
    members: dict[int, list[int]] = {}
    for idx, cid in enumerate(labels):
        members.setdefault(int(cid), []).append(idx)

    assignment: dict[str, str] = {}
    identified: dict[str, str] = {}
    conflicts: list[tuple[str, tuple[str, ...]]] = []
    for cid in sorted(members):
        cluster = members[cid]
        label = f"L{cid}"
        for idx in cluster:
            assignment[items[idx].id] = label
        knowns = [idx for idx in cluster if items[idx].kind == KNOWN]
        if not knowns:
            continue
        if len(knowns) == 1:
            identified[label] = items[knowns[0]].id
            continue
        pseudos = [idx for idx in cluster if items[idx].kind == PSEUDO]
        best: tuple[float, str] | None = None
        for k in knowns:
            others = pseudos if pseudos else [m for m in knowns if m != k]
            mean = float(np.mean([matrix.get(k, m) for m in others]))
            cand = (mean, items[k].id)
            if best is None or cand < best:
                best = cand
        identified[label] = best[1]
        conflicts.append((label, tuple(sorted(items[k].id for k in knowns))))
    return LinkingResult(
        threshold=float(threshold),
        assignment=assignment,
        identified=identified,
        conflicts=tuple(conflicts),
    )


def apply_linking(result: LinkingResult, segments: list[Segment]) -> list[Segment]:
    """Rewrite segment labels to cluster labels (or resolved known names).

    Segments whose (tape, label) never became an item, because the
    pseudo-speaker fell under the duration floor, keep a distinct
    "unlinked:<tape>/<label>" identity.
    """
    out = []
    for seg in segments:
        qualified = f"{seg.tape_id}/{seg.label}"
        cluster = result.assignment.get(qualified)
        if cluster is None:
            new_label = f"unlinked:{qualified}"
        else:
            new_label = result.identified.get(cluster, cluster)
        out.append(Segment(seg.tape_id, seg.onset, seg.duration, new_label))
    return out


def write_linking_jsonl(result: LinkingResult, items: list[PseudoSpeaker]) -> str:
    """One record per pseudo item: {"pseudo", "label", "known"}."""
    lines = []
    for item in items:
        if item.kind != PSEUDO:
            continue
        label = result.assignment[item.id]
        rec = {
            "pseudo": item.id,
            "label": label,
            "known": result.identified.get(label),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def read_linking_jsonl(text: str) -> dict[str, tuple[str, str | None]]:
    """Inverse of write_linking_jsonl: pseudo id -> (label, known or None)."""
    out: dict[str, tuple[str, str | None]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
            out[rec["pseudo"]] = (rec["label"], rec.get("known"))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise LinkingError(f"line {lineno}: {exc!r}") from None
    return out
