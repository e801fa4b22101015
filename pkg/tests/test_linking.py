import numpy as np
import pytest

from tapelink.core import KNOWN, Embedding, PseudoSpeaker, Segment
from tapelink.linking import (
    CondensedMatrix,
    LinkingError,
    LinkingResult,
    apply_linking,
    brute_force_cluster,
    build_similarity,
    complete_linkage_cluster,
    condensed_index,
    cut_merges,
    read_linking_jsonl,
    resolve_identities,
    write_linking_jsonl,
)
from tapelink.plda import PldaModel, prepare_scorer, score_pair


def _partition(labels):
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(int(lab), []).append(i)
    return frozenset(frozenset(g) for g in groups.values())


def _matrix(vals, n):
    return CondensedMatrix(n, np.asarray(vals, dtype=np.float32))


def _random_scorer(rng, d):
    a = rng.standard_normal((d, d))
    b = rng.standard_normal((d, d))
    model = PldaModel(
        mu=np.zeros(d),
        sigma_b=a @ a.T / d + 0.1 * np.eye(d),
        sigma_w=b @ b.T / d + 0.1 * np.eye(d),
    )
    return model, prepare_scorer(model)


def _items(rng, n, d, prefix="t"):
    out = []
    for i in range(n):
        vec = rng.standard_normal(d)
        vec /= np.linalg.norm(vec)
        out.append(
            PseudoSpeaker(
                id=f"{prefix}{i}/S0",
                tape_id=f"{prefix}{i}",
                total_duration=30.0,
                embedding=Embedding(f"{prefix}{i}/S0", vec),
            )
        )
    return out


def test_condensed_index_row_major_order():
    expect = {(0, 1): 0, (0, 2): 1, (0, 3): 2, (1, 2): 3, (1, 3): 4, (2, 3): 5}
    for (i, j), k in expect.items():
        assert condensed_index(4, i, j) == k
    with pytest.raises(LinkingError):
        condensed_index(4, 2, 2)
    with pytest.raises(LinkingError):
        condensed_index(4, 3, 1)
    with pytest.raises(LinkingError):
        condensed_index(4, 0, 4)


def test_build_similarity_negated_pair_scores():
    rng = np.random.default_rng(1)
    model, scorer = _random_scorer(rng, 8)
    items = _items(rng, 3, 8)
    matrix = build_similarity(scorer, items, threads=1)
    assert matrix.n == 3
    for i in range(3):
        for j in range(i + 1, 3):
            want = -score_pair(model, items[i].embedding.vector, items[j].embedding.vector)
            assert matrix.get(i, j) == pytest.approx(want, abs=1e-5)


def test_build_similarity_blocking_and_threads_bit_identical():
    rng = np.random.default_rng(7)
    _, scorer = _random_scorer(rng, 16)
    items = _items(rng, 200, 16)
    base = build_similarity(scorer, items, block_size=200, threads=1)
    for block_size, threads in ((7, 1), (64, 1), (64, 3), (200, 3)):
        other = build_similarity(scorer, items, block_size=block_size, threads=threads)
        assert other.values.tobytes() == base.values.tobytes()


def test_build_similarity_entry_count():
    rng = np.random.default_rng(2)
    _, scorer = _random_scorer(rng, 4)
    items = _items(rng, 811, 4)
    matrix = build_similarity(scorer, items, threads=1)
    assert matrix.values.shape[0] == 328455


def test_build_similarity_progress_and_validation():
    rng = np.random.default_rng(3)
    _, scorer = _random_scorer(rng, 4)
    items = _items(rng, 10, 4)
    seen = []
    build_similarity(scorer, items, block_size=4, threads=1, progress=lambda d, t: seen.append((d, t)))
    assert seen[-1] == (45, 45)
    assert all(t == 45 for _, t in seen)

    with pytest.raises(LinkingError, match="at least 2"):
        build_similarity(scorer, items[:1], threads=1)
    with pytest.raises(LinkingError, match="dim"):
        bad = _items(rng, 3, 6)
        build_similarity(scorer, bad, threads=1)


def test_build_similarity_memory_budget():
    rng = np.random.default_rng(4)
    _, scorer = _random_scorer(rng, 4)
    items = _items(rng, 40, 4)
    with pytest.raises(LinkingError, match="budget"):
        build_similarity(scorer, items, backing="memory", memory_budget=100, threads=1)
    with pytest.raises(LinkingError, match="backing"):
        build_similarity(scorer, items, backing="cloud", threads=1)


def test_build_similarity_disk_backing(tmp_path):
    rng = np.random.default_rng(5)
    _, scorer = _random_scorer(rng, 4)
    items = _items(rng, 40, 4)
    mem = build_similarity(scorer, items, backing="memory", threads=1)
    path = tmp_path / "pairs.cond"
    disk = build_similarity(
        scorer, items, backing="auto", memory_budget=100, path=path, threads=1
    )
    assert disk.backing == "disk"
    assert path.exists()
    assert disk.values.tobytes() == mem.values.tobytes()
    disk.close()


def test_condensed_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    vals = rng.standard_normal(45).astype(np.float32)
    matrix = _matrix(vals, 10)
    path = tmp_path / "m.cond"
    matrix.save(path)

    for use_mmap in (True, False):
        back = CondensedMatrix.load(path, use_mmap=use_mmap)
        assert back.n == 10
        assert back.values.tobytes() == vals.tobytes()
        back.close()


def test_condensed_load_errors(tmp_path):
    path = tmp_path / "bad.cond"
    path.write_bytes(b"XXXX!\n" + b"\x00" * 20)
    with pytest.raises(LinkingError, match="magic"):
        CondensedMatrix.load(path)

    good = _matrix(np.ones(3, dtype=np.float32), 3)
    path2 = tmp_path / "trunc.cond"
    good.save(path2)
    path2.write_bytes(path2.read_bytes()[:-2])
    with pytest.raises(LinkingError, match="expected"):
        CondensedMatrix.load(path2)

    path3 = tmp_path / "nan.cond"
    _matrix(np.array([1.0, np.nan, 2.0], dtype=np.float32), 3).save(path3)
    with pytest.raises(LinkingError, match="finite"):
        CondensedMatrix.load(path3)


def test_complete_linkage_hand_case():
    # d(0,1)=1, d(0,2)=5, d(1,2)=4
    matrix = _matrix([1.0, 5.0, 4.0], 3)
    assert _partition(complete_linkage_cluster(matrix, 2.0)) == _partition([0, 0, 1])
    assert _partition(complete_linkage_cluster(matrix, 5.0)) == _partition([0, 0, 0])
    assert _partition(complete_linkage_cluster(matrix, 0.5)) == _partition([0, 1, 2])


def test_complete_linkage_uses_max_not_min():
    # Single linkage would chain 0-1-2 at threshold 2; complete linkage
    # must keep 2 out because d(0,2)=10.
    matrix = _matrix([1.0, 10.0, 1.5], 3)
    labels = complete_linkage_cluster(matrix, 2.0)
    assert _partition(labels) == _partition([0, 0, 1])


def test_complete_linkage_two_items_and_equal_distances():
    two = _matrix([3.0], 2)
    assert len(set(complete_linkage_cluster(two, 2.9))) == 2
    assert len(set(complete_linkage_cluster(two, 3.0))) == 1

    flat = _matrix(np.full(6, 3.0, dtype=np.float32), 4)
    assert len(set(complete_linkage_cluster(flat, 2.999))) == 4
    assert len(set(complete_linkage_cluster(flat, 3.0))) == 1


def test_cluster_labels_dense_first_occurrence():
    matrix = _matrix([1.0, 5.0, 4.0], 3)
    labels = complete_linkage_cluster(matrix, 2.0)
    assert labels[0] == 0
    seen = []
    for lab in labels:
        if lab not in seen:
            seen.append(lab)
    assert seen == sorted(seen)


def test_linkage_heights_non_decreasing():
    rng = np.random.default_rng(15)
    for _ in range(20):
        n = int(rng.integers(2, 40))
        matrix = _matrix(rng.standard_normal(n * (n - 1) // 2).astype(np.float32), n)
        heights = matrix.linkage()[:, 2]
        assert np.all(np.diff(heights) >= 0)


def test_complete_linkage_matches_brute_force():
    rng = np.random.default_rng(99)
    for _ in range(60):
        n = int(rng.integers(2, 64))
        vals = rng.standard_normal(n * (n - 1) // 2).astype(np.float32)
        matrix = _matrix(vals, n)
        taus = np.quantile(vals.astype(np.float64), rng.uniform(0.0, 1.0, size=5))
        for tau in taus:
            fast = complete_linkage_cluster(matrix, float(tau))
            ref = brute_force_cluster(matrix, float(tau))
            assert _partition(fast) == _partition(ref)


def test_tied_distances_give_valid_cuts():
    # With ties the flat partition is not unique, but any complete-linkage
    # cut must keep every within-cluster distance at or below the threshold.
    rng = np.random.default_rng(41)
    for _ in range(25):
        n = int(rng.integers(3, 25))
        vals = rng.choice([1.0, 2.0, 3.0], size=n * (n - 1) // 2).astype(np.float32)
        matrix = _matrix(vals, n)
        for tau in (0.5, 1.0, 2.0, 3.0):
            for labels in (
                complete_linkage_cluster(matrix, tau),
                brute_force_cluster(matrix, tau),
            ):
                for i in range(n):
                    for j in range(i + 1, n):
                        if labels[i] == labels[j]:
                            assert matrix.get(i, j) <= tau


def test_threshold_nestedness():
    rng = np.random.default_rng(13)
    for _ in range(20):
        n = int(rng.integers(2, 50))
        matrix = _matrix(rng.standard_normal(n * (n - 1) // 2).astype(np.float32), n)
        taus = np.sort(rng.standard_normal(6))
        prev = None
        for tau in taus:
            labels = complete_linkage_cluster(matrix, float(tau))
            if prev is not None:
                for cluster in _partition(prev):
                    targets = {labels[i] for i in cluster}
                    assert len(targets) == 1
            prev = labels


def test_threshold_extremes():
    rng = np.random.default_rng(21)
    n = 12
    vals = (rng.uniform(1.0, 2.0, size=n * (n - 1) // 2)).astype(np.float32)
    matrix = _matrix(vals, n)
    assert len(set(complete_linkage_cluster(matrix, 0.99))) == n
    top = float(matrix.linkage()[:, 2].max())
    assert len(set(complete_linkage_cluster(matrix, top))) == 1


def test_brute_force_cap():
    matrix = CondensedMatrix(2001, np.zeros(2001 * 2000 // 2, dtype=np.float32))
    with pytest.raises(LinkingError, match="2000"):
        brute_force_cluster(matrix, 1.0)


def test_cut_merges_empty_merge_list():
    labels = cut_merges(np.empty((0, 3)), 1, 0.0)
    assert labels.tolist() == [0]


def _speaker(item_id, kind=None, tape="t1"):
    vec = np.array([1.0, 0.0])
    return PseudoSpeaker(
        id=item_id,
        tape_id=tape if kind != KNOWN else "",
        total_duration=20.0 if kind != KNOWN else 0.0,
        embedding=Embedding(item_id, vec),
        kind=kind or "pseudo",
    )


def test_resolve_identities_single_known():
    items = [_speaker("t1/S0"), _speaker("t2/S0", tape="t2"), _speaker("K1", kind=KNOWN)]
    matrix = _matrix([0.1, 0.2, 0.3], 3)
    labels = np.array([0, 0, 0])
    result = resolve_identities(labels, items, matrix, threshold=1.0)
    assert result.assignment == {"t1/S0": "L0", "t2/S0": "L0", "K1": "L0"}
    assert result.identified == {"L0": "K1"}
    assert result.conflicts == ()


def test_resolve_identities_unnamed_cluster():
    items = [_speaker("t1/S0"), _speaker("t2/S0", tape="t2")]
    matrix = _matrix([0.5], 2)
    result = resolve_identities(np.array([0, 0]), items, matrix, threshold=1.0)
    assert result.assignment == {"t1/S0": "L0", "t2/S0": "L0"}
    assert result.identified == {}


def test_resolve_identities_conflict_prefers_closer_known():
    items = [
        _speaker("t1/S0"),
        _speaker("K1", kind=KNOWN),
        _speaker("K2", kind=KNOWN),
    ]
    # pseudo-K1 0.3, pseudo-K2 0.9, K1-K2 0.5
    matrix = _matrix([0.3, 0.9, 0.5], 3)
    result = resolve_identities(np.array([0, 0, 0]), items, matrix, threshold=2.0)
    assert result.identified == {"L0": "K1"}
    assert result.conflicts == (("L0", ("K1", "K2")),)


def test_resolve_identities_knowns_only_cluster_ties_on_name():
    items = [_speaker("K2", kind=KNOWN), _speaker("K1", kind=KNOWN)]
    matrix = _matrix([0.4], 2)
    result = resolve_identities(np.array([0, 0]), items, matrix, threshold=1.0)
    assert result.identified == {"L0": "K1"}
    assert result.conflicts == (("L0", ("K1", "K2")),)


def test_resolve_identities_length_mismatch():
    items = [_speaker("t1/S0")]
    matrix = _matrix([0.5], 2)
    with pytest.raises(LinkingError):
        resolve_identities(np.array([0, 0]), items, matrix, threshold=1.0)


def test_resolve_identities_keeps_every_item():
    rng = np.random.default_rng(33)
    items = _items(rng, 20, 4)
    vals = rng.uniform(0.0, 2.0, size=190).astype(np.float32)
    matrix = _matrix(vals, 20)
    labels = complete_linkage_cluster(matrix, 1.0)
    result = resolve_identities(labels, items, matrix, threshold=1.0)
    assert sorted(result.assignment) == sorted(it.id for it in items)


def test_apply_linking_rewrites_labels():
    result = LinkingResult(
        threshold=1.0,
        assignment={"t1/S0": "L0", "t2/S1": "L0", "t1/S1": "L1"},
        identified={"L1": "Willem Drees"},
    )
    segments = [
        Segment("t1", 0.0, 5.0, "S0"),
        Segment("t2", 3.0, 4.0, "S1"),
        Segment("t1", 9.0, 2.0, "S1"),
        Segment("t1", 20.0, 1.0, "S3"),
    ]
    out = apply_linking(result, segments)
    assert [s.label for s in out] == ["L0", "L0", "Willem Drees", "unlinked:t1/S3"]
    assert [(s.tape_id, s.onset, s.duration) for s in out] == [
        (s.tape_id, s.onset, s.duration) for s in segments
    ]


def test_linking_jsonl_round_trip():
    items = [
        _speaker("t1/S0"),
        _speaker("t2/S0", tape="t2"),
        _speaker("K1", kind=KNOWN),
    ]
    result = LinkingResult(
        threshold=0.5,
        assignment={"t1/S0": "L0", "t2/S0": "L1", "K1": "L0"},
        identified={"L0": "K1"},
    )
    text = write_linking_jsonl(result, items)
    back = read_linking_jsonl(text)
    assert back == {"t1/S0": ("L0", "K1"), "t2/S0": ("L1", None)}
    with pytest.raises(LinkingError, match="line 1"):
        read_linking_jsonl("{broken\n")
