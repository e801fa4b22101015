import numpy as np
import pytest

from tapelink.core import Segment, parse_rttm, read_evec
from tapelink.metrics import compute_der
from tapelink.plda import fit_plda
from tapelink.synthgen import (
    SynthConfig,
    SynthError,
    generate_archive,
    inject_stage1_errors,
    write_archive,
)


def _us(t):
    return int(round(t * 1e6))


def test_generate_archive_deterministic(tmp_path):
    cfg = SynthConfig(seed=7, n_tapes=100, n_speakers=50, recurring_speakers=10,
                      known_speakers=3, dim=8)
    a = write_archive(generate_archive(cfg), tmp_path / "a")
    b = write_archive(generate_archive(cfg), tmp_path / "b")
    assert sorted(a) == sorted(b)
    for name in a:
        with open(a[name], "rb") as fa, open(b[name], "rb") as fb:
            assert fa.read() == fb.read(), name


def test_config_validation():
    cases = [
        dict(n_tapes=0),
        dict(n_speakers=0),
        dict(recurring_speakers=9, n_speakers=8),
        dict(n_tapes=1, recurring_speakers=1),
        dict(known_speakers=99, n_speakers=8),
        dict(dim=0),
        dict(tape_duration_mean=0.0),
        dict(tape_duration_std=-1.0),
        dict(segments_min=0),
        dict(segments_min=9, segments_max=3),
        dict(sigma_b_scale=0.0),
        dict(sigma_w_scale=-0.1),
        dict(stage1_split_prob=1.5),
        dict(stage1_label_noise=-0.1),
        dict(annotated_fraction=2.0),
        dict(stage1_split_minority=0.0),
        dict(stage1_split_minority=1.0),
    ]
    for overrides in cases:
        with pytest.raises(SynthError):
            SynthConfig(**overrides).validate()


def test_segments_tile_each_tape():
    cfg = SynthConfig(seed=3, n_tapes=12, n_speakers=10, recurring_speakers=3, dim=4)
    arch = generate_archive(cfg)
    by_tape = {}
    for seg in arch.reference:
        by_tape.setdefault(seg.tape_id, []).append(seg)
    assert set(by_tape) == {e.tape_id for e in arch.manifest.entries}
    for tape_id, segs in by_tape.items():
        segs.sort(key=lambda s: s.onset)
        assert segs[0].onset == 0.0
        for prev, nxt in zip(segs, segs[1:]):
            assert _us(prev.end) == _us(nxt.onset)
        duration = arch.manifest.entry(tape_id).duration
        assert _us(segs[-1].end) == _us(duration)
        for seg in segs:
            assert abs(seg.onset * 1000 - round(seg.onset * 1000)) < 1e-6
            assert abs(seg.duration * 1000 - round(seg.duration * 1000)) < 1e-6


def test_speaker_casting():
    cfg = SynthConfig(seed=11, n_tapes=25, n_speakers=30, recurring_speakers=6, dim=4)
    arch = generate_archive(cfg)
    tapes_per_speaker = {}
    for seg in arch.reference:
        tapes_per_speaker.setdefault(seg.label, set()).add(seg.tape_id)
    assert set(tapes_per_speaker) == set(arch.speaker_names)
    for k, name in enumerate(arch.speaker_names):
        if k < cfg.recurring_speakers:
            assert len(tapes_per_speaker[name]) >= 2
        else:
            assert len(tapes_per_speaker[name]) == 1


def test_segment_embeddings_shape_and_ids():
    cfg = SynthConfig(seed=2, n_tapes=8, n_speakers=8, recurring_speakers=2, dim=6)
    arch = generate_archive(cfg)
    assert set(arch.segment_embeddings) == set(range(len(arch.reference)))
    counters = {}
    for idx, seg in enumerate(arch.reference):
        emb = arch.segment_embeddings[idx]
        k = counters.get(seg.tape_id, 0)
        counters[seg.tape_id] = k + 1
        assert emb.id == f"{seg.tape_id}|{k:05d}"
        assert abs(np.linalg.norm(emb.vector) - 1.0) <= 1e-9


def test_known_speakers_enrollments():
    cfg = SynthConfig(seed=4, n_tapes=10, n_speakers=12, recurring_speakers=5,
                      known_speakers=4, dim=6)
    arch = generate_archive(cfg)
    assert [e.id for e in arch.known_embeddings] == [
        "spk0000", "spk0001", "spk0002", "spk0003"
    ]
    segment_bytes = {e.vector.tobytes() for e in arch.segment_embeddings.values()}
    for emb in arch.known_embeddings:
        assert abs(np.linalg.norm(emb.vector) - 1.0) <= 1e-9
        assert emb.vector.tobytes() not in segment_bytes


def test_truth_model_is_isotropic():
    cfg = SynthConfig(seed=1, n_tapes=5, n_speakers=4, recurring_speakers=2, dim=5,
                      sigma_b_scale=2.0, sigma_w_scale=0.5)
    arch = generate_archive(cfg)
    np.testing.assert_array_equal(arch.model.sigma_b, 2.0 * np.eye(5))
    np.testing.assert_array_equal(arch.model.sigma_w, 0.5 * np.eye(5))


def test_annotated_fraction_partial():
    cfg = SynthConfig(seed=6, n_tapes=10, n_speakers=8, recurring_speakers=2, dim=4,
                      annotated_fraction=0.4)
    arch = generate_archive(cfg)
    for entry in arch.manifest.entries:
        onset, length = entry.annotated
        assert length == pytest.approx(0.4 * entry.duration, abs=0.001)
        assert onset >= 0.0
        assert onset + length <= entry.duration + 1e-9


def test_no_errors_means_per_tape_relabeling():
    cfg = SynthConfig(seed=8, n_tapes=15, n_speakers=14, recurring_speakers=4, dim=4)
    arch = generate_archive(cfg)
    assert [s.onset for s in arch.hypothesis] == [s.onset for s in arch.reference]
    assert [s.duration for s in arch.hypothesis] == [s.duration for s in arch.reference]

    per_tape: dict[str, dict[str, str]] = {}
    for ref, hyp in zip(arch.reference, arch.hypothesis):
        fw = per_tape.setdefault(ref.tape_id, {})
        assert fw.setdefault(ref.label, hyp.label) == hyp.label
    for tape_id, fw in per_tape.items():
        assert len(set(fw.values())) == len(fw)

    for tape_id in sorted({s.tape_id for s in arch.reference}):
        ref = [s for s in arch.reference if s.tape_id == tape_id]
        hyp = [s for s in arch.hypothesis if s.tape_id == tape_id]
        assert compute_der(ref, hyp).der == 0.0


def _flat_reference(n_tapes=100, speakers_per_tape=10, segs_per_speaker=3):
    ref = []
    for t in range(n_tapes):
        cursor = 0.0
        for s in range(speakers_per_tape):
            for _ in range(segs_per_speaker):
                ref.append(Segment(f"t{t:03d}", cursor, 10.0, f"spk{t:03d}_{s}"))
                cursor += 10.0
    return ref


def test_split_probability_one_gives_two_labels():
    ref = _flat_reference(n_tapes=5)
    cfg = SynthConfig(stage1_split_prob=1.0)
    hyp = inject_stage1_errors(ref, cfg, rng=np.random.default_rng(0))
    per_speaker: dict[str, set[str]] = {}
    for r, h in zip(ref, hyp):
        per_speaker.setdefault(f"{r.tape_id}/{r.label}", set()).add(h.label)
    for labels in per_speaker.values():
        assert len(labels) == 2


def test_split_ratio_matches_binomial_expectation():
    ref = _flat_reference(n_tapes=100, speakers_per_tape=10)
    cfg = SynthConfig(stage1_split_prob=0.5)
    hyp = inject_stage1_errors(ref, cfg, rng=np.random.default_rng(123))
    true_count = len({(s.tape_id, s.label) for s in ref})
    pseudo_count = len({(s.tape_id, s.label) for s in hyp})
    assert true_count == 1000
    assert 1.45 <= pseudo_count / true_count <= 1.65


def test_zero_noise_keeps_labels_pure():
    ref = _flat_reference(n_tapes=20)
    cfg = SynthConfig(stage1_split_prob=0.6, stage1_label_noise=0.0)
    hyp = inject_stage1_errors(ref, cfg, rng=np.random.default_rng(5))
    speakers_per_label: dict[str, set[str]] = {}
    for r, h in zip(ref, hyp):
        speakers_per_label.setdefault(f"{r.tape_id}/{h.label}", set()).add(r.label)
    for speakers in speakers_per_label.values():
        assert len(speakers) == 1


def test_label_noise_stays_in_tape_pool():
    ref = _flat_reference(n_tapes=10)
    cfg = SynthConfig(stage1_split_prob=0.3, stage1_label_noise=0.2)
    hyp = inject_stage1_errors(ref, cfg, rng=np.random.default_rng(9))
    assert [(s.tape_id, s.onset, s.duration) for s in hyp] == [
        (s.tape_id, s.onset, s.duration) for s in ref
    ]
    changed = sum(1 for r, h in zip(ref, hyp) if r.label != h.label)
    assert changed > 0


def test_generated_embeddings_recover_scale_ratio():
    cfg = SynthConfig(seed=0, n_tapes=40, n_speakers=50, recurring_speakers=12,
                      dim=16, segments_min=8, segments_max=14,
                      sigma_b_scale=1.0, sigma_w_scale=0.3)
    arch = generate_archive(cfg)
    by_speaker: dict[str, list[np.ndarray]] = {}
    for idx, seg in enumerate(arch.reference):
        by_speaker.setdefault(seg.label, []).append(arch.segment_embeddings[idx].vector)
    model = fit_plda({k: np.stack(v) for k, v in by_speaker.items()}, iterations=10)
    ratio = np.trace(model.sigma_b) / np.trace(model.sigma_w)
    want = cfg.sigma_b_scale / cfg.sigma_w_scale
    assert abs(ratio / want - 1.0) <= 0.15


def test_write_archive_files(tmp_path):
    cfg = SynthConfig(seed=13, n_tapes=6, n_speakers=6, recurring_speakers=2,
                      known_speakers=2, dim=4)
    arch = generate_archive(cfg)
    paths = write_archive(arch, tmp_path)
    assert sorted(paths) == [
        "hypothesis.rttm", "known.evec", "manifest.jsonl",
        "reference.rttm", "segments.evec", "train.evec", "truth.plda",
    ]

    hyp_lines = parse_rttm(open(paths["hypothesis.rttm"]).read())
    segs = read_evec(open(paths["segments.evec"], "rb").read())
    assert len(segs) == len(hyp_lines)
    counters: dict[str, int] = {}
    for line, emb in zip(hyp_lines, segs):
        k = counters.get(line.tape_id, 0)
        counters[line.tape_id] = k + 1
        assert emb.id == f"{line.tape_id}|{k:05d}"

    train = read_evec(open(paths["train.evec"], "rb").read())
    for ref, emb in zip(arch.reference, train):
        speaker, _, rest = emb.id.partition("/")
        assert speaker == ref.label
        assert rest.startswith(ref.tape_id)


def test_write_archive_skips_known_when_absent(tmp_path):
    cfg = SynthConfig(seed=14, n_tapes=4, n_speakers=4, recurring_speakers=2, dim=4)
    paths = write_archive(generate_archive(cfg), tmp_path)
    assert "known.evec" not in paths
