"""Command-line pipeline: synth, train-plda, link, sweep, eval, report.

Exit codes: 0 on success, 1 on usage errors, 2 on data errors. Options can
come from a JSON config file (sections: paths, plda, linking, metrics,
synth); explicit flags win. Progress goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import core, linking, metrics, plda, report, synthgen

log = logging.getLogger("tapelink")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # Usage errors must exit 1 (argparse defaults to 2, which this
        # tool reserves for data errors).
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _read_text(path: str) -> str:
    try:
        with open(path, "r") as fh:
            return fh.read()
    except OSError as exc:
        raise core.TapelinkError(f"cannot read {path}: {exc}") from None


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise core.TapelinkError(f"cannot read {path}: {exc}") from None


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise core.TapelinkError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise core.TapelinkError(f"{path}: config root must be an object")
    return cfg


def _cfg(config: dict, section: str, key: str, flag, default):
    if flag is not None:
        return flag
    value = config.get(section, {})
    if not isinstance(value, dict):
        raise core.TapelinkError(f"config section {section!r} must be an object")
    return value.get(key, default)


def _progress(label: str):
    started = time.monotonic()
    last = [0.0]

    def callback(done: int, total: int) -> None:
        now = time.monotonic()
        if done < total and now - last[0] < 0.5:
            return
        last[0] = now
        rate = done / max(now - started, 1e-9)
        print(
            f"progress phase={label} items={done}/{total} rate={rate:.0f}/s",
            file=sys.stderr,
            flush=True,
        )

    return callback


def _write(path: str, data) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(data)


# ---------------------------------------------------------------------------
# Subcommands

def _cmd_synth(args, config: dict) -> int:
    fields = {}
    for name in (
        "seed", "n_tapes", "n_speakers", "recurring_speakers", "known_speakers",
        "dim", "tape_duration_mean", "tape_duration_std", "segments_min",
        "segments_max", "sigma_b_scale", "sigma_w_scale", "stage1_split_prob",
        "stage1_split_minority", "stage1_label_noise", "annotated_fraction",
    ):
        value = _cfg(config, "synth", name, getattr(args, name), None)
        if value is not None:
            fields[name] = value
    synth_config = synthgen.SynthConfig(**fields)
    archive = synthgen.generate_archive(synth_config)
    paths = synthgen.write_archive(archive, args.out)
    print(
        f"wrote {len(paths)} files to {args.out}: "
        f"{len(archive.manifest)} tapes, {len(archive.reference)} segments, "
        f"{len(archive.speaker_names)} speakers, "
        f"{len(archive.known_embeddings)} known"
    )
    return 0


def _cmd_train_plda(args, config: dict) -> int:
    train_path = _cfg(config, "paths", "train_evec", args.train_evec, None)
    if train_path is None:
        raise core.TapelinkError("no training embeddings given (--train-evec)")
    iterations = int(_cfg(config, "plda", "iterations", args.iterations, 10))
    embeddings = core.read_evec(_read_bytes(train_path))

    by_speaker: dict[str, list] = {}
    for emb in embeddings:
        speaker, sep, _ = emb.id.partition("/")
        if not sep or not speaker:
            raise core.TapelinkError(
                f"training id {emb.id!r} is not of the form <speaker>/<utterance>"
            )
        by_speaker.setdefault(speaker, []).append(emb)

    log.info(
        "training on %d vectors from %d speakers, %d iterations",
        len(embeddings), len(by_speaker), iterations,
    )
    params = plda.fit_preprocess(embeddings)
    processed = {
        name: plda.apply_preprocess_rows(params, np.stack([e.vector for e in vecs]))
        for name, vecs in by_speaker.items()
    }
    model = plda.fit_plda(processed, iterations=iterations)
    history = model.loglik_history
    if len(history) > 1:
        log.info(
            "log-likelihood %.6g -> %.6g over %d iterations",
            history[0], history[-1], len(history) - 1,
        )
    _write(args.model_out, plda.write_plda(model, params))
    print(f"wrote model ({model.dim} dims) to {args.model_out}")
    return 0


def _load_items(args, config: dict, params, segments):
    """Merged pseudo-speakers plus known enrollments, preprocessed for scoring."""
    evec_path = _cfg(config, "paths", "segments_evec", args.evec, None)
    if evec_path is None:
        raise core.TapelinkError("no segment embeddings given (--evec)")
    seg_embs = core.read_evec(_read_bytes(evec_path))
    if len(seg_embs) != len(segments):
        raise core.TapelinkError(
            f"{evec_path}: {len(seg_embs)} embeddings for {len(segments)} "
            "segments; records must align with RTTM line order"
        )
    min_duration = float(
        _cfg(config, "linking", "min_duration", args.min_duration, 10.0)
    )
    items = core.merge_pseudo_speakers(
        segments, dict(enumerate(seg_embs)), min_duration=min_duration
    )
    if not items:
        raise core.TapelinkError(
            f"no pseudo-speaker reached the {min_duration:.3g}s duration floor"
        )

    known_path = _cfg(config, "paths", "known_evec", args.known_evec, None)
    if known_path is not None:
        for emb in core.read_evec(_read_bytes(known_path)):
            items.append(
                core.PseudoSpeaker(
                    id=emb.id,
                    tape_id="",
                    total_duration=0.0,
                    embedding=emb,
                    kind=core.KNOWN,
                )
            )

    processed = []
    for item in items:
        emb = plda.apply_preprocess(params, item.embedding)
        processed.append(
            core.PseudoSpeaker(
                id=item.id,
                tape_id=item.tape_id,
                total_duration=item.total_duration,
                embedding=emb,
                kind=item.kind,
            )
        )
    return processed


def _build_matrix(args, config: dict, scorer, items):
    budget = int(
        _cfg(config, "linking", "memory_budget", args.memory_budget, 2 << 30)
    )
    backing = _cfg(config, "linking", "backing", args.backing, "auto")
    block_size = int(_cfg(config, "linking", "block_size", args.block_size, 1024))
    matrix_path = _cfg(config, "paths", "matrix", args.matrix_out, None)
    return linking.build_similarity(
        scorer,
        items,
        block_size=block_size,
        backing=backing,
        memory_budget=budget,
        path=matrix_path,
        threads=args.threads,
        progress=_progress("scoring"),
    )


def _cmd_link(args, config: dict) -> int:
    model_path = _cfg(config, "paths", "model", args.model, None)
    hyp_path = _cfg(config, "paths", "hypothesis_rttm", args.hyp_rttm, None)
    if model_path is None or hyp_path is None:
        raise core.TapelinkError("link needs --model and --hyp-rttm")
    threshold = _cfg(config, "linking", "threshold", args.threshold, None)
    if threshold is None:
        raise core.TapelinkError("link needs --threshold (distance scale, -llr)")
    threshold = float(threshold)

    model, params = plda.read_plda(_read_bytes(model_path))
    segments = core.parse_rttm(_read_text(hyp_path))
    items = _load_items(args, config, params, segments)
    scorer = plda.prepare_scorer(model)
    matrix = _build_matrix(args, config, scorer, items)

    labels = linking.complete_linkage_cluster(matrix, threshold)
    result = linking.resolve_identities(labels, items, matrix, threshold)
    linked = linking.apply_linking(result, segments)

    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    _write(os.path.join(out_dir, "linked.rttm"), core.emit_rttm(linked))
    _write(
        os.path.join(out_dir, "linking.jsonl"),
        linking.write_linking_jsonl(result, items),
    )
    n_clusters = len(set(result.assignment.values()))
    print(
        f"linked {len(items)} items into {n_clusters} clusters "
        f"({len(result.identified)} identified, {len(result.conflicts)} conflicts) "
        f"at threshold {threshold:g}"
    )
    if result.conflicts:
        for label, names in result.conflicts:
            log.warning("cluster %s captured several knowns: %s", label, ", ".join(names))
    return 0


def _parse_thresholds(raw) -> list[float]:
    if raw is None:
        return []
    if isinstance(raw, str):
        try:
            return [float(tok) for tok in raw.split(",") if tok.strip()]
        except ValueError as exc:
            raise core.TapelinkError(f"bad threshold list: {exc}") from None
    return [float(v) for v in raw]


def _load_regions(args, config: dict):
    manifest_path = _cfg(config, "paths", "manifest", args.manifest, None)
    if manifest_path is None:
        return None
    manifest = core.read_manifest(_read_text(manifest_path))
    regions = manifest.scoring_regions()
    if not regions:
        return None
    return regions


def _cmd_sweep(args, config: dict) -> int:
    model_path = _cfg(config, "paths", "model", args.model, None)
    hyp_path = _cfg(config, "paths", "hypothesis_rttm", args.hyp_rttm, None)
    ref_path = _cfg(config, "paths", "reference_rttm", args.ref_rttm, None)
    if model_path is None or hyp_path is None or ref_path is None:
        raise core.TapelinkError("sweep needs --model, --hyp-rttm and --ref-rttm")
    thresholds = _parse_thresholds(
        args.thresholds if args.thresholds is not None
        else _cfg(config, "linking", "sweep", None, None)
    )
    if not thresholds:
        raise core.TapelinkError("sweep needs --thresholds (comma-separated)")
    collar = float(_cfg(config, "metrics", "collar", args.collar, 0.0))

    model, params = plda.read_plda(_read_bytes(model_path))
    segments = core.parse_rttm(_read_text(hyp_path))
    reference = core.parse_rttm(_read_text(ref_path))
    regions = _load_regions(args, config)
    items = _load_items(args, config, params, segments)
    scorer = plda.prepare_scorer(model)
    matrix = _build_matrix(args, config, scorer, items)

    context = metrics.SweepContext(
        matrix=matrix,
        items=items,
        hypothesis=segments,
        reference=reference,
        scoring_regions=regions,
        collar=collar,
    )
    points = metrics.sweep_thresholds(context, thresholds)

    # Stage-1 labels namespaced per tape give the no-linking baseline.
    baseline_segments = [
        core.Segment(s.tape_id, s.onset, s.duration, f"{s.tape_id}/{s.label}")
        for s in segments
    ]
    baseline = metrics.compute_der(reference, baseline_segments, regions, collar=collar)

    csv_path, svg_path = report.write_report(
        points, args.out, baseline_der=baseline.der
    )
    print(f"wrote {csv_path} and {svg_path} (baseline DER {baseline.der:.4f})")
    try:
        cross_t, cross_i = metrics.equal_impurity_point(points)
        print(f"equal impurity {cross_i:.4f} at threshold {cross_t:.4f}")
    except metrics.MetricsError as exc:
        print(f"equal impurity: {exc}")
    return 0


def _cmd_eval(args, config: dict) -> int:
    ref_path = _cfg(config, "paths", "reference_rttm", args.ref_rttm, None)
    hyp_path = _cfg(config, "paths", "hypothesis_rttm", args.hyp_rttm, None)
    if ref_path is None or hyp_path is None:
        raise core.TapelinkError("eval needs --ref-rttm and --hyp-rttm")
    collar = float(_cfg(config, "metrics", "collar", args.collar, 0.0))

    reference = core.parse_rttm(_read_text(ref_path))
    hypothesis = core.parse_rttm(_read_text(hyp_path))
    regions = _load_regions(args, config)

    der = metrics.compute_der(reference, hypothesis, regions, collar=collar)
    speaker, cluster = metrics.compute_impurities(reference, hypothesis, regions)
    payload = json.dumps(
        {
            "missed": der.missed,
            "false_alarm": der.false_alarm,
            "confusion": der.confusion,
            "total_reference": der.total_reference,
            "der": der.der,
            "speaker_impurity": speaker,
            "cluster_impurity": cluster,
        },
        sort_keys=True,
        indent=2,
    )
    if args.out:
        _write(args.out, payload + "\n")
        print(f"wrote {args.out}")
    else:
        print(payload)
    return 0


def _cmd_report(args, config: dict) -> int:
    points = report.read_report_csv(args.csv)
    baseline = args.baseline_der
    report.render_sweep_figure(points, args.svg_out, baseline_der=baseline)
    print(f"wrote {args.svg_out}")
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tapelink", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")

    p = sub.add_parser("synth", help="generate a synthetic archive")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-tapes", dest="n_tapes", type=int)
    p.add_argument("--n-speakers", dest="n_speakers", type=int)
    p.add_argument("--recurring-speakers", dest="recurring_speakers", type=int)
    p.add_argument("--known-speakers", dest="known_speakers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--tape-duration-mean", dest="tape_duration_mean", type=float)
    p.add_argument("--tape-duration-std", dest="tape_duration_std", type=float)
    p.add_argument("--segments-min", dest="segments_min", type=int)
    p.add_argument("--segments-max", dest="segments_max", type=int)
    p.add_argument("--sigma-b-scale", dest="sigma_b_scale", type=float)
    p.add_argument("--sigma-w-scale", dest="sigma_w_scale", type=float)
    p.add_argument("--split-prob", dest="stage1_split_prob", type=float)
    p.add_argument("--split-minority", dest="stage1_split_minority", type=float)
    p.add_argument("--label-noise", dest="stage1_label_noise", type=float)
    p.add_argument("--annotated-fraction", dest="annotated_fraction", type=float)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-plda", help="fit the scoring model on labelled vectors")
    common(p)
    p.add_argument("--train-evec", help="EVEC1 with <speaker>/<utterance> ids")
    p.add_argument("--iterations", type=int)
    p.add_argument("--model-out", required=True)
    p.set_defaults(func=_cmd_train_plda)

    def linking_options(p):
        p.add_argument("--hyp-rttm", help="stage-1 diarization RTTM")
        p.add_argument("--evec", help="per-segment embeddings, RTTM line order")
        p.add_argument("--known-evec", help="known-speaker enrollments")
        p.add_argument("--model", help="PLDA1 model file")
        p.add_argument("--min-duration", type=float, help="pseudo-speaker floor, s")
        p.add_argument("--block-size", type=int)
        p.add_argument("--backing", choices=["auto", "memory", "disk"])
        p.add_argument("--memory-budget", type=int, help="bytes before disk spill")
        p.add_argument("--matrix-out", help="condensed matrix path (disk backing)")
        p.add_argument("--threads", type=int, help="scoring threads (default: all cores)")

    p = sub.add_parser("link", help="cluster pseudo-speakers across tapes")
    common(p)
    linking_options(p)
    p.add_argument("--threshold", type=float, help="linking threshold (-llr)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_link)

    p = sub.add_parser("sweep", help="link and score at several thresholds")
    common(p)
    linking_options(p)
    p.add_argument("--ref-rttm", help="reference RTTM")
    p.add_argument("--manifest", help="manifest JSONL with annotated regions")
    p.add_argument("--collar", type=float)
    p.add_argument("--thresholds", help="comma-separated ascending list")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("eval", help="score a hypothesis RTTM against a reference")
    common(p)
    p.add_argument("--ref-rttm")
    p.add_argument("--hyp-rttm")
    p.add_argument("--manifest")
    p.add_argument("--collar", type=float)
    p.add_argument("--out", help="write the JSON here instead of stdout")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="re-render figures from a sweep CSV")
    common(p)
    p.add_argument("--csv", required=True)
    p.add_argument("--svg-out", required=True)
    p.add_argument("--baseline-der", type=float)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args, _load_config(args.config))
    except core.TapelinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
