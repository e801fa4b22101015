"""Cross-tape speaker linking and evaluation for longitudinal audio archives."""

from .core import (
    ArchiveManifest,
    Embedding,
    EvecError,
    ManifestEntry,
    ManifestError,
    PseudoSpeaker,
    RttmError,
    Segment,
    TapelinkError,
    emit_rttm,
    merge_pseudo_speakers,
    parse_rttm,
    read_evec,
    read_manifest,
    write_evec,
    write_manifest,
)
from .linking import (
    CondensedMatrix,
    LinkingError,
    LinkingResult,
    apply_linking,
    build_similarity,
    brute_force_cluster,
    complete_linkage_cluster,
    cut_merges,
    resolve_identities,
)
from .metrics import (
    DerBreakdown,
    ImpurityPoint,
    MetricsError,
    OverlapStats,
    SweepContext,
    compute_der,
    compute_impurities,
    equal_impurity_point,
    map_speakers_optimal,
    overlap_matrix,
    sweep_thresholds,
)
from .plda import (
    FastScorer,
    PldaError,
    PldaModel,
    PreprocessParams,
    apply_preprocess,
    fit_plda,
    fit_preprocess,
    marginal_loglik,
    prepare_scorer,
    read_plda,
    score_pair,
    write_plda,
)
from .report import read_report_csv, render_sweep_figure, write_report
from .synthgen import (
    SynthArchive,
    SynthConfig,
    SynthError,
    generate_archive,
    inject_stage1_errors,
    write_archive,
)

__version__ = "0.1.0"
