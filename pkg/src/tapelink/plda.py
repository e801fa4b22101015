"""Two-covariance Gaussian speaker model.

An embedding x of speaker s is modelled as x = mu + y_s + e with
y_s ~ N(0, sigma_b) shared by all of the speaker's recordings and
e ~ N(0, sigma_w) independent per recording. Training is maximum
likelihood via EM with mu fixed at zero (embeddings are centered by the
preprocessing step). Scoring computes the log-likelihood ratio of the
same-speaker hypothesis against independence.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.stats import multivariate_normal

from .core import Embedding, TapelinkError

LOG_2PI = float(np.log(2.0 * np.pi))


class PldaError(TapelinkError):
    """Invalid model, degenerate covariance, or malformed PLDA1 payload."""


def _as_matrix(vectors) -> np.ndarray:
    """Stack Embeddings or array-likes into an (n, d) float64 matrix."""
    if isinstance(vectors, np.ndarray):
        mat = np.asarray(vectors, dtype=np.float64)
        if mat.ndim == 1:
            mat = mat[None, :]
        return mat
    rows = [v.vector if isinstance(v, Embedding) else np.asarray(v, np.float64) for v in vectors]
    if not rows:
        raise PldaError("no vectors given")
    dims = {r.shape[-1] for r in rows}
    if len(dims) != 1:
        raise PldaError(f"mixed vector dimensions: {sorted(dims)}")
    return np.asarray(rows, dtype=np.float64)


def _as_vector(x) -> np.ndarray:
    if isinstance(x, Embedding):
        return x.vector
    vec = np.asarray(x, dtype=np.float64)
    if vec.ndim != 1:
        raise PldaError(f"expected a 1-D vector, got shape {vec.shape}")
    return vec


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# Preprocessing: mean subtraction + length normalization

@dataclass(frozen=True, eq=False)
class PreprocessParams:
    mean: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _readonly(self.mean))


def fit_preprocess(vectors) -> PreprocessParams:
    """Estimate the centering mean from training vectors."""
    mat = _as_matrix(vectors)
    if mat.shape[0] == 0:
        raise PldaError("cannot fit preprocessing on zero vectors")
    return PreprocessParams(mean=mat.mean(axis=0))


def apply_preprocess(params: PreprocessParams, emb: Embedding) -> Embedding:
    """Center then scale to unit length. Zero norm after centering is an error."""
    out = apply_preprocess_rows(params, emb.vector[None, :])
    return Embedding(emb.id, out[0])


def apply_preprocess_rows(params: PreprocessParams, mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    if mat.shape[-1] != params.mean.shape[0]:
        raise PldaError(
            f"vector dim {mat.shape[-1]} does not match preprocessing dim "
            f"{params.mean.shape[0]}"
        )
    centered = mat - params.mean
    norms = np.linalg.norm(centered, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise PldaError("zero-norm vector after centering")
    return centered / norms


# ---------------------------------------------------------------------------
# Model

@dataclass(frozen=True, eq=False)
class PldaModel:
    mu: np.ndarray
    sigma_b: np.ndarray
    sigma_w: np.ndarray
    loglik_history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        mu = _readonly(self.mu)
        sb = _readonly(self.sigma_b)
        sw = _readonly(self.sigma_w)
        d = mu.shape[0]
        if mu.ndim != 1 or sb.shape != (d, d) or sw.shape != (d, d):
            raise PldaError(
                f"inconsistent shapes: mu {mu.shape}, sigma_b {sb.shape}, "
                f"sigma_w {sw.shape}"
            )
        for name, mat in (("sigma_b", sb), ("sigma_w", sw)):
            if not np.all(np.isfinite(mat)):
                raise PldaError(f"{name} contains non-finite values")
            if not np.array_equal(mat, mat.T):
                if np.max(np.abs(mat - mat.T)) > 1e-10 * max(1.0, np.max(np.abs(mat))):
                    raise PldaError(f"{name} is not symmetric")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma_b", sb)
        object.__setattr__(self, "sigma_w", sw)

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])


def _group_by_count(by_speaker: dict) -> dict[int, np.ndarray]:
    """Map observation count n to the (speakers_with_n, d) matrix of means."""
    means: dict[int, list[np.ndarray]] = {}
    for name in sorted(by_speaker):
        mat = _as_matrix(by_speaker[name])
        if mat.shape[0] == 0:
            raise PldaError(f"speaker {name!r} has no vectors")
        means.setdefault(mat.shape[0], []).append(mat.mean(axis=0))
    return {n: np.asarray(rows) for n, rows in means.items()}


def marginal_loglik(sigma_b: np.ndarray, sigma_w: np.ndarray, by_speaker: dict) -> float:
    """Exact log-likelihood of the data under the model, integrating out y.

    For a speaker with n observations, mean m and within scatter S:
      -1/2 [ n*d*log(2pi) + (n-1) logdet(sigma_w) + logdet(sigma_w + n sigma_b)
             + tr(sigma_w^-1 S) + m' (sigma_b + sigma_w/n)^-1 m ]
    """
    d = sigma_w.shape[0]
    cho_w = sla.cho_factor(sigma_w, lower=True)
    logdet_w = 2.0 * float(np.sum(np.log(np.diag(cho_w[0]))))

    total = 0.0
    scatter = np.zeros((d, d))
    for name in sorted(by_speaker):
        mat = _as_matrix(by_speaker[name])
        n = mat.shape[0]
        mean = mat.mean(axis=0)
        centered = mat - mean
        scatter += centered.T @ centered
        cov_mean = sigma_b + sigma_w / n
        cho_m = sla.cho_factor(cov_mean, lower=True)
        logdet_m = 2.0 * float(np.sum(np.log(np.diag(cho_m[0]))))
        quad = float(mean @ sla.cho_solve(cho_m, mean))
        # logdet(sigma_w + n sigma_b) = logdet(sigma_b + sigma_w/n) + d log n
        total += -0.5 * (
            n * d * LOG_2PI
            + (n - 1) * logdet_w
            + logdet_m
            + d * np.log(n)
            + quad
        )
    total += -0.5 * float(np.trace(sla.cho_solve(cho_w, scatter)))
    return total


def fit_plda(by_speaker: dict, iterations: int = 10) -> PldaModel:
    """Fit sigma_b and sigma_w by EM on speaker-labelled vectors.

    ``by_speaker`` maps a speaker key to that speaker's vectors (a list of
    Embeddings or an (n, d) array). Both covariances start at half the
    pooled sample covariance plus a small ridge; each M-step re-estimates
    them jointly from the posterior of the speaker identity variables.
    The per-iteration marginal log-likelihood is recorded on the returned
    model and checked to be non-decreasing.
    """
    if iterations < 0:
        raise PldaError("iterations must be >= 0")
    if len(by_speaker) < 2:
        raise PldaError(f"need at least 2 speakers, got {len(by_speaker)}")

    data = {name: _as_matrix(vecs) for name, vecs in sorted(by_speaker.items())}
    dims = {mat.shape[1] for mat in data.values()}
    if len(dims) != 1:
        raise PldaError(f"mixed vector dimensions across speakers: {sorted(dims)}")
    d = dims.pop()
    for name, mat in data.items():
        if mat.shape[0] == 0:
            raise PldaError(f"speaker {name!r} has no vectors")
        if not np.all(np.isfinite(mat)):
            raise PldaError(f"speaker {name!r} has non-finite vectors")

    stacked = np.concatenate(list(data.values()), axis=0)
    n_total = stacked.shape[0]
    n_speakers = len(data)
    second_moment = stacked.T @ stacked

    pooled_mean = stacked.mean(axis=0)
    pooled_cov = second_moment / n_total - np.outer(pooled_mean, pooled_mean)
    ridge = 1e-6 * float(np.trace(pooled_cov)) / d
    init = 0.5 * pooled_cov + ridge * np.eye(d)
    sigma_b = init.copy()
    sigma_w = init.copy()

    groups: dict[int, np.ndarray] = _group_by_count(data)

    history = [marginal_loglik(sigma_b, sigma_w, data)]
    eye = np.eye(d)
    for it in range(iterations):
        try:
            b_inv = sla.cho_solve(sla.cho_factor(sigma_b, lower=True), eye)
            w_inv = sla.cho_solve(sla.cho_factor(sigma_w, lower=True), eye)
        except np.linalg.LinAlgError as exc:
            raise PldaError(f"singular covariance at iteration {it}: {exc}") from None

        acc_b = np.zeros((d, d))
        acc_w = np.zeros((d, d))
        for n, means in groups.items():
            count = means.shape[0]
            lam = b_inv + n * w_inv
            lam_inv = sla.cho_solve(sla.cho_factor(lam, lower=True), eye)
            sums = n * means
            y_hat = sums @ w_inv @ lam_inv
            yy = y_hat.T @ y_hat
            cross = y_hat.T @ sums
            acc_b += count * lam_inv + yy
            acc_w += n * (yy + count * lam_inv) - (cross + cross.T)

        sigma_b = acc_b / n_speakers
        sigma_w = (second_moment + acc_w) / n_total
        sigma_b = 0.5 * (sigma_b + sigma_b.T)
        sigma_w = 0.5 * (sigma_w + sigma_w.T)
        sigma_w, clamped = _ensure_pd(sigma_w, sigma_b, f"iteration {it}")

        ll = marginal_loglik(sigma_b, sigma_w, data)
        if not np.isfinite(ll):
            raise PldaError(f"non-finite log-likelihood at iteration {it}")
        # Exact EM never decreases the likelihood; the eigenvalue clamp is
        # outside EM, so skip the check on clamped iterations.
        if not clamped and ll < history[-1] - 1e-8 * abs(history[-1]):
            raise PldaError(
                f"log-likelihood decreased at iteration {it}: "
                f"{history[-1]:.10g} -> {ll:.10g}"
            )
        history.append(ll)

    return PldaModel(
        mu=np.zeros(d),
        sigma_b=sigma_b,
        sigma_w=sigma_w,
        loglik_history=tuple(history),
    )


def _ensure_pd(
    sigma_w: np.ndarray, sigma_b: np.ndarray, where: str
) -> tuple[np.ndarray, bool]:
    """Clamp sigma_w eigenvalues at a floor tied to the total covariance scale.

    Keeps scoring defined when the within covariance collapses (for example
    identical vectors for every speaker). Returns (matrix, clamped)."""
    try:
        sla.cholesky(sigma_w, lower=True)
        return sigma_w, False
    except np.linalg.LinAlgError:
        pass
    d = sigma_w.shape[0]
    floor = 1e-8 * float(np.trace(sigma_b + sigma_w)) / d
    vals, vecs = np.linalg.eigh(sigma_w)
    if not np.all(np.isfinite(vals)) or floor <= 0.0:
        raise PldaError(f"within covariance is unrecoverable at {where}")
    warnings.warn(
        f"clamping {int(np.sum(vals < floor))} within-covariance eigenvalues "
        f"to {floor:.3e} at {where}",
        RuntimeWarning,
        stacklevel=3,
    )
    vals = np.maximum(vals, floor)
    fixed = (vecs * vals) @ vecs.T
    return 0.5 * (fixed + fixed.T), True


# ---------------------------------------------------------------------------
# Scoring

def score_pair(model: PldaModel, x1, x2) -> float:
    """Log-likelihood ratio for "same speaker" from joint and marginal
    Gaussian densities. Reference implementation; use a FastScorer in bulk.
    """
    v1 = _as_vector(x1)
    v2 = _as_vector(x2)
    d = model.dim
    if v1.shape[0] != d or v2.shape[0] != d:
        raise PldaError(
            f"vector dims ({v1.shape[0]}, {v2.shape[0]}) do not match model dim {d}"
        )
    total = model.sigma_b + model.sigma_w
    joint = np.block([[total, model.sigma_b], [model.sigma_b, total]])
    mu2 = np.concatenate([model.mu, model.mu])
    try:
        lp_joint = float(
            multivariate_normal(mean=mu2, cov=joint, allow_singular=False).logpdf(
                np.concatenate([v1, v2])
            )
        )
        marginal = multivariate_normal(mean=model.mu, cov=total, allow_singular=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise PldaError(f"covariance is not positive definite: {exc}") from None
    return lp_joint - float(marginal.logpdf(v1)) - float(marginal.logpdf(v2))


@dataclass(frozen=True, eq=False)
class FastScorer:
    """Precomputed quadratic form for bulk LLR scoring.

    llr(x1, x2) = x1' p_self x1 + x2' p_self x2 + 2 x1' p_cross x2 + offset.
    All products run through fixed-order einsum so results are bit-identical
    regardless of how inputs are blocked.
    """

    p_self: np.ndarray
    p_cross: np.ndarray
    offset: float
    dim: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_self", _readonly(self.p_self))
        object.__setattr__(self, "p_cross", _readonly(self.p_cross))

    def _check(self, mat: np.ndarray) -> np.ndarray:
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim == 1:
            mat = mat[None, :]
        if mat.ndim != 2 or mat.shape[1] != self.dim:
            raise PldaError(f"expected (*, {self.dim}) vectors, got shape {mat.shape}")
        return mat

    def self_terms(self, mat: np.ndarray) -> np.ndarray:
        """x' p_self x per row."""
        mat = self._check(mat)
        return np.einsum("ij,jk,ik->i", mat, self.p_self, mat, optimize=False)

    def project(self, mat: np.ndarray) -> np.ndarray:
        """Rows mapped through p_cross; pair LLR cross term is 2 proj(x1).x2."""
        mat = self._check(mat)
        return np.einsum("ij,jk->ik", mat, self.p_cross, optimize=False)

    def score_block(self, block_x: np.ndarray, block_y: np.ndarray) -> np.ndarray:
        """LLR matrix between two blocks of row vectors."""
        block_x = self._check(block_x)
        block_y = self._check(block_y)
        cross = np.einsum(
            "ik,jk->ij", self.project(block_x), block_y, optimize=False
        )
        qx = self.self_terms(block_x)
        qy = self.self_terms(block_y)
        return ((2.0 * cross + qx[:, None]) + qy[None, :]) + self.offset


def prepare_scorer(model: PldaModel) -> FastScorer:
    """Reduce the joint-Gaussian LLR to a quadratic form.

    With T = sigma_b + sigma_w, the joint covariance [[T, B], [B, T]]
    block-diagonalizes over (x1+x2, x1-x2), giving
      p_self  = T^-1 / 2 - ((T+B)^-1 + (T-B)^-1) / 4
      p_cross = ((T-B)^-1 - (T+B)^-1) / 4
      offset  = logdet T - logdet(T+B)/2 - logdet(T-B)/2
    where T+B = sigma_w + 2 sigma_b and T-B = sigma_w.
    """
    d = model.dim
    total = model.sigma_b + model.sigma_w
    plus = model.sigma_w + 2.0 * model.sigma_b
    within, _ = _ensure_pd(model.sigma_w, model.sigma_b, "scorer preparation")
    eye = np.eye(d)

    inverses = {}
    logdets = {}
    for name, mat in (("T", total), ("T+B", plus), ("T-B", within)):
        try:
            chol = sla.cholesky(mat, lower=True)
        except np.linalg.LinAlgError:
            raise PldaError(f"{name} is not positive definite") from None
        inv = sla.cho_solve((chol, True), eye)
        inverses[name] = 0.5 * (inv + inv.T)
        logdets[name] = 2.0 * float(np.sum(np.log(np.diag(chol))))

    p_self = 0.5 * inverses["T"] - 0.25 * (inverses["T+B"] + inverses["T-B"])
    p_cross = 0.25 * (inverses["T-B"] - inverses["T+B"])
    offset = logdets["T"] - 0.5 * logdets["T+B"] - 0.5 * logdets["T-B"]
    return FastScorer(
        p_self=0.5 * (p_self + p_self.T),
        p_cross=0.5 * (p_cross + p_cross.T),
        offset=offset,
        dim=d,
    )


# ---------------------------------------------------------------------------
# PLDA1 serialization

_PLDA_MAGIC = b"PLDA1\n"


def write_plda(model: PldaModel, preprocess: PreprocessParams) -> bytes:
    """Serialize model plus preprocessing mean: magic, u32 dim, then
    float64 little-endian mu, sigma_b (row-major), sigma_w, mean."""
    d = model.dim
    if preprocess.mean.shape[0] != d:
        raise PldaError(
            f"preprocessing dim {preprocess.mean.shape[0]} does not match model dim {d}"
        )
    parts = [
        _PLDA_MAGIC,
        struct.pack("<I", d),
        model.mu.astype("<f8").tobytes(),
        np.ascontiguousarray(model.sigma_b, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.sigma_w, dtype="<f8").tobytes(),
        preprocess.mean.astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def read_plda(data: bytes) -> tuple[PldaModel, PreprocessParams]:
    if data[: len(_PLDA_MAGIC)] != _PLDA_MAGIC:
        raise PldaError("bad magic: not a PLDA1 payload")
    pos = len(_PLDA_MAGIC)
    if len(data) < pos + 4:
        raise PldaError("truncated header")
    (d,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if d == 0:
        raise PldaError("dimension must be positive")
    expected = pos + 8 * (d + d * d + d * d + d)
    if len(data) != expected:
        raise PldaError(f"payload is {len(data)} bytes, expected {expected} for dim {d}")

    def take(count: int) -> np.ndarray:
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        pos += 8 * count
        return arr.astype(np.float64)

    mu = take(d)
    sigma_b = take(d * d).reshape(d, d)
    sigma_w = take(d * d).reshape(d, d)
    mean = take(d)
    model = PldaModel(mu=mu, sigma_b=sigma_b, sigma_w=sigma_w)
    return model, PreprocessParams(mean=mean)
