"""Verification backend: WCCN, LDA, Gaussian PLDA and EER."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import formats
from .errors import (
    CorruptFile,
    DataError,
    DegenerateClasses,
    DimMismatch,
    EmptyPopulation,
    SingularCovariance,
)

logger = logging.getLogger(__name__)

REG_SCALE = 1e-6
REG_ABS_FLOOR = 1e-12


class LdaDimensionWarning(UserWarning):
    """Requested LDA dimension exceeds the rank of the between-class scatter."""


def regularize(mat: np.ndarray) -> np.ndarray:
    d = mat.shape[0]
    lam = max(REG_SCALE * float(np.trace(mat)) / d, REG_ABS_FLOOR)
    return mat + lam * np.eye(d)


def _class_groups(vectors, labels, min_per_class=2):
    X = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise DimMismatch("vectors must be N x D with one label per row")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DegenerateClasses("need at least two classes")
    groups = [X[labels == c] for c in classes]
    if min(len(g) for g in groups) < min_per_class:
        raise DegenerateClasses(f"every class needs >= {min_per_class} vectors")
    return X, groups


def within_class_covariance(groups) -> np.ndarray:
    """Unweighted average of the per-class (population) covariances."""
    d = groups[0].shape[1]
    acc = np.zeros((d, d))
    for g in groups:
        dev = g - g.mean(axis=0)
        acc += dev.T @ dev / len(g)
    return acc / len(groups)


# ---------------------------------------------------------------------------
# linear transforms


@dataclass
class LinearTransform:
    matrix: np.ndarray  # out_dim x in_dim
    mean: np.ndarray  # in_dim
    kind: str  # "wccn", "lda" or "chain"

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]


def apply_transform(t: LinearTransform, v) -> np.ndarray:
    """``matrix @ (v - mean)`` for a vector or for each row of a matrix."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != t.in_dim:
        raise DimMismatch(f"transform expects {t.in_dim} dims, got {v.shape[-1]}")
    return (v - t.mean) @ t.matrix.T


def compose(first: LinearTransform, second: LinearTransform) -> LinearTransform:
    """Single transform equal to applying ``first`` then ``second``.

    Requires ``first.matrix`` to have full row rank (true for WCCN and LDA).
    """
    if second.in_dim != first.out_dim:
        raise DimMismatch("transforms do not chain")
    matrix = second.matrix @ first.matrix
    shift = np.linalg.lstsq(first.matrix, second.mean, rcond=None)[0]
    return LinearTransform(matrix, first.mean + shift, "chain")


def fit_wccn(vectors, labels) -> LinearTransform:
    X, groups = _class_groups(vectors, labels)
    w = regularize(within_class_covariance(groups))
    w_inv = np.linalg.inv(w)
    w_inv = 0.5 * (w_inv + w_inv.T)
    try:
        chol = np.linalg.cholesky(w_inv)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("within-class covariance is not positive definite") from exc
    # B^T B = W^-1 with B = L^T
    return LinearTransform(chol.T, X.mean(axis=0), "wccn")


def fit_lda(vectors, labels, out_dim: int = 150) -> LinearTransform:
    """Fisher LDA via the generalized symmetric eigenproblem ``Sb v = l Sw v``.

    Output rows are Sw-orthonormal. The dimension is clipped to
    ``min(out_dim, n_classes - 1, D)`` with an LdaDimensionWarning.
    """
    if out_dim < 1:
        raise ValueError("out_dim must be >= 1")
    X, groups = _class_groups(vectors, labels)
    n, d = X.shape
    mu = X.mean(axis=0)
    sw = regularize(within_class_covariance(groups))
    sb = np.zeros((d, d))
    for g in groups:
        diff = g.mean(axis=0) - mu
        sb += (len(g) / n) * np.outer(diff, diff)
    effective = min(out_dim, len(groups) - 1, d)
    if effective < out_dim:
        warnings.warn(
            f"LDA dimension clipped from {out_dim} to {effective} (classes={len(groups)}, dim={d})",
            LdaDimensionWarning,
            stacklevel=2,
        )
    evals, evecs = scipy.linalg.eigh(sb, sw)
    order = np.argsort(evals)[::-1][:effective]
    v = evecs[:, order]
    # deterministic sign: largest-magnitude entry positive
    signs = np.sign(v[np.argmax(np.abs(v), axis=0), np.arange(v.shape[1])])
    v = v * np.where(signs == 0, 1.0, signs)
    return LinearTransform(v.T, mu, "lda")


def length_normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


# ---------------------------------------------------------------------------
# Gaussian PLDA


@dataclass
class PldaModel:
    mu: np.ndarray  # D
    F: np.ndarray  # D x q
    Sigma: np.ndarray  # D x D
    iterations_run: int = 0
    log_likelihoods: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def latent_dim(self) -> int:
        return self.F.shape[1]

    def to_bytes(self) -> bytes:
        return (
            formats.MAGIC_PLDA
            + formats.pack_u32(self.dim, self.latent_dim)
            + formats.pack_f32(self.mu)
            + formats.pack_f32(self.F)
            + formats.pack_f32(self.Sigma)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "PldaModel":
        r = formats.Reader(data, formats.MAGIC_PLDA)
        d, q = r.u32(), r.u32()
        if d == 0 or q > d:
            raise CorruptFile(f"invalid PLDA dims D={d} q={q}")
        mu = r.f32(d)
        F = r.f32(d * q).reshape(d, q)
        sigma = r.f32(d * d).reshape(d, d)
        r.finish()
        return cls(mu, F, sigma)


def _logdet(mat) -> float:
    sign, val = np.linalg.slogdet(mat)
    if sign <= 0:
        raise SingularCovariance("matrix is not positive definite")
    return float(val)


def _ensure_pd(sigma: np.ndarray) -> np.ndarray:
    sigma = 0.5 * (sigma + sigma.T)
    d = sigma.shape[0]
    floor = 1e-10 * max(float(np.trace(sigma)) / d, REG_ABS_FLOOR)
    if np.linalg.eigvalsh(sigma)[0] <= floor:
        sigma = regularize(sigma)
        if np.linalg.eigvalsh(sigma)[0] <= 0:
            raise SingularCovariance("residual covariance stays singular after regularization")
    return sigma


@dataclass
class _PldaStats:
    counts: np.ndarray  # per class
    sums: np.ndarray  # per class, centred
    scatter: np.ndarray  # sum of y y^T
    n: int


def _plda_stats(groups, mu) -> _PldaStats:
    counts = np.array([len(g) for g in groups])
    sums = np.stack([(g - mu).sum(axis=0) for g in groups])
    scatter = sum((g - mu).T @ (g - mu) for g in groups)
    return _PldaStats(counts, sums, scatter, int(counts.sum()))


def _posteriors(F, sigma_inv, stats):
    """Per-class posterior precision inverses (cached by class size) and means."""
    q = F.shape[1]
    ftsi = F.T @ sigma_inv
    ftsif = ftsi @ F
    cache = {}
    for n in np.unique(stats.counts):
        p = np.eye(q) + n * ftsif
        cache[int(n)] = (np.linalg.inv(p), _logdet(p) if q else 0.0)
    b = stats.sums @ ftsi.T  # C x q
    eh = np.stack([cache[int(n)][0] @ b[i] for i, n in enumerate(stats.counts)]) if q else np.zeros((len(b), 0))
    return cache, b, eh


def plda_log_likelihood(F, sigma, stats: _PldaStats) -> float:
    """Marginal log-likelihood of all data with the identity variables integrated out."""
    d = sigma.shape[0]
    sigma_inv = np.linalg.inv(sigma)
    cache, b, eh = _posteriors(F, sigma_inv, stats)
    total = -0.5 * stats.n * (d * np.log(2 * np.pi) + _logdet(sigma))
    total -= 0.5 * float(np.sum(sigma_inv * stats.scatter))
    for i, n in enumerate(stats.counts):
        total -= 0.5 * cache[int(n)][1]
        total += 0.5 * float(b[i] @ eh[i])
    return total


def fit_gplda(vectors, labels, latent_dim: int, iterations: int = 20) -> PldaModel:
    """EM for ``x = mu + F h + eps`` with ``h ~ N(0, I)`` and ``eps ~ N(0, Sigma)``.

    ``log_likelihoods`` holds the marginal data log-likelihood at the initial
    point and after every iteration; EM makes it non-decreasing.
    """
    X, groups = _class_groups(vectors, labels)
    d = X.shape[1]
    if not 0 <= latent_dim <= d:
        raise DimMismatch(f"latent_dim must lie in [0, {d}]")
    mu = X.mean(axis=0)
    stats = _plda_stats(groups, mu)

    sigma = _ensure_pd(within_class_covariance(groups) * 1.0)
    means = np.stack([g.mean(axis=0) for g in groups]) - mu
    evals, evecs = np.linalg.eigh(means.T @ means / len(groups))
    top = np.argsort(evals)[::-1][:latent_dim]
    F = evecs[:, top] * np.sqrt(np.maximum(evals[top], 0.0))

    model = PldaModel(mu, F, sigma)
    model.log_likelihoods.append(plda_log_likelihood(F, sigma, stats))
    for it in range(iterations):
        sigma_inv = np.linalg.inv(sigma)
        cache, _, eh = _posteriors(F, sigma_inv, stats)
        if latent_dim:
            acc_yh = stats.sums.T @ eh  # D x q
            acc_hh = sum(n * (cache[int(n)][0] + np.outer(eh[i], eh[i])) for i, n in enumerate(stats.counts))
            F = np.linalg.solve(acc_hh.T, acc_yh.T).T
            sigma = (stats.scatter - F @ acc_yh.T) / stats.n
        else:
            sigma = stats.scatter / stats.n
        sigma = _ensure_pd(sigma)
        model.log_likelihoods.append(plda_log_likelihood(F, sigma, stats))
        logger.debug("PLDA EM iteration %d: loglik %.6f", it + 1, model.log_likelihoods[-1])
    model.F, model.Sigma, model.iterations_run = F, sigma, iterations
    return model


@dataclass
class _Scorer:
    mu: np.ndarray
    total_inv: np.ndarray
    sum_inv: np.ndarray  # (Sigma + 2 F F^T)^-1
    diff_inv: np.ndarray  # Sigma^-1
    const: float
    trivial: bool


def _scorer(model: PldaModel) -> _Scorer:
    between = model.F @ model.F.T
    total = model.Sigma + between
    with_shared = model.Sigma + 2.0 * between
    const = -0.5 * (_logdet(with_shared) + _logdet(model.Sigma) - 2.0 * _logdet(total))
    return _Scorer(
        model.mu,
        np.linalg.inv(total),
        np.linalg.inv(with_shared),
        np.linalg.inv(model.Sigma),
        const,
        model.latent_dim == 0,
    )


def _quad(x, m):
    return np.sum((x @ m) * x, axis=-1)


def score_gplda_batch(model: PldaModel, enroll, test, scorer: _Scorer | None = None) -> np.ndarray:
    """Same-identity vs different-identity log-likelihood ratio, row-wise."""
    e = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    t = np.atleast_2d(np.asarray(test, dtype=np.float64))
    if e.shape[-1] != model.dim or t.shape[-1] != model.dim:
        raise DimMismatch(f"PLDA model expects {model.dim} dims")
    if model.latent_dim == 0:
        return np.zeros(np.broadcast_shapes(e.shape, t.shape)[0])
    s = scorer or _scorer(model)
    e = e - s.mu
    t = t - s.mu
    # joint covariance [[T, B], [B, T]] block-diagonalises on (e+t, e-t)
    joint = 0.5 * (_quad(e + t, s.sum_inv) + _quad(e - t, s.diff_inv))
    marginal = _quad(e, s.total_inv) + _quad(t, s.total_inv)
    return s.const - 0.5 * (joint - marginal)


def score_gplda(model: PldaModel, enroll, test) -> float:
    return float(score_gplda_batch(model, enroll, test)[0])


# ---------------------------------------------------------------------------
# full backend


@dataclass
class VerificationBackend:
    """WCCN -> LDA -> length normalisation -> GPLDA."""

    wccn: LinearTransform
    lda: LinearTransform
    plda: PldaModel

    def project(self, vectors) -> np.ndarray:
        return length_normalize(apply_transform(self.lda, apply_transform(self.wccn, vectors)))

    def score(self, enroll, test) -> np.ndarray:
        return score_gplda_batch(self.plda, self.project(enroll), self.project(test))


def fit_backend(vectors, labels, lda_dim: int = 150, latent_dim: int | None = None, iterations: int = 20) -> VerificationBackend:
    wccn = fit_wccn(vectors, labels)
    whitened = apply_transform(wccn, vectors)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LdaDimensionWarning)
        lda = fit_lda(whitened, labels, lda_dim)
    if lda.out_dim < lda_dim:
        logger.info("LDA dimension clipped to %d", lda.out_dim)
    projected = length_normalize(apply_transform(lda, whitened))
    if latent_dim is None:
        latent_dim = min(100, max(lda.out_dim - 1, 0))
    plda = fit_gplda(projected, labels, min(latent_dim, lda.out_dim), iterations)
    return VerificationBackend(wccn, lda, plda)


# ---------------------------------------------------------------------------
# error rates


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise EmptyPopulation("need at least one genuine and one impostor score")
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise DataError("scores must be finite")


def det_curve(scores: ScoreSet):
    """Operating points at -inf, every midpoint between distinct scores, and +inf.

    Returns ``(thresholds, far, frr)`` ordered by increasing threshold, with
    ``FAR(t) = P(impostor >= t)`` and ``FRR(t) = P(genuine < t)``.
    """
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    distinct = np.unique(np.concatenate([gen, imp]))
    thresholds = np.concatenate([[-np.inf], (distinct[:-1] + distinct[1:]) / 2.0, [np.inf]])
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    frr = np.searchsorted(gen, thresholds, side="left") / gen.size
    return thresholds, far, frr


def det_points(scores: ScoreSet) -> list:
    _, far, frr = det_curve(scores)
    return list(zip(far.tolist(), frr.tolist()))


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and the threshold where FAR and FRR cross.

    The crossing is located between adjacent operating points and linearly
    interpolated.
    """
    thresholds, far, frr = det_curve(scores)
    diff = far - frr
    j = int(np.argmax(diff <= 0))
    if diff[j] == 0:
        return float(far[j]), _finite_threshold(thresholds[j], thresholds[j], scores)
    alpha = diff[j - 1] / (diff[j - 1] - diff[j])
    eer = far[j - 1] + alpha * (far[j] - far[j - 1])
    lo, hi = thresholds[j - 1], thresholds[j]
    if np.isfinite(lo) and np.isfinite(hi):
        thr = lo + alpha * (hi - lo)
    else:
        thr = _finite_threshold(lo, hi, scores)
    return float(eer), float(thr)


def _finite_threshold(lo, hi, scores):
    for t in (lo, hi):
        if np.isfinite(t):
            return float(t)
    return float(np.concatenate([scores.genuine, scores.impostor])[0])


# ---------------------------------------------------------------------------
# trial / score files


@dataclass
class Trial:
    enroll: str
    test: str
    genuine: bool


def read_trials(path) -> list:
    trials = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["enroll_utt", "test_utt", "label"]:
            raise DataError(f"{path}: header must be enroll_utt,test_utt,label")
        for row in reader:
            label = row["label"]
            if label not in ("genuine", "impostor"):
                raise DataError(f"{path}: bad label {label!r}")
            trials.append(Trial(row["enroll_utt"], row["test_utt"], label == "genuine"))
    return trials


def write_trials(path, trials) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["enroll_utt", "test_utt", "label"])
        for t in trials:
            w.writerow([t.enroll, t.test, "genuine" if t.genuine else "impostor"])


def write_scores(path, trials, llrs) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["enroll_utt", "test_utt", "label", "llr"])
        for t, s in zip(trials, llrs):
            w.writerow([t.enroll, t.test, "genuine" if t.genuine else "impostor", f"{float(s):.9g}"])
