"""
Score Service
Test-time OOD scoring functions, all oriented so that a higher score means more ID
"""
import logging
from typing import Callable, Dict

import numpy as np
from scipy import linalg, special
from sklearn.covariance import EmpiricalCovariance

from app.core.errors import (
    CovarianceError,
    DimensionMismatchError,
    EmptyInputError,
    NotOnSphereError,
)
from app.schemas.dataset import LabeledEmbeddingSet
from app.schemas.encoder import PrototypeBank
from app.schemas.scores import MisalignmentReport, ScoreKind
from app.schemas.sphere import as_points
from app.services.encoder_service import CeClassifier

logger = logging.getLogger(__name__)

SPHERE_TOLERANCE = 1e-6
COVARIANCE_RIDGE = 1e-6
POSTERIOR_TOLERANCE = 1e-12
DEFAULT_TAU_TEST = 0.05
DEFAULT_ENERGY_TAU = 1.0
DEFAULT_KNN_K = 50

# entries of the (batch x pool) distance block computed at once
_KNN_BLOCK_ENTRIES = 1 << 22


def _sphere_points(z, dim: int) -> np.ndarray:
    points = as_points(z)
    if points.shape[-1] != dim:
        raise DimensionMismatchError(f"expected dimension {dim}, got {points.shape[-1]}")
    norms = np.linalg.norm(points, axis=-1)
    if np.any(np.abs(norms - 1.0) > SPHERE_TOLERANCE):
        raise NotOnSphereError(f"embedding norm deviates from 1 by {float(np.max(np.abs(norms - 1.0))):.3g}")
    return points


def _scalar_or_array(value) -> float | np.ndarray:
    return float(value) if np.ndim(value) == 0 else value


def _check_tau(tau: float) -> None:
    if not tau > 0.0:
        raise ValueError(f"temperature must be positive, got {tau}")


def ink(bank: PrototypeBank, z, tau_test: float = DEFAULT_TAU_TEST) -> float | np.ndarray:
    """
    Intrinsic likelihood score tau * log sum_j exp(mu_j^T z / tau).

    Accepts a UnitVector, a (d,) point or an (n, d) batch.
    """
    _check_tau(tau_test)
    points = _sphere_points(z, bank.dim)
    value = tau_test * special.logsumexp(points @ bank.mus.T / tau_test, axis=-1)
    return _scalar_or_array(value)


def validate_priors(priors, num_classes: int) -> np.ndarray:
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != (num_classes,):
        raise DimensionMismatchError(f"expected {num_classes} priors, got shape {priors.shape}")
    if np.any(priors < 0.0):
        raise ValueError("priors must be nonnegative")
    if not np.any(priors > 0.0):
        raise ValueError("at least one prior must be positive")
    return priors


def ink_generalized(bank: PrototypeBank, priors, z, tau_test: float = DEFAULT_TAU_TEST) -> float | np.ndarray:
    """
    Prior-weighted score tau * log sum_j p(y=j) exp(mu_j^T z / tau).

    Zero-prior classes are dropped from the sum.
    """
    _check_tau(tau_test)
    priors = validate_priors(priors, bank.num_classes)
    points = _sphere_points(z, bank.dim)
    keep = priors > 0.0
    logits = points @ bank.mus[keep].T / tau_test
    value = tau_test * special.logsumexp(logits, axis=-1, b=priors[keep])
    return _scalar_or_array(value)


def energy_from_logits(logits, tau: float = DEFAULT_ENERGY_TAU) -> float | np.ndarray:
    """Negative free energy tau * log sum_j exp(f_j / tau)"""
    _check_tau(tau)
    logits = np.asarray(logits, dtype=np.float64)
    return _scalar_or_array(tau * special.logsumexp(logits / tau, axis=-1))


def energy(ce_model: CeClassifier, x, tau_test: float = DEFAULT_ENERGY_TAU) -> float | np.ndarray:
    return energy_from_logits(ce_model.logits(x), tau_test)


def max_posterior(bank: PrototypeBank, z, tau_test: float = DEFAULT_TAU_TEST) -> float | np.ndarray:
    """max_c softmax(mu_c^T z / tau) on the hyperspherical model"""
    _check_tau(tau_test)
    points = _sphere_points(z, bank.dim)
    posterior = special.softmax(points @ bank.mus.T / tau_test, axis=-1)
    return _scalar_or_array(np.max(posterior, axis=-1))


def msp_ce(ce_model: CeClassifier, x) -> float | np.ndarray:
    """Maximum softmax probability of the cross-entropy twin at temperature 1"""
    posterior = special.softmax(ce_model.logits(x), axis=-1)
    return _scalar_or_array(np.max(posterior, axis=-1))


class ScoreFunction:
    """
    A frozen scoring function.

    `consumes` says whether the score reads sphere embeddings or raw encoder inputs.
    """
    kind: ScoreKind
    consumes = "embedding"

    def score_batch(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score_one(self, point) -> float:
        return float(self.score_batch(np.asarray(as_points(point))[None, :])[0])

    @property
    def name(self) -> str:
        return self.kind.value


class InkScore(ScoreFunction):
    kind = ScoreKind.INK

    def __init__(self, bank: PrototypeBank, tau_test: float = DEFAULT_TAU_TEST):
        _check_tau(tau_test)
        self.bank = bank
        self.tau_test = tau_test

    def score_batch(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_1d(ink(self.bank, points, self.tau_test))


class GeneralizedInkScore(ScoreFunction):
    kind = ScoreKind.INK_GENERALIZED

    def __init__(self, bank: PrototypeBank, priors, tau_test: float = DEFAULT_TAU_TEST):
        _check_tau(tau_test)
        self.bank = bank
        self.priors = validate_priors(priors, bank.num_classes)
        self.tau_test = tau_test

    def score_batch(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_1d(ink_generalized(self.bank, self.priors, points, self.tau_test))


class MaxPosteriorScore(ScoreFunction):
    kind = ScoreKind.MAX_POSTERIOR

    def __init__(self, bank: PrototypeBank, tau_test: float = DEFAULT_TAU_TEST):
        _check_tau(tau_test)
        self.bank = bank
        self.tau_test = tau_test

    def score_batch(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_1d(max_posterior(self.bank, points, self.tau_test))


class EnergyScore(ScoreFunction):
    kind = ScoreKind.ENERGY
    consumes = "input"

    def __init__(self, ce_model: CeClassifier, tau: float = DEFAULT_ENERGY_TAU):
        _check_tau(tau)
        self.ce_model = ce_model
        self.tau = tau

    def score_batch(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_1d(energy(self.ce_model, points, self.tau))


class MspCeScore(ScoreFunction):
    kind = ScoreKind.MSP_CE
    consumes = "input"

    def __init__(self, ce_model: CeClassifier):
        self.ce_model = ce_model

    def score_batch(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_1d(msp_ce(self.ce_model, points))


class KnnScore(ScoreFunction):
    """
    Negative Euclidean distance to the k-th nearest member of an embedding pool.

    Exact full scan: candidates are selected on squared distances expanded through
    the Gram matrix, then the selected neighbour's distance is recomputed directly.
    """
    kind = ScoreKind.KNN

    def __init__(self, pool: np.ndarray, k: int = DEFAULT_KNN_K):
        pool = np.array(as_points(pool), dtype=np.float64)
        if pool.ndim != 2 or pool.shape[0] == 0:
            raise EmptyInputError("KNN pool is empty")
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if k > pool.shape[0]:
            raise ValueError(f"k ({k}) exceeds pool size ({pool.shape[0]})")
        pool.setflags(write=False)
        self.pool = pool
        self.k = k
        self._pool_sq = np.einsum("ij,ij->i", pool, pool)

    @property
    def pool_size(self) -> int:
        return int(self.pool.shape[0])

    def score_batch(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(as_points(points), dtype=np.float64)
        if points.ndim == 1:
            points = points[None, :]
        if points.shape[1] != self.pool.shape[1]:
            raise DimensionMismatchError(f"pool has dimension {self.pool.shape[1]}, query {points.shape[1]}")

        scores = np.empty(points.shape[0])
        block = max(1, _KNN_BLOCK_ENTRIES // self.pool_size)
        for start in range(0, points.shape[0], block):
            queries = points[start:start + block]
            sq = self._pool_sq[None, :] - 2.0 * queries @ self.pool.T
            sq += np.einsum("ij,ij->i", queries, queries)[:, None]
            nearest = np.argpartition(sq, self.k - 1, axis=1)[:, self.k - 1]
            scores[start:start + block] = -np.linalg.norm(self.pool[nearest] - queries, axis=1)
        return scores


def knn_score(pool, k: int, z) -> float | np.ndarray:
    scorer = KnnScore(pool, k)
    values = scorer.score_batch(as_points(z))
    return float(values[0]) if np.ndim(as_points(z)) == 1 else values


def regularize_covariance(covariance: np.ndarray) -> np.ndarray:
    """Sigma + 1e-6 * trace(Sigma) / d * I"""
    d = covariance.shape[0]
    return covariance + COVARIANCE_RIDGE * np.trace(covariance) / d * np.eye(d)


class MahalanobisScore(ScoreFunction):
    """-min_c (z - m_c)^T Sigma^-1 (z - m_c) through a cached Cholesky factor"""
    kind = ScoreKind.MAHALANOBIS

    def __init__(self, class_means: np.ndarray, covariance: np.ndarray):
        class_means = np.atleast_2d(np.asarray(class_means, dtype=np.float64))
        covariance = np.asarray(covariance, dtype=np.float64)
        d = class_means.shape[1]
        if covariance.shape != (d, d):
            raise DimensionMismatchError(f"covariance must be ({d}, {d}), got {covariance.shape}")
        if not np.allclose(covariance, covariance.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(covariance).max())):
            raise CovarianceError("covariance is not symmetric")
        try:
            self._factor = linalg.cho_factor(covariance, lower=True)
        except linalg.LinAlgError as exc:
            raise CovarianceError(f"covariance is not positive definite: {exc}")
        self.class_means = class_means
        self.covariance = covariance

    def score_batch(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(as_points(points), dtype=np.float64))
        if points.shape[1] != self.class_means.shape[1]:
            raise DimensionMismatchError(
                f"expected dimension {self.class_means.shape[1]}, got {points.shape[1]}"
            )
        diffs = points[:, None, :] - self.class_means[None, :, :]
        flat = diffs.reshape(-1, diffs.shape[-1])
        solved = linalg.cho_solve(self._factor, flat.T).T
        quad = np.einsum("ij,ij->i", flat, solved).reshape(diffs.shape[:2])
        return -quad.min(axis=1)


def mahalanobis_score(class_means, shared_covariance, z) -> float | np.ndarray:
    values = MahalanobisScore(class_means, shared_covariance).score_batch(z)
    return float(values[0]) if np.ndim(as_points(z)) == 1 else values


def fit_mahalanobis(embeddings: LabeledEmbeddingSet, num_classes: int | None = None) -> MahalanobisScore:
    """
    Class means plus the pooled within-class covariance of labeled embeddings,
    ridge-regularized because sphere-constrained data is rank deficient.
    """
    if len(embeddings) == 0:
        raise EmptyInputError("cannot fit Mahalanobis statistics on an empty set")
    labels = embeddings.labels
    num_classes = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=num_classes)
    if np.any(counts == 0):
        raise EmptyInputError(f"classes {np.flatnonzero(counts == 0).tolist()} have no embeddings")

    sums = np.zeros((num_classes, embeddings.dim))
    np.add.at(sums, labels, embeddings.points)
    means = sums / counts[:, None]
    centered = embeddings.points - means[labels]
    covariance = EmpiricalCovariance(assume_centered=True).fit(centered).covariance_
    logger.info(f"Fitted Mahalanobis statistics on {len(embeddings)} embeddings, C={num_classes}")
    return MahalanobisScore(means, regularize_covariance(covariance))


class RescaledLogitModel:
    """Logits f_j(x) + tau * log phi(x): same posteriors at temperature tau, shifted energy"""

    def __init__(self, base: CeClassifier, rescale: Callable[[np.ndarray], np.ndarray], tau: float):
        self.base = base
        self.rescale = rescale
        self.tau = tau

    def log_rescale(self, x: np.ndarray) -> np.ndarray:
        phi = np.asarray(self.rescale(x), dtype=np.float64)
        if not np.all(np.isfinite(phi)) or np.any(phi <= 0.0):
            raise ValueError("rescale must return finite positive values")
        return np.log(phi)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.base.logits(x) + self.tau * self.log_rescale(x)[:, None]


def demonstrate_misalignment(
    ce_model: CeClassifier,
    rescale: Callable[[np.ndarray], np.ndarray],
    samples: np.ndarray,
    tau: float = DEFAULT_ENERGY_TAU,
) -> MisalignmentReport:
    """
    Show that energy scores are not determined by the classifier's posteriors.

    Args:
        ce_model: Unconstrained classifier
        rescale: phi(x) > 0, evaluated row-wise on an (n, dim_in) batch
        samples: Inputs to evaluate on
        tau: Energy temperature

    Returns:
        MisalignmentReport with the posterior discrepancy and per-sample score shifts
    """
    _check_tau(tau)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    rescaled = RescaledLogitModel(ce_model, rescale, tau)

    original_logits = ce_model.logits(samples)
    shifted_logits = rescaled.logits(samples)
    discrepancy = float(np.max(np.abs(
        special.softmax(original_logits / tau, axis=1) - special.softmax(shifted_logits / tau, axis=1)
    )))
    if discrepancy > POSTERIOR_TOLERANCE:
        logger.warning(f"posterior discrepancy {discrepancy:.3g} exceeds {POSTERIOR_TOLERANCE}")

    original = energy_from_logits(original_logits, tau)
    shifted = energy_from_logits(shifted_logits, tau)
    return MisalignmentReport(
        tau=tau,
        max_posterior_discrepancy=discrepancy,
        score_differences=np.atleast_1d(shifted - original),
        expected_differences=tau * rescaled.log_rescale(samples),
        original_scores=np.atleast_1d(original),
        rescaled_scores=np.atleast_1d(shifted),
    )


def anti_aligned_rescale(ce_model: CeClassifier, tau: float = DEFAULT_ENERGY_TAU, strength: float = 2.0):
    """
    phi(x) = exp(-strength * energy(x) / tau).

    The rescaled energy is (1 - strength) * energy, so any strength above 1 reverses the
    ranking the original energy induces while the posteriors stay untouched.
    """
    def rescale(x: np.ndarray) -> np.ndarray:
        return np.exp(-strength * np.atleast_1d(energy(ce_model, x, tau)) / tau)
    return rescale


class ScoreService:
    """Builds frozen score functions from a prototype bank, an embedding pool and an optional CE twin"""

    def __init__(self, knn_k: int = DEFAULT_KNN_K, energy_tau: float = DEFAULT_ENERGY_TAU):
        self.knn_k = knn_k
        self.energy_tau = energy_tau

    def build(
        self,
        kind: ScoreKind | str,
        bank: PrototypeBank,
        tau_test: float,
        pool: LabeledEmbeddingSet | None = None,
        priors: np.ndarray | None = None,
        ce_model: CeClassifier | None = None,
    ) -> ScoreFunction | None:
        """
        One score function, or None when its inputs are missing.

        Args:
            kind: Which score
            bank: Prototypes, used by the prototype scores and to size Mahalanobis
            tau_test: Temperature for the prototype scores
            pool: Labeled ID embeddings for knn and mahalanobis
            priors: Class priors for ink_generalized; uniform when omitted
            ce_model: Cross-entropy twin for energy and msp_ce
        """
        kind = ScoreKind(kind)
        if kind is ScoreKind.INK:
            return InkScore(bank, tau_test)
        if kind is ScoreKind.INK_GENERALIZED:
            if priors is None:
                priors = np.full(bank.num_classes, 1.0 / bank.num_classes)
            return GeneralizedInkScore(bank, priors, tau_test)
        if kind is ScoreKind.MAX_POSTERIOR:
            return MaxPosteriorScore(bank, tau_test)
        if kind in (ScoreKind.ENERGY, ScoreKind.MSP_CE):
            if ce_model is None:
                logger.warning(f"Skipping {kind.value}: no CE twin to score raw inputs with")
                return None
            return EnergyScore(ce_model, self.energy_tau) if kind is ScoreKind.ENERGY else MspCeScore(ce_model)
        if pool is None:
            logger.warning(f"Skipping {kind.value}: no embedding pool")
            return None
        if kind is ScoreKind.KNN:
            return KnnScore(pool.points, min(self.knn_k, len(pool)))
        return fit_mahalanobis(pool, bank.num_classes)

    def build_all(self, kinds, bank: PrototypeBank, tau_test: float, **inputs) -> Dict[ScoreKind, ScoreFunction]:
        """Every buildable score in `kinds`, in order"""
        built = {}
        for kind in kinds:
            score = self.build(kind, bank, tau_test, **inputs)
            if score is not None:
                built[score.kind] = score
        return built


_score_service = None


def get_score_service(knn_k: int = DEFAULT_KNN_K, energy_tau: float = DEFAULT_ENERGY_TAU) -> ScoreService:
    """Get or create the score service; a new one replaces it when the settings change"""
    global _score_service
    if _score_service is None or (_score_service.knn_k, _score_service.energy_tau) != (knn_k, energy_tau):
        _score_service = ScoreService(knn_k, energy_tau)
    return _score_service
