"""
Synthetic Data Service
Generates labeled ID tasks from vMF mixtures, OOD sets and corrupted validation data
"""
import logging
import math
from typing import Sequence

import numpy as np

from app.core.errors import EmptyInputError
from app.schemas.dataset import OodKind, OrthogonalLift, RawInputSet, SyntheticTask
from app.schemas.sphere import normalize_rows
from app.schemas.vmf import PRIOR_SUM_TOLERANCE, VmfMixture
from app.services.vmf_service import sample_uniform_sphere, sample_with_rng

logger = logging.getLogger(__name__)

# Defaults for the desk-scale task
DEFAULT_D_IN = 64
DEFAULT_DIM = 16
DEFAULT_NUM_CLASSES = 10
DEFAULT_KAPPA = 30.0
DEFAULT_SIGMA_LIFT = 0.05
DEFAULT_SPECKLE_SIGMA = 0.5
TRAIN_FRACTION = 0.8

REPULSION_STEPS = 50
REPULSION_STEP_SIZE = 0.1
LOW_KAPPA_FACTOR = 0.25


def separated_means(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """
    Uniform mean directions pushed apart by gradient descent on each row's largest
    pairwise cosine, renormalized after every step.
    """
    means = sample_uniform_sphere(dim, num_classes, rng)
    for _ in range(REPULSION_STEPS):
        cosines = means @ means.T - 2.0 * np.eye(num_classes)
        nearest = np.argmax(cosines, axis=1)
        grad = means[nearest].copy()
        # symmetric pull: every row also feels the rows that picked it
        np.add.at(grad, nearest, means)
        means = normalize_rows(means - REPULSION_STEP_SIZE * grad)
    return means


def min_mean_angle(means: np.ndarray) -> float:
    cosines = np.clip(means @ means.T, -1.0, 1.0)
    np.fill_diagonal(cosines, -1.0)
    return float(math.acos(float(cosines.max())))


def random_lift(d_in: int, dim: int, sigma: float, rng: np.random.Generator) -> OrthogonalLift:
    """Orthonormal (d_in, d) basis from the QR factorization of a Gaussian matrix"""
    q, r = np.linalg.qr(rng.standard_normal((d_in, dim)))
    # sign-fix so the basis is a deterministic function of the draw
    q = q * np.sign(np.diag(r))[None, :]
    return OrthogonalLift(basis=q, sigma=sigma)


def _validate_priors(priors: Sequence[float], num_classes: int) -> np.ndarray:
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != (num_classes,):
        raise ValueError(f"priors must have {num_classes} entries, got {priors.shape}")
    if np.any(priors < 0.0) or abs(float(priors.sum()) - 1.0) > PRIOR_SUM_TOLERANCE:
        raise ValueError(f"priors must be nonnegative and sum to 1, got sum {float(priors.sum())!r}")
    return priors


def make_id_task(
    d_in: int = DEFAULT_D_IN,
    d: int = DEFAULT_DIM,
    num_classes: int = DEFAULT_NUM_CLASSES,
    kappa: float = DEFAULT_KAPPA,
    priors: Sequence[float] | None = None,
    n: int = 10000,
    seed: int = 0,
    sigma_lift: float = DEFAULT_SIGMA_LIFT,
) -> SyntheticTask:
    """
    Generate an ID classification task from a vMF mixture.

    Args:
        d_in: Input dimension the sphere is lifted into (>= d)
        d: Embedding dimension
        num_classes: Number of classes C (>= 2)
        kappa: Shared concentration (> 0)
        priors: Class priors; uniform when omitted
        n: Total samples, split 80/20 into train and test
        seed: Seed for means, lift, samples and split
        sigma_lift: Isotropic noise added after lifting

    Returns:
        SyntheticTask with train/test RawInputSets, the truth mixture and the lift
    """
    if d_in < d:
        raise ValueError(f"d_in ({d_in}) must be >= d ({d})")
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if not kappa > 0.0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if priors is None:
        priors = np.full(num_classes, 1.0 / num_classes)
    priors = _validate_priors(priors, num_classes)

    rng = np.random.default_rng(seed)
    means = separated_means(num_classes, d, rng)
    truth = VmfMixture(means=means, kappa=kappa, priors=priors)
    lift = random_lift(d_in, d, sigma_lift, rng)

    sphere, labels = sample_with_rng(truth, n, rng)
    inputs = lift.lift(sphere, rng)

    order = rng.permutation(n)
    n_train = int(round(TRAIN_FRACTION * n))
    train_rows, test_rows = order[:n_train], order[n_train:]

    logger.info(
        f"Generated ID task: C={num_classes}, d={d}, d_in={d_in}, kappa={kappa}, "
        f"train={train_rows.size}, test={test_rows.size}"
    )
    return SyntheticTask(
        train=RawInputSet(name="id_train", points=inputs[train_rows], labels=labels[train_rows]),
        test=RawInputSet(name="id_test", points=inputs[test_rows], labels=labels[test_rows]),
        truth=truth,
        lift=lift,
        test_sphere=sphere[test_rows],
    )


def _rotate_toward(source: np.ndarray, target: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a unit vector by `angle` inside the plane it spans with `target`"""
    tangent = target - (source @ target) * source
    norm = np.linalg.norm(tangent)
    if norm < 1e-12:
        return source
    return math.cos(angle) * source + math.sin(angle) * (tangent / norm)


def shifted_means(reference: VmfMixture, angle: float | None = None) -> np.ndarray:
    """
    Each reference mean rotated toward its nearest neighbour.

    The default angle is half the smallest inter-mean angle, so the closest pair of
    classes meets midway.
    """
    means = reference.means
    if reference.num_components < 2:
        return means.copy()
    if angle is None:
        angle = 0.5 * min_mean_angle(means)
    cosines = means @ means.T - 2.0 * np.eye(reference.num_components)
    nearest = np.argmax(cosines, axis=1)
    rotated = np.stack([_rotate_toward(means[i], means[j], angle) for i, j in enumerate(nearest)])
    return normalize_rows(rotated)


def ood_sphere_points(
    kind: OodKind | str,
    reference: VmfMixture,
    n: int,
    rng: np.random.Generator,
    rotation_angle: float | None = None,
) -> np.ndarray:
    """OOD points on the embedding sphere, before lifting"""
    kind = OodKind(kind)
    if kind is OodKind.UNIFORM_SPHERE:
        return sample_uniform_sphere(reference.dim, n, rng)
    if kind is OodKind.SHIFTED_MIXTURE:
        shifted = VmfMixture(
            means=shifted_means(reference, rotation_angle),
            kappa=reference.kappa,
            priors=reference.priors,
        )
        return sample_with_rng(shifted, n, rng)[0]
    return sample_with_rng(reference.with_kappa(reference.kappa * LOW_KAPPA_FACTOR), n, rng)[0]


def make_ood_set(
    kind: OodKind | str,
    reference: VmfMixture,
    n: int,
    seed: int,
    lift: OrthogonalLift,
    rotation_angle: float | None = None,
) -> RawInputSet:
    """
    Generate an unlabeled OOD set in the same input space as the paired ID task.

    Args:
        kind: uniform_sphere (far), shifted_mixture (near) or low_kappa
        reference: Truth mixture of the ID task
        n: Number of samples (>= 1)
        seed: Seed
        lift: The ID task's orthogonal lift
        rotation_angle: shifted_mixture only; radians, default half the minimum inter-mean angle
    """
    try:
        kind = OodKind(kind)
    except ValueError:
        raise ValueError(f"unknown OOD kind {kind!r}; expected one of {[k.value for k in OodKind]}")
    if n < 1:
        raise EmptyInputError(f"OOD set size must be >= 1, got {n}")

    rng = np.random.default_rng(seed)
    sphere = ood_sphere_points(kind, reference, n, rng, rotation_angle)
    logger.info(f"Generated OOD set '{kind.value}' with {n} samples")
    return RawInputSet(name=kind.value, points=lift.lift(sphere, rng), labels=None)


def speckle_corrupt(data: RawInputSet, sigma: float = DEFAULT_SPECKLE_SIGMA, seed: int = 0) -> RawInputSet:
    """x -> x + x * eps, eps ~ N(0, sigma^2) i.i.d. per coordinate"""
    if sigma < 0.0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    noise = sigma * rng.standard_normal(data.points.shape)
    return RawInputSet(
        name=f"{data.name}_speckle",
        points=data.points + data.points * noise,
        labels=data.labels,
    )
