"""
von Mises-Fisher Service
Exact vMF mathematics: log-normalizer, log-density, mixture likelihood and sampling
"""
import logging
import math

import numpy as np
from scipy import special

from app.core.errors import DimensionMismatchError
from app.schemas.sphere import as_points, normalize_rows
from app.schemas.vmf import VmfComponent, VmfMixture

logger = logging.getLogger(__name__)

# Arguments at or below this use the power series for log I_nu; above it the
# exponentially scaled SciPy evaluation is used, and the uniform asymptotic
# expansion takes over wherever that underflows (large order, moderate argument).
BESSEL_SERIES_MAX_ARG = 30.0
_BESSEL_SERIES_MAX_TERMS = 2000
_BESSEL_SERIES_TOL = 1e-17
_WOOD_MAX_ROUNDS = 1000


def _log_bessel_series(nu: float, x: float) -> float:
    """log I_nu(x) = nu*log(x/2) + log sum_m (x/2)^(2m) / (m! Gamma(m+nu+1))"""
    log_half = math.log(x / 2.0)
    lead = nu * log_half - special.gammaln(nu + 1.0)
    quarter_sq = x * x / 4.0
    term = 1.0
    total = 1.0
    for m in range(1, _BESSEL_SERIES_MAX_TERMS):
        term *= quarter_sq / (m * (m + nu))
        total += term
        if term < _BESSEL_SERIES_TOL * total:
            break
    return float(lead + math.log(total))


def _log_bessel_uniform_asymptotic(nu: float, x: float) -> float:
    """Debye uniform expansion of I_nu(nu z), four correction terms"""
    z = x / nu
    root = math.sqrt(1.0 + z * z)
    t = 1.0 / root
    eta = root + math.log(z / (1.0 + root))
    t2 = t * t
    u1 = t * (3.0 - 5.0 * t2) / 24.0
    u2 = t2 * (81.0 - 462.0 * t2 + 385.0 * t2 * t2) / 1152.0
    u3 = t * t2 * (30375.0 - 369603.0 * t2 + 765765.0 * t2 ** 2 - 425425.0 * t2 ** 3) / 414720.0
    u4 = t2 * t2 * (
        4465125.0
        - 94121676.0 * t2
        + 349922430.0 * t2 ** 2
        - 446185740.0 * t2 ** 3
        + 185910725.0 * t2 ** 4
    ) / 39813120.0
    correction = 1.0 + u1 / nu + u2 / nu ** 2 + u3 / nu ** 3 + u4 / nu ** 4
    return float(
        nu * eta
        - 0.5 * math.log(2.0 * math.pi * nu)
        - 0.25 * math.log(1.0 + z * z)
        + math.log(correction)
    )


def log_bessel_iv(nu: float, x: float) -> float:
    """
    log of the modified Bessel function of the first kind, I_nu(x), for nu >= 0, x >= 0.

    Args:
        nu: Order
        x: Argument

    Returns:
        log I_nu(x); -inf at x = 0 for nu > 0, and 0 at x = 0 for nu = 0
    """
    if x == 0.0:
        return 0.0 if nu == 0.0 else -math.inf
    if x <= BESSEL_SERIES_MAX_ARG:
        return _log_bessel_series(nu, x)

    scaled = float(special.ive(nu, x))
    if scaled > 0.0 and math.isfinite(scaled) and scaled > 1e-300:
        return math.log(scaled) + x

    logger.debug(f"ive underflow at nu={nu}, x={x}; using uniform asymptotic expansion")
    return _log_bessel_uniform_asymptotic(nu, x)


def log_sphere_area(d: int) -> float:
    """log of the surface area 2*pi^(d/2)/Gamma(d/2) of S^(d-1)"""
    return float(math.log(2.0) + 0.5 * d * math.log(math.pi) - special.gammaln(0.5 * d))


def log_normalizer(d: int, kappa: float) -> float:
    """
    log Z_d(kappa) of the vMF density Z_d(kappa) * exp(kappa * mu^T z).

    kappa = 0 is the uniform distribution and returns minus the log surface area.
    """
    if isinstance(d, bool) or int(d) != d or d < 2:
        raise ValueError(f"dimension must be an integer >= 2, got {d!r}")
    kappa = float(kappa)
    if not math.isfinite(kappa) or kappa < 0.0:
        raise ValueError(f"kappa must be finite and nonnegative, got {kappa!r}")
    d = int(d)
    if kappa == 0.0:
        return -log_sphere_area(d)

    nu = 0.5 * d - 1.0
    return float(nu * math.log(kappa) - 0.5 * d * math.log(2.0 * math.pi) - log_bessel_iv(nu, kappa))


def bessel_ratio(d: int, kappa: float) -> float:
    """A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa), the expected mean resultant length"""
    if kappa == 0.0:
        return 0.0
    nu = 0.5 * d - 1.0
    return float(math.exp(log_bessel_iv(nu + 1.0, kappa) - log_bessel_iv(nu, kappa)))


def mean_resultant_length(points: np.ndarray) -> float:
    """Norm of the average of unit vectors"""
    return float(np.linalg.norm(np.mean(as_points(points), axis=0)))


def _check_dims(expected: int, z: np.ndarray) -> None:
    if z.shape[-1] != expected:
        raise DimensionMismatchError(f"expected dimension {expected}, got {z.shape[-1]}")


def log_pdf(component: VmfComponent, z) -> float | np.ndarray:
    """log Z_d(kappa) + kappa * mu^T z for a point or an (n, d) batch"""
    points = as_points(z)
    _check_dims(component.dim, points)
    log_z = log_normalizer(component.dim, component.kappa)
    value = log_z + component.kappa * (points @ component.mu.coords)
    return float(value) if np.ndim(value) == 0 else value


def log_marginal(mixture: VmfMixture, z) -> float | np.ndarray:
    """
    log sum_j p(y=j) * vMF(z; mu_j, kappa), evaluated with a max-shifted log-sum-exp.

    Zero-prior components contribute nothing.
    """
    points = as_points(z)
    _check_dims(mixture.dim, points)
    log_z = log_normalizer(mixture.dim, mixture.kappa)
    exponents = mixture.kappa * (points @ mixture.means.T)
    value = log_z + special.logsumexp(exponents, axis=-1, b=mixture.priors)
    return float(value) if np.ndim(value) == 0 else value


def sample_uniform_sphere(d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points uniform on S^(d-1) by normalizing isotropic Gaussians"""
    while True:
        draws = rng.standard_normal((n, d))
        norms = np.linalg.norm(draws, axis=1)
        if np.all(norms > 0.0):
            return draws / norms[:, None]


def _sample_cosines(kappa: float, d: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection sampler for w = mu^T z, density proportional to exp(kappa w)(1-w^2)^((d-3)/2)"""
    dm1 = d - 1.0
    b = dm1 / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + dm1 * dm1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dm1 * math.log(1.0 - x0 * x0)

    out = np.empty(n)
    pending = np.arange(n)
    for _ in range(_WOOD_MAX_ROUNDS):
        if pending.size == 0:
            return out
        size = pending.size
        beta = rng.beta(0.5 * dm1, 0.5 * dm1, size=size)
        uniform = rng.uniform(size=size)
        w = (1.0 - (1.0 + b) * beta) / (1.0 - (1.0 - b) * beta)
        accept = kappa * w + dm1 * np.log1p(-x0 * w) - c >= np.log(uniform)
        out[pending[accept]] = w[accept]
        pending = pending[~accept]
    raise RuntimeError(f"vMF rejection sampler did not converge for kappa={kappa}, d={d}")


def _householder_to(mu: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply the reflection that maps e_1 onto mu"""
    e1 = np.zeros_like(mu)
    e1[0] = 1.0
    u = e1 - mu
    norm = np.linalg.norm(u)
    if norm < 1e-12:
        return points
    u /= norm
    return points - 2.0 * np.outer(points @ u, u)


def sample_component(component: VmfComponent, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points from one vMF component (tangent-normal decomposition)"""
    d = component.dim
    if component.kappa == 0.0:
        return sample_uniform_sphere(d, n, rng)

    w = _sample_cosines(component.kappa, d, n, rng)
    # S^0 is {-1, 1}, which the Gaussian construction also covers for d = 2
    tangent = sample_uniform_sphere(d - 1, n, rng)
    frame = np.empty((n, d))
    frame[:, 0] = w
    frame[:, 1:] = np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * tangent
    return normalize_rows(_householder_to(component.mu.coords, frame))


def sample(mixture: VmfMixture, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Draw n labeled points from a vMF mixture.

    Args:
        mixture: Generative model
        n: Number of samples (>= 1)
        seed: Seed; equal seeds give identical sequences

    Returns:
        ((n, d) sphere points, (n,) class labels drawn from the priors)
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    return sample_with_rng(mixture, n, rng)


def sample_with_rng(mixture: VmfMixture, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.choice(mixture.num_components, size=n, p=mixture.priors)
    points = np.empty((n, mixture.dim))
    for label, component in enumerate(mixture.components):
        rows = np.flatnonzero(labels == label)
        if rows.size:
            points[rows] = sample_component(component, rows.size, rng)
    return points, labels.astype(np.int64)
