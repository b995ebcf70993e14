"""
Metrics Service
AUROC, FPR at a target TPR, scoring latency, temperature sweeps and score histograms
"""
import logging
import time
from typing import Callable, List, Mapping, Sequence

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from app.core.errors import EmptyInputError
from app.schemas.dataset import RawInputSet
from app.schemas.encoder import PrototypeBank
from app.schemas.report import ScoreHistogram, SweepRow, TimingStats
from app.services import detector_service
from app.services.score_service import InkScore, ScoreFunction
from app.services.synth_service import speckle_corrupt

logger = logging.getLogger(__name__)

SWEEP_GRID_POINTS = 17
SWEEP_GRID_SPAN = 100.0
HISTOGRAM_BINS = 50
DEFAULT_BENCH_REPEATS = 10
DEFAULT_BENCH_WARMUP = 2
# strong enough that corrupted embeddings stop resembling their source class
DEFAULT_VALIDATION_SIGMA = 8.0


def _scores(values, side: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyInputError(f"{side} scores are empty")
    return values


def auroc(id_scores, ood_scores) -> float:
    """
    P(random ID score > random OOD score) with ties counted 1/2.

    Mann-Whitney U from average ranks of the pooled sample.
    """
    id_scores = _scores(id_scores, "ID")
    ood_scores = _scores(ood_scores, "OOD")
    m, n = id_scores.size, ood_scores.size
    ranks = stats.rankdata(np.concatenate([id_scores, ood_scores]))
    u = ranks[:m].sum() - m * (m + 1) / 2.0
    return float(u / (m * n))


def fpr_at_tpr(id_scores, ood_scores, target_tpr: float = 0.95) -> float:
    """Fraction of OOD scores at or above the threshold calibrated on the ID scores"""
    ood_scores = _scores(ood_scores, "OOD")
    detector = detector_service.calibrate(_scores(id_scores, "ID"), target_tpr)
    return float(np.mean(detector_service.id_mask(detector, ood_scores)))


def id_accuracy(bank: PrototypeBank, embeddings, labels) -> float:
    """Accuracy of argmax_c mu_c^T z, which is the argmax posterior at any temperature"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyInputError("no labeled embeddings to classify")
    predictions = np.argmax(embeddings @ bank.mus.T, axis=1)
    return float(np.mean(predictions == labels))


def bench_score_latency(
    score: ScoreFunction,
    samples: np.ndarray,
    repeats: int = DEFAULT_BENCH_REPEATS,
    warmup: int = DEFAULT_BENCH_WARMUP,
    pool_size: int = 0,
) -> TimingStats:
    """
    Per-sample scoring latency in microseconds.

    Each repeat times one batch call over all samples on the monotonic clock and
    divides by the sample count; inputs are already embedded, so only the score
    itself is measured. BLAS is pinned to one thread for the whole measurement.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise EmptyInputError("latency benchmark needs at least one sample")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")

    per_sample = np.empty(repeats)
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            score.score_batch(samples)
        for r in range(repeats):
            start = time.perf_counter_ns()
            score.score_batch(samples)
            per_sample[r] = (time.perf_counter_ns() - start) / 1e3 / samples.shape[0]

    stats_row = TimingStats(
        score=score.name,
        pool_size=pool_size,
        mean_us=float(per_sample.mean()),
        std_us=float(per_sample.std()),
        median_us=float(np.median(per_sample)),
        samples=int(samples.shape[0]),
        repeats=repeats,
    )
    logger.info(
        f"Latency {score.name} (pool={pool_size}): {stats_row.mean_us:.4f} +/- {stats_row.std_us:.4f} us/sample"
    )
    return stats_row


def default_tau_grid(tau_train: float) -> np.ndarray:
    """17 log-spaced temperatures over [tau_train / 100, 100 * tau_train]"""
    if not tau_train > 0.0:
        raise ValueError(f"tau_train must be positive, got {tau_train}")
    return np.geomspace(tau_train / SWEEP_GRID_SPAN, tau_train * SWEEP_GRID_SPAN, SWEEP_GRID_POINTS)


def temperature_sweep(
    bank: PrototypeBank,
    id_test: np.ndarray,
    ood_sets: Mapping[str, np.ndarray],
    tau_grid: Sequence[float],
) -> List[SweepRow]:
    """
    INK AUROC at every grid temperature, averaged over the OOD sets.

    Args:
        bank: Prototypes
        id_test: (n, d) ID embeddings
        ood_sets: name -> (m, d) OOD embeddings
        tau_grid: Test temperatures, one output row each in grid order
    """
    if not ood_sets:
        raise EmptyInputError("temperature sweep needs at least one OOD set")
    rows = []
    for tau in tau_grid:
        scorer = InkScore(bank, float(tau))
        id_scores = scorer.score_batch(id_test)
        per_dataset = {name: auroc(id_scores, scorer.score_batch(points)) for name, points in ood_sets.items()}
        rows.append(SweepRow(tau=float(tau), auroc=float(np.mean(list(per_dataset.values()))), per_dataset=per_dataset))
        logger.debug(f"sweep tau={tau:.5g} auroc={rows[-1].auroc:.4f}")
    return rows


def best_tau(rows: Sequence[SweepRow]) -> float:
    """Grid temperature with the highest AUROC, ties going to the smaller temperature"""
    ordered = sorted(rows, key=lambda row: row.tau)
    aurocs = np.array([row.auroc for row in ordered])
    return ordered[int(np.argmax(aurocs))].tau


def dataset_rows(rows: Sequence[SweepRow], dataset: str) -> List[SweepRow]:
    """Sweep rows re-scored by a single OOD set's AUROC"""
    missing = [row.tau for row in rows if dataset not in row.per_dataset]
    if missing:
        raise KeyError(f"sweep has no '{dataset}' AUROC at tau={missing[0]:.5g}")
    return [SweepRow(tau=row.tau, auroc=row.per_dataset[dataset], per_dataset={dataset: row.per_dataset[dataset]}) for row in rows]


def select_tau_by_corruption(
    bank: PrototypeBank,
    embed: Callable[[np.ndarray], np.ndarray],
    id_val: RawInputSet,
    sigma: float = DEFAULT_VALIDATION_SIGMA,
    tau_grid: Sequence[float] | None = None,
    seed: int = 0,
) -> float:
    """
    Choose the test temperature without real OOD data.

    The validation inputs are split in two at random: one half stays clean, the
    other half is speckle-corrupted and stands in for OOD. The temperature that
    best separates the two halves wins, ties going to the smaller temperature.

    Args:
        bank: Prototypes
        embed: Maps (n, dim_in) inputs to (n, d) sphere embeddings
        id_val: Clean ID validation inputs
        sigma: Speckle noise level
        tau_grid: Candidate temperatures; default grid around bank.tau
        seed: Seed for the split and the corruption
    """
    if id_val.points.shape[0] < 2:
        raise EmptyInputError("speckle validation needs at least two inputs")
    if tau_grid is None:
        tau_grid = default_tau_grid(bank.tau)
    order = np.random.default_rng(seed).permutation(id_val.points.shape[0])
    half = order.shape[0] // 2
    clean = id_val.points[order[half:]]
    held_out = RawInputSet(name=id_val.name, points=id_val.points[order[:half]])
    corrupted = speckle_corrupt(held_out, sigma=sigma, seed=seed)
    rows = temperature_sweep(bank, embed(clean), {corrupted.name: embed(corrupted.points)}, tau_grid)
    chosen = best_tau(rows)
    logger.info(f"Selected tau_test={chosen:.5g} by speckle validation (sigma={sigma})")
    return chosen


def score_histogram(
    score: str,
    dataset: str,
    id_scores,
    ood_scores,
    bins: int = HISTOGRAM_BINS,
) -> ScoreHistogram:
    """Counts of ID and OOD scores over shared bins spanning their pooled range"""
    id_scores = _scores(id_scores, "ID")
    ood_scores = _scores(ood_scores, "OOD")
    edges = np.histogram_bin_edges(np.concatenate([id_scores, ood_scores]), bins=bins)
    id_counts, _ = np.histogram(id_scores, bins=edges)
    ood_counts, _ = np.histogram(ood_scores, bins=edges)
    return ScoreHistogram(
        score=score,
        dataset=dataset,
        edges=edges.tolist(),
        id_counts=id_counts.tolist(),
        ood_counts=ood_counts.tolist(),
    )
