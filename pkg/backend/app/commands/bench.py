"""
bench: per-sample scoring latency against embedding pools of several sizes
"""
import logging
from pathlib import Path
from typing import Dict, List

import numpy as np

from app.commands import artifacts
from app.schemas.dataset import LabeledEmbeddingSet
from app.schemas.encoder import PrototypeBank
from app.schemas.report import TimingStats
from app.schemas.run import RunConfig
from app.schemas.vmf import VmfMixture
from app.services import metrics_service, report_service
from app.services.score_service import ScoreFunction, get_score_service
from app.services.synth_service import separated_means
from app.services.vmf_service import sample_with_rng
from app.utils.seeding import BENCHMARK, sub_seed

logger = logging.getLogger(__name__)


def bench_scores(config: RunConfig, bank: PrototypeBank, pool: LabeledEmbeddingSet) -> List[ScoreFunction]:
    """Embedding-level scores only; embedding extraction is excluded from the timing"""
    service = get_score_service(config.knn_k, config.energy_tau)
    return list(service.build_all(config.bench_scores, bank, config.tau_test, pool=pool).values())


def run_bench(config: RunConfig) -> List[TimingStats]:
    rng = np.random.default_rng(sub_seed(config.seed, BENCHMARK))
    means = separated_means(config.bench_classes, config.bench_dim, rng)
    mixture = VmfMixture.uniform(means, config.kappa)
    bank = PrototypeBank(mus=means, tau=config.tau_train)
    queries, _ = sample_with_rng(mixture, config.bench_samples, rng)

    timing = []
    for pool_size in config.bench_pool_sizes:
        points, labels = sample_with_rng(mixture, pool_size, rng)
        pool = LabeledEmbeddingSet(name=f"pool_{pool_size}", points=points, labels=labels)
        for score in bench_scores(config, bank, pool):
            timing.append(metrics_service.bench_score_latency(
                score, queries, repeats=config.bench_repeats, pool_size=pool_size
            ))
    return timing


def cmd_bench(config: RunConfig) -> Dict[str, Path]:
    timing = run_bench(config)
    written = {"timing": report_service.write_timing(timing, config.report_dir)}
    artifacts.print_manifest(f"Benchmarked {len(timing)} (score, pool size) pairs", written)
    for row in timing:
        print(f"  {row.score:>16} N={row.pool_size:>7}: {row.mean_us:10.4f} +/- {row.std_us:.4f} us")
    return written
