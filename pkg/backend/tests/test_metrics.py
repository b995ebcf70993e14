import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score
from threadpoolctl import threadpool_info

from app.core.errors import EmptyInputError
from app.schemas.dataset import RawInputSet
from app.schemas.encoder import PrototypeBank
from app.schemas.report import SweepRow
from app.schemas.vmf import VmfMixture
from app.services.metrics_service import (
    auroc,
    bench_score_latency,
    best_tau,
    dataset_rows,
    default_tau_grid,
    fpr_at_tpr,
    id_accuracy,
    score_histogram,
    select_tau_by_corruption,
    temperature_sweep,
)
from app.services.score_service import InkScore, KnnScore
from app.services.synth_service import make_id_task, make_ood_set, separated_means
from app.services.vmf_service import sample, sample_uniform_sphere


class TestAuroc:
    def test_perfect_and_reversed(self):
        assert auroc([3.0, 4.0], [1.0, 2.0]) == 1.0
        assert auroc([1.0, 2.0], [3.0, 4.0]) == 0.0

    def test_ties_count_half(self):
        assert auroc([1.0, 1.0], [1.0, 1.0]) == 0.5
        assert auroc([2.0, 1.0], [1.0]) == 0.75

    def test_matches_roc_curve_area(self, rng):
        id_scores = rng.normal(1.0, 1.0, size=300)
        ood_scores = np.round(rng.normal(0.0, 1.0, size=200), 1)
        labels = np.concatenate([np.ones(300), np.zeros(200)])
        expected = roc_auc_score(labels, np.concatenate([id_scores, ood_scores]))
        assert auroc(id_scores, ood_scores) == pytest.approx(expected, abs=1e-12)

    def test_empty_side(self):
        with pytest.raises(EmptyInputError):
            auroc([], [1.0])
        with pytest.raises(EmptyInputError):
            auroc([1.0], [])


class TestFprAtTpr:
    def test_separated(self):
        id_scores = np.arange(100.0, 200.0)
        assert fpr_at_tpr(id_scores, np.arange(0.0, 50.0)) == 0.0
        assert fpr_at_tpr(id_scores, np.full(10, 500.0)) == 1.0

    def test_counts_boundary_as_id(self):
        id_scores = np.arange(1.0, 101.0)
        assert fpr_at_tpr(id_scores, [6.0, 5.9], 0.95) == 0.5


def test_id_accuracy():
    bank = PrototypeBank(mus=np.eye(3), tau=0.1)
    embeddings = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [0.0, 0.6, 0.8]])
    assert id_accuracy(bank, embeddings, [0, 2, 1, 1]) == 0.75
    with pytest.raises(EmptyInputError):
        id_accuracy(bank, np.empty((0, 3)), [])


class TestLatency:
    def test_reports_per_sample_statistics(self, random_unit):
        bank = PrototypeBank(mus=random_unit(8, 4, seed=1), tau=0.1)
        stats = bench_score_latency(InkScore(bank), random_unit(8, 64, seed=2), repeats=3, warmup=1, pool_size=0)
        assert stats.score == "ink"
        assert (stats.samples, stats.repeats) == (64, 3)
        assert stats.mean_us > 0.0
        assert stats.std_us >= 0.0

    def test_timed_calls_run_single_threaded(self, random_unit):
        class RecordingScore:
            name = "recording"
            thread_counts = []

            def score_batch(self, points):
                self.thread_counts.extend(pool["num_threads"] for pool in threadpool_info())
                return np.zeros(len(points))

        score = RecordingScore()
        bench_score_latency(score, random_unit(4, 8, seed=5), repeats=2, warmup=1)
        assert all(count == 1 for count in score.thread_counts)

    def test_validation(self, random_unit):
        bank = PrototypeBank(mus=random_unit(3, 2, seed=3), tau=0.1)
        with pytest.raises(EmptyInputError):
            bench_score_latency(InkScore(bank), np.empty((0, 3)))
        with pytest.raises(ValueError):
            bench_score_latency(InkScore(bank), random_unit(3, 2), repeats=0)

    @pytest.mark.slow
    def test_prototype_score_is_cheaper_than_a_large_pool_scan(self):
        rng = np.random.default_rng(4)
        means = separated_means(100, 128, rng)
        mixture = VmfMixture.uniform(means, 30.0)
        queries, _ = sample(mixture, 1000, seed=5)
        pool, _ = sample(mixture, 100_000, seed=6)
        ink_stats = bench_score_latency(InkScore(PrototypeBank(mus=means, tau=0.1)), queries, repeats=3)
        knn_stats = bench_score_latency(KnnScore(pool, 50), queries, repeats=3, pool_size=100_000)
        assert ink_stats.median_us < knn_stats.median_us


class TestTemperatureSweep:
    def test_default_grid(self):
        grid = default_tau_grid(0.1)
        assert len(grid) == 17
        assert grid[0] == pytest.approx(0.001)
        assert grid[-1] == pytest.approx(10.0)
        assert grid[8] == pytest.approx(0.1)
        np.testing.assert_allclose(np.diff(np.log(grid)), math.log(100.0) / 8)
        with pytest.raises(ValueError):
            default_tau_grid(0.0)

    def test_rows_follow_the_grid(self, random_unit):
        bank = PrototypeBank(mus=random_unit(4, 3, seed=7), tau=0.1)
        id_test = random_unit(4, 50, seed=8)
        ood = {"a": random_unit(4, 30, seed=9), "b": random_unit(4, 40, seed=10)}
        grid = [0.01, 0.1, 1.0]
        rows = temperature_sweep(bank, id_test, ood, grid)
        assert [row.tau for row in rows] == grid
        for row in rows:
            assert set(row.per_dataset) == {"a", "b"}
            assert row.auroc == pytest.approx(np.mean(list(row.per_dataset.values())))
            scorer = InkScore(bank, row.tau)
            assert row.per_dataset["a"] == auroc(scorer.score_batch(id_test), scorer.score_batch(ood["a"]))

    def test_needs_an_ood_set(self, random_unit):
        bank = PrototypeBank(mus=random_unit(4, 3, seed=11), tau=0.1)
        with pytest.raises(EmptyInputError):
            temperature_sweep(bank, random_unit(4, 5), {}, [0.1])

    def test_best_tau_prefers_the_smaller_on_ties(self):
        rows = [SweepRow(tau=1.0, auroc=0.9), SweepRow(tau=0.1, auroc=0.9), SweepRow(tau=10.0, auroc=0.8)]
        assert best_tau(rows) == 0.1

    def test_peak_near_the_true_concentration(self):
        """With the generating means as prototypes, tau = 1/kappa scores the exact likelihood"""
        kappa, d, num_classes = 8.0, 8, 6
        rng = np.random.default_rng(12)
        means = separated_means(num_classes, d, rng)
        id_test, _ = sample(VmfMixture.uniform(means, kappa), 20_000, seed=13)
        ood = {"uniform_sphere": sample_uniform_sphere(d, 20_000, rng)}
        bank = PrototypeBank(mus=means, tau=1.0 / kappa)
        rows = temperature_sweep(bank, id_test, ood, default_tau_grid(bank.tau))
        aurocs = np.array([row.auroc for row in rows])
        assert aurocs[8] >= aurocs.max() - 0.005
        assert aurocs[-1] < aurocs[8] - 0.02
        assert 4 <= int(np.argmax(aurocs)) <= 12


def test_corruption_selection_returns_a_grid_temperature(small_task):
    bank = PrototypeBank(mus=small_task.truth.means, tau=1.0 / small_task.truth.kappa)
    grid = default_tau_grid(bank.tau)
    chosen = select_tau_by_corruption(bank, small_task.lift.project, small_task.train, sigma=0.5, tau_grid=grid, seed=3)
    assert chosen in grid
    again = select_tau_by_corruption(bank, small_task.lift.project, small_task.train, sigma=0.5, tau_grid=grid, seed=3)
    assert chosen == again


def test_score_histogram():
    histogram = score_histogram("ink", "uniform_sphere", [0.0, 0.5, 1.0], [0.25, 2.0], bins=4)
    assert len(histogram.edges) == 5
    assert histogram.edges[0] == 0.0
    assert histogram.edges[-1] == 2.0
    assert sum(histogram.id_counts) == 3
    assert sum(histogram.ood_counts) == 2
    assert histogram.id_counts == [1, 1, 1, 0]
    assert histogram.ood_counts == [1, 0, 0, 1]


def test_histogram_rejects_empty_side():
    with pytest.raises(EmptyInputError):
        score_histogram("ink", "x", [], [1.0])


def _truth_sweep(task, n_ood, seed):
    bank = PrototypeBank(mus=task.truth.means, tau=1.0 / task.truth.kappa)
    grid = default_tau_grid(bank.tau)
    uniform = make_ood_set("uniform_sphere", task.truth, n_ood, seed, task.lift)
    rows = temperature_sweep(bank, task.lift.project(task.test.points), {"uniform_sphere": task.lift.project(uniform.points)}, grid)
    return bank, grid, rows


@pytest.mark.parametrize("seed", range(4))
def test_corruption_pick_tracks_the_likelihood_optimum(seed):
    task = make_id_task(d_in=16, d=8, num_classes=6, kappa=8.0, n=20_000, seed=seed)
    bank, grid, rows = _truth_sweep(task, 4000, seed + 100)
    peak = int(np.argmax([row.auroc for row in rows]))
    chosen = select_tau_by_corruption(bank, task.lift.project, task.train, tau_grid=grid, seed=seed)
    picked = int(np.argmin(np.abs(grid - chosen)))
    assert abs(peak - 8) <= 1
    assert abs(picked - peak) <= 1


def test_truth_sweep_peaks_at_the_exact_likelihood_on_the_default_task():
    task = make_id_task(seed=7)
    _, _, rows = _truth_sweep(task, 2000, 8)
    aurocs = np.array([row.auroc for row in rows])
    assert aurocs[8] >= aurocs.max() - 0.002


def test_dataset_rows_rescore_by_one_set():
    rows = [
        SweepRow(tau=0.1, auroc=0.7, per_dataset={"a": 0.9, "b": 0.5}),
        SweepRow(tau=1.0, auroc=0.8, per_dataset={"a": 0.8, "b": 0.8}),
    ]
    assert best_tau(rows) == 1.0
    assert best_tau(dataset_rows(rows, "a")) == 0.1
    with pytest.raises(KeyError):
        dataset_rows(rows, "c")


def test_corruption_selection_needs_two_inputs(small_task):
    bank = PrototypeBank(mus=small_task.truth.means, tau=1.0 / small_task.truth.kappa)
    single = RawInputSet(name="one", points=small_task.train.points[:1])
    with pytest.raises(EmptyInputError):
        select_tau_by_corruption(bank, small_task.lift.project, single)
