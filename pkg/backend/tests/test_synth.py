import math

import numpy as np
import pytest

from app.core.errors import EmptyInputError
from app.schemas.dataset import OodKind, RawInputSet
from app.schemas.encoder import PrototypeBank
from app.schemas.vmf import VmfMixture
from app.services.metrics_service import auroc
from app.services.score_service import InkScore
from app.services.synth_service import (
    make_id_task,
    make_ood_set,
    min_mean_angle,
    ood_sphere_points,
    random_lift,
    separated_means,
    shifted_means,
    speckle_corrupt,
)
from app.services.vmf_service import log_marginal, mean_resultant_length, sample_uniform_sphere


class TestMakeIdTask:
    def test_shapes_and_split(self, small_task):
        assert small_task.train.points.shape == (480, 12)
        assert small_task.test.points.shape == (120, 12)
        assert small_task.test_sphere.shape == (120, 4)
        assert small_task.truth.num_components == 3
        assert set(np.unique(small_task.train.labels)) <= {0, 1, 2}

    def test_deterministic_for_a_seed(self):
        first = make_id_task(d_in=8, d=4, num_classes=3, n=200, seed=11)
        second = make_id_task(d_in=8, d=4, num_classes=3, n=200, seed=11)
        assert np.array_equal(first.train.points, second.train.points)
        assert np.array_equal(first.test.labels, second.test.labels)
        assert np.array_equal(first.truth.means, second.truth.means)

    def test_different_seeds_differ(self):
        first = make_id_task(d_in=8, d=4, num_classes=3, n=200, seed=11)
        second = make_id_task(d_in=8, d=4, num_classes=3, n=200, seed=12)
        assert not np.array_equal(first.train.points, second.train.points)

    def test_priors_shape_the_label_frequencies(self):
        task = make_id_task(d_in=8, d=4, num_classes=2, priors=[0.9, 0.1], n=5000, seed=2)
        labels = np.concatenate([task.train.labels, task.test.labels])
        assert np.mean(labels == 0) == pytest.approx(0.9, abs=0.02)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"d_in": 3, "d": 4},
            {"num_classes": 1},
            {"kappa": 0.0},
            {"n": 1},
            {"num_classes": 2, "priors": [0.5, 0.6]},
            {"num_classes": 2, "priors": [1.0]},
        ],
    )
    def test_rejects_bad_arguments(self, kwargs):
        with pytest.raises(ValueError):
            make_id_task(**{"d_in": 8, "d": 4, "n": 100, **kwargs})


class TestSeparatedMeans:
    def test_rows_are_unit(self, rng):
        means = separated_means(10, 16, rng)
        np.testing.assert_allclose(np.linalg.norm(means, axis=1), 1.0, atol=1e-12)

    def test_repulsion_widens_the_closest_pair(self):
        initial = sample_uniform_sphere(16, 10, np.random.default_rng(5))
        repelled = separated_means(10, 16, np.random.default_rng(5))
        assert min_mean_angle(repelled) >= min_mean_angle(initial)
        assert min_mean_angle(repelled) > math.pi / 3


class TestOrthogonalLift:
    def test_basis_is_orthonormal(self, rng):
        lift = random_lift(64, 16, 0.05, rng)
        np.testing.assert_allclose(lift.basis.T @ lift.basis, np.eye(16), atol=1e-12)

    def test_noiseless_lift_is_exactly_recovered(self, rng, random_unit):
        lift = random_lift(10, 4, 0.0, rng)
        z = random_unit(4, 50)
        np.testing.assert_allclose(lift.project(lift.lift(z, rng)), z, atol=1e-12)

    def test_noise_stays_within_the_lift_scale(self, rng, random_unit):
        sigma, d = 0.05, 16
        lift = random_lift(64, d, sigma, rng)
        z = random_unit(d, 5000)
        residual = np.linalg.norm(lift.lift(z, rng) @ lift.basis - z, axis=1)
        assert np.percentile(residual, 99) <= 1.5 * sigma * math.sqrt(d)
        assert residual.mean() <= 1.1 * sigma * math.sqrt(d)


class TestOodSets:
    def test_sets_share_the_input_space(self, small_task):
        for index, kind in enumerate(OodKind):
            ood = make_ood_set(kind, small_task.truth, 50, seed=index, lift=small_task.lift)
            assert ood.name == kind.value
            assert ood.points.shape == (50, 12)
            assert ood.labels is None

    def test_unknown_kind(self, small_task):
        with pytest.raises(ValueError, match="unknown OOD kind"):
            make_ood_set("gaussian_blob", small_task.truth, 10, seed=0, lift=small_task.lift)

    def test_empty_set(self, small_task):
        with pytest.raises(EmptyInputError):
            make_ood_set(OodKind.UNIFORM_SPHERE, small_task.truth, 0, seed=0, lift=small_task.lift)

    def test_shift_rotates_every_mean_by_the_angle(self, random_unit):
        reference = VmfMixture.uniform(random_unit(8, 5, seed=3), 20.0)
        moved = shifted_means(reference, 0.3)
        cosines = np.sum(moved * reference.means, axis=1)
        np.testing.assert_allclose(cosines, math.cos(0.3), atol=1e-12)

    def test_default_shift_is_half_the_closest_angle(self, random_unit):
        reference = VmfMixture.uniform(random_unit(8, 5, seed=4), 20.0)
        moved = shifted_means(reference)
        half = 0.5 * min_mean_angle(reference.means)
        np.testing.assert_allclose(np.sum(moved * reference.means, axis=1), math.cos(half), atol=1e-12)

    def test_low_kappa_is_more_diffuse(self, random_unit):
        reference = VmfMixture.uniform(random_unit(6, 1, seed=5), 40.0)
        rng = np.random.default_rng(6)
        tight = ood_sphere_points(OodKind.SHIFTED_MIXTURE, reference, 4000, rng, rotation_angle=0.0)
        loose = ood_sphere_points(OodKind.LOW_KAPPA, reference, 4000, rng)
        assert mean_resultant_length(loose) < mean_resultant_length(tight)

    def test_unrotated_shift_is_indistinguishable(self, random_unit):
        reference = VmfMixture.uniform(random_unit(8, 4, seed=7), 10.0)
        rng = np.random.default_rng(8)
        id_points = ood_sphere_points(OodKind.SHIFTED_MIXTURE, reference, 5000, rng, rotation_angle=0.0)
        ood_points = ood_sphere_points(OodKind.SHIFTED_MIXTURE, reference, 5000, rng, rotation_angle=0.0)
        value = auroc(log_marginal(reference, id_points), log_marginal(reference, ood_points))
        assert value == pytest.approx(0.5, abs=0.02)

    def test_uniform_sphere_is_far(self, small_task):
        rng = np.random.default_rng(9)
        ood_points = ood_sphere_points(OodKind.UNIFORM_SPHERE, small_task.truth, 2000, rng)
        value = auroc(
            log_marginal(small_task.truth, small_task.test_sphere),
            log_marginal(small_task.truth, ood_points),
        )
        assert value > 0.95

    @pytest.mark.parametrize("seed", range(3))
    def test_truth_prototypes_separate_uniform_inputs(self, seed):
        task = make_id_task(d_in=64, d=16, num_classes=10, kappa=30.0, n=5000, seed=seed)
        bank = PrototypeBank(mus=task.truth.means, tau=1.0 / task.truth.kappa)
        uniform = make_ood_set(OodKind.UNIFORM_SPHERE, task.truth, 2000, seed + 50, task.lift)
        scorer = InkScore(bank, bank.tau)
        value = auroc(
            scorer.score_batch(task.lift.project(task.test.points)),
            scorer.score_batch(task.lift.project(uniform.points)),
        )
        assert value >= 0.99


class TestSpeckle:
    def _inputs(self):
        rng = np.random.default_rng(10)
        return RawInputSet(name="id_train", points=rng.uniform(1.0, 2.0, size=(2000, 8)), labels=np.zeros(2000, dtype=int))

    def test_keeps_labels_and_renames(self):
        data = self._inputs()
        corrupted = speckle_corrupt(data, sigma=0.5, seed=1)
        assert corrupted.name == "id_train_speckle"
        assert np.array_equal(corrupted.labels, data.labels)

    def test_relative_noise_level(self):
        data = self._inputs()
        corrupted = speckle_corrupt(data, sigma=0.5, seed=1)
        relative = (corrupted.points - data.points) / data.points
        assert relative.std() == pytest.approx(0.5, abs=0.02)
        assert abs(relative.mean()) < 0.02

    def test_zero_sigma_is_identity(self):
        data = self._inputs()
        assert np.array_equal(speckle_corrupt(data, sigma=0.0, seed=1).points, data.points)

    def test_deterministic_for_a_seed(self):
        data = self._inputs()
        assert np.array_equal(speckle_corrupt(data, seed=3).points, speckle_corrupt(data, seed=3).points)

    def test_rejects_negative_sigma(self):
        with pytest.raises(ValueError):
            speckle_corrupt(self._inputs(), sigma=-0.1)
