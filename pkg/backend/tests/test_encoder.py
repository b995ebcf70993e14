import math

import numpy as np
import pytest
from scipy import special

from app.core.errors import DimensionMismatchError, DivergenceError, EmptyInputError
from app.schemas.dataset import RawInputSet
from app.schemas.encoder import PrototypeBank, TrainConfig
from app.schemas.sphere import UnitVector
from app.services import encoder_service
from app.services.encoder_service import (
    CeClassifier,
    EncoderModel,
    _DivergenceGuard,
    build_ce_classifier,
    build_encoder,
    cross_entropy_loss,
    ema_update,
    forward,
    get_encoder_service,
    learning_rate,
    nll_loss,
    prototype_gradient,
    train,
    train_ce_twin,
)
from app.services.metrics_service import id_accuracy
from app.services.network import AffineLayer, NormalizeLayer
from app.utils.seeding import CE_TWIN, sub_seed


def _loss_for(mus, tau, z, labels):
    logits = z @ mus.T / tau
    return -float(np.mean(logits[np.arange(len(labels)), labels] - special.logsumexp(logits, axis=1)))


def _bank(random_unit, num_classes=3, d=4, tau=0.2, seed=0):
    return PrototypeBank(mus=random_unit(d, num_classes, seed=seed), tau=tau)


class TestNllLoss:
    def test_value(self, random_unit):
        bank = _bank(random_unit)
        z = random_unit(4, 6, seed=1)
        labels = np.array([0, 1, 2, 0, 1, 2])
        loss, _ = nll_loss(bank, z, labels)
        assert loss == pytest.approx(_loss_for(bank.mus, bank.tau, z, labels), rel=1e-12)

    @pytest.mark.parametrize("seed", range(50))
    def test_gradient_matches_finite_differences(self, seed, random_unit):
        rng = np.random.default_rng(seed)
        num_classes, d, n = int(rng.integers(2, 8)), int(rng.integers(2, 10)), int(rng.integers(1, 12))
        tau = float(rng.uniform(0.05, 1.0))
        bank = _bank(random_unit, num_classes=num_classes, d=d, tau=tau, seed=seed)
        z = random_unit(d, n, seed=seed + 1000)
        labels = rng.integers(0, num_classes, size=n)
        _, analytic = nll_loss(bank, z, labels)
        numeric = np.zeros_like(z)
        h = 1e-6
        for index in np.ndindex(z.shape):
            plus, minus = z.copy(), z.copy()
            plus[index] += h
            minus[index] -= h
            numeric[index] = (_loss_for(bank.mus, bank.tau, plus, labels) - _loss_for(bank.mus, bank.tau, minus, labels)) / (2 * h)
        assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric) + 1e-9

    def test_descent_moves_toward_own_prototype(self):
        mus = np.eye(3, 4)
        bank = PrototypeBank(mus=mus, tau=0.1)
        z = UnitVector.normalize([0.5, 0.3, 0.2, 0.1]).coords[None, :]
        _, grad = nll_loss(bank, z, np.array([1]))
        step = -grad[0]
        assert step @ mus[1] > 0.0
        assert step @ mus[0] < 0.0
        assert step @ mus[2] < 0.0
        moved = z[0] + 1e-4 * step
        assert moved @ mus[1] > z[0] @ mus[1]

    def test_dimension_mismatch(self, random_unit):
        with pytest.raises(DimensionMismatchError):
            nll_loss(_bank(random_unit), random_unit(5, 2), np.array([0, 1]))

    def test_label_out_of_range(self, random_unit):
        with pytest.raises(ValueError):
            nll_loss(_bank(random_unit), random_unit(4, 2), np.array([0, 3]))


@pytest.mark.parametrize("seed", range(50))
def test_encoder_parameter_gradients_match_finite_differences(seed, random_unit):
    rng = np.random.default_rng(seed)
    num_classes, d = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    config = TrainConfig(hidden_width=6, hidden_layers=2, seed=seed)
    model = build_encoder(5, d, config, rng)
    for layer in model.layers:
        if isinstance(layer, AffineLayer):
            layer.biases[:] = rng.uniform(-0.1, 0.1, size=layer.fan_out)
    bank = _bank(random_unit, num_classes=num_classes, d=d, tau=float(rng.uniform(0.1, 1.0)), seed=seed)
    x = rng.standard_normal((6, 5))
    labels = rng.integers(0, num_classes, size=6)

    _, grad_z = nll_loss(bank, model.forward_batch(x), labels)
    model.backward(grad_z)
    analytic = [grad.copy() for grad in model.grads()]

    h = 1e-6
    for param, expected in zip(model.params(), analytic):
        numeric = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            plus = nll_loss(bank, model.forward_batch(x), labels)[0]
            param[index] = original - h
            minus = nll_loss(bank, model.forward_batch(x), labels)[0]
            param[index] = original
            numeric[index] = (plus - minus) / (2 * h)
        assert np.linalg.norm(expected - numeric) <= 1e-5 * np.linalg.norm(numeric) + 1e-9


def test_prototype_gradient_matches_finite_differences(random_unit):
    bank = _bank(random_unit, seed=3)
    z = random_unit(4, 8, seed=4)
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    analytic = prototype_gradient(bank, z, labels)
    numeric = np.zeros_like(bank.mus)
    h = 1e-6
    for index in np.ndindex(bank.mus.shape):
        plus, minus = bank.mus.copy(), bank.mus.copy()
        plus[index] += h
        minus[index] -= h
        numeric[index] = (_loss_for(plus, bank.tau, z, labels) - _loss_for(minus, bank.tau, z, labels)) / (2 * h)
    assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric)


def test_cross_entropy_gradient_matches_finite_differences(rng):
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    _, analytic = cross_entropy_loss(logits, labels)
    numeric = np.zeros_like(logits)
    h = 1e-6
    for index in np.ndindex(logits.shape):
        plus, minus = logits.copy(), logits.copy()
        plus[index] += h
        minus[index] -= h
        numeric[index] = (cross_entropy_loss(plus, labels)[0] - cross_entropy_loss(minus, labels)[0]) / (2 * h)
    assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric)


class TestEmaUpdate:
    def test_frozen_with_unit_momentum(self, random_unit):
        bank = _bank(random_unit)
        assert ema_update(bank, random_unit(4, 3, seed=5), np.array([0, 1, 2]), 1.0) is bank

    def test_zero_momentum_takes_the_batch_mean(self, random_unit):
        bank = _bank(random_unit)
        z = random_unit(4, 4, seed=6)
        updated = ema_update(bank, z, np.array([0, 0, 1, 1]), 0.0)
        mean = z[:2].mean(axis=0)
        np.testing.assert_allclose(updated.mus[0], mean / np.linalg.norm(mean), atol=1e-12)
        np.testing.assert_array_equal(updated.mus[2], bank.mus[2])

    def test_result_stays_on_the_sphere(self, random_unit):
        bank = _bank(random_unit)
        updated = ema_update(bank, random_unit(4, 9, seed=7), np.arange(9) % 3, 0.5)
        np.testing.assert_allclose(np.linalg.norm(updated.mus, axis=1), 1.0, atol=1e-12)


class TestLearningRate:
    def test_cosine(self):
        config = TrainConfig(learning_rate=0.2, schedule="cosine", seed=0)
        assert learning_rate(config, 0, 100) == pytest.approx(0.2)
        assert learning_rate(config, 50, 100) == pytest.approx(0.1)
        assert learning_rate(config, 100, 100) == pytest.approx(0.0, abs=1e-15)

    def test_step(self):
        config = TrainConfig(learning_rate=1.0, schedule="step", seed=0)
        assert learning_rate(config, 49, 100) == pytest.approx(1.0)
        assert learning_rate(config, 50, 100) == pytest.approx(0.1)
        assert learning_rate(config, 75, 100) == pytest.approx(0.01)
        assert learning_rate(config, 95, 100) == pytest.approx(0.001)


class TestDivergenceGuard:
    def test_patience(self):
        guard = _DivergenceGuard(1.0, TrainConfig(seed=0))
        guard.check(1, 11.0)
        guard.check(2, 11.0)
        guard.check(3, 2.0)
        guard.check(4, 11.0)
        guard.check(5, 11.0)
        with pytest.raises(DivergenceError) as excinfo:
            guard.check(6, 11.0)
        assert excinfo.value.epoch == 6

    def test_non_finite(self):
        with pytest.raises(DivergenceError):
            _DivergenceGuard(1.0, TrainConfig(seed=0)).check(1, math.nan)


class TestModels:
    def test_encoder_requires_normalize_tail(self, rng):
        with pytest.raises(ValueError):
            EncoderModel([AffineLayer.he_uniform(3, 2, rng)])

    def test_ce_classifier_requires_affine_head(self):
        with pytest.raises(ValueError):
            CeClassifier([NormalizeLayer()])

    def test_forward_returns_unit_vector(self, rng, small_train_config):
        model = build_encoder(6, 3, small_train_config, rng)
        z = forward(model, rng.standard_normal(6))
        assert isinstance(z, UnitVector)
        assert z.dim == 3
        with pytest.raises(DimensionMismatchError):
            forward(model, rng.standard_normal(5))
        with pytest.raises(DimensionMismatchError):
            model.embed(rng.standard_normal((2, 5)))

    def test_untrained_classifier_is_homogeneous(self, rng, small_train_config):
        model = build_ce_classifier(6, 4, small_train_config, rng)
        x = rng.standard_normal(6)
        np.testing.assert_allclose(model.logits(10.0 * x), 10.0 * model.logits(x), rtol=1e-12, atol=1e-12)
        assert model.logits(np.ones((3, 6))).shape == (3, 4)
        assert model.num_classes == 4


class TestTrain:
    def test_learns_the_task(self, small_task, small_train_config):
        result = train(small_task.train, small_train_config, dim=4)
        assert len(result.loss_trace) == small_train_config.epochs
        assert result.loss_trace[-1] < result.initial_loss
        embedded = result.model.embed(small_task.test.points)
        np.testing.assert_allclose(np.linalg.norm(embedded, axis=1), 1.0, atol=1e-12)
        assert id_accuracy(result.bank, embedded, small_task.test.labels) > 0.9

    def test_deterministic_for_a_seed(self, small_task, small_train_config):
        config = small_train_config.model_copy(update={"epochs": 2})
        first = train(small_task.train, config, dim=4)
        second = train(small_task.train, config, dim=4)
        assert first.loss_trace == second.loss_trace
        assert np.array_equal(first.bank.mus, second.bank.mus)

    def test_gradient_prototypes(self, small_task, small_train_config):
        config = small_train_config.model_copy(update={"epochs": 3, "prototype_update": "gradient"})
        result = train(small_task.train, config, dim=4)
        np.testing.assert_allclose(np.linalg.norm(result.bank.mus, axis=1), 1.0, atol=1e-12)
        assert result.loss_trace[-1] < result.initial_loss

    def test_zero_learning_rate_freezes_weights(self, small_task, small_train_config):
        config = small_train_config.model_copy(update={"epochs": 1, "learning_rate": 0.0})
        result = train(small_task.train, config, dim=4)
        fresh = build_encoder(12, 4, config, np.random.default_rng(config.seed))
        for trained, initial in zip(result.model.params(), fresh.params()):
            assert np.array_equal(trained, initial)

    def test_missing_class(self, small_task, small_train_config):
        with pytest.raises(EmptyInputError):
            train(small_task.train, small_train_config, dim=4, num_classes=4)

    def test_unlabeled_set(self, small_train_config):
        data = RawInputSet(name="ood", points=np.ones((4, 3)))
        with pytest.raises(ValueError):
            train(data, small_train_config, dim=2)

    def test_non_finite_loss_aborts(self, small_task, small_train_config, monkeypatch):
        original = encoder_service.nll_loss
        calls = {"count": 0}

        def exploding(bank, z, labels):
            calls["count"] += 1
            loss, grad = original(bank, z, labels)
            return (loss if calls["count"] == 1 else math.nan), grad

        monkeypatch.setattr(encoder_service, "nll_loss", exploding)
        with pytest.raises(DivergenceError) as excinfo:
            train(small_task.train, small_train_config, dim=4)
        assert excinfo.value.epoch == 1


def test_ce_twin_learns_the_task(small_task, small_train_config):
    result = train_ce_twin(small_task.train, small_train_config)
    assert result.loss_trace[-1] < result.initial_loss
    predictions = np.argmax(result.model.logits(small_task.test.points), axis=1)
    assert np.mean(predictions == small_task.test.labels) > 0.9


class TestEncoderService:
    def test_singleton(self):
        assert get_encoder_service() is get_encoder_service()

    def test_fit_matches_direct_training(self, small_task, small_train_config):
        config = small_train_config.model_copy(update={"epochs": 2})
        result, twin = get_encoder_service().fit(small_task.train, config, dim=4)
        direct = train(small_task.train, config, dim=4)
        assert result.loss_trace == direct.loss_trace
        twin_config = config.model_copy(update={"seed": sub_seed(config.seed, CE_TWIN)})
        assert twin.loss_trace == train_ce_twin(small_task.train, twin_config).loss_trace

    def test_fit_without_twin(self, small_task, small_train_config):
        config = small_train_config.model_copy(update={"epochs": 1})
        _, twin = get_encoder_service().fit(small_task.train, config, dim=4, with_ce_twin=False)
        assert twin is None
