"""
Encoder Service
Hyperspherical encoder trained by the vMF negative log-likelihood with EMA prototypes,
plus the unconstrained cross-entropy twin used by the energy baseline
"""
import logging
import math
from typing import Callable, List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special

from app.core.errors import DimensionMismatchError, DivergenceError, EmptyInputError
from app.schemas.dataset import RawInputSet
from app.schemas.encoder import PrototypeBank, TrainConfig
from app.schemas.sphere import UnitVector, normalize_rows
from app.services.network import (
    AffineLayer,
    FeedForwardNetwork,
    Layer,
    NormalizeLayer,
    SgdMomentum,
    build_mlp,
)
from app.utils.seeding import CE_TWIN, sub_seed

logger = logging.getLogger(__name__)

STEP_MILESTONES = (0.5, 0.75, 0.9)


class EncoderModel(FeedForwardNetwork):
    """h: X -> S^(d-1); the last layer is always a NormalizeLayer"""

    def __init__(self, layers: List[Layer]):
        super().__init__(layers)
        if not isinstance(layers[-1], NormalizeLayer):
            raise ValueError("an encoder must end with a normalize layer")

    def embed(self, x: np.ndarray) -> np.ndarray:
        """(n, dim_in) inputs -> (n, d) unit embeddings"""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim_in:
            raise DimensionMismatchError(f"expected (n, {self.dim_in}) inputs, got {x.shape}")
        return self.forward_batch(x)


class CeClassifier(FeedForwardNetwork):
    """Unconstrained classifier: the last layer is an affine head producing raw logits"""

    def __init__(self, layers: List[Layer]):
        super().__init__(layers)
        if not isinstance(layers[-1], AffineLayer):
            raise ValueError("a CE classifier must end with an affine head")

    @property
    def num_classes(self) -> int:
        return self.dim_out

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        batch = x[None, :] if single else x
        if batch.shape[-1] != self.dim_in:
            raise DimensionMismatchError(f"expected {self.dim_in} inputs, got {batch.shape[-1]}")
        out = self.forward_batch(batch)
        return out[0] if single else out


class TrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: EncoderModel
    bank: PrototypeBank
    loss_trace: List[float] = Field(..., description="Mean training loss per epoch")
    initial_loss: float = Field(..., description="Full-data loss of the initialized model")


class CeTrainResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: CeClassifier
    loss_trace: List[float]
    initial_loss: float


def forward(model: EncoderModel, x) -> UnitVector:
    """Embed a single input vector"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != model.dim_in:
        raise DimensionMismatchError(f"expected a ({model.dim_in},) input, got {x.shape}")
    return UnitVector(coords=model.forward_batch(x[None, :])[0])


def build_encoder(dim_in: int, dim_out: int, config: TrainConfig, rng: np.random.Generator) -> EncoderModel:
    layers = build_mlp(dim_in, config.hidden_width, config.hidden_layers, rng)
    layers.append(AffineLayer.he_uniform(config.hidden_width, dim_out, rng))
    layers.append(NormalizeLayer())
    return EncoderModel(layers)


def build_ce_classifier(dim_in: int, num_classes: int, config: TrainConfig, rng: np.random.Generator) -> CeClassifier:
    layers = build_mlp(dim_in, config.hidden_width, config.hidden_layers, rng)
    layers.append(AffineLayer.he_uniform(config.hidden_width, num_classes, rng))
    return CeClassifier(layers)


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return labels


def nll_loss(bank: PrototypeBank, z_batch: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean vMF negative log-likelihood -log softmax(mu_y^T z / tau) and its gradient.

    Args:
        bank: Prototypes and temperature
        z_batch: (n, d) embeddings
        labels: (n,) class indices

    Returns:
        (loss, (n, d) gradient w.r.t. each z)
    """
    z_batch = np.asarray(z_batch, dtype=np.float64)
    labels = _check_labels(labels, bank.num_classes)
    if z_batch.shape[-1] != bank.dim:
        raise DimensionMismatchError(f"embeddings have dimension {z_batch.shape[-1]}, prototypes {bank.dim}")
    n = z_batch.shape[0]
    logits = z_batch @ bank.mus.T / bank.tau
    log_norm = special.logsumexp(logits, axis=1, keepdims=True)
    log_post = logits - log_norm
    rows = np.arange(n)
    loss = -float(np.mean(log_post[rows, labels]))

    posterior = np.exp(log_post)
    grad = (posterior @ bank.mus - bank.mus[labels]) / (bank.tau * n)
    return loss, grad


def prototype_gradient(bank: PrototypeBank, z_batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(nll_loss)/d(mu_j) = (1/(tau n)) sum_i (p(j|z_i) - 1{y_i = j}) z_i"""
    n = z_batch.shape[0]
    logits = z_batch @ bank.mus.T / bank.tau
    posterior = special.softmax(logits, axis=1)
    posterior[np.arange(n), labels] -= 1.0
    return posterior.T @ z_batch / (bank.tau * n)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over raw logits and its gradient w.r.t. the logits"""
    n = logits.shape[0]
    log_post = logits - special.logsumexp(logits, axis=1, keepdims=True)
    rows = np.arange(n)
    loss = -float(np.mean(log_post[rows, labels]))
    grad = np.exp(log_post)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def ema_update(bank: PrototypeBank, z_batch: np.ndarray, labels: np.ndarray, momentum: float) -> PrototypeBank:
    """
    mu_c <- normalize(m * mu_c + (1 - m) * mean of the batch embeddings labelled c).

    Classes absent from the batch keep their prototype.
    """
    if momentum >= 1.0:
        return bank
    mus = bank.mus.copy()
    for label in np.unique(labels):
        mean = z_batch[labels == label].mean(axis=0)
        blended = momentum * mus[label] + (1.0 - momentum) * mean
        norm = np.linalg.norm(blended)
        if norm > 0.0:
            mus[label] = blended / norm
    return PrototypeBank(mus=mus, tau=bank.tau)


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "cosine":
        return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * step / total_steps))
    passed = sum(step >= fraction * total_steps for fraction in STEP_MILESTONES)
    return config.learning_rate * (0.1 ** passed)


def _class_count(train_set: RawInputSet, num_classes: int | None) -> int:
    if train_set.labels is None:
        raise ValueError("training requires a labeled set")
    if len(train_set) == 0:
        raise EmptyInputError("training set is empty")
    count = int(train_set.labels.max()) + 1 if num_classes is None else num_classes
    _check_labels(train_set.labels, count)
    per_class = np.bincount(train_set.labels, minlength=count)
    empty = np.flatnonzero(per_class == 0)
    if empty.size:
        raise EmptyInputError(f"classes {empty.tolist()} have no training samples")
    return count


def initial_prototypes(model: EncoderModel, train_set: RawInputSet, num_classes: int, tau: float) -> PrototypeBank:
    """Normalized per-class means of the untrained model's embeddings"""
    z = model.embed(train_set.points)
    sums = np.zeros((num_classes, z.shape[1]))
    np.add.at(sums, train_set.labels, z)
    return PrototypeBank(mus=normalize_rows(sums), tau=tau)


class _DivergenceGuard:
    """Abort on a non-finite loss or on `patience` consecutive epochs above factor x initial"""

    def __init__(self, initial_loss: float, config: TrainConfig):
        self.limit = config.divergence_factor * initial_loss
        self.patience = config.divergence_patience
        self.strikes = 0

    def check(self, epoch: int, loss: float) -> None:
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}", epoch=epoch, loss=loss)
        self.strikes = self.strikes + 1 if loss > self.limit else 0
        if self.strikes >= self.patience:
            raise DivergenceError(
                f"loss {loss:.4g} exceeded {self.limit:.4g} for {self.strikes} consecutive epochs",
                epoch=epoch,
                loss=loss,
            )


def _run_epochs(
    network: FeedForwardNetwork,
    train_set: RawInputSet,
    config: TrainConfig,
    rng: np.random.Generator,
    batch_step: Callable[[np.ndarray, np.ndarray, float], float],
    initial_loss: float,
    label: str,
) -> List[float]:
    """Shared SGD loop: shuffle, batch, step, log and guard"""
    n = len(train_set)
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    guard = _DivergenceGuard(initial_loss, config)
    trace: List[float] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        weighted = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            lr = learning_rate(config, step, total_steps)
            batch_loss = batch_step(train_set.points[rows], train_set.labels[rows], lr)
            weighted += batch_loss * rows.size
            step += 1
        epoch_loss = weighted / n
        trace.append(epoch_loss)
        logger.info(f"[{label}] epoch {epoch}/{config.epochs} loss={epoch_loss:.6f}")
        guard.check(epoch, epoch_loss)
    return trace


def train(train_set: RawInputSet, config: TrainConfig, dim: int = 16, num_classes: int | None = None) -> TrainResult:
    """
    Train the hyperspherical encoder with the vMF NLL loss.

    Args:
        train_set: Labeled raw inputs; every class must be present
        config: Optimizer, schedule, EMA and temperature settings
        dim: Embedding dimension d
        num_classes: C; inferred from the labels when omitted

    Returns:
        TrainResult with the model, prototypes and per-epoch loss trace

    Raises:
        EmptyInputError: a class has no samples
        DivergenceError: the loss became non-finite or exploded
    """
    num_classes = _class_count(train_set, num_classes)
    rng = np.random.default_rng(config.seed)
    model = build_encoder(train_set.dim_in, dim, config, rng)
    state = {"bank": initial_prototypes(model, train_set, num_classes, config.tau_train)}

    initial_loss, _ = nll_loss(state["bank"], model.embed(train_set.points), train_set.labels)
    logger.info(f"Training encoder: n={len(train_set)}, C={num_classes}, d={dim}, initial loss={initial_loss:.6f}")
    if not math.isfinite(initial_loss):
        raise DivergenceError("initial loss is non-finite", epoch=0, loss=initial_loss)

    optimizer = SgdMomentum(model.params(), config.sgd_momentum, config.weight_decay, model.weight_mask())

    def batch_step(x: np.ndarray, y: np.ndarray, lr: float) -> float:
        bank = state["bank"]
        z = model.forward_batch(x)
        loss, grad_z = nll_loss(bank, z, y)
        model.backward(grad_z)
        optimizer.step(model.grads(), lr)
        if config.prototype_update == "gradient":
            mus = bank.mus - lr * prototype_gradient(bank, z, y)
            state["bank"] = PrototypeBank(mus=normalize_rows(mus), tau=bank.tau)
        else:
            state["bank"] = ema_update(bank, z, y, config.ema_momentum)
        return loss

    trace = _run_epochs(model, train_set, config, rng, batch_step, initial_loss, "vmf")
    return TrainResult(model=model, bank=state["bank"], loss_trace=trace, initial_loss=initial_loss)


def train_ce_twin(train_set: RawInputSet, config: TrainConfig, num_classes: int | None = None) -> CeTrainResult:
    """Train the same backbone with an unconstrained affine head under softmax cross-entropy"""
    num_classes = _class_count(train_set, num_classes)
    rng = np.random.default_rng(config.seed)
    model = build_ce_classifier(train_set.dim_in, num_classes, config, rng)
    initial_loss, _ = cross_entropy_loss(model.logits(train_set.points), train_set.labels)
    logger.info(f"Training CE twin: n={len(train_set)}, C={num_classes}, initial loss={initial_loss:.6f}")

    optimizer = SgdMomentum(model.params(), config.sgd_momentum, config.weight_decay, model.weight_mask())

    def batch_step(x: np.ndarray, y: np.ndarray, lr: float) -> float:
        loss, grad_logits = cross_entropy_loss(model.forward_batch(x), y)
        model.backward(grad_logits)
        optimizer.step(model.grads(), lr)
        return loss

    trace = _run_epochs(model, train_set, config, rng, batch_step, initial_loss, "ce")
    return CeTrainResult(model=model, loss_trace=trace, initial_loss=initial_loss)


class EncoderService:
    """Trains the vMF encoder of a run and, when asked, its cross-entropy twin"""

    def fit(
        self,
        train_set: RawInputSet,
        config: TrainConfig,
        dim: int,
        num_classes: int | None = None,
        with_ce_twin: bool = True,
    ) -> tuple[TrainResult, CeTrainResult | None]:
        """
        Args:
            train_set: Labeled ID training inputs
            config: Recipe shared by both models; the twin seeds from a sub-seed of config.seed
            dim: Embedding dimension of the encoder
            num_classes: Class count; inferred from the labels when omitted
            with_ce_twin: Also train the twin

        Raises:
            DivergenceError: either model's loss blew up
        """
        result = train(train_set, config, dim=dim, num_classes=num_classes)
        logger.info(f"Encoder loss {result.initial_loss:.4f} -> {result.loss_trace[-1]:.4f}")
        if not with_ce_twin:
            return result, None
        twin_config = config.model_copy(update={"seed": sub_seed(config.seed, CE_TWIN)})
        twin = train_ce_twin(train_set, twin_config, num_classes=num_classes)
        logger.info(f"CE twin loss {twin.initial_loss:.4f} -> {twin.loss_trace[-1]:.4f}")
        return result, twin


_encoder_service = None


def get_encoder_service() -> EncoderService:
    """Get or create the encoder service singleton"""
    global _encoder_service
    if _encoder_service is None:
        _encoder_service = EncoderService()
    return _encoder_service
