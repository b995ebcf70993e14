"""
train: the hyperspherical encoder and, optionally, its cross-entropy twin
"""
import logging
from pathlib import Path
from typing import Dict

from app.commands import artifacts
from app.schemas.run import RunConfig
from app.services import report_service
from app.services.encoder_service import get_encoder_service
from app.utils import codec
from app.utils.seeding import TRAINING, sub_seed

logger = logging.getLogger(__name__)


def cmd_train(config: RunConfig) -> Dict[str, Path]:
    train_set, _ = artifacts.load_id_sets(config)
    result, twin = get_encoder_service().fit(
        train_set,
        config.train_config(sub_seed(config.seed, TRAINING)),
        dim=config.dim,
        num_classes=config.num_classes,
        with_ce_twin=config.train_ce_twin,
    )
    written = {
        "encoder": codec.save_encoder(result.model, result.bank, config.model_dir / artifacts.ENCODER_FILE),
        "loss_trace": report_service.write_loss_trace(
            result.loss_trace, config.model_dir / artifacts.LOSS_TRACE_FILE
        ),
    }
    if twin is not None:
        written["ce_twin"] = codec.save_ce_twin(twin.model, config.model_dir / artifacts.CE_TWIN_FILE)
        written["ce_loss_trace"] = report_service.write_loss_trace(
            twin.loss_trace, config.model_dir / artifacts.CE_LOSS_TRACE_FILE
        )

    artifacts.print_manifest("Training finished", written)
    return written
