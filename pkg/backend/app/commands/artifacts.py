"""
Artifact locations and loaders shared by the commands
"""
import json
import logging
from pathlib import Path
from typing import Dict

from pydantic import ValidationError

from app.core.errors import FormatError
from app.schemas.dataset import OodKind, RawInputSet, TaskTruth
from app.schemas.encoder import PrototypeBank
from app.schemas.run import RunConfig
from app.services.encoder_service import CeClassifier, EncoderModel
from app.utils import codec

logger = logging.getLogger(__name__)

ID_TRAIN = "id_train"
ID_TEST = "id_test"
TRUTH_FILE = "truth.json"
ENCODER_FILE = "encoder.ssmd"
CE_TWIN_FILE = "ce_twin.ssmd"
LOSS_TRACE_FILE = "loss_trace.csv"
CE_LOSS_TRACE_FILE = "ce_loss_trace.csv"


def set_path(config: RunConfig, name: str) -> Path:
    return config.data_dir / f"{name}.ssem"


def ood_name(kind: OodKind) -> str:
    return f"ood_{kind.value}"


def load_id_sets(config: RunConfig) -> tuple[RawInputSet, RawInputSet]:
    train = codec.load_raw_set(set_path(config, ID_TRAIN), name=ID_TRAIN, expected_dim=config.d_in)
    test = codec.load_raw_set(set_path(config, ID_TEST), name=ID_TEST, expected_dim=config.d_in)
    return train, test


def load_ood_sets(config: RunConfig) -> Dict[str, RawInputSet]:
    """OOD sets keyed by kind, in config order"""
    return {
        kind.value: codec.load_raw_set(set_path(config, ood_name(kind)), name=kind.value, expected_dim=config.d_in)
        for kind in config.ood_kinds
    }


def load_truth(config: RunConfig) -> TaskTruth:
    path = config.data_dir / TRUTH_FILE
    try:
        return TaskTruth.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as error:
        raise FormatError(f"{path}: not a task truth file ({error})") from error


def load_encoder(config: RunConfig) -> tuple[EncoderModel, PrototypeBank]:
    return codec.load_encoder(config.model_dir / ENCODER_FILE)


def load_ce_twin(config: RunConfig) -> CeClassifier:
    return codec.load_ce_twin(config.model_dir / CE_TWIN_FILE)


def print_manifest(title: str, written: Dict[str, Path]) -> None:
    print(f"✅ {title}")
    for label, path in written.items():
        print(f"  📁 {label}: {path}")
