"""
Binary file formats.

SSEM (embedding or raw input sets), little-endian:
    magic "SSEM" | version u32 = 1 | flags u32 (bit0 = has_labels) | dim u32 | count u64
    count * dim float64 values, row-major
    count u32 labels, only when bit0 is set

SSMD (model checkpoints), little-endian:
    magic "SSMD" | version u32 = 1 | kind u32 (0 = vMF encoder, 1 = CE twin) | layer count u32
    per layer: type u32 (0 affine, 1 relu, 2 normalize); affine layers follow with
        rows u32 | cols u32 | rows * cols float64 weights | rows float64 biases
    vMF encoder only: classes u32 | dim u32 | classes * dim float64 prototypes | tau_train float64
"""
import logging
import struct
from pathlib import Path
from typing import List

import numpy as np
from pydantic import ValidationError

from app.core.errors import (
    FormatDimensionMismatchError,
    FormatError,
    MalformedHeaderError,
    TruncatedPayloadError,
)
from app.schemas.dataset import LabeledEmbeddingSet, RawInputSet
from app.schemas.encoder import PrototypeBank
from app.services.encoder_service import CeClassifier, EncoderModel
from app.services.network import AffineLayer, Layer, NormalizeLayer, ReluLayer

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"SSEM"
MODEL_MAGIC = b"SSMD"
FORMAT_VERSION = 1

FLAG_HAS_LABELS = 1
_SSEM_HEADER = struct.Struct("<4sIIIQ")
_SSMD_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")
_U32_PAIR = struct.Struct("<II")
_F64 = struct.Struct("<d")

KIND_ENCODER = 0
KIND_CE_TWIN = 1

_LAYER_CODES = {"affine": 0, "relu": 1, "normalize": 2}


class _Reader:
    """Cursor over a byte buffer that reports short reads as truncation"""

    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedPayloadError(
                f"{self.path}: expected {size} bytes at offset {self.offset}, file has {len(self.data)}"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct) -> tuple:
        return layout.unpack(self.take(layout.size))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatDimensionMismatchError(
                f"{self.path}: {len(self.data) - self.offset} bytes beyond the declared payload"
            )


def _read_bytes(path) -> tuple[bytes, Path]:
    path = Path(path)
    return path.read_bytes(), path


def _write_bytes(path, parts: List[bytes]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def _check_header(path: Path, magic: bytes, expected: bytes, version: int) -> None:
    if magic != expected:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}, expected {expected!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")


def save_set(data: RawInputSet | LabeledEmbeddingSet, path) -> Path:
    """Write a raw or embedding set as SSEM"""
    points = np.ascontiguousarray(data.points, dtype="<f8")
    count, dim = points.shape
    flags = FLAG_HAS_LABELS if data.labels is not None else 0
    parts = [_SSEM_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, flags, dim, count), points.tobytes()]
    if data.labels is not None:
        parts.append(np.ascontiguousarray(data.labels, dtype="<u4").tobytes())
    path = _write_bytes(path, parts)
    logger.debug(f"Wrote {count}x{dim} set '{data.name}' to {path}")
    return path


def _read_ssem(path, expected_dim: int | None) -> tuple[np.ndarray, np.ndarray | None, Path]:
    data, path = _read_bytes(path)
    if len(data) < _SSEM_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {_SSEM_HEADER.size}-byte header")
    reader = _Reader(data, path)
    magic, version, flags, dim, count = reader.unpack(_SSEM_HEADER)
    _check_header(path, magic, EMBEDDING_MAGIC, version)
    if flags & ~FLAG_HAS_LABELS:
        raise MalformedHeaderError(f"{path}: unknown flag bits {flags:#x}")
    if dim == 0:
        raise FormatDimensionMismatchError(f"{path}: dimension must be positive")
    if expected_dim is not None and dim != expected_dim:
        raise FormatDimensionMismatchError(f"{path}: dimension {dim}, expected {expected_dim}")

    points = reader.floats(count * dim).reshape(count, dim)
    labels = None
    if flags & FLAG_HAS_LABELS:
        labels = np.frombuffer(reader.take(4 * count), dtype="<u4").astype(np.int64)
    reader.finish()
    return points, labels, path


def load_raw_set(path, name: str | None = None, expected_dim: int | None = None) -> RawInputSet:
    points, labels, path = _read_ssem(path, expected_dim)
    try:
        return RawInputSet(name=name or path.stem, points=points, labels=labels)
    except ValidationError as exc:
        raise FormatError(f"{path}: payload rejected: {exc}")


def load_embedding_set(path, name: str | None = None, expected_dim: int | None = None) -> LabeledEmbeddingSet:
    points, labels, path = _read_ssem(path, expected_dim)
    if labels is None:
        raise MalformedHeaderError(f"{path}: embedding sets must carry labels")
    try:
        return LabeledEmbeddingSet(name=name or path.stem, points=points, labels=labels)
    except ValidationError as exc:
        raise FormatError(f"{path}: payload rejected: {exc}")


def _encode_layers(layers: List[Layer]) -> List[bytes]:
    parts = [_U32.pack(len(layers))]
    for layer in layers:
        parts.append(_U32.pack(_LAYER_CODES[layer.kind]))
        if isinstance(layer, AffineLayer):
            parts.append(_U32_PAIR.pack(layer.fan_out, layer.fan_in))
            parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    return parts


def _decode_layers(reader: _Reader) -> List[Layer]:
    (count,) = reader.unpack(_U32)
    layers: List[Layer] = []
    width = None
    for _ in range(count):
        (code,) = reader.unpack(_U32)
        if code == _LAYER_CODES["affine"]:
            rows, cols = reader.unpack(_U32_PAIR)
            if width is not None and cols != width:
                raise FormatDimensionMismatchError(f"{reader.path}: affine layer expects {cols} inputs, previous layer emits {width}")
            weights = reader.floats(rows * cols).reshape(rows, cols)
            layers.append(AffineLayer(weights, reader.floats(rows)))
            width = rows
        elif code == _LAYER_CODES["relu"]:
            layers.append(ReluLayer())
        elif code == _LAYER_CODES["normalize"]:
            layers.append(NormalizeLayer())
        else:
            raise MalformedHeaderError(f"{reader.path}: unknown layer type {code}")
    if width is None:
        raise MalformedHeaderError(f"{reader.path}: checkpoint holds no affine layer")
    return layers


def _read_ssmd(path, kind: int) -> _Reader:
    data, path = _read_bytes(path)
    if len(data) < _SSMD_HEADER.size:
        raise MalformedHeaderError(f"{path}: file shorter than the {_SSMD_HEADER.size}-byte header")
    reader = _Reader(data, path)
    magic, version, found = reader.unpack(_SSMD_HEADER)
    _check_header(path, magic, MODEL_MAGIC, version)
    if found != kind:
        raise MalformedHeaderError(f"{path}: checkpoint kind {found}, expected {kind}")
    return reader


def save_encoder(model: EncoderModel, bank: PrototypeBank, path) -> Path:
    if bank.dim != model.dim_out:
        raise FormatDimensionMismatchError(f"prototypes have dimension {bank.dim}, encoder emits {model.dim_out}")
    parts = [_SSMD_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, KIND_ENCODER)]
    parts += _encode_layers(model.layers)
    parts.append(_U32_PAIR.pack(bank.num_classes, bank.dim))
    parts.append(np.ascontiguousarray(bank.mus, dtype="<f8").tobytes())
    parts.append(_F64.pack(bank.tau))
    path = _write_bytes(path, parts)
    logger.info(f"Saved encoder checkpoint to {path}")
    return path


def load_encoder(path) -> tuple[EncoderModel, PrototypeBank]:
    reader = _read_ssmd(path, KIND_ENCODER)
    layers = _decode_layers(reader)
    classes, dim = reader.unpack(_U32_PAIR)
    mus = reader.floats(classes * dim).reshape(classes, dim)
    (tau,) = reader.unpack(_F64)
    reader.finish()
    try:
        model = EncoderModel(layers)
        bank = PrototypeBank(mus=mus, tau=tau)
    except (ValueError, ValidationError) as exc:
        raise FormatError(f"{reader.path}: checkpoint rejected: {exc}")
    if bank.dim != model.dim_out:
        raise FormatDimensionMismatchError(f"{reader.path}: prototypes have dimension {bank.dim}, encoder emits {model.dim_out}")
    return model, bank


def save_ce_twin(model: CeClassifier, path) -> Path:
    parts = [_SSMD_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, KIND_CE_TWIN)]
    parts += _encode_layers(model.layers)
    path = _write_bytes(path, parts)
    logger.info(f"Saved CE twin checkpoint to {path}")
    return path


def load_ce_twin(path) -> CeClassifier:
    reader = _read_ssmd(path, KIND_CE_TWIN)
    layers = _decode_layers(reader)
    reader.finish()
    try:
        return CeClassifier(layers)
    except ValueError as exc:
        raise FormatError(f"{reader.path}: checkpoint rejected: {exc}")
