"""
JSON model archives for stitched and Adam models
"""

from pathlib import Path
from typing import Union

from src.models.adam import AdamModel
from src.models.unified import UnifiedModel
from src.utils.error_handling import ModelError
from src.utils.logging_config import get_logger
from src.utils.serialization import read_json, write_json

logger = get_logger(__name__)

ARCHIVE_VERSION = 1
MODEL_TYPES = {"unified": UnifiedModel, "adam": AdamModel}

AnyModel = Union[UnifiedModel, AdamModel]


def model_type(model: AnyModel) -> str:
    for name, cls in MODEL_TYPES.items():
        if isinstance(model, cls):
            return name
    raise ModelError(message=f"Cannot archive {type(model).__name__}", error_code="UNKNOWN_MODEL_TYPE")


def save_model(model: AnyModel, path: Union[str, Path]) -> Path:
    kind = model_type(model)
    out = write_json(path, {"format": "bodyfit-model", "version": ARCHIVE_VERSION, "type": kind, "model": model.to_dict()})
    logger.info(f"Saved {kind} model ({model.n_vertices} vertices) to {out}")
    return out


def load_model(path: Union[str, Path]) -> AnyModel:
    data = read_json(path)
    if not isinstance(data, dict) or data.get("format") != "bodyfit-model":
        raise ModelError(message=f"{path} is not a model archive", error_code="INVALID_ARCHIVE")
    if data.get("version") != ARCHIVE_VERSION:
        raise ModelError(
            message=f"Unsupported archive version {data.get('version')}",
            error_code="INVALID_ARCHIVE",
            details={"expected": ARCHIVE_VERSION},
        )
    kind = data.get("type")
    if kind not in MODEL_TYPES:
        raise ModelError(message=f"Unknown model type '{kind}'", error_code="UNKNOWN_MODEL_TYPE")
    model = MODEL_TYPES[kind].from_dict(data["model"])
    logger.info(f"Loaded {kind} model from {path}")
    return model
