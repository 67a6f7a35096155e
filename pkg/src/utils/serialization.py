"""
Deterministic JSON helpers shared by every archive and report writer
"""

import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import scipy.sparse as sp

from src.utils.error_handling import ErrorHandler
from src.utils.logging_config import get_logger

logger = get_logger(__name__)


def to_jsonable(value: Any) -> Any:
    """Convert numpy/scipy containers into plain JSON types"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if sp.issparse(value):
        return sparse_to_dict(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    return value


def sparse_to_dict(matrix: sp.spmatrix) -> Dict[str, Any]:
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    return {
        "shape": [int(coo.shape[0]), int(coo.shape[1])],
        "row": coo.row[order].astype(int).tolist(),
        "col": coo.col[order].astype(int).tolist(),
        "data": coo.data[order].astype(float).tolist(),
    }


def sparse_from_dict(data: Dict[str, Any]) -> sp.csr_matrix:
    shape = tuple(int(n) for n in data["shape"])
    return sp.csr_matrix(
        (np.asarray(data["data"], dtype=float), (np.asarray(data["row"], dtype=int), np.asarray(data["col"], dtype=int))),
        shape=shape,
    )


def dumps(payload: Any) -> str:
    """Render JSON with sorted keys so reruns are byte-identical"""
    return json.dumps(to_jsonable(payload), indent=2, sort_keys=True) + "\n"


def write_json(path: Union[str, Path], payload: Any) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(payload))
    except OSError as e:
        raise ErrorHandler(logger).handle_file_error("write_json", str(path), e)
    return path


def read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    try:
        with open(path, "r") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ErrorHandler(logger).handle_file_error("read_json", str(path), e)
