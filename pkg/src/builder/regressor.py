"""
Re-learn keypoint regressor rows from fitted meshes and their detections
"""

from typing import Dict, List, Tuple

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import cKDTree

from src.builder.corpus import FitCorpus
from src.measurements.keypoints import MAX_SUPPORT, KeypointRegressor
from src.utils.error_handling import ModelBuildError
from src.utils.logging_config import get_logger, log_data_operation

logger = get_logger(__name__)

MIN_FRAMES = 20
SUM_TO_ONE_WEIGHT = 1e3


def _row_residual(meshes: np.ndarray, targets: np.ndarray, indices: np.ndarray, weights: np.ndarray) -> float:
    predicted = np.einsum("k,fka->fa", weights, meshes[:, indices])
    return float(np.linalg.norm(predicted - targets, axis=1).mean())


def _observations(corpus: FitCorpus, keypoint_id: str) -> Tuple[np.ndarray, np.ndarray]:
    meshes, targets = [], []
    for entry in corpus:
        k = entry.measurement.keypoint(keypoint_id)
        if k is not None:
            meshes.append(entry.vertices)
            targets.append(k.position)
    if not meshes:
        return np.zeros((0, 0, 3)), np.zeros((0, 3))
    return np.stack(meshes), np.stack(targets)


def fit_row(meshes: np.ndarray, targets: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Nonnegative weights over `candidates` minimizing the squared target error, renormalized to sum 1"""
    F = len(meshes)
    A = meshes[:, candidates].transpose(0, 2, 1).reshape(3 * F, len(candidates))
    b = targets.reshape(3 * F)
    scale = SUM_TO_ONE_WEIGHT * max(1.0, float(np.abs(A).max()))
    A = np.vstack([A, np.full((1, len(candidates)), scale)])
    b = np.append(b, scale)
    weights, _ = nnls(A, b, maxiter=50 * len(candidates))
    total = weights.sum()
    if total <= 0:
        raise ModelBuildError(message="Regressor row collapsed to zero", error_code="DEGENERATE_ROW")
    return weights / total


@log_data_operation(logger, "regress_keypoint_targets")
def regress_keypoint_targets(
    corpus: FitCorpus,
    regressor: KeypointRegressor,
    rest_vertices: np.ndarray,
    min_frames: int = MIN_FRAMES,
    support_size: int = MAX_SUPPORT,
) -> Tuple[KeypointRegressor, Dict[str, Dict]]:
    """
    Per keypoint, nonnegative sum-to-one weights over the rest-pose nearest vertices

    Candidates are the `support_size` vertices closest to the row's current
    rest-pose prediction. Rows with fewer than `min_frames` detections, or whose
    new residual is not below the current one, keep the current weights. Only the
    regressor changes; skeleton joints are untouched.
    """
    rest_vertices = np.asarray(rest_vertices, dtype=float)
    support_size = min(support_size, MAX_SUPPORT, len(rest_vertices))
    tree = cKDTree(rest_vertices)
    rest_targets = regressor.predict(rest_vertices)

    rows: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    audit: Dict[str, Dict] = {}
    kept: List[str] = []
    for r, keypoint_id in enumerate(regressor.ids):
        meshes, targets = _observations(corpus, keypoint_id)
        if len(meshes) < min_frames:
            audit[keypoint_id] = {"frames": len(meshes), "status": "insufficient_frames"}
            kept.append(keypoint_id)
            continue
        indices, weights = regressor.support(keypoint_id)
        before = _row_residual(meshes, targets, indices, weights)

        _, candidates = tree.query(rest_targets[r], k=support_size)
        candidates = np.sort(np.atleast_1d(candidates))
        new_weights = fit_row(meshes, targets, candidates)
        after = _row_residual(meshes, targets, candidates, new_weights)
        if after <= before:
            rows[keypoint_id] = (candidates, new_weights)
            audit[keypoint_id] = {"frames": len(meshes), "status": "regressed", "before": before, "after": after}
        else:
            audit[keypoint_id] = {"frames": len(meshes), "status": "kept", "before": before, "after": before}
            kept.append(keypoint_id)

    if kept:
        logger.info(f"{len(kept)} of {len(regressor.ids)} regressor rows kept their prior weights")
    return regressor.with_rows(rows), audit


def corpus_residual(corpus: FitCorpus, regressor: KeypointRegressor) -> float:
    """Mean ||J_i V - y_i|| over every detection the regressor can predict"""
    errors = []
    for entry in corpus:
        predicted = regressor.predict(entry.vertices)
        for k in entry.measurement.keypoints:
            r = regressor.row(k.keypoint_id)
            if r is not None:
                errors.append(np.linalg.norm(predicted[r] - k.position))
    return float(np.mean(errors)) if errors else 0.0
