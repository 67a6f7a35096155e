"""
Linear shape space from unposed corpus meshes
"""

import warnings
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from sklearn.decomposition import PCA

from src.utils.error_handling import ModelBuildError
from src.utils.logging_config import get_logger, log_function_call

logger = get_logger(__name__)


@dataclass(frozen=True)
class ShapeSpace:
    """
    mean (N, 3) plus orthonormal components (K, N, 3) with per-component std

    `basis` scales each component by its std, so unit-normal coefficients
    reproduce the corpus spread.
    """

    mean: np.ndarray
    components: np.ndarray
    std: np.ndarray
    singular_values: np.ndarray
    explained_variance_ratio: np.ndarray
    requested_components: int

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def basis(self) -> np.ndarray:
        return np.einsum("kna,k->nak", self.components, self.std)

    def project(self, meshes: np.ndarray, k: Optional[int] = None) -> np.ndarray:
        """Orthonormal-component coefficients (M, k)"""
        k = self.n_components if k is None else k
        centered = np.asarray(meshes, dtype=float).reshape(len(meshes), -1) - self.mean.ravel()
        return centered @ self._flat_components(k).T

    def reconstruct(self, meshes: np.ndarray, k: Optional[int] = None) -> np.ndarray:
        k = self.n_components if k is None else k
        coefficients = self.project(meshes, k)
        flat = self.mean.ravel() + coefficients @ self._flat_components(k)
        return flat.reshape(np.shape(meshes))

    def _flat_components(self, k: int) -> np.ndarray:
        # explicit width so k = 0 gives an empty (0, 3N) basis
        return self.components[:k].reshape(k, self.mean.size)

    def reconstruction_errors(self, meshes: np.ndarray) -> np.ndarray:
        """RMS vertex error for k = 0..K retained components"""
        meshes = np.asarray(meshes, dtype=float)
        return np.array(
            [float(np.sqrt(np.mean((self.reconstruct(meshes, k) - meshes) ** 2))) for k in range(self.n_components + 1)]
        )

    def to_dict(self) -> Dict:
        return {
            "singular_values": self.singular_values.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
            "n_components": self.n_components,
            "requested_components": self.requested_components,
        }


def remove_translation(meshes: np.ndarray) -> np.ndarray:
    """Shift every mesh so its centroid equals the corpus-average centroid"""
    meshes = np.asarray(meshes, dtype=float)
    centroids = meshes.mean(axis=1, keepdims=True)
    return meshes - centroids + centroids.mean(axis=0, keepdims=True)


@log_function_call(logger)
def build_shape_space(meshes: np.ndarray, n_components: int = 40, center_translation: bool = True) -> ShapeSpace:
    """PCA over (M, N, 3) rest-pose meshes; K is capped at M - 1 with a warning"""
    meshes = np.asarray(meshes, dtype=float)
    if meshes.ndim != 3 or meshes.shape[2] != 3:
        raise ModelBuildError(message=f"Expected (M, N, 3) meshes, got {meshes.shape}", error_code="DIMENSION_MISMATCH")
    n_meshes, n_vertices = meshes.shape[:2]
    if n_meshes < 2:
        raise ModelBuildError(message="A shape space needs at least two meshes", error_code="INSUFFICIENT_CORPUS")
    if center_translation:
        meshes = remove_translation(meshes)

    k = min(n_components, n_meshes - 1, 3 * n_vertices)
    if k < n_components:
        logger.warning(f"Corpus of {n_meshes} meshes supports {k} components; reducing K from {n_components}")

    flat = meshes.reshape(n_meshes, -1)
    pca = PCA(n_components=k, svd_solver="full")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pca.fit(flat)

    total = float(((flat - flat.mean(axis=0)) ** 2).sum()) / max(n_meshes - 1, 1)
    variance = np.clip(pca.explained_variance_, 0.0, None)
    ratio = variance / total if total > 0 else np.zeros(k)
    singular = pca.singular_values_ if total > 0 else np.zeros(k)
    space = ShapeSpace(
        mean=pca.mean_.reshape(n_vertices, 3),
        components=pca.components_.reshape(k, n_vertices, 3),
        std=np.sqrt(variance) if total > 0 else np.zeros(k),
        singular_values=np.asarray(singular, dtype=float),
        explained_variance_ratio=np.asarray(ratio, dtype=float),
        requested_components=n_components,
    )
    logger.info(f"Shape space: {k} components explain {float(ratio.sum()) * 100:.2f}% of corpus variance")
    return space
