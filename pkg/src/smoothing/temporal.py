"""
Flow-based temporal smoothing of per-frame fits

Each pass propagates every fitted mesh to its neighbours, keeps the
forward-backward consistent candidates, and re-fits each frame with all
candidate positions as extra vertex targets. Frames in one pass refit from the
previous pass's results only. A refit resumes the final, data-driven stage from
the current parameters, and a pass that would raise the jitter is discarded.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from src.fitting.config import FitConfig
from src.fitting.fitter import FitResult, fit_frame
from src.fitting.residuals import VertexTargets
from src.measurements.frames import MeasurementFrame
from src.smoothing.flow import VertexFlowField
from src.utils.error_handling import FittingError
from src.utils.logging_config import get_logger

logger = get_logger(__name__)

DEFAULT_EPSILON = 0.005
DEFAULT_PASSES = 3
SOURCES = ("original", "forward", "backward")
REFIT_STAGES = ("C",)


@dataclass
class CandidateSet:
    """Candidate positions per vertex, tagged by where they came from"""

    frame: int
    positions: Dict[str, np.ndarray] = field(default_factory=dict)
    valid: Dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, source: str, positions: np.ndarray, valid: np.ndarray) -> None:
        if source not in SOURCES:
            raise FittingError(message=f"Unknown candidate source '{source}'", error_code="UNKNOWN_SOURCE")
        self.positions[source] = np.asarray(positions, dtype=float)
        self.valid[source] = np.asarray(valid, dtype=bool)

    def counts(self) -> np.ndarray:
        return sum(v.astype(int) for v in self.valid.values()) if self.valid else np.zeros(0, dtype=int)

    def targets(self, sources: Iterable[str] = SOURCES) -> VertexTargets:
        vertices, positions = [], []
        for source in sources:
            if source in self.positions:
                idx = np.flatnonzero(self.valid[source])
                vertices.append(idx)
                positions.append(self.positions[source][idx])
        if not vertices:
            return VertexTargets(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))
        return VertexTargets(np.concatenate(vertices), np.concatenate(positions))


@dataclass
class Propagation:
    """Candidates a frame's mesh contributes to its neighbours"""

    next_positions: Optional[np.ndarray] = None
    next_valid: Optional[np.ndarray] = None
    prev_positions: Optional[np.ndarray] = None
    prev_valid: Optional[np.ndarray] = None


def propagate_candidates(
    vertices: np.ndarray,
    flow: VertexFlowField,
    next_flow: Optional[VertexFlowField] = None,
    prev_flow: Optional[VertexFlowField] = None,
    epsilon: float = DEFAULT_EPSILON,
) -> Propagation:
    """
    Move frame t's vertices to t+1 and t-1

    A forward candidate survives when flow t->t+1 followed by the t+1->t flow
    returns within epsilon of the start; backward candidates are checked
    symmetrically. Invalid flows produce no candidate.
    """
    vertices = np.asarray(vertices, dtype=float)
    out = Propagation()
    if next_flow is not None:
        roundtrip = np.linalg.norm(flow.forward + next_flow.backward, axis=1)
        out.next_valid = flow.forward_valid & next_flow.backward_valid & (roundtrip <= epsilon)
        out.next_positions = vertices + flow.forward
    if prev_flow is not None:
        roundtrip = np.linalg.norm(flow.backward + prev_flow.forward, axis=1)
        out.prev_valid = flow.backward_valid & prev_flow.forward_valid & (roundtrip <= epsilon)
        out.prev_positions = vertices + flow.backward
    return out


def jitter(meshes: Sequence[np.ndarray]) -> float:
    """Sum over consecutive frames of the mean per-vertex displacement"""
    return float(
        sum(np.linalg.norm(np.asarray(b) - np.asarray(a), axis=1).mean() for a, b in zip(meshes[:-1], meshes[1:]))
    )


def _nearest_fitted(frame: int, fitted: Sequence[int]) -> Optional[int]:
    if not fitted:
        return None
    return min(fitted, key=lambda f: (abs(f - frame), f))


def build_candidates(
    model,
    fits: Mapping[int, FitResult],
    flows: Mapping[int, VertexFlowField],
    frames: Sequence[int],
    epsilon: float = DEFAULT_EPSILON,
) -> Dict[int, CandidateSet]:
    meshes = {t: model.evaluate(fit.params).vertices for t, fit in fits.items()}
    candidates = {t: CandidateSet(t) for t in frames}
    for t, vertices in meshes.items():
        candidates.setdefault(t, CandidateSet(t)).add("original", vertices, np.ones(len(vertices), dtype=bool))
        if t not in flows:
            continue
        prop = propagate_candidates(vertices, flows[t], flows.get(t + 1), flows.get(t - 1), epsilon)
        if prop.next_positions is not None and t + 1 in candidates:
            candidates[t + 1].add("forward", prop.next_positions, prop.next_valid)
        if prop.prev_positions is not None and t - 1 in candidates:
            candidates[t - 1].add("backward", prop.prev_positions, prop.prev_valid)
    return candidates


@dataclass
class _RefitTask:
    model: object
    frame: MeasurementFrame
    config: FitConfig
    init: object
    targets: VertexTargets


def _refit(task: _RefitTask) -> FitResult:
    return fit_frame(task.model, task.frame, task.config, init=task.init, stages=REFIT_STAGES, candidates=task.targets)


def smooth_sequence(
    model,
    frames: Mapping[int, MeasurementFrame],
    fits: Mapping[int, FitResult],
    flows: Mapping[int, VertexFlowField],
    config: Optional[FitConfig] = None,
    passes: int = DEFAULT_PASSES,
    epsilon: float = DEFAULT_EPSILON,
    map_fn: Callable = map,
) -> Dict[int, FitResult]:
    """
    Re-fit a contiguous frame range with propagated candidates

    Frames without a fit start from the nearest fitted frame. A frame whose only
    candidate is its own mesh passes through unchanged. `map_fn` maps the per-frame
    refit over tasks in frame order, so a process pool can be plugged in.
    """
    config = config or FitConfig()
    order = sorted(frames)
    current: Dict[int, FitResult] = {t: fits[t] for t in order if t in fits}
    if not current:
        logger.warning("No fitted frames to smooth")
        return {}

    for p in range(passes):
        candidates = build_candidates(model, current, flows, order, epsilon)
        tasks: List[_RefitTask] = []
        task_frames: List[int] = []
        for t in order:
            cset = candidates[t]
            if not ({"forward", "backward"} & set(cset.positions)):
                continue
            source = t if t in current else _nearest_fitted(t, sorted(current))
            tasks.append(_RefitTask(model, frames[t], config, current[source].params, cset.targets()))
            task_frames.append(t)
        refit = dict(zip(task_frames, map_fn(_refit, tasks)))
        # compared over the frames fitted before this pass
        kept = sorted(current)
        before = jitter([model.evaluate(current[t].params).vertices for t in kept])
        updated = {**current, **refit}
        after = jitter([model.evaluate(updated[t].params).vertices for t in kept])
        if after > before:
            logger.warning(f"Smoothing pass {p + 1}/{passes} raised jitter {before:.6f} -> {after:.6f} m; kept previous fits")
            current = {**{t: r for t, r in refit.items() if t not in current}, **current}
            break
        current = updated
        logger.info(f"Smoothing pass {p + 1}/{passes}: jitter {before:.6f} -> {after:.6f} m over {len(task_frames)} refits")
    return {t: current[t] for t in sorted(current)}
