"""
Fitting configuration: term weights, prior schedule, ICP thresholds, solver settings
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from src.utils.error_handling import ConfigurationError
from src.utils.serialization import read_json

STAGES = ("A", "B", "C")


@dataclass
class LMSettings:
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    initial_damping: float = 1e-3
    max_iterations: int = 50

    def validate(self) -> "LMSettings":
        if min(self.gradient_tolerance, self.step_tolerance) < 0 or self.initial_damping <= 0:
            raise ConfigurationError(
                message="Solver tolerances must be nonnegative and damping positive", error_code="INVALID_CONFIG"
            )
        if self.max_iterations < 0:
            raise ConfigurationError(message="max_iterations must be nonnegative", error_code="INVALID_CONFIG")
        return self


@dataclass
class FitConfig:
    """
    Weights are dimensionless multipliers on squared residuals (meters for
    keypoint, ICP and seam terms); the ICP angle is in radians.
    `frozen_blocks` names parameter blocks held at their initial values in every stage.
    """

    lambda_keypoints: float = 1.0
    lambda_icp: float = 1.0
    lambda_seam: float = 1.0
    prior_weights: Dict[str, float] = field(
        default_factory=lambda: {"pose": 1e-2, "shape": 1e-1, "expression": 1e-1, "scale": 1.0}
    )
    stage_prior_multipliers: Dict[str, float] = field(default_factory=lambda: {"A": 100.0, "B": 1.0, "C": 1e-4})
    stage_iterations: Dict[str, int] = field(default_factory=lambda: {"A": 30, "B": 50, "C": 30})
    icp_max_dist: float = 0.05
    icp_max_normal_angle: float = float(np.deg2rad(60.0))
    icp_rounds: int = 2
    candidate_weight: Optional[float] = None
    candidate_stride: int = 1
    frozen_blocks: List[str] = field(default_factory=list)
    lm: LMSettings = field(default_factory=LMSettings)

    def validate(self) -> "FitConfig":
        weights = [self.lambda_keypoints, self.lambda_icp, self.lambda_seam] + list(self.prior_weights.values())
        weights += list(self.stage_prior_multipliers.values())
        if self.candidate_weight is not None:
            weights.append(self.candidate_weight)
        if any(w < 0 for w in weights):
            raise ConfigurationError(message="All weights must be nonnegative", error_code="INVALID_CONFIG")
        if self.icp_rounds < 1:
            raise ConfigurationError(message="At least one ICP round is required", error_code="INVALID_CONFIG")
        if self.icp_max_dist <= 0 or not 0 < self.icp_max_normal_angle <= np.pi:
            raise ConfigurationError(message="ICP thresholds out of range", error_code="INVALID_CONFIG")
        if self.candidate_stride < 1:
            raise ConfigurationError(message="candidate_stride must be at least 1", error_code="INVALID_CONFIG")
        missing = [s for s in STAGES if s not in self.stage_prior_multipliers or s not in self.stage_iterations]
        if missing:
            raise ConfigurationError(
                message="Every stage needs a prior multiplier and an iteration cap",
                error_code="INVALID_CONFIG",
                details={"missing": missing},
            )
        self.lm.validate()
        return self

    @property
    def effective_candidate_weight(self) -> float:
        return 0.5 * self.lambda_keypoints if self.candidate_weight is None else self.candidate_weight

    def prior_weight(self, kind: str, stage: str) -> float:
        return self.prior_weights.get(kind, 0.0) * self.stage_prior_multipliers[stage]

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "FitConfig":
        data = dict(data)
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(message=f"Unknown fit settings: {unknown}", error_code="INVALID_CONFIG")
        defaults = cls()
        lm = LMSettings(**{**asdict(defaults.lm), **data.pop("lm", {})})
        for key in ("prior_weights", "stage_prior_multipliers", "stage_iterations"):
            if key in data:
                data[key] = {**getattr(defaults, key), **data[key]}
        return cls(lm=lm, **data).validate()

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "FitConfig":
        data = read_json(path)
        return cls.from_dict(data.get("fit", data))
