"""
Run configuration: one JSON file with `run`, `fit`, `synth`, `build`,
`pipeline` and `acceptance` sections; command-line flags override file values
"""

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

from src.builder.adam_builder import BuildConfig
from src.fitting.config import FitConfig
from src.measurements.synthesis import NoiseSpec
from src.models.synthetic import SyntheticModelConfig
from src.smoothing.temporal import DEFAULT_EPSILON, DEFAULT_PASSES
from src.utils.error_handling import ConfigurationError
from src.utils.logging_config import get_logger
from src.utils.serialization import read_json

logger = get_logger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _known(cls, data: Dict[str, Any], section: str) -> Dict[str, Any]:
    unknown = sorted(set(data) - set(cls.__dataclass_fields__))
    if unknown:
        raise ConfigurationError(message=f"Unknown {section} settings: {unknown}", error_code="INVALID_CONFIG")
    return data


@dataclass
class SynthConfig:
    """Synthetic capture: subjects, frames, camera rig and measurement noise"""

    subjects: int = 8
    frames: int = 5
    views: int = 8
    mask_views: int = 5
    width: int = 640
    height: int = 480
    focal: float = 500.0
    rig_radius: float = 3.0
    rig_height: float = 1.2
    shape_std: float = 1.0
    pose_std: float = 0.15
    motion: float = 0.5
    flow_sigma: float = 0.0
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(cloud_points=0))
    model: SyntheticModelConfig = field(default_factory=SyntheticModelConfig)

    def validate(self) -> "SynthConfig":
        if self.subjects < 1 or self.frames < 1 or self.views < 2:
            raise ConfigurationError(
                message="Synthesis needs at least one subject, one frame and two views", error_code="INVALID_CONFIG"
            )
        if not 0 <= self.mask_views <= self.views:
            raise ConfigurationError(message="mask_views must lie in [0, views]", error_code="INVALID_CONFIG")
        if not 0.0 <= self.motion <= 1.0:
            raise ConfigurationError(message="motion must lie in [0, 1]", error_code="INVALID_CONFIG")
        self.noise.validate()
        self.model.validate()
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SynthConfig":
        data = dict(_known(cls, data, "synth"))
        noise = NoiseSpec.from_dict({**asdict(NoiseSpec()), **data.pop("noise", {})})
        model = SyntheticModelConfig.from_dict({**asdict(SyntheticModelConfig()), **data.pop("model", {})})
        return cls(noise=noise, model=model, **data).validate()


@dataclass
class PipelineConfig:
    sequence_subject: int = 0
    smooth_passes: int = DEFAULT_PASSES
    smooth_epsilon: float = DEFAULT_EPSILON
    check_corpus: bool = True
    plots: bool = False

    def validate(self) -> "PipelineConfig":
        if self.smooth_passes < 0 or self.smooth_epsilon <= 0:
            raise ConfigurationError(message="Invalid smoothing settings", error_code="INVALID_CONFIG")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "PipelineConfig":
        return cls(**_known(cls, data, "pipeline")).validate()


@dataclass
class AcceptanceConfig:
    """Thresholds the pipeline report is checked against; None disables a check"""

    min_overlap_mean: Optional[float] = 90.0
    max_joint_rmse_mm: Optional[float] = 15.0
    max_regressor_residual_mm: Optional[float] = None
    require_jitter_decrease: bool = False

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "AcceptanceConfig":
        return cls(**_known(cls, data, "acceptance"))


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    log_level: str = "INFO"
    fit: FitConfig = field(default_factory=FitConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    build: BuildConfig = field(default_factory=BuildConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    acceptance: AcceptanceConfig = field(default_factory=AcceptanceConfig)

    def validate(self) -> "RunConfig":
        if self.workers < 1:
            raise ConfigurationError(message="workers must be >= 1", error_code="INVALID_CONFIG")
        if self.seed < 0:
            raise ConfigurationError(message="seed must be nonnegative", error_code="INVALID_CONFIG")
        if self.log_level.upper() not in LOG_LEVELS:
            raise ConfigurationError(message=f"Unknown log level {self.log_level}", error_code="INVALID_CONFIG")
        self.fit.validate()
        self.synth.validate()
        self.pipeline.validate()
        return self

    def to_dict(self) -> Dict:
        """Numerical settings only; `workers` and `log_level` never change results"""
        return {
            "run": {"seed": self.seed},
            "fit": self.fit.to_dict(),
            "synth": self.synth.to_dict(),
            "build": self.build.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "acceptance": self.acceptance.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RunConfig":
        unknown = sorted(set(data) - {"run", "fit", "synth", "build", "pipeline", "acceptance"})
        if unknown:
            raise ConfigurationError(message=f"Unknown config sections: {unknown}", error_code="INVALID_CONFIG")
        run = dict(data.get("run", {}))
        extra = sorted(set(run) - {"seed", "workers", "log_level"})
        if extra:
            raise ConfigurationError(message=f"Unknown run settings: {extra}", error_code="INVALID_CONFIG")
        return cls(
            seed=int(run.get("seed", 0)),
            workers=int(run.get("workers", 1)),
            log_level=str(run.get("log_level", "INFO")),
            fit=FitConfig.from_dict(data.get("fit", {})),
            synth=SynthConfig.from_dict(data.get("synth", {})),
            build=BuildConfig.from_dict(data.get("build", {})),
            pipeline=PipelineConfig.from_dict(data.get("pipeline", {})),
            acceptance=AcceptanceConfig.from_dict(data.get("acceptance", {})),
        ).validate()

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "RunConfig":
        if path is None:
            return cls().validate()
        logger.info(f"Loading run configuration from {path}")
        return cls.from_dict(read_json(path))

    def with_overrides(self, **flags: Any) -> "RunConfig":
        """
        Apply command-line values over file values; None means "not given"

        Keys are `seed`, `workers`, `log_level` or dotted `section.field` paths.
        """
        data = self.to_dict()
        run = {"seed": self.seed, "workers": self.workers, "log_level": self.log_level}
        for key, value in flags.items():
            if value is None:
                continue
            if key in run:
                run[key] = value
                continue
            section, _, name = key.partition(".")
            if section not in data or not name:
                raise ConfigurationError(message=f"Unknown override '{key}'", error_code="INVALID_CONFIG")
            data[section][name] = value
        data["run"] = run
        return RunConfig.from_dict(data)
