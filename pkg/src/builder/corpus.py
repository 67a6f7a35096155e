"""
Corpus of per-frame fits the Adam model is built from

On disk a corpus is a directory holding `corpus.json` (manifest) plus the
referenced fit, keypoint, mesh and cloud files.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np

from src.fitting.fitter import FitResult, read_fit, write_fit
from src.geometry.mesh import Mesh, OrientedPointCloud
from src.geometry.mesh_io import read_obj, read_ply, write_obj, write_ply
from src.measurements.frames import MeasurementFrame
from src.measurements.io import read_keypoints, write_keypoints
from src.models.parameters import ParameterLayout, ParameterVector
from src.utils.error_handling import ModelBuildError
from src.utils.logging_config import get_logger
from src.utils.serialization import read_json, write_json

logger = get_logger(__name__)

CORPUS_FORMAT = "bodyfit-corpus"
CORPUS_VERSION = 1


@dataclass
class CorpusEntry:
    subject: str
    frame: int
    params: ParameterVector
    vertices: np.ndarray
    measurement: MeasurementFrame

    @property
    def key(self) -> str:
        return f"{self.subject}_f{self.frame:04d}"


class FitCorpus:
    """Fitted frames of many subjects sharing one model topology"""

    def __init__(self, entries: List[CorpusEntry]):
        self.entries = list(entries)
        keys = [e.key for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ModelBuildError(message="Corpus entries must be unique per (subject, frame)", error_code="DUPLICATE_ENTRY")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[CorpusEntry]:
        return iter(self.entries)

    @property
    def subjects(self) -> List[str]:
        return sorted({e.subject for e in self.entries})

    def vertices(self) -> np.ndarray:
        return np.stack([e.vertices for e in self.entries])

    def check(self, model, tol: float = 1e-9) -> None:
        """Every stored mesh must equal the model re-evaluated at the stored parameters"""
        bad: Dict[str, float] = {}
        for entry in self.entries:
            error = float(np.abs(model.evaluate(entry.params).vertices - entry.vertices).max())
            if error > tol:
                bad[entry.key] = error
        if bad:
            raise ModelBuildError(
                message=f"{len(bad)} corpus meshes disagree with their parameters",
                error_code="INCONSISTENT_CORPUS",
                details={"entries": bad},
            )

    @classmethod
    def from_fits(
        cls, model, subject_fits: Dict[str, List[FitResult]], frames: Dict[str, List[MeasurementFrame]]
    ) -> "FitCorpus":
        entries = []
        for subject in sorted(subject_fits):
            by_frame = {m.frame: m for m in frames[subject]}
            for fit in subject_fits[subject]:
                vertices = model.evaluate(fit.params).vertices
                entries.append(CorpusEntry(subject, fit.frame, fit.params, vertices, by_frame[fit.frame]))
        return cls(entries)


def write_corpus(
    directory: Union[str, Path], corpus: FitCorpus, triangles: np.ndarray, fits: Optional[Dict[str, FitResult]] = None
) -> Path:
    """Fits keyed by entry key keep their costs and diagnostics; others are written parameters-only"""
    directory = Path(directory)
    records = []
    for entry in corpus:
        key = entry.key
        fit = (fits or {}).get(key) or FitResult(entry.frame, entry.params, {})
        write_fit(directory / "fits" / f"{key}.json", fit)
        write_keypoints(directory / "keypoints" / f"{key}.json", entry.frame, entry.measurement.keypoints)
        write_obj(Mesh(entry.vertices, triangles), directory / "meshes" / f"{key}.obj")
        record = {
            "subject": entry.subject,
            "frame": entry.frame,
            "fit": f"fits/{key}.json",
            "keypoints": f"keypoints/{key}.json",
            "mesh": f"meshes/{key}.obj",
            "cloud": None,
        }
        if len(entry.measurement.cloud):
            write_ply(entry.measurement.cloud, directory / "clouds" / f"{key}.ply")
            record["cloud"] = f"clouds/{key}.ply"
        records.append(record)
    layout = corpus.entries[0].params.layout.to_dict() if len(corpus) else None
    return write_json(
        directory / "corpus.json", {"format": CORPUS_FORMAT, "version": CORPUS_VERSION, "layout": layout, "entries": records}
    )


def read_corpus(directory: Union[str, Path]) -> FitCorpus:
    directory = Path(directory)
    manifest = read_json(directory / "corpus.json")
    if manifest.get("format") != CORPUS_FORMAT or manifest.get("version") != CORPUS_VERSION:
        raise ModelBuildError(message=f"{directory} is not a version {CORPUS_VERSION} corpus", error_code="INVALID_CORPUS")
    layout = ParameterLayout.from_dict(manifest["layout"]) if manifest.get("layout") else None
    entries = []
    for record in manifest["entries"]:
        fit = read_fit(directory / record["fit"], layout)
        keypoints = read_keypoints(directory / record["keypoints"]).keypoints
        cloud = read_ply(directory / record["cloud"]) if record.get("cloud") else OrientedPointCloud.empty()
        mesh = read_obj(directory / record["mesh"])
        measurement = MeasurementFrame(int(record["frame"]), keypoints, cloud)
        entries.append(CorpusEntry(record["subject"], int(record["frame"]), fit.params, mesh.vertices.copy(), measurement))
    logger.info(f"Loaded corpus of {len(entries)} frames from {directory}")
    return FitCorpus(entries)
