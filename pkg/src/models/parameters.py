"""
Named parameter blocks shared by the model evaluators and the fitter
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.error_handling import ModelError, dimension_error

BLOCK_KINDS = ("translation", "pose", "shape", "expression", "scale")


@dataclass(frozen=True)
class ParameterBlock:
    name: str
    size: int
    kind: str
    prior_mean: float = 0.0

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ModelError(message=f"Unknown parameter kind '{self.kind}'", error_code="UNKNOWN_PARAMETER_KIND")


@dataclass(frozen=True)
class ParameterLayout:
    """
    Ordered blocks covering the parameter vector exactly

    `frozen` holds global indices never optimized; `unregularized` holds indices without a prior.
    """

    blocks: Tuple[ParameterBlock, ...]
    frozen: Tuple[int, ...] = ()
    unregularized: Tuple[int, ...] = ()
    _offsets: Dict[str, Tuple[int, int]] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        offsets: Dict[str, Tuple[int, int]] = {}
        start = 0
        for block in self.blocks:
            if block.name in offsets:
                raise ModelError(message=f"Duplicate parameter block '{block.name}'", error_code="DUPLICATE_BLOCK")
            offsets[block.name] = (start, start + block.size)
            start += block.size
        object.__setattr__(self, "_offsets", offsets)
        object.__setattr__(self, "frozen", tuple(sorted(int(i) for i in self.frozen)))
        object.__setattr__(self, "unregularized", tuple(sorted(int(i) for i in self.unregularized)))
        for index in self.frozen + self.unregularized:
            if not 0 <= index < start:
                raise ModelError(message=f"Parameter index {index} outside layout", error_code="INVALID_INDEX")

    @property
    def size(self) -> int:
        return sum(block.size for block in self.blocks)

    @property
    def names(self) -> List[str]:
        return [block.name for block in self.blocks]

    def has(self, name: str) -> bool:
        return name in self._offsets

    def block(self, name: str) -> ParameterBlock:
        for block in self.blocks:
            if block.name == name:
                return block
        raise ModelError(message=f"Unknown parameter block '{name}'", error_code="UNKNOWN_BLOCK")

    def slice(self, name: str) -> slice:
        if name not in self._offsets:
            raise ModelError(message=f"Unknown parameter block '{name}'", error_code="UNKNOWN_BLOCK")
        start, stop = self._offsets[name]
        return slice(start, stop)

    def indices(self, name: str) -> np.ndarray:
        s = self.slice(name)
        return np.arange(s.start, s.stop)

    def prior_means(self) -> np.ndarray:
        return np.concatenate([np.full(block.size, block.prior_mean) for block in self.blocks]) if self.blocks else np.zeros(0)

    def kinds(self) -> np.ndarray:
        return np.concatenate([np.full(block.size, block.kind, dtype=object) for block in self.blocks])

    def frozen_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[list(self.frozen)] = True
        return mask

    def zeros(self) -> "ParameterVector":
        """Parameters at their prior means"""
        return ParameterVector(self, self.prior_means())

    def to_dict(self) -> Dict:
        return {
            "blocks": [
                {"name": b.name, "size": b.size, "kind": b.kind, "prior_mean": b.prior_mean} for b in self.blocks
            ],
            "frozen": list(self.frozen),
            "unregularized": list(self.unregularized),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ParameterLayout":
        return cls(
            tuple(
                ParameterBlock(b["name"], int(b["size"]), b["kind"], float(b.get("prior_mean", 0.0))) for b in data["blocks"]
            ),
            tuple(data.get("frozen", ())),
            tuple(data.get("unregularized", ())),
        )


@dataclass
class ParameterVector:
    layout: ParameterLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float).reshape(-1)
        if len(self.values) != self.layout.size:
            raise dimension_error(ModelError, "parameter vector", self.layout.size, len(self.values))

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.layout.slice(name)]

    def block(self, name: str) -> np.ndarray:
        return self[name]

    def set_block(self, name: str, values: Iterable[float]) -> "ParameterVector":
        """Copy with one block replaced"""
        out = self.copy()
        target = out.layout.slice(name)
        values = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float).reshape(-1)
        if len(values) != target.stop - target.start:
            raise dimension_error(ModelError, f"block '{name}'", target.stop - target.start, len(values))
        out.values[target] = values
        return out

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.layout, self.values.copy())

    def to_dict(self) -> Dict:
        return {name: self[name].tolist() for name in self.layout.names}

    @classmethod
    def from_dict(cls, layout: ParameterLayout, data: Dict) -> "ParameterVector":
        missing = [name for name in layout.names if name not in data]
        extra = [name for name in data if not layout.has(name)]
        if missing or extra:
            raise ModelError(
                message="Parameter blocks do not match the model layout",
                error_code="BLOCK_MISMATCH",
                details={"missing": missing, "unexpected": extra},
            )
        values = np.concatenate([np.asarray(data[name], dtype=float).reshape(-1) for name in layout.names])
        return cls(layout, values)


def block_rmse(
    reference: ParameterVector, estimate: ParameterVector, kinds: Optional[Sequence[str]] = None
) -> Dict[str, float]:
    """RMSE per parameter kind over the free, shared blocks"""
    layout = reference.layout
    free = ~layout.frozen_mask()
    out: Dict[str, float] = {}
    for kind in kinds or BLOCK_KINDS:
        mask = free & (layout.kinds() == kind)
        if mask.any():
            diff = reference.values[mask] - estimate.values[mask]
            out[kind] = float(np.sqrt(np.mean(diff**2)))
    return out
