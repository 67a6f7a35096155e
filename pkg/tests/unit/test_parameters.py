import numpy as np
import pytest

from src.models.parameters import ParameterBlock, ParameterLayout, ParameterVector, block_rmse
from src.utils.error_handling import ModelError

LAYOUT = ParameterLayout(
    (
        ParameterBlock("translation", 3, "translation"),
        ParameterBlock("pose", 6, "pose"),
        ParameterBlock("shape", 2, "shape"),
        ParameterBlock("scale", 3, "scale", prior_mean=1.0),
    ),
    frozen=(5,),
    unregularized=(0, 1, 2),
)


def test_layout_slices_and_priors():
    assert LAYOUT.size == 14
    assert LAYOUT.slice("shape") == slice(9, 11)
    assert LAYOUT.indices("scale").tolist() == [11, 12, 13]
    assert LAYOUT.prior_means()[11:].tolist() == [1.0, 1.0, 1.0]
    assert LAYOUT.frozen_mask().sum() == 1
    assert ParameterLayout.from_dict(LAYOUT.to_dict()) == LAYOUT


def test_layout_rejects_bad_definitions():
    with pytest.raises(ModelError) as info:
        ParameterLayout((ParameterBlock("a", 1, "pose"), ParameterBlock("a", 1, "pose")))
    assert info.value.error_code == "DUPLICATE_BLOCK"
    with pytest.raises(ModelError) as info:
        ParameterLayout((ParameterBlock("a", 1, "pose"),), frozen=(4,))
    assert info.value.error_code == "INVALID_INDEX"
    with pytest.raises(ModelError) as info:
        ParameterBlock("a", 1, "colour")
    assert info.value.error_code == "UNKNOWN_PARAMETER_KIND"


def test_vector_blocks_are_copied_on_write():
    params = LAYOUT.zeros()
    updated = params.set_block("shape", [0.5, -0.5])
    assert params["shape"].tolist() == [0.0, 0.0], "set_block must not modify the original"
    assert updated["shape"].tolist() == [0.5, -0.5]
    with pytest.raises(ModelError) as info:
        params.set_block("shape", [1.0])
    assert info.value.error_code == "DIMENSION_MISMATCH"


def test_vector_dict_roundtrip_checks_blocks():
    params = LAYOUT.zeros().set_block("pose", np.arange(6.0))
    restored = ParameterVector.from_dict(LAYOUT, params.to_dict())
    assert np.array_equal(restored.values, params.values)
    data = params.to_dict()
    data.pop("shape")
    data["extra"] = [1.0]
    with pytest.raises(ModelError) as info:
        ParameterVector.from_dict(LAYOUT, data)
    assert info.value.error_code == "BLOCK_MISMATCH"
    assert info.value.details == {"missing": ["shape"], "unexpected": ["extra"]}


def test_block_rmse_skips_frozen_entries():
    reference = LAYOUT.zeros()
    estimate = reference.copy()
    estimate.values[5] = 100.0  # frozen
    estimate.values[3] = 0.6
    estimate.values[9:11] = [0.3, -0.3]
    rmse = block_rmse(reference, estimate)
    assert rmse["pose"] == pytest.approx(np.sqrt(0.36 / 5))
    assert rmse["shape"] == pytest.approx(0.3)
    assert rmse["translation"] == 0.0
    assert set(block_rmse(reference, estimate, kinds=["shape"])) == {"shape"}
