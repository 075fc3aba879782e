import numpy as np

from pinolab.fieldio import load_field, load_tensors, save_field, save_tensors
from pinolab.grids import Field, Grid


def test_field_roundtrip_bitexact(tmp_path):
    grid = Grid((8, 5), length=(1.0, 2.0), periodic=(True, False))
    rng = np.random.default_rng(0)
    f = Field(grid, rng.standard_normal((3, 8, 5)))
    save_field(tmp_path / "f", f)
    back = load_field(tmp_path / "f")
    assert back.grid == grid
    assert np.array_equal(back.values, f.values)


def test_tensor_roundtrip_with_complex_and_header(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "w": rng.standard_normal((4, 3)),
        "r": rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)),
        "b": rng.standard_normal(5),
    }
    save_tensors(tmp_path / "ckpt", tensors, extra={"config": {"width": 4}})
    back, extra = load_tensors(tmp_path / "ckpt")
    assert extra == {"config": {"width": 4}}
    assert list(back) == ["w", "r", "b"]
    for name in tensors:
        assert np.array_equal(back[name], tensors[name])
        assert back[name].dtype == tensors[name].dtype
