import csv

import numpy as np
import pytest

from mfg_decode.forward import measure
from mfg_decode.grid import Grid
from mfg_decode.io import (
    read_container,
    write_cauchy_csv,
    write_container,
    write_field_csv,
    write_fields_csv,
    write_rows_csv,
)


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(line for line in fh if not line.startswith("#")))


@pytest.mark.parametrize("complex_", [False, True])
def test_container_round_trip(tmp_path, complex_):
    g = Grid.unit(5, dim=2, n_time=3)
    v = np.random.default_rng(0).standard_normal(g.st_shape)
    if complex_:
        v = v + 1j * v[::-1]
    path = write_container(tmp_path / "f.mfgc", g, v, "u", seed=4)
    g2, v2, header = read_container(path)
    assert g2.same_as(g) and np.array_equal(v2, v)
    assert header["seed"] == 4 and header["complex"] == complex_


def test_container_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.mfgc"
    p.write_bytes(b"not a container")
    with pytest.raises(ValueError):
        read_container(p)


def test_complex_fields_split_into_columns(tmp_path):
    g = Grid.unit(4, n_time=2)
    path = write_fields_csv(tmp_path / "f.csv", g, {"a": g.axes[0], "w": (1 + 2j) * np.ones(g.shape)}, "seed=1")
    rows = _rows(path)
    assert rows[0] == ["x", "a", "w_re", "w_im"]
    assert [float(c) for c in rows[2]] == pytest.approx([1 / 3, 1 / 3, 1.0, 2.0])
    assert open(path).readline() == "# seed=1\n"


def test_space_time_field_csv(tmp_path):
    g = Grid.unit(3, n_time=2)
    v = np.arange(9.0).reshape(g.st_shape)
    rows = _rows(write_field_csv(tmp_path / "st.csv", g, v, "u"))
    assert rows[0] == ["t", "x", "u"] and len(rows) == 10
    assert float(rows[-1][-1]) == 8.0


def test_rows_refuse_complex_cells(tmp_path):
    with pytest.raises(TypeError):
        write_rows_csv(tmp_path / "r.csv", ["a"], [[1j]])
    rows = _rows(write_rows_csv(tmp_path / "r.csv", ["a", "b"], [[0.1, 2]]))
    assert rows[1] == ["0.1", "2"]


def test_cauchy_csv_layout(tmp_path):
    g = Grid.unit(5, n_time=2)
    u = np.broadcast_to(g.axes[0] ** 2, g.st_shape)
    rows = _rows(write_cauchy_csv(tmp_path / "c.csv", g, measure(g, u, u)))
    assert rows[0] == ["t", "node", "x", "u", "du_x", "m", "dm_x"]
    assert len(rows) == 1 + 3 * 2
    assert float(rows[2][4]) == pytest.approx(2.0)
