"""Field containers and CSV export.

Container layout: the 8-byte magic ``b"MFGDCNT1"``, a little-endian uint64
header length, a UTF-8 JSON header, then the values as little-endian float64
in row-major order (time level slowest). Complex fields store the real block
followed by the imaginary block and set ``"complex": true`` in the header.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .grid import Grid

MAGIC = b"MFGDCNT1"


def write_container(path, grid: Grid, values: np.ndarray, kind: str, **meta) -> Path:
    values = np.asarray(values)
    is_complex = np.iscomplexobj(values)
    header = {
        **grid.metadata(),
        "kind": kind,
        "shape": list(values.shape),
        "complex": bool(is_complex),
        **meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    if is_complex:
        payload = np.concatenate([values.real.ravel(), values.imag.ravel()])
    else:
        payload = values.ravel()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())
    return path


def read_container(path) -> tuple[Grid, np.ndarray, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a field container")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode())
    data = np.frombuffer(raw[16 + n :], dtype="<f8").astype(float)
    shape = tuple(header["shape"])
    if header["complex"]:
        half = data.size // 2
        values = (data[:half] + 1j * data[half:]).reshape(shape)
    else:
        values = data.reshape(shape)
    grid = Grid(
        tuple(tuple(e) for e in header["extent"]),
        tuple(header["n_cells"]),
        header["T"],
        header["n_time"],
    )
    return grid, values, header


def _columns(name: str, values: np.ndarray) -> tuple[list[str], np.ndarray]:
    """Flat column block of ``values`` (nodes first); complex values split into re/im."""
    flat = values.reshape(values.shape[0], -1)
    names = [name] if flat.shape[1] == 1 else [f"{name}_{k}" for k in range(flat.shape[1])]
    if np.iscomplexobj(flat):
        names = [f"{n}_{part}" for n in names for part in ("re", "im")]
        flat = np.stack([flat.real, flat.imag], -1).reshape(flat.shape[0], -1)
    return names, flat


def _write(path, header, rows, comment):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return path


def write_fields_csv(path, grid: Grid, columns: dict[str, np.ndarray], comment: str | None = None) -> Path:
    """Spatial fields side by side, one row per node: coordinates then every column."""
    coords = grid.coords.reshape(-1, grid.dim)
    header = ["x", "y"][: grid.dim]
    blocks = [coords]
    for name, v in columns.items():
        v = np.asarray(v)
        if v.shape[: grid.dim] != grid.shape:
            raise ValueError(f"column {name!r} is not a spatial field")
        names, flat = _columns(name, v.reshape(grid.n_nodes, -1))
        header += names
        blocks.append(flat)
    table = np.concatenate([b.astype(float) for b in blocks], axis=1)
    return _write(path, header, table.tolist(), comment)


def write_field_csv(path, grid: Grid, values: np.ndarray, name: str = "value", comment: str | None = None) -> Path:
    """One row per node (per time level for space-time fields): coordinates then value(s)."""
    values = np.asarray(values)
    if values.shape[: grid.dim + 1] != grid.st_shape:
        return write_fields_csv(path, grid, {name: values}, comment)
    coords = grid.coords.reshape(-1, grid.dim)
    names, flat = _columns(name, values.reshape((grid.n_time + 1) * grid.n_nodes, -1))
    t = np.repeat(grid.times, grid.n_nodes)[:, None]
    xs = np.tile(coords, (grid.n_time + 1, 1))
    table = np.concatenate([t, xs, flat], axis=1)
    return _write(path, ["t", *["x", "y"][: grid.dim], *names], table.tolist(), comment)


def write_cauchy_csv(path, grid: Grid, data, comment: str | None = None) -> Path:
    """Boundary records of a ``CauchyDataset``: one row per (time level, boundary node)."""
    axes = ["x", "y"][: grid.dim]
    xb = grid.coords.reshape(-1, grid.dim)[grid.boundary_index]
    nb = len(grid.boundary_index)
    rows = []
    for n, t in enumerate(grid.times):
        for b in range(nb):
            rows.append([float(t), b, *xb[b].tolist(), float(data.u[n, b]), *data.du[n, b].tolist(),
                         float(data.m[n, b]), *data.dm[n, b].tolist()])
    header = ["t", "node", *axes, "u", *[f"du_{a}" for a in axes], "m", *[f"dm_{a}" for a in axes]]
    return _write(path, header, rows, comment)


def write_rows_csv(path, header: list[str], rows, comment: str | None = None) -> Path:
    """Plain table; complex cells are rejected so callers split them into re/im columns."""
    rows = [list(r) for r in rows]
    if any(isinstance(x, complex) for r in rows for x in r):
        raise TypeError("complex cell: split into real and imaginary columns")
    return _write(path, header, rows, comment)
