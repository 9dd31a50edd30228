"""Tensor file formats: MatrixMarket (.mtx) and FROSTT-style (.tns).

Both formats use 1-based indices on disk; tensors are 0-based in memory.
"""

from __future__ import annotations

import os

from .tensor import TensorData, build_tensor, count_nonfill, default_levels

__all__ = ["load_mtx", "save_mtx", "load_tns", "save_tns", "load_tensor", "save_tensor"]


def load_mtx(path, fill=0.0, levels=None) -> TensorData:
    """Read an order-2 tensor from MatrixMarket coordinate format."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header.startswith("%%MatrixMarket"):
            raise ValueError(f"{path}: missing MatrixMarket header")
        fields = header.split()
        if len(fields) < 4 or fields[1] != "matrix" or fields[2] != "coordinate":
            raise ValueError(f"{path}: only 'matrix coordinate' files are supported")
        value_type = fields[3]
        symmetric = len(fields) > 4 and fields[4] == "symmetric"
        line = f.readline()
        while line.startswith("%"):
            line = f.readline()
        nrows, ncols, nnz = (int(x) for x in line.split())
        coords, values = [], []
        seen = set()
        for _ in range(nnz):
            parts = f.readline().split()
            i, j = int(parts[0]) - 1, int(parts[1]) - 1
            if value_type == "pattern":
                v = 1.0
            else:
                v = float(parts[2])
            if v == fill:
                continue
            if (i, j) not in seen:
                seen.add((i, j))
                coords.append((i, j))
                values.append(v)
            if symmetric and i != j and (j, i) not in seen:
                seen.add((j, i))
                coords.append((j, i))
                values.append(v)
    return build_tensor(coords, values, (nrows, ncols), fill, levels)


def save_mtx(path, t: TensorData):
    if t.order != 2:
        raise ValueError("MatrixMarket coordinate format requires an order-2 tensor")
    with open(path, "w", encoding="utf-8") as f:
        f.write("%%MatrixMarket matrix coordinate real general\n")
        f.write(f"{t.dims[0]} {t.dims[1]} {count_nonfill(t)}\n")
        for (i, j), v in t.entries():
            f.write(f"{i + 1} {j + 1} {_fmt(v)}\n")


def load_tns(path, fill=0.0, levels=None) -> TensorData:
    """Read an arbitrary-order tensor from FROSTT-style text coordinates.

    An optional ``# dims: d1 d2 ...`` header fixes the extents; otherwise they
    are inferred as the maximum index per dimension.
    """
    coords, values = [], []
    dims = None
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.lower().startswith("dims:"):
                    dims = tuple(int(x) for x in body[5:].split())
                continue
            parts = line.split()
            coord = tuple(int(x) - 1 for x in parts[:-1])
            v = float(parts[-1])
            if v != fill:
                coords.append(coord)
                values.append(v)
    if dims is None:
        if not coords:
            raise ValueError(f"{path}: cannot infer dims of an empty tensor")
        order = len(coords[0])
        dims = tuple(max(c[k] for c in coords) + 1 for k in range(order))
    return build_tensor(coords, values, dims, fill, levels)


def save_tns(path, t: TensorData):
    with open(path, "w", encoding="utf-8") as f:
        f.write("# dims: " + " ".join(str(d) for d in t.dims) + "\n")
        for coord, v in t.entries():
            f.write(" ".join(str(c + 1) for c in coord) + f" {_fmt(v)}\n")


def load_tensor(path, fill=0.0, levels=None) -> TensorData:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".mtx":
        return load_mtx(path, fill, levels)
    if ext == ".tns":
        return load_tns(path, fill, levels)
    raise ValueError(f"unsupported tensor file extension '{ext}'")


def save_tensor(path, t: TensorData):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".mtx":
        save_mtx(path, t)
    elif ext == ".tns":
        save_tns(path, t)
    else:
        raise ValueError(f"unsupported tensor file extension '{ext}'")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, int) or (isinstance(v, float) and v.is_integer()):
        return str(int(v))
    return repr(v)
