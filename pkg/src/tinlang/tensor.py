"""Fibertree-structured sparse/dense tensors.

A tensor of order k is stored as k nested levels, outermost first.  Each
level stores the non-fill child indices of one dimension conditioned on the
outer dimensions, in one of four formats: a dense vector, a strictly sorted
list, a bytemap (presence bitmap plus dense child array), or a hash table.
Leaves of the innermost level hold scalar values.  Dense levels may
physically store the fill value; the sparse formats never do.

Tensors are immutable after construction and safe to share between threads.
"""

from __future__ import annotations

import enum
from bisect import bisect_left
from typing import Iterable, Iterator, Optional, Sequence

from .errors import (
    CoordinateOutOfRange,
    DuplicateCoordinate,
    PrefixNotPresent,
    ValueEqualsFill,
)

__all__ = [
    "LevelFormat",
    "TensorData",
    "build_tensor",
    "materialize",
    "lookup",
    "iterate_level",
    "transpose",
    "count_nonfill",
]


class LevelFormat(enum.Enum):
    DENSE = "dense"
    SORTED_LIST = "sorted_list"
    BYTEMAP = "bytemap"
    HASH = "hash"

    @classmethod
    def parse(cls, text: str) -> "LevelFormat":
        key = text.strip().lower()
        for fmt in cls:
            if fmt.value == key or fmt.name.lower() == key:
                return fmt
        raise ValueError(f"unknown level format '{text}'")


# --- level node representations ------------------------------------------
# Every node answers items() (ordered (index, child) pairs of stored entries)
# and get(index) (child or None).  For a leaf level the children are scalars;
# absent children of non-leaf levels are represented by None.


class DenseNode:
    __slots__ = ("data",)

    def __init__(self, data: list):
        self.data = data

    def items(self):
        return enumerate(self.data)

    def stored_items(self):
        return [(i, c) for i, c in enumerate(self.data) if c is not None]

    def get(self, idx):
        return self.data[idx]


class SortedNode:
    __slots__ = ("idxs", "children")

    def __init__(self, idxs: list, children: list):
        self.idxs = idxs
        self.children = children

    def items(self):
        return zip(self.idxs, self.children)

    def stored_items(self):
        return list(zip(self.idxs, self.children))

    def get(self, idx):
        pos = bisect_left(self.idxs, idx)
        if pos < len(self.idxs) and self.idxs[pos] == idx:
            return self.children[pos]
        return None


class BytemapNode:
    __slots__ = ("present", "data")

    def __init__(self, present: list, data: list):
        self.present = present
        self.data = data

    def items(self):
        present = self.present
        data = self.data
        return ((i, data[i]) for i in range(len(present)) if present[i])

    def stored_items(self):
        return [(i, self.data[i]) for i in range(len(self.present)) if self.present[i]]

    def get(self, idx):
        return self.data[idx] if self.present[idx] else None


class HashNode:
    __slots__ = ("data", "_keys")

    def __init__(self, data: dict):
        self.data = data
        self._keys = sorted(data)

    def items(self):
        data = self.data
        return ((k, data[k]) for k in self._keys)

    def stored_items(self):
        return [(k, self.data[k]) for k in self._keys]

    def get(self, idx):
        return self.data.get(idx)


def _make_node(fmt: LevelFormat, n: int, pairs, is_leaf: bool, fill):
    """Build one level node from ordered (index, child) pairs."""
    if fmt is LevelFormat.DENSE:
        default = fill if is_leaf else None
        data = [default] * n
        for i, c in pairs:
            data[i] = c
        return DenseNode(data)
    if fmt is LevelFormat.SORTED_LIST:
        idxs, children = [], []
        for i, c in pairs:
            idxs.append(i)
            children.append(c)
        return SortedNode(idxs, children)
    if fmt is LevelFormat.BYTEMAP:
        present = [False] * n
        data = [fill if is_leaf else None] * n
        for i, c in pairs:
            present[i] = True
            data[i] = c
        return BytemapNode(present, data)
    if fmt is LevelFormat.HASH:
        return HashNode(dict(pairs))
    raise ValueError(fmt)


class TensorData:
    """Immutable fibertree tensor.

    ``payload`` is the outermost level node, or a bare scalar for order-0
    tensors.
    """

    __slots__ = ("order", "dims", "index_names", "fill", "levels", "payload")

    def __init__(self, dims, fill, levels, payload, index_names=None):
        self.dims = tuple(int(d) for d in dims)
        self.order = len(self.dims)
        if any(d <= 0 for d in self.dims):
            raise ValueError("dimension extents must be positive")
        self.fill = fill
        self.levels = tuple(levels)
        if len(self.levels) != self.order:
            raise ValueError("levels must match tensor order")
        self.payload = payload
        if index_names is not None:
            index_names = tuple(index_names)
            if len(index_names) != self.order:
                raise ValueError("index_names must match tensor order")
        self.index_names = index_names

    # -- enumeration -----------------------------------------------------

    def entries(self) -> Iterator[tuple[tuple, object]]:
        """Yield (coordinate, value) for every non-fill entry, in storage order."""
        if self.order == 0:
            if self.payload != self.fill:
                yield (), self.payload
            return
        yield from self._walk(self.payload, 0, ())

    def _walk(self, node, depth, prefix):
        leaf = depth == self.order - 1
        for idx, child in node.items():
            if child is None:
                continue
            if leaf:
                if child != self.fill:
                    yield prefix + (idx,), child
            else:
                yield from self._walk(child, depth + 1, prefix + (idx,))

    def to_dict(self) -> dict:
        return {c: v for c, v in self.entries()}

    def to_numpy(self):
        import numpy as np

        arr = np.full(self.dims, self.fill, dtype=float)
        for coord, value in self.entries():
            arr[coord] = value
        return arr

    def with_index_names(self, names) -> "TensorData":
        return TensorData(self.dims, self.fill, self.levels, self.payload, names)

    def __repr__(self):
        return (
            f"TensorData(dims={self.dims}, fill={self.fill!r}, "
            f"levels={[f.value for f in self.levels]}, nnz={count_nonfill(self)})"
        )


def default_levels(order: int) -> tuple[LevelFormat, ...]:
    """CSR-like default: dense outer level, sorted lists below."""
    if order == 0:
        return ()
    return (LevelFormat.DENSE,) + (LevelFormat.SORTED_LIST,) * (order - 1)


def build_tensor(
    coords: Sequence[tuple],
    values: Sequence,
    dims: Sequence[int],
    fill,
    levels: Optional[Sequence[LevelFormat]] = None,
    index_names=None,
) -> TensorData:
    """Construct a tensor from unique, in-range coordinates and non-fill values."""
    dims = tuple(dims)
    order = len(dims)
    if levels is None:
        levels = default_levels(order)
    if len(coords) != len(values):
        raise ValueError("coords and values must have equal length")
    if order == 0:
        if len(coords) > 1:
            raise DuplicateCoordinate("order-0 tensor admits a single entry")
        value = values[0] if values else fill
        if values and value == fill:
            raise ValueEqualsFill("scalar value equals the fill value")
        return TensorData(dims, fill, levels, value, index_names)

    seen = set()
    for coord, value in zip(coords, values):
        if len(coord) != order:
            raise CoordinateOutOfRange(f"coordinate {coord} has wrong length")
        if any(not (0 <= c < d) for c, d in zip(coord, dims)):
            raise CoordinateOutOfRange(f"coordinate {coord} outside dims {dims}")
        if coord in seen:
            raise DuplicateCoordinate(f"coordinate {coord} appears twice")
        seen.add(coord)
        if value == fill:
            raise ValueEqualsFill(f"value at {coord} equals the fill value {fill!r}")

    pairs = sorted(zip(coords, values))
    payload = _build_level(pairs, 0, dims, tuple(levels), fill)
    return TensorData(dims, fill, levels, payload, index_names)


def materialize(entries: dict, dims, fill, levels=None, index_names=None) -> TensorData:
    """Like build_tensor but from a coord->value dict, silently dropping fill values."""
    coords, values = [], []
    for coord, value in entries.items():
        if value != fill:
            coords.append(coord)
            values.append(value)
    return build_tensor(coords, values, dims, fill, levels, index_names)


def _build_level(pairs, depth, dims, levels, fill):
    """pairs: sorted list of (coordinate-suffix handled from depth, value)."""
    order = len(dims)
    leaf = depth == order - 1
    groups = []
    cur_idx = None
    cur = None
    for coord, value in pairs:
        i = coord[depth]
        if i != cur_idx:
            cur_idx = i
            cur = []
            groups.append((i, cur))
        cur.append((coord, value))
    if leaf:
        node_pairs = [(i, grp[0][1]) for i, grp in groups]
    else:
        node_pairs = [
            (i, _build_level(grp, depth + 1, dims, levels, fill)) for i, grp in groups
        ]
    return _make_node(levels[depth], dims[depth], node_pairs, leaf, fill)


def lookup(t: TensorData, coord: tuple):
    """Stored value at coord, or the fill value."""
    if len(coord) != t.order:
        raise CoordinateOutOfRange(f"coordinate {coord} has wrong length")
    if any(not (0 <= c < d) for c, d in zip(coord, t.dims)):
        raise CoordinateOutOfRange(f"coordinate {coord} outside dims {t.dims}")
    if t.order == 0:
        return t.payload
    node = t.payload
    for c in coord[:-1]:
        node = node.get(c)
        if node is None:
            return t.fill
    value = node.get(coord[-1])
    return t.fill if value is None else value


def iterate_level(t: TensorData, prefix: tuple) -> Iterable[tuple]:
    """Ordered (index, sub-fiber) stream of the level below ``prefix``.

    Dense levels yield every index; sparse levels yield stored indices only.
    Raises PrefixNotPresent for an all-fill sub-fiber, which callers treat as
    an empty stream.
    """
    if len(prefix) >= t.order:
        raise CoordinateOutOfRange("prefix must be shorter than the tensor order")
    if any(not (0 <= c < d) for c, d in zip(prefix, t.dims)):
        raise CoordinateOutOfRange(f"prefix {prefix} outside dims {t.dims}")
    node = t.payload
    for c in prefix:
        node = node.get(c)
        if node is None:
            raise PrefixNotPresent(f"prefix {prefix} holds no stored entries")
    return node.items()


def transpose(t: TensorData, perm: Sequence[int], levels=None) -> TensorData:
    """Permute coordinates: output[perm(c)] = t[c]."""
    perm = tuple(perm)
    if sorted(perm) != list(range(t.order)):
        raise ValueError(f"{perm} is not a permutation of 0..{t.order - 1}")
    dims = tuple(t.dims[p] for p in perm)
    names = tuple(t.index_names[p] for p in perm) if t.index_names else None
    if levels is None:
        levels = default_levels(t.order)
    coords, values = [], []
    for coord, value in t.entries():
        coords.append(tuple(coord[p] for p in perm))
        values.append(value)
    return build_tensor(coords, values, dims, t.fill, levels, names)


def count_nonfill(t: TensorData) -> int:
    """Exact number of coordinates whose value differs from the fill value."""
    return sum(1 for _ in t.entries())
