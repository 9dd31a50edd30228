"""Sparsity statistics: estimate the number of non-fill entries of any
subexpression from statistics on its inputs.

Two estimators implement the same five-function interface (construct from a
tensor, merge annihilating maps, merge non-annihilating maps, aggregate,
estimate):

* UniformStats keeps a single non-fill count and assumes entries are
  uniformly distributed over the dimension space.
* DegreeStats keeps degree constraints D(X|Y) (maximum number of non-fill
  entries over the X dimensions conditioned on any assignment of the Y
  dimensions) and estimates via the chain bound: a shortest weighted path
  over index subsets from the empty set to the full set.  Its estimates are
  true upper bounds for conjunctive (annihilating) expressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, FrozenSet, Tuple

from .errors import ExtentMismatch, FillNotAnnihilator, UnknownIndex, UnreachableFullSet
from .ops import OpSpec
from .tensor import TensorData

__all__ = [
    "UniformStats", "DegreeStats", "stats_from_tensor", "merge_annihilating",
    "merge_non_annihilating", "aggregate_stats", "estimate_nnz", "rename_stats",
    "scalar_stats", "STATS_MODES",
]

STATS_MODES = ("uniform", "chain")

Key = Tuple[FrozenSet[str], FrozenSet[str]]


@dataclass(frozen=True)
class UniformStats:
    axes: Tuple[str, ...]
    dims: Dict[str, int]
    nnz_est: float

    @property
    def space(self) -> float:
        return _space(self.dims, self.axes)


@dataclass(frozen=True)
class DegreeStats:
    axes: Tuple[str, ...]
    dims: Dict[str, int]
    constraints: Dict[Key, float]


def _space(dims, axes) -> float:
    p = 1.0
    for a in axes:
        p *= dims[a]
    return p


def rename_stats(s, new_axes):
    """Positionally rebind a stats object to new index names."""
    new_axes = tuple(new_axes)
    if len(new_axes) != len(s.axes):
        raise ValueError(f"cannot rebind axes {s.axes} to {new_axes}")
    mapping = dict(zip(s.axes, new_axes))
    dims = {mapping[a]: n for a, n in s.dims.items()}
    if isinstance(s, UniformStats):
        return UniformStats(new_axes, dims, s.nnz_est)
    constraints = {
        (frozenset(mapping[x] for x in X), frozenset(mapping[y] for y in Y)): b
        for (X, Y), b in s.constraints.items()
    }
    return DegreeStats(new_axes, dims, constraints)


def scalar_stats(mode: str, nonfill: bool):
    """Statistics of an order-0 value; literals count zero non-fill entries
    because a literal's fill is the literal itself."""
    nnz = 1.0 if nonfill else 0.0
    if mode == "uniform":
        return UniformStats((), {}, nnz)
    return DegreeStats((), {}, {(frozenset(), frozenset()): nnz})


def stats_from_tensor(t: TensorData, mode: str, cond_cap: int = 2):
    """Exact statistics from a materialized tensor."""
    axes = t.index_names or tuple(f"_{k}" for k in range(t.order))
    dims = dict(zip(axes, t.dims))
    coords = [c for c, _ in t.entries()]
    nnz = float(len(coords))
    if mode == "uniform":
        return UniformStats(axes, dims, nnz)
    constraints: Dict[Key, float] = {}
    order = t.order
    if order == 0:
        constraints[(frozenset(), frozenset())] = nnz
        return DegreeStats(axes, dims, constraints)
    positions = list(range(order))
    # full partitions (X|Y) with |Y| bounded
    for ysize in range(0, min(cond_cap, order) + 1):
        for ypos in combinations(positions, ysize):
            xpos = [p for p in positions if p not in ypos]
            if not xpos:
                continue
            groups: Dict[tuple, int] = {}
            for c in coords:
                key = tuple(c[p] for p in ypos)
                groups[key] = groups.get(key, 0) + 1
            bound = float(max(groups.values())) if groups else 0.0
            key = (frozenset(axes[p] for p in xpos), frozenset(axes[p] for p in ypos))
            constraints[key] = bound
    # single-index marginals
    for p in positions:
        distinct = len({c[p] for c in coords})
        key = (frozenset({axes[p]}), frozenset())
        existing = constraints.get(key)
        bound = float(distinct)
        constraints[key] = min(existing, bound) if existing is not None else bound
    return DegreeStats(axes, dims, constraints)


def _merged_dims(inputs, out_idxs):
    dims = {}
    for s, idxs in inputs:
        rs = rename_stats(s, idxs)
        for a, n in rs.dims.items():
            if dims.setdefault(a, n) != n:
                raise ExtentMismatch(
                    f"index '{a}' has conflicting extents {dims[a]} and {n}")
    for a in out_idxs:
        if a not in dims:
            raise UnknownIndex(f"output index '{a}' not covered by any input")
    return dims


def merge_annihilating(op: OpSpec, inputs, out_idxs):
    """Statistics of a Map whose children's fills are the op's annihilator."""
    out_idxs = tuple(out_idxs)
    dims = _merged_dims(inputs, out_idxs)
    renamed = [rename_stats(s, idxs) for s, idxs in inputs]
    if all(isinstance(s, UniformStats) for s in renamed):
        space_out = _space(dims, out_idxs)
        prob = 1.0
        for s in renamed:
            space_in = s.space
            prob *= (s.nnz_est / space_in) if space_in > 0 else 0.0
        return UniformStats(out_idxs, {a: dims[a] for a in out_idxs},
                            min(space_out * prob, space_out))
    constraints: Dict[Key, float] = {}
    for s in renamed:
        for key, b in s.constraints.items():
            prev = constraints.get(key)
            constraints[key] = min(prev, b) if prev is not None else b
    return DegreeStats(out_idxs, {a: dims[a] for a in out_idxs}, constraints)


def merge_non_annihilating(op: OpSpec, inputs, out_idxs):
    """Statistics of a Map where absence in one input does not force fill
    (disjunctive point-wise operations)."""
    out_idxs = tuple(out_idxs)
    dims = _merged_dims(inputs, out_idxs)
    renamed = [rename_stats(s, idxs) for s, idxs in inputs]
    out_dims = {a: dims[a] for a in out_idxs}
    if all(isinstance(s, UniformStats) for s in renamed):
        space_out = _space(dims, out_idxs)
        prob_all_fill = 1.0
        for s in renamed:
            space_in = s.space
            d = (s.nnz_est / space_in) if space_in > 0 else 1.0
            prob_all_fill *= max(0.0, 1.0 - d)
        return UniformStats(out_idxs, out_dims, space_out * (1.0 - prob_all_fill))
    out_set = frozenset(out_idxs)
    # every input's constraints are extended to the full output index set,
    # then matching keys are summed; an input lacking a key contributes its
    # dimension-space extension
    cond_sets = {frozenset()}
    for s in renamed:
        for _, Y in s.constraints:
            if Y < out_set:
                cond_sets.add(Y)
    constraints: Dict[Key, float] = {}
    for Y in cond_sets:
        X = out_set - Y
        if not X:
            continue
        total = 0.0
        for s in renamed:
            own = frozenset(s.axes)
            key = (X & own, Y & own)
            if key[0]:
                base = s.constraints.get(key)
                if base is None:
                    base = _space(dims, key[0])
            else:
                base = 1.0
            total += base * _space(dims, X - own)
        constraints[(X, Y)] = min(total, _space(dims, X))
    # single-index marginals
    for a in out_idxs:
        total = 0.0
        for s in renamed:
            if a in s.axes:
                total += s.constraints.get((frozenset({a}), frozenset()), float(dims[a]))
            else:
                total += float(dims[a])
        key = (frozenset({a}), frozenset())
        bound = min(total, float(dims[a]))
        prev = constraints.get(key)
        constraints[key] = min(prev, bound) if prev is not None else bound
    return DegreeStats(out_idxs, out_dims, constraints)


def aggregate_stats(s, agg_idxs):
    """Statistics after aggregating away agg_idxs."""
    agg = frozenset(agg_idxs) & set(s.axes)
    if not agg:
        return s
    keep = tuple(a for a in s.axes if a not in agg)
    if isinstance(s, UniformStats):
        space_in = s.space
        space_keep = _space(s.dims, keep)
        subspace = _space(s.dims, tuple(agg))
        p = min(1.0, (s.nnz_est / space_in) if space_in > 0 else 0.0)
        if p >= 1.0:
            nnz = space_keep
        elif p <= 0.0:
            nnz = 0.0
        else:
            nnz = space_keep * -math.expm1(subspace * math.log1p(-p))
        return UniformStats(keep, {a: s.dims[a] for a in keep}, nnz)
    constraints: Dict[Key, float] = {}
    for (X, Y), b in s.constraints.items():
        movable = Y & agg
        b2 = b * _space(s.dims, tuple(movable))
        X2 = (X | movable) - agg
        Y2 = Y - agg
        if not X2:
            if Y2:
                continue  # D(empty|Y) = 1 carries no information
            b2 = min(b2, 1.0)
        else:
            b2 = min(b2, _space(s.dims, tuple(X2)))
        key = (X2, Y2)
        prev = constraints.get(key)
        constraints[key] = min(prev, b2) if prev is not None else b2
    return DegreeStats(keep, {a: s.dims[a] for a in keep}, constraints)


def estimate_nnz(s) -> float:
    """Estimated (Uniform) or upper-bounded (Degree) non-fill count."""
    if isinstance(s, UniformStats):
        return max(0.0, min(s.nnz_est, s.space))
    full = frozenset(s.axes)
    if not full:
        return max(0.0, min(s.constraints.get((frozenset(), frozenset()), 1.0), 1.0))
    # DAG shortest-path over index subsets; edges are degree constraints plus
    # the implicit per-index bounds D(i|0) <= n_i
    edges = [(Y, X, b) for (X, Y), b in s.constraints.items() if X]
    for a in s.axes:
        edges.append((frozenset(), frozenset({a}), float(s.dims[a])))
    best = {frozenset(): 1.0}
    ordered = sorted(_all_subsets(full), key=len)
    for S in ordered:
        if S not in best:
            continue
        base = best[S]
        for Y, X, b in edges:
            if Y <= S and not X <= S:
                T = S | X
                cand = base * b
                if cand < best.get(T, math.inf):
                    best[T] = cand
    if full not in best:
        raise UnreachableFullSet(f"no constraint chain covers {set(full)}")
    return min(best[full], _space(s.dims, s.axes))


def _all_subsets(full):
    items = sorted(full)
    out = []
    for r in range(len(items) + 1):
        for combo in combinations(items, r):
            out.append(frozenset(combo))
    return out


def check_annihilating(op: OpSpec, fills) -> None:
    if op.annihilator is None or any(f != op.annihilator for f in fills):
        raise FillNotAnnihilator(
            f"some input fill is not the annihilator of '{op.name}'")
