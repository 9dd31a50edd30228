"""Bottom-up statistics annotation of plan expressions.

Walks an expression, attaching a (stats, fill) pair to every node.  Map
nodes route to the annihilating or non-annihilating merge depending on
whether each child's fill is the annihilator of the pointwise operator;
mixed cases merge the annihilating children first and fold the remainder in
disjunctively.
"""

from __future__ import annotations

from .ops import get_op
from .plan import Agg, Alias, Input, Literal, Map
from .stats import (
    aggregate_stats,
    estimate_nnz,
    merge_annihilating,
    merge_non_annihilating,
    rename_stats,
    scalar_stats,
    stats_from_tensor,
)
from .tensor import TensorData

__all__ = ["StatsAnnotator", "union_indices"]


def union_indices(children_idxs):
    out = []
    seen = set()
    for idxs in children_idxs:
        for i in idxs:
            if i not in seen:
                seen.add(i)
                out.append(i)
    return tuple(out)


class StatsAnnotator:
    """Annotates expressions given statistics for inputs and aliases.

    Input tensor statistics are computed lazily and cached per tensor
    identity.  Alias statistics are provided by the caller: inferred during
    planning, exact (recomputed from the materialized tensor) at execution
    time.
    """

    def __init__(self, mode: str, tensors: dict | None = None,
                 alias_stats: dict | None = None, alias_fills: dict | None = None,
                 cond_cap: int = 2):
        if mode not in ("uniform", "chain"):
            raise ValueError(f"unknown stats mode '{mode}'")
        self.mode = mode
        self.tensors = tensors or {}
        self.alias_stats = dict(alias_stats or {})
        self.alias_fills = dict(alias_fills or {})
        self.cond_cap = cond_cap
        self._tensor_cache: dict[int, object] = {}

    # -- registration ------------------------------------------------------

    def set_alias(self, name: str, stats, fill):
        self.alias_stats[name] = stats
        self.alias_fills[name] = fill

    def register_tensor_stats(self, t: TensorData, stats):
        self._tensor_cache[id(t)] = stats

    def tensor_stats(self, t: TensorData):
        cached = self._tensor_cache.get(id(t))
        if cached is None:
            cached = stats_from_tensor(t, self._stats_mode(), self.cond_cap)
            self._tensor_cache[id(t)] = cached
        return cached

    # -- annotation ---------------------------------------------------------

    def annotate(self, e):
        """Return (stats, fill) for expression e."""
        if isinstance(e, Literal):
            return scalar_stats(self._stats_mode(), False), e.value
        if isinstance(e, Input):
            t = self.tensors[e.tensor]
            return rename_stats(self.tensor_stats(t), e.idxs), t.fill
        if isinstance(e, Alias):
            return rename_stats(self.alias_stats[e.name], e.idxs), self.alias_fills[e.name]
        if isinstance(e, Map):
            return self._annotate_map(e)
        if isinstance(e, Agg):
            child_stats, child_fill = self.annotate(e.child)
            op = get_op(e.op)
            stats = aggregate_stats(child_stats, e.idxs)
            fill = self._aggregate_fill(op, child_fill, e.idxs, child_stats.dims)
            return stats, fill
        raise TypeError(e)

    def estimate(self, e) -> float:
        return estimate_nnz(self.annotate(e)[0])

    def node_estimates(self, e):
        """(expression text, estimate) per node, pre-order; for explain output."""
        from .plan import format_expr

        out = []

        def visit(node):
            out.append({"expr": format_expr(node),
                        "est_nnz": estimate_nnz(self.annotate(node)[0])})
            if isinstance(node, Map):
                for c in node.children:
                    visit(c)
            elif isinstance(node, Agg):
                visit(node.child)

        visit(e)
        return out

    # -- internals -----------------------------------------------------------

    def _stats_mode(self):
        return "uniform" if self.mode == "uniform" else "degree"

    def _annotate_map(self, e):
        op = get_op(e.op)
        annotated = [(c, *self.annotate(c)) for c in e.children]
        out_idxs = union_indices([tuple(s.axes) for _, s, _ in annotated])
        fill = op.apply([f for _, _, f in annotated])
        ann = [(s, tuple(s.axes)) for _, s, f in annotated
               if op.annihilator is not None and f == op.annihilator]
        non = [(s, tuple(s.axes)) for _, s, f in annotated
               if not (op.annihilator is not None and f == op.annihilator)]
        if ann and not non:
            stats = merge_annihilating(op, ann, out_idxs)
        elif ann:
            inner_idxs = union_indices([idxs for _, idxs in ann])
            merged = merge_annihilating(op, ann, inner_idxs)
            stats = merge_non_annihilating(op, [(merged, inner_idxs)] + non, out_idxs)
        else:
            stats = merge_non_annihilating(op, non, out_idxs)
        return stats, fill

    def _aggregate_fill(self, op, fill, idxs, dims):
        if not idxs or op.name == "noop":
            return fill
        n = 1
        for i in idxs:
            n *= dims.get(i, 1)
        if fill == op.identity:
            return op.identity
        if op.is_idempotent:
            return fill
        if op.repeat_apply is not None:
            return op.repeat_apply(fill, n)
        from functools import reduce

        return reduce(op.fn, [fill] * n)
