"""Brute-force dense evaluator used as the testing oracle.

Evaluates input-dialect programs by materializing full dense nested loops
with no optimization.  Intentionally slow and simple; every optimizer and
executor path is checked against it.
"""

from __future__ import annotations

import itertools
from functools import reduce

from .errors import OracleDimensionLimitExceeded, UnboundName
from .ops import get_op
from .plan import Agg, Alias, Input, Literal, Map, Plan, expr_indices
from .tensor import LevelFormat, TensorData, lookup

__all__ = ["dense_eval_oracle", "infer_dims", "expr_fill"]

DEFAULT_DIM_LIMIT = 10


def infer_dims(plan: Plan, tensors: dict) -> dict:
    """Map every index name to its extent, from the tensors bound to inputs."""
    dims = {}
    produced = {}

    def visit(e):
        if isinstance(e, (Input, Alias)):
            if isinstance(e, Input):
                t = tensors.get(e.tensor)
                if t is None:
                    raise UnboundName(f"no tensor bound for input '{e.tensor}'")
                extents = t.dims
            else:
                extents = produced[e.name]
            if len(extents) != len(e.idxs):
                raise ValueError(
                    f"'{e.tensor if isinstance(e, Input) else e.name}' has order "
                    f"{len(extents)} but is accessed with {len(e.idxs)} indices")
            for i, n in zip(e.idxs, extents):
                if dims.setdefault(i, n) != n:
                    raise ValueError(f"index '{i}' has conflicting extents "
                                     f"{dims[i]} and {n}")
        elif isinstance(e, Map):
            for c in e.children:
                visit(c)
        elif isinstance(e, Agg):
            visit(e.child)

    for q in plan.queries:
        visit(q.expr)
        out_idxs = expr_indices(q.expr)
        produced[q.name] = tuple(dims[i] for i in out_idxs)
    return dims


def expr_fill(e, tensors: dict, produced_fills: dict, dims: dict):
    """Algebraic fill propagation: the value of e on an all-fill region."""
    if isinstance(e, Literal):
        return e.value
    if isinstance(e, Input):
        return tensors[e.tensor].fill
    if isinstance(e, Alias):
        return produced_fills[e.name]
    if isinstance(e, Map):
        op = get_op(e.op)
        return op.apply([expr_fill(c, tensors, produced_fills, dims) for c in e.children])
    if isinstance(e, Agg):
        op = get_op(e.op)
        v = expr_fill(e.child, tensors, produced_fills, dims)
        if not e.idxs:
            return v if e.op != "noop" else v
        n = 1
        for i in e.idxs:
            n *= dims[i]
        if v == op.identity:
            return op.identity
        if op.is_idempotent:
            return v
        if op.repeat_apply is not None:
            return op.repeat_apply(v, n)
        return reduce(op.fn, [v] * n)
    raise TypeError(e)


def _eval(e, binding, tensors, produced, dims):
    if isinstance(e, Literal):
        return e.value
    if isinstance(e, Input):
        return lookup(tensors[e.tensor], tuple(binding[i] for i in e.idxs))
    if isinstance(e, Alias):
        return lookup(produced[e.name], tuple(binding[i] for i in e.idxs))
    if isinstance(e, Map):
        op = get_op(e.op)
        return op.apply([_eval(c, binding, tensors, produced, dims)
                         for c in e.children])
    if isinstance(e, Agg):
        op = get_op(e.op)
        if not e.idxs:
            return _eval(e.child, binding, tensors, produced, dims)
        values = []
        extents = [range(dims[i]) for i in e.idxs]
        inner = dict(binding)
        for combo in itertools.product(*extents):
            for i, c in zip(e.idxs, combo):
                inner[i] = c
            values.append(_eval(e.child, inner, tensors, produced, dims))
        return reduce(op.fn, values) if op.arity is None else op.apply(values)
    raise TypeError(e)


def dense_eval_oracle(plan: Plan, tensors: dict, dim_limit: int = DEFAULT_DIM_LIMIT) -> dict:
    """Evaluate every query by dense enumeration; returns name -> TensorData."""
    dims = infer_dims(plan, tensors)
    for i, n in dims.items():
        if n > dim_limit:
            raise OracleDimensionLimitExceeded(
                f"index '{i}' has extent {n} > oracle limit {dim_limit}")
    produced = {}
    produced_fills = {}
    for q in plan.queries:
        out_idxs = expr_indices(q.expr)
        out_dims = tuple(dims[i] for i in out_idxs)
        fill = expr_fill(q.expr, tensors, produced_fills, dims)
        coords = []
        values = []
        binding = {}
        for combo in itertools.product(*(range(n) for n in out_dims)):
            for i, c in zip(out_idxs, combo):
                binding[i] = c
            v = _eval(q.expr, binding, tensors, produced, dims)
            coords.append(combo)
            values.append(v)
        levels = (LevelFormat.DENSE,) * len(out_dims)
        payload_coords = [c for c, v in zip(coords, values) if v != fill]
        payload_values = [v for v in values if v != fill]
        produced[q.name] = _dense_tensor(
            payload_coords, payload_values, out_dims, fill, levels, tuple(out_idxs))
        produced_fills[q.name] = fill
    return produced


def _dense_tensor(coords, values, dims, fill, levels, index_names):
    from .tensor import build_tensor

    return build_tensor(coords, values, dims, fill, levels, index_names)
