"""Plan IR: AST node types for the three plan dialects plus the structural
transformations shared by the optimizers.

The input dialect allows arbitrary nesting of Agg/Map around tensor leaves.
The logical dialect restricts each query to a single root aggregate.  The
physical dialect wraps each query in a Mat (materialization) node, fixes a
loop order, and tags every leaf index with an access protocol.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

from .errors import ExpansionLimitExceeded
from .ops import get_op, is_registered
from .tensor import LevelFormat

__all__ = [
    "Literal", "Input", "Alias", "Map", "Agg", "Mat", "Query", "Plan",
    "Protocol", "Dialect", "validate_dialect", "canonicalize",
    "canonicalize_program", "distribute_pointwise", "canonical_hash",
    "canonical_form", "expr_indices", "expr_leaves", "contains_index",
    "format_expr", "format_query",
]


class Protocol(enum.Enum):
    ITERATE = "iter"
    LOOKUP = "lookup"


class Dialect(enum.Enum):
    INPUT = "input"
    LOGICAL = "logical"
    PHYSICAL = "physical"


@dataclass(frozen=True)
class Literal:
    value: object


@dataclass(frozen=True)
class Input:
    tensor: str
    idxs: Tuple[str, ...]
    protocols: Optional[Tuple[Protocol, ...]] = None


@dataclass(frozen=True)
class Alias:
    name: str
    idxs: Tuple[str, ...]
    protocols: Optional[Tuple[Protocol, ...]] = None


@dataclass(frozen=True)
class Map:
    op: str
    children: Tuple


@dataclass(frozen=True)
class Agg:
    op: str
    idxs: Tuple[str, ...]
    child: object


@dataclass(frozen=True)
class Mat:
    formats: Tuple[LevelFormat, ...]
    idx_order: Tuple[str, ...]
    child: object


@dataclass(frozen=True)
class Query:
    name: str
    expr: object
    loop_order: Optional[Tuple[str, ...]] = None


@dataclass(frozen=True)
class Plan:
    queries: Tuple[Query, ...]


# --- structural helpers ---------------------------------------------------


def children_of(e):
    if isinstance(e, Map):
        return e.children
    if isinstance(e, (Agg, Mat)):
        return (e.child,)
    return ()


def expr_leaves(e):
    """All Input/Alias/Literal leaves in left-to-right order."""
    if isinstance(e, (Input, Alias, Literal)):
        return [e]
    out = []
    for c in children_of(e):
        out.extend(expr_leaves(c))
    return out


def expr_indices(e, *, free_only=True):
    """Index names in order of first appearance; bound indices excluded if free_only."""
    out = []
    seen = set()

    def visit(node, bound):
        if isinstance(node, (Input, Alias)):
            for i in node.idxs:
                if i not in seen and not (free_only and i in bound):
                    seen.add(i)
                    out.append(i)
        elif isinstance(node, Agg):
            visit(node.child, bound | set(node.idxs) if free_only else bound)
        else:
            for c in children_of(node):
                visit(c, bound)

    visit(e, frozenset())
    return out


def bound_indices(e):
    out = []
    if isinstance(e, Agg):
        out.extend(e.idxs)
    for c in children_of(e):
        out.extend(bound_indices(c))
    return out


def contains_index(e, idx: str) -> bool:
    """True when idx occurs free in e."""
    return idx in expr_indices(e)


# --- dialect validation ----------------------------------------------------


def validate_dialect(plan: Plan, dialect: Dialect) -> list:
    """Return the (possibly empty) list of dialect violations."""
    violations = []
    names_so_far = set()
    for q in plan.queries:
        _validate_query(q, dialect, names_so_far, violations)
        names_so_far.add(q.name)
    return violations


def _validate_query(q: Query, dialect: Dialect, earlier: set, out: list):
    where = f"query '{q.name}'"
    expr = q.expr
    if dialect is Dialect.PHYSICAL:
        if q.loop_order is None:
            out.append(f"{where}: physical query lacks a loop order")
        if not isinstance(expr, Mat):
            out.append(f"{where}: physical query must wrap a Mat node")
            return
        if len(expr.formats) != len(expr.idx_order):
            out.append(f"{where}: Mat formats and index order lengths differ")
        expr = expr.child
        if not isinstance(expr, Agg):
            out.append(f"{where}: Mat child must be a single root Agg")
            return
        _validate_expr(expr.child, where, earlier, out,
                       allow_agg=False, need_protocols=True)
        _check_op(expr.op, where, out)
        return
    if dialect is Dialect.LOGICAL:
        if not isinstance(expr, Agg):
            out.append(f"{where}: logical query must have a root Agg")
            return
        _check_op(expr.op, where, out)
        _validate_expr(expr.child, where, earlier, out,
                       allow_agg=False, need_protocols=False)
        return
    _validate_expr(expr, where, earlier, out, allow_agg=True, need_protocols=False)


def _check_op(op, where, out):
    if not is_registered(op):
        out.append(f"{where}: unknown operator '{op}'")


def _validate_expr(e, where, earlier, out, *, allow_agg, need_protocols):
    if isinstance(e, Literal):
        return
    if isinstance(e, (Input, Alias)):
        if len(set(e.idxs)) != len(e.idxs):
            out.append(f"{where}: repeated index in leaf {e}")
        if isinstance(e, Alias) and e.name not in earlier:
            out.append(f"{where}: alias '{e.name}' does not refer to an earlier query")
        if need_protocols:
            if e.protocols is None or len(e.protocols) != len(e.idxs):
                out.append(f"{where}: leaf {getattr(e, 'tensor', getattr(e, 'name', '?'))} "
                           f"lacks a protocol on some index")
        elif e.protocols is not None:
            out.append(f"{where}: protocol tags are only valid in the physical dialect")
        return
    if isinstance(e, Map):
        _check_op(e.op, where, out)
        for c in e.children:
            _validate_expr(c, where, earlier, out,
                           allow_agg=allow_agg, need_protocols=need_protocols)
        return
    if isinstance(e, Agg):
        if not allow_agg:
            out.append(f"{where}: nested Agg is not allowed in this dialect")
        _check_op(e.op, where, out)
        _validate_expr(e.child, where, earlier, out,
                       allow_agg=allow_agg, need_protocols=need_protocols)
        return
    if isinstance(e, Mat):
        out.append(f"{where}: Mat node outside a physical query root")
        return
    out.append(f"{where}: unknown node {e!r}")


# --- canonicalization ------------------------------------------------------


def canonicalize(q: Query, taken=None) -> Query:
    """Exhaustively merge nested Maps/Aggs, lift aggregates above pointwise
    operators where the algebra permits, and rename bound indices so every
    aggregate binds a fresh unique name."""
    taken = set(taken) if taken is not None else set()
    taken.update(expr_indices(q.expr))
    expr = _canon_fixpoint(q.expr)
    expr = _rename_bound(expr, {}, taken)
    return replace(q, expr=expr)


def canonicalize_program(plan: Plan) -> Plan:
    taken = set()
    for q in plan.queries:
        taken.update(expr_indices(q.expr))
    out = []
    for q in plan.queries:
        expr = _canon_fixpoint(q.expr)
        expr = _rename_bound(expr, {}, taken)
        out.append(replace(q, expr=expr))
    return Plan(tuple(out))


def _canon_fixpoint(e):
    while True:
        new = _canon_step(e)
        if new == e:
            return e
        e = new


def _canon_step(e):
    if isinstance(e, (Input, Alias, Literal)):
        return e
    if isinstance(e, Agg):
        child = _canon_step(e.child)
        if not e.idxs:
            return child
        if isinstance(child, Agg) and child.op == e.op:
            return Agg(e.op, e.idxs + child.idxs, child.child)
        return Agg(e.op, e.idxs, child)
    if isinstance(e, Mat):
        return Mat(e.formats, e.idx_order, _canon_step(e.child))
    # Map: flatten same associative op, then lift liftable Agg children
    op = get_op(e.op)
    children = []
    for c in e.children:
        c = _canon_step(c)
        if isinstance(c, Map) and c.op == e.op and op.is_associative:
            children.extend(c.children)
        else:
            children.append(c)
    if op.is_commutative and op.is_associative:
        for pos, c in enumerate(children):
            if not isinstance(c, Agg):
                continue
            agg_op = get_op(c.op)
            if not op.distributes_over_op(agg_op):
                continue
            siblings = children[:pos] + children[pos + 1:]
            if any(any(contains_index(s, i) for i in c.idxs) for s in siblings):
                continue
            lifted = Map(e.op, tuple(children[:pos] + [c.child] + children[pos + 1:]))
            return Agg(c.op, c.idxs, lifted)
    if len(children) == 1 and op.arity is None:
        return children[0]
    return Map(e.op, tuple(children))


def _rename_bound(e, env, taken):
    if isinstance(e, (Input, Alias)):
        idxs = tuple(env.get(i, i) for i in e.idxs)
        return replace(e, idxs=idxs)
    if isinstance(e, Literal):
        return e
    if isinstance(e, Agg):
        new_idxs = []
        inner_env = dict(env)
        for i in e.idxs:
            if i in taken and i not in env:
                # bound name collides with a name used elsewhere
                fresh = _fresh_name(i, taken)
                inner_env[i] = fresh
                new_idxs.append(fresh)
                taken.add(fresh)
            elif i in env:
                fresh = _fresh_name(i, taken)
                inner_env[i] = fresh
                new_idxs.append(fresh)
                taken.add(fresh)
            else:
                inner_env[i] = i
                new_idxs.append(i)
                taken.add(i)
        return Agg(e.op, tuple(new_idxs), _rename_bound(e.child, inner_env, taken))
    if isinstance(e, Map):
        return Map(e.op, tuple(_rename_bound(c, env, taken) for c in e.children))
    if isinstance(e, Mat):
        return Mat(e.formats, e.idx_order, _rename_bound(e.child, env, taken))
    raise TypeError(e)


def _fresh_name(base, taken):
    k = 1
    while f"{base}_{k}" in taken:
        k += 1
    return f"{base}_{k}"


# --- pointwise distribution -------------------------------------------------


def distribute_pointwise(q: Query, cap: int = 64) -> Query:
    """Expand operators over the operators they distribute over (products over
    sums and friends), producing a sum-of-products style expression."""
    budget = [cap]
    expr = _dist(q.expr, budget)
    return canonicalize(replace(q, expr=expr))


def _dist(e, budget):
    if isinstance(e, (Input, Alias, Literal)):
        return e
    if isinstance(e, Agg):
        return Agg(e.op, e.idxs, _dist(e.child, budget))
    if isinstance(e, Mat):
        return Mat(e.formats, e.idx_order, _dist(e.child, budget))
    op = get_op(e.op)
    children = [_dist(c, budget) for c in e.children]
    for pos, c in enumerate(children):
        if isinstance(c, Map) and op.distributes_over_op(get_op(c.op)):
            budget[0] -= len(c.children) - 1
            if budget[0] < 0:
                raise ExpansionLimitExceeded(
                    "pointwise distribution exceeds the term cap")
            terms = tuple(
                _dist(Map(e.op, tuple(children[:pos] + [g] + children[pos + 1:])),
                      budget)
                for g in c.children
            )
            return Map(c.op, terms)
    return Map(e.op, tuple(children))


# --- canonical hashing -------------------------------------------------------


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_form(expr) -> str:
    """Canonical pre-order serialization: stable under commutative child
    reordering and bound-index renaming."""
    sorted_tree = _sort_commutative(expr, frozenset())
    names = {}
    return _serialize(sorted_tree, frozenset(), names)


def canonical_hash(expr) -> int:
    """64-bit FNV-1a digest of the canonical serialization."""
    return _fnv1a64(canonical_form(expr).encode("utf-8"))


def _sort_commutative(e, bound):
    if isinstance(e, (Input, Alias, Literal)):
        return e
    if isinstance(e, Agg):
        return Agg(e.op, e.idxs, _sort_commutative(e.child, bound | set(e.idxs)))
    if isinstance(e, Mat):
        return Mat(e.formats, e.idx_order, _sort_commutative(e.child, bound))
    children = tuple(_sort_commutative(c, bound) for c in e.children)
    op = get_op(e.op)
    if op.is_commutative:
        children = tuple(sorted(children, key=lambda c: _skeleton(c, bound)))
    return Map(e.op, children)


def _skeleton(e, bound):
    """Serialization with bound index names anonymized; used as a sort key."""
    if isinstance(e, Literal):
        return f"L:{e.value!r}"
    if isinstance(e, (Input, Alias)):
        name = e.tensor if isinstance(e, Input) else e.name
        ids = ",".join("?" if i in bound else f"F:{i}" for i in e.idxs)
        return f"T:{name}[{ids}]"
    if isinstance(e, Map):
        return f"M:{e.op}(" + ";".join(_skeleton(c, bound) for c in e.children) + ")"
    if isinstance(e, Agg):
        inner = _skeleton(e.child, bound | set(e.idxs))
        return f"A:{e.op}({inner})#{len(e.idxs)}"
    if isinstance(e, Mat):
        fmts = ",".join(f.value for f in e.formats)
        return f"X:{fmts}(" + _skeleton(e.child, bound) + ")"
    raise TypeError(e)


def _serialize(e, bound, names):
    if isinstance(e, Literal):
        return f"L:{e.value!r}"
    if isinstance(e, (Input, Alias)):
        name = e.tensor if isinstance(e, Input) else e.name
        parts = []
        for i in e.idxs:
            if i in bound:
                if i not in names:
                    names[i] = f"%{len(names)}"
                parts.append(names[i])
            else:
                parts.append(f"F:{i}")
        return f"T:{name}[{','.join(parts)}]"
    if isinstance(e, Map):
        return f"M:{e.op}(" + ";".join(
            _serialize(c, bound, names) for c in e.children) + ")"
    if isinstance(e, Agg):
        inner = _serialize(e.child, bound | set(e.idxs), names)
        ids = sorted(names.setdefault(i, f"%{len(names)}") for i in e.idxs)
        return f"A:{e.op}({inner})[{','.join(ids)}]"
    if isinstance(e, Mat):
        fmts = ",".join(f.value for f in e.formats)
        inner = _serialize(e.child, bound, names)
        return f"X:{fmts}({inner})"
    raise TypeError(e)


# --- pretty printing ----------------------------------------------------------


def format_expr(e) -> str:
    if isinstance(e, Literal):
        return repr(e.value)
    if isinstance(e, (Input, Alias)):
        name = e.tensor if isinstance(e, Input) else e.name
        if e.protocols:
            ids = ",".join(f"{i}::{p.value}" for i, p in zip(e.idxs, e.protocols))
        else:
            ids = ",".join(e.idxs)
        return f"{name}[{ids}]"
    if isinstance(e, Map):
        return f"Map({e.op}, " + ", ".join(format_expr(c) for c in e.children) + ")"
    if isinstance(e, Agg):
        head = ", ".join(e.idxs)
        sep = ", " if head else ""
        return f"Agg({e.op}, {head}{sep}{format_expr(e.child)})"
    if isinstance(e, Mat):
        fmts = ",".join(f.value for f in e.formats)
        ids = ",".join(e.idx_order)
        return f"Mat([{fmts}], [{ids}], {format_expr(e.child)})"
    raise TypeError(e)


def format_query(q: Query) -> str:
    text = f"Query({q.name}, {format_expr(q.expr)})"
    if q.loop_order is not None:
        text += f"  # loop order: {','.join(q.loop_order)}"
    return text
