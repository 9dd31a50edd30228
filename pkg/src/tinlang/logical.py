"""Cost-based logical optimization via variable elimination.

Each input query is rewritten into a sequence of single-aggregate logical
queries.  Aggregated indices are eliminated one at a time: for every index we
extract the minimal sub-query containing it (walking the annotated expression
tree and factoring out whatever the operator algebra lets us), materialize it
under a fresh alias, and substitute the alias back.  The elimination order is
chosen to minimize the estimated materialization cost, either greedily or by
a shortest-path search over subsets of indices bounded by the greedy result.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace

from .annotate import StatsAnnotator
from .errors import (CyclicConstraints, ExpansionLimitExceeded, ExtentMismatch,
                     IndexNotAnnotated, SearchBudgetExceeded, UnboundName,
                     UnknownIndex)
from .ops import get_op
from .plan import (Agg, Alias, Input, Literal, Map, Plan, Query, canonicalize,
                   distribute_pointwise, expr_indices)
from .stats import estimate_nnz

__all__ = [
    "CostParams", "QueryInfo", "LogicalResult", "ANode", "build_aet",
    "aet_expr", "elimination_partial_order", "find_msq", "query_cost",
    "greedy_order", "bnb_order", "optimize_logical",
]


@dataclass(frozen=True)
class CostParams:
    """Weights of the cost model: a scales the materialized aggregate size,
    b the size of the pointwise expression feeding it."""

    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("cost weights must be positive")


# --- annotated expression tree ----------------------------------------------


class ANode:
    """Mutable expression tree in which Agg nodes are recorded as (index,
    aggregate op) annotations on their former child, inner to outer."""

    __slots__ = ("op", "children", "leaf", "anns")

    def __init__(self, op=None, children=None, leaf=None, anns=None):
        self.op = op
        self.children = list(children) if children else []
        self.leaf = leaf
        self.anns = list(anns) if anns else []

    def is_leaf(self):
        return self.op is None

    def clone(self):
        return ANode(self.op, [c.clone() for c in self.children], self.leaf,
                     self.anns)

    def __repr__(self):
        from .plan import format_expr

        return f"ANode({format_expr(aet_expr(self))})"


def build_aet(expr) -> ANode:
    if isinstance(expr, (Input, Alias, Literal)):
        return ANode(leaf=expr)
    if isinstance(expr, Map):
        return ANode(op=expr.op, children=[build_aet(c) for c in expr.children])
    if isinstance(expr, Agg):
        node = build_aet(expr.child)
        node.anns.extend((i, expr.op) for i in expr.idxs)
        return node
    raise TypeError(expr)


def aet_expr(node: ANode, with_anns: bool = True):
    """Convert back to a plan expression, re-wrapping annotations as Aggs."""
    if node.is_leaf():
        e = node.leaf
    else:
        children = tuple(aet_expr(c) for c in node.children)
        if len(children) == 1 and get_op(node.op).arity is None:
            e = children[0]
        else:
            e = Map(node.op, children)
    if with_anns:
        for idx, op in node.anns:
            e = Agg(op, (idx,), e)
    return e


def _contains(node, idx):
    if node.is_leaf():
        return isinstance(node.leaf, (Input, Alias)) and idx in node.leaf.idxs
    return any(_contains(c, idx) for c in node.children)


def _subtree_ann_idxs(node):
    out = {i for i, _ in node.anns}
    for c in node.children:
        out |= _subtree_ann_idxs(c)
    return out


def _find_ann(node, idx):
    for k, (i, _) in enumerate(node.anns):
        if i == idx:
            return node, k
    for c in node.children:
        found = _find_ann(c, idx)
        if found is not None:
            return found
    return None


def _become(dst: ANode, src: ANode):
    dst.op, dst.children, dst.leaf, dst.anns = (
        src.op, src.children, src.leaf, src.anns)


# --- repeated application of an aggregate to a constant region --------------


def _wrap_available(f):
    return f.is_idempotent or f.name in ("+", "*")


def _repeat_node(f, child: ANode, n: int):
    """Wrap a region that does not mention the aggregated index: applying the
    aggregate n times collapses to g(x, n)."""
    if f.is_idempotent:
        return child
    if f.name == "+":
        return ANode(op="*", children=[child, ANode(leaf=Literal(n))])
    if f.name == "*":
        return ANode(op="pow", children=[child, ANode(leaf=Literal(n))])
    return None


# --- minimal sub-query extraction --------------------------------------------


def find_msq(aet: ANode, idx: str, extents: dict, fresh_name):
    """Eliminate idx from the tree in place, splitting out the minimal
    sub-queries that aggregate it.  Returns the emitted logical queries;
    several are returned when the aggregate pushes into several summands.
    Each captured region is replaced by an Alias to the new intermediate."""
    found = _find_ann(aet, idx)
    if found is None:
        raise IndexNotAnnotated(f"index '{idx}' carries no aggregate annotation")
    node, k = found
    _, f_name = node.anns[k]
    node.anns = node.anns[:k] + node.anns[k + 1:]
    emitted = []
    _extract(node, idx, get_op(f_name), extents, fresh_name, emitted)
    return emitted


def _emit(f, idx, body, fresh_name, emitted):
    name = fresh_name()
    out_idxs = tuple(x for x in expr_indices(body) if x != idx)
    emitted.append(Query(name, Agg(f.name, (idx,), body)))
    return Alias(name, out_idxs)


def _check_clear(nodes):
    for n in nodes:
        if _subtree_ann_idxs(n):
            raise CyclicConstraints(
                "elimination order is inconsistent with aggregate nesting")


def _extract(node, idx, f, extents, fresh_name, emitted):
    if not _contains(node, idx):
        # the whole region is constant in idx: fold by repetition
        n = extents.get(idx)
        if n is None:
            raise UnknownIndex(f"aggregated index '{idx}' has unknown extent")
        inner = ANode(node.op, node.children, node.leaf)
        wrapped = _repeat_node(f, inner, n)
        if wrapped is None:
            raise UnknownIndex(
                f"cannot aggregate '{idx}' with '{f.name}' over a region "
                f"that never mentions it")
        wrapped.anns = node.anns
        _become(node, wrapped)
        return
    if node.is_leaf():
        node.leaf = _emit(f, idx, node.leaf, fresh_name, emitted)
        return
    m = get_op(node.op)
    rel = [c for c in node.children if _contains(c, idx)]
    irr = [c for c in node.children if not _contains(c, idx)]
    f_ca = f.is_commutative and f.is_associative
    m_ca = m.is_commutative and m.is_associative
    if f_ca and m_ca and m.distributes_over_op(f):
        if len(rel) == 1 and not rel[0].anns:
            # factor every other child out and keep descending
            _extract(rel[0], idx, f, extents, fresh_name, emitted)
            return
        _check_clear(rel)
        if len(rel) == 1:
            body = aet_expr(rel[0])
        else:
            body = Map(node.op, tuple(aet_expr(c) for c in rel))
        alias = _emit(f, idx, body, fresh_name, emitted)
        node.children = [ANode(leaf=alias)] + irr
        return
    if f_ca and node.op == f.name and (not irr or _wrap_available(f)):
        # the aggregate pushes through its own operator into each summand;
        # constant summands are folded by repetition
        _check_clear(rel)
        n = extents.get(idx)
        if irr and n is None:
            raise UnknownIndex(f"aggregated index '{idx}' has unknown extent")
        for c in rel:
            _extract(c, idx, f, extents, fresh_name, emitted)
        node.children = rel + [_repeat_node(f, c, n) for c in irr]
        return
    # blocking: the entire region below this node is the sub-query body
    _check_clear(node.children)
    body = aet_expr(ANode(node.op, node.children, node.leaf))
    alias = _emit(f, idx, body, fresh_name, emitted)
    node.op = None
    node.children = []
    node.leaf = alias


# --- elimination partial order ------------------------------------------------


def _sim(node, idx, f, prereqs):
    """Mirror of _extract that only records which annotations the elimination
    of idx would capture."""
    if node.is_leaf() or not _contains(node, idx):
        return
    m = get_op(node.op)
    rel = [c for c in node.children if _contains(c, idx)]
    irr = [c for c in node.children if not _contains(c, idx)]
    f_ca = f.is_commutative and f.is_associative
    m_ca = m.is_commutative and m.is_associative
    if f_ca and m_ca and m.distributes_over_op(f):
        if len(rel) == 1 and not rel[0].anns:
            _sim(rel[0], idx, f, prereqs)
            return
        for c in rel:
            prereqs |= _subtree_ann_idxs(c)
        return
    if f_ca and node.op == f.name and (not irr or _wrap_available(f)):
        for c in rel:
            if c.anns:
                prereqs |= _subtree_ann_idxs(c)
            else:
                _sim(c, idx, f, prereqs)
        return
    for c in node.children:
        prereqs |= _subtree_ann_idxs(c)


def elimination_partial_order(aet: ANode) -> dict:
    """For every annotated index, the set of indices whose aggregates must be
    eliminated first.  Constraints arise from differently-nested aggregate
    operators that do not commute and from annotations inside the region the
    traversal for an index would capture."""
    order = {}

    def visit(node):
        for pos, (i, f_name) in enumerate(node.anns):
            pre = set()
            for q in range(pos):
                j, g_name = node.anns[q]
                if g_name != f_name:
                    pre.add(j)
            _sim(node, i, get_op(f_name), pre)
            order[i] = pre
        for c in node.children:
            visit(c)

    visit(aet)
    _check_acyclic(order)
    return order


def _check_acyclic(order):
    done = set()
    pending = set(order)
    while pending:
        ready = {i for i in pending if order[i] <= done}
        if not ready:
            raise CyclicConstraints(
                f"elimination constraints contain a cycle among {sorted(pending)}")
        done |= ready
        pending -= ready


# --- cost model -----------------------------------------------------------------


def query_cost(q: Query, annot: StatsAnnotator, params: CostParams) -> float:
    """a * nnz(aggregate output) + b * nnz(pointwise body)."""
    root_stats, _ = annot.annotate(q.expr)
    body = q.expr.child if isinstance(q.expr, Agg) else q.expr
    body_stats, _ = annot.annotate(body)
    return (params.a * estimate_nnz(root_stats)
            + params.b * estimate_nnz(body_stats))


# --- search over elimination orders ------------------------------------------


class _Namer:
    def __init__(self, reserved):
        self.k = 0
        self.reserved = set(reserved)

    def fresh(self):
        while True:
            self.k += 1
            name = f"I{self.k}"
            if name not in self.reserved:
                self.reserved.add(name)
                return name


def _annot_copy(a: StatsAnnotator) -> StatsAnnotator:
    b = StatsAnnotator(a.mode, a.tensors, a.alias_stats, a.alias_fills, a.cond_cap)
    b._tensor_cache = a._tensor_cache  # immutable entries; safe to share
    return b


class _State:
    """A partially eliminated query: the tree plus the alias statistics
    accumulated so far.  Search branches fork it."""

    __slots__ = ("aet", "annot", "counter")

    def __init__(self, aet, annot, counter=0):
        self.aet = aet
        self.annot = annot
        self.counter = counter

    def fork(self):
        return _State(self.aet.clone(), _annot_copy(self.annot), self.counter)

    def step(self, idx, extents, params):
        def fresh():
            self.counter += 1
            return f"__v{self.counter}"

        emitted = find_msq(self.aet, idx, extents, fresh)
        cost = 0.0
        for q in emitted:
            stats, fill = self.annot.annotate(q.expr)
            self.annot.set_alias(q.name, stats, fill)
            cost += query_cost(q, self.annot, params)
        return emitted, cost


def _search_greedy(state0, prereq, extents, params):
    state = state0.fork()
    order, total = [], 0.0
    remaining = set(prereq)
    while remaining:
        done = set(order)
        ready = sorted(i for i in remaining if prereq[i] <= done)
        if not ready:
            raise CyclicConstraints("no index is ready for elimination")
        best = None
        for i in ready:
            s = state.fork()
            emitted, c = s.step(i, extents, params)
            key = (c, i, len(emitted))
            if best is None or key < best[0]:
                best = (key, i, s, c)
        _, i, state, c = best
        order.append(i)
        total += c
        remaining.discard(i)
    return order, total


def _search_exact(state0, prereq, extents, params, budget):
    greedy_order_, greedy_total = _search_greedy(state0, prereq, extents, params)
    all_set = frozenset(prereq)
    if not all_set:
        return [], 0.0, False
    best_cost = {frozenset(): 0.0}
    states = {frozenset(): state0.fork()}
    heap = [(0.0, (), frozenset())]
    pops = 0
    eps = 1e-12
    while heap:
        cost, order, done = heapq.heappop(heap)
        if cost > best_cost.get(done, math.inf) + eps:
            continue
        if done == all_set:
            return list(order), cost, False
        pops += 1
        if pops > budget:
            return greedy_order_, greedy_total, True
        state = states.pop(done)
        for i in sorted(all_set - done):
            if i in done or not prereq[i] <= done:
                continue
            s = state.fork()
            _, c = s.step(i, extents, params)
            nd = done | {i}
            nc = cost + c
            if nc > greedy_total + eps or nc >= best_cost.get(nd, math.inf) - eps:
                continue
            best_cost[nd] = nc
            states[nd] = s
            heapq.heappush(heap, (nc, order + (i,), nd))
    return greedy_order_, greedy_total, False


# --- per-query lowering ----------------------------------------------------------


def _leaf_extents(expr, tensors, alias_dims):
    extents = {}

    def visit(e):
        if isinstance(e, (Input, Alias)):
            if isinstance(e, Input):
                t = tensors.get(e.tensor)
                if t is None:
                    raise UnboundName(f"no tensor bound for input '{e.tensor}'")
                dims = t.dims
            else:
                dims = alias_dims[e.name]
            if len(dims) != len(e.idxs):
                raise ExtentMismatch(
                    f"leaf of order {len(dims)} accessed with {len(e.idxs)} indices")
            for x, n in zip(e.idxs, dims):
                if extents.setdefault(x, n) != n:
                    raise ExtentMismatch(
                        f"index '{x}' has conflicting extents {extents[x]} and {n}")
        elif isinstance(e, Map):
            for c in e.children:
                visit(c)
        elif isinstance(e, Agg):
            visit(e.child)

    visit(expr)
    return extents


def _reorder_axes(stats, order):
    if tuple(stats.axes) == tuple(order):
        return stats
    if set(stats.axes) != set(order):
        raise ValueError(f"cannot reorder axes {stats.axes} to {order}")
    return replace(stats, axes=tuple(order))


@dataclass
class QueryInfo:
    name: str
    elimination_order: tuple
    cost: float
    emitted: tuple
    distributed: bool
    budget_exhausted: bool = False


@dataclass
class LogicalResult:
    plan: Plan
    annotator: StatsAnnotator
    alias_dims: dict
    out_orders: dict
    fills: dict
    info: list
    total_cost: float


def _lower_query(q, annot, tensors, alias_dims, out_orders, namer, params,
                 method, distribute, distribute_cap, budget):
    orig_out = tuple(expr_indices(q.expr))
    candidates = [(canonicalize(q), False)]
    if distribute:
        try:
            dq = distribute_pointwise(q, distribute_cap)
            if dq.expr != candidates[0][0].expr:
                candidates.append((dq, True))
        except ExpansionLimitExceeded:
            pass
    plans = []
    for pos, (cand, is_dist) in enumerate(candidates):
        extents = _leaf_extents(cand.expr, tensors, alias_dims)
        aet = build_aet(cand.expr)
        prereq = elimination_partial_order(aet)
        state0 = _State(aet, annot)
        exhausted = False
        if method == "exact":
            order, cost, exhausted = _search_exact(
                state0, prereq, extents, params, budget)
        else:
            order, cost = _search_greedy(state0, prereq, extents, params)
        plans.append((cost, pos, cand, is_dist, order, extents, exhausted))
    cost, _, cand, is_dist, order, extents, exhausted = min(plans,
                                                            key=lambda p: p[:2])

    # replay the winning order with the program-wide alias namer
    aet = build_aet(cand.expr)
    queries = []
    total = 0.0
    for i in order:
        for sq in find_msq(aet, i, extents, namer.fresh):
            stats, fill = annot.annotate(sq.expr)
            annot.set_alias(sq.name, stats, fill)
            out = tuple(expr_indices(sq.expr))
            alias_dims[sq.name] = tuple(extents[x] for x in out)
            out_orders[sq.name] = out
            total += query_cost(sq, annot, params)
            queries.append(sq)
    remaining = aet_expr(aet)
    if (queries and isinstance(remaining, Alias)
            and remaining.name == queries[-1].name
            and remaining.idxs == out_orders[queries[-1].name]
            and remaining.idxs == orig_out):
        # the last intermediate IS the result: publish it under the query name
        last = queries.pop()
        stats = annot.alias_stats.pop(last.name)
        fill = annot.alias_fills.pop(last.name)
        alias_dims.pop(last.name)
        out_orders.pop(last.name)
        final = Query(q.name, last.expr)
    else:
        final = Query(q.name, Agg("noop", (), remaining))
        stats, fill = annot.annotate(final.expr)
        total += query_cost(final, annot, params)
    stats = _reorder_axes(stats, orig_out)
    annot.set_alias(q.name, stats, fill)
    alias_dims[q.name] = tuple(extents[x] for x in orig_out)
    out_orders[q.name] = orig_out
    queries.append(final)
    info = QueryInfo(q.name, tuple(order), total, tuple(sq.name for sq in queries),
                     is_dist, exhausted)
    return queries, info


def optimize_logical(plan: Plan, tensors: dict, *, stats_mode: str = "uniform",
                     method: str = "greedy", cost_params: CostParams = None,
                     distribute: bool = True, distribute_cap: int = 64,
                     budget: int = 1 << 20, cond_cap: int = 2) -> LogicalResult:
    """Lower an input-dialect plan to the logical dialect."""
    if method not in ("greedy", "exact"):
        raise ValueError(f"unknown optimizer method '{method}'")
    params = cost_params or CostParams()
    annot = StatsAnnotator(stats_mode, tensors, cond_cap=cond_cap)
    namer = _Namer({q.name for q in plan.queries} | set(tensors))
    alias_dims = {}
    out_orders = {}
    out_queries = []
    infos = []
    total = 0.0
    for q in plan.queries:
        queries, info = _lower_query(q, annot, tensors, alias_dims, out_orders,
                                     namer, params, method, distribute,
                                     distribute_cap, budget)
        out_queries.extend(queries)
        infos.append(info)
        total += info.cost
    return LogicalResult(Plan(tuple(out_queries)), annot, alias_dims,
                         out_orders, dict(annot.alias_fills), infos, total)


def greedy_order(q: Query, tensors: dict, *, stats_mode: str = "uniform",
                 cost_params: CostParams = None, distribute: bool = True):
    """Lower one query greedily; returns its emitted logical queries."""
    res = optimize_logical(Plan((q,)), tensors, stats_mode=stats_mode,
                           method="greedy", cost_params=cost_params,
                           distribute=distribute)
    return list(res.plan.queries), res.info[0]


def bnb_order(q: Query, tensors: dict, *, stats_mode: str = "uniform",
              cost_params: CostParams = None, distribute: bool = True,
              budget: int = 1 << 20):
    """Lower one query with the exact subset search; returns its emitted
    logical queries.  Model cost is never above the greedy plan's."""
    res = optimize_logical(Plan((q,)), tensors, stats_mode=stats_mode,
                           method="exact", cost_params=cost_params,
                           distribute=distribute, budget=budget)
    return list(res.plan.queries), res.info[0]
