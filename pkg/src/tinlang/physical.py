"""Physical optimization: loop orders, output formats, access protocols.

Each logical query becomes one or more physical queries.  The loop order is
chosen by a greedy pass that seeds a pruned shortest-path search over
(prefix set, transposed inputs) states; the cost of an order is the sum of
estimated iteration counts per loop level plus the size of every input that
must be transposed to stay concordant.  Output formats follow per-level
density cutoffs, and every loop index gets exactly one iterated input with
the rest looked up.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace

from .annotate import StatsAnnotator
from .errors import SearchBudgetExceeded
from .ops import get_op
from .plan import (Agg, Alias, Input, Literal, Map, Mat, Plan, Protocol,
                   Query, expr_indices, expr_leaves)
from .stats import aggregate_stats, estimate_nnz
from .tensor import LevelFormat

__all__ = [
    "FormatPolicy", "loop_iteration_cost", "choose_loop_order",
    "choose_output_formats", "choose_protocols", "lower_logical_query",
    "optimize_physical", "PhysicalResult",
]


@dataclass(frozen=True)
class FormatPolicy:
    """Per-level density cutoffs for output storage selection."""

    dense_cutoff: float = 0.25
    bytemap_cutoff: float = 0.05

    def __post_init__(self):
        if not (0 < self.bytemap_cutoff < self.dense_cutoff <= 1):
            raise ValueError("cutoffs must satisfy 0 < bytemap < dense <= 1")


# --- iteration-count model ----------------------------------------------------


def _prefix_estimate(stats, prefix_set, cache):
    key = frozenset(prefix_set) & frozenset(stats.axes)
    if key not in cache:
        drop = tuple(a for a in stats.axes if a not in key)
        cache[key] = estimate_nnz(aggregate_stats(stats, drop))
    return cache[key]


def loop_iteration_cost(order, stats, cache=None):
    """Sum over loop levels of the estimated number of non-fill index
    combinations reached by the first k loop indices."""
    cache = {} if cache is None else cache
    total = 0.0
    seen = set()
    for x in order:
        seen.add(x)
        total += _prefix_estimate(stats, seen, cache)
    return total


def level_estimates(order, stats, cache=None):
    cache = {} if cache is None else cache
    out = []
    seen = set()
    for x in order:
        seen.add(x)
        out.append(_prefix_estimate(stats, seen, cache))
    return out


# --- concordance ----------------------------------------------------------------


def _is_discordant(leaf_idxs, order_pos):
    placed = [(order_pos[x], k) for k, x in enumerate(leaf_idxs)
              if x in order_pos]
    by_loop = [k for _, k in sorted(placed)]
    return by_loop != sorted(by_loop)


def _stored_axes(leaf, out_orders, stored_orders):
    """Loop-index names of a leaf in the order its levels are stored.

    Input tensors are stored in declared index order.  Alias references use
    positional binding against the producing query's output order, so when
    the producer materialized in a different level order the stored axes are
    the corresponding permutation of the reference's indices.
    """
    if (isinstance(leaf, Alias) and stored_orders
            and leaf.name in stored_orders and out_orders
            and leaf.name in out_orders):
        logical = out_orders[leaf.name]
        stored = stored_orders[leaf.name]
        if set(logical) == set(stored) and len(logical) == len(leaf.idxs):
            bind = dict(zip(logical, leaf.idxs))
            return tuple(bind[nm] for nm in stored)
    return tuple(leaf.idxs)


def _discordant_leaves(leaf_axes, order):
    pos = {x: i for i, x in enumerate(order)}
    return frozenset(i for i, axes in enumerate(leaf_axes)
                     if _is_discordant(axes, pos))


# --- loop order search ------------------------------------------------------------


def choose_loop_order(lq: Query, annot: StatsAnnotator, *, budget: int = 1 << 20,
                      out_orders=None, stored_orders=None):
    """Pick the loop order of a logical query.

    Returns (order, discordant leaf positions, model cost).  The cost model
    is the per-level iteration estimate plus the non-fill count of every
    input left discordant by the order.  When the aggregate op is not
    commutative-associative, output indices are constrained to a prefix so
    the output can be written in order.
    """
    agg = lq.expr
    body = agg.child
    stats, _ = annot.annotate(body)
    idxs = tuple(stats.axes)
    if not idxs:
        return (), frozenset(), 0.0
    out_idxs = frozenset(expr_indices(lq.expr))
    op = get_op(agg.op)
    force_prefix = bool(agg.idxs) and not (op.is_commutative and op.is_associative)
    leaves = [l for l in expr_leaves(body)
              if isinstance(l, (Input, Alias)) and l.idxs]
    leaf_axes = [_stored_axes(l, out_orders, stored_orders) for l in leaves]
    leaf_cost = [estimate_nnz(annot.annotate(l)[0]) for l in leaves]
    cache = {}

    def allowed(done):
        cand = [x for x in idxs if x not in done]
        if force_prefix:
            # a fold that neither commutes nor reassociates must visit the
            # output in write order and the aggregated indices as declared
            if not out_idxs <= done:
                cand = [x for x in cand if x in out_idxs]
            else:
                rest = [x for x in agg.idxs if x not in done]
                cand = rest[:1] if rest else cand
        return sorted(cand)

    def extend(order, disc, x):
        new_order = order + (x,)
        new_disc = _discordant_leaves(leaf_axes, new_order)
        c = _prefix_estimate(stats, set(new_order), cache)
        c += sum(leaf_cost[i] for i in new_disc - disc)
        return new_order, new_disc, c

    # greedy upper bound
    order, disc, total = (), frozenset(), 0.0
    while len(order) < len(idxs):
        best = None
        for x in allowed(set(order)):
            no, nd, c = extend(order, disc, x)
            key = (c, len(nd), x)
            if best is None or key < best[0]:
                best = (key, no, nd, c)
        _, order, disc, c = best
        total += c
    greedy = (order, disc, total)

    # shortest-path refinement over (placed set, discordant set) states
    eps = 1e-12
    start = (frozenset(), frozenset())
    best_cost = {start: 0.0}
    orders = {start: ()}
    heap = [(0.0, 0, (), start)]
    full = frozenset(idxs)
    answer = greedy
    pops = 0
    while heap:
        cost, ndisc, order, key = heapq.heappop(heap)
        placed, disc = key
        if cost > best_cost.get(key, math.inf) + eps:
            continue
        if placed == full:
            if (cost, ndisc, order) < (answer[2], len(answer[1]), answer[0]):
                answer = (order, disc, cost)
            continue
        pops += 1
        if pops > budget:
            break
        for x in allowed(placed):
            no, nd, c = extend(order, disc, x)
            nc = cost + c
            if nc > greedy[2] + eps:
                continue
            nk = (placed | {x}, nd)
            if nc >= best_cost.get(nk, math.inf) - eps:
                continue
            best_cost[nk] = nc
            orders[nk] = no
            heapq.heappush(heap, (nc, len(nd), no, nk))
    return answer


# --- output formats --------------------------------------------------------------


def _pick_formats(stats, mat_order, sequential, policy):
    cache = {}
    prev = 1.0
    formats = []
    for k, x in enumerate(mat_order):
        est_k = _prefix_estimate(stats, set(mat_order[:k + 1]), cache)
        denom = max(prev, 1.0) * stats.dims[x]
        density = est_k / denom if denom > 0 else 0.0
        if density > policy.dense_cutoff:
            fmt = LevelFormat.DENSE
        elif density > policy.bytemap_cutoff:
            fmt = LevelFormat.BYTEMAP
        elif sequential:
            fmt = LevelFormat.SORTED_LIST
        else:
            fmt = LevelFormat.HASH
        formats.append(fmt)
        prev = max(est_k, 1.0)
    return tuple(formats)


def choose_output_formats(lq: Query, loop_order, annot: StatsAnnotator,
                          policy: FormatPolicy = FormatPolicy()) -> Mat:
    """Wrap the query in a Mat node: loop-concordant output index order and
    one level format per output index."""
    out_idxs = tuple(expr_indices(lq.expr))
    mat_order = tuple(sorted(out_idxs, key=list(loop_order).index))
    stats, _ = annot.annotate(lq.expr)
    stats = replace(stats, axes=tuple(mat_order)) if set(stats.axes) == set(mat_order) else stats
    sequential = set(mat_order) == set(loop_order[:len(mat_order)])
    formats = _pick_formats(stats, mat_order, sequential, policy)
    return Mat(formats, mat_order, lq.expr)


# --- access protocols -------------------------------------------------------------


def choose_protocols(lq: Query, loop_order, annot: StatsAnnotator):
    """Tag every leaf index: per loop index the input with the fewest
    estimated non-fill entries conditioned on the outer loops is iterated,
    the rest are looked up."""
    body = lq.expr.child
    leaves = [l for l in expr_leaves(body)
              if isinstance(l, (Input, Alias)) and l.idxs]
    leaf_stats = [annot.annotate(l)[0] for l in leaves]
    caches = [dict() for _ in leaves]
    driver = {}
    prefix = []
    for x in loop_order:
        cands = []
        for pos, leaf in enumerate(leaves):
            if x not in leaf.idxs:
                continue
            ctx = set(leaf.idxs) & set(prefix)
            num = _prefix_estimate(leaf_stats[pos], ctx | {x}, caches[pos])
            den = max(_prefix_estimate(leaf_stats[pos], ctx, caches[pos]), 1.0)
            cands.append((num / den, pos))
        if cands:
            driver[x] = min(cands)[1]
        prefix.append(x)

    counter = [0]

    def rebuild(e):
        if isinstance(e, (Input, Alias)) and e.idxs:
            pos = counter[0]
            counter[0] += 1
            prots = tuple(Protocol.ITERATE if driver.get(x) == pos
                          else Protocol.LOOKUP for x in e.idxs)
            return replace(e, protocols=prots)
        if isinstance(e, (Input, Alias, Literal)):
            return e
        if isinstance(e, Map):
            return Map(e.op, tuple(rebuild(c) for c in e.children))
        raise TypeError(e)

    return Agg(lq.expr.op, lq.expr.idxs, rebuild(body))


# --- lowering ----------------------------------------------------------------------


def lower_logical_query(lq: Query, annot: StatsAnnotator, *,
                        policy: FormatPolicy = FormatPolicy(),
                        fresh_name=None, out_orders=None, alias_dims=None,
                        stored_orders=None, budget: int = 1 << 20):
    """Lower one logical query to physical queries: one transpose query per
    discordant input followed by the main query.  Returns (queries, info)."""
    counter = [0]

    def default_name():
        counter[0] += 1
        return f"{lq.name}__t{counter[0]}"

    fresh_name = fresh_name or default_name
    order, disc, cost = choose_loop_order(lq, annot, budget=budget,
                                          out_orders=out_orders,
                                          stored_orders=stored_orders)
    body = lq.expr.child
    queries = []
    transposed = []
    if disc:
        pos_in_order = {x: i for i, x in enumerate(order)}
        leaf_pos = [0]

        def rewrite(e):
            if isinstance(e, (Input, Alias)) and e.idxs:
                pos = leaf_pos[0]
                leaf_pos[0] += 1
                if pos not in disc:
                    return e
                stats, fill = annot.annotate(e)
                src_axes = _stored_axes(e, out_orders, stored_orders)
                target = tuple(sorted(e.idxs, key=pos_in_order.__getitem__))
                name2 = fresh_name()
                t_stats = replace(stats, axes=target)
                t_formats = _pick_formats(t_stats, target, False, policy)
                t_body = replace(e, protocols=(Protocol.ITERATE,) * len(e.idxs))
                queries.append(Query(
                    name2, Mat(t_formats, target, Agg("noop", (), t_body)),
                    loop_order=src_axes))
                transposed.append(name2)
                annot.set_alias(name2, t_stats, fill)
                if out_orders is not None:
                    out_orders[name2] = target
                if stored_orders is not None:
                    stored_orders[name2] = target
                if alias_dims is not None:
                    alias_dims[name2] = tuple(stats.dims[x] for x in target)
                return Alias(name2, target)
            if isinstance(e, (Input, Alias, Literal)):
                return e
            if isinstance(e, Map):
                return Map(e.op, tuple(rewrite(c) for c in e.children))
            raise TypeError(e)

        body = rewrite(body)
        lq = Query(lq.name, Agg(lq.expr.op, lq.expr.idxs, body), lq.loop_order)
    mat = choose_output_formats(lq, order, annot, policy)
    if stored_orders is not None:
        stored_orders[lq.name] = mat.idx_order
    annotated = choose_protocols(lq, order, annot)
    queries.append(Query(lq.name, Mat(mat.formats, mat.idx_order, annotated),
                         loop_order=order))
    body_stats, _ = annot.annotate(annotated.child)
    info = {
        "name": lq.name,
        "loop_order": list(order),
        "level_estimates": level_estimates(order, body_stats),
        "model_cost": cost,
        "transposed": transposed,
        "output_order": list(mat.idx_order),
        "output_formats": [f.value for f in mat.formats],
    }
    return queries, info


@dataclass
class PhysicalResult:
    plan: Plan
    annotator: StatsAnnotator
    out_orders: dict
    alias_dims: dict
    info: list


def optimize_physical(logical_result, *, policy: FormatPolicy = FormatPolicy(),
                      budget: int = 1 << 20) -> PhysicalResult:
    """Lower a whole logical plan using inferred statistics (no execution).
    The executor instead lowers query by query with exact statistics."""
    annot = logical_result.annotator
    out_orders = dict(logical_result.out_orders)
    alias_dims = dict(logical_result.alias_dims)
    stored_orders = {}
    queries = []
    infos = []
    for lq in logical_result.plan.queries:
        qs, info = lower_logical_query(lq, annot, policy=policy,
                                       out_orders=out_orders,
                                       alias_dims=alias_dims,
                                       stored_orders=stored_orders,
                                       budget=budget)
        queries.extend(qs)
        infos.append(info)
    return PhysicalResult(Plan(tuple(queries)), annot, out_orders,
                          alias_dims, infos)
