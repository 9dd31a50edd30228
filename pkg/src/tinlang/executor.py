"""Interpreter for physical plans.

Runs protocol-annotated loop nests directly over fibertree tensors.  Each
loop level runs in one of three modes chosen by a fill-propagation analysis
of the body:

* iterate: the tagged input's level stream drives the loop and the others
  are probed; coordinates it lacks are skipped because its absence forces
  the body to its fill value,
* union: the merged streams of all participants drive the loop, valid when
  simultaneous absence forces the body fill,
* dense: the full index domain is visited.

Skipped combinations are settled at finalization: per output coordinate the
interpreter tracks how many aggregate combinations were actually folded and
folds the body fill over the missing count in one step.
"""

from __future__ import annotations

import time
from dataclasses import replace
from functools import reduce

from .annotate import StatsAnnotator
from .errors import (DiscordantAccess, ExtentMismatch, TimeoutExceeded,
                     UnboundName)
from .logical import LogicalResult, optimize_logical
from .ops import get_op
from .parser import parse_program
from .physical import FormatPolicy, lower_logical_query
from .plan import (Agg, Alias, Input, Literal, Map, Protocol, Query,
                   canonical_form, expr_leaves)
from .stats import estimate_nnz, stats_from_tensor
from .tensor import TensorData, count_nonfill, materialize, transpose

__all__ = ["BindingEnv", "CSECache", "execute_physical_query", "execute_plan",
           "run_program"]

_UNKNOWN = object()


# --- fill propagation ---------------------------------------------------------


def _known_eval(e, assign, counter):
    """Value of e when some leaves are pinned (by occurrence position) and
    the rest are unknown; _UNKNOWN when it cannot be decided."""
    if isinstance(e, Literal):
        return e.value
    if isinstance(e, (Input, Alias)):
        i = counter[0]
        counter[0] += 1
        return assign.get(i, _UNKNOWN)
    op = get_op(e.op)
    vals = [_known_eval(c, assign, counter) for c in e.children]
    if op.annihilator is not None:
        if any(v is not _UNKNOWN and v == op.annihilator for v in vals):
            return op.annihilator
    if all(v is not _UNKNOWN for v in vals):
        return op.apply(vals)
    return _UNKNOWN


# --- compiled scalar body -------------------------------------------------------

_INLINE_VARIADIC = {"+", "*"}


def _compile_body(body):
    """Compile the pointwise body to a Python lambda over one argument per
    Input/Alias occurrence, in left-to-right leaf order."""
    ctx = {}
    counter = [0]

    def gen(e):
        if isinstance(e, Literal):
            return repr(e.value)
        if isinstance(e, (Input, Alias)):
            k = counter[0]
            counter[0] += 1
            return f"a{k}"
        parts = [gen(c) for c in e.children]
        op = e.op
        spec = get_op(op)
        if spec.arity is None and len(parts) == 1:
            return parts[0]
        if op in _INLINE_VARIADIC:
            return "(" + f" {op} ".join(parts) + ")"
        if op in ("-", "/"):
            return f"({parts[0]} {op} {parts[1]})"
        if op == "pow":
            return f"({parts[0]} ** {parts[1]})"
        if op == ">":
            return f"(1 if {parts[0]} > {parts[1]} else 0)"
        if op in ("min", "max"):
            return f"{op}({', '.join(parts)})"
        if op == "and":
            return "(" + " and ".join(f"bool({p})" for p in parts) + ")"
        if op == "or":
            return "(" + " or ".join(f"bool({p})" for p in parts) + ")"
        fname = f"_f_{op}" if op.isidentifier() else f"_f{len(ctx)}"
        ctx[fname] = spec.fn
        return f"{fname}({', '.join(parts)})"

    src = gen(body)
    n = counter[0]
    args = ", ".join(f"a{k}" for k in range(n))
    glob = {"__builtins__": {}, "min": min, "max": max, "bool": bool}
    glob.update(ctx)
    return eval(f"lambda {args}: {src}", glob), n


# --- fold helpers ----------------------------------------------------------------


def _fold_fill(f, fill, n):
    """Value of folding n copies of fill with aggregate op f."""
    if n == 1:
        return fill
    if f.identity is not None and fill == f.identity:
        return f.identity
    if f.is_idempotent:
        return fill
    if f.repeat_apply is not None:
        return f.repeat_apply(fill, n)
    if f.fn(fill, fill) == fill:
        return fill
    if n > (1 << 16):
        raise ValueError(
            f"cannot fold {n} copies of {fill!r} with '{f.name}'")
    return reduce(f.fn, [fill] * n)


def _fold_missing(f, acc, fill, k):
    if f.identity is not None and fill == f.identity:
        return acc
    if f.is_idempotent:
        return f.fn(acc, fill)
    if f.repeat_apply is not None:
        return f.fn(acc, f.repeat_apply(fill, k))
    raise AssertionError("missing combinations under a non-foldable aggregate")


# --- execution environment --------------------------------------------------------


class BindingEnv:
    """Input tensors plus materialized intermediates, with the logical output
    index order of every materialized name (used to bind alias references)."""

    def __init__(self, tensors=None, out_orders=None):
        self.tensors = dict(tensors or {})
        self.out_orders = dict(out_orders or {})


class CSECache:
    def __init__(self):
        self.data = {}
        self.hits = 0
        self.misses = 0


class _Occ:
    __slots__ = ("tensor", "fill", "axes", "prots", "nodes", "order")

    def __init__(self, tensor, axes, prots):
        self.tensor = tensor
        self.fill = tensor.fill
        self.axes = axes
        self.prots = prots
        self.order = tensor.order
        self.nodes = [None] * (self.order + 1)
        if self.order:
            self.nodes[0] = tensor.payload


# --- single-query interpreter -------------------------------------------------------


def execute_physical_query(pq: Query, env: BindingEnv, *, counters=None,
                           deadline=None) -> TensorData:
    mat = pq.expr
    agg = mat.child
    body = agg.child
    loop_order = tuple(pq.loop_order or ())
    f = get_op(agg.op)
    agg_idxs = tuple(agg.idxs)

    # bind leaves
    occs = []
    extents = {}
    for leaf in expr_leaves(body):
        if isinstance(leaf, Literal):
            continue
        name = leaf.tensor if isinstance(leaf, Input) else leaf.name
        t = env.tensors.get(name)
        if t is None:
            raise UnboundName(f"no tensor bound for '{name}'")
        if isinstance(leaf, Alias):
            logical = env.out_orders.get(name) or t.index_names or leaf.idxs
            bind = dict(zip(logical, leaf.idxs))
            stored = t.index_names or logical
            axes = tuple(bind[nm] for nm in stored)
        else:
            axes = tuple(leaf.idxs)
        prot_by_name = dict(zip(leaf.idxs,
                                leaf.protocols or (Protocol.LOOKUP,) * len(leaf.idxs)))
        occs.append(_Occ(t, axes, tuple(prot_by_name[a] for a in axes)))
        for a, n in zip(axes, t.dims):
            if extents.setdefault(a, n) != n:
                raise ExtentMismatch(
                    f"index '{a}' has conflicting extents {extents[a]} and {n}")

    posmap = {x: i for i, x in enumerate(loop_order)}
    for occ in occs:
        try:
            positions = [posmap[a] for a in occ.axes]
        except KeyError as missing:
            raise DiscordantAccess(
                f"stored index {missing} is not in the loop order") from None
        if positions != sorted(positions):
            raise DiscordantAccess(
                f"stored order {occ.axes} is discordant with {loop_order}")

    # fill propagation: body fill, per-occurrence skip safety
    n_occ = len(occs)
    fixed = {i: occ.tensor.payload for i, occ in enumerate(occs)
             if occ.order == 0}
    body_fill = _known_eval(body, {**{i: occ.fill for i, occ in enumerate(occs)},
                                   **fixed}, [0])
    skip_safe = []
    for i, occ in enumerate(occs):
        if occ.order == 0:
            skip_safe.append(False)
            continue
        v = _known_eval(body, {**fixed, i: occ.fill}, [0])
        skip_safe.append(v is not _UNKNOWN and v == body_fill)

    can_fold = (not agg_idxs or (f.identity is not None and body_fill == f.identity)
                or f.is_idempotent or f.repeat_apply is not None)

    # per-level plan
    plans = []
    for x in loop_order:
        parts = [(i, occ.axes.index(x)) for i, occ in enumerate(occs)
                 if x in occ.axes]
        driver = None
        if not parts:
            mode = "dense"
        else:
            driver = next((p for p in parts
                           if occs[p[0]].prots[p[1]] is Protocol.ITERATE),
                          parts[0])
            if skip_safe[driver[0]]:
                mode = "iterate"
            else:
                v = _known_eval(body, {**fixed,
                                       **{i: occs[i].fill for i, _ in parts}}, [0])
                mode = "union" if v is not _UNKNOWN and v == body_fill else "dense"
        if x in agg_idxs and not can_fold and mode != "dense":
            mode = "dense"
        plans.append((x, mode, driver, parts))

    body_fn, n_args = _compile_body(body)
    if n_args != n_occ:
        raise AssertionError("leaf occurrence count mismatch")
    args = [None] * n_occ
    for i, v in fixed.items():
        args[i] = v

    out_pos = [posmap[x] for x in mat.idx_order]
    coord = [0] * len(loop_order)
    depth = len(loop_order)
    acc = {}
    level_iters = [0] * depth
    evals = [0]
    accum = f.fn

    def assign(i, k, child):
        occ = occs[i]
        if k == occ.order - 1:
            args[i] = occ.fill if child is None else child
        else:
            occ.nodes[k + 1] = child

    def exec_level(d):
        if d == depth:
            evals[0] += 1
            if deadline is not None and (evals[0] & 0xFFFF) == 0:
                if time.monotonic() > deadline:
                    raise TimeoutExceeded("query exceeded its time budget")
            v = body_fn(*args)
            key = tuple(coord[p] for p in out_pos)
            cell = acc.get(key)
            if cell is None:
                acc[key] = [v, 1]
            else:
                cell[0] = accum(cell[0], v)
                cell[1] += 1
            return
        x, mode, driver, parts = plans[d]
        if mode == "iterate":
            di, dk = driver
            dnode = occs[di].nodes[dk]
            if dnode is None:
                return
            others = [(i, k, skip_safe[i], occs[i]) for (i, k) in parts
                      if (i, k) != driver]
            d_leaf = dk == occs[di].order - 1
            d_occ = occs[di]
            for c, child in dnode.stored_items():
                skip = False
                for (i, k, safe, occ) in others:
                    parent = occ.nodes[k]
                    ch = parent.get(c) if parent is not None else None
                    if ch is None and safe and occ.order - 1 > k:
                        skip = True
                        break
                    if k == occ.order - 1:
                        args[i] = occ.fill if ch is None else ch
                        if safe and args[i] == occ.fill:
                            skip = True
                            break
                    else:
                        occ.nodes[k + 1] = ch
                if skip:
                    continue
                if d_leaf:
                    args[di] = child
                    if child == d_occ.fill:
                        continue
                else:
                    d_occ.nodes[dk + 1] = child
                coord[d] = c
                level_iters[d] += 1
                exec_level(d + 1)
            return
        if mode == "union":
            present = set()
            for (i, k) in parts:
                node = occs[i].nodes[k]
                if node is not None:
                    leaf = k == occs[i].order - 1
                    fillv = occs[i].fill
                    for c, ch in node.stored_items():
                        if leaf and ch == fillv:
                            continue
                        present.add(c)
            coords = sorted(present)
        else:
            coords = range(extents[x])
        for c in coords:
            for (i, k) in parts:
                node = occs[i].nodes[k]
                assign(i, k, node.get(c) if node is not None else None)
            coord[d] = c
            level_iters[d] += 1
            exec_level(d + 1)

    exec_level(0)

    # finalize: fold the body fill over never-visited aggregate combinations
    n_agg = 1
    for x in agg_idxs:
        n_agg *= extents[x]
    out_fill = _fold_fill(f, body_fill, n_agg) if agg_idxs else body_fill
    entries = {}
    for key, (v, cnt) in acc.items():
        missing = n_agg - cnt
        if missing and agg_idxs:
            v = _fold_missing(f, v, body_fill, missing)
        entries[key] = v
    out_dims = tuple(extents[x] for x in mat.idx_order)
    if counters is not None:
        counters["level_iterations"] = list(level_iters)
        counters["body_evaluations"] = evals[0]
    return materialize(entries, out_dims, out_fill, levels=mat.formats,
                       index_names=mat.idx_order)


# --- plan execution with JIT lowering and CSE ----------------------------------------


def _cse_key(expr, env, ident):
    def rewrite(e):
        if isinstance(e, Input):
            t = env.tensors.get(e.tensor)
            return Input(f"#{ident(('in', id(t)))}", e.idxs)
        if isinstance(e, Alias):
            t = env.tensors.get(e.name)
            order = tuple(env.out_orders.get(e.name) or ())
            return Alias(f"#{ident(('al', id(t), order))}", e.idxs)
        if isinstance(e, Literal):
            return e
        if isinstance(e, Map):
            return Map(e.op, tuple(rewrite(c) for c in e.children))
        if isinstance(e, Agg):
            return Agg(e.op, e.idxs, rewrite(e.child))
        raise TypeError(e)

    return canonical_form(rewrite(expr))


def execute_plan(lres: LogicalResult, tensors: dict, *,
                 policy: FormatPolicy = FormatPolicy(), use_cse: bool = True,
                 collect_counters: bool = False, timeout_secs: float = 60.0,
                 budget: int = 1 << 20, outputs=None):
    """Execute a logical plan: per query, refresh alias statistics from the
    materialized tensors, lower to physical queries just in time, consult the
    CSE cache, run, and free intermediates nobody references anymore.
    Returns (outputs dict, report dict).  All wall-clock fields of the report
    live under keys ending in ``_ms``."""
    env = BindingEnv(tensors, lres.out_orders)
    annot = StatsAnnotator(lres.annotator.mode, tensors,
                           cond_cap=lres.annotator.cond_cap)
    cache = CSECache()
    refs = {}
    for q in lres.plan.queries:
        for leaf in expr_leaves(q.expr):
            if isinstance(leaf, Alias):
                refs[leaf.name] = refs.get(leaf.name, 0) + 1
    out_names = set(outputs) if outputs is not None \
        else {q.name for q in lres.plan.queries}
    idents = {}

    def ident(key):
        if key not in idents:
            idents[key] = len(idents)
        return idents[key]

    stored_orders = {}
    report_queries = []
    max_intermediate = 0
    timings = {"stats_ms": 0.0, "optimize_ms": 0.0, "execute_ms": 0.0}

    def refresh_stats(name):
        t0 = time.perf_counter()
        t = env.tensors[name]
        named = t if t.index_names else t.with_index_names(env.out_orders[name])
        s = stats_from_tensor(named, annot._stats_mode(), annot.cond_cap)
        order = tuple(env.out_orders[name])
        if set(s.axes) == set(order):
            s = replace(s, axes=order)
        annot.set_alias(name, s, t.fill)
        timings["stats_ms"] += (time.perf_counter() - t0) * 1e3
        return s

    for lq in lres.plan.queries:
        deadline = (time.monotonic() + timeout_secs) if timeout_secs else None
        pre = lres.annotator.alias_stats.get(lq.name)
        entry = {"name": lq.name,
                 "estimated_nnz": estimate_nnz(pre) if pre is not None else None,
                 "cse_hit": False}
        key = _cse_key(lq.expr, env, ident) if use_cse else None
        if key is not None and key in cache.data:
            cache.hits += 1
            entry["cse_hit"] = True
            env.tensors[lq.name] = cache.data[key]
            if cache.data[key].index_names:
                stored_orders[lq.name] = cache.data[key].index_names
            refresh_stats(lq.name)
        else:
            if key is not None:
                cache.misses += 1
            t0 = time.perf_counter()
            pqs, info = lower_logical_query(lq, annot, policy=policy,
                                            out_orders=env.out_orders,
                                            stored_orders=stored_orders,
                                            budget=budget)
            timings["optimize_ms"] += (time.perf_counter() - t0) * 1e3
            entry.update({k: info[k] for k in
                          ("loop_order", "level_estimates", "model_cost",
                           "transposed", "output_order", "output_formats")})
            for pq in pqs:
                counters = {} if collect_counters else None
                t0 = time.perf_counter()
                t = execute_physical_query(pq, env, counters=counters,
                                           deadline=deadline)
                timings["execute_ms"] += (time.perf_counter() - t0) * 1e3
                env.tensors[pq.name] = t
                refresh_stats(pq.name)
                if pq.name not in out_names:
                    max_intermediate = max(max_intermediate, count_nonfill(t))
                if counters is not None:
                    entry.setdefault("counters", {})[pq.name] = counters
            for name in info["transposed"]:
                del env.tensors[name]
            if key is not None:
                cache.data[key] = env.tensors[lq.name]
        result = env.tensors[lq.name]
        entry["actual_nnz"] = count_nonfill(result)
        entry["post_estimate_nnz"] = estimate_nnz(annot.alias_stats[lq.name])
        report_queries.append(entry)
        for leaf in expr_leaves(lq.expr):
            if isinstance(leaf, Alias):
                refs[leaf.name] -= 1
                if (refs[leaf.name] == 0 and leaf.name not in out_names
                        and leaf.name not in tensors
                        and leaf.name in env.tensors):
                    del env.tensors[leaf.name]
    results = {}
    for n in out_names:
        if n not in env.tensors:
            continue
        t = env.tensors[n]
        want = tuple(env.out_orders.get(n) or ())
        if want and t.index_names and t.index_names != want:
            perm = tuple(t.index_names.index(nm) for nm in want)
            t = transpose(t, perm)
        results[n] = t
    report = {
        "queries": report_queries,
        "cache": {"hits": cache.hits, "misses": cache.misses,
                  "enabled": use_cse},
        "max_intermediate_nnz": max_intermediate,
        "timings": timings,
    }
    return results, report


def run_program(text: str, tensors: dict, *, stats_mode: str = "uniform",
                method: str = "greedy", cost_params=None,
                policy: FormatPolicy = FormatPolicy(), distribute: bool = True,
                use_cse: bool = True, collect_counters: bool = False,
                timeout_secs: float = 60.0, budget: int = 1 << 20,
                cond_cap: int = 2):
    """Full pipeline: parse, optimize, execute.  Returns (results, report)."""
    plan = parse_program(text)
    t0 = time.perf_counter()
    lres = optimize_logical(plan, tensors, stats_mode=stats_mode,
                            method=method, cost_params=cost_params,
                            distribute=distribute, budget=budget,
                            cond_cap=cond_cap)
    logical_ms = (time.perf_counter() - t0) * 1e3
    outputs = {q.name for q in plan.queries}
    results, report = execute_plan(lres, tensors, policy=policy,
                                   use_cse=use_cse,
                                   collect_counters=collect_counters,
                                   timeout_secs=timeout_secs, budget=budget,
                                   outputs=outputs)
    report["logical"] = {
        "total_model_cost": lres.total_cost,
        "queries": [{
            "name": i.name,
            "elimination_order": list(i.elimination_order),
            "model_cost": i.cost,
            "emitted": list(i.emitted),
            "distributed": i.distributed,
        } for i in lres.info],
    }
    report["timings"]["logical_optimize_ms"] = logical_ms
    report["options"] = {"stats_mode": stats_mode, "optimizer": method,
                         "distribute": distribute, "cse": use_cse}
    return results, report
