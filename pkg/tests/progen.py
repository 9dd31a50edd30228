"""Random program generator shared by the test suite.

Generates (plan_text, tensors) pairs small enough for the dense reference
evaluator: a handful of indices with tiny extents, random sparse inputs, and
random Map/Agg nesting drawn from a configurable operator pool.
"""

import itertools
import random

from tinlang.tensor import build_tensor

INT_MAP_OPS = ["+", "*", "-", "min", "max"]
INT_AGG_OPS = ["+", "*", "min", "max"]
BOOL_MAP_OPS = ["and", "or"]
BOOL_AGG_OPS = ["and", "or"]

_INDEX_POOL = ["i", "j", "k", "l", "m", "n"]


def random_tensor(rng, idxs, dims, *, density=0.5, fill=0, lo=-3, hi=3,
                  boolean=False):
    shape = tuple(dims[x] for x in idxs)
    coords, vals = [], []
    for c in itertools.product(*(range(n) for n in shape)):
        if rng.random() >= density:
            continue
        if boolean:
            v = True if fill is False or not fill else False
        else:
            v = rng.randint(lo, hi)
            while v == fill:
                v = rng.randint(lo, hi)
        coords.append(c)
        vals.append(v)
    return build_tensor(coords, vals, shape, fill, index_names=tuple(idxs))


class _Gen:
    def __init__(self, rng, dims, boolean):
        self.rng = rng
        self.dims = dims
        self.boolean = boolean
        self.map_ops = BOOL_MAP_OPS if boolean else INT_MAP_OPS
        self.agg_ops = BOOL_AGG_OPS if boolean else INT_AGG_OPS
        self.tensors = {}
        self.n = 0

    def leaf(self, avail, must=None):
        rng = self.rng
        if must is None and (not avail or rng.random() < 0.05):
            if self.boolean:
                return str(rng.randint(0, 1))
            return str(rng.choice([1, 2, 3]))
        k = rng.randint(1, min(3, len(avail)))
        idxs = rng.sample(sorted(avail), k)
        if must is not None and must not in idxs:
            idxs[rng.randrange(len(idxs))] = must
        idxs = tuple(idxs)
        name = f"T{self.n}"
        self.n += 1
        if self.boolean:
            fill = rng.random() < 0.15
            t = random_tensor(rng, idxs, self.dims, density=rng.uniform(0.2, 0.7),
                              fill=fill, boolean=True)
        else:
            fill = rng.choice([0, 0, 0, 1, -1])
            t = random_tensor(rng, idxs, self.dims, density=rng.uniform(0.2, 0.7),
                              fill=fill)
        self.tensors[name] = t
        return f"{name}[{','.join(idxs)}]"

    def expr(self, avail, depth, must=None):
        rng = self.rng
        if depth <= 0 or rng.random() < 0.3:
            return self.leaf(avail, must)
        roll = rng.random()
        if roll < 0.25 and len(avail) < len(_INDEX_POOL):
            # aggregate over a fresh bound index, which the child must use so
            # its extent is well defined
            fresh = next(x for x in _INDEX_POOL if x not in avail)
            op = rng.choice(self.agg_ops)
            child = self.expr(avail | {fresh}, depth - 1, must=fresh)
            out = f"Agg({op}, {fresh}, {child})"
            if must is not None:
                out = f"Map({'and' if self.boolean else '*'}, {out}, {self.leaf(avail, must)})"
            return out
        op = rng.choice(self.map_ops)
        arity = 2 if op in ("-", "/") else rng.randint(2, 3)
        kids = []
        for a in range(arity):
            kids.append(self.expr(avail, depth - 1,
                                  must=must if a == 0 else None))
        return f"Map({op}, {', '.join(kids)})"


def random_program(seed, *, boolean=False, max_depth=3, n_free=None):
    """One random single-query program.  Returns (text, tensors, dims)."""
    rng = random.Random(seed)
    n_free = n_free if n_free is not None else rng.randint(0, 3)
    free = _INDEX_POOL[:n_free]
    dims = {x: rng.randint(2, 4) for x in _INDEX_POOL}
    g = _Gen(rng, dims, boolean)
    body = g.expr(set(free), max_depth)
    # aggregate away any indices the body introduced beyond the free set is
    # handled by construction: Agg always binds fresh indices immediately.
    text = f"Query(out, {body})"
    # ensure all free indices appear; if not, shrink the declared output
    return text, g.tensors, dims
