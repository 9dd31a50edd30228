"""Scalar operator registry with algebraic metadata.

Every pointwise or aggregate operator used in a program is described by an
OpSpec.  The optimizer consults these algebraic flags to decide where
aggregates may be pushed, which operators annihilate on sparse inputs, and
how repeated application of an aggregate collapses (the ``repeat_apply``
function g with g(x, n) = f(x, ..., x) applied n times).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Callable, Optional

from .errors import UnknownOperator

__all__ = ["OpSpec", "get_op", "is_registered", "register_op", "OP_REGISTRY"]


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class OpSpec:
    """Algebraic description of one scalar function."""

    name: str
    arity: Optional[int]  # None = variadic (at least 1 argument)
    fn: Callable  # binary kernel for variadic ops, n-ary otherwise
    identity: object = None
    annihilator: object = None
    is_commutative: bool = False
    is_associative: bool = False
    is_idempotent: bool = False
    distributes_over: frozenset = field(default_factory=frozenset)
    repeat_apply: Optional[Callable] = None  # g(x, n)

    def apply(self, args):
        if self.arity is None:
            if len(args) == 1:
                return args[0]
            return reduce(self.fn, args)
        if len(args) != self.arity:
            raise TypeError(
                f"operator '{self.name}' expects {self.arity} arguments, got {len(args)}"
            )
        return self.fn(*args)

    def distributes_over_op(self, other: "OpSpec") -> bool:
        return other.name in self.distributes_over


OP_REGISTRY: dict[str, OpSpec] = {}
_ALIASES = {"σ": "sigmoid", "∧": "and", "∨": "or"}


def register_op(spec: OpSpec):
    OP_REGISTRY[spec.name] = spec
    return spec


def is_registered(name: str) -> bool:
    return _ALIASES.get(name, name) in OP_REGISTRY


def canonical_name(name: str) -> str:
    return _ALIASES.get(name, name)


def get_op(name: str) -> OpSpec:
    key = _ALIASES.get(name, name)
    try:
        return OP_REGISTRY[key]
    except KeyError:
        raise UnknownOperator(f"unknown operator '{name}'") from None


register_op(OpSpec(
    name="+", arity=None, fn=lambda a, b: a + b,
    identity=0, is_commutative=True, is_associative=True,
    distributes_over=frozenset({"max", "min"}),
    repeat_apply=lambda x, n: x * n,
))
register_op(OpSpec(
    name="*", arity=None, fn=lambda a, b: a * b,
    identity=1, annihilator=0, is_commutative=True, is_associative=True,
    distributes_over=frozenset({"+", "-"}),
    repeat_apply=lambda x, n: x ** n,
))
register_op(OpSpec(name="-", arity=2, fn=lambda a, b: a - b))
register_op(OpSpec(name="/", arity=2, fn=lambda a, b: a / b))
register_op(OpSpec(
    name="min", arity=None, fn=min,
    identity=math.inf, annihilator=-math.inf,
    is_commutative=True, is_associative=True, is_idempotent=True,
    distributes_over=frozenset({"max"}),
    repeat_apply=lambda x, n: x,
))
register_op(OpSpec(
    name="max", arity=None, fn=max,
    identity=-math.inf, annihilator=math.inf,
    is_commutative=True, is_associative=True, is_idempotent=True,
    distributes_over=frozenset({"min"}),
    repeat_apply=lambda x, n: x,
))
register_op(OpSpec(
    name="and", arity=None, fn=lambda a, b: bool(a) and bool(b),
    identity=True, annihilator=False,
    is_commutative=True, is_associative=True, is_idempotent=True,
    distributes_over=frozenset({"or"}),
    repeat_apply=lambda x, n: x,
))
register_op(OpSpec(
    name="or", arity=None, fn=lambda a, b: bool(a) or bool(b),
    identity=False, annihilator=True,
    is_commutative=True, is_associative=True, is_idempotent=True,
    distributes_over=frozenset({"and"}),
    repeat_apply=lambda x, n: x,
))
register_op(OpSpec(name="sigmoid", arity=1, fn=_sigmoid))
register_op(OpSpec(name="pow", arity=2, fn=lambda a, b: a ** b))
register_op(OpSpec(name="sqrt", arity=1, fn=math.sqrt))
register_op(OpSpec(name="exp", arity=1, fn=math.exp))
register_op(OpSpec(name=">", arity=2, fn=lambda a, b: 1 if a > b else 0))

# Pass-through aggregate used by the logical dialect for element-wise queries.
register_op(OpSpec(
    name="noop", arity=1, fn=lambda x: x,
    is_commutative=True, is_associative=True, is_idempotent=True,
    repeat_apply=lambda x, n: x,
))
