"""Text parser for the input plan dialect.

Concrete syntax (UTF-8, ``#`` line comments)::

    Query(name, expr)
    expr := Agg(op, idx..., expr) | Map(op, expr...) | Name[idx,...] | number

Operator tokens are either identifiers (``max``, ``sigmoid``) or the symbols
``+ * - / >``; the Greek ``σ`` is accepted as an alias for ``sigmoid``.
A bracketed name refers to an earlier query (an alias) when one of that name
exists, and to an input tensor otherwise.
"""

from __future__ import annotations

import re

from .errors import ProgramSyntaxError, UnboundAlias, UnknownOperator
from .ops import canonical_name, is_registered
from .plan import Agg, Alias, Input, Literal, Map, Plan, Query

__all__ = ["parse_program", "parse_expr"]

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<number>\d+\.\d*|\.\d+|\d+)
  | (?P<name>[^\W\d][\w']*)
  | (?P<sym>[()\[\],+*\-/><=])
    """,
    re.VERBOSE | re.UNICODE,
)

_OP_SYMBOLS = set("+*-/>")


class _Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col


def _tokenize(text):
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ProgramSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        tok = m.group()
        if kind == "newline":
            line += 1
            col = 1
        else:
            if kind not in ("ws", "comment"):
                tokens.append(_Token(kind, tok, line, col))
            col += len(tok)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, text):
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, text):
        tok = self.next()
        if tok.text != text:
            raise ProgramSyntaxError(
                f"expected {text!r}, found {tok.text!r}", tok.line, tok.col)
        return tok

    def error(self, msg):
        tok = self.peek()
        raise ProgramSyntaxError(msg, tok.line, tok.col)

    # -- grammar ---------------------------------------------------------

    def parse_plan(self):
        queries = []
        names = set()
        pending_inputs = {}  # tensor name -> first use token, for forward-ref check
        while self.peek().kind != "eof":
            q = self.parse_query(names, pending_inputs)
            if q.name in names:
                self.error(f"duplicate query name '{q.name}'")
            names.add(q.name)
            queries.append(q)
        for name, tok in pending_inputs.items():
            if name in names:
                raise UnboundAlias(
                    f"'{name}' is referenced before the query defining it "
                    f"(line {tok.line})")
        return Plan(tuple(queries))

    def parse_query(self, names, pending_inputs):
        tok = self.next()
        if tok.text != "Query":
            raise ProgramSyntaxError(
                f"expected 'Query', found {tok.text!r}", tok.line, tok.col)
        self.expect("(")
        name_tok = self.next()
        if name_tok.kind != "name":
            raise ProgramSyntaxError("expected a query name",
                                     name_tok.line, name_tok.col)
        self.expect(",")
        expr = self.parse_expr(names, pending_inputs)
        self.expect(")")
        return Query(name_tok.text, expr)

    def parse_expr(self, names, pending_inputs):
        tok = self.peek()
        if tok.kind == "number":
            self.next()
            text = tok.text
            return Literal(float(text) if "." in text else int(text))
        if tok.kind != "name" and not (tok.kind == "sym" and tok.text in _OP_SYMBOLS):
            self.error(f"expected an expression, found {tok.text!r}")
        if tok.text == "Agg":
            return self.parse_agg(names, pending_inputs)
        if tok.text == "Map":
            return self.parse_map(names, pending_inputs)
        name = self.next().text
        self.expect("[")
        idxs = []
        if self.peek().text != "]":
            while True:
                idx = self.next()
                if idx.kind != "name":
                    raise ProgramSyntaxError("expected an index name",
                                             idx.line, idx.col)
                idxs.append(idx.text)
                if self.peek().text == ",":
                    self.next()
                else:
                    break
        self.expect("]")
        if name in names:
            return Alias(name, tuple(idxs))
        pending_inputs.setdefault(name, tok)
        return Input(name, tuple(idxs))

    def parse_op(self):
        tok = self.next()
        if tok.kind == "name" or (tok.kind == "sym" and tok.text in _OP_SYMBOLS):
            if not is_registered(tok.text):
                raise UnknownOperator(
                    f"unknown operator '{tok.text}' (line {tok.line})")
            return canonical_name(tok.text)
        raise ProgramSyntaxError(f"expected an operator, found {tok.text!r}",
                                 tok.line, tok.col)

    def parse_agg(self, names, pending_inputs):
        self.expect("Agg")
        self.expect("(")
        op = self.parse_op()
        idxs = []
        self.expect(",")
        # indices are bare names followed by a comma; the final argument is an expr
        while (self.peek().kind == "name"
               and self.tokens[self.pos + 1].text == ","
               and self.peek().text not in ("Agg", "Map")):
            idxs.append(self.next().text)
            self.expect(",")
        expr = self.parse_expr(names, pending_inputs)
        self.expect(")")
        return Agg(op, tuple(idxs), expr)

    def parse_map(self, names, pending_inputs):
        self.expect("Map")
        self.expect("(")
        op = self.parse_op()
        children = []
        while self.peek().text == ",":
            self.next()
            children.append(self.parse_expr(names, pending_inputs))
        self.expect(")")
        if not children:
            self.error("Map requires at least one argument expression")
        return Map(op, tuple(children))


def parse_program(text: str) -> Plan:
    """Parse a program in the input dialect into a Plan AST."""
    return _Parser(text).parse_plan()


def parse_expr(text: str, earlier_names=()):
    """Parse a single expression; useful in tests and demos."""
    p = _Parser(text)
    expr = p.parse_expr(set(earlier_names), {})
    tok = p.peek()
    if tok.kind != "eof":
        raise ProgramSyntaxError(f"trailing input {tok.text!r}", tok.line, tok.col)
    return expr
