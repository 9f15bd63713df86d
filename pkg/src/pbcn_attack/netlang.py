"""Text format for probabilistic Boolean control networks.

A network file looks like::

    name: toy
    nodes: 2
    inputs: 1
    x1 <- x2 & !u1          # deterministic rule
    x2 <- { 0.6: x1 | u1 ; 0.4: x2 }

Operators are ``!``, ``&`` and ``|`` (tightest first), binary operators are
left-associative, ``0``/``1`` are constants and ``x<k>``/``u<k>`` are 1-based
state and input variables.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterator, Union

PROB_TOL = 1e-9


class NetworkError(ValueError):
    """Malformed or inconsistent network text, with a 1-based position."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.message = message
        self.line = line
        self.column = column


# --------------------------------------------------------------------------
# expression tree


@dataclass(frozen=True)
class Const:
    value: int


@dataclass(frozen=True)
class StateVar:
    index: int


@dataclass(frozen=True)
class InputVar:
    index: int


@dataclass(frozen=True)
class Not:
    child: "BoolExpr"


@dataclass(frozen=True)
class And:
    left: "BoolExpr"
    right: "BoolExpr"


@dataclass(frozen=True)
class Or:
    left: "BoolExpr"
    right: "BoolExpr"


BoolExpr = Union[Const, StateVar, InputVar, Not, And, Or]


@dataclass(frozen=True)
class UpdateAlternative:
    expr: BoolExpr
    prob: float


@dataclass(frozen=True)
class NodeRule:
    alternatives: tuple[UpdateAlternative, ...]

    @property
    def is_deterministic(self) -> bool:
        return len(self.alternatives) == 1


@dataclass(frozen=True)
class NetworkDef:
    name: str
    n: int
    m: int
    rules: tuple[NodeRule, ...]

    @property
    def probabilistic_nodes(self) -> list[int]:
        """0-based indices of nodes with more than one alternative."""
        return [i for i, r in enumerate(self.rules) if not r.is_deterministic]

    # compiled caches live in private attributes and are rebuilt on demand
    def __getstate__(self):
        return {k: v for k, v in self.__dict__.items() if not k.startswith("_")}

    def __setstate__(self, state):
        self.__dict__.update(state)


def eval_expr(expr: BoolExpr, state: int, inputs: int) -> int:
    """Evaluate ``expr`` on packed state/input bit-vectors (x1, u1 in bit 0)."""
    if isinstance(expr, Const):
        return expr.value
    if isinstance(expr, StateVar):
        return (state >> (expr.index - 1)) & 1
    if isinstance(expr, InputVar):
        return (inputs >> (expr.index - 1)) & 1
    if isinstance(expr, Not):
        return 1 - eval_expr(expr.child, state, inputs)
    if isinstance(expr, And):
        return eval_expr(expr.left, state, inputs) & eval_expr(expr.right, state, inputs)
    if isinstance(expr, Or):
        return eval_expr(expr.left, state, inputs) | eval_expr(expr.right, state, inputs)
    raise TypeError(f"not a BoolExpr: {expr!r}")


def _py_source(expr: BoolExpr) -> str:
    if isinstance(expr, Const):
        return str(expr.value)
    if isinstance(expr, StateVar):
        return f"(x >> {expr.index - 1} & 1)"
    if isinstance(expr, InputVar):
        return f"(u >> {expr.index - 1} & 1)"
    if isinstance(expr, Not):
        return f"(1 ^ {_py_source(expr.child)})"
    if isinstance(expr, And):
        return f"({_py_source(expr.left)} & {_py_source(expr.right)})"
    return f"({_py_source(expr.left)} | {_py_source(expr.right)})"


def compile_expr(expr: BoolExpr) -> Callable[[int, int], int]:
    """Same semantics as :func:`eval_expr`, compiled to a Python lambda."""
    try:
        return eval(f"lambda x, u: {_py_source(expr)}", {"__builtins__": {}})
    except (SyntaxError, RecursionError, MemoryError):
        # CPython caps parenthesis nesting in source text
        return lambda x, u: eval_expr(expr, x, u)


def expr_variables(expr: BoolExpr) -> Iterator[BoolExpr]:
    """Yield every StateVar/InputVar leaf."""
    stack = [expr]
    while stack:
        e = stack.pop()
        if isinstance(e, (StateVar, InputVar)):
            yield e
        elif isinstance(e, Not):
            stack.append(e.child)
        elif isinstance(e, (And, Or)):
            stack.extend((e.right, e.left))


# --------------------------------------------------------------------------
# formatting

_PREC = {Or: 1, And: 2, Not: 3}


def format_expr(expr: BoolExpr, parenthesize: bool = False) -> str:
    """Render ``expr``; with ``parenthesize`` every compound gets parentheses."""
    if isinstance(expr, Const):
        return str(expr.value)
    if isinstance(expr, StateVar):
        return f"x{expr.index}"
    if isinstance(expr, InputVar):
        return f"u{expr.index}"
    if parenthesize:
        if isinstance(expr, Not):
            return f"!({format_expr(expr.child, True)})"
        op = " & " if isinstance(expr, And) else " | "
        return f"({format_expr(expr.left, True)}{op}{format_expr(expr.right, True)})"

    prec = _PREC[type(expr)]

    def sub(child: BoolExpr, min_prec: int) -> str:
        text = format_expr(child)
        if _PREC.get(type(child), 4) < min_prec:
            return f"({text})"
        return text

    if isinstance(expr, Not):
        return "!" + sub(expr.child, prec)
    op = " & " if isinstance(expr, And) else " | "
    # left-associative: a right operand of equal precedence needs parentheses
    return sub(expr.left, prec) + op + sub(expr.right, prec + 1)


def _format_prob(p: float) -> str:
    return repr(float(p))


def format_network(net: NetworkDef) -> str:
    """Canonical text; ``parse_network`` of the result equals ``net``."""
    lines = [f"name: {net.name}", f"nodes: {net.n}", f"inputs: {net.m}"]
    for i, rule in enumerate(net.rules, start=1):
        alts = rule.alternatives
        if len(alts) == 1 and alts[0].prob == 1.0:
            lines.append(f"x{i} <- {format_expr(alts[0].expr)}")
        else:
            body = " ; ".join(f"{_format_prob(a.prob)}: {format_expr(a.expr)}" for a in alts)
            lines.append(f"x{i} <- {{ {body} }}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<arrow><-)
  | (?P<var>[xu][0-9]+)(?![A-Za-z0-9_])
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<number>(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][-+]?[0-9]+)?)
  | (?P<op>[!&|(){};:])
    """,
    re.VERBOSE,
)
_NAME_HEADER_RE = re.compile(r"[ \t]*name[ \t]*:[ \t]*([^#\n]*)")


@dataclass(frozen=True)
class _Token:
    kind: str  # var, ident, number, op, arrow, newline, string, eof
    text: str
    line: int
    column: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos, line, line_start = 0, 1, 0
    at_line_start = True
    while pos < len(text):
        if at_line_start:
            at_line_start = False
            hdr = _NAME_HEADER_RE.match(text, pos)
            if hdr:
                col = hdr.start() - line_start + 1
                tokens.append(_Token("ident", "name", line, col))
                tokens.append(_Token("op", ":", line, col))
                tokens.append(_Token("string", hdr.group(1).strip(), line, hdr.start(1) - line_start + 1))
                pos = hdr.end()
                continue
        mo = _TOKEN_RE.match(text, pos)
        if mo is None:
            raise NetworkError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = mo.lastgroup
        col = pos - line_start + 1
        if kind == "newline":
            tokens.append(_Token("newline", "\n", line, col))
            line += 1
            line_start = mo.end()
            at_line_start = True
        elif kind not in ("ws", "comment"):
            tokens.append(_Token(kind, mo.group(), line, col))
        pos = mo.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


# --------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.depth = 0  # newlines are insignificant inside (...) and {...}
        self.n: int | None = None
        self.m: int | None = None
        self.name: str | None = None

    # token helpers
    def peek(self) -> _Token:
        if self.depth:
            while self.tokens[self.pos].kind == "newline":
                self.pos += 1
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.peek()
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def at(self, kind: str, text: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def expect(self, kind: str, text: str | None = None, what: str | None = None) -> _Token:
        tok = self.peek()
        if not self.at(kind, text):
            found = "end of input" if tok.kind == "eof" else (
                "end of line" if tok.kind == "newline" else repr(tok.text))
            raise NetworkError(f"expected {what or text or kind}, found {found}", tok.line, tok.column)
        return self.advance()

    def end_of_statement(self) -> None:
        tok = self.peek()
        if tok.kind not in ("newline", "eof"):
            raise NetworkError(f"unexpected {tok.text!r} after statement", tok.line, tok.column)
        self.advance()

    # grammar
    def parse(self) -> NetworkDef:
        rules: dict[int, tuple[NodeRule, _Token]] = {}
        while not self.at("eof"):
            if self.at("newline"):
                self.advance()
                continue
            tok = self.peek()
            if tok.kind == "ident":
                self.header()
            elif tok.kind == "var" and tok.text[0] == "x":
                idx, rule = self.rule()
                if idx in rules:
                    raise NetworkError(f"duplicate definition of x{idx}", tok.line, tok.column)
                rules[idx] = (rule, tok)
            else:
                raise NetworkError(f"expected header or rule, found {tok.text!r}", tok.line, tok.column)
        eof = self.peek()
        if self.n is None or self.m is None:
            raise NetworkError("missing 'nodes:' or 'inputs:' header", eof.line, eof.column)
        missing = [i for i in range(1, self.n + 1) if i not in rules]
        if missing:
            shown = ", ".join(f"x{i}" for i in missing[:10])
            more = "" if len(missing) <= 10 else f" and {len(missing) - 10} more"
            raise NetworkError(f"missing definition of {shown}{more}", eof.line, eof.column)
        return NetworkDef(
            name=self.name if self.name is not None else "",
            n=self.n,
            m=self.m,
            rules=tuple(rules[i][0] for i in range(1, self.n + 1)),
        )

    def header(self) -> None:
        key = self.advance()
        self.expect("op", ":")
        if key.text == "name":
            if self.name is not None:
                raise NetworkError("duplicate 'name:' header", key.line, key.column)
            self.name = self.expect("string", what="network name").text
        elif key.text in ("nodes", "inputs"):
            if self.n is not None and key.text == "nodes" or self.m is not None and key.text == "inputs":
                raise NetworkError(f"duplicate '{key.text}:' header", key.line, key.column)
            num = self.expect("number", what="integer")
            if not num.text.isdigit():
                raise NetworkError(f"'{key.text}' must be a non-negative integer", num.line, num.column)
            value = int(num.text)
            if key.text == "nodes":
                if value < 1:
                    raise NetworkError("a network needs at least one node", num.line, num.column)
                self.n = value
            else:
                self.m = value
        else:
            raise NetworkError(f"unknown header {key.text!r}", key.line, key.column)
        self.end_of_statement()

    def rule(self) -> tuple[int, NodeRule]:
        target = self.advance()
        if self.n is None or self.m is None:
            raise NetworkError("rules must follow the 'nodes:' and 'inputs:' headers",
                               target.line, target.column)
        idx = int(target.text[1:])
        if not 1 <= idx <= self.n:
            raise NetworkError(f"node x{idx} is not declared (nodes: {self.n})", target.line, target.column)
        self.expect("arrow", what="'<-'")
        if self.at("op", "{"):
            brace = self.advance()
            self.depth += 1
            alts = [self.alternative()]
            while self.at("op", ";"):
                self.advance()
                if self.at("op", "}"):
                    break
                alts.append(self.alternative())
            self.expect("op", "}", what="';' or '}'")
            self.depth -= 1
            total = math.fsum(a.prob for a in alts)
            if abs(total - 1.0) > PROB_TOL:
                raise NetworkError(f"probabilities of x{idx} sum to {total!r}, not 1",
                                   brace.line, brace.column)
        else:
            alts = [UpdateAlternative(self.expression(), 1.0)]
        self.end_of_statement()
        return idx, NodeRule(tuple(alts))

    def alternative(self) -> UpdateAlternative:
        tok = self.expect("number", what="probability")
        prob = float(tok.text)
        if not 0.0 <= prob <= 1.0:
            raise NetworkError(f"probability {tok.text} outside [0, 1]", tok.line, tok.column)
        self.expect("op", ":")
        return UpdateAlternative(self.expression(), prob)

    def expression(self) -> BoolExpr:
        try:
            return self.disjunction()
        except RecursionError:
            tok = self.peek()
            raise NetworkError("expression nested too deeply", tok.line, tok.column) from None

    def disjunction(self) -> BoolExpr:
        expr = self.conjunction()
        while self.at("op", "|"):
            self.advance()
            expr = Or(expr, self.conjunction())
        return expr

    def conjunction(self) -> BoolExpr:
        expr = self.negation()
        while self.at("op", "&"):
            self.advance()
            expr = And(expr, self.negation())
        return expr

    def negation(self) -> BoolExpr:
        if self.at("op", "!"):
            self.advance()
            return Not(self.negation())
        return self.atom()

    def atom(self) -> BoolExpr:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "(":
            self.advance()
            self.depth += 1
            expr = self.disjunction()
            self.expect("op", ")", what="')'")
            self.depth -= 1
            return expr
        if tok.kind == "number" and tok.text in ("0", "1"):
            self.advance()
            return Const(int(tok.text))
        if tok.kind == "var":
            self.advance()
            idx = int(tok.text[1:])
            if tok.text[0] == "x":
                if not 1 <= idx <= self.n:
                    raise NetworkError(f"undeclared state variable {tok.text}", tok.line, tok.column)
                return StateVar(idx)
            if not 1 <= idx <= self.m:
                raise NetworkError(f"undeclared input variable {tok.text}", tok.line, tok.column)
            return InputVar(idx)
        found = "end of input" if tok.kind == "eof" else (
            "end of line" if tok.kind == "newline" else repr(tok.text))
        raise NetworkError(f"expected operand, found {found}", tok.line, tok.column)


def parse_network(text: str) -> NetworkDef:
    """Parse network text; raises :class:`NetworkError` with a position on failure."""
    return _Parser(text).parse()


def parse_expr(text: str, n: int, m: int) -> BoolExpr:
    """Parse a lone expression over ``n`` state and ``m`` input variables."""
    parser = _Parser(text)
    parser.n, parser.m = n, m
    expr = parser.expression()
    tok = parser.peek()
    while tok.kind == "newline":
        parser.advance()
        tok = parser.peek()
    if tok.kind != "eof":
        raise NetworkError(f"unexpected {tok.text!r} after expression", tok.line, tok.column)
    return expr


def load_network(path) -> NetworkDef:
    with open(path, encoding="utf-8") as fh:
        return parse_network(fh.read())
