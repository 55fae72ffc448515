"""Condition and function mini-language for row predicates and derived columns.

The grammar (see docs/grammar.md for the published EBNF) covers infix boolean
logic with precedence ``not`` > ``and`` > ``or``, the six comparisons,
arithmetic, a conditional ``cond ? a : b``, the ``is null`` / ``is not null``
postfix tests, single-quoted string literals, and a closed set of builtins
(``abs``, ``len``).

Missing-value semantics: any arithmetic or builtin over a missing operand is
missing; a comparison with a missing operand is False; at the top of a row
condition a missing result collapses to False.

Expressions are immutable after parsing and safe to evaluate concurrently.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ExprSyntaxError, ExprTypeError, SchemaError
from .values import Value, render_value

# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    value: Value


@dataclass(frozen=True)
class ColumnRef:
    name: str


@dataclass(frozen=True)
class Comparison:
    op: str  # ==, !=, <, <=, >, >=
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class BoolOp:
    op: str  # and, or
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class NotOp:
    operand: "Expr"


@dataclass(frozen=True)
class IsNull:
    operand: "Expr"
    negated: bool


@dataclass(frozen=True)
class Arithmetic:
    op: str  # +, -, *, /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Negate:
    operand: "Expr"


@dataclass(frozen=True)
class Conditional:
    condition: "Expr"
    then: "Expr"
    otherwise: "Expr"


@dataclass(frozen=True)
class Call:
    name: str  # closed set: abs, len
    args: tuple["Expr", ...]


Expr = (
    Literal
    | ColumnRef
    | Comparison
    | BoolOp
    | NotOp
    | IsNull
    | Arithmetic
    | Negate
    | Conditional
    | Call
)

BUILTINS = ("abs", "len")

# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<number>\d+(\.\d+)?([eE][+-]?\d+)?)
  | (?P<string>'(?:[^'\\]|\\.)*')
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|<|>|\+|-|\*|/|\(|\)|\?|:|,|\[|\])
    """,
    re.VERBOSE,
)

_KEYWORDS = {"and", "or", "not", "is", "null", "true", "false", "in"}


@dataclass(frozen=True)
class _Token:
    kind: str  # number | string | ident | keyword | op | end
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        pos = m.end()
        if m.lastgroup == "ws":
            continue
        kind = m.lastgroup
        tok = m.group(0)
        if kind == "ident" and tok in _KEYWORDS:
            kind = "keyword"
        tokens.append(_Token(kind, tok, m.start()))
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, text: str | None = None) -> _Token:
        tok = self.peek()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text or kind
            raise ExprSyntaxError(f"expected {want!r}, found {tok.text or 'end of input'!r}", tok.offset)
        return self.advance()

    def at(self, kind: str, text: str | None = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    def accept(self, kind: str, text: str | None = None) -> bool:
        if self.at(kind, text):
            self.advance()
            return True
        return False

    # -- grammar -----------------------------------------------------------

    def parse_expr(self) -> Expr:
        node = self.parse_or()
        if self.accept("op", "?"):
            then = self.parse_expr()
            self.expect("op", ":")
            otherwise = self.parse_expr()
            return Conditional(node, then, otherwise)
        return node

    def parse_or(self) -> Expr:
        node = self.parse_and()
        while self.accept("keyword", "or"):
            node = BoolOp("or", node, self.parse_and())
        return node

    def parse_and(self) -> Expr:
        node = self.parse_not()
        while self.accept("keyword", "and"):
            node = BoolOp("and", node, self.parse_not())
        return node

    def parse_not(self) -> Expr:
        if self.accept("keyword", "not"):
            return NotOp(self.parse_not())
        return self.parse_comparison()

    def parse_comparison(self) -> Expr:
        node = self.parse_additive()
        if self.accept("keyword", "is"):
            negated = self.accept("keyword", "not")
            self.expect("keyword", "null")
            return IsNull(node, negated)
        tok = self.peek()
        if tok.kind == "op" and tok.text in ("==", "!=", "<", "<=", ">", ">="):
            self.advance()
            right = self.parse_additive()
            return Comparison(tok.text, node, right)
        return node

    def parse_additive(self) -> Expr:
        node = self.parse_multiplicative()
        while True:
            tok = self.peek()
            if tok.kind == "op" and tok.text in ("+", "-"):
                self.advance()
                node = Arithmetic(tok.text, node, self.parse_multiplicative())
            else:
                return node

    def parse_multiplicative(self) -> Expr:
        node = self.parse_unary()
        while True:
            tok = self.peek()
            if tok.kind == "op" and tok.text in ("*", "/"):
                self.advance()
                node = Arithmetic(tok.text, node, self.parse_unary())
            else:
                return node

    def parse_unary(self) -> Expr:
        if self.accept("op", "-"):
            return Negate(self.parse_unary())
        return self.parse_atom()

    def parse_atom(self) -> Expr:
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return Literal(float(tok.text))
        if tok.kind == "string":
            self.advance()
            raw = tok.text[1:-1].replace("\\'", "'").replace("\\\\", "\\")
            return Literal(raw)
        if tok.kind == "keyword":
            if tok.text == "true":
                self.advance()
                return Literal(True)
            if tok.text == "false":
                self.advance()
                return Literal(False)
            if tok.text == "null":
                self.advance()
                return Literal(None)
            raise ExprSyntaxError(f"unexpected keyword {tok.text!r}", tok.offset)
        if tok.kind == "ident":
            self.advance()
            if self.at("op", "("):
                if tok.text not in BUILTINS:
                    raise ExprSyntaxError(f"unknown builtin {tok.text!r}", tok.offset)
                self.advance()
                args: list[Expr] = []
                if not self.at("op", ")"):
                    args.append(self.parse_expr())
                    while self.accept("op", ","):
                        args.append(self.parse_expr())
                self.expect("op", ")")
                return Call(tok.text, tuple(args))
            return ColumnRef(tok.text)
        if self.accept("op", "("):
            node = self.parse_expr()
            self.expect("op", ")")
            return node
        raise ExprSyntaxError(f"expected an expression, found {tok.text or 'end of input'!r}", tok.offset)


def parse_expr(text: str) -> Expr:
    """Parse expression text into an AST. Raises ExprSyntaxError with offset."""
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    parser = _Parser(text)
    node = parser.parse_expr()
    tok = parser.peek()
    if tok.kind != "end":
        raise ExprSyntaxError(f"trailing input {tok.text!r}", tok.offset)
    return node


# ---------------------------------------------------------------------------
# Canonical printer
# ---------------------------------------------------------------------------

_PRECEDENCE = {
    "conditional": 0,
    "or": 1,
    "and": 2,
    "not": 3,
    "comparison": 4,
    "additive": 5,
    "multiplicative": 6,
    "unary": 7,
    "atom": 8,
}


def _prec(node: Expr) -> int:
    if isinstance(node, Conditional):
        return _PRECEDENCE["conditional"]
    if isinstance(node, BoolOp):
        return _PRECEDENCE[node.op]
    if isinstance(node, NotOp):
        return _PRECEDENCE["not"]
    if isinstance(node, (Comparison, IsNull)):
        return _PRECEDENCE["comparison"]
    if isinstance(node, Arithmetic):
        return _PRECEDENCE["additive" if node.op in "+-" else "multiplicative"]
    if isinstance(node, Negate):
        return _PRECEDENCE["unary"]
    return _PRECEDENCE["atom"]


def print_expr(node: Expr) -> str:
    """Canonical text form; parse(print_expr(parse(s))) == parse(s)."""

    def wrap(child: Expr, parent_prec: int) -> str:
        text = print_expr(child)
        if _prec(child) < parent_prec:
            return f"({text})"
        return text

    if isinstance(node, Literal):
        if node.value is None:
            return "null"
        if isinstance(node.value, bool):
            return "true" if node.value else "false"
        if isinstance(node.value, str):
            escaped = node.value.replace("\\", "\\\\").replace("'", "\\'")
            return f"'{escaped}'"
        return render_value(node.value)
    if isinstance(node, ColumnRef):
        return node.name
    if isinstance(node, Conditional):
        p = _PRECEDENCE["conditional"]
        return f"{wrap(node.condition, p + 1)} ? {wrap(node.then, p)} : {wrap(node.otherwise, p)}"
    if isinstance(node, BoolOp):
        p = _prec(node)
        return f"{wrap(node.left, p)} {node.op} {wrap(node.right, p + 1)}"
    if isinstance(node, NotOp):
        return f"not {wrap(node.operand, _PRECEDENCE['not'])}"
    if isinstance(node, Comparison):
        p = _prec(node)
        return f"{wrap(node.left, p + 1)} {node.op} {wrap(node.right, p + 1)}"
    if isinstance(node, IsNull):
        suffix = "is not null" if node.negated else "is null"
        return f"{wrap(node.operand, _PRECEDENCE['comparison'] + 1)} {suffix}"
    if isinstance(node, Arithmetic):
        p = _prec(node)
        return f"{wrap(node.left, p)} {node.op} {wrap(node.right, p + 1)}"
    if isinstance(node, Negate):
        return f"-{wrap(node.operand, _PRECEDENCE['unary'])}"
    if isinstance(node, Call):
        args = ", ".join(print_expr(a) for a in node.args)
        return f"{node.name}({args})"
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def column_refs(node: Expr) -> set[str]:
    """Feature names referenced anywhere in the expression."""
    refs: set[str] = set()

    def walk(n: Expr) -> None:
        if isinstance(n, ColumnRef):
            refs.add(n.name)
        elif isinstance(n, (Comparison, BoolOp, Arithmetic)):
            walk(n.left)
            walk(n.right)
        elif isinstance(n, (NotOp, Negate)):
            walk(n.operand)
        elif isinstance(n, IsNull):
            walk(n.operand)
        elif isinstance(n, Conditional):
            walk(n.condition)
            walk(n.then)
            walk(n.otherwise)
        elif isinstance(n, Call):
            for a in n.args:
                walk(a)

    walk(node)
    return refs


def bind_expr(node: Expr, schema: Sequence[str]) -> None:
    """Check that every column reference names a feature in the schema."""
    known = set(schema)
    missing = sorted(column_refs(node) - known)
    if missing:
        raise SchemaError(f"unknown feature(s) in expression: {', '.join(missing)}")


def _as_bool(v: Value) -> bool:
    """Boolean context: missing collapses to False."""
    if v is None:
        return False
    if isinstance(v, bool):
        return v
    raise ExprTypeError(f"expected a boolean, got {render_value(v)!r}")


def _compare(op: str, left: Value, right: Value) -> Value:
    if left is None or right is None:
        return False
    lb, rb = isinstance(left, bool), isinstance(right, bool)
    if lb != rb:
        raise ExprTypeError("cannot compare a boolean with a non-boolean")
    if not lb and type(left) is not type(right):
        raise ExprTypeError(
            f"cannot compare {render_value(left)!r} with {render_value(right)!r}"
        )
    if op == "==":
        return left == right
    if op == "!=":
        return left != right
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    if op == ">=":
        return left >= right
    raise ValueError(f"unknown comparison {op}")


def eval_expr(node: Expr, lookup) -> Value:
    """Evaluate against ``lookup(feature) -> Value``."""
    if isinstance(node, Literal):
        return node.value
    if isinstance(node, ColumnRef):
        return lookup(node.name)
    if isinstance(node, Comparison):
        return _compare(node.op, eval_expr(node.left, lookup), eval_expr(node.right, lookup))
    if isinstance(node, BoolOp):
        left = _as_bool(eval_expr(node.left, lookup))
        if node.op == "and":
            return left and _as_bool(eval_expr(node.right, lookup))
        return left or _as_bool(eval_expr(node.right, lookup))
    if isinstance(node, NotOp):
        return not _as_bool(eval_expr(node.operand, lookup))
    if isinstance(node, IsNull):
        missing = eval_expr(node.operand, lookup) is None
        return not missing if node.negated else missing
    if isinstance(node, Arithmetic):
        left = eval_expr(node.left, lookup)
        right = eval_expr(node.right, lookup)
        if left is None or right is None:
            return None
        if isinstance(left, bool) or isinstance(right, bool):
            raise ExprTypeError("arithmetic over booleans is not defined")
        if not isinstance(left, float) or not isinstance(right, float):
            raise ExprTypeError("arithmetic requires numeric operands")
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if right == 0.0:
            return None
        return left / right
    if isinstance(node, Negate):
        v = eval_expr(node.operand, lookup)
        if v is None:
            return None
        if not isinstance(v, float) or isinstance(v, bool):
            raise ExprTypeError("negation requires a numeric operand")
        return -v
    if isinstance(node, Conditional):
        if _as_bool(eval_expr(node.condition, lookup)):
            return eval_expr(node.then, lookup)
        return eval_expr(node.otherwise, lookup)
    if isinstance(node, Call):
        args = [eval_expr(a, lookup) for a in node.args]
        if any(a is None for a in args):
            return None
        if node.name == "abs":
            (v,) = args
            if not isinstance(v, float) or isinstance(v, bool):
                raise ExprTypeError("abs requires a numeric argument")
            return abs(v)
        if node.name == "len":
            (v,) = args
            if not isinstance(v, str):
                raise ExprTypeError("len requires a string argument")
            return float(len(v))
        raise ExprTypeError(f"unknown builtin {node.name!r}")
    raise TypeError(f"unknown node {node!r}")


def eval_row(node: Expr, dataset, row_id: int) -> Value:
    """Evaluate for one row of a dataset; references must bind to its schema."""
    bind_expr(node, dataset.schema)
    return eval_expr(node, lambda feature: dataset.cell(row_id, feature))


def eval_condition(node: Expr, dataset, row_id: int) -> bool:
    """Row condition: evaluate and collapse a missing result to False."""
    return _as_bool(eval_row(node, dataset, row_id))


# ---------------------------------------------------------------------------
# Feature predicates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NameIn:
    names: tuple[str, ...]


@dataclass(frozen=True)
class NullRateLt:
    threshold: float

    def __post_init__(self):
        if not (0.0 <= self.threshold <= 1.0):
            raise ValueError("nullrate threshold must lie in [0, 1]")


@dataclass(frozen=True)
class PredNot:
    operand: "FeaturePredicate"


@dataclass(frozen=True)
class PredAnd:
    left: "FeaturePredicate"
    right: "FeaturePredicate"


FeaturePredicate = NameIn | NullRateLt | PredNot | PredAnd


def parse_feature_predicate(text: str) -> FeaturePredicate:
    """Parse the feature-predicate sub-language.

    Forms: ``name in [A, B]``, ``nullrate < t``, ``not P``, ``P and Q``,
    parentheses.
    """
    if not text or not text.strip():
        raise ExprSyntaxError("empty feature predicate", 0)
    parser = _Parser(text)
    node = _parse_fp_and(parser)
    tok = parser.peek()
    if tok.kind != "end":
        raise ExprSyntaxError(f"trailing input {tok.text!r}", tok.offset)
    return node


def _parse_fp_and(p: _Parser) -> FeaturePredicate:
    node = _parse_fp_not(p)
    while p.accept("keyword", "and"):
        node = PredAnd(node, _parse_fp_not(p))
    return node


def _parse_fp_not(p: _Parser) -> FeaturePredicate:
    if p.accept("keyword", "not"):
        return PredNot(_parse_fp_not(p))
    return _parse_fp_atom(p)


def _parse_fp_atom(p: _Parser) -> FeaturePredicate:
    tok = p.peek()
    if p.accept("op", "("):
        node = _parse_fp_and(p)
        p.expect("op", ")")
        return node
    if tok.kind == "ident" and tok.text == "name":
        p.advance()
        p.expect("keyword", "in")
        p.expect("op", "[")
        names: list[str] = []
        if not p.at("op", "]"):
            names.append(p.expect("ident").text)
            while p.accept("op", ","):
                names.append(p.expect("ident").text)
        p.expect("op", "]")
        return NameIn(tuple(names))
    if tok.kind == "ident" and tok.text == "nullrate":
        p.advance()
        p.expect("op", "<")
        num = p.expect("number")
        return NullRateLt(float(num.text))
    raise ExprSyntaxError(
        f"expected 'name in [...]' or 'nullrate < t', found {tok.text or 'end of input'!r}",
        tok.offset,
    )


def print_feature_predicate(pred: FeaturePredicate) -> str:
    if isinstance(pred, NameIn):
        return f"name in [{', '.join(pred.names)}]"
    if isinstance(pred, NullRateLt):
        return f"nullrate < {render_value(pred.threshold)}"
    if isinstance(pred, PredNot):
        return f"not ({print_feature_predicate(pred.operand)})"
    if isinstance(pred, PredAnd):
        return (
            f"({print_feature_predicate(pred.left)}) and "
            f"({print_feature_predicate(pred.right)})"
        )
    raise TypeError(f"unknown predicate {pred!r}")


def eval_feature_predicate(pred: FeaturePredicate, dataset, feature: str) -> bool:
    """Decide whether one feature of the dataset satisfies the predicate.

    Depends only on the named feature's column and the row count.
    """
    if feature not in dataset.schema:
        raise SchemaError(f"unknown feature {feature!r}")
    if isinstance(pred, NameIn):
        return feature in pred.names
    if isinstance(pred, NullRateLt):
        n = dataset.n_rows
        if n == 0:
            return True
        nulls = sum(1 for v in dataset.columns[feature] if v is None)
        return (nulls / n) < pred.threshold
    if isinstance(pred, PredNot):
        return not eval_feature_predicate(pred.operand, dataset, feature)
    if isinstance(pred, PredAnd):
        return eval_feature_predicate(pred.left, dataset, feature) and eval_feature_predicate(
            pred.right, dataset, feature
        )
    raise TypeError(f"unknown predicate {pred!r}")


def predicate_feature_names(pred: FeaturePredicate) -> set[str]:
    if isinstance(pred, NameIn):
        return set(pred.names)
    if isinstance(pred, NullRateLt):
        return set()
    if isinstance(pred, PredNot):
        return predicate_feature_names(pred.operand)
    if isinstance(pred, PredAnd):
        return predicate_feature_names(pred.left) | predicate_feature_names(pred.right)
    raise TypeError(f"unknown predicate {pred!r}")
