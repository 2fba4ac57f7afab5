"""Scalar expressions over named variable blocks: parsing, evaluation, exact
symbolic differentiation.

Every phase function, amplitude, generating function and canonical map in this
package is carried by the `Expression` type defined here.  Expressions are
immutable trees; evaluation is numpy-vectorized (a point may be a single flat
vector or any array whose last axis is the flat coordinate).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "BlockLayout",
    "Expression",
    "ExprError",
    "ExprSyntaxError",
    "SingularLocusError",
    "UnknownIdentifierError",
    "IndexRangeError",
    "parse_expression",
    "evaluate",
    "differentiate",
    "gradient",
    "hessian_exprs",
    "check_homogeneity",
    "substitute_blocks_zero",
    "singular_guards",
    "to_text",
    "num",
    "var",
]


# ---------------------------------------------------------------------------
# errors

class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    """Malformed input; `position` is 1-based character position."""

    def __init__(self, message: str, position: int, expected: Sequence[str] = ()):
        self.position = position
        self.expected = tuple(expected)
        suffix = f" (expected one of: {', '.join(expected)})" if expected else ""
        super().__init__(f"syntax error at position {position}: {message}{suffix}")


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, position: int):
        self.position = position
        super().__init__(f"unknown identifier '{name}' at position {position}")


class IndexRangeError(ExprError):
    def __init__(self, name: str, index: int, dim: int, position: int):
        self.position = position
        super().__init__(
            f"index {name}[{index}] out of range at position {position}: block '{name}' has dimension {dim}"
        )


class SingularLocusError(ExprError):
    """Evaluation hit a declared singular locus (norm/abs/sgn at 0, zero denominator)."""

    def __init__(self, message: str, subexpr: "Node"):
        self.subexpr = subexpr
        super().__init__(f"singular locus: {message} in '{to_text(subexpr)}'")


# ---------------------------------------------------------------------------
# layout

@dataclass(frozen=True)
class BlockLayout:
    """Ordered named blocks of variables; flat indexing is stable and 1-based
    inside each block."""

    blocks: tuple  # tuple[(name, dim), ...]

    def __post_init__(self):
        names = [n for n, _ in self.blocks]
        if len(set(names)) != len(names):
            raise ExprError(f"duplicate block names in layout: {names}")
        for n, d in self.blocks:
            if d < 1:
                raise ExprError(f"block '{n}' must have positive dimension, got {d}")

    @property
    def total_dim(self) -> int:
        return sum(d for _, d in self.blocks)

    def offset(self, name: str) -> int:
        off = 0
        for n, d in self.blocks:
            if n == name:
                return off
            off += d
        raise ExprError(f"no block named '{name}'")

    def dim(self, name: str) -> int:
        for n, d in self.blocks:
            if n == name:
                return d
        raise ExprError(f"no block named '{name}'")

    def has_block(self, name: str) -> bool:
        return any(n == name for n, _ in self.blocks)

    def slot(self, name: str, index: int) -> int:
        """Flat 0-based slot of the 1-based `name[index]`."""
        d = self.dim(name)
        if not (1 <= index <= d):
            raise ExprError(f"{name}[{index}] out of range (dim {d})")
        return self.offset(name) + index - 1

    def slots(self, name: str) -> range:
        off = self.offset(name)
        return range(off, off + self.dim(name))

    def drop(self, names: Iterable[str]) -> "BlockLayout":
        drop = set(names)
        return BlockLayout(tuple((n, d) for n, d in self.blocks if n not in drop))


def layout(*blocks) -> BlockLayout:
    return BlockLayout(tuple(blocks))


# ---------------------------------------------------------------------------
# AST nodes

@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Param(Node):
    name: str


@dataclass(frozen=True)
class Var(Node):
    block: str
    index: int  # 1-based


@dataclass(frozen=True)
class Add(Node):
    a: Node
    b: Node


@dataclass(frozen=True)
class Sub(Node):
    a: Node
    b: Node


@dataclass(frozen=True)
class Mul(Node):
    a: Node
    b: Node


@dataclass(frozen=True)
class Div(Node):
    a: Node
    b: Node


@dataclass(frozen=True)
class Neg(Node):
    a: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    expo: Fraction  # integer or rational exponent


@dataclass(frozen=True)
class Call(Node):
    fn: str  # sin cos exp sqrt abs sgn
    arg: Node


@dataclass(frozen=True)
class Norm(Node):
    """Euclidean norm over a block slice, `norm(th)` or `norm(th[i..j])`."""

    block: str
    lo: int
    hi: int  # inclusive, 1-based


FUNCTIONS = ("sin", "cos", "exp", "sqrt", "abs", "sgn")


def num(v: float) -> Num:
    return Num(float(v))


def var(block: str, index: int) -> Var:
    return Var(block, index)


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_OPS = set("+-*/^()[],")


def _tokenize(text: str):
    toks = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        pos = i + 1  # 1-based
        if c in _TOKEN_OPS:
            toks.append((c, c, pos))
            i += 1
        elif c == ".":
            if text.startswith("..", i):
                toks.append(("..", "..", pos))
                i += 2
            else:
                # a number like ".5"
                j = i
                i, val = _scan_number(text, i)
                toks.append(("NUM", val, pos))
        elif c.isdigit():
            i, val = _scan_number(text, i)
            toks.append(("NUM", val, pos))
        elif c == "$":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            if j == i + 1:
                raise ExprSyntaxError("'$' must introduce a parameter name", pos)
            toks.append(("PARAM", text[i + 1 : j], pos))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(("IDENT", text[i:j], pos))
            i = j
        else:
            raise ExprSyntaxError(f"unexpected character '{c}'", pos)
    toks.append(("EOF", "", n + 1))
    return toks


def _scan_number(text: str, i: int):
    n = len(text)
    j = i
    while j < n and text[j].isdigit():
        j += 1
    if j < n and text[j] == "." and not text.startswith("..", j):
        j += 1
        while j < n and text[j].isdigit():
            j += 1
    if j < n and text[j] in "eE":
        k = j + 1
        if k < n and text[k] in "+-":
            k += 1
        if k < n and text[k].isdigit():
            j = k
            while j < n and text[j].isdigit():
                j += 1
    return j, float(text[i:j])


# ---------------------------------------------------------------------------
# parser (recursive descent)

class _Parser:
    def __init__(self, toks, layout: BlockLayout):
        self.toks = toks
        self.k = 0
        self.layout = layout

    def peek(self):
        return self.toks[self.k]

    def next(self):
        t = self.toks[self.k]
        self.k += 1
        return t

    def expect(self, kind: str, expected_desc=None):
        t = self.next()
        if t[0] != kind:
            raise ExprSyntaxError(
                f"got '{t[1] or 'end of input'}'", t[2], expected_desc or [kind]
            )
        return t

    def parse(self) -> Node:
        node = self.expr()
        t = self.peek()
        if t[0] != "EOF":
            raise ExprSyntaxError(f"trailing input '{t[1]}'", t[2], ["end of input"])
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[0] in ("+", "-"):
            op = self.next()[0]
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[0] in ("*", "/"):
            op = self.next()[0]
            rhs = self.unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def unary(self) -> Node:
        if self.peek()[0] == "-":
            self.next()
            return Neg(self.unary())
        if self.peek()[0] == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[0] == "^":
            self.next()
            expo = self.exponent()
            return Pow(base, expo)
        return base

    def exponent(self) -> Fraction:
        """Exponents are integer or rational literals: 2, -2, (1/2), (-3/2)."""
        t = self.peek()
        if t[0] == "NUM":
            self.next()
            return self._as_int_fraction(t)
        if t[0] == "-":
            self.next()
            t2 = self.expect("NUM", ["integer exponent"])
            return -self._as_int_fraction(t2)
        if t[0] == "(":
            self.next()
            sign = 1
            if self.peek()[0] == "-":
                self.next()
                sign = -1
            p = self.expect("NUM", ["integer numerator"])
            self.expect("/", ["/"])
            q = self.expect("NUM", ["integer denominator"])
            self.expect(")", [")"])
            return Fraction(sign * int(p[1]), int(q[1]))
        raise ExprSyntaxError(
            f"got '{t[1] or 'end of input'}'", t[2], ["integer or rational exponent"]
        )

    @staticmethod
    def _as_int_fraction(tok) -> Fraction:
        v = tok[1]
        if v != int(v):
            raise ExprSyntaxError("exponent must be integer or rational", tok[2])
        return Fraction(int(v))

    _ATOM_EXPECTED = ["number", "identifier", "parameter", "'('", "'-'"]

    def atom(self) -> Node:
        t = self.next()
        if t[0] == "NUM":
            return Num(t[1])
        if t[0] == "PARAM":
            return Param(t[1])
        if t[0] == "(":
            node = self.expr()
            self.expect(")", [")"])
            return node
        if t[0] == "-":
            return Neg(self.unary())
        if t[0] == "IDENT":
            return self.ident(t)
        raise ExprSyntaxError(
            f"got '{t[1] or 'end of input'}'", t[2], self._ATOM_EXPECTED
        )

    def ident(self, t) -> Node:
        name, pos = t[1], t[2]
        if name == "pi":
            return Num(math.pi)
        if name == "norm":
            return self.norm(pos)
        if name in FUNCTIONS:
            self.expect("(", ["'('"])
            arg = self.expr()
            self.expect(")", [")"])
            return Call(name, arg)
        if self.peek()[0] == "[":
            self.next()
            it = self.expect("NUM", ["index"])
            idx = int(it[1])
            self.expect("]", ["]"])
            if not self.layout.has_block(name):
                raise UnknownIdentifierError(name, pos)
            d = self.layout.dim(name)
            if not (1 <= idx <= d):
                raise IndexRangeError(name, idx, d, it[2])
            return Var(name, idx)
        raise UnknownIdentifierError(name, pos)

    def norm(self, pos: int) -> Node:
        self.expect("(", ["'('"])
        t = self.expect("IDENT", ["block name"])
        name = t[1]
        if not self.layout.has_block(name):
            raise UnknownIdentifierError(name, t[2])
        d = self.layout.dim(name)
        lo, hi = 1, d
        if self.peek()[0] == "[":
            self.next()
            lt = self.expect("NUM", ["index"])
            self.expect("..", ["'..'"])
            ht = self.expect("NUM", ["index"])
            self.expect("]", ["]"])
            lo, hi = int(lt[1]), int(ht[1])
            if not (1 <= lo <= hi <= d):
                raise IndexRangeError(name, lo if lo < 1 or lo > d else hi, d, lt[2])
        self.expect(")", [")"])
        return Norm(name, lo, hi)


# ---------------------------------------------------------------------------
# expression wrapper

@dataclass(frozen=True)
class Expression:
    """An AST over a block layout, with late-bound named real parameters."""

    ast: Node
    layout: BlockLayout
    parameters: dict = field(default_factory=dict)

    def __call__(self, point, params=None):
        return evaluate(self, point, params)

    def diff(self, slot: int) -> "Expression":
        return differentiate(self, slot)

    def text(self) -> str:
        return to_text(self.ast)

    def with_params(self, **params) -> "Expression":
        merged = dict(self.parameters)
        merged.update(params)
        return Expression(self.ast, self.layout, merged)


def parse_expression(text: str, layout: BlockLayout, parameters=None) -> Expression:
    if not layout.blocks:
        raise ExprError("layout must be non-empty")
    node = _Parser(_tokenize(text), layout).parse()
    return Expression(_simplify(node), layout, dict(parameters or {}))


# ---------------------------------------------------------------------------
# evaluation (vectorized over leading axes; last axis = flat coordinates)

def evaluate(expr: Expression, point, params=None):
    pt = np.asarray(point, dtype=float)
    if pt.shape[-1] != expr.layout.total_dim:
        raise ExprError(
            f"point has {pt.shape[-1]} coordinates, layout needs {expr.layout.total_dim}"
        )
    bound = dict(expr.parameters)
    if params:
        bound.update(params)
    out = _eval(expr.ast, pt, bound, expr.layout)
    if np.ndim(out) == 0 and pt.ndim == 1:
        return float(out)
    return np.broadcast_to(out, pt.shape[:-1]).astype(float) if np.ndim(out) < pt.ndim - 1 else out


def _eval(node: Node, pt, params, lay):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Param):
        if node.name not in params:
            raise ExprError(f"unbound parameter '${node.name}'")
        return float(params[node.name])
    if isinstance(node, Var):
        return pt[..., lay.slot(node.block, node.index)]
    if isinstance(node, Add):
        return _eval(node.a, pt, params, lay) + _eval(node.b, pt, params, lay)
    if isinstance(node, Sub):
        return _eval(node.a, pt, params, lay) - _eval(node.b, pt, params, lay)
    if isinstance(node, Mul):
        return _eval(node.a, pt, params, lay) * _eval(node.b, pt, params, lay)
    if isinstance(node, Div):
        a = _eval(node.a, pt, params, lay)
        b = _eval(node.b, pt, params, lay)
        if np.any(b == 0.0):
            raise SingularLocusError("division by zero", node)
        return a / b
    if isinstance(node, Neg):
        return -_eval(node.a, pt, params, lay)
    if isinstance(node, Pow):
        b = _eval(node.base, pt, params, lay)
        if node.expo.denominator == 1:
            e = node.expo.numerator
            if e < 0 and np.any(b == 0.0):
                raise SingularLocusError("zero base with negative exponent", node)
            return b ** float(e)
        if np.any(b <= 0.0):
            raise SingularLocusError("non-positive base with fractional exponent", node)
        return b ** float(node.expo)
    if isinstance(node, Call):
        a = _eval(node.arg, pt, params, lay)
        if node.fn == "sin":
            return np.sin(a)
        if node.fn == "cos":
            return np.cos(a)
        if node.fn == "exp":
            return np.exp(a)
        if node.fn == "sqrt":
            if np.any(a < 0.0):
                raise SingularLocusError("sqrt of negative value", node)
            return np.sqrt(a)
        if node.fn == "abs":
            if np.any(a == 0.0):
                raise SingularLocusError("abs at 0", node)
            return np.abs(a)
        if node.fn == "sgn":
            if np.any(a == 0.0):
                raise SingularLocusError("sgn at 0", node)
            return np.sign(a)
        raise ExprError(f"unknown function {node.fn}")
    if isinstance(node, Norm):
        off = lay.offset(node.block)
        sl = pt[..., off + node.lo - 1 : off + node.hi]
        v = np.sqrt(np.sum(sl * sl, axis=-1))
        if np.any(v == 0.0):
            raise SingularLocusError("norm at 0", node)
        return v
    raise ExprError(f"cannot evaluate {node!r}")


# ---------------------------------------------------------------------------
# differentiation

def differentiate(expr: Expression, slot: int) -> Expression:
    """Exact symbolic derivative with respect to the flat slot index.

    Rules away from singular loci: d|t| = sgn(t) dt, d sgn(t) = 0.
    """
    d = _diff(expr.ast, slot, expr.layout)
    return Expression(_simplify(d), expr.layout, expr.parameters)


def gradient(expr: Expression, slots: Sequence[int]) -> list:
    return [differentiate(expr, s) for s in slots]


def hessian_exprs(expr: Expression, slots: Sequence[int]):
    """Symmetric matrix of second-derivative Expressions over `slots`."""
    grads = gradient(expr, slots)
    n = len(slots)
    H = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            H[i][j] = differentiate(grads[i], slots[j])
            H[j][i] = H[i][j]
    return H


def _diff(node: Node, slot: int, lay) -> Node:
    if isinstance(node, (Num, Param)):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0) if lay.slot(node.block, node.index) == slot else Num(0.0)
    if isinstance(node, Add):
        return Add(_diff(node.a, slot, lay), _diff(node.b, slot, lay))
    if isinstance(node, Sub):
        return Sub(_diff(node.a, slot, lay), _diff(node.b, slot, lay))
    if isinstance(node, Mul):
        return Add(
            Mul(_diff(node.a, slot, lay), node.b),
            Mul(node.a, _diff(node.b, slot, lay)),
        )
    if isinstance(node, Div):
        return Sub(
            Div(_diff(node.a, slot, lay), node.b),
            Div(Mul(node.a, _diff(node.b, slot, lay)), Pow(node.b, Fraction(2))),
        )
    if isinstance(node, Neg):
        return Neg(_diff(node.a, slot, lay))
    if isinstance(node, Pow):
        da = _diff(node.base, slot, lay)
        return Mul(
            Mul(Num(float(node.expo)), Pow(node.base, node.expo - 1)),
            da,
        )
    if isinstance(node, Call):
        da = _diff(node.arg, slot, lay)
        if node.fn == "sin":
            return Mul(Call("cos", node.arg), da)
        if node.fn == "cos":
            return Neg(Mul(Call("sin", node.arg), da))
        if node.fn == "exp":
            return Mul(Call("exp", node.arg), da)
        if node.fn == "sqrt":
            return Div(da, Mul(Num(2.0), Call("sqrt", node.arg)))
        if node.fn == "abs":
            return Mul(Call("sgn", node.arg), da)
        if node.fn == "sgn":
            return Num(0.0)
        raise ExprError(f"unknown function {node.fn}")
    if isinstance(node, Norm):
        off = lay.offset(node.block)
        lo_slot, hi_slot = off + node.lo - 1, off + node.hi - 1
        if lo_slot <= slot <= hi_slot:
            idx = slot - off + 1
            return Div(Var(node.block, idx), node)
        return Num(0.0)
    raise ExprError(f"cannot differentiate {node!r}")


# ---------------------------------------------------------------------------
# light simplification: constant folding and 0/1 elimination

def _is_num(n: Node, v=None) -> bool:
    return isinstance(n, Num) and (v is None or n.value == v)


def _simplify(node: Node) -> Node:
    if isinstance(node, Add):
        a, b = _simplify(node.a), _simplify(node.b)
        if _is_num(a) and _is_num(b):
            return Num(a.value + b.value)
        if _is_num(a, 0.0):
            return b
        if _is_num(b, 0.0):
            return a
        return Add(a, b)
    if isinstance(node, Sub):
        a, b = _simplify(node.a), _simplify(node.b)
        if _is_num(a) and _is_num(b):
            return Num(a.value - b.value)
        if _is_num(b, 0.0):
            return a
        if _is_num(a, 0.0):
            return _simplify(Neg(b))
        return Sub(a, b)
    if isinstance(node, Mul):
        a, b = _simplify(node.a), _simplify(node.b)
        if _is_num(a) and _is_num(b):
            return Num(a.value * b.value)
        if _is_num(a, 0.0) or _is_num(b, 0.0):
            return Num(0.0)
        if _is_num(a, 1.0):
            return b
        if _is_num(b, 1.0):
            return a
        return Mul(a, b)
    if isinstance(node, Div):
        a, b = _simplify(node.a), _simplify(node.b)
        if _is_num(b, 1.0):
            return a
        if _is_num(a, 0.0):
            # valid on the domain (denominator is nonzero there)
            return Num(0.0)
        if _is_num(a) and _is_num(b) and b.value != 0.0:
            return Num(a.value / b.value)
        return Div(a, b)
    if isinstance(node, Neg):
        a = _simplify(node.a)
        if _is_num(a):
            return Num(-a.value)
        if isinstance(a, Neg):
            return a.a
        return Neg(a)
    if isinstance(node, Pow):
        base = _simplify(node.base)
        if node.expo == 0:
            return Num(1.0)
        if node.expo == 1:
            return base
        if _is_num(base) and node.expo.denominator == 1:
            return Num(base.value ** node.expo.numerator)
        return Pow(base, node.expo)
    if isinstance(node, Call):
        return Call(node.fn, _simplify(node.arg))
    return node


# ---------------------------------------------------------------------------
# printing (round-trips through parse_expression to a structurally equal tree)

_PREC = {"add": 1, "mul": 2, "unary": 3, "pow": 4, "atom": 5}


def to_text(node: Node) -> str:
    return _print(node, 0)


def _print(node: Node, parent_prec: int) -> str:
    if isinstance(node, Num):
        return _print_num(node.value)
    if isinstance(node, Param):
        return f"${node.name}"
    if isinstance(node, Var):
        return f"{node.block}[{node.index}]"
    if isinstance(node, Norm):
        return f"norm({node.block}[{node.lo}..{node.hi}])"
    if isinstance(node, Call):
        return f"{node.fn}({_print(node.arg, 0)})"
    if isinstance(node, Add):
        s = f"{_print(node.a, _PREC['add'])} + {_print(node.b, _PREC['add'] + 1)}"
        return _wrap(s, _PREC["add"], parent_prec)
    if isinstance(node, Sub):
        s = f"{_print(node.a, _PREC['add'])} - {_print(node.b, _PREC['add'] + 1)}"
        return _wrap(s, _PREC["add"], parent_prec)
    if isinstance(node, Mul):
        s = f"{_print(node.a, _PREC['mul'])}*{_print(node.b, _PREC['mul'] + 1)}"
        return _wrap(s, _PREC["mul"], parent_prec)
    if isinstance(node, Div):
        s = f"{_print(node.a, _PREC['mul'])}/{_print(node.b, _PREC['mul'] + 1)}"
        return _wrap(s, _PREC["mul"], parent_prec)
    if isinstance(node, Neg):
        s = f"-{_print(node.a, _PREC['unary'])}"
        return _wrap(s, _PREC["unary"], parent_prec)
    if isinstance(node, Pow):
        e = node.expo
        if e.denominator == 1 and e.numerator >= 0:
            es = str(e.numerator)
        else:
            sign = "-" if e.numerator < 0 else ""
            es = f"({sign}{abs(e.numerator)}/{e.denominator})"
        s = f"{_print(node.base, _PREC['pow'] + 1)}^{es}"
        return _wrap(s, _PREC["pow"], parent_prec)
    raise ExprError(f"cannot print {node!r}")


def _print_num(v: float) -> str:
    if v < 0:
        return f"(-{_print_num(-v)})"
    r = repr(v)
    return r


def _wrap(s: str, prec: int, parent_prec: int) -> str:
    return f"({s})" if prec < parent_prec else s


# ---------------------------------------------------------------------------
# singular-locus guards

@dataclass(frozen=True)
class Guard:
    """A subexpression whose zero (or non-positive) set is a singular locus."""

    node: Node
    kind: str  # "nonzero" | "positive"


def singular_guards(expr: Expression) -> list:
    out = []
    _collect_guards(expr.ast, out)
    # dedupe structurally
    seen, uniq = set(), []
    for g in out:
        key = (g.kind, g.node)
        if key not in seen:
            seen.add(key)
            uniq.append(g)
    return uniq


def _collect_guards(node: Node, out: list):
    if isinstance(node, (Num, Param, Var)):
        return
    if isinstance(node, Norm):
        out.append(Guard(node, "nonzero"))
        return
    if isinstance(node, Call):
        if node.fn in ("abs", "sgn"):
            out.append(Guard(node.arg, "nonzero"))
        elif node.fn == "sqrt":
            out.append(Guard(node.arg, "positive"))
        _collect_guards(node.arg, out)
        return
    if isinstance(node, Div):
        out.append(Guard(node.b, "nonzero"))
        _collect_guards(node.a, out)
        _collect_guards(node.b, out)
        return
    if isinstance(node, Pow):
        if node.expo.denominator != 1:
            out.append(Guard(node.base, "positive"))
        elif node.expo.numerator < 0:
            out.append(Guard(node.base, "nonzero"))
        _collect_guards(node.base, out)
        return
    for name in ("a", "b", "arg", "base"):
        child = getattr(node, name, None)
        if isinstance(child, Node):
            _collect_guards(child, out)


def guards_ok(expr: Expression, point, params=None, tol: float = 1e-6) -> bool:
    """True when `point` stays clear of every declared singular locus."""
    lay = expr.layout
    bound = dict(expr.parameters)
    if params:
        bound.update(params)
    pt = np.asarray(point, dtype=float)
    for g in singular_guards(expr):
        try:
            v = _eval(g.node, pt, bound, lay)
        except SingularLocusError:
            return False
        if g.kind == "nonzero" and np.any(np.abs(v) < tol):
            return False
        if g.kind == "positive" and np.any(np.asarray(v) < tol):
            return False
    return True


# ---------------------------------------------------------------------------
# substitution and homogeneity

def substitute_blocks_zero(expr: Expression, block_names: Iterable[str]) -> Expression:
    """Set entire blocks to zero at the AST level and drop them from the layout."""
    drop = set(block_names)
    node = _subst_zero(expr.ast, drop)
    return Expression(_simplify(node), expr.layout.drop(drop), expr.parameters)


def _subst_zero(node: Node, drop: set) -> Node:
    if isinstance(node, Var):
        return Num(0.0) if node.block in drop else node
    if isinstance(node, Norm):
        if node.block in drop:
            return Num(0.0)
        return node
    if isinstance(node, Add):
        return Add(_subst_zero(node.a, drop), _subst_zero(node.b, drop))
    if isinstance(node, Sub):
        return Sub(_subst_zero(node.a, drop), _subst_zero(node.b, drop))
    if isinstance(node, Mul):
        return Mul(_subst_zero(node.a, drop), _subst_zero(node.b, drop))
    if isinstance(node, Div):
        return Div(_subst_zero(node.a, drop), _subst_zero(node.b, drop))
    if isinstance(node, Neg):
        return Neg(_subst_zero(node.a, drop))
    if isinstance(node, Pow):
        return Pow(_subst_zero(node.base, drop), node.expo)
    if isinstance(node, Call):
        return Call(node.fn, _subst_zero(node.arg, drop))
    return node


@dataclass
class HomogeneityReport:
    passed: bool
    degree: float
    worst_euler: float
    worst_scaling: float
    worst_sample: Optional[np.ndarray]

    def __bool__(self):
        return self.passed


def check_homogeneity(
    expr: Expression,
    block: str,
    degree: float,
    samples,
    tol: float = 1e-9,
    params=None,
    scales=(0.5, 2.0, 10.0),
) -> HomogeneityReport:
    """Euler-identity test |s·∂_s f − degree·f| <= tol·(1+|f|) over the block's
    slots, plus f(λs) = λ^degree f(s) spot checks."""
    slots = list(expr.layout.slots(block))
    grads = gradient(expr, slots)
    worst_euler = 0.0
    worst_scaling = 0.0
    worst_sample = None
    passed = True
    for p in np.atleast_2d(np.asarray(samples, dtype=float)):
        f = evaluate(expr, p, params)
        euler = sum(p[s] * evaluate(g, p, params) for s, g in zip(slots, grads))
        r = abs(euler - degree * f)
        bound = tol * (1.0 + abs(f))
        if r > worst_euler:
            worst_euler, worst_sample = r, p.copy()
        if r > bound:
            passed = False
        for lam in scales:
            q = p.copy()
            q[slots] *= lam
            fl = evaluate(expr, q, params)
            rs = abs(fl - lam**degree * f)
            if rs > worst_scaling:
                worst_scaling = rs
            if rs > tol * (1.0 + abs(fl)) * max(lam**degree, 1.0):
                passed = False
    return HomogeneityReport(passed, degree, worst_euler, worst_scaling, worst_sample)
