"""Tiny expression language for drivers, constraints and rewards.

Grammar (infix, left associative, standard precedence):

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := '-' unary | atom
    atom  := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Functions: abs, exp, sqrt, pos (positive part), neg (negative part),
max, min.  Variables are fixed by the signature: drivers and constraints
see (t, y, z), rewards and terminal payoffs see (t, w).  Parsing is
deterministic and syntax errors carry the byte offset of the offending
token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from . import _kernels as K
from .errors import EvalError, ParseError, SignatureError


class Signature(Enum):
    """Variable set an expression is allowed to reference."""

    GENERATOR = "generator"  # drivers and constraints: t, y, z
    REWARD = "reward"        # rewards / terminal payoffs: t, w


_VARS = {
    Signature.GENERATOR: ("t", "y", "z"),
    Signature.REWARD: ("t", "w"),
}

_FUNCTIONS = {
    "abs": 1,
    "exp": 1,
    "sqrt": 1,
    "pos": 1,
    "neg": 1,
    "max": 2,
    "min": 2,
}


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class Bin:
    op: str
    lhs: "Node"
    rhs: "Node"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


Node = Num | Var | Neg | Bin | Call


# ---------------------------------------------------------------------------
# Tokenizer


@dataclass(frozen=True)
class _Token:
    kind: str  # NUM NAME OP LPAREN RPAREN COMMA EOF
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c in " \t\r\n":
            i += 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or (text[j] == "." and not seen_dot)):
                if text[j] == ".":
                    seen_dot = True
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            tokens.append(_Token("NUM", text[i:j], i))
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("NAME", text[i:j], i))
            i = j
            continue
        if c in "+-*/":
            tokens.append(_Token("OP", c, i))
            i += 1
            continue
        if c == "(":
            tokens.append(_Token("LPAREN", c, i))
            i += 1
            continue
        if c == ")":
            tokens.append(_Token("RPAREN", c, i))
            i += 1
            continue
        if c == ",":
            tokens.append(_Token("COMMA", c, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {c!r}", i)
    tokens.append(_Token("EOF", "", n))
    return tokens


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, tokens: list[_Token], signature: Signature):
        self.tokens = tokens
        self.pos = 0
        self.signature = signature
        self.allowed = _VARS[signature]

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, what: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            raise ParseError(f"expected {what}", tok.offset)
        return self.advance()

    def parse(self) -> Node:
        node = self.expression()
        tok = self.peek()
        if tok.kind != "EOF":
            raise ParseError(f"unexpected token {tok.text!r}", tok.offset)
        return node

    def expression(self) -> Node:
        node = self.term()
        while self.peek().kind == "OP" and self.peek().text in "+-":
            op = self.advance().text
            node = Bin(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().kind == "OP" and self.peek().text in "*/":
            op = self.advance().text
            node = Bin(op, node, self.unary())
        return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok.kind == "OP" and tok.text == "-":
            self.advance()
            return Neg(self.unary())
        return self.atom()

    def atom(self) -> Node:
        tok = self.advance()
        if tok.kind == "NUM":
            return Num(float(tok.text))
        if tok.kind == "LPAREN":
            node = self.expression()
            self.expect("RPAREN", "')'")
            return node
        if tok.kind == "NAME":
            name = tok.text
            if name in _FUNCTIONS:
                self.expect("LPAREN", f"'(' after function {name!r}")
                args = [self.expression()]
                while self.peek().kind == "COMMA":
                    self.advance()
                    args.append(self.expression())
                self.expect("RPAREN", "')'")
                if len(args) != _FUNCTIONS[name]:
                    raise ParseError(
                        f"function {name!r} takes {_FUNCTIONS[name]} argument(s), got {len(args)}",
                        tok.offset,
                    )
                return Call(name, tuple(args))
            if name in self.allowed:
                return Var(name)
            other = set().union(*_VARS.values())
            if name in other:
                raise SignatureError(
                    f"variable {name!r} is not available in a "
                    f"{self.signature.value} expression",
                    tok.offset,
                )
            raise ParseError(f"unknown identifier {name!r}", tok.offset)
        raise ParseError(f"expected a value, got {tok.text!r}" if tok.text else "unexpected end of input", tok.offset)


# ---------------------------------------------------------------------------
# Evaluation


def _eval_scalar(node: Node, env: dict) -> float:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return float(env[node.name])
    if isinstance(node, Neg):
        return -_eval_scalar(node.operand, env)
    if isinstance(node, Bin):
        a = _eval_scalar(node.lhs, env)
        b = _eval_scalar(node.rhs, env)
        if node.op == "+":
            v = a + b
        elif node.op == "-":
            v = a - b
        elif node.op == "*":
            v = a * b
        else:
            if b == 0.0:
                raise EvalError("division by zero")
            v = a / b
        if not math.isfinite(v):
            raise EvalError("non-finite value in evaluation")
        return v
    if isinstance(node, Call):
        args = [_eval_scalar(a, env) for a in node.args]
        fn = node.fn
        if fn == "abs":
            return abs(args[0])
        if fn == "exp":
            v = math.exp(args[0]) if args[0] < 709.0 else math.inf
            if not math.isfinite(v):
                raise EvalError("exp overflow")
            return v
        if fn == "sqrt":
            if args[0] < 0.0:
                raise EvalError("sqrt of a negative value")
            return math.sqrt(args[0])
        if fn == "pos":
            return args[0] if args[0] > 0.0 else 0.0
        if fn == "neg":
            return -args[0] if args[0] < 0.0 else 0.0
        if fn == "max":
            return max(args[0], args[1])
        return min(args[0], args[1])
    raise TypeError(f"unknown node {node!r}")


def _eval_array(node: Node, env: dict) -> np.ndarray:
    if isinstance(node, Num):
        return np.full_like(env["__shape__"], node.value)
    if isinstance(node, Var):
        return np.asarray(env[node.name], dtype=np.float64)
    if isinstance(node, Neg):
        return -_eval_array(node.operand, env)
    if isinstance(node, Bin):
        a = _eval_array(node.lhs, env)
        b = _eval_array(node.rhs, env)
        if node.op == "+":
            v = a + b
        elif node.op == "-":
            v = a - b
        elif node.op == "*":
            with np.errstate(all="ignore"):
                v = a * b
        else:
            if np.any(b == 0.0):
                raise EvalError("division by zero")
            with np.errstate(all="ignore"):
                v = a / b
        if not np.all(np.isfinite(v)):
            raise EvalError("non-finite value in evaluation")
        return v
    if isinstance(node, Call):
        args = [_eval_array(a, env) for a in node.args]
        fn = node.fn
        if fn == "abs":
            return np.abs(args[0])
        if fn == "exp":
            with np.errstate(all="ignore"):
                v = np.exp(args[0])
            if not np.all(np.isfinite(v)):
                raise EvalError("exp overflow")
            return v
        if fn == "sqrt":
            if np.any(args[0] < 0.0):
                raise EvalError("sqrt of a negative value")
            return np.sqrt(args[0])
        if fn == "pos":
            return np.maximum(args[0], 0.0)
        if fn == "neg":
            return np.maximum(-args[0], 0.0)
        if fn == "max":
            return np.maximum(args[0], args[1])
        return np.minimum(args[0], args[1])
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# Postfix programs for the kernels


@dataclass(frozen=True)
class Program:
    codes: np.ndarray
    consts: np.ndarray
    stack_need: int


_VAR_OPS = {"t": K.OP_T, "y": K.OP_Y, "z": K.OP_Z, "w": K.OP_Y}
# Rewards evaluate with w bound to the y slot of the stack machine; kernels
# only ever run generator-signature programs, the alias is for completeness.

_FN_OPS = {
    "abs": K.OP_ABS,
    "exp": K.OP_EXP,
    "sqrt": K.OP_SQRT,
    "pos": K.OP_POS,
    "neg": K.OP_NEGPART,
}


def compile_program(node: Node) -> Program:
    codes: list[int] = []
    consts: list[float] = []

    def emit(op: int, const: float = 0.0) -> None:
        codes.append(op)
        consts.append(const)

    def walk(nd: Node) -> None:
        if isinstance(nd, Num):
            emit(K.OP_CONST, nd.value)
        elif isinstance(nd, Var):
            emit(_VAR_OPS[nd.name])
        elif isinstance(nd, Neg):
            walk(nd.operand)
            emit(K.OP_NEG)
        elif isinstance(nd, Bin):
            walk(nd.lhs)
            walk(nd.rhs)
            emit({"+": K.OP_ADD, "-": K.OP_SUB, "*": K.OP_MUL, "/": K.OP_DIV}[nd.op])
        elif isinstance(nd, Call):
            for a in nd.args:
                walk(a)
            if nd.fn == "max":
                emit(K.OP_MAX)
            elif nd.fn == "min":
                emit(K.OP_MIN)
            else:
                emit(_FN_OPS[nd.fn])
        else:
            raise TypeError(f"unknown node {nd!r}")

    walk(node)

    depth = 0
    peak = 0
    pushes = {K.OP_CONST, K.OP_T, K.OP_Y, K.OP_Z}
    pops = {K.OP_ADD, K.OP_SUB, K.OP_MUL, K.OP_DIV, K.OP_MAX, K.OP_MIN}
    for op in codes:
        if op in pushes:
            depth += 1
        elif op in pops:
            depth -= 1
        peak = max(peak, depth)
    if peak > K.MAX_STACK:
        raise ParseError(f"expression too deep (needs stack {peak})", 0)

    codes_arr = np.asarray(codes, dtype=np.int64)
    consts_arr = np.asarray(consts, dtype=np.float64)
    codes_arr.flags.writeable = False
    consts_arr.flags.writeable = False
    return Program(codes_arr, consts_arr, peak)


# ---------------------------------------------------------------------------
# Canonical printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _print(node: Node, parent_prec: int, right_side: bool) -> str:
    if isinstance(node, Num):
        v = node.value
        return repr(v)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        inner = _print(node.operand, 3, False)
        s = f"-{inner}"
        if parent_prec >= 2:
            return f"({s})"
        return s
    if isinstance(node, Bin):
        prec = _PREC[node.op]
        lhs = _print(node.lhs, prec, False)
        rhs = _print(node.rhs, prec, True)
        s = f"{lhs} {node.op} {rhs}"
        if prec < parent_prec or (prec == parent_prec and right_side):
            return f"({s})"
        return s
    if isinstance(node, Call):
        args = ", ".join(_print(a, 0, False) for a in node.args)
        return f"{node.fn}({args})"
    raise TypeError(f"unknown node {node!r}")


def canonical(node: Node) -> str:
    return _print(node, 0, False)


# ---------------------------------------------------------------------------
# Public wrapper


_PROBE_POINTS = 33
_PROBE_LO = -5.0
_PROBE_HI = 5.0


@dataclass
class FunctionSpec:
    """A parsed expression together with its signature and metadata."""

    source: str
    signature: Signature
    ast: Node
    declared_lipschitz: float | None = None
    declared_convex: bool | None = None
    _program: Program | None = field(default=None, repr=False, compare=False)
    _axis_lipschitz: dict = field(default_factory=dict, repr=False, compare=False)

    def evaluate(self, **env: float) -> float:
        """Evaluate at one point; raises EvalError on non-finite results."""
        self._check_env(env)
        return _eval_scalar(self.ast, env)

    def eval_array(self, **env) -> np.ndarray:
        """Vectorized evaluation over same-shaped arrays."""
        self._check_env(env)
        env = {k: np.asarray(v, dtype=np.float64) for k, v in env.items()}
        shape_probe = next(iter(env.values()))
        out = _eval_array(self.ast, {**env, "__shape__": np.zeros_like(shape_probe)})
        return np.broadcast_to(out, shape_probe.shape).astype(np.float64, copy=True) \
            if out.shape != shape_probe.shape else out

    def _check_env(self, env: dict) -> None:
        needed = self.variables()
        missing = needed - set(env)
        if missing:
            raise SignatureError(f"missing variables {sorted(missing)}", 0)

    def program(self) -> Program:
        if self._program is None:
            self._program = compile_program(self.ast)
        return self._program

    def canonical(self) -> str:
        return canonical(self.ast)

    def variables(self) -> set:
        out: set = set()

        def walk(nd: Node) -> None:
            if isinstance(nd, Var):
                out.add(nd.name)
            elif isinstance(nd, Neg):
                walk(nd.operand)
            elif isinstance(nd, Bin):
                walk(nd.lhs)
                walk(nd.rhs)
            elif isinstance(nd, Call):
                for a in nd.args:
                    walk(a)

        walk(self.ast)
        return out

    def is_zero_literal(self) -> bool:
        return isinstance(self.ast, Num) and self.ast.value == 0.0

    def depends_only_on_z(self) -> bool:
        """True when the expression never reads y (t and z are fine)."""
        return "y" not in self.variables()

    def axis_lipschitz(self, horizon: float = 1.0) -> tuple:
        """Probed Lipschitz slopes along y and z on the default box.

        Estimates are maxima of adjacent finite differences on a 33-point
        grid per axis with t in {0, horizon/2, horizon}.  Cached per horizon.
        For a reward signature the w axis is reported in the first slot and
        the second is zero.
        """
        key = float(horizon)
        hit = self._axis_lipschitz.get(key)
        if hit is not None:
            return hit
        grid = np.linspace(_PROBE_LO, _PROBE_HI, _PROBE_POINTS)
        ts = np.array([0.0, 0.5 * horizon, horizon])
        if self.signature == Signature.REWARD:
            lw = 0.0
            for t in ts:
                vals = self.eval_array(t=np.full_like(grid, t), w=grid)
                lw = max(lw, float(np.max(np.abs(np.diff(vals)) / np.diff(grid))))
            self._axis_lipschitz[key] = (lw, 0.0)
            return self._axis_lipschitz[key]
        ly = 0.0
        lz = 0.0
        for t in ts:
            for other in grid[:: (_PROBE_POINTS - 1) // 4]:
                tv = np.full_like(grid, t)
                vy = self.eval_array(t=tv, y=grid, z=np.full_like(grid, other))
                ly = max(ly, float(np.max(np.abs(np.diff(vy)) / np.diff(grid))))
                vz = self.eval_array(t=tv, y=np.full_like(grid, other), z=grid)
                lz = max(lz, float(np.max(np.abs(np.diff(vz)) / np.diff(grid))))
        self._axis_lipschitz[key] = (ly, lz)
        return self._axis_lipschitz[key]


def parse(text: str, signature: Signature = Signature.GENERATOR, *,
          lipschitz: float | None = None, convex: bool | None = None) -> FunctionSpec:
    """Parse ``text`` into a FunctionSpec for the given signature."""
    tokens = _tokenize(text)
    ast = _Parser(tokens, signature).parse()
    return FunctionSpec(text, signature, ast, lipschitz, convex)


def evaluate(f: FunctionSpec, env: dict) -> float:
    """Evaluate ``f`` at the point described by ``env``."""
    return f.evaluate(**env)


def ensure_signature(f: FunctionSpec, signature: Signature, what: str) -> None:
    if f.signature != signature:
        raise SignatureError(f"{what} must use the {signature.value} signature", 0)


def combine_sum(a: FunctionSpec, scale: float, b: FunctionSpec) -> FunctionSpec:
    """Build the function ``a + scale * b`` at the AST level."""
    if b.is_zero_literal() or scale == 0.0:
        return a
    ast = Bin("+", a.ast, Bin("*", Num(scale), b.ast))
    src = canonical(ast)
    return FunctionSpec(src, a.signature, ast)
