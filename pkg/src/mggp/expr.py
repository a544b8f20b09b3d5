"""Expression trees for single genes: node types, random generation,
vectorized evaluation, expressional complexity and infix text I/O.

Variables are 0-based internally and printed 1-based (``x1`` is input
column 0). Division, log, sqrt and power are left unprotected; callers
turn non-finite outputs into a fitness penalty.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

import numpy as np

__all__ = [
    "Var", "Const", "Unary", "Binary", "Node", "ExprTree", "FunctionSet",
    "GrowthConfig", "ParseError", "UnknownOperatorError", "random_tree",
    "random_subtree", "evaluate", "evaluate_column", "complexity",
    "to_infix", "parse_infix", "format_constant",
]


@dataclass(frozen=True, slots=True)
class Var:
    index: int


@dataclass(frozen=True, slots=True)
class Const:
    value: float


@dataclass(frozen=True, slots=True)
class Unary:
    op: str
    child: "Node"


@dataclass(frozen=True, slots=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


Node = Union[Var, Const, Unary, Binary]


def _cube(a):
    return a * a * a


def _expn(a):
    return np.exp(np.negative(a))


UNARY_FUNCS = {
    "square": np.square,
    "sqrt": np.sqrt,
    "exp": np.exp,
    "cube": _cube,
    "expn": _expn,
    "neg": np.negative,
    "abs": np.abs,
    "log": np.log,
    "cos": np.cos,
}

BINARY_FUNCS = {
    "mul": np.multiply,
    "sub": np.subtract,
    "add": np.add,
    "div": np.divide,
    "pow": np.power,
}

_BINARY_SYMBOL = {"mul": "*", "sub": "-", "add": "+", "div": "/", "pow": "^"}
_SYMBOL_BINARY = {v: k for k, v in _BINARY_SYMBOL.items()}
# unary ops printed in function-call form; square/cube print as ``^2``/``^3``
_CALL_UNARY = ("sqrt", "exp", "log", "abs", "neg", "expn", "cos")

DEFAULT_UNARY = ("square", "sqrt", "exp", "cube", "expn", "neg", "abs", "log")
DEFAULT_BINARY = ("mul", "sub", "add", "div", "pow")


@dataclass(frozen=True)
class FunctionSet:
    """Operators available to the search plus ranges for random constants.

    ``pow`` takes a constant exponent drawn from ``exponent_range``.
    """

    unary: tuple[str, ...] = DEFAULT_UNARY
    binary: tuple[str, ...] = DEFAULT_BINARY
    const_range: tuple[float, float] = (-10.0, 10.0)
    exponent_range: tuple[float, float] = (-3.0, 3.0)

    def __post_init__(self):
        if not self.unary and not self.binary:
            raise ValueError("function set is empty")
        for op in self.unary:
            if op not in UNARY_FUNCS:
                raise ValueError(f"unknown unary operator {op!r}")
        for op in self.binary:
            if op not in BINARY_FUNCS:
                raise ValueError(f"unknown binary operator {op!r}")
        lo, hi = self.const_range
        if not lo <= hi:
            raise ValueError("const_range must satisfy lo <= hi")

    @classmethod
    def with_cos(cls, **kwargs) -> "FunctionSet":
        return cls(unary=DEFAULT_UNARY + ("cos",), **kwargs)

    @property
    def ops(self) -> tuple[str, ...]:
        return self.unary + self.binary

    def arity(self, op: str) -> int:
        if op in self.unary:
            return 1
        if op in self.binary:
            return 2
        raise KeyError(op)

    def to_dict(self) -> dict:
        return {
            "unary": list(self.unary),
            "binary": list(self.binary),
            "const_range": list(self.const_range),
            "exponent_range": list(self.exponent_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionSet":
        return cls(
            unary=tuple(d.get("unary", DEFAULT_UNARY)),
            binary=tuple(d.get("binary", DEFAULT_BINARY)),
            const_range=tuple(d.get("const_range", (-10.0, 10.0))),
            exponent_range=tuple(d.get("exponent_range", (-3.0, 3.0))),
        )


# --------------------------------------------------------------------------
# tree wrapper

def _measure(node: Node) -> tuple[int, int, int]:
    """Return (depth, node_count, complexity) in one pass."""
    t = type(node)
    if t is Var or t is Const:
        return 1, 1, 1
    if t is Unary:
        d, n, c = _measure(node.child)
        return d + 1, n + 1, c + n + 1
    dl, nl, cl = _measure(node.left)
    dr, nr, cr = _measure(node.right)
    n = nl + nr + 1
    return max(dl, dr) + 1, n, cl + cr + n


class ExprTree:
    """Immutable gene tree with cached depth, size and complexity."""

    __slots__ = ("root", "depth", "node_count", "complexity", "_key")

    def __init__(self, root: Node):
        self.root = root
        self.depth, self.node_count, self.complexity = _measure(root)
        self._key = None

    @property
    def key(self) -> str:
        """Full-precision infix text; identical keys evaluate identically."""
        if self._key is None:
            self._key = to_infix(self, digits=None)
        return self._key

    def __eq__(self, other):
        return isinstance(other, ExprTree) and self.root == other.root

    def __hash__(self):
        return hash(self.root)

    def __repr__(self):
        return f"ExprTree({to_infix(self)})"

    def __str__(self):
        return to_infix(self)

    def variables(self) -> list[int]:
        """Variable indices in left-to-right order, with repeats."""
        return [n.index for _, n, _ in iter_nodes(self.root) if type(n) is Var]

    def constants(self) -> list[float]:
        return [n.value for _, n, _ in iter_nodes(self.root) if type(n) is Const]


Path = tuple[int, ...]


def iter_nodes(root: Node, path: Path = (), depth: int = 1) -> Iterator[tuple[Path, Node, int]]:
    """Pre-order walk yielding (path, node, depth); child slots are 0/1."""
    yield path, root, depth
    t = type(root)
    if t is Unary:
        yield from iter_nodes(root.child, path + (0,), depth + 1)
    elif t is Binary:
        yield from iter_nodes(root.left, path + (0,), depth + 1)
        yield from iter_nodes(root.right, path + (1,), depth + 1)


def mutable_points(root: Node) -> list[tuple[Path, Node, int]]:
    """Nodes eligible for subtree swap or replacement.

    Excludes the exponent slot of ``pow`` which must stay a constant leaf.
    """
    out = []

    def walk(node, path, depth):
        out.append((path, node, depth))
        t = type(node)
        if t is Unary:
            walk(node.child, path + (0,), depth + 1)
        elif t is Binary:
            walk(node.left, path + (0,), depth + 1)
            if node.op != "pow":
                walk(node.right, path + (1,), depth + 1)

    walk(root, (), 1)
    return out


def get_node(root: Node, path: Path) -> Node:
    node = root
    for step in path:
        if type(node) is Unary:
            node = node.child
        else:
            node = node.left if step == 0 else node.right
    return node


def replace_node(root: Node, path: Path, new: Node) -> Node:
    if not path:
        return new
    step, rest = path[0], path[1:]
    if type(root) is Unary:
        return Unary(root.op, replace_node(root.child, rest, new))
    if step == 0:
        return Binary(root.op, replace_node(root.left, rest, new), root.right)
    return Binary(root.op, root.left, replace_node(root.right, rest, new))


def subtree_height(node: Node) -> int:
    return _measure(node)[0]


# --------------------------------------------------------------------------
# random generation

@dataclass(frozen=True)
class GrowthConfig:
    """Parameters for random tree construction.

    method is ``"ramped"`` (half-and-half over depths 2..max_depth),
    ``"full"`` or ``"grow"``.
    """

    n_vars: int
    max_depth: int = 5
    method: str = "ramped"
    function_set: FunctionSet = field(default_factory=FunctionSet)
    const_prob: float = 0.1
    terminal_prob: float = 0.5


def _random_terminal(cfg: GrowthConfig, rng: np.random.Generator) -> Node:
    if rng.random() < cfg.const_prob:
        lo, hi = cfg.function_set.const_range
        return Const(float(rng.uniform(lo, hi)))
    return Var(int(rng.integers(cfg.n_vars)))


def _exponent(fs: FunctionSet, rng: np.random.Generator) -> Const:
    lo, hi = fs.exponent_range
    return Const(float(rng.uniform(lo, hi)))


def _build(cfg: GrowthConfig, rng, depth: int, max_depth: int, full: bool) -> Node:
    fs = cfg.function_set
    if depth >= max_depth:
        return _random_terminal(cfg, rng)
    if not full and depth > 1 and rng.random() < cfg.terminal_prob:
        return _random_terminal(cfg, rng)
    ops = fs.ops
    if full and depth < max_depth - 1:
        # a pow node here would put its exponent leaf above the full depth
        ops = tuple(op for op in ops if op != "pow") or ops
    op = ops[int(rng.integers(len(ops)))]
    if op in fs.unary:
        return Unary(op, _build(cfg, rng, depth + 1, max_depth, full))
    if op == "pow":
        return Binary(op, _build(cfg, rng, depth + 1, max_depth, full), _exponent(fs, rng))
    left = _build(cfg, rng, depth + 1, max_depth, full)
    right = _build(cfg, rng, depth + 1, max_depth, full)
    return Binary(op, left, right)


def random_subtree(cfg: GrowthConfig, rng: np.random.Generator, max_depth: int,
                   full: bool = False) -> Node:
    """Random node tree of height at most ``max_depth``."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    return _build(cfg, rng, 1, max_depth, full)


def random_tree(cfg: GrowthConfig, rng: np.random.Generator) -> ExprTree:
    if cfg.max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    if cfg.method == "full":
        full, depth = True, cfg.max_depth
    elif cfg.method == "grow":
        full, depth = False, cfg.max_depth
    elif cfg.method == "ramped":
        full = bool(rng.random() < 0.5)
        lo = min(2, cfg.max_depth)
        depth = int(rng.integers(lo, cfg.max_depth + 1))
    else:
        raise ValueError(f"unknown growth method {cfg.method!r}")
    return ExprTree(_build(cfg, rng, 1, depth, full))


# --------------------------------------------------------------------------
# evaluation

def _eval(node: Node, cols):
    t = type(node)
    if t is Var:
        return cols[node.index]
    if t is Const:
        return np.float64(node.value)
    if t is Unary:
        return UNARY_FUNCS[node.op](_eval(node.child, cols))
    return BINARY_FUNCS[node.op](_eval(node.left, cols), _eval(node.right, cols))


def input_columns(data) -> Sequence[np.ndarray]:
    """Column accessor for a Dataset or a (rows, vars) array."""
    cols = getattr(data, "input_columns", None)
    if cols is not None:
        return cols
    arr = np.asarray(data, dtype=float)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D (rows, vars) array")
    return arr.T


def _n_rows(cols) -> int:
    return len(cols[0]) if len(cols) else 0


def evaluate_columns(tree: ExprTree | Node, cols: Sequence[np.ndarray], n_rows: int | None = None) -> np.ndarray:
    root = tree.root if isinstance(tree, ExprTree) else tree
    n = _n_rows(cols) if n_rows is None else n_rows
    with np.errstate(all="ignore"):
        out = _eval(root, cols)
    out = np.asarray(out, dtype=float)
    if out.ndim == 0:
        out = np.full(n, float(out))
    return out


def evaluate_column(tree: ExprTree | Node, data) -> np.ndarray:
    """Evaluate a tree on every row of ``data``; non-finite values pass through."""
    cols = input_columns(data)
    n = getattr(data, "row_count", None)
    return evaluate_columns(tree, cols, n)


def evaluate(tree: ExprTree | Node, row) -> float:
    """Evaluate on one row. Shares the columnar code path bit-for-bit."""
    row = np.asarray(row, dtype=float).reshape(1, -1)
    return float(evaluate_columns(tree, row.T, 1)[0])


def complexity(tree: ExprTree | Node) -> int:
    """Sum of node counts over every subtree (each leaf counts 1)."""
    if isinstance(tree, ExprTree):
        return tree.complexity
    return _measure(tree)[2]


# --------------------------------------------------------------------------
# printing

def format_constant(value: float, digits: int | None = 3) -> str:
    """Render a float; the result always contains '.', 'e', 'inf' or 'nan'
    so it cannot be mistaken for the integer exponent of ``^2``/``^3``."""
    if digits is None:
        text = repr(float(value))
    else:
        text = format(float(value), f".{digits}g")
    if not any(c in text for c in ".ein"):
        text += ".0"
    return text


def var_name(index: int, names: Sequence[str] | None = None) -> str:
    if names is not None:
        return names[index]
    return f"x{index + 1}"


def _infix(node: Node, digits, names) -> str:
    t = type(node)
    if t is Var:
        return var_name(node.index, names)
    if t is Const:
        return format_constant(node.value, digits)
    if t is Unary:
        inner = _infix(node.child, digits, names)
        if node.op == "square":
            return f"({inner}^2)"
        if node.op == "cube":
            return f"({inner}^3)"
        return f"{node.op}({inner})"
    left = _infix(node.left, digits, names)
    right = _infix(node.right, digits, names)
    sym = _BINARY_SYMBOL[node.op]
    if sym in "+-":
        return f"({left} {sym} {right})"
    return f"({left}{sym}{right})"


def to_infix(tree: ExprTree | Node, digits: int | None = 3,
             names: Sequence[str] | None = None) -> str:
    """Fully parenthesized infix. ``digits=None`` prints constants exactly."""
    root = tree.root if isinstance(tree, ExprTree) else tree
    return _infix(root, digits, names)


# --------------------------------------------------------------------------
# parsing

class ParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at offset {position}")
        self.position = position


class UnknownOperatorError(ParseError):
    def __init__(self, token: str, position: int):
        super().__init__(f"unknown operator {token!r}", position)
        self.token = token


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<var>x\d+)(?![A-Za-z_\d])"
    r"|(?P<name>[A-Za-z_][A-Za-z_\d]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.lastgroup is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, fnset: FunctionSet):
        self.text = text
        self.fnset = fnset
        self.tokens = _tokenize(text)
        self.i = 0

    def _end_pos(self) -> int:
        # offset of the last character consumed before running out of input
        return max(len(self.text.rstrip()) - 1, 0)

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take(self):
        tok = self.peek()
        if tok is None:
            raise ParseError("unexpected end of input", self._end_pos())
        self.i += 1
        return tok

    def expect(self, value: str):
        tok = self.peek()
        if tok is None:
            raise ParseError(f"expected {value!r} but input ended", self._end_pos())
        if tok[1] != value:
            raise ParseError(f"expected {value!r}, found {tok[1]!r}", tok[2])
        self.i += 1

    def _check_op(self, op: str, token: str, pos: int):
        if op not in self.fnset.ops:
            raise UnknownOperatorError(token, pos)

    def parse(self) -> Node:
        if not self.tokens:
            raise ParseError("empty expression", 0)
        node = self.expr()
        tok = self.peek()
        if tok is not None:
            raise ParseError(f"unexpected token {tok[1]!r}", tok[2])
        return node

    def expr(self) -> Node:
        node = self.term()
        while (tok := self.peek()) is not None and tok[1] in ("+", "-"):
            self.i += 1
            op = _SYMBOL_BINARY[tok[1]]
            self._check_op(op, tok[1], tok[2])
            node = Binary(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while (tok := self.peek()) is not None and tok[1] in ("*", "/"):
            self.i += 1
            op = _SYMBOL_BINARY[tok[1]]
            self._check_op(op, tok[1], tok[2])
            node = Binary(op, node, self.factor())
        return node

    def factor(self) -> Node:
        base = self.signed()
        tok = self.peek()
        if tok is None or tok[1] != "^":
            return base
        self.i += 1
        nxt = self.peek()
        if nxt is not None and nxt[0] == "num" and nxt[1] in ("2", "3"):
            # bare integer exponents are the square/cube operators
            self.i += 1
            op = "square" if nxt[1] == "2" else "cube"
            self._check_op(op, "^" + nxt[1], tok[2])
            node = Unary(op, base)
            if (after := self.peek()) is not None and after[1] == "^":
                raise ParseError("chained '^' needs parentheses", after[2])
            return node
        self._check_op("pow", "^", tok[2])
        return Binary("pow", base, self.factor())

    def signed(self) -> Node:
        tok = self.peek()
        if tok is not None and tok[0] == "op" and tok[1] in ("+", "-"):
            self.i += 1
            inner = self.signed()
            if tok[1] == "+":
                return inner
            if type(inner) is Const:
                return Const(-inner.value)
            self._check_op("neg", "-", tok[2])
            return Unary("neg", inner)
        return self.primary()

    def primary(self) -> Node:
        kind, value, pos = self.take()
        if kind == "num":
            return Const(float(value))
        if kind == "var":
            k = int(value[1:])
            if k < 1:
                raise ParseError(f"variable {value!r} must be 1-based", pos)
            return Var(k - 1)
        if kind == "name":
            if value not in _CALL_UNARY:
                raise UnknownOperatorError(value, pos)
            self._check_op(value, value, pos)
            self.expect("(")
            inner = self.expr()
            self.expect(")")
            return Unary(value, inner)
        if value == "(":
            inner = self.expr()
            self.expect(")")
            return inner
        raise ParseError(f"unexpected token {value!r}", pos)


def parse_infix(text: str, fnset: FunctionSet | None = None) -> ExprTree:
    """Parse the printed grammar back into a tree.

    Raises ParseError (with ``position``) on malformed text and
    UnknownOperatorError for names outside ``fnset``.
    """
    fnset = FunctionSet.with_cos() if fnset is None else fnset
    return ExprTree(_Parser(text, fnset).parse())
