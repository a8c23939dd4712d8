"""Small symbolic expression engine.

Expressions are immutable, hash-consed trees: building the same structure
twice returns the same object, so equality is identity and Jacobian blocks
share subtrees freely.  Two families of constructors exist:

* the node classes' ``make`` methods build nodes verbatim (used by the parser
  so that printing round-trips), and
* the lower-case helpers (:func:`add`, :func:`mul`, ...) apply the light,
  value-preserving rewrites of :func:`simplify` while building.  All
  differentiation goes through the helpers.

Grammar accepted by :func:`parse`::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := primary (("^" | "**") unary)?
    primary := NUMBER | IDENT | IDENT "(" expr ("," expr)* ")" | "(" expr ")"
    NUMBER  := digits ["." digits] [("e" | "E") ["+" | "-"] digits]
    IDENT   := [A-Za-z_][A-Za-z0-9_]* "'"*

Trailing apostrophes denote time derivatives (``x1''`` is the second
derivative of ``x1``).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Symbol", "Expr", "Const", "Sym", "Add", "Mul", "Neg", "Div", "Pow", "Func",
    "ParseError", "EvaluationError", "UnknownSymbolError",
    "const", "sym", "add", "sub", "mul", "neg", "div", "power", "func",
    "ZERO", "ONE", "FUNCTIONS",
    "parse", "to_string", "diff_partial", "diff_total", "evaluate", "simplify",
    "free_symbols", "substitute", "compile_exprs", "count_nodes",
]

SYMBOL_KINDS = ("state", "algebraic-state", "parameter", "derivative", "time")


@dataclass(frozen=True)
class Symbol:
    """A named variable.

    Derivative symbols point at their underived ``base`` and carry the
    derivative ``order``; every other symbol has order 0 and no base.
    """

    name: str
    kind: str = "state"
    base: "Symbol | None" = None
    order: int = 0

    def __post_init__(self):
        if self.kind not in SYMBOL_KINDS:
            raise ValueError(f"unknown symbol kind {self.kind!r}")
        if self.kind == "derivative":
            if self.base is None or self.base.kind not in ("state", "algebraic-state", "parameter"):
                raise ValueError("derivative symbols need a state or parameter base")
            if self.order < 1:
                raise ValueError("derivative order must be positive")
        elif self.order != 0 or self.base is not None:
            raise ValueError("only derivative symbols carry a base and order")

    @property
    def root(self) -> "Symbol":
        return self.base if self.base is not None else self

    def __repr__(self):
        return f"Symbol({self.name!r})"

    def __str__(self):
        return self.name


class ParseError(ValueError):
    def __init__(self, message, position=None, text=None):
        self.position = position
        self.text = text
        if position is not None:
            message = f"{message} at position {position}"
        super().__init__(message)


class UnknownSymbolError(ParseError):
    pass


class EvaluationError(ArithmeticError):
    def __init__(self, message, subtree=None):
        self.subtree = subtree
        if subtree is not None:
            message = f"{message} in subexpression {to_string(subtree)!r}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# nodes

_INTERN: dict = {}


class Expr:
    """Base class of all expression nodes."""

    __slots__ = ("_key", "_hash", "__weakref__")
    prec = 5

    def __new__(cls, *args):
        raise TypeError("use the make() constructors or the helper functions")

    @classmethod
    def _intern(cls, key):
        node = _INTERN.get(key)
        if node is None:
            node = object.__new__(cls)
            node._key = key
            node._hash = hash(key)
            _INTERN[key] = node
        return node

    @property
    def children(self) -> tuple:
        return ()

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return self is other

    def __ne__(self, other):
        return self is not other

    def __str__(self):
        return to_string(self)

    def __repr__(self):
        return f"Expr({to_string(self)!r})"

    # arithmetic sugar, all simplifying
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, other):
        return power(self, _coerce(other))

    def __rpow__(self, other):
        return power(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __reduce__(self):
        return (parse_structure, (_to_structure(self),))


class Const(Expr):
    __slots__ = ()

    @classmethod
    def make(cls, value):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError("constants must be finite")
        if value == 0.0:
            value = 0.0  # fold -0.0
        return cls._intern(("const", value))

    @property
    def value(self) -> float:
        return self._key[1]

    @property
    def prec(self):
        return 3 if self.value < 0 else 5


class Sym(Expr):
    __slots__ = ()

    @classmethod
    def make(cls, symbol: Symbol):
        return cls._intern(("sym", symbol))

    @property
    def symbol(self) -> Symbol:
        return self._key[1]


class _Binary(Expr):
    __slots__ = ()
    tag = ""

    @classmethod
    def make(cls, a: Expr, b: Expr):
        return cls._intern((cls.tag, a, b))

    @property
    def left(self) -> Expr:
        return self._key[1]

    @property
    def right(self) -> Expr:
        return self._key[2]

    @property
    def children(self):
        return self._key[1:]


class Add(_Binary):
    __slots__ = ()
    tag = "add"
    prec = 1


class Mul(_Binary):
    __slots__ = ()
    tag = "mul"
    prec = 2


class Div(_Binary):
    __slots__ = ()
    tag = "div"
    prec = 2

    @classmethod
    def make(cls, a, b):
        if isinstance(b, Const) and b.value == 0.0:
            raise ZeroDivisionError("quotient with literal zero denominator")
        return cls._intern((cls.tag, a, b))


class Pow(_Binary):
    __slots__ = ()
    tag = "pow"
    prec = 4


class Neg(Expr):
    __slots__ = ()
    prec = 3

    @classmethod
    def make(cls, a: Expr):
        return cls._intern(("neg", a))

    @property
    def arg(self) -> Expr:
        return self._key[1]

    @property
    def children(self):
        return self._key[1:]


FUNCTIONS = {"sin": 1, "cos": 1, "tan": 1, "atan": 1, "atan2": 2, "exp": 1, "log": 1, "sqrt": 1}


class Func(Expr):
    __slots__ = ()

    @classmethod
    def make(cls, name: str, *args: Expr):
        if name not in FUNCTIONS:
            raise ValueError(f"unsupported function {name!r}")
        if len(args) != FUNCTIONS[name]:
            raise ValueError(f"{name} takes {FUNCTIONS[name]} argument(s)")
        return cls._intern(("func", name) + tuple(args))

    @property
    def name(self) -> str:
        return self._key[1]

    @property
    def args(self) -> tuple:
        return self._key[2:]

    @property
    def children(self):
        return self._key[2:]


def _coerce(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, Symbol):
        return Sym.make(value)
    return Const.make(value)


# ---------------------------------------------------------------------------
# simplifying constructors

ZERO = Const.make(0.0)
ONE = Const.make(1.0)
TWO = Const.make(2.0)


def const(value) -> Const:
    return Const.make(value)


def sym(symbol: Symbol) -> Sym:
    return Sym.make(symbol)


def _is(e, v):
    return isinstance(e, Const) and e.value == v


def _fold(value, fallback):
    if math.isfinite(value):
        return Const.make(value)
    return fallback()


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return _fold(a.value + b.value, lambda: Add.make(a, b))
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    if isinstance(b, Neg) and b.arg is a or isinstance(a, Neg) and a.arg is b:
        return ZERO
    if isinstance(b, Neg):
        return Add.make(a, b)
    if isinstance(b, Const) and b.value < 0:
        return Add.make(a, b)
    return Add.make(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if a is b:
        return ZERO
    return add(a, neg(b))


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const.make(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg.make(a)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return _fold(a.value * b.value, lambda: Mul.make(a, b))
    if isinstance(b, Const) and not isinstance(a, Const):
        a, b = b, a
    if isinstance(a, Const):
        if a.value == 0.0:
            return ZERO
        if a.value == 1.0:
            return b
        if a.value == -1.0:
            return neg(b)
        if isinstance(b, Mul) and isinstance(b.left, Const):
            return mul(Const.make(a.value * b.left.value), b.right)
        if isinstance(b, Neg):
            return mul(Const.make(-a.value), b.arg)
    if isinstance(a, Neg) and isinstance(b, Neg):
        return mul(a.arg, b.arg)
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    return Mul.make(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is(b, 0.0):
        raise ZeroDivisionError("division by the zero constant")
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return _fold(a.value / b.value, lambda: Div.make(a, b))
    if a is b:
        return ONE
    if isinstance(a, Neg):
        return neg(div(a.arg, b))
    return Div.make(a, b)


def power(a: Expr, b: Expr) -> Expr:
    if _is(b, 0.0):
        return ONE
    if _is(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            return _fold(math.pow(a.value, b.value), lambda: Pow.make(a, b))
        except (ValueError, OverflowError):
            return Pow.make(a, b)
    if _is(a, 0.0) and isinstance(b, Const) and b.value > 0:
        return ZERO
    if _is(a, 1.0):
        return ONE
    return Pow.make(a, b)


def func(name: str, *args: Expr) -> Expr:
    if all(isinstance(x, Const) for x in args):
        try:
            return _fold(_MATH[name](*(x.value for x in args)), lambda: Func.make(name, *args))
        except (ValueError, OverflowError, ZeroDivisionError):
            pass
    return Func.make(name, *args)


_MATH = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "atan": math.atan,
    "atan2": math.atan2, "exp": math.exp, "log": math.log, "sqrt": math.sqrt,
}


def _rebuild(e: Expr, kids: Sequence[Expr]) -> Expr:
    if isinstance(e, Add):
        return add(*kids)
    if isinstance(e, Mul):
        return mul(*kids)
    if isinstance(e, Div):
        return div(*kids)
    if isinstance(e, Pow):
        return power(*kids)
    if isinstance(e, Neg):
        return neg(kids[0])
    if isinstance(e, Func):
        return func(e.name, *kids)
    return e


# ---------------------------------------------------------------------------
# traversal helpers


def _postorder(roots: Iterable[Expr]) -> list[Expr]:
    seen = set()
    order = []
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in reversed(node.children):
                if id(child) not in seen:
                    stack.append((child, False))
    return order


def count_nodes(*roots: Expr) -> int:
    """Number of distinct nodes in the DAG spanned by ``roots``."""
    return len(_postorder(roots))


def free_symbols(e: Expr) -> set[Symbol]:
    return {n.symbol for n in _postorder([e]) if isinstance(n, Sym)}


def simplify(e: Expr) -> Expr:
    """Re-apply the construction rewrites bottom-up.

    Only sound local rules: zero and unit elimination, double negation and
    constant folding.  The numeric value is preserved for every binding.
    """
    memo: dict[int, Expr] = {}
    for node in _postorder([e]):
        kids = [memo[id(c)] for c in node.children]
        memo[id(node)] = _rebuild(node, kids) if kids else node
    return memo[id(e)]


def substitute(e: Expr, mapping: Mapping[Symbol, Expr | float]) -> Expr:
    """Replace symbols by expressions (or numbers), simplifying as it goes."""
    repl = {s: _coerce(v) for s, v in mapping.items()}
    memo: dict[int, Expr] = {}
    for node in _postorder([e]):
        if isinstance(node, Sym):
            memo[id(node)] = repl.get(node.symbol, node)
        elif node.children:
            memo[id(node)] = _rebuild(node, [memo[id(c)] for c in node.children])
        else:
            memo[id(node)] = node
    return memo[id(e)]


# ---------------------------------------------------------------------------
# differentiation


def diff_partial(e: Expr, s: Symbol, memo: dict | None = None) -> Expr:
    """Exact partial derivative of ``e`` with respect to ``s``.

    Every other symbol is independent of ``s``.  ``memo`` may be shared
    between calls that differentiate with respect to the same symbol.
    """
    if memo is None:
        memo = {}
    for node in _postorder([e]):
        if id(node) in memo:
            continue
        memo[id(node)] = _d_node(node, lambda c: memo[id(c)], s)
    return memo[id(e)]


def _d_node(node: Expr, d: Callable[[Expr], Expr], s: Symbol | None) -> Expr:
    """Derivative of one node given derivatives of its children.

    With ``s`` None the caller handles symbols (total derivative).
    """
    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Sym):
        return ONE if node.symbol == s else ZERO
    if isinstance(node, Add):
        return add(d(node.left), d(node.right))
    if isinstance(node, Neg):
        return neg(d(node.arg))
    if isinstance(node, Mul):
        a, b = node.left, node.right
        return add(mul(d(a), b), mul(a, d(b)))
    if isinstance(node, Div):
        a, b = node.left, node.right
        da, db = d(a), d(b)
        if db is ZERO:
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, TWO))
    if isinstance(node, Pow):
        a, b = node.left, node.right
        da, db = d(a), d(b)
        if db is ZERO:
            if da is ZERO:
                return ZERO
            if isinstance(b, Const):
                return mul(mul(b, power(a, Const.make(b.value - 1.0))), da)
            return mul(mul(b, power(a, sub(b, ONE))), da)
        term = mul(db, func("log", a))
        if da is not ZERO:
            term = add(term, div(mul(b, da), a))
        return mul(node, term)
    if isinstance(node, Func):
        name = node.name
        if name == "atan2":
            y, x = node.args
            dy, dx = d(y), d(x)
            num = sub(mul(x, dy), mul(y, dx))
            return div(num, add(power(x, TWO), power(y, TWO)))
        (u,) = node.args
        du = d(u)
        if du is ZERO:
            return ZERO
        if name == "sin":
            outer = func("cos", u)
        elif name == "cos":
            outer = neg(func("sin", u))
        elif name == "tan":
            outer = add(ONE, power(node, TWO))
        elif name == "atan":
            return div(du, add(ONE, power(u, TWO)))
        elif name == "exp":
            outer = node
        elif name == "log":
            return div(du, u)
        elif name == "sqrt":
            return div(du, mul(TWO, node))
        else:  # pragma: no cover
            raise ValueError(name)
        return mul(outer, du)
    raise TypeError(f"unknown node {node!r}")  # pragma: no cover


def diff_total(
    e: Expr,
    next_symbol: Callable[[Symbol], Symbol],
    zero_rate: Iterable[Symbol] = (),
    memo: dict | None = None,
) -> Expr:
    """Total time derivative of ``e``.

    ``next_symbol(s)`` returns the symbol one derivative order above ``s``
    (usually :meth:`SymbolTable.next` of the owning model).  Symbols listed in
    ``zero_rate`` have vanishing time derivative; a symbol of kind ``time``
    differentiates to one.  No model dynamics are substituted.
    """
    zero_rate = frozenset(zero_rate)
    if memo is None:
        memo = {}

    def d_sym(symbol):
        if symbol in zero_rate or symbol.root in zero_rate:
            return ZERO
        if symbol.kind == "time":
            return ONE
        return Sym.make(next_symbol(symbol))

    for node in _postorder([e]):
        if id(node) in memo:
            continue
        if isinstance(node, Sym):
            memo[id(node)] = d_sym(node.symbol)
        else:
            memo[id(node)] = _d_node(node, lambda c: memo[id(c)], None)
    return memo[id(e)]


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expr, binding: Mapping[Symbol, float]) -> float:
    """IEEE double evaluation of ``e``.

    Raises :class:`EvaluationError` for unbound symbols and for domain errors
    or non-finite intermediate results, naming the offending subtree.
    """
    vals: dict[int, float] = {}
    for node in _postorder([e]):
        if isinstance(node, Const):
            v = node.value
        elif isinstance(node, Sym):
            try:
                v = float(binding[node.symbol])
            except KeyError:
                raise EvaluationError(f"unbound symbol {node.symbol.name!r}") from None
        else:
            args = [vals[id(c)] for c in node.children]
            try:
                v = _apply(node, args)
            except (ValueError, ZeroDivisionError, OverflowError) as exc:
                raise EvaluationError(f"domain error ({exc})", node) from None
        if not math.isfinite(v):
            raise EvaluationError("non-finite value", node)
        vals[id(node)] = v
    return vals[id(e)]


def _apply(node, args):
    if isinstance(node, Add):
        return args[0] + args[1]
    if isinstance(node, Mul):
        return args[0] * args[1]
    if isinstance(node, Div):
        return args[0] / args[1]
    if isinstance(node, Neg):
        return -args[0]
    if isinstance(node, Pow):
        a, b = args
        if b.is_integer() and abs(b) < 2**31:
            return float(a ** int(b)) if (a != 0.0 or b > 0) else 1.0 / a ** int(-b)
        return math.pow(a, b)
    return _MATH[node.name](*args)


_NP_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "atan": np.arctan,
    "atan2": np.arctan2, "exp": np.exp, "log": np.log, "sqrt": np.sqrt,
}


def compile_exprs(
    exprs: Sequence[Expr],
    symbols: Sequence[Symbol],
    constants: Mapping[Symbol, float] | None = None,
    vectorized: bool = False,
):
    """Compile expressions into one Python function over a shared DAG.

    The returned callable takes a sequence of values ordered like
    ``symbols`` and returns a float64 array of the expression values.  With
    ``vectorized`` each argument may be an array (numpy broadcasting); the
    scalar path uses :mod:`math` and raises on domain errors.
    """
    constants = dict(constants or {})
    index = {s: i for i, s in enumerate(symbols)}
    lines = []
    names: dict[int, str] = {}
    fns = _NP_FUNCS if vectorized else _MATH
    for k, node in enumerate(_postorder(exprs)):
        if isinstance(node, Const):
            names[id(node)] = repr(node.value)
            continue
        if isinstance(node, Sym):
            s = node.symbol
            if s in index:
                names[id(node)] = f"_a[{index[s]}]"
            elif s in constants:
                names[id(node)] = repr(float(constants[s]))
            else:
                raise EvaluationError(f"unbound symbol {s.name!r}")
            continue
        c = [names[id(x)] for x in node.children]
        if isinstance(node, Add):
            rhs = f"{c[0]} + {c[1]}"
        elif isinstance(node, Mul):
            rhs = f"{c[0]} * {c[1]}"
        elif isinstance(node, Div):
            rhs = f"{c[0]} / {c[1]}"
        elif isinstance(node, Neg):
            rhs = f"-{c[0]}"
        elif isinstance(node, Pow):
            b = node.right
            if isinstance(b, Const) and b.value.is_integer() and abs(b.value) <= 64:
                k_int = int(b.value)
                rhs = f"({c[0]}) ** {k_int}" if k_int > 0 else f"1.0 / ({c[0]}) ** {-k_int}"
            else:
                rhs = f"_pow({c[0]}, {c[1]})"
        else:
            rhs = f"_f_{node.name}({', '.join(c)})"
        name = f"t{k}"
        lines.append(f"    {name} = {rhs}")
        names[id(node)] = name
    out = ", ".join(names[id(e)] for e in exprs)
    src = "def _compiled(_a):\n" + "\n".join(lines) + f"\n    return ({out}{',' if len(exprs) == 1 else ''})\n"
    ns = {f"_f_{k}": v for k, v in fns.items()}
    ns["_pow"] = np.power if vectorized else math.pow
    exec(compile(src, "<daeident-compiled>", "exec"), ns)
    raw = ns["_compiled"]
    n_out = len(exprs)

    if vectorized:
        def run(values):
            args = [np.asarray(v, dtype=float) for v in values]
            with np.errstate(all="ignore"):
                res = raw(args) if n_out else ()
            shape = np.broadcast_shapes(*(a.shape for a in args)) if args else ()
            return np.array([np.broadcast_to(r, shape) for r in res], dtype=float)
    else:
        def run(values):
            vals = [float(v) for v in values]
            try:
                res = raw(vals) if n_out else ()
            except (ValueError, ZeroDivisionError, OverflowError):
                binding = dict(constants)
                binding.update(zip(symbols, vals))
                for ex in exprs:
                    evaluate(ex, binding)
                raise  # pragma: no cover
            return np.array(res, dtype=float)
    run.source = src
    run.symbols = tuple(symbols)
    return run


# ---------------------------------------------------------------------------
# printing


def _fmt_const(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_string(e: Expr) -> str:
    """Infix rendering that :func:`parse` reads back to the same tree."""
    memo: dict[int, str] = {}
    for node in _postorder([e]):
        memo[id(node)] = _str_node(node, memo)
    return memo[id(e)]


def _wrap(child, s, cond):
    return f"({s})" if cond else s


def _str_node(node, memo):
    if isinstance(node, Const):
        return _fmt_const(node.value)
    if isinstance(node, Sym):
        return node.symbol.name
    if isinstance(node, Func):
        return f"{node.name}({', '.join(memo[id(a)] for a in node.args)})"
    if isinstance(node, Neg):
        a = node.arg
        return "-" + _wrap(a, memo[id(a)], a.prec < 3 or isinstance(a, Const))
    a, b = node.left, node.right
    sa, sb = memo[id(a)], memo[id(b)]
    if isinstance(node, Add):
        if isinstance(b, Neg):
            inner = b.arg
            return f"{sa} - " + _wrap(inner, memo[id(inner)], inner.prec <= 1)
        return f"{sa} + " + _wrap(b, sb, b.prec <= 1)
    if isinstance(node, (Mul, Div)):
        op = "*" if isinstance(node, Mul) else "/"
        return _wrap(a, sa, a.prec < 2) + op + _wrap(b, sb, b.prec <= 2)
    if isinstance(node, Pow):
        return _wrap(a, sa, a.prec <= 4) + "^" + _wrap(b, sb, b.prec < 5 or isinstance(b, Const) and b.value < 0)
    raise TypeError(node)  # pragma: no cover


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z0-9_]*'*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


def _tokenize(text):
    pos = 0
    tokens = []
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos, text)
        start = m.start(m.lastgroup)
        tokens.append((m.lastgroup, m.group(m.lastgroup), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, resolve):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.resolve = resolve

    def peek(self):
        return self.tokens[self.i]

    def take(self, value=None):
        tok = self.tokens[self.i]
        if value is not None and tok[1] != value:
            what = tok[1] or "end of input"
            raise ParseError(f"expected {value!r}, found {what!r}", tok[2], self.text)
        self.i += 1
        return tok

    def parse(self):
        e = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected token {tok[1]!r}", tok[2], self.text)
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            e = Add.make(e, rhs if op == "+" else Neg.make(rhs))
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/"):
            tok = self.take()
            rhs = self.unary()
            if tok[1] == "*":
                e = Mul.make(e, rhs)
            else:
                if isinstance(rhs, Const) and rhs.value == 0.0:
                    raise ParseError("division by literal zero", tok[2], self.text)
                e = Div.make(e, rhs)
        return e

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            nxt = self.tokens[self.i]
            after = self.tokens[self.i + 1]
            if nxt[0] == "num" and after[1] not in ("^", "**"):
                self.take()
                return Const.make(-float(nxt[1]))
            return Neg.make(self.unary())
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.primary()
        if self.peek()[1] in ("^", "**"):
            self.take()
            return Pow.make(base, self.unary())
        return base

    def primary(self):
        kind, value, pos = self.take()
        if kind == "num":
            return Const.make(float(value))
        if kind == "id":
            if self.peek()[1] == "(":
                if value not in FUNCTIONS:
                    raise ParseError(f"unsupported function {value!r}", pos, self.text)
                self.take("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.take(")")
                if len(args) != FUNCTIONS[value]:
                    raise ParseError(f"{value} takes {FUNCTIONS[value]} argument(s)", pos, self.text)
                return Func.make(value, *args)
            symbol = self.resolve(value)
            if symbol is None:
                raise UnknownSymbolError(f"unknown symbol {value!r}", pos, self.text)
            return Sym.make(symbol)
        if value == "(":
            e = self.expr()
            self.take(")")
            return e
        raise ParseError(f"unexpected token {value or 'end of input'!r}", pos, self.text)


def parse(text: str, symbols) -> Expr:
    """Parse infix ``text`` over the symbols known to ``symbols``.

    ``symbols`` is either a mapping ``name -> Symbol`` or an object with a
    ``resolve(name)`` method returning a Symbol or None (e.g. a model's
    :class:`~daeident.model.SymbolTable`, which also mints derivative
    symbols for primed names).
    """
    if hasattr(symbols, "resolve"):
        resolve = symbols.resolve
    else:
        resolve = symbols.get
    return _Parser(text, resolve).parse()


# pickling support: rebuild through make() so interning survives


def _to_structure(e):
    memo = {}
    for node in _postorder([e]):
        if isinstance(node, Const):
            memo[id(node)] = ("const", node.value)
        elif isinstance(node, Sym):
            memo[id(node)] = ("sym", node.symbol)
        elif isinstance(node, Func):
            memo[id(node)] = ("func", node.name) + tuple(memo[id(a)] for a in node.args)
        else:
            memo[id(node)] = (node._key[0],) + tuple(memo[id(c)] for c in node.children)
    return memo[id(e)]


_MAKERS = {"add": Add.make, "mul": Mul.make, "div": Div.make, "pow": Pow.make, "neg": Neg.make}


def parse_structure(struct):
    tag = struct[0]
    if tag == "const":
        return Const.make(struct[1])
    if tag == "sym":
        return Sym.make(struct[1])
    if tag == "func":
        return Func.make(struct[1], *(parse_structure(a) for a in struct[2:]))
    return _MAKERS[tag](*(parse_structure(a) for a in struct[1:]))
