"""Strongly-typed expression trees over exterior-calculus primitives.

Trees are the genomes of the model search: every node carries a type
(float, or a cochain kind), and all construction paths -- random
generation, parsing, genetic operators -- preserve type correctness.
Evaluation is bottom-up over numpy values; a reverse-mode pass provides
the exact gradient of any float-rooted tree with respect to a cochain
terminal, which the energy minimizer consumes.

Primitive names follow the ``<op><P|D><degree><S|V|T>`` scheme, e.g.
``dP0S`` is the coboundary on primal scalar 0-cochains and ``InnD0T`` the
inner product of dual tensor 0-cochains.  ``St<J><R>``/``InvSt<J><R>``
map primal J-cochains to dual (n-J)-cochains and back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cochain as C
from .cochain import Cochain, CochainKind, CochainTypeError

FLOAT = "float"


class ExprError(ValueError):
    pass


class GenerationError(ExprError):
    pass


class NonFiniteEnergyError(ArithmeticError):
    """Forward value is not finite (distinct from solver non-convergence)."""


@dataclass(frozen=True)
class Primitive:
    name: str
    arg_types: tuple
    return_type: object
    fn: object
    vjp: object

    @property
    def arity(self):
        return len(self.arg_types)


@dataclass(frozen=True)
class Terminal:
    name: str
    type: object


@dataclass(frozen=True)
class Constant:
    value: float


class TypedExpr:
    """Immutable expression tree node."""

    __slots__ = ("op", "children", "rtype", "length", "height")

    def __init__(self, op, children=()):
        self.op = op
        self.children = tuple(children)
        if isinstance(op, Primitive):
            if len(self.children) != op.arity:
                raise ExprError(f"{op.name} expects {op.arity} arguments")
            for i, (ch, t) in enumerate(zip(self.children, op.arg_types)):
                if ch.rtype != t:
                    raise CochainTypeError(
                        f"argument {i} of {op.name}: expected {_tname(t)}, "
                        f"got {_tname(ch.rtype)}")
            self.rtype = op.return_type
        elif isinstance(op, Terminal):
            self.rtype = op.type
        elif isinstance(op, Constant):
            self.rtype = FLOAT
        else:
            raise ExprError(f"bad node {op!r}")
        self.length = 1 + sum(ch.length for ch in self.children)
        self.height = 1 + max((ch.height for ch in self.children), default=-1)

    def __repr__(self):
        return f"TypedExpr({to_sexpr(self)})"

    def __eq__(self, other):
        return isinstance(other, TypedExpr) and to_sexpr(self) == to_sexpr(other)

    def __hash__(self):
        return hash(to_sexpr(self))

    def iter_nodes(self):
        """Preorder traversal yielding (position, node)."""
        stack = [self]
        pos = 0
        while stack:
            node = stack.pop()
            yield pos, node
            pos += 1
            stack.extend(reversed(node.children))

    def node_at(self, position: int) -> "TypedExpr":
        for pos, node in self.iter_nodes():
            if pos == position:
                return node
        raise IndexError(position)

    def replace_at(self, position: int, new: "TypedExpr") -> "TypedExpr":
        """Return a copy with the subtree at preorder `position` swapped."""
        counter = [0]

        def rec(node):
            pos = counter[0]
            counter[0] += 1
            if pos == position:
                if new.rtype != node.rtype:
                    raise CochainTypeError(
                        f"replacement at {position}: {_tname(new.rtype)} != "
                        f"{_tname(node.rtype)}")
                counter[0] += node.length - 1
                return new
            if pos + node.length <= position:
                counter[0] += node.length - 1
                return node
            children = [rec(ch) for ch in node.children]
            return TypedExpr(node.op, children)

        return rec(self)

    def terminal_names(self):
        return {n.op.name for _, n in self.iter_nodes() if isinstance(n.op, Terminal)}


def _tname(t):
    return "float" if t == FLOAT else str(t)


def type_check(expr: TypedExpr) -> bool:
    """Re-validate an entire tree (construction already enforces this)."""
    try:
        for _, node in expr.iter_nodes():
            TypedExpr(node.op, node.children)
    except (CochainTypeError, ExprError):
        return False
    return True


# -- printing / parsing ---------------------------------------------------------


def _fmt_const(v: float) -> str:
    return format(float(v), ".17g")


def to_sexpr(expr: TypedExpr) -> str:
    op = expr.op
    if isinstance(op, Constant):
        return _fmt_const(op.value)
    if isinstance(op, Terminal):
        return op.name
    return "(" + " ".join([op.name] + [to_sexpr(c) for c in expr.children]) + ")"


print_expr = to_sexpr

# accepted spellings for the float arithmetic primitives
_ALIASES = {"AddF": "Add", "SubF": "Sub", "DivF": "Div"}


def parse(text: str, registry: "PrimitiveRegistry") -> TypedExpr:
    """Parse an S-expression against a registry; type errors name the node."""
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        else:
            j = i
            while j < len(text) and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    pos = [0]

    def next_token():
        if pos[0] >= len(tokens):
            raise ExprError("unexpected end of input")
        tok = tokens[pos[0]]
        pos[0] += 1
        return tok

    def atom(tok, at):
        if tok in registry.terminals:
            return TypedExpr(Terminal(tok, registry.terminals[tok]))
        try:
            return TypedExpr(Constant(float(tok)))
        except ValueError:
            raise ExprError(f"unknown terminal {tok!r} at position {at}") from None

    def expr_rule(path):
        tok, at = next_token()
        if tok == ")":
            raise ExprError(f"unexpected ')' at position {at}")
        if tok != "(":
            return atom(tok, at)
        name, at = next_token()
        if name in ("(", ")"):
            raise ExprError(f"expected a primitive name at position {at}")
        prim = registry.primitives.get(_ALIASES.get(name, name))
        if prim is None:
            raise ExprError(f"unknown primitive {name!r} at position {at}")
        children = []
        while True:
            if pos[0] >= len(tokens):
                raise ExprError(f"missing ')' for {name} at position {at}")
            if tokens[pos[0]][0] == ")":
                pos[0] += 1
                break
            children.append(expr_rule(path + [name]))
        try:
            return TypedExpr(prim, children)
        except (CochainTypeError, ExprError) as exc:
            raise CochainTypeError(
                f"at node path {'/'.join(path + [name])}: {exc}") from None

    out = expr_rule([])
    if pos[0] != len(tokens):
        raise ExprError(f"trailing input at position {tokens[pos[0]][1]}")
    return out


# -- primitive implementations ---------------------------------------------------

def _sum_rank(arr, rank):
    axes = tuple(range(-1 - C._RANK_AXES[rank], 0))
    return arr.sum(axis=axes)


def _exp_g(g, rank):
    """Reshape a float adjoint for broadcasting against cochain coefficients."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 0:
        return g
    return g.reshape(g.shape + (1,) * (1 + C._RANK_AXES[rank]))


def _unbroadcast(adj, val):
    """Reduce an adjoint to the shape of a float value (sum over broadcast axes)."""
    shape = np.shape(val)
    adj = np.asarray(adj, dtype=np.float64)
    if adj.shape == shape:
        return adj
    extra = adj.ndim - len(shape)
    if extra > 0:
        adj = adj.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and adj.shape[ax] != 1:
            adj = adj.sum(axis=ax, keepdims=True)
    return adj if shape else float(adj)


def _float_prim(name, arity, fn, vjp):
    return Primitive(name, (FLOAT,) * arity, FLOAT, fn, vjp)


def _build_float_ops():
    ops = {}

    def mk(name, arity, fn, vjp):
        ops[name] = _float_prim(name, arity, fn, vjp)

    mk("Add", 2, lambda a, b: a + b,
       lambda vals, out, g: (_unbroadcast(g, vals[0]), _unbroadcast(g, vals[1])))
    mk("Sub", 2, lambda a, b: a - b,
       lambda vals, out, g: (_unbroadcast(g, vals[0]), _unbroadcast(-g, vals[1])))
    mk("MulF", 2, lambda a, b: a * b,
       lambda vals, out, g: (_unbroadcast(g * vals[1], vals[0]),
                             _unbroadcast(g * vals[0], vals[1])))
    mk("Div", 2, lambda a, b: a / b,
       lambda vals, out, g: (_unbroadcast(g / vals[1], vals[0]),
                             _unbroadcast(-g * vals[0] / (vals[1] * vals[1]),
                                          vals[1])))
    mk("SinF", 1, np.sin, lambda vals, out, g: (g * np.cos(vals[0]),))
    mk("CosF", 1, np.cos, lambda vals, out, g: (-g * np.sin(vals[0]),))
    mk("ArcsinF", 1, np.arcsin,
       lambda vals, out, g: (g / np.sqrt(1.0 - vals[0] * vals[0]),))
    mk("ArccosF", 1, np.arccos,
       lambda vals, out, g: (-g / np.sqrt(1.0 - vals[0] * vals[0]),))
    mk("ExpF", 1, np.exp, lambda vals, out, g: (g * out,))
    mk("LogF", 1, np.log, lambda vals, out, g: (g / vals[0],))
    mk("InvF", 1, lambda a: 1.0 / a, lambda vals, out, g: (-g * out * out,))
    mk("SqrtF", 1, np.sqrt, lambda vals, out, g: (g / (2.0 * out),))
    mk("SquareF", 1, np.square, lambda vals, out, g: (2.0 * g * vals[0],))
    return ops


FLOAT_OPS = _build_float_ops()

_COCHAIN_FN_VJP = {
    "sin": lambda x, out, g: g * np.cos(x),
    "cos": lambda x, out, g: -g * np.sin(x),
    "arcsin": lambda x, out, g: g / np.sqrt(1.0 - x * x),
    "arccos": lambda x, out, g: -g / np.sqrt(1.0 - x * x),
    "exp": lambda x, out, g: g * out,
    "log": lambda x, out, g: g / x,
    "sqrt": lambda x, out, g: g / (2.0 * out),
    "square": lambda x, out, g: 2.0 * g * x,
}


def _lin_vjp(forward_adjoint):
    """vjp of a linear cochain map given the adjoint coefficient map."""
    def vjp(vals, out, g):
        return (forward_adjoint(vals[0], g),)
    return vjp


def _coboundary_adj(c, g):
    K = c.complex
    return C._matmul(K.boundary[c.kind.degree + 1], g)


def _dual_coboundary_adj(c, g):
    K = c.complex
    return -C._matmul(K.boundary_T(K.dim - c.kind.degree), g)


def _codiff_adj(c, g):
    K, p = c.complex, c.kind.degree
    return K.hodge_diag(p) * C._matmul(
        K.boundary_T(p), K.hodge_diag(p - 1, inverse=True) * g)


def _dual_codiff_adj(c, g):
    K, q = c.complex, c.kind.degree
    n = K.dim
    return -K.hodge_diag(n - q, inverse=True) * C._matmul(
        K.boundary[n - q + 1], K.hodge_diag(n - q + 1) * g)


def _star_adj(c, g):
    return g * C._expand(c.complex.hodge_diag(c.kind.degree), c.kind.rank)


def _inv_star_adj(c, g):
    K = c.complex
    p = K.dim - c.kind.degree
    return g * C._expand(K.hodge_diag(p, inverse=True), c.kind.rank)


def _inner_vjp(vals, out, g):
    c1, c2 = vals
    w = C._expand(C.inner_weights(c1.complex, c1.kind), c1.kind.rank)
    ge = _exp_g(g, c1.kind.rank)
    return (ge * w * c2.coeffs, ge * w * c1.coeffs)


def _mul_vjp(vals, out, g):
    c, a = vals
    rank = c.kind.rank
    return (g * C._expand_scalar(a, rank),
            _unbroadcast(_sum_rank(g * c.coeffs, rank), a))


def _invmul_vjp(vals, out, g):
    c, a = vals
    rank = c.kind.rank
    ae = C._expand_scalar(a, rank)
    return (g / ae,
            _unbroadcast(-_sum_rank(g * c.coeffs, rank) / (np.asarray(a) ** 2), a))


def _cochmul_vjp(vals, out, g):
    c1, c2 = vals
    return (g * c2.coeffs, g * c1.coeffs)


def _mulv_vjp(vals, out, g):
    s, t = vals
    return ((g * t.coeffs).sum(axis=(-1, -2)), s.coeffs[..., None, None] * g)


def _addc_vjp(vals, out, g):
    return (g, g)


def _subc_vjp(vals, out, g):
    return (g, -g)


def _tran_vjp(vals, out, g):
    return (np.swapaxes(g, -1, -2),)


def _sym_vjp(vals, out, g):
    return (0.5 * (g + np.swapaxes(g, -1, -2)),)


def _tr_vjp(vals, out, g):
    n = vals[0].complex.dim
    return (g[..., None, None] * np.eye(n),)


def _fn_prim(fname):
    def fn(c):
        return C.cochain_fn(fname, c)

    def vjp(vals, out, g):
        with np.errstate(all="ignore"):
            return (_COCHAIN_FN_VJP[fname](vals[0].coeffs, out.coeffs, g),)
    return fn, vjp


# -- registry --------------------------------------------------------------------


@dataclass
class PrimitiveRegistry:
    """Per-problem set of primitives, typed terminals and constants."""

    name: str
    dim: int
    primitives: dict = field(default_factory=dict)
    terminals: dict = field(default_factory=dict)   # name -> type
    constants: tuple = ()
    required_terminals: frozenset = frozenset()
    _tables: dict = field(default_factory=dict, repr=False)

    def add(self, prim: Primitive):
        if prim.name in self.primitives:
            raise ExprError(f"duplicate primitive {prim.name}")
        self.primitives[prim.name] = prim

    def terminal_expr(self, name: str) -> TypedExpr:
        return TypedExpr(Terminal(name, self.terminals[name]))

    # generation support ---------------------------------------------------

    def _gen_tables(self):
        if self._tables:
            return self._tables
        returns: dict = {}
        for p in self.primitives.values():
            returns.setdefault(p.return_type, []).append(p)
        leaves: dict = {}
        for name, t in self.terminals.items():
            leaves.setdefault(t, []).append(Terminal(name, t))
        for v in self.constants:
            leaves.setdefault(FLOAT, []).append(Constant(float(v)))
        # minimal height needed to close a tree of each type
        depth = {t: 0 for t in leaves}
        changed = True
        while changed:
            changed = False
            for t, prims in returns.items():
                for p in prims:
                    if all(a in depth for a in p.arg_types):
                        d = 1 + max((depth[a] for a in p.arg_types), default=0)
                        if d < depth.get(t, np.inf):
                            depth[t] = d
                            changed = True
        self._tables = {"returns": returns, "leaves": leaves, "depth": depth}
        return self._tables

    def min_depth(self, t):
        return self._gen_tables()["depth"].get(t, np.inf)

    def feasible_primitives(self, t, budget):
        tables = self._gen_tables()
        depth = tables["depth"]
        return [p for p in tables["returns"].get(t, ())
                if all(depth.get(a, np.inf) <= budget for a in p.arg_types)]

    def leaves_of(self, t):
        return self._gen_tables()["leaves"].get(t, ())


_SCALAR_FN_NAMES = (("Sin", "sin"), ("Arcsin", "arcsin"), ("Cos", "cos"),
                    ("Arccos", "arccos"), ("Exp", "exp"), ("Log", "log"))


def _cochain_type(x, j, r):
    return CochainKind("primal" if x == "P" else "dual", j,
                       {"S": "scalar", "V": "vector", "T": "tensor"}[r])


def _add_scalar_family(reg: PrimitiveRegistry, n: int):
    """d, del, trig/exp/log, Sqrt/Square, InvMul, CochMul for every X, J."""
    for x in "PD":
        for j in range(n + 1):
            t = _cochain_type(x, j, "S")
            tag = f"{x}{j}S"
            if j < n:
                if x == "P":
                    reg.add(Primitive(f"d{tag}", (t,), _cochain_type(x, j + 1, "S"),
                                      C.coboundary, _lin_vjp(_coboundary_adj)))
                else:
                    reg.add(Primitive(f"d{tag}", (t,), _cochain_type(x, j + 1, "S"),
                                      C.dual_coboundary, _lin_vjp(_dual_coboundary_adj)))
            if j >= 1:
                if x == "P":
                    reg.add(Primitive(f"del{tag}", (t,), _cochain_type(x, j - 1, "S"),
                                      C.codifferential, _lin_vjp(_codiff_adj)))
                else:
                    reg.add(Primitive(f"del{tag}", (t,), _cochain_type(x, j - 1, "S"),
                                      C.dual_codifferential, _lin_vjp(_dual_codiff_adj)))
            for prefix, fname in _SCALAR_FN_NAMES:
                fn, vjp = _fn_prim(fname)
                reg.add(Primitive(f"{prefix}{tag}", (t,), t, fn, vjp))
            reg.add(Primitive(f"InvMul{tag}", (t, FLOAT), t,
                              lambda c, a: C.scale(c, 1.0 / np.asarray(a)),
                              _invmul_vjp))
            reg.add(Primitive(f"CochMul{tag}", (t, t), t, C.comp_mul, _cochmul_vjp))


def _add_common_family(reg: PrimitiveRegistry, n: int, ranks, sqrt_square: bool):
    """St/InvSt, Mul, Inn, AddC, SubC (and Sqrt/Square when requested)."""
    for r in ranks:
        for j in range(n + 1):
            tP = _cochain_type("P", j, r)
            tD = _cochain_type("D", n - j, r)
            reg.add(Primitive(f"St{j}{r}", (tP,), tD, C.hodge_star,
                              _lin_vjp(_star_adj)))
            reg.add(Primitive(f"InvSt{j}{r}", (tD,), tP, C.inverse_hodge_star,
                              _lin_vjp(_inv_star_adj)))
        for x in "PD":
            for j in range(n + 1):
                t = _cochain_type(x, j, r)
                tag = f"{x}{j}{r}"
                reg.add(Primitive(f"Mul{tag}", (t, FLOAT), t, C.scale, _mul_vjp))
                reg.add(Primitive(f"Inn{tag}", (t, t), FLOAT, C.inner, _inner_vjp))
                reg.add(Primitive(f"AddC{tag}", (t, t), t, C.add, _addc_vjp))
                reg.add(Primitive(f"SubC{tag}", (t, t), t, C.sub, _subc_vjp))
                if sqrt_square:
                    fn_sq, vjp_sq = _fn_prim("square")
                    fn_sr, vjp_sr = _fn_prim("sqrt")
                    reg.add(Primitive(f"Sqrt{tag}", (t,), t, fn_sr, vjp_sr))
                    reg.add(Primitive(f"Square{tag}", (t,), t, fn_sq, vjp_sq))


def _add_tensor_family(reg: PrimitiveRegistry, n: int):
    for x in "PD":
        for j in range(n + 1):
            tT = _cochain_type(x, j, "T")
            tS = _cochain_type(x, j, "S")
            tag = f"{x}{j}"
            reg.add(Primitive(f"tran{tag}T", (tT,), tT, C.transpose, _tran_vjp))
            reg.add(Primitive(f"sym{tag}T", (tT,), tT, C.sym, _sym_vjp))
            reg.add(Primitive(f"tr{tag}T", (tT,), tS, C.trace, _tr_vjp))
            reg.add(Primitive(f"Mulv{tag}", (tS, tT), tT,
                              C.scalar_tensor_mul, _mulv_vjp))


_FLOAT_MATH = ("SinF", "ArcsinF", "CosF", "ArccosF", "ExpF", "LogF", "InvF")

PROBLEM_IDS = ("poisson", "elastica", "elasticity", "elasticity_untyped")


def build_registry(problem: str, include_vector: bool = False) -> PrimitiveRegistry:
    """Per-problem primitive set, typed terminals and constant pool."""
    if problem == "poisson":
        reg = PrimitiveRegistry("poisson", 2, constants=(0.5, 2.0, -1.0),
                                required_terminals=frozenset({"u"}))
        for name in ("Add", "Sub", "MulF", "Div", "SqrtF", "SquareF") + _FLOAT_MATH:
            reg.add(FLOAT_OPS[name])
        _add_scalar_family(reg, 2)
        _add_common_family(reg, 2, ("S",), sqrt_square=True)
        reg.terminals = {"u": _cochain_type("P", 0, "S"),
                         "f": _cochain_type("P", 0, "S")}
    elif problem == "elastica":
        reg = PrimitiveRegistry("elastica", 1, constants=(0.5, 2.0, -1.0),
                                required_terminals=frozenset({"u", "f"}))
        for name in ("Add", "Sub", "MulF", "Div", "SqrtF", "SquareF") + _FLOAT_MATH:
            reg.add(FLOAT_OPS[name])
        _add_scalar_family(reg, 1)
        _add_common_family(reg, 1, ("S",), sqrt_square=True)
        reg.terminals = {"u": _cochain_type("D", 0, "S"),
                         "f": FLOAT,
                         "ones": _cochain_type("D", 0, "S"),
                         "int_coch": _cochain_type("P", 0, "S")}
    elif problem == "elasticity":
        reg = PrimitiveRegistry("elasticity", 2,
                                constants=(0.5, 2.0, -1.0, 10.0, 0.1),
                                required_terminals=frozenset({"F"}))
        for name in ("Add", "Sub", "MulF", "Div", "SqrtF", "SquareF"):
            reg.add(FLOAT_OPS[name])
        ranks = ("S", "T", "V") if include_vector else ("S", "T")
        _add_common_family(reg, 2, ranks, sqrt_square=False)
        _add_tensor_family(reg, 2)
        reg.terminals = {"F": _cochain_type("D", 0, "T"),
                         "I": _cochain_type("D", 0, "T")}
        if include_vector:
            reg.terminals["u"] = _cochain_type("P", 0, "V")
            reg.terminals["f"] = _cochain_type("P", 0, "V")
    elif problem == "elasticity_untyped":
        reg = PrimitiveRegistry("elasticity_untyped", 2,
                                constants=(0.5, 2.0, -1.0, 10.0, 0.1),
                                required_terminals=frozenset(
                                    {"F11", "F12", "F21", "F22"}))
        for name in ("Add", "Sub", "MulF", "Div", "SqrtF", "SquareF"):
            reg.add(FLOAT_OPS[name])
        reg.terminals = {n: FLOAT for n in ("F11", "F12", "F21", "F22")}
    else:
        raise KeyError(f"unknown problem {problem!r}")
    return reg


# -- random generation ------------------------------------------------------------


def _gen_subtree(reg, t, budget, full, rng, term_prob):
    leaves = reg.leaves_of(t)
    if budget <= 0:
        if not leaves:
            raise GenerationError(f"no terminal of type {_tname(t)}")
        return TypedExpr(leaves[int(rng.integers(len(leaves)))])
    prims = reg.feasible_primitives(t, budget - 1)
    take_leaf = False
    if not prims:
        take_leaf = True
    elif leaves and not full:
        take_leaf = rng.random() < term_prob
    if take_leaf:
        if not leaves:
            raise GenerationError(f"no terminal of type {_tname(t)}")
        return TypedExpr(leaves[int(rng.integers(len(leaves)))])
    prim = prims[int(rng.integers(len(prims)))]
    children = [_gen_subtree(reg, a, budget - 1, full, rng, term_prob)
                for a in prim.arg_types]
    return TypedExpr(prim, children)


def generate(registry, return_type, rng, min_height=2, max_height=5,
             max_length=100, term_prob=0.3, max_tries=10000,
             require_terminals=None) -> TypedExpr:
    """Ramped half-and-half generation of a type-correct tree.

    Retries until the tree fits the height band, the length cap, and
    contains every required terminal.
    """
    if registry.min_depth(return_type) > max_height:
        raise GenerationError(
            f"type {_tname(return_type)} cannot close within height {max_height}")
    required = registry.required_terminals if require_terminals is None \
        else frozenset(require_terminals)
    for _ in range(max_tries):
        target = int(rng.integers(min_height, max_height + 1))
        full = bool(rng.integers(0, 2))
        try:
            tree = _gen_subtree(registry, return_type, target, full, rng, term_prob)
        except GenerationError:
            continue
        if not (min_height <= tree.height <= max_height):
            continue
        if tree.length > max_length:
            continue
        if not required <= tree.terminal_names():
            continue
        return tree
    raise GenerationError(
        f"could not generate a valid {_tname(return_type)} tree after "
        f"{max_tries} tries")


# -- evaluation and gradients ------------------------------------------------------


class CompiledExpr:
    """Postorder schedule of a tree for repeated evaluation."""

    __slots__ = ("nodes", "child_idx", "root", "n")

    def __init__(self, expr: TypedExpr):
        nodes = []
        child_idx = []

        def rec(node):
            idx = [rec(ch) for ch in node.children]
            nodes.append(node)
            child_idx.append(idx)
            return len(nodes) - 1

        self.root = rec(expr)
        self.nodes = nodes
        self.child_idx = child_idx
        self.n = len(nodes)

    def _forward(self, bindings):
        values = [None] * self.n
        with np.errstate(all="ignore"):
            for i, node in enumerate(self.nodes):
                op = node.op
                if isinstance(op, Primitive):
                    args = [values[j] for j in self.child_idx[i]]
                    values[i] = op.fn(*args)
                elif isinstance(op, Terminal):
                    try:
                        v = bindings[op.name]
                    except KeyError:
                        raise KeyError(f"missing binding for terminal "
                                       f"{op.name!r}") from None
                    if not isinstance(v, (Cochain, np.ndarray)):
                        v = np.float64(v)
                    values[i] = v
                else:
                    values[i] = np.float64(op.value)
        return values

    def value(self, bindings):
        return self._forward(bindings)[self.root]

    def value_and_grad(self, bindings, wrt: str, seed=None):
        """Forward value plus d(sum of root)/d(coeffs of terminal `wrt`).

        The root must be float-typed.  `seed` overrides the root adjoint
        (used to weight batched densities).
        """
        out, grads = self.value_and_grads(bindings, (wrt,), seed=seed)
        return out, grads[wrt]

    def value_and_grads(self, bindings, wrts, seed=None):
        """Like value_and_grad for several terminals in one backward pass."""
        values = self._forward(bindings)
        out = values[self.root]
        grads = {}
        for wrt in wrts:
            target = bindings[wrt]
            gshape = target.coeffs.shape if isinstance(target, Cochain) \
                else np.shape(target)
            grads[wrt] = np.zeros(gshape)
        adj = [None] * self.n
        if seed is None:
            seed = np.ones(np.shape(out)) if np.ndim(out) else np.float64(1.0)
        adj[self.root] = seed
        with np.errstate(all="ignore"):
            for i in range(self.n - 1, -1, -1):
                g = adj[i]
                if g is None:
                    continue
                node = self.nodes[i]
                op = node.op
                if isinstance(op, Terminal):
                    if op.name in grads:
                        grads[op.name] = grads[op.name] + g
                    continue
                if isinstance(op, Constant):
                    continue
                args = [values[j] for j in self.child_idx[i]]
                child_adjs = op.vjp(args, values[i], g)
                for j, ga in zip(self.child_idx[i], child_adjs):
                    if adj[j] is None:
                        adj[j] = ga
                    else:
                        adj[j] = adj[j] + ga
        return out, grads


def evaluate(expr: TypedExpr, bindings: dict):
    """Bottom-up evaluation; non-finite values propagate, never raise."""
    _check_bindings(expr, bindings)
    return CompiledExpr(expr).value(bindings)


def gradient(expr: TypedExpr, wrt: str, bindings: dict):
    """Reverse-mode gradient of a float-rooted tree w.r.t. a cochain terminal."""
    if expr.rtype != FLOAT:
        raise ExprError("gradient needs a float-rooted expression")
    _check_bindings(expr, bindings)
    out, grad = CompiledExpr(expr).value_and_grad(bindings, wrt)
    if not np.all(np.isfinite(np.asarray(out))):
        raise NonFiniteEnergyError(f"non-finite value {out} at the bindings")
    target = bindings[wrt]
    if isinstance(target, Cochain):
        return Cochain(target.kind, target.complex, grad)
    return grad


def _check_bindings(expr, bindings):
    for _, node in expr.iter_nodes():
        if isinstance(node.op, Terminal):
            name = node.op.name
            if name not in bindings:
                raise KeyError(f"missing binding for terminal {name!r}")
            val = bindings[name]
            t = node.op.type
            if t == FLOAT:
                if isinstance(val, Cochain):
                    raise CochainTypeError(f"terminal {name!r} expects a float")
            else:
                if not isinstance(val, Cochain) or val.kind != t:
                    raise CochainTypeError(
                        f"terminal {name!r} expects kind {t}, got "
                        f"{val.kind if isinstance(val, Cochain) else type(val)}")


# -- simplification ----------------------------------------------------------------


def _const_value(expr):
    return expr.op.value if isinstance(expr.op, Constant) else None


def simplify(expr: TypedExpr) -> TypedExpr:
    """Constant folding, identity-element elimination, double negation."""
    children = [simplify(ch) for ch in expr.children]
    op = expr.op
    if not isinstance(op, Primitive):
        return expr
    node = TypedExpr(op, children)

    if op.return_type == FLOAT and children and all(
            isinstance(ch.op, Constant) for ch in children):
        with np.errstate(all="ignore"):
            val = op.fn(*[np.float64(ch.op.value) for ch in children])
        if np.all(np.isfinite(val)):
            return TypedExpr(Constant(float(val)))

    a = children[0] if children else None
    b = children[1] if len(children) > 1 else None
    name = op.name
    if name == "MulF":
        for x, y in ((a, b), (b, a)):
            if _const_value(x) == 1.0:
                return y
        # double negation: (-1) * ((-1) * y)
        for x, y in ((a, b), (b, a)):
            if _const_value(x) == -1.0 and isinstance(y.op, Primitive) \
                    and y.op.name == "MulF":
                ya, yb = y.children
                if _const_value(ya) == -1.0:
                    return yb
                if _const_value(yb) == -1.0:
                    return ya
    elif name == "Add":
        if _const_value(a) == 0.0:
            return b
        if _const_value(b) == 0.0:
            return a
    elif name == "Sub":
        if _const_value(b) == 0.0:
            return a
    elif name == "Div":
        if _const_value(b) == 1.0:
            return a
    elif name.startswith("Mul") and not name.startswith("Mulv") and b is not None \
            and b.rtype == FLOAT and _const_value(b) == 1.0:
        return a
    elif name.startswith("CochMul"):
        for x, y in ((a, b), (b, a)):
            if isinstance(x.op, Terminal) and x.op.name == "ones":
                return y
    return node
