"""Cochain algebra and discrete exterior-calculus operators.

A cochain assigns a scalar, vector or tensor coefficient to every cell of
its carrier: primal p-cochains live on the p-simplices, dual p-cochains on
the circumcentric duals of the (n-p)-simplices (one coefficient per primal
(n-p)-simplex).  Coefficient arrays may carry extra *leading* batch axes so
that stacked samples evaluate in one shot; every operator broadcasts over
those axes.

Sign conventions (pinned here once and used verbatim everywhere):

* coboundary on primal p-cochains is the transpose of the incidence
  matrix of (p+1)-simplices;
* the dual coboundary on dual q-cochains is minus the incidence matrix of
  the primal (n-q)-simplices, which makes the adjointness identity
  ``<d a, b> = <a, codifferential b>`` hold exactly and gives interior
  angle differences a positive sign when angles increase along a 1-complex;
* the Hodge star scales by dual/primal volume ratios; its inverse undoes
  it exactly, and the double-star sign (-1)^{p(n-p)} is carried by the
  star acting on dual cochains.

Operators never clamp: out-of-domain inputs produce non-finite
coefficients that flow to the caller (IEEE semantics).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simplicial import SimplicialComplex

_RANK_AXES = {"scalar": 0, "vector": 1, "tensor": 2}


class CochainTypeError(TypeError):
    """Operands have incompatible kinds (primality, degree or rank)."""


@dataclass(frozen=True)
class CochainKind:
    primality: str  # "primal" | "dual"
    degree: int
    rank: str = "scalar"  # "scalar" | "vector" | "tensor"

    def __post_init__(self):
        if self.primality not in ("primal", "dual"):
            raise CochainTypeError(f"bad primality {self.primality!r}")
        if self.rank not in _RANK_AXES:
            raise CochainTypeError(f"bad rank {self.rank!r}")

    def __str__(self):
        return f"{self.primality[0].upper()}{self.degree}{self.rank[0].upper()}"


class Cochain:
    """Typed coefficient array bound to a complex.

    coeffs shape is ``batch_shape + (m,)`` for scalars, ``+ (m, N)`` for
    vectors and ``+ (m, N, N)`` for tensors, where m is the carrier count.
    """

    __slots__ = ("kind", "complex", "coeffs")

    def __init__(self, kind: CochainKind, complex: SimplicialComplex, coeffs):
        if kind.degree < 0 or kind.degree > complex.dim:
            raise CochainTypeError(
                f"degree {kind.degree} out of range for a {complex.dim}-complex")
        coeffs = np.asarray(coeffs, dtype=np.float64)
        m = complex.carrier_count(kind.primality, kind.degree)
        extra = _RANK_AXES[kind.rank]
        want = (m,) + (complex.dim,) * extra
        if coeffs.shape[len(coeffs.shape) - len(want):] != want:
            raise CochainTypeError(
                f"coeffs shape {coeffs.shape} does not end with {want} "
                f"for kind {kind}")
        self.kind = kind
        self.complex = complex
        self.coeffs = coeffs

    @property
    def batch_shape(self):
        extra = 1 + _RANK_AXES[self.kind.rank]
        return self.coeffs.shape[:-extra]

    def copy(self) -> "Cochain":
        return Cochain(self.kind, self.complex, self.coeffs.copy())

    def __repr__(self):
        return f"Cochain({self.kind}, shape={self.coeffs.shape})"


def _like(c: Cochain, coeffs, kind: CochainKind | None = None) -> Cochain:
    return Cochain(kind or c.kind, c.complex, coeffs)


def _check_same_kind(a: Cochain, b: Cochain):
    if a.kind != b.kind or a.complex is not b.complex:
        raise CochainTypeError(f"kind mismatch: {a.kind} vs {b.kind}")


def _expand(diag: np.ndarray, rank: str) -> np.ndarray:
    """Reshape a per-carrier diagonal for broadcasting against a rank."""
    return diag.reshape(diag.shape + (1,) * _RANK_AXES[rank])


def _expand_scalar(a, rank: str):
    """Broadcast a float (possibly batched) against cochain coefficients."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a
    return a.reshape(a.shape + (1,) * (1 + _RANK_AXES[rank]))


def _matmul(mat, coeffs: np.ndarray) -> np.ndarray:
    """Apply a sparse (q, m) matrix along the carrier axis of (..., m)."""
    if coeffs.ndim == 1:
        return mat @ coeffs
    flat = coeffs.reshape(-1, coeffs.shape[-1])
    return np.asarray((mat @ flat.T).T).reshape(coeffs.shape[:-1] + (mat.shape[0],))


# -- topological operators -----------------------------------------------------


def coboundary(c: Cochain) -> Cochain:
    """Discrete exterior derivative of a primal scalar cochain."""
    k = c.kind
    if k.primality != "primal" or k.rank != "scalar":
        raise CochainTypeError(f"coboundary needs a primal scalar cochain, got {k}")
    if k.degree >= c.complex.dim:
        raise CochainTypeError(f"coboundary overflows degree {k.degree}")
    out = _matmul(c.complex.boundary_T(k.degree + 1), c.coeffs)
    return _like(c, out, CochainKind("primal", k.degree + 1))


def dual_coboundary(c: Cochain) -> Cochain:
    """Coboundary on the dual complex (induced orientation)."""
    k = c.kind
    if k.primality != "dual" or k.rank != "scalar":
        raise CochainTypeError(f"dual coboundary needs a dual scalar cochain, got {k}")
    n = c.complex.dim
    if k.degree >= n:
        raise CochainTypeError(f"dual coboundary overflows degree {k.degree}")
    out = -_matmul(c.complex.boundary[n - k.degree], c.coeffs)
    return _like(c, out, CochainKind("dual", k.degree + 1))


def hodge_star(c: Cochain) -> Cochain:
    """Diagonal Hodge star.

    Primal p -> dual (n-p) scales by |dual|/|primal|; dual q -> primal (n-q)
    scales by the inverse ratio times the double-star sign (-1)^{q(n-q)}.
    """
    k, K = c.kind, c.complex
    n = K.dim
    if k.primality == "primal":
        diag = K.hodge_diag(k.degree)
        out_kind = CochainKind("dual", n - k.degree, k.rank)
        out = c.coeffs * _expand(diag, k.rank)
    else:
        p = n - k.degree
        diag = K.hodge_diag(p, inverse=True)
        sign = -1.0 if (k.degree * (n - k.degree)) % 2 else 1.0
        out_kind = CochainKind("primal", p, k.rank)
        out = sign * c.coeffs * _expand(diag, k.rank)
    return Cochain(out_kind, K, out)


def inverse_hodge_star(c: Cochain) -> Cochain:
    """Exact inverse of :func:`hodge_star` (round-trip is the identity)."""
    k, K = c.kind, c.complex
    n = K.dim
    if k.primality == "dual":
        p = n - k.degree
        out = c.coeffs * _expand(K.hodge_diag(p, inverse=True), k.rank)
        return Cochain(CochainKind("primal", p, k.rank), K, out)
    sign = -1.0 if (k.degree * (n - k.degree)) % 2 else 1.0
    out = sign * c.coeffs * _expand(K.hodge_diag(k.degree), k.rank)
    return Cochain(CochainKind("dual", n - k.degree, k.rank), K, out)


def codifferential(c: Cochain) -> Cochain:
    """Adjoint of the coboundary: primal p -> primal (p-1) scalar."""
    k, K = c.kind, c.complex
    if k.primality != "primal" or k.rank != "scalar":
        raise CochainTypeError(f"codifferential needs a primal scalar cochain, got {k}")
    if k.degree < 1:
        raise CochainTypeError("codifferential underflows degree 0")
    p = k.degree
    w_in = K.hodge_diag(p)
    w_out = K.hodge_diag(p - 1, inverse=True)
    out = w_out * _matmul(K.boundary[p], w_in * c.coeffs)
    return _like(c, out, CochainKind("primal", p - 1))


def dual_codifferential(c: Cochain) -> Cochain:
    """Adjoint of the dual coboundary: dual q -> dual (q-1) scalar."""
    k, K = c.kind, c.complex
    if k.primality != "dual" or k.rank != "scalar":
        raise CochainTypeError(
            f"dual codifferential needs a dual scalar cochain, got {k}")
    if k.degree < 1:
        raise CochainTypeError("dual codifferential underflows degree 0")
    n, q = K.dim, k.degree
    w_in = K.hodge_diag(n - q, inverse=True)
    w_out = K.hodge_diag(n - q + 1)
    out = -w_out * _matmul(K.boundary_T(n - q + 1), w_in * c.coeffs)
    return _like(c, out, CochainKind("dual", q - 1))


def laplace_de_rham(c: Cochain) -> Cochain:
    """d delta + delta d; on 0-cochains this is minus the usual Laplacian."""
    k = c.kind
    if k.primality != "primal" or k.rank != "scalar":
        raise CochainTypeError(f"Laplace-de Rham needs a primal scalar cochain, got {k}")
    out = codifferential(coboundary(c)) if k.degree < c.complex.dim else None
    if k.degree >= 1:
        term = coboundary(codifferential(c))
        out = term if out is None else _like(c, out.coeffs + term.coeffs)
    return out


# -- metric pairing ------------------------------------------------------------


def inner_weights(K: SimplicialComplex, kind: CochainKind) -> np.ndarray:
    """Per-carrier weights of the L2 pairing for the given kind."""
    if kind.primality == "primal":
        return K.hodge_diag(kind.degree)
    return K.hodge_diag(K.dim - kind.degree, inverse=True)


def inner(c1: Cochain, c2: Cochain):
    """L2 inner product of same-kind cochains (dot / Frobenius per rank)."""
    _check_same_kind(c1, c2)
    w = inner_weights(c1.complex, c1.kind)
    prod = c1.coeffs * c2.coeffs
    extra = _RANK_AXES[c1.kind.rank]
    if extra:
        prod = prod.reshape(prod.shape[:-(1 + extra)] + (len(w), -1)).sum(-1)
    out = prod @ w
    return float(out) if out.ndim == 0 else out


# -- component-wise functions and arithmetic -----------------------------------

COCHAIN_FUNCTIONS = {
    "sin": np.sin, "arcsin": np.arcsin, "cos": np.cos, "arccos": np.arccos,
    "exp": np.exp, "log": np.log, "sqrt": np.sqrt, "square": np.square,
}


def cochain_fn(name: str, c: Cochain) -> Cochain:
    """Component-wise function application (no domain clamping)."""
    if name not in COCHAIN_FUNCTIONS:
        raise KeyError(f"unknown cochain function {name!r}")
    with np.errstate(all="ignore"):
        return _like(c, COCHAIN_FUNCTIONS[name](c.coeffs))


def scale(c: Cochain, a) -> Cochain:
    return _like(c, c.coeffs * _expand_scalar(a, c.kind.rank))


def add(c1: Cochain, c2: Cochain) -> Cochain:
    _check_same_kind(c1, c2)
    return _like(c1, c1.coeffs + c2.coeffs)


def sub(c1: Cochain, c2: Cochain) -> Cochain:
    _check_same_kind(c1, c2)
    return _like(c1, c1.coeffs - c2.coeffs)


def neg(c: Cochain) -> Cochain:
    return _like(c, -c.coeffs)


def comp_mul(c1: Cochain, c2: Cochain) -> Cochain:
    """Component-wise product of scalar cochains of identical kind."""
    _check_same_kind(c1, c2)
    if c1.kind.rank != "scalar":
        raise CochainTypeError("component-wise product is scalar-only")
    return _like(c1, c1.coeffs * c2.coeffs)


def scalar_tensor_mul(s: Cochain, t: Cochain) -> Cochain:
    """Coefficient-wise product of a scalar and a tensor cochain."""
    if s.kind.rank != "scalar" or t.kind.rank != "tensor":
        raise CochainTypeError("need (scalar, tensor) operands")
    if (s.kind.primality, s.kind.degree) != (t.kind.primality, t.kind.degree) \
            or s.complex is not t.complex:
        raise CochainTypeError(f"carrier mismatch: {s.kind} vs {t.kind}")
    return _like(t, s.coeffs[..., None, None] * t.coeffs)


def transpose(t: Cochain) -> Cochain:
    if t.kind.rank != "tensor":
        raise CochainTypeError("transpose needs a tensor cochain")
    return _like(t, np.swapaxes(t.coeffs, -1, -2))


def sym(t: Cochain) -> Cochain:
    if t.kind.rank != "tensor":
        raise CochainTypeError("sym needs a tensor cochain")
    return _like(t, 0.5 * (t.coeffs + np.swapaxes(t.coeffs, -1, -2)))


def trace(t: Cochain) -> Cochain:
    if t.kind.rank != "tensor":
        raise CochainTypeError("trace needs a tensor cochain")
    a = t.coeffs
    if a.shape[-1] == 2:
        out = a[..., 0, 0] + a[..., 1, 1]
    else:
        out = np.trace(a, axis1=-2, axis2=-1)
    return _like(t, out, CochainKind(t.kind.primality, t.kind.degree, "scalar"))


# -- standard cochains ----------------------------------------------------------


def zeros(K: SimplicialComplex, kind: CochainKind, batch_shape=()) -> Cochain:
    m = K.carrier_count(kind.primality, kind.degree)
    shape = tuple(batch_shape) + (m,) + (K.dim,) * _RANK_AXES[kind.rank]
    return Cochain(kind, K, np.zeros(shape))


def ones_cochain(K: SimplicialComplex, kind: CochainKind) -> Cochain:
    c = zeros(K, kind)
    c.coeffs[...] = 1.0
    return c


def identity_tensor(K: SimplicialComplex, primality="dual", degree=0) -> Cochain:
    kind = CochainKind(primality, degree, "tensor")
    m = K.carrier_count(primality, degree)
    coeffs = np.broadcast_to(np.eye(K.dim), (m, K.dim, K.dim)).copy()
    return Cochain(kind, K, coeffs)


def interior_indicator(K: SimplicialComplex) -> Cochain:
    """Primal 0-cochain: 1 at interior nodes, 0 at boundary nodes."""
    coeffs = K.interior_node_mask().astype(np.float64)
    return Cochain(CochainKind("primal", 0), K, coeffs)


# -- CSV dump -------------------------------------------------------------------


def write_cochain_csv(c: Cochain, path) -> None:
    """Dump format: header, `kind,degree,rank` line, one row per carrier
    (scalar: 1 column; vector: N; tensor: N*N row-major)."""
    if c.batch_shape:
        raise ValueError("can only dump unbatched cochains")
    m = c.coeffs.shape[0]
    rows = c.coeffs.reshape(m, -1)
    lines = ["kind,degree,rank",
             f"{c.kind.primality},{c.kind.degree},{c.kind.rank}"]
    for row in rows:
        lines.append(",".join(format(v, ".17g") for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_cochain_csv(path, K: SimplicialComplex) -> Cochain:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines[0] != "kind,degree,rank":
        raise ValueError(f"bad cochain file header: {lines[0]!r}")
    primality, degree, rank = lines[1].split(",")
    kind = CochainKind(primality, int(degree), rank)
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[2:]])
    m = K.carrier_count(kind.primality, kind.degree)
    shape = (m,) + (K.dim,) * _RANK_AXES[kind.rank]
    return Cochain(kind, K, data.reshape(shape))
