"""Energy minimization of candidate models.

Each candidate tree is interpreted as a scalar potential energy of one
unknown cochain.  Solves run L-BFGS (strong-Wolfe line search) on the
free degrees of freedom; Dirichlet data is either eliminated from the
variable set or enforced by a quadratic penalty.  Any non-finite energy
or gradient and any failure to converge is folded into the sentinel MSE
1e5 -- candidates are never allowed to raise.

Stacked samples solve jointly: the objective is separable across the
leading batch axis, so one L-BFGS run drives every sample to the same
per-component gradient tolerance as independent runs would.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.optimize

from .cochain import Cochain
from .symexpr import CompiledExpr, NonFiniteEnergyError, TypedExpr, to_sexpr

SENTINEL_MSE = 1.0e5


class _AbortSolve(Exception):
    pass


class FitFailure(Exception):
    """Bilevel parameter fit could not produce a usable value."""


@dataclass
class SolverOptions:
    """L-BFGS settings.

    A solve counts as converged when either (a) max |gradient| on the free
    DOFs falls below gtol * max(1, |energy|), or (b) the optimizer stops
    because the energy decrease hit zero in double precision (with ftol=0
    that termination implies the objective is minimized to float64
    representability) while the gradient is still small (below
    stall_cap * max(1, |energy|)).  The relative scaling is forced by
    float64: for large energies the gradient floor grows with
    sqrt(eps * |E| * curvature) and an absolute tolerance is unreachable.
    """
    history: int = 10            # L-BFGS memory
    gtol: float = 1e-8           # max |gradient| relative to max(1, |energy|)
    max_iter: int = 500
    ftol: float = 0.0
    maxls: int = 40
    stall_cap: float = 1e-5
    divergence_floor: float = -1e13
    constant_probe_tol: float = 1e-14
    # optional progressive checks: at each (iteration, ratio) checkpoint the
    # solve is abandoned unless the gradient has shrunk below ratio x its
    # starting norm (discovery runs cut losses on hopeless candidates early)
    progress_checks: tuple = ()
    # outer bilevel fit: positive log-spaced bracket, relative tolerance,
    # number of coarse scan points, optional inner-solve iteration cap
    # (0 = use max_iter) and the coarse-misfit level above which the
    # parabolic refinement is skipped (inf = always refine)
    bilevel_lo: float = 1e-3
    bilevel_hi: float = 1e3
    bilevel_tol: float = 1e-6
    bilevel_coarse: int = 13
    bilevel_inner_max_iter: int = 0
    bilevel_refine_skip: float = np.inf
    bilevel_iter_budget: int = 0     # 0 = unlimited total inner iterations
    # function-evaluation budget per solve, as a multiple of max_iter
    maxfun_mult: float = 20.0

    def scipy_options(self):
        return {"maxcor": self.history, "gtol": self.gtol, "ftol": self.ftol,
                "maxiter": self.max_iter, "maxls": self.maxls,
                "maxfun": int(self.maxfun_mult * self.max_iter) + 100}


@dataclass
class BcSpec:
    """Dirichlet data on flat DOF indices of one sample's coefficient array."""
    mode: str = "eliminate"      # "eliminate" | "penalty"
    fixed_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    fixed_val: np.ndarray = field(default_factory=lambda: np.zeros(0))
    penalty_weight: float = 1e6

    def __post_init__(self):
        self.fixed_idx = np.asarray(self.fixed_idx, dtype=np.int64)
        self.fixed_val = np.asarray(self.fixed_val, dtype=np.float64)
        if self.mode not in ("eliminate", "penalty"):
            raise ValueError(f"bad bc mode {self.mode!r}")
        if self.mode == "penalty" and self.penalty_weight <= 0:
            raise ValueError("penalty weight must be positive")


@dataclass
class SolveResult:
    minimizer: Cochain
    energy: float
    converged: bool
    iterations: int
    grad_norm: float


def _free_indices(sample_size: int, bc: BcSpec) -> np.ndarray:
    mask = np.ones(sample_size, dtype=bool)
    if bc.mode == "eliminate":
        mask[bc.fixed_idx] = False
    return np.nonzero(mask)[0]


def minimize_objective(fun_and_grad, x0_flat: np.ndarray, sample_size: int,
                       bc: BcSpec, opts: SolverOptions) -> tuple:
    """L-BFGS over the free DOFs of (possibly batched) flattened state.

    fun_and_grad(full_flat) -> (total_energy, grad_flat); both computed on
    the full state including fixed DOFs.  Returns (x_full, energy,
    converged, iterations, grad_norm).
    """
    batch = x0_flat.size // sample_size
    full = x0_flat.astype(np.float64).reshape(batch, sample_size).copy()
    fixed_val = np.broadcast_to(
        np.asarray(bc.fixed_val, dtype=np.float64),
        (batch, len(bc.fixed_idx))) if len(bc.fixed_idx) else None
    if bc.mode == "eliminate" and fixed_val is not None:
        full[:, bc.fixed_idx] = fixed_val
    free = _free_indices(sample_size, bc)

    def objective(z):
        full[:, free] = z.reshape(batch, len(free))
        e, g = fun_and_grad(full.reshape(x0_flat.shape))
        g = g.reshape(batch, sample_size)
        if bc.mode == "penalty" and fixed_val is not None:
            diff = full[:, bc.fixed_idx] - fixed_val
            e = e + bc.penalty_weight * float((diff * diff).sum())
            g = g.copy()
            g[:, bc.fixed_idx] += 2.0 * bc.penalty_weight * diff
        if not np.isfinite(e) or not np.all(np.isfinite(g[:, free])):
            raise _AbortSolve("non-finite energy or gradient")
        if e < opts.divergence_floor:
            raise _AbortSolve("energy diverging to -inf")
        return e, g[:, free].ravel()

    z0 = full[:, free].ravel()
    iters = 0
    checkpoints = sorted(c for c in opts.progress_checks
                         if 0 < c[0] < opts.max_iter)
    try:
        with np.errstate(all="ignore"):
            if checkpoints:
                e0, g0 = objective(z0)
                g0n = max(float(np.abs(g0).max()), 1e-300)
            res = None
            x_cur = z0
            segments = [it for it, _ in checkpoints] + [opts.max_iter]
            ratios = [r for _, r in checkpoints] + [None]
            for seg_end, ratio in zip(segments, ratios):
                o = opts.scipy_options()
                o["maxiter"] = seg_end - iters
                res = scipy.optimize.minimize(
                    objective, x_cur, jac=True, method="L-BFGS-B", options=o)
                x_cur = res.x
                if res.status != 1 or int(res.nit) == 0:
                    iters += int(res.nit)
                    break
                iters += int(res.nit)
                gn = float(np.abs(res.jac).max())
                scale = max(1.0, abs(float(res.fun)))
                if ratio is not None and gn > opts.gtol * scale \
                        and gn > ratio * g0n:
                    return (full.reshape(x0_flat.shape), float(res.fun),
                            False, iters, gn)
    except _AbortSolve:
        return full.reshape(x0_flat.shape), np.nan, False, iters, np.inf
    full[:, free] = res.x.reshape(batch, len(free))
    gnorm = float(np.abs(res.jac).max()) if res.jac is not None else np.inf
    scale = max(1.0, abs(float(res.fun)))
    converged = bool(np.isfinite(res.fun)
                     and (gnorm <= opts.gtol * scale
                          or (res.status == 0
                              and gnorm <= opts.stall_cap * scale)))
    return (full.reshape(x0_flat.shape), float(res.fun), converged,
            iters, gnorm)


def minimize_energy(expr: TypedExpr, bindings: dict, unknown: str,
                    x0: Cochain, bc: BcSpec,
                    opts: SolverOptions | None = None) -> SolveResult:
    """Minimize a float-rooted tree over the coefficients of `unknown`."""
    opts = opts or SolverOptions()
    compiled = CompiledExpr(expr)
    kind, K = x0.kind, x0.complex
    batch = x0.batch_shape
    sample_size = int(np.prod(x0.coeffs.shape[len(batch):]))

    def fun_and_grad(flat):
        c = Cochain(kind, K, flat.reshape(x0.coeffs.shape))
        b = dict(bindings)
        b[unknown] = c
        val, grad = compiled.value_and_grad(b, unknown)
        total = float(np.sum(val))
        return total, grad.reshape(flat.shape)

    x_full, energy, converged, iters, gnorm = minimize_objective(
        fun_and_grad, x0.coeffs.ravel(), sample_size, bc, opts)
    minimizer = Cochain(kind, K, x_full.reshape(x0.coeffs.shape))
    return SolveResult(minimizer, energy, converged, iters, gnorm)


def solution_mse(solutions, data) -> float:
    """Mean over samples of the squared l2 distance between solution and
    target (the error of one sample is the sum over all its scalar
    components -- matching the magnitudes the benchmarks report)."""
    if len(solutions) != len(data):
        raise ValueError("length mismatch")
    per = []
    for s, d in zip(solutions, data):
        a = s.coeffs if isinstance(s, Cochain) else np.asarray(s)
        b = d.coeffs if isinstance(d, Cochain) else np.asarray(d)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        per.append(float(np.sum((a - b) ** 2)))
    return float(np.mean(per))


def _probe_rng(expr: TypedExpr) -> np.random.Generator:
    digest = hashlib.sha256(to_sexpr(expr).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def constant_energy(compiled: CompiledExpr, bindings: dict, unknown: str,
                    x0: Cochain, expr: TypedExpr,
                    tol: float = 1e-14) -> bool:
    """True when the gradient vanishes at x0 and at a random perturbation."""
    rng = _probe_rng(expr)
    for shift in (0.0, 1.0):
        coeffs = x0.coeffs
        if shift:
            scale = max(1.0, float(np.abs(coeffs).max()))
            coeffs = coeffs + 0.37 * scale * rng.standard_normal(coeffs.shape)
        b = dict(bindings)
        b[unknown] = Cochain(x0.kind, x0.complex, coeffs)
        try:
            val, grad = compiled.value_and_grad(b, unknown)
        except Exception:
            return False
        if not np.all(np.isfinite(np.asarray(val))) or not np.all(np.isfinite(grad)):
            return False
        if np.abs(grad).max() > tol:
            return False
    return True


@dataclass
class EvalRecord:
    mse: float
    valid: bool
    fitted_params: dict = field(default_factory=dict)
    extra_penalty: float = 0.0
    reason: str = ""


def evaluate_candidate(expr: TypedExpr, dataset, adapter,
                       opts: SolverOptions | None = None):
    """Solve every sample of `dataset` under `adapter`; sentinel on failure.

    Returns (mse, valid).  Failures folded into the sentinel: constant
    energies, non-finite values, non-convergence, fit failures.
    """
    rec = evaluate_candidate_full(expr, dataset, adapter, opts)
    return rec.mse, rec.valid


def evaluate_candidate_full(expr: TypedExpr, dataset, adapter,
                            opts: SolverOptions | None = None) -> EvalRecord:
    opts = opts or SolverOptions()
    try:
        with np.errstate(all="ignore"):
            return adapter.evaluate(expr, dataset, opts)
    except (FitFailure, NonFiniteEnergyError, _AbortSolve,
            FloatingPointError, ZeroDivisionError) as exc:
        return EvalRecord(SENTINEL_MSE, False, reason=str(exc))


def fit_scalar(objective, lo: float = 1e-3, hi: float = 1e3,
               tol: float = 1e-6, coarse: int = 13,
               flat_tol: float = 1e-12, refine_skip: float = np.inf,
               refine_objective=None, scan_objective=None) -> float:
    """1-D outer minimization of `objective` over a positive parameter.

    Golden/parabolic (Brent) refinement on log-spaced bracket [lo, hi]
    after a coarse scan; a flat objective (variation below flat_tol over
    the scan) raises FitFailure.  `objective(f)` may return nan/inf for
    failed inner solves.  When the best coarse value exceeds refine_skip
    the candidate is hopeless and the coarse argmin is returned as-is.
    """
    grid = np.exp(np.linspace(np.log(lo), np.log(hi), coarse))
    with np.errstate(all="ignore"):
        if scan_objective is not None:
            vals = np.asarray(scan_objective(grid), dtype=np.float64)
        else:
            vals = np.array([objective(f) for f in grid], dtype=np.float64)
    ok = np.isfinite(vals)
    if not ok.any():
        raise FitFailure("all inner solves failed across the bracket")
    if np.nanmax(vals[ok]) - np.nanmin(vals[ok]) < flat_tol:
        raise FitFailure("objective is flat in the parameter")
    i = int(np.nanargmin(np.where(ok, vals, np.inf)))
    if vals[i] > refine_skip:
        return float(grid[i])
    ta = np.log(grid[max(i - 1, 0)])
    tb = np.log(grid[min(i + 1, coarse - 1)])

    refine = refine_objective or objective

    def fun(t):
        v = refine(float(np.exp(t)))
        return v if np.isfinite(v) else 1e30

    res = scipy.optimize.minimize_scalar(
        fun, bounds=(ta, tb), method="bounded",
        options={"xatol": tol, "maxiter": 200})
    t_best = float(res.x)
    if fun(t_best) > vals[i]:
        t_best = float(np.log(grid[i]))
    return float(np.exp(t_best))


def with_options(opts: SolverOptions, **kw) -> SolverOptions:
    return replace(opts, **kw)
