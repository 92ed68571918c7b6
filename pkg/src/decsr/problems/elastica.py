"""Cantilever rod benchmark (planar bending under a vertical tip load).

Synthetic measurements: the continuous boundary-value problem
u'' + f cos u = 0, u(0) = 0, u'(1) = 0 is solved by shooting for ten tip
loads, the deformed shape is sampled at the mesh nodes, perturbed with
uniform noise, and edge angles are recovered from the noisy chords.  The
dimensionless load couples each candidate energy to the data through a
bilevel fit of the bending stiffness on one training solution.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

from .. import cochain as C
from .. import minimize as M
from .. import symexpr as X
from .base import Problem, Sample, make_split

GROUND_TRUTH = ("(Sub (MulF 0.5 (InnP0S (CochMulP0S int_coch (InvSt0S (dD0S u)))"
                " (CochMulP0S int_coch (InvSt0S (dD0S u)))))"
                " (InnD0S (MulD0S ones f) (SinD0S u)))")

DEFAULT_LOADS = tuple(float(p) for p in range(-5, -51, -5))
DEFAULT_B = 7.854
ROD_LENGTH = 1.0


def solve_continuous(f: float, steps: int = 10_000, residual_tol: float = 1e-10):
    """Shooting solution of u'' = -f cos u, u(0)=0, u'(1)=0 on [0, 1].

    Returns (s_grid, u_grid).  RK4 integration; the unknown initial slope
    is bracketed and polished until |u'(1)| <= residual_tol.
    """
    h = 1.0 / steps

    def integrate(slope):
        """RK4 over [0,1]; slope may be an array (one trajectory per entry)."""
        slope = np.asarray(slope, dtype=np.float64)
        u = np.empty((steps + 1,) + slope.shape)
        v = np.empty_like(u)
        ui = np.zeros_like(slope)
        vi = slope.copy()
        u[0], v[0] = ui, vi
        for i in range(steps):
            k1u, k1v = vi, -f * np.cos(ui)
            k2u, k2v = vi + 0.5 * h * k1v, -f * np.cos(ui + 0.5 * h * k1u)
            k3u, k3v = vi + 0.5 * h * k2v, -f * np.cos(ui + 0.5 * h * k2u)
            k4u, k4v = vi + h * k3v, -f * np.cos(ui + h * k3u)
            ui = ui + h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u)
            vi = vi + h / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
            u[i + 1], v[i + 1] = ui, vi
        return u, v

    def residual(slope):
        return integrate(np.float64(slope))[1][-1]

    span = max(2.0 * abs(f), 1.0)
    grid = np.linspace(-span, span, 41)
    vals = integrate(grid)[1][-1]
    bracket = None
    for a, b, va, vb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if va == 0.0:
            bracket = (a, a)
            break
        if va * vb < 0:
            bracket = (a, b)
            break
    if bracket is None:
        raise RuntimeError(f"no shooting bracket for load parameter f={f}")
    slope = bracket[0] if bracket[0] == bracket[1] else brentq(
        residual, *bracket, xtol=1e-14, rtol=8.9e-16)
    u, v = integrate(np.float64(slope))
    if abs(v[-1]) > residual_tol:
        raise RuntimeError(f"shooting residual {v[-1]:.2e} above tolerance")
    return np.linspace(0.0, 1.0, steps + 1), u


def rod_positions(s_grid, u_grid):
    """Deformed (x, y) of the inextensible rod axis via trapezoid quadrature."""
    dx = np.cos(u_grid)
    dy = np.sin(u_grid)
    h = s_grid[1] - s_grid[0]
    x = np.concatenate([[0.0], np.cumsum(0.5 * (dx[1:] + dx[:-1]) * h)])
    y = np.concatenate([[0.0], np.cumsum(0.5 * (dy[1:] + dy[:-1]) * h)])
    return np.column_stack([x, y])


def angles_from_positions(pos: np.ndarray) -> np.ndarray:
    """Edge angles of consecutive chords (the dual 0-cochain coefficients)."""
    d = np.diff(pos, axis=0)
    return np.arctan2(d[:, 1], d[:, 0])


def noise_amplitude(positions: np.ndarray) -> float:
    """0.05 x the decade of the largest clean displacement component."""
    n = len(positions)
    straight = np.column_stack([np.linspace(0, 1, n), np.zeros(n)])
    m = float(np.abs(positions - straight).max())
    if m == 0.0:
        return 0.0
    return 0.05 * 10.0 ** np.floor(np.log10(m))


def edge_angles_clamped(pos: np.ndarray) -> np.ndarray:
    """Edge-angle cochain from sampled (possibly noisy) positions.

    The rod is clamped at the first node, so the discrete angle unknowns
    are referred to the stations where each edge leaves its left node:
    the first angle is the known wall tangent (zero), the others average
    the two chords meeting at the edge's start node, which estimates the
    tangent there to second order.
    """
    chords = angles_from_positions(pos)
    angles = np.empty_like(chords)
    angles[0] = 0.0
    angles[1:] = 0.5 * (chords[:-1] + chords[1:])
    return angles


class ElasticaProblem(Problem):
    id = "elastica"
    alpha = 10.0
    unknown = "u"

    def __init__(self, mesh, dataset, B=DEFAULT_B, noise_seed=0):
        super().__init__(mesh, X.build_registry("elastica"), dataset)
        self.ground_truth = X.parse(GROUND_TRUTH, self.registry)
        self.B = B
        self.noise_seed = noise_seed
        self._kd0 = C.CochainKind("dual", 0)
        self._ones = C.ones_cochain(mesh, self._kd0)
        self._int = C.interior_indicator(mesh)

    def archive_params(self):
        return {"B": self.B, "noise_seed": self.noise_seed,
                "loads": [s.inputs["PL2"] for s in self.dataset.all]}

    def state_kind(self):
        return self._kd0

    # -- bilevel fit ---------------------------------------------------------

    def fit(self, expr, opts) -> dict:
        """Fit the bending stiffness on the first training solution.

        The searched parameter is the positive magnitude of the
        dimensionless load; the energy sees it with the sign of the
        applied load, so B = PL^2 / f_signed stays positive.
        """
        sample = self.dataset.train[0]
        magnitude = fit_parameter(self, expr, sample, opts,
                                  lo=opts.bilevel_lo, hi=opts.bilevel_hi,
                                  tol=opts.bilevel_tol,
                                  coarse=opts.bilevel_coarse)
        pl2 = sample.inputs["PL2"]
        f_signed = np.sign(pl2) * magnitude if pl2 else magnitude
        return {"f": float(f_signed), "B": float(pl2 / f_signed)}

    def make_objective(self, expr, samples, params):
        K = self.mesh
        B = params["B"]
        f = np.array([s.inputs["PL2"] / B for s in samples])
        bindings = {"f": f, "ones": self._ones, "int_coch": self._int}
        compiled = X.CompiledExpr(expr)
        x0 = self.stack_x0(samples)
        shape = x0.shape

        def fun_and_grad(flat):
            b = dict(bindings)
            b["u"] = C.Cochain(self._kd0, K, flat.reshape(shape))
            val, grad = compiled.value_and_grad(b, "u")
            return float(np.sum(val)), grad.reshape(flat.shape)

        return fun_and_grad, x0.ravel(), K.num[1], self.stack_bc(samples)

    def solution_mse(self, x_flat, samples):
        sols = x_flat.reshape(len(samples), -1)
        data = np.stack([s.unknown_data.coeffs for s in samples])
        return float(np.mean(np.sum((sols - data) ** 2, axis=1)))

    def probe_samples(self, rng, count):
        loads = rng.uniform(-55.0, -2.0, size=count)
        out = []
        for P in loads:
            n = self.mesh.num_nodes
            x0 = C.zeros(self.mesh, self._kd0)
            bc = M.BcSpec("eliminate", np.array([0]), np.zeros(1))
            data = C.zeros(self.mesh, self._kd0)
            out.append(Sample(data, {"PL2": float(P) * ROD_LENGTH ** 2},
                              bc, x0, {"probe": True}))
        return out


def fit_parameter(problem: ElasticaProblem, expr, sample, opts,
                  lo: float = 1e-3, hi: float = 1e3, tol: float = 1e-6,
                  coarse: int = 13) -> float:
    """min_{f >= 0} ||u_f - u_bar||^2 with u_f the inner energy minimizer.

    Golden/parabolic search over a log-spaced positive bracket; inner
    solves are warm-started along the outer trajectory.  Raises FitFailure
    when the objective is flat or every inner solve fails.
    """
    K = problem.mesh
    compiled = X.CompiledExpr(expr)
    bindings = {"ones": problem._ones, "int_coch": problem._int}
    data = sample.unknown_data.coeffs
    x0 = sample.x0.coeffs.ravel()
    bc = sample.bc
    size = K.num[1]
    sign = float(np.sign(sample.inputs["PL2"])) or 1.0
    inner_opts = opts
    if opts.bilevel_inner_max_iter:
        inner_opts = M.with_options(
            opts, max_iter=min(opts.max_iter, opts.bilevel_inner_max_iter))
    budget = {"left": opts.bilevel_iter_budget or np.inf}

    warm = {}

    def solve_at(f, start):
        b = dict(bindings)
        b["f"] = np.float64(sign * f)

        def fun_and_grad(flat):
            bb = dict(b)
            bb["u"] = C.Cochain(problem._kd0, K, flat)
            val, grad = compiled.value_and_grad(bb, "u")
            return float(np.sum(val)), grad

        if budget["left"] <= 0:
            raise M.FitFailure("bilevel iteration budget exhausted")
        x, _, conv, iters, _ = M.minimize_objective(
            fun_and_grad, start, size, bc, inner_opts)
        budget["left"] -= max(iters, 1)
        if not conv:
            return np.nan, None
        return float(np.sum((x - data) ** 2)), x

    def objective(f):
        val, x = solve_at(f, x0.copy())
        if x is not None and val <= warm.get("best", np.inf):
            warm["best"] = val
            warm["x"] = x
        return val

    def refine_objective(f):
        # inside the bracket successive loads are close: warm-start from
        # the previous refinement solution (same branch of minimizers)
        start = warm.get("x", x0).copy()
        val, x = solve_at(f, start)
        if x is not None:
            warm["x"] = x
        return val

    return M.fit_scalar(objective, lo=lo, hi=hi, tol=tol, coarse=coarse,
                        refine_skip=opts.bilevel_refine_skip,
                        refine_objective=refine_objective)


def _discrete_exact_angles(mesh, f_signed: float) -> np.ndarray:
    """Exact minimizer of the generating discrete energy at a given load."""
    reg = X.build_registry("elastica")
    gt = X.parse(GROUND_TRUTH, reg)
    kd0 = C.CochainKind("dual", 0)
    s_grid, u_grid = solve_continuous(f_signed)
    node_s = mesh.node_coords[:, 0]
    starts = u_grid[np.searchsorted(s_grid, node_s[:-1])]
    compiled = X.CompiledExpr(gt)
    bindings = {"f": np.float64(f_signed),
                "ones": C.ones_cochain(mesh, kd0),
                "int_coch": C.interior_indicator(mesh)}

    def fun_and_grad(flat):
        b = dict(bindings)
        b["u"] = C.Cochain(kd0, mesh, flat)
        val, grad = compiled.value_and_grad(b, "u")
        return float(np.sum(val)), grad

    bc = M.BcSpec("eliminate", np.array([0]), np.zeros(1))
    for gtol in (1e-9, 1e-8, 1e-7):
        opts = M.SolverOptions(gtol=gtol, max_iter=2000)
        x, _, conv, _, _ = M.minimize_objective(
            fun_and_grad, starts.copy(), mesh.num[1], bc, opts)
        if conv:
            return x
    raise RuntimeError(f"discrete rod solve failed at f={f_signed}")


def elastica_dataset(mesh, B: float = DEFAULT_B, loads=DEFAULT_LOADS,
                     noise_seed: int = 0, noise: float | None = None,
                     split_seed: int = 0, source: str | None = None) -> ElasticaProblem:
    """Synthetic rod measurements.

    The default pipeline emulates an experiment: solve the continuous rod,
    sample node positions, perturb them with uniform noise (amplitude
    0.05 x decade of max displacement unless `noise` overrides it), and
    recover the clamp-referred edge angles.  `noise=0` switches to the
    noiseless dataset built from exact solutions of the generating
    discrete model (`source` forces either "continuous" or "discrete").
    """
    if noise is not None and float(noise) == 0.0 and source is None:
        source = "discrete"
    source = source or "continuous"
    rng = np.random.default_rng(noise_seed)
    node_s = mesh.node_coords[:, 0]
    kd0 = C.CochainKind("dual", 0)
    mids = 0.5 * (node_s[:-1] + node_s[1:])
    samples = []
    for P in loads:
        f = P * ROD_LENGTH ** 2 / B
        if source == "discrete":
            angles = _discrete_exact_angles(mesh, f)
            amp = 0.0 if noise is None else float(noise)
            if amp > 0.0:
                angles = angles + rng.uniform(-amp, amp, size=angles.shape)
                angles[0] = 0.0
        else:
            s_grid, u_grid = solve_continuous(f)
            pos = rod_positions(s_grid, u_grid)
            pts = pos[np.searchsorted(s_grid, node_s)].copy()
            amp = noise_amplitude(pts) if noise is None else float(noise)
            if amp > 0.0:
                pts += rng.uniform(-amp, amp, size=pts.shape)
            angles = edge_angles_clamped(pts)
        u = C.Cochain(kd0, mesh, angles)
        coef = np.polyfit(mids, angles, 1)
        x0 = C.Cochain(kd0, mesh, np.polyval(coef, mids))
        bc = M.BcSpec("eliminate", np.array([0]), np.zeros(1))
        samples.append(Sample(u, {"PL2": float(P) * ROD_LENGTH ** 2}, bc, x0,
                              {"P": float(P), "noise_amplitude": amp,
                               "source": source}))
    dataset = make_split(samples, split_seed)
    return ElasticaProblem(mesh, dataset, B=B, noise_seed=noise_seed)
