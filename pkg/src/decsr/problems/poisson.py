"""Poisson benchmark on the unit square.

Twelve scalar fields sampled at the mesh nodes; sources are the discrete
Laplace-de Rham images of the sampled cochains, so the generating model's
minimizer reproduces each sample exactly up to solver tolerance.  Dirichlet
values come from the samples' boundary nodes and the initial guess is the
null cochain.
"""

from __future__ import annotations

import numpy as np

from .. import cochain as C
from .. import minimize as M
from .. import symexpr as X
from .base import Problem, Sample, make_split

GROUND_TRUTH = "(Sub (MulF 0.5 (InnP1S (dP0S u) (dP0S u))) (InnP0S u f))"

_FIELDS = []
for i in range(4):
    _FIELDS.append(("u1", i, lambda x, y, i=i:
                    (i + 1) * np.exp(np.sin(x)) + (i + 1) ** 2 * np.exp(np.cos(y))))
for i in range(4):
    _FIELDS.append(("u2", i, lambda x, y, i=i:
                    (i + 1) * np.log(1 + x) + np.log(1 + y) / (i + 1)))
for i in range(4):
    _FIELDS.append(("u3", i, lambda x, y, i=i: x ** (i + 3) + y ** (i + 3)))


class PoissonProblem(Problem):
    id = "poisson"
    alpha = 1.0
    unknown = "u"

    def __init__(self, mesh, dataset, split_seed=0):
        super().__init__(mesh, X.build_registry("poisson"), dataset)
        self.ground_truth = X.parse(GROUND_TRUTH, self.registry)
        self.split_seed = split_seed
        self._k0 = C.CochainKind("primal", 0)
        self._bnd = mesh.boundary_node_indices()

    def archive_params(self):
        return {"split_seed": self.split_seed}

    def state_kind(self):
        return self._k0

    def make_objective(self, expr, samples, params):
        K = self.mesh
        f = C.Cochain(self._k0, K,
                      np.stack([s.inputs["f"].coeffs for s in samples]))
        bindings = {"f": f}
        compiled = X.CompiledExpr(expr)
        x0 = self.stack_x0(samples)
        shape = x0.shape

        def fun_and_grad(flat):
            b = dict(bindings)
            b["u"] = C.Cochain(self._k0, K, flat.reshape(shape))
            val, grad = compiled.value_and_grad(b, "u")
            return float(np.sum(val)), grad.reshape(flat.shape)

        return fun_and_grad, x0.ravel(), K.num_nodes, self.stack_bc(samples)

    def solution_mse(self, x_flat, samples):
        sols = x_flat.reshape(len(samples), -1)
        data = np.stack([s.unknown_data.coeffs for s in samples])
        return float(np.mean(np.sum((sols - data) ** 2, axis=1)))

    def probe_samples(self, rng, count):
        K = self.mesh
        x, y = K.node_coords[:, 0], K.node_coords[:, 1]
        out = []
        for _ in range(count):
            a = rng.uniform(-2, 2, size=6)
            c = rng.uniform(0, np.pi, size=2)
            vals = (a[0] + a[1] * x + a[2] * y + a[3] * x * x + a[4] * y * y
                    + a[5] * np.sin(x + c[0]) * np.cos(y + c[1]))
            out.append(self._sample_from_field(vals, {"probe": True}))
        return out

    def _sample_from_field(self, vals, meta):
        K = self.mesh
        u = C.Cochain(self._k0, K, vals)
        f = C.laplace_de_rham(u)
        bc = M.BcSpec("eliminate", self._bnd, vals[self._bnd])
        x0 = C.zeros(K, self._k0)
        return Sample(u, {"f": f}, bc, x0, meta)


def poisson_dataset(mesh, split_seed: int = 0) -> PoissonProblem:
    """12 samples from the three analytic field families, split 6/3/3."""
    x, y = mesh.node_coords[:, 0], mesh.node_coords[:, 1]
    k0 = C.CochainKind("primal", 0)
    bnd = mesh.boundary_node_indices()
    samples = []
    for fam, i, fn in _FIELDS:
        vals = fn(x, y)
        u = C.Cochain(k0, mesh, vals)
        f = C.laplace_de_rham(u)
        bc = M.BcSpec("eliminate", bnd, vals[bnd])
        samples.append(Sample(u, {"f": f}, bc, C.zeros(mesh, k0),
                              {"family": fam, "i": i}))
    dataset = make_split(samples, split_seed)
    return PoissonProblem(mesh, dataset, split_seed)
