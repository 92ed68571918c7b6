import numpy as np
import pytest

from decsr import cochain as C
from decsr import simplicial as S
from decsr import symexpr as X

DIRICHLET = "(SubF (MulF 0.5 (InnP1S (dP0S u) (dP0S u))) (InnP0S u f))"


@pytest.fixture(scope="module")
def poisson_reg():
    return X.build_registry("poisson")


@pytest.fixture(scope="module")
def elastica_reg():
    return X.build_registry("elastica")


@pytest.fixture(scope="module")
def elasticity_reg():
    return X.build_registry("elasticity")


def test_registry_contents(poisson_reg, elastica_reg, elasticity_reg):
    assert "InnP0S" in poisson_reg.primitives
    assert "dP0S" in poisson_reg.primitives
    assert not any(name.endswith("T") for name in poisson_reg.primitives)
    assert poisson_reg.constants == (0.5, 2.0, -1.0)
    assert "MulvD0" in elasticity_reg.primitives
    assert "trD0T" in elasticity_reg.primitives
    assert "tranP1T" in elasticity_reg.primitives
    assert "symD0T" in elasticity_reg.primitives
    assert "dP0S" not in elasticity_reg.primitives
    assert "LogD0S" not in elasticity_reg.primitives
    assert elasticity_reg.constants == (0.5, 2.0, -1.0, 10.0, 0.1)
    assert elastica_reg.terminals["u"] == C.CochainKind("dual", 0)
    assert elastica_reg.terminals["f"] == X.FLOAT
    with pytest.raises(KeyError):
        X.build_registry("heat")


def test_untyped_registry_exact_shape():
    reg = X.build_registry("elasticity_untyped")
    assert sorted(reg.primitives) == ["Add", "Div", "MulF", "SqrtF",
                                      "SquareF", "Sub"]
    assert sorted(reg.terminals) == ["F11", "F12", "F21", "F22"]
    assert all(t == X.FLOAT for t in reg.terminals.values())
    assert reg.constants == (0.5, 2.0, -1.0, 10.0, 0.1)


def test_parse_dirichlet_energy(poisson_reg):
    tree = X.parse(DIRICHLET, poisson_reg)
    assert tree.rtype == X.FLOAT
    assert tree.length == 11
    canon = X.to_sexpr(tree)
    assert X.to_sexpr(X.parse(canon, poisson_reg)) == canon


def test_parse_type_error_names_node(poisson_reg):
    with pytest.raises(C.CochainTypeError, match="InnP0S"):
        X.parse("(InnP0S (dP0S u) u)", poisson_reg)


def test_parse_syntax_errors(poisson_reg):
    with pytest.raises(X.ExprError, match="position"):
        X.parse("(InnP0S u zz)", poisson_reg)
    with pytest.raises(X.ExprError):
        X.parse("(InnP0S u u", poisson_reg)
    with pytest.raises(X.ExprError, match="unknown primitive"):
        X.parse("(Frobnicate u u)", poisson_reg)
    with pytest.raises(X.ExprError, match="trailing"):
        X.parse("(InnP0S u u) extra", poisson_reg)


def test_generate_poisson_batch(poisson_reg):
    rng = np.random.default_rng(7)
    for _ in range(1000):
        t = X.generate(poisson_reg, X.FLOAT, rng)
        assert t.rtype == X.FLOAT
        assert X.type_check(t)
        assert "u" in t.terminal_names()
        assert t.length <= 100
        assert 2 <= t.height <= 5


def test_generate_height_histogram(poisson_reg):
    rng = np.random.default_rng(11)
    heights = [X.generate(poisson_reg, X.FLOAT, rng).height
               for _ in range(10000)]
    counts = {h: heights.count(h) for h in (2, 3, 4, 5)}
    assert all(counts[h] > 0 for h in (2, 3, 4, 5)), counts


def test_generate_cochain_root(poisson_reg):
    rng = np.random.default_rng(3)
    t = X.generate(poisson_reg, C.CochainKind("primal", 1), rng,
                   require_terminals=())
    assert t.rtype == C.CochainKind("primal", 1)


def test_evaluate_matches_manual(square_mesh, poisson_reg, rng):
    tree = X.parse(DIRICHLET, poisson_reg)
    k0 = C.CochainKind("primal", 0)
    u = C.Cochain(k0, square_mesh, rng.standard_normal(square_mesh.num[0]))
    f = C.Cochain(k0, square_mesh, rng.standard_normal(square_mesh.num[0]))
    got = X.evaluate(tree, {"u": u, "f": f})
    du = C.coboundary(u)
    want = 0.5 * C.inner(du, du) - C.inner(u, f)
    assert got == pytest.approx(want, abs=1e-14 * max(abs(want), 1.0))


def test_evaluate_constant(poisson_reg):
    assert X.evaluate(X.TypedExpr(X.Constant(2.0)), {}) == 2.0


def test_evaluate_log_negative_no_crash(square_mesh, poisson_reg):
    tree = X.parse("(InnP0S u (LogP0S u))", poisson_reg)
    k0 = C.CochainKind("primal", 0)
    u = C.Cochain(k0, square_mesh, -np.ones(square_mesh.num[0]))
    out = X.evaluate(tree, {"u": u})
    assert not np.isfinite(out)


def test_evaluate_missing_binding(square_mesh, poisson_reg):
    tree = X.parse("(InnP0S u u)", poisson_reg)
    with pytest.raises(KeyError, match="u"):
        X.evaluate(tree, {})


def test_evaluate_kind_mismatch(square_mesh, poisson_reg, rng):
    tree = X.parse("(InnP0S u u)", poisson_reg)
    bad = C.Cochain(C.CochainKind("primal", 1), square_mesh,
                    rng.standard_normal(square_mesh.num[1]))
    with pytest.raises(C.CochainTypeError):
        X.evaluate(tree, {"u": bad})


def test_gradient_quadratic_form(square_mesh, poisson_reg, rng):
    tree = X.parse("(InnP0S u u)", poisson_reg)
    k0 = C.CochainKind("primal", 0)
    u = C.Cochain(k0, square_mesh, rng.standard_normal(square_mesh.num[0]))
    g = X.gradient(tree, "u", {"u": u})
    want = 2.0 * square_mesh.hodge_diag(0) * u.coeffs
    assert np.abs(g.coeffs - want).max() < 1e-14 * np.abs(want).max()


def _fd_gradient(tree, bindings, wrt, h=1e-6):
    base = bindings[wrt]
    fd = np.zeros_like(base.coeffs)
    flat = base.coeffs.ravel()
    for i in range(flat.size):
        for sgn in (1.0, -1.0):
            pert = flat.copy()
            pert[i] += sgn * h
            b = dict(bindings)
            b[wrt] = C.Cochain(base.kind, base.complex,
                               pert.reshape(base.coeffs.shape))
            fd.ravel()[i] += sgn * X.evaluate(tree, b) / (2 * h)
    return fd


def test_gradient_vs_fd_random_trees(poisson_reg, rng):
    K = S.unit_square_mesh(25, seed=2)
    k0 = C.CochainKind("primal", 0)
    checked = 0
    tries = 0
    while checked < 12 and tries < 200:
        tries += 1
        tree = X.generate(poisson_reg, X.FLOAT, rng)
        u = C.Cochain(k0, K, 0.5 + 0.2 * rng.random(K.num[0]))
        f = C.Cochain(k0, K, 0.5 + 0.2 * rng.random(K.num[0]))
        bindings = {"u": u, "f": f}
        try:
            g = X.gradient(tree, "u", bindings).coeffs
        except X.NonFiniteEnergyError:
            continue
        if not np.all(np.isfinite(g)):
            continue
        fd = _fd_gradient(tree, bindings, "u")
        scale = max(np.abs(fd).max(), 1e-8)
        if np.abs(g - fd).max() <= 1e-5 * scale:
            checked += 1
        else:
            raise AssertionError(
                f"FD mismatch for {X.to_sexpr(tree)}: "
                f"{np.abs(g - fd).max() / scale:.2e}")
    assert checked >= 12


def test_gradient_nonfinite_raises(square_mesh, poisson_reg):
    tree = X.parse("(InnP0S u (LogP0S u))", poisson_reg)
    k0 = C.CochainKind("primal", 0)
    u = C.Cochain(k0, square_mesh, -np.ones(square_mesh.num[0]))
    with pytest.raises(X.NonFiniteEnergyError):
        X.gradient(tree, "u", {"u": u})


def test_gradient_stationary_at_minimizer(poisson_problem):
    from decsr import minimize as M
    prob = poisson_problem
    sample = prob.dataset.train[0]
    fg, x0, size, bc = prob.make_objective(prob.ground_truth, [sample], {})
    x, e, conv, _, gn = M.minimize_objective(fg, x0, size, bc,
                                             M.SolverOptions())
    assert conv
    _, g = fg(x)
    free = np.setdiff1d(np.arange(size), bc.fixed_idx)
    assert np.abs(g.reshape(-1)[free]).max() <= 1e-6 * max(1.0, abs(e))


def test_simplify_rules(poisson_reg):
    t = X.parse("(MulF 1.0 (InnP0S u u))", poisson_reg)
    assert X.to_sexpr(X.simplify(t)) == "(InnP0S u u)"
    t = X.parse("(Add 0.5 0.5)", poisson_reg)
    assert X.to_sexpr(X.simplify(t)) == "1"
    t = X.parse("(MulF -1 (MulF -1 (InnP0S u f)))", poisson_reg)
    assert X.to_sexpr(X.simplify(t)) == "(InnP0S u f)"
    t = X.parse("(MulP0S u 1.0)", poisson_reg)
    assert X.to_sexpr(X.simplify(t)) == "u"


def test_simplify_ones_elimination(elastica_reg):
    t = X.parse("(CochMulD0S u ones)", elastica_reg)
    assert X.to_sexpr(X.simplify(t)) == "u"


def test_simplify_preserves_value(poisson_reg, rng):
    K = S.unit_square_mesh(25, seed=4)
    k0 = C.CochainKind("primal", 0)
    count = 0
    for _ in range(100):
        tree = X.generate(poisson_reg, X.FLOAT, rng)
        simp = X.simplify(tree)
        u = C.Cochain(k0, K, 0.4 + 0.3 * rng.random(K.num[0]))
        f = C.Cochain(k0, K, 0.4 + 0.3 * rng.random(K.num[0]))
        a = X.evaluate(tree, {"u": u, "f": f})
        b = X.evaluate(simp, {"u": u, "f": f})
        if np.isfinite(a) or np.isfinite(b):
            assert a == pytest.approx(b, abs=1e-12 * max(abs(a), 1.0))
            count += 1
    assert count > 50


def test_replace_at_type_guard(poisson_reg):
    t = X.parse(DIRICHLET, poisson_reg)
    bad = X.parse("(dP0S u)", poisson_reg)
    with pytest.raises(C.CochainTypeError):
        t.replace_at(0, bad)


def test_canonical_float_format(poisson_reg):
    t = X.TypedExpr(X.Constant(1 / 3))
    text = X.to_sexpr(t)
    assert float(text) == 1 / 3  # 17 significant digits round-trip
