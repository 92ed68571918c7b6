"""Strongly-typed GP loop: generation, selection, variation, survival.

(mu + lambda) evolution with mu = lambda and overlapping generations:
each generation breeds mu offspring (one-point crossover / mixed mutation /
reproduction of stochastic-tournament winners), evaluates them, and keeps
the best mu of parents plus offspring (truncation).  All genetic
operations run on the coordinator with a single RNG stream; only the pure
candidate evaluations are dispatched to workers, so results are identical
for any worker count.  Repeated genotypes are evaluated once per run
(evaluation is a pure function of the canonical tree).
"""

from __future__ import annotations

import multiprocessing
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import minimize as M
from . import symexpr as X


@dataclass
class GpConfig:
    mu: int = 2000
    generations: int = 100
    crossover_prob: float = 0.2
    mutation_prob: float = 0.8
    mixed_mutation_probs: tuple = (0.8, 0.2, 0.0)
    tournament_probs: tuple = (0.7, 0.3)
    alpha: float = 1.0
    eta: float = 0.1
    seed: int = 0
    workers: int = 1
    hall_of_fame: int = 10
    max_length: int = 100
    min_height: int = 2
    max_height: int = 5
    term_prob: float = 0.3

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if not 0 <= self.crossover_prob + self.mutation_prob <= 1 + 1e-12:
            raise ValueError("crossover_prob + mutation_prob must be <= 1")
        if abs(sum(self.tournament_probs) - 1.0) > 1e-12:
            raise ValueError("tournament probabilities must sum to 1")
        if abs(sum(self.mixed_mutation_probs) - 1.0) > 1e-12:
            raise ValueError("mixed mutation probabilities must sum to 1")


@dataclass
class Individual:
    expr: X.TypedExpr
    created: int = 0
    mse: float | None = None          # None = not evaluated yet
    valid: bool = False
    extra_penalty: float = 0.0
    fitness: float | None = None
    fitted_params: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.expr.length

    def key(self) -> str:
        return X.to_sexpr(self.expr)


def fitness(ind: Individual, alpha: float, eta: float) -> float:
    """F = -(alpha * MSE + eta * length) - extra penalty (maximized)."""
    if ind.mse is None:
        raise ValueError("individual not evaluated")
    return -(alpha * ind.mse + eta * ind.length) - ind.extra_penalty


def init_population(registry, config: GpConfig, rng,
                    seed_exprs=None) -> list[Individual]:
    """mu individuals; optional seed expressions are inserted verbatim."""
    pop = []
    counter = 0
    for expr in seed_exprs or ():
        if isinstance(expr, str):
            expr = X.parse(expr, registry)
        if not X.type_check(expr):
            raise X.ExprError(f"seed expression fails type check: "
                              f"{X.to_sexpr(expr)}")
        if expr.length > config.max_length:
            raise X.ExprError(f"seed expression too long: {X.to_sexpr(expr)}")
        pop.append(Individual(expr, created=counter))
        counter += 1
        if len(pop) >= config.mu:
            break
    while len(pop) < config.mu:
        expr = X.generate(registry, X.FLOAT, rng,
                          min_height=config.min_height,
                          max_height=config.max_height,
                          max_length=config.max_length,
                          term_prob=config.term_prob)
        pop.append(Individual(expr, created=counter))
        counter += 1
    return pop


def stochastic_tournament(pool, probs, rng) -> Individual:
    """Binary tournament: the fitter wins with probability probs[0]."""
    i, j = rng.choice(len(pool), size=2, replace=False)
    a, b = pool[int(i)], pool[int(j)]
    strong, weak = (a, b) if a.fitness >= b.fitness else (b, a)
    return strong if rng.random() < probs[0] else weak


def _typed_positions(expr):
    by_type = {}
    for pos, node in expr.iter_nodes():
        by_type.setdefault(node.rtype, []).append(pos)
    return by_type


def one_point_crossover(a: X.TypedExpr, b: X.TypedExpr, rng,
                        max_length: int = 100):
    """Swap subtrees at a uniformly chosen type-matched node pair."""
    ta, tb = _typed_positions(a), _typed_positions(b)
    common = [t for t in ta if t in tb]
    if not common:
        return a, b
    weights = np.array([len(ta[t]) * len(tb[t]) for t in common], dtype=float)
    t = common[int(rng.choice(len(common), p=weights / weights.sum()))]
    pa = ta[t][int(rng.integers(len(ta[t])))]
    pb = tb[t][int(rng.integers(len(tb[t])))]
    sub_a, sub_b = a.node_at(pa), b.node_at(pb)
    child_a = a.replace_at(pa, sub_b)
    child_b = b.replace_at(pb, sub_a)
    if child_a.length > max_length or child_b.length > max_length:
        return a, b
    return child_a, child_b


def mixed_mutation(expr: X.TypedExpr, registry, probs, rng,
                   max_length: int = 100, retries: int = 8) -> X.TypedExpr:
    """One of: uniform subtree regrowth, node replacement, shrink."""
    which = int(rng.choice(3, p=np.asarray(probs)))
    for _ in range(retries):
        if which == 0:
            out = _mut_uniform(expr, registry, rng)
        elif which == 1:
            out = _mut_node_replacement(expr, registry, rng)
        else:
            out = _mut_shrink(expr, rng, registry)
        if out is not None and out.length <= max_length:
            return out
    return expr


def _mut_uniform(expr, registry, rng):
    pos = int(rng.integers(expr.length))
    target = expr.node_at(pos)
    if registry.min_depth(target.rtype) > 2:
        return None
    try:
        sub = X._gen_subtree(registry, target.rtype, int(rng.integers(0, 3)),
                             False, rng, 0.3)
    except X.GenerationError:
        return None
    return expr.replace_at(pos, sub)


def _mut_node_replacement(expr, registry, rng):
    nodes = list(expr.iter_nodes())
    candidates = []
    for pos, node in nodes:
        if isinstance(node.op, X.Primitive):
            alts = [p for p in registry.primitives.values()
                    if p.arg_types == node.op.arg_types
                    and p.return_type == node.op.return_type
                    and p.name != node.op.name]
            if alts:
                candidates.append((pos, node, alts))
        else:
            leaves = [lv for lv in registry.leaves_of(node.rtype)
                      if lv != node.op]
            if leaves:
                candidates.append((pos, node, leaves))
    if not candidates:
        return expr
    pos, node, alts = candidates[int(rng.integers(len(candidates)))]
    alt = alts[int(rng.integers(len(alts)))]
    if isinstance(node.op, X.Primitive):
        new = X.TypedExpr(alt, node.children)
    else:
        new = X.TypedExpr(alt)
    return expr.replace_at(pos, new)


def _mut_shrink(expr, rng, registry):
    spots = [(pos, node) for pos, node in expr.iter_nodes()
             if isinstance(node.op, X.Primitive)]
    if not spots:
        return expr
    pos, node = spots[int(rng.integers(len(spots)))]
    descendants = [n for p, n in node.iter_nodes()
                   if p > 0 and n.rtype == node.rtype]
    if descendants:
        new = descendants[int(rng.integers(len(descendants)))]
    else:
        leaves = registry.leaves_of(node.rtype)
        if not leaves:
            return expr
        new = X.TypedExpr(leaves[int(rng.integers(len(leaves)))])
    return expr.replace_at(pos, new)


# -- parallel evaluation -----------------------------------------------------

_WORKER_CTX: dict = {}


def _worker_eval(payload):
    idx, text = payload
    problem = _WORKER_CTX["problem"]
    samples = _WORKER_CTX["samples"]
    opts = _WORKER_CTX["opts"]
    try:
        expr = X.parse(text, problem.registry)
        rec = M.evaluate_candidate_full(expr, samples, problem, opts)
    except Exception as exc:  # evaluation must never kill the loop
        rec = M.EvalRecord(M.SENTINEL_MSE, False, reason=f"worker: {exc}")
    return idx, rec


class Evaluator:
    """Caching, optionally parallel, evaluator of candidate trees."""

    def __init__(self, problem, samples, opts=None, workers=1, cache=None):
        self.problem = problem
        self.samples = samples
        self.opts = opts or M.SolverOptions()
        self.workers = max(1, int(workers))
        self.cache: dict[str, M.EvalRecord] = cache if cache is not None else {}
        self.evals = 0
        self._pool = None

    def __enter__(self):
        if self.workers > 1:
            _WORKER_CTX.update(problem=self.problem, samples=self.samples,
                               opts=self.opts)
            ctx = multiprocessing.get_context("fork")
            self._pool = ProcessPoolExecutor(self.workers, mp_context=ctx)
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
        _WORKER_CTX.clear()

    def evaluate_all(self, individuals):
        """Fill mse/penalty/fitted fields; order-stable and cached."""
        todo = []
        seen = set()
        for ind in individuals:
            key = ind.key()
            if key not in self.cache and key not in seen:
                seen.add(key)
                todo.append((key, X.to_sexpr(ind.expr)))
        if todo:
            self.evals += len(todo)
            if self._pool is not None:
                results = list(self._pool.map(
                    _worker_eval, list(enumerate(t[1] for t in todo)),
                    chunksize=max(1, len(todo) // (4 * self.workers))))
                for (i, rec), (key, _) in zip(sorted(results), todo):
                    self.cache[key] = rec
            else:
                for key, text in todo:
                    expr = X.parse(text, self.problem.registry)
                    self.cache[key] = M.evaluate_candidate_full(
                        expr, self.samples, self.problem, self.opts)
        for ind in individuals:
            rec = self.cache[ind.key()]
            ind.mse = rec.mse
            ind.valid = rec.valid
            ind.extra_penalty = rec.extra_penalty
            ind.fitted_params = rec.fitted_params


def _score(pop, config):
    for ind in pop:
        ind.fitness = fitness(ind, config.alpha, config.eta)


def _survivors(pop, offspring, config):
    merged = pop + offspring
    merged.sort(key=lambda i: (-i.fitness, i.length, i.created))
    return merged[:config.mu]


def step_generation(pop, config: GpConfig, evaluator, rng, counter,
                    registry) -> tuple:
    """One (mu + lambda) generation; returns (new_pop, offspring_count)."""
    offspring = []
    for _ in range(config.mu):
        r = rng.random()
        if r < config.crossover_prob:
            p1 = stochastic_tournament(pop, config.tournament_probs, rng)
            p2 = stochastic_tournament(pop, config.tournament_probs, rng)
            child, _ = one_point_crossover(p1.expr, p2.expr, rng,
                                           config.max_length)
        elif r < config.crossover_prob + config.mutation_prob:
            p = stochastic_tournament(pop, config.tournament_probs, rng)
            child = mixed_mutation(p.expr, registry,
                                   config.mixed_mutation_probs, rng,
                                   config.max_length)
        else:
            child = stochastic_tournament(pop, config.tournament_probs,
                                          rng).expr
        offspring.append(Individual(child, created=next(counter)))
    evaluator.evaluate_all(offspring)
    _score(offspring, config)
    return _survivors(pop, offspring, config), len(offspring)


@dataclass
class GenStats:
    gen: int
    best_fitness: float
    mean_abs_fitness: float
    std_abs_fitness: float
    best_length: int
    evals: int
    wall_ms: float

    def as_dict(self):
        return {"gen": self.gen, "best_fitness": self.best_fitness,
                "mean_abs_fitness": self.mean_abs_fitness,
                "std_abs_fitness": self.std_abs_fitness,
                "best_length": self.best_length, "evals": self.evals,
                "wall_ms": self.wall_ms}


class HallOfFame:
    """Best-ever individuals, distinct by canonical simplified print."""

    def __init__(self, size: int):
        self.size = size
        self._entries: dict[str, Individual] = {}

    def update(self, pop):
        for ind in pop:
            if ind.fitness is None:
                continue
            key = X.to_sexpr(X.simplify(ind.expr))
            cur = self._entries.get(key)
            if cur is None or ind.fitness > cur.fitness:
                self._entries[key] = ind
        if len(self._entries) > 4 * self.size:
            self._entries = dict(sorted(
                self._entries.items(),
                key=lambda kv: -kv[1].fitness)[: 2 * self.size])

    def best(self):
        out = sorted(self._entries.values(),
                     key=lambda i: (-i.fitness, i.length, i.created))
        return out[: self.size]


DISCOVERY_SOLVER = M.SolverOptions(gtol=1e-6, max_iter=150,
                                   progress_checks=((35, 0.05), (75, 0.02)),
                                   maxls=20, maxfun_mult=3.0,
                                   bilevel_tol=1e-3, bilevel_coarse=9,
                                   bilevel_inner_max_iter=80,
                                   bilevel_refine_skip=100.0,
                                   bilevel_iter_budget=600)


def run(config: GpConfig, problem, samples=None, seed_exprs=None,
        solver_opts=None, progress=None, cache=None):
    """Full evolution; returns (hall_of_fame, stats records, checks).

    `samples` defaults to the problem's training + validation split.
    Candidate solves default to the discovery-grade solver settings (the
    fitness scale never resolves MSE differences below ~1e-6, so the
    tighter oracle defaults would only burn iterations).  `checks` counts
    structural violations (none expected): type-check failures and
    over-length individuals.
    """
    rng = np.random.default_rng(config.seed)
    registry = problem.registry
    if samples is None:
        samples = problem.dataset.discovery
    counter = iter(range(10 ** 9))
    pop = init_population(registry, config, rng, seed_exprs)
    for ind in pop:
        next(counter)
    stats = []
    hof = HallOfFame(config.hall_of_fame)
    checks = {"type_failures": 0, "length_violations": 0}
    with Evaluator(problem, samples, opts=solver_opts or DISCOVERY_SOLVER,
                   workers=config.workers, cache=cache) as evaluator:
        t0 = time.perf_counter()
        evaluator.evaluate_all(pop)
        _score(pop, config)
        hof.update(pop)
        _audit(pop, config, checks)
        stats.append(_gen_stats(0, pop, evaluator.evals, t0))
        if progress:
            progress(stats[-1])
        for gen in range(1, config.generations + 1):
            t0 = time.perf_counter()
            before = evaluator.evals
            pop, _ = step_generation(pop, config, evaluator, rng, counter,
                                     registry)
            hof.update(pop)
            _audit(pop, config, checks)
            stats.append(_gen_stats(gen, pop, evaluator.evals - before, t0))
            if progress:
                progress(stats[-1])
    return hof.best(), stats, checks


def _audit(pop, config, checks):
    for ind in pop:
        if ind.length > config.max_length:
            checks["length_violations"] += 1
        if not X.type_check(ind.expr):
            checks["type_failures"] += 1


def _gen_stats(gen, pop, evals, t0):
    fits = np.array([i.fitness for i in pop])
    best = int(np.argmax(fits))
    return GenStats(gen, float(fits.max()), float(np.abs(fits).mean()),
                    float(np.abs(fits).std()), pop[best].length, int(evals),
                    1000.0 * (time.perf_counter() - t0))


def derived_seed(base: int, run_index: int) -> int:
    return int(np.random.SeedSequence([base, run_index]).generate_state(1)[0])


def config_with(config: GpConfig, **kw) -> GpConfig:
    return replace(config, **kw)
