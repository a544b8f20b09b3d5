"""Multi-gene GP search loop.

Individuals are lists of gene trees whose weights are refit by least
squares on every evaluation. Selection mixes plain and Pareto tournaments
on (training RMSE, complexity); a fixed elite fraction survives unchanged.
"""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .expr import (Binary, Const, ExprTree, FunctionSet, GrowthConfig, evaluate_columns,
                   get_node, iter_nodes, mutable_points, random_subtree, random_tree,
                   replace_node)
from .model import (MultiGeneModel, Metrics, combine, compute_metrics, predict,
                    rmse, solve_weights)

log = logging.getLogger(__name__)

EARLY_STOP_RMSE = 1e-12


@dataclass(frozen=True)
class RunConfig:
    """Search hyperparameters. Defaults reproduce the published setup."""

    population_size: int = 250
    generations: int = 150
    tournament_size: int = 20
    pareto_tournament_prob: float = 0.3
    elitism_frac: float = 0.3
    max_tree_depth: int = 5
    max_genes: int = 10
    crossover_prob: float = 0.85
    mutation_prob: float = 0.1
    internal_runs: int = 10
    function_set: FunctionSet = field(default_factory=FunctionSet)
    seed: int = 0
    # operator mix
    subtree_crossover_frac: float = 0.5
    mutation_weights: tuple[float, float, float] = (0.7, 0.2, 0.1)
    const_prob: float = 0.1
    terminal_prob: float = 0.5
    early_stop_rmse: float = EARLY_STOP_RMSE

    def __post_init__(self):
        for name in ("pareto_tournament_prob", "elitism_frac", "crossover_prob",
                     "mutation_prob", "subtree_crossover_frac", "const_prob", "terminal_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.crossover_prob + self.mutation_prob > 1.0 + 1e-12:
            raise ValueError("crossover_prob + mutation_prob must not exceed 1")
        for name in ("population_size", "tournament_size", "max_tree_depth",
                     "max_genes", "internal_runs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        w = self.mutation_weights
        if len(w) != 3 or min(w) < 0 or sum(w) <= 0:
            raise ValueError("mutation_weights must be three non-negative numbers")
        if isinstance(self.function_set, dict):
            object.__setattr__(self, "function_set", FunctionSet.from_dict(self.function_set))

    @property
    def n_elites(self) -> int:
        return min(self.population_size, math.ceil(self.elitism_frac * self.population_size - 1e-9))

    def growth(self, n_vars: int, method: str = "ramped") -> GrowthConfig:
        return GrowthConfig(n_vars=n_vars, max_depth=self.max_tree_depth, method=method,
                            function_set=self.function_set, const_prob=self.const_prob,
                            terminal_prob=self.terminal_prob)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["function_set"] = self.function_set.to_dict()
        d["mutation_weights"] = list(self.mutation_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "function_set" in d:
            d["function_set"] = FunctionSet.from_dict(d["function_set"])
        if "mutation_weights" in d:
            d["mutation_weights"] = tuple(d["mutation_weights"])
        return cls(**d)


@dataclass
class Individual:
    genes: tuple[ExprTree, ...]
    model: MultiGeneModel | None = None
    fitness: float = math.inf
    complexity: int = 0
    evaluated: bool = False

    def __post_init__(self):
        self.genes = tuple(self.genes)
        if not self.complexity:
            self.complexity = sum(g.complexity for g in self.genes)

    @property
    def key(self) -> tuple[str, ...]:
        return tuple(g.key for g in self.genes)


def make_rng(seed: int, *spawn_key: int) -> np.random.Generator:
    """Independent stream for (seed, spawn_key...); re-creatable on its own."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(spawn_key)))


# --------------------------------------------------------------------------
# evaluation

class GeneCache:
    """LRU cache of gene output columns for one dataset, keyed by tree text."""

    def __init__(self, data, max_entries: int = 4000):
        self.data = data
        self.cols = data.input_columns
        self.n = data.row_count
        self.max_entries = max_entries
        self._store: OrderedDict[str, np.ndarray] = OrderedDict()

    def column(self, tree: ExprTree) -> np.ndarray:
        k = tree.key
        col = self._store.get(k)
        if col is not None:
            self._store.move_to_end(k)
            return col
        col = evaluate_columns(tree, self.cols, self.n)
        col.flags.writeable = False
        self._store[k] = col
        if len(self._store) > self.max_entries:
            self._store.popitem(last=False)
        return col


def evaluate_individual(ind: Individual, train, cache: GeneCache | None = None) -> Individual:
    """Fit weights and score by training RMSE; +inf on any non-finite."""
    if cache is None:
        cache = GeneCache(train, max_entries=len(ind.genes))
    y = train.y
    n = train.row_count
    penalty = Individual(ind.genes, None, math.inf, ind.complexity, True)
    if n <= len(ind.genes) + 1:
        return penalty
    G = np.empty((n, len(ind.genes)))
    for k, g in enumerate(ind.genes):
        G[:, k] = cache.column(g)
    if not np.all(np.isfinite(G)):
        return penalty
    try:
        with np.errstate(all="ignore"):
            coef = solve_weights(G, y)
    except np.linalg.LinAlgError:
        return penalty
    if not np.all(np.isfinite(coef)):
        return penalty
    yhat = combine(coef[0], coef[1:], G)
    fit = rmse(y, yhat)
    if not math.isfinite(fit):
        return penalty
    model = MultiGeneModel(ind.genes, coef[0], coef[1:])
    return Individual(ind.genes, model, fit, ind.complexity, True)


def init_population(config: RunConfig, n_vars: int, rng: np.random.Generator) -> list[Individual]:
    if n_vars < 1:
        raise ValueError("need at least one input variable")
    growth = config.growth(n_vars)
    pop = []
    for _ in range(config.population_size):
        n_genes = int(rng.integers(1, config.max_genes + 1))
        pop.append(Individual(tuple(random_tree(growth, rng) for _ in range(n_genes))))
    return pop


# --------------------------------------------------------------------------
# selection

def dominates(a: tuple[float, int], b: tuple[float, int]) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_indices(points: Sequence[tuple[float, int]]) -> list[int]:
    """Indices of the non-dominated points, in input order. O(n log n)."""
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1]))
    keep = []
    best_c = math.inf  # min complexity among strictly better fitness
    i = 0
    while i < len(order):
        f = points[order[i]][0]
        j = i
        while j < len(order) and points[order[j]][0] == f:
            j += 1
        group_min = points[order[i]][1]
        if group_min < best_c:
            keep.extend(k for k in order[i:j] if points[k][1] == group_min)
        best_c = min(best_c, group_min)
        i = j
    return sorted(keep)


def pareto_front(pop: Sequence[Individual]) -> list[Individual]:
    idx = pareto_indices([(ind.fitness, ind.complexity) for ind in pop])
    return [pop[i] for i in idx]


def draw_contestants(n: int, config: RunConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n, size=min(config.tournament_size, n), replace=False)


def tournament_winner(pop: Sequence[Individual], drawn: Sequence[int], config: RunConfig,
                      rng: np.random.Generator) -> int:
    """Population index of the winner among the ``drawn`` contestants."""
    if config.pareto_tournament_prob > 0 and rng.random() < config.pareto_tournament_prob:
        pts = [(pop[i].fitness, pop[i].complexity) for i in drawn]
        front = pareto_indices(pts)
        return int(drawn[front[int(rng.integers(len(front)))]])
    best = 0
    for pos in range(1, len(drawn)):
        a, b = pop[drawn[pos]], pop[drawn[best]]
        if (a.fitness, a.complexity) < (b.fitness, b.complexity):
            best = pos
    return int(drawn[best])


def _tournament_index(pop: Sequence[Individual], config: RunConfig, rng: np.random.Generator) -> int:
    return tournament_winner(pop, draw_contestants(len(pop), config, rng), config, rng)


def tournament_select(pop: Sequence[Individual], config: RunConfig,
                      rng: np.random.Generator) -> Individual:
    """Plain tournament, or with ``pareto_tournament_prob`` a random
    member of the contestants' (fitness, complexity) Pareto front.

    Plain ties go to lower complexity, then to the earlier draw.
    """
    if not pop:
        raise ValueError("empty population")
    return pop[_tournament_index(pop, config, rng)]


# --------------------------------------------------------------------------
# variation

def _subtree_crossover(ga: ExprTree, gb: ExprTree, max_depth: int, rng) -> tuple[ExprTree, ExprTree]:
    pa = mutable_points(ga.root)
    pb = mutable_points(gb.root)
    path_a, node_a, _ = pa[int(rng.integers(len(pa)))]
    path_b, node_b, _ = pb[int(rng.integers(len(pb)))]
    ca = ExprTree(replace_node(ga.root, path_a, node_b))
    cb = ExprTree(replace_node(gb.root, path_b, node_a))
    if ca.depth > max_depth:
        ca = ga
    if cb.depth > max_depth:
        cb = gb
    return ca, cb


def _clamp_genes(genes: list[ExprTree], fallback: Sequence[ExprTree], max_genes: int,
                 rng) -> tuple[ExprTree, ...]:
    if not genes:
        return (fallback[int(rng.integers(len(fallback)))],)
    while len(genes) > max_genes:
        del genes[int(rng.integers(len(genes)))]
    return tuple(genes)


def crossover(a: Individual, b: Individual, config: RunConfig,
              rng: np.random.Generator) -> tuple[Individual, Individual]:
    """Subtree swap between one gene of each parent, or two-point exchange
    of contiguous gene runs, with equal probability by default."""
    if rng.random() < config.subtree_crossover_frac:
        ia = int(rng.integers(len(a.genes)))
        ib = int(rng.integers(len(b.genes)))
        ca, cb = _subtree_crossover(a.genes[ia], b.genes[ib], config.max_tree_depth, rng)
        ga = list(a.genes)
        gb = list(b.genes)
        ga[ia] = ca
        gb[ib] = cb
        return Individual(tuple(ga)), Individual(tuple(gb))
    a1, a2 = sorted(int(v) for v in rng.integers(0, len(a.genes) + 1, size=2))
    b1, b2 = sorted(int(v) for v in rng.integers(0, len(b.genes) + 1, size=2))
    ga = list(a.genes[:a1]) + list(b.genes[b1:b2]) + list(a.genes[a2:])
    gb = list(b.genes[:b1]) + list(a.genes[a1:a2]) + list(b.genes[b2:])
    return (Individual(_clamp_genes(ga, a.genes, config.max_genes, rng)),
            Individual(_clamp_genes(gb, b.genes, config.max_genes, rng)))


def _subtree_mutation(genes: list[ExprTree], growth: GrowthConfig, rng) -> None:
    k = int(rng.integers(len(genes)))
    pts = mutable_points(genes[k].root)
    path, _, depth = pts[int(rng.integers(len(pts)))]
    new = random_subtree(growth, rng, growth.max_depth - depth + 1)
    genes[k] = ExprTree(replace_node(genes[k].root, path, new))


def _constant_points(genes: Sequence[ExprTree]) -> list[tuple[int, tuple, bool]]:
    out = []
    for k, g in enumerate(genes):
        for path, node, _ in iter_nodes(g.root):
            if type(node) is Binary and node.op == "pow":
                out.append((k, path + (1,), True))
            elif type(node) is Const:
                if path and path[-1] == 1 and _is_exponent(g.root, path):
                    continue
                out.append((k, path, False))
    return out


def _is_exponent(root, path) -> bool:
    parent = get_node(root, path[:-1])
    return type(parent) is Binary and parent.op == "pow"


def mutate(ind: Individual, config: RunConfig, rng: np.random.Generator,
           n_vars: int) -> Individual:
    """Subtree replacement, Gaussian constant perturbation, or gene
    add/delete; infeasible draws fall back to subtree replacement."""
    growth = config.growth(n_vars, method="grow")
    genes = list(ind.genes)
    w = np.asarray(config.mutation_weights, dtype=float)
    kind = int(rng.choice(3, p=w / w.sum()))
    if kind == 1:
        pts = _constant_points(genes)
        if pts:
            k, path, is_exp = pts[int(rng.integers(len(pts)))]
            v = get_node(genes[k].root, path).value
            nv = v + rng.normal(0.0, 0.1 * abs(v) + 0.01)
            if is_exp:
                lo, hi = config.function_set.exponent_range
                nv = min(hi, max(lo, nv))
            genes[k] = ExprTree(replace_node(genes[k].root, path, Const(float(nv))))
            return Individual(tuple(genes))
    elif kind == 2:
        if rng.random() < 0.5:
            if len(genes) < config.max_genes:
                genes.append(random_tree(config.growth(n_vars), rng))
                return Individual(tuple(genes))
        elif len(genes) > 1:
            del genes[int(rng.integers(len(genes)))]
            return Individual(tuple(genes))
    _subtree_mutation(genes, growth, rng)
    return Individual(tuple(genes))


# --------------------------------------------------------------------------
# generations and runs

def _rank_key(pop: Sequence[Individual]):
    return lambda i: (pop[i].fitness, pop[i].complexity, i)


def step_generation(pop: list[Individual], train, config: RunConfig, rng: np.random.Generator,
                    cache: GeneCache | None = None) -> list[Individual]:
    """Elites survive unchanged; the rest come from crossover, mutation
    or plain copies of tournament winners."""
    if cache is None:
        cache = GeneCache(train)
    n = len(pop)
    n_vars = train.n_inputs
    order = sorted(range(n), key=_rank_key(pop))
    new = [pop[i] for i in order[:min(config.n_elites, n)]]
    while len(new) < n:
        r = rng.random()
        if r < config.crossover_prob:
            a = pop[_tournament_index(pop, config, rng)]
            b = pop[_tournament_index(pop, config, rng)]
            children = crossover(a, b, config, rng)
        elif r < config.crossover_prob + config.mutation_prob:
            parent = pop[_tournament_index(pop, config, rng)]
            children = (mutate(parent, config, rng, n_vars),)
        else:
            children = (pop[_tournament_index(pop, config, rng)],)
        for child in children:
            if len(new) >= n:
                break
            if not child.evaluated:
                child = evaluate_individual(child, train, cache)
            new.append(child)
    return new


@dataclass(frozen=True)
class GenerationRecord:
    generation: int
    best_rmse: float
    mean_rmse: float
    front_size: int
    best_complexity: int


LOG_HEADER = "generation,best_rmse,mean_rmse,front_size,best_complexity"


def log_to_csv(records: Sequence[GenerationRecord]) -> str:
    rows = [LOG_HEADER]
    for r in records:
        rows.append(f"{r.generation},{r.best_rmse!r},{r.mean_rmse!r},{r.front_size},{r.best_complexity}")
    return "\n".join(rows) + "\n"


def _record(gen: int, pop: Sequence[Individual]) -> GenerationRecord:
    best = pop[min(range(len(pop)), key=_rank_key(pop))]
    finite = [p.fitness for p in pop if math.isfinite(p.fitness)]
    mean = math.fsum(finite) / len(finite) if finite else math.inf
    return GenerationRecord(gen, best.fitness, mean, len(pareto_front(pop)), best.complexity)


@dataclass
class RunResult:
    population: list[Individual]
    log: list[GenerationRecord]
    front: list[Individual]
    front_test_metrics: list[Metrics | None]

    @property
    def best(self) -> Individual:
        return min(self.population, key=lambda p: (p.fitness, p.complexity))


def _test_metrics(ind: Individual, test) -> Metrics | None:
    if test is None or ind.model is None:
        return None
    yhat = predict(ind.model, test)
    if not np.all(np.isfinite(yhat)):
        return Metrics(math.nan, math.inf, math.inf, math.inf)
    return compute_metrics(test.y, yhat)


def evolve_run(config: RunConfig, train, test=None, rng: np.random.Generator | None = None,
               callback: Callable[[int, list[Individual]], None] | None = None) -> RunResult:
    """One GP run. ``test`` is only used to score the final front."""
    rng = make_rng(config.seed) if rng is None else rng
    cache = GeneCache(train)
    pop = [evaluate_individual(ind, train, cache)
           for ind in init_population(config, train.n_inputs, rng)]
    records = [_record(0, pop)]
    if callback is not None:
        callback(0, pop)
    for gen in range(1, config.generations + 1):
        if records[-1].best_rmse < config.early_stop_rmse:
            break
        pop = step_generation(pop, train, config, rng, cache)
        records.append(_record(gen, pop))
        if callback is not None:
            callback(gen, pop)
        log.debug("gen %d best %.6g mean %.6g", gen, records[-1].best_rmse, records[-1].mean_rmse)
    front = [p for p in pareto_front(pop) if math.isfinite(p.fitness)]
    return RunResult(pop, records, front, [_test_metrics(p, test) for p in front])


@dataclass
class MultiRunResult:
    best: Individual
    best_test_metrics: Metrics | None
    front: list[Individual]
    front_test_metrics: list[Metrics | None]
    runs: list[RunResult]

    @property
    def model(self) -> MultiGeneModel:
        return self.best.model


def _selection_key(ind: Individual, m: Metrics | None):
    r2 = -math.inf
    if m is not None and math.isfinite(m.r2):
        r2 = m.r2
    # highest R^2 first, then lower complexity, then better training fit
    return (-r2, ind.complexity, ind.fitness)


def select_from_front(front: Sequence[Individual], metrics: Sequence[Metrics | None],
                      train=None) -> int:
    """Index of the front member with highest test R^2 (ties: simpler).

    Without test metrics the training fit decides.
    """
    if not front:
        raise ValueError("empty front")
    if all(m is None for m in metrics):
        return min(range(len(front)), key=lambda i: (front[i].fitness, front[i].complexity, i))
    return min(range(len(front)), key=lambda i: _selection_key(front[i], metrics[i]) + (i,))


def multi_run(config: RunConfig, train, test=None,
              callback: Callable[[int, int, list[Individual]], None] | None = None) -> MultiRunResult:
    """``internal_runs`` independent runs, merged into one Pareto front."""
    runs = []
    for r in range(config.internal_runs):
        rng = make_rng(config.seed, r)
        cb = None if callback is None else (lambda g, p, r=r: callback(r, g, p))
        runs.append(evolve_run(config, train, test, rng, cb))
        log.info("internal run %d: best rmse %.6g", r, runs[-1].log[-1].best_rmse)
    merged: list[Individual] = []
    seen: set[tuple[str, ...]] = set()
    for res in runs:
        for ind in res.population:
            if not math.isfinite(ind.fitness) or ind.key in seen:
                continue
            seen.add(ind.key)
            merged.append(ind)
    if not merged:
        raise RuntimeError("no individual with finite fitness in any run")
    front = pareto_front(merged)
    metrics = [_test_metrics(p, test) for p in front]
    k = select_from_front(front, metrics)
    return MultiRunResult(front[k], metrics[k], front, metrics, runs)
