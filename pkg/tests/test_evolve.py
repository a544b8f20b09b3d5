import math
from collections import Counter

import numpy as np
import pytest

from mggp.data import Dataset, split
from mggp.expr import Binary, Const, iter_nodes, parse_infix
from mggp.evolve import (GeneCache, Individual, RunConfig, crossover, dominates,
                         draw_contestants, evaluate_individual, evolve_run, init_population,
                         log_to_csv, make_rng, multi_run, mutate, pareto_front,
                         pareto_indices, select_from_front, step_generation,
                         tournament_winner)
from mggp.model import Metrics, compute_metrics, predict


def brute_front(points):
    return [i for i, p in enumerate(points)
            if not any(dominates(q, p) for j, q in enumerate(points) if j != i)]


def fake(fitness, complexity):
    return Individual((), None, float(fitness), int(complexity), True)


def closure_ok(ind, config):
    return 1 <= len(ind.genes) <= config.max_genes and all(
        g.depth <= config.max_tree_depth for g in ind.genes)


@pytest.fixture
def quad_split(rng):
    X = rng.uniform(-2, 2, (250, 3))
    y = 1 + 2 * X[:, 0] + 0.5 * X[:, 1] ** 2 - np.exp(-X[:, 2])
    return split(Dataset.from_arrays(X, y), 0.8, rng)


# ---------------------------------------------------------------- config

def test_defaults_and_elites():
    c = RunConfig()
    assert (c.population_size, c.generations, c.tournament_size) == (250, 150, 20)
    assert (c.max_tree_depth, c.max_genes, c.internal_runs) == (5, 10, 10)
    assert c.n_elites == 75
    assert RunConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("kw", [{"crossover_prob": 0.95, "mutation_prob": 0.1},
                                {"elitism_frac": 1.5}, {"population_size": 0}])
def test_invalid_config_rejected(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw)


def test_unknown_config_key():
    with pytest.raises((TypeError, ValueError)):
        RunConfig.from_dict({"populaton_size": 10})


# ---------------------------------------------------------------- initialisation

def test_init_population_shape(rng):
    pop = init_population(RunConfig(), 4, rng)
    assert len(pop) == 250
    assert all(closure_ok(p, RunConfig()) for p in pop)
    assert max(len(p.genes) for p in pop) > 1


def test_single_gene_cap(rng):
    cfg = RunConfig(max_genes=1)
    assert all(len(p.genes) == 1 for p in init_population(cfg, 3, rng))


def test_init_depth_cap(rng):
    cfg = RunConfig(max_tree_depth=3, population_size=100)
    for p in init_population(cfg, 3, rng):
        assert all(g.depth <= 3 for g in p.genes)


# ---------------------------------------------------------------- evaluation

def test_exact_gene_set_zero_fitness(small_dataset):
    ind = evaluate_individual(Individual((parse_infix("x1"), parse_infix("(x2^2)"))), small_dataset)
    assert ind.fitness < 1e-12
    assert ind.evaluated and ind.model is not None


def test_non_finite_gene_penalised():
    X = np.linspace(-1, 1, 20).reshape(-1, 1)
    ds = Dataset.from_arrays(X, X[:, 0])
    ind = evaluate_individual(Individual((parse_infix("log(x1)"),)), ds)
    assert ind.fitness == math.inf and ind.model is None


def test_fitness_equals_metric_rmse(quad_split, rng):
    train, _ = quad_split
    cache = GeneCache(train)
    for ind in init_population(RunConfig(population_size=60), train.n_inputs, rng):
        ev = evaluate_individual(ind, train, cache)
        if math.isfinite(ev.fitness):
            assert ev.fitness == compute_metrics(train.y, predict(ev.model, train)).rmse


def test_cache_does_not_change_fitness(quad_split, rng):
    train, _ = quad_split
    cache = GeneCache(train, max_entries=5)
    for ind in init_population(RunConfig(population_size=40), train.n_inputs, rng):
        a = evaluate_individual(ind, train, cache).fitness
        b = evaluate_individual(ind, train).fitness
        assert a == b or (math.isinf(a) and math.isinf(b))


# ---------------------------------------------------------------- selection

def test_pareto_matches_brute_force(rng):
    for _ in range(100):
        pts = [(float(rng.integers(0, 15)), int(rng.integers(1, 15))) for _ in range(250)]
        assert pareto_indices(pts) == brute_front(pts)


def test_pareto_with_inf_and_duplicates():
    pts = [(math.inf, 1), (1.0, 5), (1.0, 5), (0.5, 9), (2.0, 1)]
    assert pareto_indices(pts) == brute_front(pts) == [1, 2, 3, 4]


def test_pareto_front_order_and_identity(rng):
    pop = [fake(rng.random(), rng.integers(1, 50)) for _ in range(100)]
    front = pareto_front(pop)
    assert all(any(f is p for p in pop) for f in front)
    for f in front:
        assert not any(dominates((q.fitness, q.complexity), (f.fitness, f.complexity)) for q in pop)


def test_plain_tournament_picks_lowest_fitness(rng):
    cfg = RunConfig(pareto_tournament_prob=0.0)
    pop = [fake(rng.random(), rng.integers(1, 30)) for _ in range(250)]
    for _ in range(500):
        drawn = draw_contestants(len(pop), cfg, rng)
        assert len(drawn) == 20 and len(set(drawn.tolist())) == 20
        w = tournament_winner(pop, drawn, cfg, rng)
        assert pop[w].fitness == min(pop[i].fitness for i in drawn)


def test_plain_tournament_tie_goes_to_simpler(rng):
    cfg = RunConfig(pareto_tournament_prob=0.0, tournament_size=2)
    pop = [fake(1.0, 9), fake(1.0, 3)]
    assert tournament_winner(pop, np.array([0, 1]), cfg, rng) == 1


def test_pareto_tournament_winner_on_contestant_front(rng):
    cfg = RunConfig(pareto_tournament_prob=1.0)
    pop = [fake(rng.integers(0, 10), rng.integers(1, 10)) for _ in range(250)]
    for _ in range(2000):
        drawn = draw_contestants(len(pop), cfg, rng)
        w = tournament_winner(pop, drawn, cfg, rng)
        assert w in drawn
        pw = (pop[w].fitness, pop[w].complexity)
        assert not any(dominates((pop[i].fitness, pop[i].complexity), pw) for i in drawn)


def test_pareto_tournament_frequency(rng):
    cfg = RunConfig()
    # all contestants mutually non-dominated: plain picks fitness 0, Pareto picks uniformly
    pop = [fake(i, 250 - i) for i in range(250)]
    n = 10_000
    lowest = 0
    for _ in range(n):
        drawn = draw_contestants(len(pop), cfg, rng)
        w = tournament_winner(pop, drawn, cfg, rng)
        lowest += w == min(drawn)
    # P(min) = 0.7 + 0.3/20
    p = 0.7 + 0.3 / 20
    assert abs(lowest / n - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_small_population_tournament(rng):
    cfg = RunConfig()
    pop = [fake(3, 1), fake(1, 1), fake(2, 1)]
    drawn = draw_contestants(3, cfg, rng)
    assert sorted(drawn.tolist()) == [0, 1, 2]


# ---------------------------------------------------------------- variation

def test_crossover_closure(rng):
    cfg = RunConfig()
    pop = init_population(cfg, 4, rng)
    for _ in range(5000):
        a, b = pop[rng.integers(250)], pop[rng.integers(250)]
        for child in crossover(a, b, cfg, rng):
            assert closure_ok(child, cfg)


def test_mutation_closure(rng):
    cfg = RunConfig()
    pop = init_population(cfg, 4, rng)
    for _ in range(10_000):
        assert closure_ok(mutate(pop[rng.integers(250)], cfg, rng, 4), cfg)


def test_gene_delete_on_single_gene_falls_back(rng):
    cfg = RunConfig(mutation_weights=(0.0, 0.0, 1.0))
    ind = Individual((parse_infix("(x1 + x2)"),))
    for _ in range(200):
        child = mutate(ind, cfg, rng, 2)
        assert 1 <= len(child.genes) <= 2


def test_constant_perturbation_touches_only_constants(rng):
    cfg = RunConfig(mutation_weights=(0.0, 1.0, 0.0))
    ind = Individual((parse_infix("((x1*2.5) + (x2^1.5))"), parse_infix("(x1 - -4.0)")))
    shape = [[type(n) for _, n, _ in iter_nodes(g.root)] for g in ind.genes]
    changed = 0
    for _ in range(300):
        child = mutate(ind, cfg, rng, 2)
        assert [[type(n) for _, n, _ in iter_nodes(g.root)] for g in child.genes] == shape
        diff = [(a, b) for g, h in zip(ind.genes, child.genes)
                for (_, a, _), (_, b, _) in zip(iter_nodes(g.root), iter_nodes(h.root)) if a != b
                and type(a) is Const]
        changed += bool(diff)
        for g in child.genes:
            for path, node, _ in iter_nodes(g.root):
                if type(node) is Binary and node.op == "pow":
                    assert -3 <= node.right.value <= 3
    assert changed > 250


def test_constant_mutation_without_constants_falls_back(rng):
    cfg = RunConfig(mutation_weights=(0.0, 1.0, 0.0))
    ind = Individual((parse_infix("(x1 + x2)"),))
    child = mutate(ind, cfg, rng, 2)
    assert closure_ok(child, cfg)


# ---------------------------------------------------------------- generations

def test_elites_survive_unchanged(quad_split, rng):
    train, _ = quad_split
    cfg = RunConfig()
    cache = GeneCache(train)
    pop = [evaluate_individual(i, train, cache) for i in init_population(cfg, train.n_inputs, rng)]
    ranked = sorted(pop, key=lambda p: (p.fitness, p.complexity))[:75]
    new = step_generation(pop, train, cfg, rng, cache)
    assert len(new) == 250
    assert sum(any(n is e for n in new) for e in ranked) == 75
    assert all(n.evaluated for n in new)


def test_zero_generations(quad_split):
    train, test = quad_split
    res = evolve_run(RunConfig(population_size=30, generations=0), train, test)
    assert len(res.log) == 1 and res.log[0].generation == 0
    assert len(res.population) == 30


def test_run_log_monotone_and_closed(quad_split):
    train, test = quad_split
    cfg = RunConfig(population_size=60, generations=12, tournament_size=6, seed=3)
    bad = []
    res = evolve_run(cfg, train, test, callback=lambda g, p: bad.extend(
        x for x in p if not closure_ok(x, cfg)))
    best = [r.best_rmse for r in res.log]
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert not bad
    text = log_to_csv(res.log)
    assert text.splitlines()[0] == "generation,best_rmse,mean_rmse,front_size,best_complexity"
    assert len(text.splitlines()) == len(res.log) + 1
    assert res.front and all(m is not None for m in res.front_test_metrics)


def test_seed_determinism(quad_split):
    train, test = quad_split
    cfg = RunConfig(population_size=40, generations=5, tournament_size=5, seed=11)
    a = evolve_run(cfg, train, test)
    b = evolve_run(cfg, train, test)
    assert log_to_csv(a.log) == log_to_csv(b.log)
    assert [p.key for p in a.population] == [p.key for p in b.population]
    c = evolve_run(RunConfig(**{**cfg.to_dict(), "seed": 12}), train, test)
    assert [p.key for p in c.population] != [p.key for p in a.population]


def test_make_rng_streams_independent():
    a = make_rng(5, 0).random(4)
    assert np.array_equal(a, make_rng(5, 0).random(4))
    assert not np.array_equal(a, make_rng(5, 1).random(4))


def test_early_stop_on_exact_fit(small_dataset):
    cfg = RunConfig(population_size=80, generations=40, seed=1, max_genes=3)
    res = evolve_run(cfg, small_dataset)
    if res.log[-1].best_rmse < cfg.early_stop_rmse:
        assert len(res.log) <= cfg.generations + 1
        assert res.log[-2].best_rmse >= cfg.early_stop_rmse or len(res.log) == 1


def test_multi_run_single_internal(quad_split):
    train, test = quad_split
    cfg = RunConfig(population_size=40, generations=4, tournament_size=5, internal_runs=1, seed=2)
    res = multi_run(cfg, train, test)
    assert len(res.runs) == 1
    assert any(res.best is f for f in res.front)
    keys = [f.key for f in res.front]
    assert len(keys) == len(set(keys))
    best_r2 = max(m.r2 for m in res.front_test_metrics)
    assert res.best_test_metrics.r2 == best_r2


def test_multi_run_merges_runs(quad_split):
    train, test = quad_split
    cfg = RunConfig(population_size=30, generations=3, tournament_size=5, internal_runs=3, seed=4)
    res = multi_run(cfg, train, test)
    assert len(res.runs) == 3
    pooled = [p for r in res.runs for p in r.population if math.isfinite(p.fitness)]
    pts = [(p.fitness, p.complexity) for p in pooled]
    front_pts = Counter((f.fitness, f.complexity) for f in res.front)
    brute = Counter(pts[i] for i in brute_front(pts))
    assert set(front_pts) == set(brute)


def test_select_from_front_ties():
    front = [fake(0.1, 9), fake(0.2, 3), fake(0.3, 1)]
    ms = [Metrics(0.9, 0, 0, 0), Metrics(0.9, 0, 0, 0), Metrics(0.5, 0, 0, 0)]
    assert select_from_front(front, ms) == 1
    assert select_from_front(front, [None] * 3) == 0
