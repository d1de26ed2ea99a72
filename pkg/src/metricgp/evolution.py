"""Evolutionary search over metric graphs.

Each generation mutates a random fraction of the population (insertion,
deletion, or replacement of an operator), screens the offspring for
near-duplicates against the population and each other, scores everyone with
a fitness approximation (truncated training or a learned surrogate), and
keeps the top N by validation ndcg.  Fitness values are cached for
survivors; the final best candidate is re-scored with full training so the
reported number is honest.

Determinism: every random draw comes from a stream derived from the master
seed and a fixed role tag (plus generation and offspring index for
per-candidate work), so results do not depend on thread scheduling.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace

import numpy as np

from .data import InteractionDataset
from .equivalence import EquivalenceConfig, ProbeSet, dedup_against, equivalent, score_vector
from .errors import ConfigError, DegenerateCandidateError
from .grammar import print_expr
from .graph import (ARITY, GenerationConfig, Leaf, MetricGraph, Node, Op,
                    VECTOR_OPS, leaf_node, node_paths, op_node, random_generate,
                    replace_path, validate)
from .ranking import evaluate
from .surrogate import SurrogateDataset, SurrogateModel, TokenVocabulary, train_surrogate
from .trainer import TrainConfig, train, train_full

MUTATION_KINDS = ("insertion", "deletion", "replacement")


@dataclass
class EarlyStoppingStrategy:
    """Fitness = validation ndcg after a truncated training run."""

    stop_epochs: int = 10
    name: str = field(default="es", init=False)


@dataclass
class SurrogateStrategy:
    """Fitness = learned prediction from the graph's token sequence.

    The first `warmup` candidates are fully trained to seed the training log;
    afterwards the surrogate predicts, and (when `refresh` is set) the best
    predicted offspring of each generation is additionally fully trained,
    logged, and the surrogate retrained.
    """

    warmup: int = 50
    embed_dim: int = 16
    hidden_dim: int = 32
    train_epochs: int = 200
    learning_rate: float = 1e-3
    refresh: bool = True
    name: str = field(default="sur", init=False)


@dataclass
class EvolutionConfig:
    population_size: int = 50
    generations: int = 100
    mutation_ratio: float = 0.7
    strategy: object = field(default_factory=EarlyStoppingStrategy)
    seed: int = 0
    parallelism: int = 1

    def check(self):
        if self.population_size < 2:
            raise ConfigError("population_size must be >= 2")
        if not 0 < self.mutation_ratio <= 1:
            raise ConfigError("mutation_ratio must be in (0, 1]")
        if self.generations < 0:
            raise ConfigError("generations must be >= 0")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")


@dataclass
class CandidateRecord:
    """One candidate metric plus its provenance and evaluation bookkeeping."""

    graph: MetricGraph
    cid: int
    generation: int
    parent: int | None = None
    mutation: str | None = None  # insertion/deletion/replacement/fresh
    fitness: float | None = None
    fitness_kind: str | None = None  # es / surrogate / full
    degenerate: bool = False
    cost_epochs: int = 0

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None

    def sort_fitness(self) -> float:
        return -math.inf if self.fitness is None else self.fitness

    def to_dict(self) -> dict:
        return {"expression": print_expr(self.graph), "cid": self.cid,
                "generation": self.generation, "parent": self.parent,
                "mutation": self.mutation, "fitness": self.fitness,
                "fitness_kind": self.fitness_kind, "degenerate": self.degenerate,
                "cost_epochs": self.cost_epochs}


# ----------------------------------------------------------------------
# Mutation operators.  Each preserves validity or returns the input graph
# with a no-op flag; none of them ever emits an invalid graph.
# ----------------------------------------------------------------------

def _fresh_leaf(rng) -> Node:
    return leaf_node((Leaf.USER, Leaf.ITEM, Leaf.ONES)[int(rng.integers(3))])


def _pick_op(rng, exclude: Op | None, gen_config: GenerationConfig):
    choices = [op for op in VECTOR_OPS if op is not exclude]
    op = choices[int(rng.integers(len(choices)))]
    constant = None
    if op is Op.SMUL:
        pool = gen_config.constant_pool
        constant = float(pool[int(rng.integers(len(pool)))])
    return op, constant


def mutate_insertion(graph: MetricGraph, gen_config: GenerationConfig, rng,
                     max_retries: int = 20) -> tuple[MetricGraph, bool]:
    """Insert a vector operator between a random non-root node and its parent.

    A binary insert takes the old child as its first input and a fresh leaf
    as its second.  Returns (graph, True) when no valid insertion was found.
    """
    paths = [(p, n) for p, _, n in node_paths(graph.root) if p]
    if not paths:
        return graph, True
    for _ in range(max_retries):
        path, child = paths[int(rng.integers(len(paths)))]
        op, constant = _pick_op(rng, None, gen_config)
        if ARITY[op] == 1:
            new = op_node(op, child, constant=constant)
        else:
            new = op_node(op, child, _fresh_leaf(rng))
        candidate = MetricGraph(replace_path(graph.root, path, new), graph.max_depth)
        if validate(candidate) is None:
            return candidate, False
    return graph, True


def mutate_deletion(graph: MetricGraph, gen_config: GenerationConfig, rng,
                    max_retries: int = 20) -> tuple[MetricGraph, bool]:
    """Remove a random intermediate node, promoting one of its children.

    Both children always satisfy the parent's vector-input constraint here,
    so the promoted child is a uniform choice; leaf coverage is what can
    fail, in which case another node is tried.
    """
    paths = [(p, n) for p, _, n in node_paths(graph.root)
             if p and not n.is_leaf]
    if not paths:
        return graph, True
    for _ in range(max_retries):
        path, node = paths[int(rng.integers(len(paths)))]
        child = node.children[int(rng.integers(len(node.children)))]
        candidate = MetricGraph(replace_path(graph.root, path, child), graph.max_depth)
        if validate(candidate) is None:
            return candidate, False
    return graph, True


def mutate_replacement(graph: MetricGraph, gen_config: GenerationConfig, rng,
                       max_retries: int = 20) -> tuple[MetricGraph, bool]:
    """Swap a random non-root operator for a different compatible operator.

    Equal arity keeps the children; raising it appends a fresh leaf;
    lowering it keeps one child chosen uniformly.
    """
    paths = [(p, n) for p, _, n in node_paths(graph.root)
             if p and not n.is_leaf]
    if not paths:
        return graph, True
    for _ in range(max_retries):
        path, node = paths[int(rng.integers(len(paths)))]
        op, constant = _pick_op(rng, node.op, gen_config)
        new = _swap_operator(node, op, constant, rng)
        candidate = MetricGraph(replace_path(graph.root, path, new), graph.max_depth)
        if validate(candidate) is None:
            return candidate, False
    return graph, True


def _swap_operator(node: Node, op: Op, constant, rng) -> Node:
    old_arity, new_arity = len(node.children), ARITY[op]
    if new_arity == old_arity:
        children = node.children
    elif new_arity > old_arity:
        children = node.children + (_fresh_leaf(rng),)
    else:
        children = (node.children[int(rng.integers(old_arity))],)
    return op_node(op, *children, constant=constant)


_MUTATORS = {"insertion": mutate_insertion, "deletion": mutate_deletion,
             "replacement": mutate_replacement}


def mutate(graph: MetricGraph, gen_config: GenerationConfig, rng,
           kind: str | None = None) -> tuple[MetricGraph, str, bool]:
    """Apply one mutation (uniformly chosen unless `kind` given)."""
    if kind is None:
        kind = MUTATION_KINDS[int(rng.integers(len(MUTATION_KINDS)))]
    mutated, noop = _MUTATORS[kind](graph, gen_config, rng)
    return mutated, kind, noop


# ----------------------------------------------------------------------
# Fitness evaluation.
# ----------------------------------------------------------------------

_ROLE_TAGS = {"probes": 1, "init": 2, "mutation": 3, "eval": 4, "dedup": 5,
              "final": 6, "surrogate": 7, "random": 8, "topup": 9}


def derive_rng(master_seed: int, role: str, *indices: int) -> np.random.Generator:
    """Deterministic stream for (seed, role, generation, index, ...)."""
    entropy = [int(master_seed), _ROLE_TAGS[role], *[int(i) for i in indices]]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def measured_fitness(graph: MetricGraph, ds: InteractionDataset, train_config: TrainConfig,
                     epochs: int | None, rng, k: int = 20) -> tuple[float, int]:
    """Train (truncated when `epochs` given, else fully) and return
    (validation ndcg@k, epochs actually consumed).  Degenerate training
    yields -inf."""
    try:
        if epochs is None:
            table, losses = train_full(graph, ds, train_config, rng=rng, eval_k=k)
        else:
            table, losses = train(graph, ds, train_config, epochs_override=epochs, rng=rng,
                                  eval_k=k)
    except DegenerateCandidateError:
        return -math.inf, 0
    report = evaluate(graph, table, ds, "valid", k=k)
    return report.ndcg, len(losses)


def evaluate_fitness(record: CandidateRecord, strategy, ds: InteractionDataset,
                     train_config: TrainConfig, rng=None, k: int = 20,
                     oracle=None) -> float:
    """Score one candidate in place with the given fitness strategy.

    Early stopping trains for `stop_epochs` and reads validation ndcg; the
    surrogate strategy predicts from the token sequence once its warmup of
    fully trained candidates (tracked by `oracle`) is complete, and falls
    back to full training before that.  Degenerate candidates get -inf.
    """
    if rng is None:
        rng = np.random.default_rng(train_config.seed)
    if isinstance(strategy, SurrogateStrategy) and oracle is not None \
            and oracle.full_evals >= strategy.warmup:
        record.fitness = oracle.model.predict_graph(record.graph)
        record.fitness_kind = "surrogate"
        return record.fitness
    epochs = None if isinstance(strategy, SurrogateStrategy) else strategy.stop_epochs
    fitness, cost = measured_fitness(record.graph, ds, train_config, epochs, rng, k)
    record.fitness = fitness
    record.fitness_kind = "full" if epochs is None else "es"
    record.degenerate = not math.isfinite(fitness)
    record.cost_epochs += cost
    if oracle is not None and epochs is None and math.isfinite(fitness):
        oracle.observe(record.graph, fitness)
    return fitness


class _SurrogateOracle:
    """Shared surrogate state for one search run (single writer)."""

    def __init__(self, strategy: SurrogateStrategy, gen_config: GenerationConfig, seed: int):
        self.strategy = strategy
        self.vocab = TokenVocabulary.from_constant_pool(gen_config.constant_pool)
        self.log = SurrogateDataset(self.vocab)
        self.model = SurrogateModel(self.vocab, strategy.embed_dim,
                                    strategy.hidden_dim, seed=seed)
        self.full_evals = 0
        self._dirty = False

    def observe(self, graph: MetricGraph, fitness: float):
        self.full_evals += 1
        if self.log.append(graph, fitness):
            self._dirty = True

    def retrain(self):
        if self._dirty and len(self.log) >= 2:
            train_surrogate(self.model, self.log, self.strategy.train_epochs,
                            self.strategy.learning_rate)
            self._dirty = False


def _evaluate_records(records, modes, ds, train_config, evo_config, k, oracle, generation):
    """Fill in fitness for unevaluated records; `modes[i]` picks full / es /
    surrogate per record, decided before any work is dispatched so results
    do not depend on scheduling."""

    def work(args):
        index, record = args
        mode = modes[index]
        rng = derive_rng(evo_config.seed, "eval", generation, index)
        seeded = dc_replace(train_config, seed=int(rng.integers(2 ** 63)))
        if mode == "surrogate":
            record.fitness = oracle.model.predict_graph(record.graph)
            record.fitness_kind = "surrogate"
            return
        epochs = None if mode == "full" else evo_config.strategy.stop_epochs
        fitness, cost = measured_fitness(record.graph, ds, seeded, epochs, rng, k)
        record.fitness = fitness
        record.fitness_kind = "full" if mode == "full" else "es"
        record.degenerate = not math.isfinite(fitness)
        record.cost_epochs += cost

    todo = [(i, r) for i, r in enumerate(records) if not r.evaluated]
    if evo_config.parallelism > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=evo_config.parallelism) as pool:
            list(pool.map(work, todo))
    else:
        for item in todo:
            work(item)
    if oracle is not None:
        for i, r in todo:
            if modes[i] == "full" and math.isfinite(r.fitness):
                oracle.observe(r.graph, r.fitness)


def _modes_for(records, evo_config, oracle):
    strategy = evo_config.strategy
    if isinstance(strategy, EarlyStoppingStrategy):
        return {i: "es" for i, r in enumerate(records) if not r.evaluated}
    modes = {}
    pending_fulls = oracle.full_evals
    for i, r in enumerate(records):
        if r.evaluated:
            continue
        if pending_fulls < strategy.warmup:
            modes[i] = "full"
            pending_fulls += 1
        else:
            modes[i] = "surrogate"
    return modes


# ----------------------------------------------------------------------
# Population management.
# ----------------------------------------------------------------------

def init_population(evo_config: EvolutionConfig, gen_config: GenerationConfig,
                    probes: ProbeSet, eq_config: EquivalenceConfig, rng,
                    id_counter) -> list[CandidateRecord]:
    """N random, pairwise non-equivalent, unevaluated candidates.

    When the metric space is too small to hold N distinct members the
    population comes back short; the caller tops it up each generation.
    """
    n = evo_config.population_size
    graphs = [random_generate(gen_config, rng) for _ in range(n)]
    graphs, _, _ = dedup_against(graphs, [], probes, eq_config, gen_config, rng)
    for _ in range(3):
        if len(graphs) >= n:
            break
        extra = [random_generate(gen_config, rng) for _ in range(n - len(graphs))]
        extra, _, _ = dedup_against(extra, graphs, probes, eq_config, gen_config, rng)
        graphs.extend(extra)
    return [CandidateRecord(graph=g, cid=next(id_counter), generation=0,
                            mutation="fresh") for g in graphs[:n]]


def generate_offspring(population: list[CandidateRecord], evo_config: EvolutionConfig,
                       gen_config: GenerationConfig, probes: ProbeSet,
                       eq_config: EquivalenceConfig, rng, generation: int,
                       id_counter) -> list[CandidateRecord]:
    """ceil(gamma * N) mutations of uniformly drawn parents, screened against
    the population and each other; equivalents are regenerated from scratch."""
    count = math.ceil(evo_config.mutation_ratio * evo_config.population_size)
    parents, graphs, kinds = [], [], []
    for _ in range(count):
        parent = population[int(rng.integers(len(population)))]
        mutated, kind, noop = mutate(parent.graph, gen_config, rng)
        parents.append(parent.cid)
        graphs.append(mutated)
        kinds.append(kind if not noop else f"{kind}-noop")
    deduped, replaced, kept = dedup_against(graphs, [r.graph for r in population],
                                            probes, eq_config, gen_config, rng)
    records = []
    for slot, graph in enumerate(deduped):
        if replaced[slot]:
            records.append(CandidateRecord(graph=graph, cid=next(id_counter),
                                           generation=generation, mutation="fresh"))
        else:
            origin = kept[slot]
            records.append(CandidateRecord(graph=graph, cid=next(id_counter),
                                           generation=generation, parent=parents[origin],
                                           mutation=kinds[origin]))
    return records


def select_top_n(candidates: list[CandidateRecord], n: int) -> list[CandidateRecord]:
    """N highest-fitness records; ties keep older generations, then lower ids."""
    ranked = sorted(candidates, key=lambda r: (-r.sort_fitness(), r.generation, r.cid))
    return ranked[:n]


# ----------------------------------------------------------------------
# Search drivers.
# ----------------------------------------------------------------------

@dataclass
class SearchResult:
    best: CandidateRecord
    best_expression: str
    best_fitness: float          # approximate fitness that won the search
    best_fitness_full: float     # fitness of the winner after full training
    history: list[list[dict]]
    candidates_evaluated: int
    epochs_consumed: int
    wall_time: float
    strategy: str
    generations_run: int

    def to_dict(self) -> dict:
        return {"best_expression": self.best_expression,
                "best_fitness": self.best_fitness,
                "best_fitness_full": self.best_fitness_full,
                "candidates_evaluated": self.candidates_evaluated,
                "epochs_consumed": self.epochs_consumed,
                "wall_time": self.wall_time,
                "strategy": self.strategy,
                "generations_run": self.generations_run}


def _snapshot(records):
    return [r.to_dict() for r in records]


def run_search(ds: InteractionDataset, evo_config: EvolutionConfig,
               gen_config: GenerationConfig, train_config: TrainConfig,
               eq_config: EquivalenceConfig = EquivalenceConfig(),
               k: int = 20, probe_dim: int | None = None) -> SearchResult:
    """The full evolutionary loop; see the module docstring."""
    evo_config.check()
    gen_config.check()
    train_config.check()
    eq_config.check()
    start = time.perf_counter()
    master = evo_config.seed
    probes = ProbeSet.from_seed(int(derive_rng(master, "probes").integers(2 ** 63)),
                                eq_config.probe_count, probe_dim or train_config.dim)
    ids = iter(range(10 ** 9))
    strategy = evo_config.strategy
    oracle = None
    if isinstance(strategy, SurrogateStrategy):
        oracle = _SurrogateOracle(strategy, gen_config,
                                  seed=int(derive_rng(master, "surrogate").integers(2 ** 63)))

    population = init_population(evo_config, gen_config, probes, eq_config,
                                 derive_rng(master, "init"), ids)
    all_records: dict[int, CandidateRecord] = {r.cid: r for r in population}
    modes = _modes_for(population, evo_config, oracle)
    _evaluate_records(population, modes, ds, train_config, evo_config, k, oracle, 0)
    if oracle is not None:
        oracle.retrain()
    history = [_snapshot(population)]

    for generation in range(1, evo_config.generations + 1):
        topup_rng = derive_rng(master, "topup", generation)
        attempts = 0
        while len(population) < evo_config.population_size and attempts < 50:
            attempts += 1
            fresh = random_generate(gen_config, topup_rng)
            if all(not equivalent(fresh, r.graph, probes, eq_config) for r in population):
                population.append(CandidateRecord(graph=fresh, cid=next(ids),
                                                  generation=generation, mutation="fresh"))
        offspring = generate_offspring(population, evo_config, gen_config, probes,
                                       eq_config, derive_rng(master, "mutation", generation),
                                       generation, ids)
        pool = population + offspring
        for r in pool:
            all_records[r.cid] = r
        modes = _modes_for(pool, evo_config, oracle)
        _evaluate_records(pool, modes, ds, train_config, evo_config, k, oracle, generation)
        if oracle is not None and strategy.refresh:
            _refresh_surrogate(oracle, offspring, ds, train_config, evo_config,
                               k, generation)
        population = select_top_n(pool, evo_config.population_size)
        history.append(_snapshot(population))

    best = select_top_n(population, 1)[0]
    final_rng = derive_rng(master, "final")
    seeded = dc_replace(train_config, seed=int(final_rng.integers(2 ** 63)))
    best_full, final_cost = measured_fitness(best.graph, ds, seeded, None, final_rng, k)
    evaluated = [r for r in all_records.values() if r.evaluated]
    total_epochs = sum(r.cost_epochs for r in evaluated) + final_cost
    return SearchResult(
        best=best, best_expression=print_expr(best.graph),
        best_fitness=best.fitness, best_fitness_full=best_full,
        history=history, candidates_evaluated=len(evaluated),
        epochs_consumed=total_epochs,
        wall_time=time.perf_counter() - start,
        strategy=strategy.name, generations_run=evo_config.generations)


def _refresh_surrogate(oracle, offspring, ds, train_config, evo_config, k, generation):
    """Fully train the generation-best predicted offspring, log it, and
    retrain the surrogate (the online half of the surrogate schedule)."""
    predicted = [r for r in offspring if r.fitness_kind == "surrogate"]
    if not predicted:
        return
    best = max(predicted, key=lambda r: (r.sort_fitness(), -r.cid))
    rng = derive_rng(evo_config.seed, "eval", generation, 10 ** 6)
    seeded = dc_replace(train_config, seed=int(rng.integers(2 ** 63)))
    fitness, cost = measured_fitness(best.graph, ds, seeded, None, rng, k)
    best.fitness = fitness
    best.fitness_kind = "full"
    best.degenerate = not math.isfinite(fitness)
    best.cost_epochs += cost
    if math.isfinite(fitness):
        oracle.observe(best.graph, fitness)
        oracle.retrain()


def random_search(ds: InteractionDataset, budget: int, gen_config: GenerationConfig,
                  train_config: TrainConfig, strategy=None, seed: int = 0,
                  k: int = 20, parallelism: int = 1,
                  probe_dim: int | None = None) -> SearchResult:
    """Unguided baseline: `budget` independent random metrics scored with the
    same fitness strategy; the best is re-scored with full training."""
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    gen_config.check()
    train_config.check()
    strategy = strategy or EarlyStoppingStrategy()
    start = time.perf_counter()
    rng = derive_rng(seed, "random")
    graphs = [random_generate(gen_config, rng) for _ in range(budget)]
    records = [CandidateRecord(graph=g, cid=i, generation=0, mutation="fresh")
               for i, g in enumerate(graphs)]
    evo = EvolutionConfig(population_size=max(budget, 2), generations=0,
                          strategy=strategy, seed=seed, parallelism=parallelism)
    oracle = None
    if isinstance(strategy, SurrogateStrategy):
        oracle = _SurrogateOracle(strategy, gen_config,
                                  seed=int(derive_rng(seed, "surrogate").integers(2 ** 63)))
    modes = _modes_for(records, evo, oracle)
    _evaluate_records(records, modes, ds, train_config, evo, k, oracle, 0)
    best = select_top_n(records, 1)[0]
    final_rng = derive_rng(seed, "final")
    seeded = dc_replace(train_config, seed=int(final_rng.integers(2 ** 63)))
    best_full, final_cost = measured_fitness(best.graph, ds, seeded, None, final_rng, k)
    return SearchResult(
        best=best, best_expression=print_expr(best.graph),
        best_fitness=best.fitness, best_fitness_full=best_full,
        history=[_snapshot(records)], candidates_evaluated=len(records),
        epochs_consumed=sum(r.cost_epochs for r in records) + final_cost,
        wall_time=time.perf_counter() - start,
        strategy="random", generations_run=0)
