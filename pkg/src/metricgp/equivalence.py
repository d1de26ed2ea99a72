"""Probe-based equivalence check between candidate metrics.

Two metrics are judged equivalent when their scores agree within an absolute
tolerance delta on every pair of a fixed set of random embedding probes.  The
probe set is drawn once per search run, so equivalence is a consistent
relation within a run.  Populations are deduplicated by replacing one member
of each equivalent pair with a freshly generated metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .evaluator import forward_batch
from .graph import GenerationConfig, MetricGraph, random_generate


@dataclass(frozen=True)
class EquivalenceConfig:
    delta: float = 1e-6
    probe_count: int = 64

    def check(self):
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if self.probe_count < 1:
            raise ConfigError("probe_count must be >= 1")


@dataclass(frozen=True)
class ProbeSet:
    """K fixed user/item embedding pairs, i.i.d. standard normal."""

    users: np.ndarray
    items: np.ndarray
    seed: int

    @property
    def k(self) -> int:
        return self.users.shape[0]

    @property
    def dim(self) -> int:
        return self.users.shape[1]

    @classmethod
    def from_seed(cls, seed: int, k: int = 64, dim: int = 16) -> "ProbeSet":
        if k < 1 or dim < 1:
            raise ConfigError("probe set needs k >= 1 and dim >= 1")
        rng = np.random.default_rng(seed)
        return cls(users=rng.standard_normal((k, dim)),
                   items=rng.standard_normal((k, dim)), seed=seed)


@dataclass(frozen=True)
class ScoreVector:
    """Scores of one metric on the probe set; `finite` is False when any
    entry is NaN/inf, which bars the metric from every equivalence."""

    scores: np.ndarray
    finite: bool


def score_vector(graph: MetricGraph, probes: ProbeSet, epsilon: float = 1e-12) -> ScoreVector:
    scores = forward_batch(graph, probes.users, probes.items, epsilon=epsilon, check=False)
    return ScoreVector(scores=scores, finite=bool(np.all(np.isfinite(scores))))


def equivalent(a: MetricGraph, b: MetricGraph, probes: ProbeSet,
               config: EquivalenceConfig = EquivalenceConfig()) -> bool:
    """True iff |s_a[k] - s_b[k]| < delta for all probes.

    A metric with non-finite probe scores is equivalent to nothing,
    itself included.
    """
    sa = score_vector(a, probes)
    sb = score_vector(b, probes)
    if not (sa.finite and sb.finite):
        return False
    return bool(np.all(np.abs(sa.scores - sb.scores) < config.delta))


def _scores_close(sa: ScoreVector, sb: ScoreVector, delta: float) -> bool:
    if not (sa.finite and sb.finite):
        return False
    return bool(np.all(np.abs(sa.scores - sb.scores) < delta))


def dedup(population: list[MetricGraph], probes: ProbeSet, config: EquivalenceConfig,
          gen_config: GenerationConfig, rng, max_rounds: int = 10) -> list[MetricGraph]:
    """Replace equivalent (or non-finite-scoring) members with fresh metrics.

    Repeats until no pair is equivalent or the round budget runs out, after
    which remaining offenders are dropped and the population returned short.
    """
    graphs = list(population)
    for _ in range(max_rounds):
        marked = _mark_offenders(graphs, [], probes, config, rng)
        if not marked:
            return graphs
        for i in marked:
            graphs[i] = random_generate(gen_config, rng)
    marked = _mark_offenders(graphs, [], probes, config, rng)
    return [g for i, g in enumerate(graphs) if i not in marked]


def dedup_against(new: list[MetricGraph], existing: list[MetricGraph], probes: ProbeSet,
                  config: EquivalenceConfig, gen_config: GenerationConfig, rng,
                  max_rounds: int = 10) -> tuple[list[MetricGraph], list[bool], list[int]]:
    """Dedup `new` against a fixed `existing` list and against itself.

    Only members of `new` are ever replaced.  Returns the deduplicated list,
    a per-slot flag marking entries regenerated from scratch, and the
    surviving slots' original indices (entries are dropped only when the
    round budget runs out).
    """
    graphs = list(new)
    replaced = [False] * len(graphs)
    for _ in range(max_rounds):
        marked = _mark_offenders(graphs, existing, probes, config, rng)
        if not marked:
            return graphs, replaced, list(range(len(graphs)))
        for i in marked:
            graphs[i] = random_generate(gen_config, rng)
            replaced[i] = True
    marked = _mark_offenders(graphs, existing, probes, config, rng)
    keep = [i for i in range(len(graphs)) if i not in marked]
    return [graphs[i] for i in keep], [replaced[i] for i in keep], keep


def _mark_offenders(graphs, fixed, probes, config, rng) -> set[int]:
    """Indices into `graphs` that must be replaced this round.

    Non-finite scorers are always marked.  For an equivalent pair within
    `graphs`, one member is marked uniformly at random; a member equivalent
    to a `fixed` graph is marked itself.
    """
    svs = [score_vector(g, probes) for g in graphs]
    fixed_svs = [score_vector(g, probes) for g in fixed]
    marked = {i for i, sv in enumerate(svs) if not sv.finite}
    for i, sv in enumerate(svs):
        if i in marked:
            continue
        if any(_scores_close(sv, fsv, config.delta) for fsv in fixed_svs):
            marked.add(i)
    for i in range(len(graphs)):
        if i in marked:
            continue
        for j in range(i + 1, len(graphs)):
            if j in marked:
                continue
            if _scores_close(svs[i], svs[j], config.delta):
                marked.add(i if rng.random() < 0.5 else j)
                if i in marked:
                    break
    return marked
