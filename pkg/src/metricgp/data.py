"""Implicit-feedback interaction data: loading, splits, sampling, synthesis.

On-disk format is the adjacency-list text used by the common graph-recsys
pipelines: one line per user, whitespace-separated integers, first token the
user id, remaining tokens item ids; `train.txt` and `test.txt` side by side.
A validation split is carved from train at load time, never stored.

`generate_synthetic` plants a known metric over known embeddings and emits
the interactions it implies, giving desk-scale experiments a ground truth.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigError, EmptyDatasetError, FormatError,
                     SamplerStallError)
from .evaluator import forward_batch
from .grammar import parse_expr, print_expr
from .graph import MetricGraph

SPLITS = ("train", "valid", "test")


@dataclass
class InteractionDataset:
    """Per-user sorted item arrays for the train/valid/test splits.

    Splits are pairwise disjoint, ids bounded by the counts, and every user
    holding validation or test items also holds train items (cold users are
    excluded from evaluation at load time).
    """

    n_users: int
    n_items: int
    train: list[np.ndarray]
    valid: list[np.ndarray]
    test: list[np.ndarray]

    def split(self, name: str) -> list[np.ndarray]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def n_interactions(self, name: str = "train") -> int:
        return int(sum(len(a) for a in self.split(name)))

    def train_edges(self) -> np.ndarray:
        """(E, 2) array of train (user, item) pairs."""
        rows = [np.column_stack([np.full(len(items), u), items])
                for u, items in enumerate(self.train) if len(items)]
        if not rows:
            return np.empty((0, 2), dtype=np.int64)
        return np.concatenate(rows).astype(np.int64)

    def positives(self, user: int) -> set[int]:
        """All items of `user` across every split (the global positives)."""
        return set(self.train[user]) | set(self.valid[user]) | set(self.test[user])

    def check_invariants(self):
        for name in SPLITS:
            for u, items in enumerate(self.split(name)):
                if len(items) and (items.min() < 0 or items.max() >= self.n_items):
                    raise ValueError(f"{name} items of user {u} out of range")
                if len(np.unique(items)) != len(items):
                    raise ValueError(f"duplicate {name} items for user {u}")
        for u in range(self.n_users):
            tr, va, te = set(self.train[u]), set(self.valid[u]), set(self.test[u])
            if tr & va or tr & te or va & te:
                raise ValueError(f"overlapping splits for user {u}")
            if (va or te) and not tr:
                raise ValueError(f"user {u} has held-out items but no train items")


def _sorted_unique(items):
    return np.unique(np.asarray(items, dtype=np.int64))


def _parse_adjacency_file(path: str) -> dict[int, np.ndarray]:
    per_user = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            try:
                values = [int(t) for t in tokens]
            except ValueError as exc:
                raise FormatError(f"non-integer token in {os.path.basename(path)}: {exc}",
                                  line_number) from None
            if any(v < 0 for v in values):
                raise FormatError(f"negative id in {os.path.basename(path)}", line_number)
            user, items = values[0], values[1:]
            merged = list(per_user.get(user, ())) + items
            per_user[user] = _sorted_unique(merged) if merged else np.empty(0, dtype=np.int64)
    return per_user


def load_adjacency(path: str) -> InteractionDataset:
    """Load `train.txt` and `test.txt` from a dataset directory.

    Counts are inferred as max id + 1.  Test items duplicated in train are
    dropped, as are test items of users with no train interactions; the
    validation split starts empty (see `split_validation`).
    """
    train_path = os.path.join(path, "train.txt")
    test_path = os.path.join(path, "test.txt")
    train_map = _parse_adjacency_file(train_path)
    test_map = _parse_adjacency_file(test_path) if os.path.exists(test_path) else {}

    users = list(train_map) + list(test_map)
    all_items = [int(a.max()) for a in list(train_map.values()) + list(test_map.values()) if len(a)]
    if not any(len(a) for a in train_map.values()):
        raise EmptyDatasetError(f"no train interactions under {path}")
    n_users = max(users) + 1
    n_items = max(all_items) + 1

    empty = np.empty(0, dtype=np.int64)
    train = [train_map.get(u, empty) for u in range(n_users)]
    test = []
    for u in range(n_users):
        te = test_map.get(u, empty)
        if len(te) and len(train[u]):
            te = np.setdiff1d(te, train[u])
        elif len(te):
            te = empty  # cold user: excluded from evaluation
        test.append(te)
    ds = InteractionDataset(n_users=n_users, n_items=n_items, train=train,
                            valid=[empty] * n_users, test=test)
    ds.check_invariants()
    return ds


def split_validation(ds: InteractionDataset, fraction: float, seed: int) -> InteractionDataset:
    """Move ceil(fraction * |train_u|) random train items per user into valid,
    always leaving at least one train item behind."""
    if not 0 < fraction < 1:
        raise ConfigError("validation fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train, valid = [], []
    for u in range(ds.n_users):
        items = ds.train[u]
        n = len(items)
        take = min(math.ceil(fraction * n), n - 1) if n else 0
        if take > 0:
            picked = rng.choice(n, size=take, replace=False)
            mask = np.zeros(n, dtype=bool)
            mask[picked] = True
            moved = np.sort(np.concatenate([items[mask], ds.valid[u]]))
            train.append(items[~mask])
            valid.append(moved)
        else:
            train.append(items)
            valid.append(ds.valid[u])
    out = InteractionDataset(n_users=ds.n_users, n_items=ds.n_items,
                             train=train, valid=valid, test=list(ds.test))
    out.check_invariants()
    return out


class TripletSampler:
    """BPR triplet stream over a dataset's train split.

    Each draw picks a train edge uniformly (so users are weighted by degree),
    takes its item as the positive, and rejection-samples a negative that is
    not a global positive of the user.
    """

    MAX_REJECTS = 1000

    def __init__(self, ds: InteractionDataset, rng):
        self.ds = ds
        self.rng = rng
        self.edges = ds.train_edges()
        if len(self.edges) == 0:
            raise EmptyDatasetError("cannot sample triplets from an empty train split")
        self._positives = [ds.positives(u) for u in range(ds.n_users)]

    def sample(self, batch_size: int):
        """Returns (users, positives, negatives), each an int64 (B,) array."""
        idx = self.rng.integers(len(self.edges), size=batch_size)
        users = self.edges[idx, 0]
        pos = self.edges[idx, 1]
        neg = np.empty(batch_size, dtype=np.int64)
        n_items = self.ds.n_items
        for b in range(batch_size):
            positives = self._positives[users[b]]
            for _ in range(self.MAX_REJECTS):
                j = int(self.rng.integers(n_items))
                if j not in positives:
                    neg[b] = j
                    break
            else:
                raise SamplerStallError(
                    f"user {users[b]} rejected {self.MAX_REJECTS} negatives; row is near-complete")
        return users, pos, neg


def sample_triplets(sampler: TripletSampler, batch_size: int):
    return sampler.sample(batch_size)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a planted-metric dataset.

    Positives are each user's top-m items under the planted metric applied to
    planted standard-normal embeddings; each positive is independently
    replaced by a uniform random item with probability `noise`.
    """

    n_users: int
    n_items: int
    dim: int
    metric: MetricGraph
    interactions_per_user: int
    noise: float = 0.0
    seed: int = 0

    def check(self):
        if self.n_users < 1 or self.n_items < 2 or self.dim < 1:
            raise ConfigError("need n_users >= 1, n_items >= 2, dim >= 1")
        if not 0 < self.interactions_per_user < self.n_items:
            raise ConfigError("interactions_per_user must be in [1, n_items)")
        if not 0 <= self.noise < 1:
            raise ConfigError("noise must be in [0, 1)")


@dataclass
class SyntheticTruth:
    """The planted ground truth a synthetic dataset was generated from."""

    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    metric: MetricGraph
    spec: SyntheticSpec


def planted_scores(truth: SyntheticTruth, users=None, chunk: int = 256) -> np.ndarray:
    """(n_users, n_items) score matrix of the planted metric on the planted
    embeddings (chunked to bound memory)."""
    P, Q = truth.user_embeddings, truth.item_embeddings
    users = np.arange(P.shape[0]) if users is None else np.asarray(users)
    n_items = Q.shape[0]
    out = np.empty((len(users), n_items))
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        U = np.repeat(P[block], n_items, axis=0)
        V = np.tile(Q, (len(block), 1))
        out[start:start + len(block)] = forward_batch(
            truth.metric, U, V).reshape(len(block), n_items)
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionDataset, SyntheticTruth]:
    """Build a planted-metric dataset with per-user 80/10/10 splits."""
    spec.check()
    rng = np.random.default_rng(spec.seed)
    P = rng.standard_normal((spec.n_users, spec.dim))
    Q = rng.standard_normal((spec.n_items, spec.dim))
    truth = SyntheticTruth(user_embeddings=P, item_embeddings=Q,
                           metric=spec.metric, spec=spec)
    scores = planted_scores(truth)
    # descending score, ties by ascending item id
    order = np.argsort(-scores, axis=1, kind="stable")
    top = order[:, : spec.interactions_per_user]

    m = spec.interactions_per_user
    train, valid, test = [], [], []
    for u in range(spec.n_users):
        items = top[u].copy()
        if spec.noise > 0:
            flip = rng.random(m) < spec.noise
            items[flip] = rng.integers(spec.n_items, size=int(flip.sum()))
        items = np.unique(items)
        perm = rng.permutation(len(items))
        n_test = len(items) // 10
        n_valid = len(items) // 10
        test.append(np.sort(items[perm[:n_test]]))
        valid.append(np.sort(items[perm[n_test:n_test + n_valid]]))
        train.append(np.sort(items[perm[n_test + n_valid:]]))
    ds = InteractionDataset(n_users=spec.n_users, n_items=spec.n_items,
                            train=train, valid=valid, test=test)
    ds.check_invariants()
    return ds, truth


def save_dataset(ds: InteractionDataset, path: str, truth: SyntheticTruth | None = None):
    """Write train.txt (train plus valid) and test.txt; for synthetic data,
    also a `planted.txt` sidecar with the metric expression and recipe."""
    os.makedirs(path, exist_ok=True)

    def write(split_lists, fname):
        with open(os.path.join(path, fname), "w", encoding="utf-8") as fh:
            for u in range(ds.n_users):
                items = np.sort(np.concatenate([s[u] for s in split_lists]))
                if len(items):
                    fh.write(" ".join([str(u)] + [str(int(i)) for i in items]) + "\n")

    write([ds.train, ds.valid], "train.txt")
    write([ds.test], "test.txt")
    if truth is not None:
        spec = truth.spec
        with open(os.path.join(path, "planted.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"metric = {print_expr(truth.metric)}\n")
            fh.write(f"seed = {spec.seed}\n")
            fh.write(f"dim = {spec.dim}\n")
            fh.write(f"n_users = {spec.n_users}\n")
            fh.write(f"n_items = {spec.n_items}\n")
            fh.write(f"interactions_per_user = {spec.interactions_per_user}\n")
            fh.write(f"noise = {spec.noise!r}\n")


def load_planted_sidecar(path: str) -> SyntheticSpec:
    """Re-read a `planted.txt` sidecar into the spec it records."""
    fields = {}
    with open(os.path.join(path, "planted.txt"), "r", encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                key, value = line.split("=", 1)
                fields[key.strip()] = value.strip()
    return SyntheticSpec(
        n_users=int(fields["n_users"]), n_items=int(fields["n_items"]),
        dim=int(fields["dim"]), metric=parse_expr(fields["metric"]),
        interactions_per_user=int(fields["interactions_per_user"]),
        noise=float(fields["noise"]), seed=int(fields["seed"]))
