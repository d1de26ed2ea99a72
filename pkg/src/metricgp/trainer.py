"""Matrix-factorization encoder trained with BPR through a candidate metric.

The encoder is a pair of embedding tables; the candidate metric scores
(user, item) rows and its reverse-mode gradients drive the updates.  The
pairwise loss over a batch of (u, i, j) triplets is

    L = mean_b softplus(-(SM(p_u, q_i) - SM(p_u, q_j)))
        + weight_decay * mean over the 3B touched rows of ||row||^2

minimized with sparse SGD or Adam: only rows appearing in the batch move.
Swapping in a different encoder means producing the row embeddings some
other way; everything here touches them only through `EmbeddingTable`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import InteractionDataset, TripletSampler
from .errors import ConfigError, DegenerateCandidateError, NonFiniteError
from .evaluator import Workspace, backward_batch, forward_batch
from .graph import MetricGraph


@dataclass
class TrainConfig:
    dim: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 1024
    epochs: int = 100
    init_scale: float = 0.1
    optimizer: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    patience: int = 10  # full-training early termination on validation ndcg
    seed: int = 0

    def check(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")


@dataclass
class EmbeddingTable:
    """User rows P and item rows Q, both (count, d) float64."""

    users: np.ndarray
    items: np.ndarray

    @property
    def dim(self) -> int:
        return self.users.shape[1]

    def user_rows(self, ids) -> np.ndarray:
        return self.users[ids]

    def item_rows(self, ids) -> np.ndarray:
        return self.items[ids]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.users.copy(), self.items.copy())


def init_embeddings(n_users: int, n_items: int, config: TrainConfig, rng=None) -> EmbeddingTable:
    """Entries i.i.d. N(0, init_scale^2); users drawn before items."""
    if n_users < 1 or n_items < 1:
        raise ConfigError("need at least one user and one item")
    config.check()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return EmbeddingTable(
        users=config.init_scale * rng.standard_normal((n_users, config.dim)),
        items=config.init_scale * rng.standard_normal((n_items, config.dim)))


_HEADER = np.dtype("<u8")


def save_embeddings(table: EmbeddingTable, path: str):
    """Flat binary: n_users, n_items, d as little-endian uint64, then
    row-major little-endian float64 rows, users first."""
    with open(path, "wb") as fh:
        header = np.array([table.users.shape[0], table.items.shape[0], table.dim],
                          dtype=_HEADER)
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(table.users, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(table.items, dtype="<f8").tobytes())


def load_embeddings(path: str) -> EmbeddingTable:
    with open(path, "rb") as fh:
        raw = fh.read()
    n_users, n_items, dim = (int(x) for x in np.frombuffer(raw[:24], dtype=_HEADER))
    body = np.frombuffer(raw[24:], dtype="<f8")
    if len(body) != (n_users + n_items) * dim:
        raise ValueError("embedding checkpoint is truncated")
    users = body[: n_users * dim].reshape(n_users, dim).astype(np.float64)
    items = body[n_users * dim:].reshape(n_items, dim).astype(np.float64)
    return EmbeddingTable(users=users, items=items)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AdamState:
    m_users: np.ndarray
    v_users: np.ndarray
    m_items: np.ndarray
    v_items: np.ndarray
    step: int = 0


def make_optimizer_state(config: TrainConfig, n_users: int, n_items: int):
    """Optimizer scratch; None for plain SGD."""
    if config.optimizer == "sgd":
        return None
    shape_u, shape_i = (n_users, config.dim), (n_items, config.dim)
    return AdamState(np.zeros(shape_u), np.zeros(shape_u),
                     np.zeros(shape_i), np.zeros(shape_i))


def _accumulate(ids, grads, dim):
    """Sum per-example gradients into unique rows."""
    unique, inverse = np.unique(ids, return_inverse=True)
    out = np.zeros((len(unique), dim))
    np.add.at(out, inverse, grads)
    return unique, out


def _apply_rows(table_arr, m_arr, v_arr, rows, grads, config, step):
    if config.optimizer == "sgd":
        table_arr[rows] -= config.learning_rate * grads
        return
    m_arr[rows] = config.beta1 * m_arr[rows] + (1 - config.beta1) * grads
    v_arr[rows] = config.beta2 * v_arr[rows] + (1 - config.beta2) * grads ** 2
    m_hat = m_arr[rows] / (1 - config.beta1 ** step)
    v_hat = v_arr[rows] / (1 - config.beta2 ** step)
    table_arr[rows] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)


def _batch_scores_and_workspaces(metric, table, users, pos, neg, epsilon):
    pu = table.users[users]
    ws_i, ws_j = Workspace(epsilon), Workspace(epsilon)
    s_i = forward_batch(metric, pu, table.items[pos], ws_i)
    s_j = forward_batch(metric, pu, table.items[neg], ws_j)
    return s_i, s_j, ws_i, ws_j


def bpr_loss(metric: MetricGraph, table: EmbeddingTable, triplets,
             weight_decay: float = 0.0, epsilon: float = 1e-12) -> float:
    """Minimized negative mean log-sigmoid of the score margin, plus decay."""
    users, pos, neg = (np.asarray(t, dtype=np.int64) for t in triplets)
    s_i, s_j, _, _ = _batch_scores_and_workspaces(metric, table, users, pos, neg, epsilon)
    loss = float(np.mean(np.logaddexp(0.0, -(s_i - s_j))))
    if weight_decay:
        sq = (np.square(table.users[users]).sum()
              + np.square(table.items[pos]).sum()
              + np.square(table.items[neg]).sum())
        loss += weight_decay * sq / (3 * len(users))
    return loss


def train_step(metric: MetricGraph, table: EmbeddingTable, batch, config: TrainConfig,
               opt_state, epsilon: float = 1e-12) -> float:
    """One optimizer update on exactly the rows in the batch; returns the loss.

    dL/dp_u = mean_b sigma(-margin_b) (dSM(p_u,q_j)/dp - dSM(p_u,q_i)/dp)
    plus the decay term; item rows analogously through the two backward
    passes.  Mutates `table` (and `opt_state`) in place.
    """
    users, pos, neg = (np.asarray(t, dtype=np.int64) for t in batch)
    b = len(users)
    s_i, s_j, ws_i, ws_j = _batch_scores_and_workspaces(metric, table, users, pos, neg, epsilon)
    margin = s_i - s_j
    coef = sigmoid(-margin)
    loss = float(np.mean(np.logaddexp(0.0, -margin)))

    gu_i, gv_i = backward_batch(ws_i, seed=-coef / b)
    gu_j, gv_j = backward_batch(ws_j, seed=coef / b)
    user_grads = gu_i + gu_j
    if config.weight_decay:
        scale = 2.0 * config.weight_decay / (3 * b)
        sq = (np.square(table.users[users]).sum()
              + np.square(table.items[pos]).sum()
              + np.square(table.items[neg]).sum())
        loss += config.weight_decay * sq / (3 * b)
        user_grads = user_grads + scale * table.users[users]
        gv_i = gv_i + scale * table.items[pos]
        gv_j = gv_j + scale * table.items[neg]

    u_rows, u_acc = _accumulate(users, user_grads, config.dim)
    i_rows, i_acc = _accumulate(np.concatenate([pos, neg]),
                                np.concatenate([gv_i, gv_j]), config.dim)
    if opt_state is not None:
        opt_state.step += 1
        step = opt_state.step
        _apply_rows(table.users, opt_state.m_users, opt_state.v_users,
                    u_rows, u_acc, config, step)
        _apply_rows(table.items, opt_state.m_items, opt_state.v_items,
                    i_rows, i_acc, config, step)
    else:
        _apply_rows(table.users, None, None, u_rows, u_acc, config, 0)
        _apply_rows(table.items, None, None, i_rows, i_acc, config, 0)
    return loss


def train(metric: MetricGraph, ds: InteractionDataset, config: TrainConfig,
          epochs_override: int | None = None, patience: int | None = None,
          rng=None, eval_k: int = 20, epsilon: float = 1e-12):
    """Train embeddings for the metric; returns (table, per-epoch mean loss).

    Runs epochs x ceil(|train| / batch) steps, deterministic per seed.  With
    `patience` set, validation ndcg@eval_k is checked each epoch and the
    best-scoring table is returned after `patience` stale epochs.  Raises
    DegenerateCandidateError when more than half the batches of an epoch go
    non-finite.
    """
    config.check()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    table = init_embeddings(ds.n_users, ds.n_items, config, rng)
    epochs = config.epochs if epochs_override is None else epochs_override
    if epochs == 0:
        return table, []
    sampler = TripletSampler(ds, rng)
    steps = max(1, math.ceil(ds.n_interactions("train") / config.batch_size))
    opt_state = make_optimizer_state(config, ds.n_users, ds.n_items)
    losses = []
    best_ndcg, best_table, stale = -np.inf, None, 0
    from .ranking import evaluate  # local import; ranking depends on this module

    for _epoch in range(epochs):
        epoch_losses = []
        failed = 0
        for _step in range(steps):
            batch = sampler.sample(config.batch_size)
            try:
                epoch_losses.append(train_step(metric, table, batch, config,
                                               opt_state, epsilon))
            except NonFiniteError:
                failed += 1
        if failed > steps / 2:
            raise DegenerateCandidateError(
                f"{failed}/{steps} batches non-finite in one epoch")
        losses.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        if patience is not None:
            ndcg = evaluate(metric, table, ds, "valid", k=eval_k, epsilon=epsilon).ndcg
            if ndcg > best_ndcg:
                best_ndcg, best_table, stale = ndcg, table.copy(), 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if patience is not None and best_table is not None:
        return best_table, losses
    return table, losses


def train_full(metric: MetricGraph, ds: InteractionDataset, config: TrainConfig,
               rng=None, eval_k: int = 20, epsilon: float = 1e-12):
    """Full training: `config.epochs` with patience-based early termination."""
    return train(metric, ds, config, patience=config.patience, rng=rng,
                 eval_k=eval_k, epsilon=epsilon)
