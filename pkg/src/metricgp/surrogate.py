"""Sequence-to-one fitness regressor over linearized metric graphs.

A graph becomes a pre-order token sequence (start token, one token per node,
end token); smul nodes get one token per constant-pool value so the sequence
determines the tree exactly.  Tokens are embedded, run through a single
gated recurrent cell, and the final hidden state is mapped to a scalar
fitness prediction.  Training minimizes the mean squared error over a log of
(sequence, measured fitness) pairs by full-batch gradient descent; all
gradients are hand-derived and checked against finite differences in the
test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownTokenError
from .grammar import format_constant
from .graph import ARITY, Leaf, MetricGraph, Node, Op, leaf_node, node_paths, op_node

START = "<s>"
END = "</s>"


@dataclass(frozen=True)
class TokenVocabulary:
    """Bijection between tokens and (operator-or-leaf, constant) identities."""

    tokens: tuple[str, ...]

    @classmethod
    def from_constant_pool(cls, pool=(-1.0, 0.5, 2.0)) -> "TokenVocabulary":
        names = [START, END]
        names += [op.value for op in Op if op is not Op.SMUL]
        names += [f"smul:{format_constant(c)}" for c in pool]
        names += [leaf.value for leaf in Leaf]
        return cls(tokens=tuple(names))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise UnknownTokenError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.int64)


def node_token(node: Node) -> str:
    if node.is_leaf:
        return node.leaf.value
    if node.op is Op.SMUL:
        return f"smul:{format_constant(node.constant)}"
    return node.op.value


def graph_to_tokens(graph: MetricGraph) -> list[str]:
    """Pre-order (root first, children left to right) wrapped in start/end."""
    return [START] + [node_token(n) for _, _, n in node_paths(graph.root)] + [END]


def graph_to_sequence(graph: MetricGraph, vocab: TokenVocabulary) -> np.ndarray:
    return vocab.encode(graph_to_tokens(graph))


def tokens_to_graph(tokens) -> MetricGraph:
    """Inverse of `graph_to_tokens`; arity is token-determined so the
    pre-order walk reconstructs the tree exactly."""
    if not tokens or tokens[0] != START or tokens[-1] != END:
        raise ValueError("sequence must be wrapped in start/end tokens")
    body = list(tokens[1:-1])
    pos = 0

    def rec() -> Node:
        nonlocal pos
        tok = body[pos]
        pos += 1
        for leaf in Leaf:
            if tok == leaf.value:
                return leaf_node(leaf)
        if tok.startswith("smul:"):
            return op_node(Op.SMUL, rec(), constant=float(tok.split(":", 1)[1]))
        op = Op(tok)
        return op_node(op, *[rec() for _ in range(ARITY[op])])

    root = rec()
    if pos != len(body):
        raise ValueError("trailing tokens after one complete tree")
    depth = max(d for _, d, _ in node_paths(root))
    return MetricGraph(root=root, max_depth=max(depth, 1))


@dataclass
class SurrogateDataset:
    """Append-only log of (token-id sequence, measured fitness) pairs.

    Non-finite fitness values (degenerate candidates) are silently skipped;
    unbounded targets would wreck the squared-error regression.
    """

    vocab: TokenVocabulary
    sequences: list[np.ndarray] = field(default_factory=list)
    fitnesses: list[float] = field(default_factory=list)
    expressions: list[str] = field(default_factory=list)

    def append(self, graph: MetricGraph, fitness: float, expression: str | None = None) -> bool:
        if not math.isfinite(fitness):
            return False
        self.sequences.append(graph_to_sequence(graph, self.vocab))
        self.fitnesses.append(float(fitness))
        from .grammar import print_expr
        self.expressions.append(expression if expression is not None else print_expr(graph))
        return True

    def __len__(self) -> int:
        return len(self.sequences)


class SurrogateModel:
    """Token embedding + gated recurrent cell + affine head, all numpy.

    The output head starts at zero, so an untrained model predicts 0 for
    every sequence.
    """

    PARAM_NAMES = ("embed", "wz", "uz", "bz", "wr", "ur", "br",
                   "wh", "uh", "bh", "w_out", "b_out")

    def __init__(self, vocab: TokenVocabulary, embed_dim: int = 16,
                 hidden_dim: int = 32, seed: int = 0):
        self.vocab = vocab
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        e, h = embed_dim, hidden_dim
        scale = 0.1
        self.embed = scale * rng.standard_normal((vocab.size, e))
        self.wz = scale * rng.standard_normal((h, e))
        self.uz = scale * rng.standard_normal((h, h))
        self.bz = np.zeros(h)
        self.wr = scale * rng.standard_normal((h, e))
        self.ur = scale * rng.standard_normal((h, h))
        self.br = np.zeros(h)
        self.wh = scale * rng.standard_normal((h, e))
        self.uh = scale * rng.standard_normal((h, h))
        self.bh = np.zeros(h)
        self.w_out = np.zeros(h)
        self.b_out = np.zeros(1)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def set_params(self, values: dict[str, np.ndarray]):
        for name in self.PARAM_NAMES:
            getattr(self, name)[...] = values[name]

    def _run(self, seq: np.ndarray):
        """Forward pass caching per-step activations for backprop."""
        h = np.zeros(self.hidden_dim)
        cache = []
        for tok in seq:
            x = self.embed[tok]
            z = _sigmoid(self.wz @ x + self.uz @ h + self.bz)
            r = _sigmoid(self.wr @ x + self.ur @ h + self.br)
            c = np.tanh(self.wh @ x + self.uh @ (r * h) + self.bh)
            h_new = (1 - z) * h + z * c
            cache.append((tok, x, h, z, r, c))
            h = h_new
        y = float(self.w_out @ h + self.b_out[0])
        return y, h, cache

    def predict(self, sequence) -> float:
        """Deterministic fitness estimate for one token-id sequence."""
        seq = np.asarray(sequence, dtype=np.int64)
        if len(seq) and (seq.min() < 0 or seq.max() >= self.vocab.size):
            raise UnknownTokenError("sequence contains out-of-vocabulary ids")
        y, _, _ = self._run(seq)
        return y

    def predict_graph(self, graph: MetricGraph) -> float:
        return self.predict(graph_to_sequence(graph, self.vocab))

    def _backprop(self, seq, dy, grads):
        """Accumulate d(dy * y)/d(params) into `grads` for one sequence."""
        y, h_final, cache = self._run(seq)
        grads["w_out"] += dy * h_final
        grads["b_out"] += dy
        dh = dy * self.w_out
        for tok, x, h_prev, z, r, c in reversed(cache):
            dz = dh * (c - h_prev)
            dc = dh * z
            dh_next = dh * (1 - z)
            dac = dc * (1 - c ** 2)
            grads["wh"] += np.outer(dac, x)
            grads["uh"] += np.outer(dac, r * h_prev)
            grads["bh"] += dac
            uh_dac = self.uh.T @ dac
            dr = uh_dac * h_prev
            dh_next = dh_next + uh_dac * r
            daz = dz * z * (1 - z)
            dar = dr * r * (1 - r)
            grads["wz"] += np.outer(daz, x)
            grads["uz"] += np.outer(daz, h_prev)
            grads["bz"] += daz
            grads["wr"] += np.outer(dar, x)
            grads["ur"] += np.outer(dar, h_prev)
            grads["br"] += dar
            dh_next = dh_next + self.uz.T @ daz + self.ur.T @ dar
            dx = self.wz.T @ daz + self.wr.T @ dar + self.wh.T @ dac
            grads["embed"][tok] += dx
            dh = dh_next
        return y

    def loss_and_grads(self, dataset: SurrogateDataset):
        """Mean squared error over the log and its parameter gradients."""
        n = len(dataset)
        grads = {name: np.zeros_like(getattr(self, name)) for name in self.PARAM_NAMES}
        total = 0.0
        for seq, target in zip(dataset.sequences, dataset.fitnesses):
            y, _, _ = self._run(seq)
            resid = y - target
            total += resid ** 2
            self._backprop(seq, 2.0 * resid / n, grads)
        return total / n, grads


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mse_loss(model: SurrogateModel, dataset: SurrogateDataset) -> float:
    """Mean of squared prediction residuals over the log."""
    preds = np.array([model.predict(s) for s in dataset.sequences])
    return float(np.mean((preds - np.array(dataset.fitnesses)) ** 2))


def train_surrogate(model: SurrogateModel, dataset: SurrogateDataset,
                    epochs: int = 200, lr: float = 1e-3):
    """Full-batch gradient descent on the squared-error loss.

    Returns (model, per-epoch loss trace); the trace entry for an epoch is
    the loss under the parameters that epoch started with.
    """
    if len(dataset) < 2:
        raise ValueError("surrogate training needs at least two logged pairs")
    trace = []
    for _ in range(epochs):
        loss, grads = model.loss_and_grads(dataset)
        trace.append(loss)
        for name in model.PARAM_NAMES:
            getattr(model, name)[...] -= lr * grads[name]
    return model, trace


def save_surrogate(model: SurrogateModel, path: str):
    """Checkpoint: vocabulary, dimensions, and little-endian float64 arrays."""
    arrays = {name: np.ascontiguousarray(getattr(model, name), dtype="<f8")
              for name in model.PARAM_NAMES}
    np.savez(path, tokens=np.array(model.vocab.tokens),
             dims=np.array([model.embed_dim, model.hidden_dim, model.seed], dtype="<i8"),
             **arrays)


def load_surrogate(path: str) -> SurrogateModel:
    with np.load(path, allow_pickle=False) as blob:
        vocab = TokenVocabulary(tokens=tuple(str(t) for t in blob["tokens"]))
        embed_dim, hidden_dim, seed = (int(x) for x in blob["dims"])
        model = SurrogateModel(vocab, embed_dim, hidden_dim, seed)
        model.set_params({name: blob[name].astype(np.float64)
                          for name in model.PARAM_NAMES})
    return model


def save_dsur_log(dataset: SurrogateDataset, path: str):
    """Text log, one `expression<TAB>fitness` line per evaluated candidate."""
    with open(path, "w", encoding="utf-8") as fh:
        for expr, fitness in zip(dataset.expressions, dataset.fitnesses):
            fh.write(f"{expr}\t{fitness!r}\n")
