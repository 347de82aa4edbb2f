"""Bias-free GCN / SGC / MLP models and the condensed-adjacency generator.

Forward functions take the weight list as either numpy arrays or tape
tensors, so the same code serves plain inference, first-order training and
the second-order matching loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

ARCHITECTURES = ("gcn2", "sgc", "mlp2", "adjgen")


@dataclass
class ModelParams:
    """Architecture tag plus its ordered weight matrices."""

    arch: str
    weights: list[np.ndarray]
    hops: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        expected = {"gcn2": 2, "mlp2": 2, "adjgen": 2, "sgc": 1}[self.arch]
        if len(self.weights) != expected:
            raise ValueError(f"{self.arch} needs {expected} weight matrices")
        if expected == 2 and self.weights[0].shape[1] != self.weights[1].shape[0]:
            raise ValueError(f"inconsistent layer shapes {[w.shape for w in self.weights]}")
        if self.arch == "adjgen" and self.weights[1].shape[1] != 1:
            raise ValueError("adjgen output layer must have one column")

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, [w.copy() for w in self.weights], self.hops)

    def with_weights(self, weights) -> "ModelParams":
        return ModelParams(self.arch, [np.array(getattr(w, "value", w)) for w in weights], self.hops)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.blake2b(digest_size=8)
        for w in self.weights:
            h.update(np.ascontiguousarray(w).tobytes())
        return h.hexdigest()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(arch: str, in_dim: int, out_dim: int, hidden: int = 64, hops: int = 2, seed=0) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if arch in ("gcn2", "mlp2"):
        return ModelParams(arch, [glorot(rng, in_dim, hidden), glorot(rng, hidden, out_dim)])
    if arch == "sgc":
        return ModelParams(arch, [glorot(rng, in_dim, out_dim)], hops=hops)
    if arch == "adjgen":
        # uniform fan-in scaling
        b1, b2 = 1.0 / np.sqrt(in_dim), 1.0 / np.sqrt(hidden)
        return ModelParams(
            arch, [rng.uniform(-b1, b1, (in_dim, hidden)), rng.uniform(-b2, b2, (hidden, 1))]
        )
    raise ValueError(f"unknown architecture {arch!r}")


def _first_hop(adj, x, cross_sums):
    h = T.matmul(adj, x)
    if cross_sums is not None:
        h = T.add(h, cross_sums)
    return h


def gcn_forward(weights, adj, x, cross_sums=None) -> Tensor:
    """Two-layer GCN: ``A relu((A X + cross) W1) W2``."""
    w1, w2 = weights
    h = T.relu(T.matmul(_first_hop(adj, x, cross_sums), w1))
    return T.matmul(T.matmul(adj, h), w2)


def sgc_forward(weights, adj, x, cross_sums=None, hops: int = 2) -> Tensor:
    """``A^k (X + cross) W`` with the cross term entering at the first hop."""
    (w,) = weights
    h = as_tensor(x)
    if hops > 0:
        h = _first_hop(adj, h, cross_sums)
        for _ in range(hops - 1):
            h = T.matmul(adj, h)
    return T.matmul(h, w)


def mlp_forward(weights, x) -> Tensor:
    w1, w2 = weights
    return T.matmul(T.relu(T.matmul(x, w1)), w2)


def forward(params: ModelParams, adj, x, cross_sums=None, weights=None) -> Tensor:
    """Dispatch on ``params.arch``; ``weights`` overrides the stored arrays (e.g. tape leaves)."""
    w = params.weights if weights is None else weights
    if params.arch == "gcn2":
        return gcn_forward(w, adj, x, cross_sums)
    if params.arch == "sgc":
        return sgc_forward(w, adj, x, cross_sums, hops=params.hops)
    if params.arch == "mlp2":
        return mlp_forward(w, x)
    raise ValueError(f"{params.arch} is not a node classifier")


masked_ce = T.masked_cross_entropy


def pair_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return ii.reshape(-1), jj.reshape(-1)


def synth_adjacency(phi_weights, x) -> Tensor:
    """Symmetric dense adjacency ``sigmoid((f([xi||xj]) + f([xj||xi])) / 2)``."""
    x = as_tensor(x)
    n = x.shape[0]
    w1, w2 = phi_weights
    ii, jj = pair_index(n)
    pairs = T.concat_cols([T.gather_rows(x, ii), T.gather_rows(x, jj)])
    scores = T.reshape(T.matmul(T.relu(T.matmul(pairs, w1)), w2), (n, n))
    # s + s^T is exactly symmetric in floating point
    return T.sigmoid(T.scale(T.add(scores, T.transpose(scores)), 0.5))


def normalize_dense(a) -> Tensor:
    """Differentiable ``D^-1/2 (A + I) D^-1/2`` for a dense weighted adjacency."""
    a = as_tensor(a)
    n = a.shape[0]
    eye = Tensor(np.eye(n))
    a_hat = T.add(a, eye)
    inv_sqrt = T.div(1.0, T.sqrt(T.tsum(a_hat, axis=1, keepdims=True)))
    return T.mul(a_hat, T.matmul(inv_sqrt, T.transpose(inv_sqrt)))


class Adam:
    """Adam over a list of numpy arrays (returns updated copies)."""

    def __init__(self, shapes, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            g = np.asarray(getattr(g, "value", g))
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def loss_and_grads(params: ModelParams, adj, x, labels, mask, cross_sums=None):
    """Masked CE and its gradient wrt every weight (numpy arrays)."""
    with T.Tape() as tape:
        ws = [tape.watch(w) for w in params.weights]
        loss = masked_ce(forward(params, adj, x, cross_sums, weights=ws), labels, mask)
        grads = tape.gradient(loss, ws)
    return loss.item(), [g.value for g in grads]


def train(
    params: ModelParams,
    adj,
    x,
    labels,
    mask,
    epochs: int,
    lr: float = 0.01,
    cross_sums=None,
    optimizer: str = "adam",
    weight_decay: float = 0.0,
    select=None,
) -> tuple[ModelParams, list[float]]:
    """Full-batch training.

    ``select`` is an optional callable ``params -> score``; when given, the
    best-scoring parameters seen (evaluated before each step and at the end)
    are returned instead of the final ones.
    """
    adj = None if adj is None else np.asarray(getattr(adj, "value", adj))
    x = np.asarray(getattr(x, "value", x))
    cur = params.copy()
    opt = Adam([w.shape for w in cur.weights], lr=lr) if optimizer == "adam" else None
    losses = []
    best, best_score = None, -np.inf
    for _ in range(epochs):
        if select is not None:
            score = select(cur)
            if score > best_score:
                best, best_score = cur.copy(), score
        loss, grads = loss_and_grads(cur, adj, x, labels, mask, cross_sums)
        losses.append(loss)
        if weight_decay:
            grads = [g + weight_decay * w for g, w in zip(grads, cur.weights)]
        if opt is not None:
            cur = cur.with_weights(opt.step(cur.weights, grads))
        else:
            cur = cur.with_weights([w - lr * g for w, g in zip(cur.weights, grads)])
    if select is not None:
        score = select(cur)
        if score > best_score or best is None:
            best, best_score = cur.copy(), score
        return best, losses
    return cur, losses


def predict(params: ModelParams, adj, x, cross_sums=None) -> np.ndarray:
    return forward(params, adj, x, cross_sums).value
