"""Membership-inference attack harness and utility metrics.

The attacker holds in-distribution shadow nodes, trains a shadow GCN on half
of them, and fits an MLP that separates the shadow model's sorted posteriors
on its training nodes from those on held-out nodes.  The same MLP then scores
the target model's posteriors on probe nodes.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import models
from . import tensor as T
from .graphstore import GraphBundle, ParameterError, normalize_adj
from .models import ModelParams
from .tensor import ContractError

logger = logging.getLogger(__name__)

REPORT_FIELDS = ("run_id", "gamma", "defense", "ratio", "acc", "auc", "seed")


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def accuracy(logits, labels, mask=None) -> float:
    """Masked argmax accuracy; ``np.argmax`` breaks ties to the lowest class."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    mask = np.ones(len(labels), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("accuracy over an empty mask")
    return float((np.argmax(logits[mask], axis=1) == labels[mask]).mean())


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sorted_posteriors(logits) -> np.ndarray:
    return -np.sort(-softmax(np.asarray(logits)), axis=1)


# --- shadow data -----------------------------------------------------------


@dataclass(frozen=True)
class ShadowSplit:
    """Attacker's shadow graph: ``train``/``out`` are positions within ``nodes``."""

    nodes: np.ndarray
    train: np.ndarray
    out: np.ndarray
    edges: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train)


def induced_edges(edges, nodes) -> np.ndarray:
    """Edges with both endpoints in ``nodes``, relabelled to positions in ``nodes``."""
    nodes = np.asarray(nodes)
    edges = np.asarray(edges).reshape(-1, 2)
    pos = np.full(int(max(edges.max(initial=-1), nodes.max(initial=-1))) + 1, -1)
    pos[nodes] = np.arange(len(nodes))
    mapped = pos[edges]
    keep = (mapped >= 0).all(axis=1)
    return mapped[keep]


def build_shadow(g: GraphBundle, size: int, seed: int) -> ShadowSplit:
    """Two disjoint random node sets of ``size`` drawn outside train and test."""
    if size < 0:
        raise ParameterError("shadow size must be >= 0")
    pool = np.flatnonzero(~(g.train_mask | g.test_mask))
    if 2 * size > len(pool):
        raise ParameterError(f"shadow split needs {2 * size} nodes, only {len(pool)} available")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5AD]))
    picked = rng.permutation(pool)[: 2 * size]
    nodes = np.sort(picked)
    pos = {int(v): i for i, v in enumerate(nodes)}
    train = np.array(sorted(pos[int(v)] for v in picked[:size]), dtype=np.int64)
    out = np.array(sorted(pos[int(v)] for v in picked[size:]), dtype=np.int64)
    return ShadowSplit(nodes, train, out, induced_edges(g.edges, nodes) if size else np.zeros((0, 2), np.int64))


# --- attack model ----------------------------------------------------------


def mlp3_forward(weights, x) -> T.Tensor:
    """Three-layer MLP with biases and a single logit output."""
    w1, b1, w2, b2, w3, b3 = weights
    h = T.relu(T.add(T.matmul(x, w1), b1))
    h = T.relu(T.add(T.matmul(h, w2), b2))
    return T.add(T.matmul(h, w3), b3)


def bce_with_logits(logit: T.Tensor, target) -> T.Tensor:
    """Mean binary cross-entropy: ``softplus(s) - y * s``."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    return T.mean(T.sub(T.softplus(logit), T.mul(logit, target)))


@dataclass
class AttackModel:
    weights: list
    shadow: ModelParams
    shadow_train_acc: float = 0.0

    def score(self, posteriors) -> np.ndarray:
        logit = mlp3_forward(self.weights, np.asarray(posteriors)).value[:, 0]
        return 1.0 / (1.0 + np.exp(-logit))


def init_attack(in_dim: int, hidden: int, seed) -> list[np.ndarray]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [
        models.glorot(rng, in_dim, hidden), np.zeros((1, hidden)),
        models.glorot(rng, hidden, hidden), np.zeros((1, hidden)),
        models.glorot(rng, hidden, 1), np.zeros((1, 1)),
    ]


def train_attack_mlp(features, targets, epochs: int = 300, lr: float = 0.01, hidden: int = 64, seed=0) -> list[np.ndarray]:
    weights = init_attack(features.shape[1], hidden, seed)
    opt = models.Adam([w.shape for w in weights], lr=lr)
    for _ in range(epochs):
        with T.Tape() as tape:
            ws = [tape.watch(w) for w in weights]
            loss = bce_with_logits(mlp3_forward(ws, features), targets)
            grads = tape.gradient(loss, ws)
        weights = opt.step(weights, grads)
    return weights


def train_shadow_and_attack(
    split: ShadowSplit,
    g: GraphBundle,
    features=None,
    epochs: int = 300,
    attack_epochs: int = 300,
    hidden: int = 64,
    lr: float = 0.01,
    seed: int = 0,
    shadows: int = 1,
) -> AttackModel:
    """Overfit shadow GCNs on the shadow-train half and fit the attack MLP.

    With ``shadows > 1`` each extra shadow model gets its own initialisation
    and the attack trains on the pooled posteriors.  The returned model keeps
    the first shadow.
    """
    if split.size == 0:
        raise ContractError("empty shadow split")
    if shadows < 1:
        raise ParameterError("shadows must be >= 1")
    x = g.features if features is None else np.asarray(features)
    xs = x[split.nodes]
    ys = g.labels[split.nodes]
    adj = normalize_adj(split.edges, len(split.nodes))
    present = np.unique(ys[split.train])
    if len(present) < g.num_classes:
        logger.warning("shadow-train lacks classes %s", sorted(set(range(g.num_classes)) - set(present.tolist())))
    attack_seed, *shadow_seeds = np.random.SeedSequence([seed, 0xA77]).spawn(shadows + 1)
    mask = np.zeros(len(split.nodes), dtype=bool)
    mask[split.train] = True
    idx = np.concatenate([split.train, split.out])
    member = np.concatenate([np.ones(len(split.train)), np.zeros(len(split.out))])
    feats, targets, trained = [], [], []
    for ss in shadow_seeds:
        shadow = models.init_params("gcn2", x.shape[1], g.num_classes, hidden=hidden, seed=np.random.default_rng(ss))
        shadow, _ = models.train(shadow, adj, xs, ys, mask, epochs, lr=lr)
        feats.append(sorted_posteriors(models.predict(shadow, adj, xs))[idx])
        targets.append(member)
        trained.append(shadow)
    weights = train_attack_mlp(
        np.concatenate(feats), np.concatenate(targets), attack_epochs, lr, hidden, np.random.default_rng(attack_seed)
    )
    return AttackModel(weights, trained[0], accuracy(models.predict(trained[0], adj, xs), ys, mask))


# --- probing ---------------------------------------------------------------


def rewire_probe_edges(edges, n: int, probes, prob: float, seed) -> np.ndarray:
    """Randomly rewire the probes' edges to non-probe nodes, preserving probe degrees.

    Each edge ``(v, u)`` from a probe ``v`` to a non-probe ``u`` is, with
    probability ``prob``, replaced by ``(v, w)`` for a uniformly drawn
    non-probe ``w`` not already adjacent to ``v``.  Probe-probe edges are kept
    so that every probe's degree is unchanged.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    adj = [set() for _ in range(n)]
    for u, v in np.asarray(edges).reshape(-1, 2):
        adj[u].add(int(v))
        adj[v].add(int(u))
    is_probe = np.zeros(n, dtype=bool)
    is_probe[np.asarray(probes, dtype=np.int64)] = True
    others = np.flatnonzero(~is_probe)
    for v in np.flatnonzero(is_probe):
        v = int(v)
        for u in sorted(adj[v]):
            if is_probe[u] or rng.random() >= prob:
                continue
            free = others[[w not in adj[v] for w in others]]
            if len(free) == 0:
                continue
            w = int(free[rng.integers(len(free))])
            adj[v].discard(u)
            adj[u].discard(v)
            adj[v].add(w)
            adj[w].add(v)
    out = sorted((a, b) for a in range(n) for b in adj[a] if a < b)
    return np.array(out, dtype=np.int64).reshape(-1, 2)


@dataclass
class AttackReport:
    scores: np.ndarray
    membership: np.ndarray
    auc: float
    acc: float
    digest: str = ""
    meta: dict = field(default_factory=dict)

    def row(self, run_id: str, gamma, defense: str, ratio, seed) -> dict:
        return {
            "run_id": run_id, "gamma": gamma, "defense": defense, "ratio": ratio,
            "acc": f"{self.acc:.6f}", "auc": f"{self.auc:.6f}", "seed": seed,
        }


def write_reports(rows, path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def run_attack(
    attack: AttackModel,
    target: ModelParams,
    g: GraphBundle,
    members,
    nonmembers,
    features=None,
    rewire: float = 0.5,
    seed: int = 0,
    acc: float = float("nan"),
) -> AttackReport:
    """Score probe nodes from the target's posteriors on the attacker's view.

    The attacker feeds raw features over the global structure; with
    ``rewire > 0`` each probe's incident edges are randomly rewired to model
    inexact neighbourhood knowledge.
    """
    members = np.asarray(members, dtype=np.int64)
    nonmembers = np.asarray(nonmembers, dtype=np.int64)
    if len(members) == 0 or len(nonmembers) == 0:
        raise ContractError("run_attack needs non-empty member and nonmember sets")
    x = g.features if features is None else np.asarray(features)
    probes = np.concatenate([members, nonmembers])
    edges = g.edges
    if rewire > 0:
        edges = rewire_probe_edges(edges, g.n, probes, rewire, np.random.default_rng(np.random.SeedSequence([seed, 0x3E7])))
    adj = normalize_adj(edges, g.n)
    post = sorted_posteriors(models.predict(target, adj, x))[probes]
    scores = attack.score(post)
    membership = np.concatenate([np.ones(len(members), int), np.zeros(len(nonmembers), int)])
    return AttackReport(scores, membership, auc(scores, membership), acc, target.checksum())


def probe_sets(g: GraphBundle, members, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Members as given; nonmembers are test nodes subsampled to the same count."""
    members = np.sort(np.asarray(members, dtype=np.int64))
    test = np.flatnonzero(g.test_mask)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9B0]))
    k = min(len(members), len(test))
    nonmembers = np.sort(rng.permutation(test)[:k])
    return members, nonmembers
