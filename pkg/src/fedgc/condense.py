"""Server-side condensed graph and the class-wise gradient-matching loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import fedcore, models
from . import tensor as T
from .fedcore import FedClient, Transcript
from .graphstore import GraphBundle, ParameterError, canonical_edges, normalize_adj
from .models import Adam, ModelParams
from .tensor import ContractError

logger = logging.getLogger(__name__)


class CondensationError(RuntimeError):
    pass


@dataclass
class MatchConfig:
    """Gradient-matching schedule and step sizes.

    Rounds cycle through ``tau_x`` feature updates then ``tau_phi``
    adjacency-generator updates; the model ``theta`` is re-initialised every
    ``refresh`` rounds and trained ``theta_steps`` SGD steps on the condensed
    graph after each round.
    """

    distance: str = "mse"
    epochs: int = 200
    refresh: int = 10
    tau_x: int = 10
    tau_phi: int = 1
    lr_x: float = 0.05
    lr_phi: float = 0.01
    lr_theta: float = 0.1
    theta_steps: int = 5
    ratio: float = 0.04
    hidden: int = 64
    phi_hidden: int = 32
    arch: str = "gcn2"
    sgc_hops: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.refresh < 1 or self.tau_x < 1 or self.tau_phi < 1:
            raise ParameterError("refresh, tau_x and tau_phi must be >= 1")
        if not 0 < self.ratio <= 1:
            raise ParameterError("ratio must lie in (0, 1]")
        if self.distance not in ("mse", "cosine"):
            raise ParameterError(f"unknown distance {self.distance!r}")


def synthesize_labels(counts, ratio: float, n_total: int) -> np.ndarray:
    """Condensed labels following the training-label distribution.

    ``N' = round(ratio * n_total)`` seats are apportioned over classes by
    largest remainder; every class with a positive count gets at least one
    node.  Labels come back sorted by class.
    """
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    if total <= 0:
        raise ContractError("synthesize_labels needs at least one labeled node")
    present = np.flatnonzero(counts > 0)
    n_cond = int(np.floor(ratio * n_total + 0.5))
    if n_cond < len(present):
        logger.warning("condensed size %d below class count %d; raising it", n_cond, len(present))
        n_cond = len(present)
    quota = n_cond * counts / total
    seats = np.floor(quota).astype(np.int64)
    rem = quota - seats
    # stable sort: ties go to the lower class index
    for c in np.argsort(-rem, kind="stable")[: n_cond - int(seats.sum())]:
        seats[c] += 1
    for c in present:
        if seats[c] == 0:
            donor = max(range(len(seats)), key=lambda k: (seats[k], -k))
            seats[donor] -= 1
            seats[c] = 1
    return np.repeat(np.arange(len(counts)), seats)


@dataclass
class CondensedState:
    x: np.ndarray
    phi: ModelParams
    y: np.ndarray
    opt_x: Adam = None
    opt_phi: Adam = None
    epoch: int = 0
    num_classes: int = 0

    def __post_init__(self):
        self.y = np.array(self.y, dtype=np.int64)
        self.y.flags.writeable = False
        if self.num_classes == 0:
            self.num_classes = int(self.y.max()) + 1

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def adjacency(self) -> np.ndarray:
        return models.synth_adjacency(self.phi.weights, self.x).value

    def norm_adj(self) -> np.ndarray:
        return models.normalize_dense(self.adjacency()).value


def init_condensed(y, d: int, seed: int, phi_hidden: int = 32, lr_x: float = 0.05, lr_phi: float = 0.01, num_classes: int = 0) -> CondensedState:
    """Gaussian(0, 0.1^2) features and a fan-in-scaled adjacency generator."""
    if d < 1:
        raise ParameterError("feature dimension must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
    x = rng.normal(0.0, 0.1, size=(len(y), d))
    phi = models.init_params("adjgen", 2 * d, 1, hidden=phi_hidden, seed=rng)
    return CondensedState(
        x=x,
        phi=phi,
        y=y,
        opt_x=Adam([x.shape], lr=lr_x),
        opt_phi=Adam([w.shape for w in phi.weights], lr=lr_phi),
        num_classes=num_classes,
    )


def match_distance(ga, gb, kind: str = "mse") -> T.Tensor:
    """Distance between two aligned gradient lists (taped)."""
    if len(ga) != len(gb):
        raise ContractError(f"gradient lists differ in length: {len(ga)} vs {len(gb)}")
    total = None
    for a, b in zip(ga, gb):
        a, b = T.as_tensor(a), T.as_tensor(b)
        if a.shape != b.shape:
            raise ContractError(f"gradient shapes differ: {a.shape} vs {b.shape}")
        if kind == "mse":
            term = T.mean(T.square(T.sub(a, b)))
        elif kind == "cosine":
            if a.value.ndim == 1:
                a, b = T.reshape(a, (-1, 1)), T.reshape(b, (-1, 1))
            dot = T.tsum(T.mul(a, b), axis=0)
            na = _floored_norm(a)
            nb = _floored_norm(b)
            term = T.tsum(T.sub(1.0, T.div(dot, T.mul(na, nb))))
        else:
            raise ContractError(f"unknown distance {kind!r}")
        total = term if total is None else T.add(total, term)
    return total


def _floored_norm(a: T.Tensor) -> T.Tensor:
    """Column L2 norms, lifted to at least 1e-12 by a constant shift."""
    norm = T.sqrt(T.add(T.tsum(T.square(a), axis=0), 1e-24))
    return T.add(norm, T.Tensor(np.maximum(1e-12 - norm.value, 0.0)))


def fresh_theta(cfg: MatchConfig, rnd: int, d: int, num_classes: int) -> ModelParams:
    """The model sampled at round ``rnd`` (depends only on the seed and refresh block)."""
    block = rnd // cfg.refresh
    seed = np.random.SeedSequence([cfg.seed, 0x7E7A, block])
    return models.init_params(cfg.arch, d, num_classes, hidden=cfg.hidden, hops=cfg.sgc_hops, seed=np.random.default_rng(seed))


def _updating_features(state: CondensedState, cfg: MatchConfig) -> bool:
    return state.epoch % (cfg.tau_x + cfg.tau_phi) < cfg.tau_x


def matching_loss(tape: T.Tape, x, phi, y, agg: dict, theta: ModelParams, distance: str = "mse", epoch: int = 0) -> T.Tensor:
    """Sum over classes of the distance between ``agg[c]`` and the condensed-graph gradient.

    Must run inside ``tape`` (with ``x``/``phi`` watched on it); the inner
    gradient stays on the tape so the result is differentiable wrt both.
    """
    adj = models.normalize_dense(models.synth_adjacency(phi, x))
    ws = [tape.watch(w) for w in theta.weights]
    logits = models.forward(theta, adj, x, weights=ws)
    total = None
    for c in sorted(agg):
        mask = y == c
        if not mask.any():
            raise ContractError(f"class {c} has no condensed node")
        try:
            g_syn = tape.gradient(models.masked_ce(logits, y, mask), ws, as_graph=True)
            dist = match_distance(agg[c], g_syn, distance)
        except T.NumericError as exc:
            raise CondensationError(f"non-finite matching loss at epoch {epoch}, class {c}") from exc
        total = dist if total is None else T.add(total, dist)
    if total is None:
        raise ContractError("no class gradients to match")
    return total


def condensation_round(state: CondensedState, agg: dict, theta: ModelParams, cfg: MatchConfig) -> float:
    """One matching step: total class-wise distance, then update X' or Phi."""
    feats = _updating_features(state, cfg)
    with T.Tape() as tape:
        x = tape.watch(state.x)
        phi = [tape.watch(w) for w in state.phi.weights]
        total = matching_loss(tape, x, phi, state.y, agg, theta, cfg.distance, state.epoch)
        grads = tape.gradient(total, [x] if feats else phi)
    if feats:
        (state.x,) = state.opt_x.step([state.x], grads)
    else:
        state.phi = state.phi.with_weights(state.opt_phi.step(state.phi.weights, grads))
    state.epoch += 1
    return total.item()


def evolve_theta(theta: ModelParams, state: CondensedState, steps: int, lr: float) -> ModelParams:
    """``steps`` full-batch SGD steps of theta on the current condensed graph."""
    if steps <= 0:
        return theta
    adj = state.norm_adj()
    mask = np.ones(state.n, dtype=bool)
    cur = theta
    for _ in range(steps):
        _, grads = models.loss_and_grads(cur, adj, state.x, state.y, mask)
        cur = cur.with_weights([w - lr * g for w, g in zip(cur.weights, grads)])
    return cur


def federated_condense(
    clients: list[FedClient],
    state: CondensedState,
    cfg: MatchConfig,
    transcript: Transcript | None = None,
    ldp_epsilon: float | None = None,
    ldp_sensitivity: float = 1.0,
    on_round=None,
    round_offset: int = 0,
) -> list[float]:
    """Run the federated matching loop; returns the per-round loss.

    Clients upload the class counts of their labeled sets once, then every
    round receive theta, upload per-class gradients (optionally Laplace
    noised) and the server matches the count-weighted aggregate.
    ``round_offset`` shifts transcript round numbers past earlier phases.
    """
    tr = fedcore._transcript(transcript)
    num_classes = state.num_classes
    d = state.x.shape[1]
    counts = []
    for cl in clients:
        cnt = cl.label_counts()
        tr.send("ClassCounts", cl.client_id, round_offset, cnt)
        counts.append(cnt)
    total = np.sum(counts, axis=0)
    classes = [c for c in range(num_classes) if total[c] > 0]
    losses = []
    theta = None
    for rnd in range(cfg.epochs):
        if rnd % cfg.refresh == 0:
            theta = fresh_theta(cfg, rnd, d, num_classes)
        tr.send("ModelParams", fedcore.SERVER, round_offset + rnd, theta)
        per_client = []
        for j, cl in enumerate(clients):
            grads = fedcore.client_per_class_grads(cl, theta, classes)
            if ldp_epsilon is not None:
                seed = int(np.random.SeedSequence([cfg.seed, 0x1D9, rnd, j]).generate_state(1)[0])
                grads = fedcore.ldp_noise(grads, ldp_epsilon, ldp_sensitivity, seed)
            tr.send("PerClassGrads", cl.client_id, round_offset + rnd, grads)
            per_client.append(grads)
        agg = {c: fedcore.aggregate_weighted(per_client, counts, c) for c in classes}
        losses.append(condensation_round(state, agg, theta, cfg))
        theta = evolve_theta(theta, state, cfg.theta_steps, cfg.lr_theta)
        if on_round is not None:
            on_round(rnd, state, losses[-1])
    return losses


def centralized_condense(
    g: GraphBundle,
    state: CondensedState,
    cfg: MatchConfig,
    features=None,
    labels=None,
    label_mask=None,
    on_round=None,
) -> list[float]:
    """Single-process reference loop over the unpartitioned graph.

    Class samples are built directly from the global adjacency (labeled
    class-``c`` nodes and their neighbours) and their gradients are matched
    without any client/server split.
    """
    x = g.features if features is None else np.asarray(features)
    labels = g.labels if labels is None else np.asarray(labels)
    label_mask = g.train_mask if label_mask is None else np.asarray(label_mask, dtype=bool)
    a_hat = normalize_adj(g.edges, g.n)
    neighbours = a_hat > 0
    classes = [c for c in range(state.num_classes) if np.any(label_mask & (labels == c))]
    d = x.shape[1]
    losses = []
    theta = None
    for rnd in range(cfg.epochs):
        if rnd % cfg.refresh == 0:
            theta = fresh_theta(cfg, rnd, d, state.num_classes)
        agg = {}
        for c in classes:
            seeds = label_mask & (labels == c)
            keep = seeds | neighbours[seeds].any(axis=0)
            idx = np.flatnonzero(keep)
            _, agg[c] = models.loss_and_grads(theta, a_hat[np.ix_(idx, idx)], x[idx], labels[idx], seeds[idx])
        losses.append(condensation_round(state, agg, theta, cfg))
        theta = evolve_theta(theta, state, cfg.theta_steps, cfg.lr_theta)
        if on_round is not None:
            on_round(rnd, state, losses[-1])
    return losses


def materialize(state: CondensedState, threshold: float = 0.5) -> GraphBundle:
    """Export the condensed graph, dropping generator weights below ``threshold``."""
    if not 0 <= threshold < 1:
        raise ParameterError("threshold must lie in [0, 1)")
    a = state.adjacency()
    iu, ju = np.triu_indices(state.n, k=1)
    keep = a[iu, ju] >= threshold
    edges = np.stack([iu[keep], ju[keep]], axis=1).astype(np.int64)
    weights = a[iu[keep], ju[keep]]
    edges_c = canonical_edges(edges)
    n = state.n
    return GraphBundle(
        features=state.x.copy(),
        labels=np.array(state.y),
        edges=edges_c,
        train_mask=np.ones(n, dtype=bool),
        val_mask=np.zeros(n, dtype=bool),
        test_mask=np.zeros(n, dtype=bool),
        num_classes=state.num_classes,
        edge_weights=weights,
        self_weights=np.diag(a).copy(),
    )
