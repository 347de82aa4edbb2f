"""Federation protocol: messages, secure sums, class-weighted aggregation, FedAvg.

Clients are processed in ascending id order everywhere, and every message
that crosses the client/server boundary is appended to a :class:`Transcript`
so two runs can be compared digest by digest.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

from . import models
from .graphstore import ClientSubgraph, ParameterError, class_subgraph
from .models import ModelParams
from .tensor import ContractError

logger = logging.getLogger(__name__)

SERVER = "server"
MODULUS = 2**62
FIXED_POINT_SCALE = 2**20
# finer resolution for the one-time exchange; range stays +-2^21 / participants
EXCHANGE_SCALE = 2**40
MESSAGE_KINDS = ("ClassCounts", "PerClassGrads", "ModelParams", "MaskedVectors", "PseudoLabelAck", "ValAccuracy")


class ProtocolError(RuntimeError):
    pass


class SecureSumAbort(ProtocolError):
    """A participant's contribution is missing, so pairwise masks cannot cancel."""


class SecureSumRangeError(OverflowError):
    pass


# --- messages & transcript -------------------------------------------------


def _feed(h, obj) -> None:
    if isinstance(obj, ModelParams):
        h.update(obj.arch.encode())
        _feed(h, obj.weights)
    elif isinstance(obj, np.ndarray):
        h.update(str(obj.dtype).encode() + str(obj.shape).encode())
        h.update(np.ascontiguousarray(obj).tobytes())
    elif isinstance(obj, dict):
        for k in sorted(obj):
            h.update(repr(k).encode())
            _feed(h, obj[k])
    elif isinstance(obj, (list, tuple)):
        h.update(b"[%d]" % len(obj))
        for item in obj:
            _feed(h, item)
    else:
        h.update(repr(obj).encode())


def payload_digest(payload: Any) -> str:
    """Hex of a 64-bit BLAKE2b checksum over a canonical payload encoding."""
    h = hashlib.blake2b(digest_size=8)
    _feed(h, payload)
    return h.hexdigest()


@dataclass(frozen=True)
class FedMessage:
    kind: str
    sender: int | str
    round: int
    payload: Any

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ProtocolError(f"unknown message kind {self.kind!r}")


@dataclass
class Transcript:
    """Append-only log of (round, sender, kind, payload digest)."""

    records: list[dict] = field(default_factory=list)
    _last_round: dict = field(default_factory=dict, repr=False)

    def log(self, msg: FedMessage) -> FedMessage:
        if self._last_round.get(msg.sender, -1) > msg.round:
            raise ProtocolError(f"round went backwards for sender {msg.sender}")
        self._last_round[msg.sender] = msg.round
        self.records.append(
            {"round": msg.round, "sender": msg.sender, "kind": msg.kind, "digest": payload_digest(msg.payload)}
        )
        return msg

    def send(self, kind: str, sender, rnd: int, payload) -> FedMessage:
        return self.log(FedMessage(kind, sender, rnd, payload))

    def lines(self) -> list[str]:
        return [json.dumps(r, sort_keys=True) for r in self.records]

    def digest(self) -> str:
        return payload_digest("\n".join(self.lines()))

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(line + "\n" for line in self.lines()), encoding="utf-8")
        return path


class _NullTranscript(Transcript):
    def log(self, msg):
        return msg


def _transcript(t):
    return _NullTranscript() if t is None else t


# --- client state ----------------------------------------------------------


@dataclass
class FedClient:
    """A client's working state on top of its immutable subgraph view.

    ``features`` is what the client currently trains on (raw X or the
    transformed Z).  ``cross_sums`` are the x-space neighbour aggregates from
    the one-time exchange; they enter the first propagation only when
    ``use_cross`` is set (i.e. while ``features`` is still raw X).
    """

    sub: ClientSubgraph
    features: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    cross_sums: np.ndarray | None = None
    use_cross: bool = True

    @classmethod
    def from_subgraph(cls, sub: ClientSubgraph) -> "FedClient":
        return cls(sub=sub, features=sub.features, labels=sub.labels.copy(), label_mask=sub.train_mask.copy())

    @property
    def client_id(self) -> int:
        return self.sub.client_id

    @property
    def cross(self) -> np.ndarray | None:
        return self.cross_sums if self.use_cross else None

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels[self.label_mask], minlength=self.sub.num_classes)


def report_class_counts(client, mask=None) -> np.ndarray:
    """Per-class counts over the client's true training nodes."""
    sub = client.sub if isinstance(client, FedClient) else client
    mask = sub.train_mask if mask is None else mask
    return np.bincount(sub.labels[mask], minlength=sub.num_classes)


def client_per_class_grads(client: FedClient, theta: ModelParams, classes) -> dict[int, list[np.ndarray]]:
    """Gradient of the class-``c`` masked CE on each class sample, for classes present locally."""
    if theta.weights[0].shape[0] != client.features.shape[1]:
        raise ProtocolError(
            f"client {client.client_id}: theta expects {theta.weights[0].shape[0]} features, "
            f"client holds {client.features.shape[1]}"
        )
    out = {}
    for c in classes:
        s = class_subgraph(client.sub, c, labels=client.labels, label_mask=client.label_mask)
        if s is None:
            continue
        cross = client.cross[s.index] if client.cross is not None else None
        _, grads = models.loss_and_grads(theta, s.adj, client.features[s.index], s.labels, s.loss_mask, cross)
        out[int(c)] = grads
    return out


def aggregation_weights(counts, c: int) -> list[Fraction]:
    total = sum(int(cnt[c]) for cnt in counts)
    if total == 0:
        raise ContractError(f"class {c} has no labeled nodes on any client")
    return [Fraction(int(cnt[c]), total) for cnt in counts]


def aggregate_weighted(per_client, counts, c: int) -> list[np.ndarray]:
    """``sum_j n_j(c)/n(c) * grad_j`` in ascending client order."""
    weights = aggregation_weights(counts, c)
    acc = None
    for j, (w, grads) in enumerate(zip(weights, per_client)):
        if w == 0:
            continue
        if c not in grads:
            raise ProtocolError(f"client {j} reported class {c} but sent no gradient for it")
        wf = float(w)
        term = [wf * g for g in grads[c]]
        acc = term if acc is None else [a + t for a, t in zip(acc, term)]
    return acc


# --- secure sum ------------------------------------------------------------


@dataclass(frozen=True)
class SecureSumSession:
    """Pairwise additive masking over ``Z_{2^62}`` with 20-bit fixed point."""

    participants: tuple
    seed: int
    modulus: int = MODULUS
    scale: int = FIXED_POINT_SCALE

    def pair_mask(self, i, j, size: int) -> np.ndarray:
        a, b = sorted((self.participants.index(i), self.participants.index(j)))
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, a, b]))
        return rng.integers(0, self.modulus, size=size, dtype=np.uint64)

    def mask_for(self, i, size: int) -> np.ndarray:
        m = np.uint64(self.modulus)
        total = np.zeros(size, dtype=np.uint64)
        for j in self.participants:
            if j == i:
                continue
            # lower position adds the pair mask, higher position subtracts it
            pm = self.pair_mask(i, j, size)
            if self.participants.index(i) < self.participants.index(j):
                total = (total + pm) % m
            else:
                total = (total + (m - pm) % m) % m
        return total

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        limit = 2.0**61 / (self.scale * len(self.participants))
        if x.size and np.abs(x).max() >= limit:
            raise SecureSumRangeError(f"value magnitude {np.abs(x).max():.3g} exceeds secure-sum range {limit:.3g}")
        enc = np.round(x * self.scale).astype(np.int64)
        return (enc % np.int64(self.modulus)).astype(np.uint64)

    def masked(self, i, x) -> np.ndarray:
        enc = self.encode(x)
        return (enc + self.mask_for(i, enc.size)) % np.uint64(self.modulus)

    def combine(self, masked: dict) -> np.ndarray:
        missing = [p for p in self.participants if p not in masked]
        if missing:
            raise SecureSumAbort(f"missing contributions from {missing}; masks would not cancel")
        m = np.uint64(self.modulus)
        total = None
        for p in self.participants:
            total = masked[p] if total is None else (total + masked[p]) % m
        v = total.astype(np.int64)
        half = np.int64(self.modulus // 2)
        v = np.where(v >= half, v - np.int64(self.modulus), v)
        return v.astype(np.float64) / self.scale


def secure_sum(session: SecureSumSession, contributions) -> np.ndarray:
    """Sum of equal-length vectors where the server only sees masked encodings.

    ``contributions`` maps participant -> vector (a list is taken in
    participant order).
    """
    if not isinstance(contributions, dict):
        contributions = dict(zip(session.participants, contributions))
    sizes = {np.asarray(v).size for v in contributions.values()}
    if len(sizes) > 1:
        raise ProtocolError(f"contributions differ in length: {sorted(sizes)}")
    masked = {p: session.masked(p, v) for p, v in contributions.items() if p in session.participants}
    return session.combine(masked)


def neighbor_exchange(
    clients, features=None, seed: int = 0, transcript: Transcript | None = None, scale: int = EXCHANGE_SCALE
) -> list[np.ndarray]:
    """One-time secure exchange of cross-client neighbour aggregates.

    For client ``i`` and local node ``v`` the result row is
    ``sum_{u in N(v), u not in V_i} A_hat[v, u] x_u``.  Each remote holder
    contributes ``x_u / sqrt(d_u)`` for its own nodes; the owner of ``v``
    applies ``1 / sqrt(d_v)`` after the secure sum.  Sessions use ``scale``
    fixed point (default 2^40) so the reconstruction is exact to ~1e-12.
    """
    tr = _transcript(transcript)
    subs = [c.sub if isinstance(c, FedClient) else c for c in clients]
    feats = [s.features for s in subs] if features is None else list(features)
    d = feats[0].shape[1]
    out = [np.zeros((s.n, d)) for s in subs]
    if len(subs) <= 1:
        return out
    ids = tuple(s.client_id for s in subs)
    for i, target in enumerate(subs):
        if len(target.cross_edges) == 0:
            continue
        boundary = np.unique(target.cross_edges[:, 0])
        row_of = {int(v): r for r, v in enumerate(boundary)}
        session = SecureSumSession(ids, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), scale=scale)
        masked = {}
        for j, src in enumerate(subs):
            contrib = np.zeros((len(boundary), d))
            if j != i and len(src.cross_edges):
                for u, v in src.cross_edges:
                    r = row_of.get(int(v))
                    if r is None:
                        continue
                    pos = src.local_index(u)[0]
                    contrib[r] += feats[j][pos] / np.sqrt(src.degree[pos])
            masked[src.client_id] = session.masked(src.client_id, contrib)
            tr.send("MaskedVectors", src.client_id, 0, masked[src.client_id])
        total = session.combine(masked).reshape(len(boundary), d)
        local = target.local_index(boundary)
        out[i][local] = total / np.sqrt(target.degree[local])[:, None]
    return out


# --- FedAvg self-training --------------------------------------------------


def _local_accuracy(params, client: FedClient, mask) -> tuple[int, int]:
    if not mask.any():
        return 0, 0
    logits = models.predict(params, client.sub.norm_adj(), client.sub.features, client.cross_sums)
    pred = np.argmax(logits, axis=1)
    return int((pred[mask] == client.sub.labels[mask]).sum()), int(mask.sum())


def fedavg_self_train(
    clients: list[FedClient],
    epochs: int,
    lr: float,
    seed: int,
    hidden: int = 64,
    transcript: Transcript | None = None,
) -> tuple[ModelParams, list[tuple[np.ndarray, np.ndarray]]]:
    """Train a shared GCN by FedAvg, keep the best on validation, pseudo-label.

    Each round every client takes one full-batch SGD step from the broadcast
    weights on its training mask (raw features plus cross sums); the server
    averages the results weighted by training-node counts.  Returns the
    selected model and, per client, ``(labels, label_mask)`` where training
    nodes keep their true labels and every other local node carries the
    model's prediction.
    """
    tr = _transcript(transcript)
    d = clients[0].sub.features.shape[1]
    num_classes = clients[0].sub.num_classes
    phi = models.init_params("gcn2", d, num_classes, hidden=hidden, seed=seed)
    n_train = np.array([int(c.sub.train_mask.sum()) for c in clients])
    if n_train.sum() == 0:
        raise ProtocolError("no training nodes on any client")
    has_val = any(c.sub.val_mask.any() for c in clients)
    if not has_val:
        logger.warning("no validation nodes on any client; keeping final-round self-training model")
    adjs = [c.sub.norm_adj() for c in clients]

    def val_acc(p):
        hits = tot = 0
        for c in clients:
            h, t = _local_accuracy(p, c, c.sub.val_mask)
            hits, tot = hits + h, tot + t
        return hits / tot

    best, best_acc = None, -1.0
    for rnd in range(epochs):
        tr.send("ModelParams", SERVER, rnd, phi)
        if has_val:
            acc = val_acc(phi)
            if acc > best_acc:
                best, best_acc = phi.copy(), acc
        updates = []
        for c, adj, k in zip(clients, adjs, n_train):
            if k == 0:
                updates.append(None)
                continue
            _, grads = models.loss_and_grads(phi, adj, c.sub.features, c.sub.labels, c.sub.train_mask, c.cross_sums)
            local = phi.with_weights([w - lr * g for w, g in zip(phi.weights, grads)])
            tr.send("ModelParams", c.client_id, rnd, local)
            updates.append(local)
        new = [np.zeros_like(w) for w in phi.weights]
        for upd, k in zip(updates, n_train):
            if upd is None:
                continue
            wk = k / n_train.sum()
            new = [a + wk * w for a, w in zip(new, upd.weights)]
        phi = phi.with_weights(new)
    if has_val:
        if val_acc(phi) > best_acc:
            best = phi
    else:
        best = phi

    labeled = []
    for c in clients:
        pred = np.argmax(models.predict(best, c.sub.norm_adj(), c.sub.features, c.cross_sums), axis=1)
        labels = np.where(c.sub.train_mask, c.sub.labels, pred)
        mask = np.ones(c.sub.n, dtype=bool)
        tr.send("PseudoLabelAck", c.client_id, epochs, int((~c.sub.train_mask).sum()))
        labeled.append((labels, mask))
    return best, labeled


# --- LDP baseline ----------------------------------------------------------


def ldp_noise(grads: dict, epsilon: float, sensitivity: float = 1.0, seed: int = 0) -> dict:
    """Clip each class's gradient list to L1 ``sensitivity``, then add Laplace noise."""
    if not epsilon > 0:
        raise ParameterError("epsilon must be > 0")
    if np.isinf(epsilon):
        return {c: [g.copy() for g in gs] for c, gs in grads.items()}
    rng = np.random.default_rng(seed)
    scale = sensitivity / epsilon
    out = {}
    for c in sorted(grads):
        gs = grads[c]
        l1 = sum(float(np.abs(g).sum()) for g in gs)
        factor = min(1.0, sensitivity / l1) if l1 > 0 else 1.0
        out[c] = [g * factor + rng.laplace(0.0, scale, size=g.shape) for g in gs]
    return out
