"""Local information-bottleneck feature transform.

Each client learns a stochastic encoder ``x -> Z`` whose outputs stay
predictive under a frozen shared GCN head while their Gaussian posterior is
pulled towards ``N(0, I)``.  Only the features change; the local structure is
left untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import models
from . import tensor as T
from .fedcore import FedClient
from .models import Adam, ModelParams
from .tensor import ContractError, Tensor

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6


@dataclass
class IBEncoderParams:
    """Encoder weights ``w1`` (d x d), ``w2`` (d x 2d) and the frozen head."""

    w1: np.ndarray
    w2: np.ndarray
    head: ModelParams

    def __post_init__(self):
        d = self.w1.shape[0]
        if self.w1.shape != (d, d) or self.w2.shape != (d, 2 * d):
            raise ContractError(f"encoder shapes {self.w1.shape}, {self.w2.shape} do not fit d={d}")

    @property
    def dim(self) -> int:
        return self.w1.shape[0]


@dataclass
class LatentStats:
    mu: Tensor
    sigma: Tensor


def init_encoder(d: int, head: ModelParams, seed) -> IBEncoderParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return IBEncoderParams(models.glorot(rng, d, d), models.glorot(rng, d, 2 * d), head)


def _hidden(w1, w2, x) -> Tensor:
    return T.matmul(T.relu(T.matmul(x, w1)), w2)


def encode(params: IBEncoderParams, x, adj, cross_sums=None, seed=0, weights=None):
    """Sample ``Z = mu + sigma * eps`` from the aggregated encoder output.

    ``weights`` optionally replaces ``(w1, w2)`` with tape leaves.  The
    cross-client term is the x-space neighbour sum passed through the current
    encoder (exact when a node has a single cross neighbour, since the encoder
    is positively homogeneous).

    Returns
    -------
    (Z, LatentStats)
    """
    w1, w2 = (params.w1, params.w2) if weights is None else weights
    d = params.dim
    z_hat = T.matmul(adj, _hidden(w1, w2, x))
    if cross_sums is not None:
        z_hat = T.add(z_hat, _hidden(w1, w2, cross_sums))
    mu = T.slice_cols(z_hat, 0, d)
    sigma = T.add(T.softplus(T.slice_cols(z_hat, d, 2 * d)), SIGMA_FLOOR)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(mu.shape)
    z = T.add(mu, T.mul(sigma, eps))
    return z, LatentStats(mu, sigma)


def kl_std_normal(stats: LatentStats) -> Tensor:
    """Mean over nodes of ``KL(N(mu, sigma^2) || N(0, 1))``."""
    mu, sigma = stats.mu, stats.sigma
    per_entry = T.sub(T.add(T.square(mu), T.square(sigma)), T.add(T.scale(T.log(sigma), 2.0), 1.0))
    n = mu.shape[0]
    return T.scale(T.tsum(per_entry), 0.5 / n)


def ib_loss(params: IBEncoderParams, x, adj, cross_sums, labels, loss_mask, gamma: float, seed=0, weights=None) -> Tensor:
    """Head cross-entropy on ``Z`` plus ``gamma`` times the KL term."""
    if gamma < 0:
        raise ContractError("gamma must be >= 0")
    z, stats = encode(params, x, adj, cross_sums, seed, weights)
    ce = models.masked_ce(models.forward(params.head, adj, z), labels, loss_mask)
    if gamma == 0:
        return ce
    return T.add(ce, T.scale(kl_std_normal(stats), gamma))


@dataclass
class TransformResult:
    z: np.ndarray
    encoder: IBEncoderParams
    losses: list
    kl: list
    best_epoch: int
    head_checksums: list


def _val_accuracy(head, adj, z, labels, mask) -> float:
    pred = np.argmax(models.predict(head, adj, z), axis=1)
    return float((pred[mask] == labels[mask]).mean())


def transform_graph(
    client: FedClient,
    head: ModelParams,
    labels,
    label_mask,
    gamma: float = 0.1,
    epochs: int = 100,
    lr: float = 0.01,
    seed: int = 0,
    use_cross: bool = True,
) -> TransformResult:
    """Train the client's encoder against the frozen head, keep the best ``Z``.

    The loss covers every labeled node (true training labels plus any pseudo
    labels).  After each step ``Z`` is resampled and scored on the client's
    validation nodes against their true labels; the best sample is returned.
    Without validation nodes the last sample is returned.
    """
    sub = client.sub
    x = sub.features
    adj = sub.norm_adj()
    cross = client.cross_sums if use_cross else None
    labels = np.asarray(labels)
    label_mask = np.asarray(label_mask, dtype=bool)
    if not label_mask.any():
        raise ContractError(f"client {sub.client_id} has no labeled nodes to transform with")
    base = np.random.SeedSequence([seed, 0x1B, sub.client_id])
    init_seed, step_seed, sample_seed = base.spawn(3)
    enc = init_encoder(sub.features.shape[1], head, np.random.default_rng(init_seed))
    step_rng = np.random.default_rng(step_seed)
    sample_rng = np.random.default_rng(sample_seed)
    opt = Adam([enc.w1.shape, enc.w2.shape], lr=lr)
    has_val = bool(sub.val_mask.any())
    if not has_val:
        logger.warning("client %d has no validation nodes; keeping the final Z", sub.client_id)

    def sample(e):
        z, _ = encode(e, x, adj, cross, sample_rng)
        return z.value

    best_z = sample(enc)
    best_acc = _val_accuracy(head, adj, best_z, sub.labels, sub.val_mask) if has_val else -1.0
    best_epoch = 0
    losses, kls, sums = [], [], [head.checksum()]
    for epoch in range(1, epochs + 1):
        with T.Tape() as tape:
            ws = [tape.watch(enc.w1), tape.watch(enc.w2)]
            z, stats = encode(enc, x, adj, cross, step_rng, weights=ws)
            ce = models.masked_ce(models.forward(head, adj, z), labels, label_mask)
            kl = kl_std_normal(stats)
            loss = T.add(ce, T.scale(kl, gamma)) if gamma else ce
            grads = tape.gradient(loss, ws)
        w1, w2 = opt.step([enc.w1, enc.w2], grads)
        enc = IBEncoderParams(w1, w2, head)
        losses.append(loss.item())
        kls.append(kl.item())
        z_new = sample(enc)
        sums.append(head.checksum())
        if has_val:
            acc = _val_accuracy(head, adj, z_new, sub.labels, sub.val_mask)
            if acc > best_acc:
                best_z, best_acc, best_epoch = z_new, acc, epoch
        else:
            best_z, best_epoch = z_new, epoch
    return TransformResult(best_z, enc, losses, kls, best_epoch, sums)
