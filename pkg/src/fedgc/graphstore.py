"""Graph data model, bundle I/O, partitioning and synthetic graphs.

A bundle directory holds four tab-separated files (``#`` starts a comment)::

    edges.tsv     u <TAB> v              (0-based, undirected)
    features.tsv  node <TAB> x_1 ... x_d
    labels.tsv    node <TAB> class
    splits.tsv    node <TAB> train|val|test

plus an optional ``adjacency_weights.tsv`` (``i j weight``) for weighted
graphs such as a materialised condensed graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class LoadError(ValueError):
    def __init__(self, path, line: int | None, msg: str):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {msg}")
        self.path = Path(path)
        self.line = line


class ParameterError(ValueError):
    pass


def canonical_edges(edges, n: int | None = None) -> np.ndarray:
    """Undirected edge array with ``u < v``, no self loops, sorted and unique."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if e.size:
        e = np.unique(e, axis=0)
    if n is not None and e.size and (e.min() < 0 or e.max() >= n):
        raise ValueError(f"edge endpoint outside [0, {n})")
    return e.reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class GraphBundle:
    """Node-attributed undirected graph with train/val/test masks."""

    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int
    edge_weights: np.ndarray | None = None
    self_weights: np.ndarray | None = None

    def __post_init__(self):
        n = self.features.shape[0]
        for arr in (self.features, self.labels, self.edges, self.train_mask, self.val_mask, self.test_mask):
            arr.flags.writeable = False
        if self.labels.shape != (n,):
            raise ValueError("labels must have one entry per node")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise ValueError("edge endpoint out of range")
        if np.any(self.edges[:, 0] == self.edges[:, 1]):
            raise ValueError("self loops are not stored in the edge list")
        m = self.train_mask.astype(int) + self.val_mask.astype(int) + self.test_mask.astype(int)
        if np.any(m > 1):
            raise ValueError("train/val/test masks overlap")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def norm_adj(self) -> np.ndarray:
        return normalize_adj(
            self.edges, self.n, weights=self.edge_weights, self_weights=self.self_weights
        )

    def class_counts(self, mask=None) -> np.ndarray:
        mask = self.train_mask if mask is None else mask
        return np.bincount(self.labels[mask], minlength=self.num_classes)


def normalize_adj(
    edges,
    n: int,
    extra_self_weight: float = 1.0,
    weights=None,
    self_weights=None,
    degrees=None,
) -> np.ndarray:
    """Dense ``D^-1/2 (A + w I) D^-1/2`` for an undirected edge list.

    ``degrees`` overrides the row sums used for scaling; clients pass their
    nodes' full degrees (including cross-client edges) here so the local block
    agrees with the global operator.
    """
    if n < 1:
        raise ParameterError("normalize_adj needs n >= 1")
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    a = np.zeros((n, n))
    w = np.ones(len(e)) if weights is None else np.asarray(weights, dtype=np.float64)
    np.add.at(a, (e[:, 0], e[:, 1]), w)
    np.add.at(a, (e[:, 1], e[:, 0]), w)
    diag = np.full(n, float(extra_self_weight))
    if self_weights is not None:
        diag = diag + np.asarray(self_weights, dtype=np.float64)
    a[np.diag_indices(n)] += diag
    deg = a.sum(axis=1) if degrees is None else np.asarray(degrees, dtype=np.float64)
    s = 1.0 / np.sqrt(deg)
    return a * s[:, None] * s[None, :]


# --- bundle I/O ------------------------------------------------------------


def _rows(path: Path):
    if not path.exists():
        raise LoadError(path, None, "missing file")
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def _int(path, lineno, tok) -> int:
    try:
        return int(tok)
    except ValueError:
        raise LoadError(path, lineno, f"expected an integer, got {tok!r}") from None


def load_bundle(path) -> GraphBundle:
    """Read and validate a bundle directory."""
    root = Path(path)
    fpath = root / "features.tsv"
    feats: dict[int, list[float]] = {}
    width = None
    for lineno, tok in _rows(fpath):
        node = _int(fpath, lineno, tok[0])
        try:
            vals = [float(t) for t in tok[1:]]
        except ValueError:
            raise LoadError(fpath, lineno, "non-numeric feature value") from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise LoadError(fpath, lineno, f"ragged row: {len(vals)} features, expected {width}")
        if node in feats:
            raise LoadError(fpath, lineno, f"duplicate node {node}")
        feats[node] = vals
    n = len(feats)
    if n == 0:
        raise LoadError(fpath, None, "no feature rows")
    if set(feats) != set(range(n)):
        raise LoadError(fpath, None, "node ids must be exactly 0..n-1")
    features = np.array([feats[i] for i in range(n)], dtype=np.float64).reshape(n, width)

    lpath = root / "labels.tsv"
    labels = np.full(n, -1, dtype=np.int64)
    for lineno, tok in _rows(lpath):
        if len(tok) != 2:
            raise LoadError(lpath, lineno, "expected 'node<TAB>class'")
        node, c = _int(lpath, lineno, tok[0]), _int(lpath, lineno, tok[1])
        if not 0 <= node < n:
            raise LoadError(lpath, lineno, f"node {node} out of range")
        if c < 0:
            raise LoadError(lpath, lineno, f"label {c} out of range")
        labels[node] = c
    if np.any(labels < 0):
        raise LoadError(lpath, None, f"{int((labels < 0).sum())} nodes without a label")
    num_classes = int(labels.max()) + 1

    epath = root / "edges.tsv"
    edges = []
    for lineno, tok in _rows(epath):
        if len(tok) != 2:
            raise LoadError(epath, lineno, "expected 'u<TAB>v'")
        u, v = _int(epath, lineno, tok[0]), _int(epath, lineno, tok[1])
        if not (0 <= u < n and 0 <= v < n):
            raise LoadError(epath, lineno, f"endpoint out of range for n={n}")
        edges.append((u, v))
    edges = canonical_edges(edges)

    spath = root / "splits.tsv"
    masks = {s: np.zeros(n, dtype=bool) for s in SPLITS}
    for lineno, tok in _rows(spath):
        if len(tok) != 2 or tok[1] not in masks:
            raise LoadError(spath, lineno, "expected 'node<TAB>train|val|test'")
        node = _int(spath, lineno, tok[0])
        if not 0 <= node < n:
            raise LoadError(spath, lineno, f"node {node} out of range")
        if any(masks[s][node] for s in SPLITS):
            raise LoadError(spath, lineno, f"node {node} appears in more than one split")
        masks[tok[1]][node] = True

    edge_weights = self_weights = None
    wpath = root / "adjacency_weights.tsv"
    if wpath.exists():
        lookup = {}
        self_weights = np.zeros(n)
        for lineno, tok in _rows(wpath):
            if len(tok) != 3:
                raise LoadError(wpath, lineno, "expected 'i<TAB>j<TAB>weight'")
            i, j = _int(wpath, lineno, tok[0]), _int(wpath, lineno, tok[1])
            try:
                w = float(tok[2])
            except ValueError:
                raise LoadError(wpath, lineno, "non-numeric weight") from None
            if not (0 <= i < n and 0 <= j < n):
                raise LoadError(wpath, lineno, "endpoint out of range")
            if i == j:
                self_weights[i] = w
            else:
                lookup[(min(i, j), max(i, j))] = w
        edge_weights = np.array([lookup.get((int(u), int(v)), 1.0) for u, v in edges])

    return GraphBundle(
        features=features,
        labels=labels,
        edges=edges,
        train_mask=masks["train"],
        val_mask=masks["val"],
        test_mask=masks["test"],
        num_classes=num_classes,
        edge_weights=edge_weights,
        self_weights=self_weights,
    )


def save_bundle(g: GraphBundle, path) -> Path:
    """Write ``g`` in bundle format; weighted graphs also get adjacency_weights.tsv."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for u, v in g.edges:
            fh.write(f"{u}\t{v}\n")
    with open(root / "features.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i, row in enumerate(g.features):
            fh.write(str(i) + "\t" + "\t".join(repr(float(x)) for x in row) + "\n")
    with open(root / "labels.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i, c in enumerate(g.labels):
            fh.write(f"{i}\t{c}\n")
    with open(root / "splits.tsv", "w", encoding="utf-8", newline="\n") as fh:
        for i in range(g.n):
            for name, mask in zip(SPLITS, (g.train_mask, g.val_mask, g.test_mask)):
                if mask[i]:
                    fh.write(f"{i}\t{name}\n")
    if g.edge_weights is not None or g.self_weights is not None:
        ew = np.ones(len(g.edges)) if g.edge_weights is None else g.edge_weights
        with open(root / "adjacency_weights.tsv", "w", encoding="utf-8", newline="\n") as fh:
            if g.self_weights is not None:
                for i, w in enumerate(g.self_weights):
                    fh.write(f"{i}\t{i}\t{float(w)!r}\n")
            for (u, v), w in zip(g.edges, ew):
                fh.write(f"{u}\t{v}\t{float(w)!r}\n")
    return root


# --- federation views ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClientSubgraph:
    """One client's share of the global graph.

    ``edges`` are internal edges in global ids.  ``cross_edges`` rows are
    ``(v, u)`` with ``v`` local and ``u`` held by another client; only the
    endpoint ids are known.  ``degree`` is the self-loop-augmented degree of
    each local node in the *global* graph, which the client can count from
    its internal plus cross edges.
    """

    client_id: int
    nodes: np.ndarray
    edges: np.ndarray
    cross_edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int
    degree: np.ndarray
    _pos: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.nodes)

    def local_index(self, global_ids) -> np.ndarray:
        return np.array([self._pos[int(g)] for g in np.atleast_1d(global_ids)], dtype=np.int64)

    def local_edges(self) -> np.ndarray:
        if len(self.edges) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        return self.local_index(self.edges.reshape(-1)).reshape(-1, 2)

    def norm_adj(self) -> np.ndarray:
        """Local block of the global normalized adjacency."""
        if self.n == 0:
            return np.zeros((0, 0))
        return normalize_adj(self.local_edges(), self.n, degrees=self.degree)


def build_clients(g: GraphBundle, owner: np.ndarray) -> list[ClientSubgraph]:
    """Client views from a node -> client assignment vector."""
    owner = np.asarray(owner, dtype=np.int64)
    m = int(owner.max()) + 1 if owner.size else 0
    deg = np.ones(g.n)
    if len(g.edges):
        np.add.at(deg, g.edges[:, 0], 1.0)
        np.add.at(deg, g.edges[:, 1], 1.0)
    eu, ev = (g.edges[:, 0], g.edges[:, 1]) if len(g.edges) else (np.zeros(0, int), np.zeros(0, int))
    clients = []
    for j in range(m):
        nodes = np.flatnonzero(owner == j)
        inside_u, inside_v = owner[eu] == j, owner[ev] == j
        internal = g.edges[inside_u & inside_v]
        c1 = np.stack([eu[inside_u & ~inside_v], ev[inside_u & ~inside_v]], axis=1)
        c2 = np.stack([ev[inside_v & ~inside_u], eu[inside_v & ~inside_u]], axis=1)
        cross = np.concatenate([c1, c2]).reshape(-1, 2)
        if len(cross):
            cross = cross[np.lexsort((cross[:, 1], cross[:, 0]))]
        clients.append(
            ClientSubgraph(
                client_id=j,
                nodes=nodes,
                edges=internal.reshape(-1, 2),
                cross_edges=cross.astype(np.int64),
                features=g.features[nodes],
                labels=g.labels[nodes],
                train_mask=g.train_mask[nodes],
                val_mask=g.val_mask[nodes],
                test_mask=g.test_mask[nodes],
                num_classes=g.num_classes,
                degree=deg[nodes],
                _pos={int(v): i for i, v in enumerate(nodes)},
            )
        )
    return clients


def dirichlet_owner(labels, num_classes: int, m: int, beta: float, seed: int) -> np.ndarray:
    """Node -> client assignment with per-class Dirichlet(beta) proportions."""
    if m < 1:
        raise ParameterError("client count must be >= 1")
    if beta <= 0:
        raise ParameterError("beta must be > 0")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    owner = np.empty(len(labels), dtype=np.int64)
    for c in range(num_classes):
        ids = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(m, float(beta)))
        cuts = (np.cumsum(props)[:-1] * len(ids)).astype(np.int64)
        for j, part in enumerate(np.split(ids, cuts)):
            owner[part] = j
    return owner


def dirichlet_partition(g: GraphBundle, m: int, beta: float, seed: int) -> list[ClientSubgraph]:
    """Label-skew partition of ``g`` into ``m`` disjoint client subgraphs."""
    return build_clients(g, dirichlet_owner(g.labels, g.num_classes, m, beta, seed))


@dataclass(frozen=True)
class SampledSubgraph:
    """Class-``c`` sample of a client: local positions, induced operator, loss mask."""

    index: np.ndarray
    adj: np.ndarray
    loss_mask: np.ndarray
    labels: np.ndarray


def class_subgraph(
    cs: ClientSubgraph, c: int, features=None, labels=None, label_mask=None
) -> SampledSubgraph | None:
    """Class-``c`` labeled nodes plus their 1-hop in-client neighbours.

    ``labels``/``label_mask`` default to the client's true training labels;
    pseudo-labeled sets can be passed instead.  Returns ``None`` when the
    client has no labeled node of class ``c``.  ``features`` is accepted for
    symmetry with callers that slice rows themselves and is not used.
    """
    labels = cs.labels if labels is None else np.asarray(labels)
    label_mask = cs.train_mask if label_mask is None else np.asarray(label_mask, dtype=bool)
    seeds = label_mask & (labels == c)
    if not seeds.any():
        return None
    keep = seeds.copy()
    le = cs.local_edges()
    if len(le):
        keep[le[seeds[le[:, 0]], 1]] = True
        keep[le[seeds[le[:, 1]], 0]] = True
    index = np.flatnonzero(keep)
    adj = cs.norm_adj()[np.ix_(index, index)]
    return SampledSubgraph(index=index, adj=adj, loss_mask=seeds[index], labels=labels[index])


# --- synthetic graphs ------------------------------------------------------


def stratified_masks(labels, fractions=(0.1, 0.2, 0.7), rng=None):
    rng = np.random.default_rng() if rng is None else rng
    labels = np.asarray(labels)
    n = len(labels)
    masks = [np.zeros(n, dtype=bool) for _ in fractions]
    for c in np.unique(labels):
        ids = rng.permutation(np.flatnonzero(labels == c))
        k_train = int(round(fractions[0] * len(ids)))
        k_val = int(round(fractions[1] * len(ids)))
        masks[0][ids[:k_train]] = True
        masks[1][ids[k_train:k_train + k_val]] = True
        masks[2][ids[k_train + k_val:]] = True
    return masks


def sbm_generate(
    blocks: int,
    per_block: int,
    p_in: float,
    p_out: float,
    feat_dim: int,
    feat_shift: float,
    seed: int,
) -> GraphBundle:
    """Stochastic block model with Gaussian class-mean features.

    Class ``c`` nodes get mean ``feat_shift * e_c`` (orthogonal basis
    directions) plus unit Gaussian noise; masks are a stratified 10/20/70
    train/val/test split.
    """
    if per_block < 2:
        raise ParameterError("per_block must be >= 2")
    if not 0 <= p_out < p_in <= 1:
        raise ParameterError("need 0 <= p_out < p_in <= 1")
    if feat_shift < 0:
        raise ParameterError("feat_shift must be >= 0")
    if feat_dim < blocks and feat_shift > 0:
        raise ParameterError("feat_dim must be >= blocks for orthogonal class means")
    rng = np.random.default_rng(seed)
    n = blocks * per_block
    labels = np.repeat(np.arange(blocks), per_block)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, p_in, p_out)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1).astype(np.int64)
    means = np.zeros((blocks, feat_dim))
    if feat_shift > 0:
        means[np.arange(blocks), np.arange(blocks)] = feat_shift
    features = means[labels] + rng.standard_normal((n, feat_dim))
    train, val, test = stratified_masks(labels, rng=rng)
    return GraphBundle(
        features=features,
        labels=labels,
        edges=edges,
        train_mask=train,
        val_mask=val,
        test_mask=test,
        num_classes=blocks,
    )
