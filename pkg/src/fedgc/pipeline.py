"""End-to-end run: exchange, self-training, IB transform, condensation,
evaluation and membership inference, plus report files."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import condense, fedcore, graphstore, ibx, miaeval, models
from .condense import MatchConfig
from .fedcore import FedClient, Transcript
from .graphstore import GraphBundle

logger = logging.getLogger(__name__)

DEFENSES = ("none", "ib", "pl", "ldp")
ABLATIONS = ("com", "ft", "ib", "st")
ARCH_NAMES = {"gcn": "gcn2", "sgc": "sgc", "mlp": "mlp2"}
STAGES = ("exchange", "self_train", "transform", "condense", "evaluate", "attack")

METRIC_FIELDS = (
    "seed", "arch", "ablation", "defense", "gamma", "ratio", "n_cond",
    "acc", "acc_ft", "acc_ft_client_mean", "acc_ft_client_std", "mia_auc",
)
CURVE_FIELDS = ("seed", "round", "matching_loss", "mia_auc")
LOSS_FIELDS = ("seed", "round", "matching_loss")


class ConfigError(ValueError):
    pass


class PipelineAbort(RuntimeError):
    def __init__(self, stage: str, round_: int | None, cause: BaseException):
        where = f" round {round_}" if round_ is not None else ""
        super().__init__(f"stage {stage}{where} failed: {cause}")
        self.stage = stage
        self.round = round_
        self.cause = cause


def _default_sbm() -> dict:
    return {
        "blocks": 4, "per_block": 100, "p_in": 0.1, "p_out": 0.01,
        "feat_dim": 64, "feat_shift": 1.0, "seed": None,
    }


@dataclass
class RunConfig:
    """Resolved run configuration; every random draw derives from ``seeds``."""

    bundle: str | None = None
    sbm: dict = field(default_factory=_default_sbm)
    clients: int = 4
    beta: float = 1.0
    ratio: float = 0.04
    gamma: float = 0.1
    distance: str = "mse"
    defense: str = "ib"
    ablate: list = field(default_factory=list)
    architectures: list = field(default_factory=lambda: ["gcn", "sgc", "mlp"])
    seeds: list = field(default_factory=lambda: [0])
    hidden: int = 64
    # self-training
    self_train_epochs: int = 100
    self_train_lr: float = 0.5
    # information bottleneck
    ib_epochs: int = 100
    ib_lr: float = 0.01
    # condensation
    condense_epochs: int = 400
    refresh: int = 10
    tau_x: int = 10
    tau_phi: int = 1
    lr_x: float = 0.05
    lr_phi: float = 0.01
    lr_theta: float = 0.1
    theta_steps: int = 5
    phi_hidden: int = 32
    threshold: float = 0.5
    select_every: int = 50
    centralized: bool = False
    ldp_epsilon: float = 1.0
    # evaluation
    train_epochs: int = 200
    train_lr: float = 0.01
    finetune_epochs: int = 50
    finetune_lr: float = 0.01
    # attack
    target_epochs: int = 300
    shadow_epochs: int = 300
    attack_epochs: int = 300
    shadow_size: int | None = None
    rewire: float = 0.5
    mia_every: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.defense not in DEFENSES:
            raise ConfigError(f"defense must be one of {DEFENSES}, got {self.defense!r}")
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation flags {bad}; allowed {ABLATIONS}")
        bad = [a for a in self.architectures if a not in ARCH_NAMES]
        if bad or not self.architectures:
            raise ConfigError(f"architectures must be a non-empty subset of {tuple(ARCH_NAMES)}")
        if self.distance not in ("mse", "cosine"):
            raise ConfigError(f"unknown distance {self.distance!r}")
        if self.clients < 1:
            raise ConfigError("clients must be >= 1")
        if not 0 < self.ratio <= 1:
            raise ConfigError("ratio must lie in (0, 1]")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        if self.select_every < 0:
            raise ConfigError("select_every must be >= 0")
        if not 0 <= self.threshold < 1:
            raise ConfigError("threshold must lie in [0, 1)")
        if self.defense == "ldp" and not self.ldp_epsilon > 0:
            raise ConfigError("ldp_epsilon must be > 0")
        required = {"condense_epochs": self.condense_epochs, "train_epochs": self.train_epochs}
        if self.uses_self_train:
            required["self_train_epochs"] = self.self_train_epochs
        if self.uses_ib:
            required["ib_epochs"] = self.ib_epochs
        if "ft" not in self.ablate:
            required["finetune_epochs"] = self.finetune_epochs
        for k, v in required.items():
            if v < 1:
                raise ConfigError(f"{k} must be >= 1 for the enabled stages")
        if self.bundle is None:
            unknown = set(self.sbm) - set(_default_sbm())
            if unknown:
                raise ConfigError(f"unknown sbm keys {sorted(unknown)}")

    @property
    def uses_ib(self) -> bool:
        return self.defense == "ib" and "ib" not in self.ablate

    @property
    def uses_self_train(self) -> bool:
        return self.defense in ("ib", "pl") and "st" not in self.ablate

    @property
    def uses_exchange(self) -> bool:
        return "com" not in self.ablate

    @property
    def ablation_tag(self) -> str:
        return ",".join(f"-{a}" for a in sorted(self.ablate)) or "full"

    def match_config(self, seed: int) -> MatchConfig:
        return MatchConfig(
            distance=self.distance, epochs=self.condense_epochs, refresh=self.refresh,
            tau_x=self.tau_x, tau_phi=self.tau_phi, lr_x=self.lr_x, lr_phi=self.lr_phi,
            lr_theta=self.lr_theta, theta_steps=self.theta_steps, ratio=self.ratio,
            hidden=self.hidden, phi_hidden=self.phi_hidden, seed=seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        data = dict(data)
        if "sbm" in data:
            data["sbm"] = {**_default_sbm(), **data["sbm"]}
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)


@dataclass
class SeedResult:
    seed: int
    rows: list
    losses: list
    curve: list
    ib_losses: dict
    condensed: GraphBundle
    transcript: Transcript
    feature_checksums: dict
    wall: dict
    mia: dict
    selected_round: int = 0


@dataclass
class RunReport:
    config: RunConfig
    seeds: list = field(default_factory=list)
    error: str | None = None

    @property
    def rows(self) -> list:
        return [r for s in self.seeds for r in s.rows]


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else f"{x:.6f}"


def _stream(seed: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, *tags])


def _rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(_stream(seed, *tags))


def _int_seed(seed: int, *tags) -> int:
    return int(_stream(seed, *tags).generate_state(1)[0])


def load_graph(cfg: RunConfig, seed: int) -> GraphBundle:
    if cfg.bundle is not None:
        return graphstore.load_bundle(cfg.bundle)
    p = dict(cfg.sbm)
    sbm_seed = p.pop("seed")
    return graphstore.sbm_generate(**p, seed=seed if sbm_seed is None else sbm_seed)


def _checksum(a: np.ndarray) -> str:
    import hashlib

    return hashlib.blake2b(np.ascontiguousarray(a).tobytes(), digest_size=8).hexdigest()


def _client_view(c: FedClient, cfg: RunConfig):
    """Adjacency, features and cross term a client evaluates on."""
    return c.sub.norm_adj(), c.features, c.cross


def finetune(cfg: RunConfig, model: models.ModelParams, c: FedClient) -> models.ModelParams:
    """Fine-tune on the client's labeled nodes, keeping the best local-validation checkpoint.

    The untuned model is one of the candidates, so fine-tuning never lowers
    local validation accuracy.  Without validation nodes the last step wins.
    """
    adj, x, cross = _client_view(c, cfg)
    val = c.sub.val_mask
    select = None
    if val.any():
        def select(p):
            pred = np.argmax(models.predict(p, adj, x, cross), axis=1)
            return float((pred[val] == c.sub.labels[val]).mean())
    tuned, _ = models.train(
        model, adj, x, c.sub.labels, c.sub.train_mask, cfg.finetune_epochs,
        lr=cfg.finetune_lr, cross_sums=cross, select=select,
    )
    return tuned


def evaluate_condensed(cfg: RunConfig, condensed: GraphBundle, clients: list[FedClient], seed: int) -> list[dict]:
    """Train each architecture on the condensed graph, optionally fine-tune per client."""
    rows = []
    adj_c = condensed.norm_adj()
    mask_c = np.ones(condensed.n, dtype=bool)
    d, k = condensed.d, condensed.num_classes
    for name in cfg.architectures:
        arch = ARCH_NAMES[name]
        init = models.init_params(arch, d, k, hidden=cfg.hidden, seed=_rng(seed, 0xE7A, list(ARCH_NAMES).index(name)))
        model, _ = models.train(init, adj_c, condensed.features, condensed.labels, mask_c, cfg.train_epochs, lr=cfg.train_lr)
        hits = hits_ft = total = 0
        per_client = []
        for c in clients:
            test = c.sub.test_mask
            if not test.any():
                continue
            adj, x, cross = _client_view(c, cfg)
            pred = np.argmax(models.predict(model, adj, x, cross), axis=1)
            hits += int((pred[test] == c.sub.labels[test]).sum())
            tuned = model
            if "ft" not in cfg.ablate and c.sub.train_mask.any():
                tuned = finetune(cfg, model, c)
            pred = np.argmax(models.predict(tuned, adj, x, cross), axis=1)
            ok = int((pred[test] == c.sub.labels[test]).sum())
            hits_ft += ok
            total += int(test.sum())
            per_client.append(ok / int(test.sum()))
        rows.append({
            "arch": name,
            "acc": hits / total if total else float("nan"),
            "acc_ft": hits_ft / total if total else float("nan"),
            "acc_ft_client_mean": float(np.mean(per_client)) if per_client else float("nan"),
            "acc_ft_client_std": float(np.std(per_client)) if per_client else float("nan"),
        })
    return rows


def _gcn_on(cfg: RunConfig, condensed: GraphBundle, seed: int) -> models.ModelParams:
    init = models.init_params("gcn2", condensed.d, condensed.num_classes, hidden=cfg.hidden, seed=_rng(seed, 0xE7A, 0))
    mask = np.ones(condensed.n, dtype=bool)
    model, _ = models.train(init, condensed.norm_adj(), condensed.features, condensed.labels, mask, cfg.train_epochs, lr=cfg.train_lr)
    return model


def client_validation(model: models.ModelParams, clients: list[FedClient], cfg: RunConfig, transcript: Transcript, rnd: int) -> float:
    """Pooled local validation accuracy; each client reports only (hits, total)."""
    hits = total = 0
    for c in clients:
        val = c.sub.val_mask
        adj, x, cross = _client_view(c, cfg)
        pred = np.argmax(models.predict(model, adj, x, cross), axis=1)
        report = np.array([int((pred[val] == c.sub.labels[val]).sum()), int(val.sum())])
        transcript.send("ValAccuracy", c.client_id, rnd, report)
        hits += report[0]
        total += report[1]
    return hits / total if total else float("nan")


def train_target(cfg: RunConfig, condensed: GraphBundle, seed: int) -> models.ModelParams:
    """GCN trained to convergence on the condensed graph (deliberately overfit)."""
    init = models.init_params("gcn2", condensed.d, condensed.num_classes, hidden=cfg.hidden, seed=_rng(seed, 0x7A6))
    mask = np.ones(condensed.n, dtype=bool)
    model, _ = models.train(init, condensed.norm_adj(), condensed.features, condensed.labels, mask, cfg.target_epochs, lr=cfg.train_lr)
    return model


class _Attacker:
    """Shadow-trained attack plus the fixed probe sets for one seed."""

    def __init__(self, cfg: RunConfig, g: GraphBundle, clients: list[FedClient], seed: int):
        pool = int((~(g.train_mask | g.test_mask)).sum())
        size = cfg.shadow_size if cfg.shadow_size is not None else pool // 2
        split = miaeval.build_shadow(g, size, _int_seed(seed, 0x5D))
        self.model = miaeval.train_shadow_and_attack(
            split, g, epochs=cfg.shadow_epochs, attack_epochs=cfg.attack_epochs,
            hidden=cfg.hidden, lr=cfg.train_lr, seed=_int_seed(seed, 0x5E),
        )
        members = np.concatenate([c.sub.nodes[c.sub.train_mask] for c in clients])
        self.members, self.nonmembers = miaeval.probe_sets(g, members, _int_seed(seed, 0x9F))
        self.g = g
        self.cfg = cfg
        self.seed = seed

    def __call__(self, condensed: GraphBundle, acc=float("nan")) -> miaeval.AttackReport:
        target = train_target(self.cfg, condensed, self.seed)
        return miaeval.run_attack(
            self.model, target, self.g, self.members, self.nonmembers,
            rewire=self.cfg.rewire, seed=_int_seed(self.seed, 0xA7), acc=acc,
        )


class _Stage:
    def __init__(self, name: str, wall: dict):
        self.name = name
        self.wall = wall
        self.round = None

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.wall[self.name] = time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, PipelineAbort):
            raise PipelineAbort(self.name, self.round, exc) from exc
        return False


def run_seed(cfg: RunConfig, seed: int) -> SeedResult:
    """Run every enabled stage for one seed, in protocol order."""
    wall: dict = {}
    transcript = Transcript()
    g = load_graph(cfg, seed)
    subs = graphstore.dirichlet_partition(g, cfg.clients, cfg.beta, _int_seed(seed, 0xD1))
    clients = [FedClient.from_subgraph(s) for s in subs]
    raw_sums = {c.client_id: _checksum(c.features) for c in clients}

    if cfg.uses_exchange:
        with _Stage("exchange", wall):
            cross = fedcore.neighbor_exchange(clients, seed=_int_seed(seed, 0xC0), transcript=transcript)
            for c, cs in zip(clients, cross):
                c.cross_sums = cs

    with _Stage("self_train", wall):
        if cfg.uses_self_train:
            head, labeled = fedcore.fedavg_self_train(
                clients, cfg.self_train_epochs, cfg.self_train_lr, _int_seed(seed, 0x57), cfg.hidden, transcript
            )
            for c, (lab, mask) in zip(clients, labeled):
                c.labels, c.label_mask = lab, mask
        else:
            head = models.init_params("gcn2", g.d, g.num_classes, hidden=cfg.hidden, seed=_rng(seed, 0x57))

    ib_losses = {}
    if cfg.uses_ib:
        with _Stage("transform", wall):
            for c in clients:
                res = ibx.transform_graph(
                    c, head, c.labels, c.label_mask, cfg.gamma, cfg.ib_epochs, cfg.ib_lr,
                    _int_seed(seed, 0x1B), use_cross=cfg.uses_exchange,
                )
                if len(set(res.head_checksums)) != 1:
                    raise PipelineAbort("transform", None, RuntimeError("shared head changed during transform"))
                c.features = res.z
                c.use_cross = False
                ib_losses[c.client_id] = res.losses
    feature_sums = {c.client_id: _checksum(c.features) for c in clients}
    if not cfg.uses_ib and feature_sums != raw_sums:
        raise PipelineAbort("transform", None, RuntimeError("features changed with the transform disabled"))

    attacker = None
    curve = []
    if cfg.mia_every > 0:
        with _Stage("attack_setup", wall):
            attacker = _Attacker(cfg, g, clients, seed)

    counts = np.sum([fedcore.report_class_counts(c) for c in clients], axis=0)
    y_cond = condense.synthesize_labels(counts, cfg.ratio, g.n)
    mcfg = cfg.match_config(seed)
    state = condense.init_condensed(
        y_cond, g.d, _int_seed(seed, 0xCD), phi_hidden=cfg.phi_hidden, lr_x=cfg.lr_x,
        lr_phi=cfg.lr_phi, num_classes=g.num_classes,
    )
    offset = cfg.self_train_epochs + 1 if cfg.uses_self_train else 1
    best = {"acc": -1.0, "graph": None, "round": 0}
    with _Stage("condense", wall) as st:
        def on_round(rnd, s, loss):
            st.round = rnd
            if cfg.select_every and (rnd + 1) % cfg.select_every == 0:
                snap = condense.materialize(s, cfg.threshold)
                acc = client_validation(_gcn_on(cfg, snap, seed), clients, cfg, transcript, offset + rnd)
                if acc > best["acc"]:
                    best.update(acc=acc, graph=snap, round=rnd + 1)
            # round 1 is always attacked so the curve has a starting point
            if attacker is not None and (rnd == 0 or (rnd + 1) % cfg.mia_every == 0):
                rep = attacker(condense.materialize(s, cfg.threshold))
                curve.append((rnd + 1, loss, rep.auc))

        if cfg.centralized:
            labels = np.zeros(g.n, dtype=np.int64)
            lmask = np.zeros(g.n, dtype=bool)
            feats = np.zeros((g.n, clients[0].features.shape[1]))
            for c in clients:
                labels[c.sub.nodes] = c.labels
                lmask[c.sub.nodes] = c.label_mask
                feats[c.sub.nodes] = c.features
            losses = condense.centralized_condense(g, state, mcfg, feats, labels, lmask, on_round=on_round)
        else:
            ldp = cfg.ldp_epsilon if cfg.defense == "ldp" else None
            losses = condense.federated_condense(
                clients, state, mcfg, transcript, ldp_epsilon=ldp, on_round=on_round, round_offset=offset
            )
        condensed = condense.materialize(state, cfg.threshold)
        if best["graph"] is not None and cfg.condense_epochs % cfg.select_every != 0:
            acc = client_validation(_gcn_on(cfg, condensed, seed), clients, cfg, transcript, offset + cfg.condense_epochs)
            if acc > best["acc"]:
                best.update(acc=acc, graph=condensed, round=cfg.condense_epochs)
        if best["graph"] is not None:
            condensed = best["graph"]

    with _Stage("evaluate", wall):
        evals = evaluate_condensed(cfg, condensed, clients, seed)

    with _Stage("attack", wall):
        if attacker is None:
            attacker = _Attacker(cfg, g, clients, seed)
        gcn_acc = next((e["acc_ft"] for e in evals if e["arch"] == "gcn"), float("nan"))
        report = attacker(condensed, gcn_acc)

    rows = []
    for e in evals:
        rows.append({
            "seed": seed, "arch": e["arch"], "ablation": cfg.ablation_tag, "defense": cfg.defense,
            "gamma": cfg.gamma, "ratio": cfg.ratio, "n_cond": condensed.n,
            "acc": _fmt(e["acc"]), "acc_ft": _fmt(e["acc_ft"]),
            "acc_ft_client_mean": _fmt(e["acc_ft_client_mean"]),
            "acc_ft_client_std": _fmt(e["acc_ft_client_std"]),
            "mia_auc": _fmt(report.auc),
        })
    mia = {"auc": report.auc, "acc": report.acc, "members": len(attacker.members), "nonmembers": len(attacker.nonmembers)}
    selected = best["round"] if best["graph"] is not None else cfg.condense_epochs
    return SeedResult(seed, rows, losses, curve, ib_losses, condensed, transcript, feature_sums, wall, mia, selected)


def run_pipeline(cfg: RunConfig, out=None) -> RunReport:
    """Run all seeds; on a stage failure flush the partial report and re-raise."""
    report = RunReport(cfg)
    try:
        for seed in cfg.seeds:
            report.seeds.append(run_seed(cfg, seed))
    except PipelineAbort as exc:
        report.error = str(exc)
        if out is not None:
            emit_report(report, out)
        raise
    if out is not None:
        emit_report(report, out)
    return report


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\r\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def emit_report(report: RunReport, out) -> Path:
    """Write metrics/curves/losses CSVs, the resolved config, bundles and transcripts."""
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror}") from exc
    _write(out / "metrics.csv", _csv_text(METRIC_FIELDS, report.rows))
    curves = [
        {"seed": s.seed, "round": r, "matching_loss": _fmt(l), "mia_auc": _fmt(a)}
        for s in report.seeds for r, l, a in s.curve
    ]
    _write(out / "curves.csv", _csv_text(CURVE_FIELDS, curves))
    losses = [
        {"seed": s.seed, "round": i + 1, "matching_loss": repr(float(l))}
        for s in report.seeds for i, l in enumerate(s.losses)
    ]
    _write(out / "losses.csv", _csv_text(LOSS_FIELDS, losses))
    _write(out / "config.echo", json.dumps(report.config.to_dict(), indent=2, sort_keys=True) + "\n")
    summary = {"error": report.error, "seeds": {}}
    for s in report.seeds:
        graphstore.save_bundle(s.condensed, out / f"condensed_seed{s.seed}")
        s.transcript.write(out / f"transcript_seed{s.seed}.ndjson")
        summary["seeds"][str(s.seed)] = {
            "transcript_digest": s.transcript.digest(),
            "wall_seconds": s.wall,
            "feature_checksums": {str(k): v for k, v in s.feature_checksums.items()},
            "ib_losses": {str(k): v for k, v in s.ib_losses.items()},
            "mia": s.mia,
            "selected_round": s.selected_round,
        }
    _write(out / "report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out
