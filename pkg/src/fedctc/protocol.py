"""Federated protocols over a byte-counting channel.

FedAvg, FedNorm and FedExtract share one loop (local epochs, then a uniform
mean over the global parameters). DecoupleFL trains personalized extractors
against a frozen classifier on the clients, ships features once, and refines
the classifier on the server.
"""
from __future__ import annotations

import csv
import hashlib
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (ParamStore, decode_params, encode_params, encoded_param_size,
                       exact_mean, optimizer_step)
from .ctc import is_feasible
from .data import iid_merge
from .model import (ConfigError, SeqModel, batch_loss_grads, extractor_fwd, pad_batch,
                    partition_params)
from .pseudo import AugmentSpec, augment, ema_update, gen_pseudo_labels, usable, vanilla_pl
from .training import (CheckpointTrail, FeatureItem, Node, TrainSettings, _apply, _batches,
                       features_val_loss, train_classifier_epoch, train_epoch, val_loss)

FEATURE_MAGIC = b"FFEA1"
ALGORITHMS = ("fedavg", "fednorm", "fedextract", "decouple")
BASELINES = ("baseline", "client", "centralized")
DECOUPLE_VARIANTS = ("full", "no_stage1", "no_stage2", "joint")
STRATEGY = {"fedavg": "all_global", "fednorm": "norm_layers",
            "fedextract": "extractor", "decouple": "extractor"}


class ProtocolError(RuntimeError):
    pass


@dataclass
class FLConfig:
    algorithm: str = "fedavg"
    clients: int = 3
    local_epochs: int = 1
    global_epochs: int = 40
    variant: str = "full"
    pl: str = "continuous"
    stage1_fraction: float = 0.5
    server_weight: float = 0.5
    sit: bool = False
    sit_lambda: float = 0.1
    lr: float = 3e-3
    optimizer: str = "adam"
    batch_size: int = 16
    ema_decay: float = 0.995
    time_mask: float = 0.2
    feat_mask: float = 0.25
    stage2_augment: bool = False
    n_avg: int = 3
    workers: int = 1
    seed: int = 0

    def validate(self) -> "FLConfig":
        if self.algorithm not in ALGORITHMS + BASELINES:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.clients < 1 or self.local_epochs < 1 or self.global_epochs < 1:
            raise ConfigError("clients, local_epochs and global_epochs must be >= 1")
        if self.variant not in DECOUPLE_VARIANTS:
            raise ConfigError(f"unknown decouple variant {self.variant!r}")
        if self.pl not in ("continuous", "vanilla"):
            raise ConfigError(f"unknown pseudo-labeling mode {self.pl!r}")
        if not 0.0 < self.stage1_fraction < 1.0:
            raise ConfigError("stage1_fraction must lie in (0, 1)")
        if self.server_weight < 0 or self.sit_lambda < 0:
            raise ConfigError("server_weight and sit_lambda must be non-negative")
        if self.workers < 1 or self.n_avg < 1 or self.batch_size < 1:
            raise ConfigError("workers, n_avg and batch_size must be >= 1")
        return self

    @property
    def strategy(self) -> str:
        return STRATEGY.get(self.algorithm, "all_global")

    def settings(self) -> TrainSettings:
        return TrainSettings(lr=self.lr, optimizer=self.optimizer, batch_size=self.batch_size,
                             ema_decay=self.ema_decay,
                             augment=AugmentSpec(self.time_mask, self.feat_mask),
                             sit=self.sit, sit_lambda=self.sit_lambda)

    def stage_epochs(self) -> tuple[int, int]:
        s1 = int(round(self.global_epochs * self.stage1_fraction))
        s1 = min(max(s1, 1), self.global_epochs - 1) if self.global_epochs > 1 else 1
        return s1, max(self.global_epochs - s1, 1)


# ---------------------------------------------------------------------------
# channel and cost ledger
# ---------------------------------------------------------------------------

@dataclass
class Transfer:
    event: int
    direction: str  # "up" (client->server) or "down"
    client: int
    epoch: int
    kind: str  # "params" or "features"
    nbytes: int
    param_names: tuple = ()


@dataclass
class Channel:
    """Every payload that crosses the client/server boundary goes through here."""

    log: list = field(default_factory=list)

    def send(self, payload: bytes, *, direction: str, client: int, epoch: int, kind: str) -> bytes:
        names = tuple(decode_params(payload).names()) if kind == "params" else ()
        self.log.append(Transfer(len(self.log), direction, client, epoch, kind, len(payload), names))
        return payload

    def total(self, direction=None, kind=None) -> int:
        return sum(t.nbytes for t in self.log
                   if (direction is None or t.direction == direction)
                   and (kind is None or t.kind == kind))

    def transferred_names(self) -> set:
        return {n for t in self.log for n in t.param_names}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["event", "direction", "client", "epoch", "kind", "bytes"])
        for t in self.log:
            w.writerow([t.event, t.direction, t.client, t.epoch, t.kind, t.nbytes])
        return buf.getvalue()


@dataclass
class CostLedger:
    """Append-only training-epoch counts; server epochs carry a weight."""

    client_epochs: dict = field(default_factory=dict)
    server_entries: list = field(default_factory=list)

    def client(self, k: int, epochs: int = 1) -> None:
        self.client_epochs[k] = self.client_epochs.get(k, 0) + epochs

    def server(self, epochs: int, weight: float) -> None:
        self.server_entries.append((epochs, weight))

    @property
    def server_epochs(self) -> int:
        return sum(e for e, _ in self.server_entries)

    @property
    def weighted_server_epochs(self) -> float:
        return float(sum(e * w for e, w in self.server_entries))

    @property
    def per_client_epochs(self) -> float:
        """Epochs of one client (clients run equal budgets; max if not)."""
        return float(max(self.client_epochs.values(), default=0))


@dataclass
class CostReport:
    comm_bytes: int
    up_bytes: int
    down_bytes: int
    client_epochs: float
    server_epochs: int
    weighted_server_epochs: float
    total_compute: float
    reference_comm_bytes: int
    reference_compute: float
    comm_ratio: float | None
    compute_ratio: float | None

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def cost_report(channel: Channel, ledger: CostLedger, config: FLConfig,
                model_bytes: int) -> CostReport:
    """Totals plus ratios against FedAvg with E=1 over the same epoch budget."""
    client = ledger.per_client_epochs
    total = client + ledger.weighted_server_epochs
    ran = bool(channel.log) or total > 0
    ref_comm = 2 * config.clients * config.global_epochs * model_bytes if ran else 0
    ref_compute = float(config.global_epochs) if ran else 0.0
    comm = channel.total()
    return CostReport(
        comm_bytes=comm, up_bytes=channel.total("up"), down_bytes=channel.total("down"),
        client_epochs=client, server_epochs=ledger.server_epochs,
        weighted_server_epochs=ledger.weighted_server_epochs, total_compute=total,
        reference_comm_bytes=ref_comm, reference_compute=ref_compute,
        comm_ratio=comm / ref_comm if ref_comm else None,
        compute_ratio=total / ref_compute if ref_compute else None)


@dataclass(frozen=True)
class CommCostModel:
    """Analytic byte counts for parameter exchange vs one-shot feature upload."""

    model_bytes: float
    classifier_bytes: float
    feature_frames: float
    feature_dim: int
    bytes_per_value: float
    clients: int
    global_epochs: int

    def fedavg_bytes(self, global_bytes=None) -> float:
        payload = self.model_bytes if global_bytes is None else global_bytes
        return 2 * self.clients * self.global_epochs * payload

    def decouple_bytes(self) -> float:
        features = self.feature_frames * self.feature_dim * self.bytes_per_value
        return features + self.clients * self.classifier_bytes

    def ratio(self) -> float:
        return self.decouple_bytes() / self.fedavg_bytes()


# ---------------------------------------------------------------------------
# FFEA1 feature shipments
# ---------------------------------------------------------------------------

def encode_features(client: int, items) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<II", client, len(items))]
    for it in items:
        T, D = it.features.shape
        parts.append(struct.pack("<II", it.uid, len(it.labels)))
        parts.append(struct.pack(f"<{len(it.labels)}I", *it.labels))
        parts.append(struct.pack("<II", T, D))
        parts.append(np.ascontiguousarray(it.features, dtype="<f8").tobytes())
    return b"".join(parts)


def feature_record_size(n_labels: int, T: int, D: int) -> int:
    return 8 + 4 * n_labels + 8 + 8 * T * D


def feature_shipment_size(items) -> int:
    return 13 + sum(feature_record_size(len(it.labels), *it.features.shape) for it in items)


def decode_features(blob: bytes):
    if blob[:5] != FEATURE_MAGIC:
        raise ProtocolError(f"bad feature magic {blob[:5]!r}")
    try:
        client, n = struct.unpack_from("<II", blob, 5)
        pos, items = 13, []
        for _ in range(n):
            uid, L = struct.unpack_from("<II", blob, pos)
            pos += 8
            labels = list(struct.unpack_from(f"<{L}I", blob, pos))
            pos += 4 * L
            T, D = struct.unpack_from("<II", blob, pos)
            pos += 8
            if pos + 8 * T * D > len(blob):
                raise struct.error("feature block overruns buffer")
            F = np.frombuffer(blob, dtype="<f8", count=T * D, offset=pos).reshape(T, D).astype(np.float64)
            pos += 8 * T * D
            items.append(FeatureItem(F, labels, client, uid))
    except struct.error as exc:
        raise ProtocolError(f"truncated feature shipment: {exc}") from None
    return client, items


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def aggregate_global(stores, global_names) -> ParamStore:
    """Uniform mean of the named parameters across client stores."""
    if not stores:
        raise ProtocolError("nothing to aggregate")
    global_names = sorted(global_names)
    for s in stores:
        for n in global_names:
            if n not in s or s[n].shape != stores[0][n].shape:
                raise ProtocolError(f"client stores disagree on {n!r}")
    return ParamStore({n: exact_mean([s[n] for s in stores]) for n in global_names})


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

@dataclass
class FLResult:
    """Final per-client models plus the protocol bookkeeping of one run."""

    models: list
    channel: Channel
    ledger: CostLedger
    skips: dict = field(default_factory=dict)
    shipments: dict = field(default_factory=dict)
    stage_hashes: dict = field(default_factory=dict)


def _node_seed(config: FLConfig, role: int, k: int):
    return [config.seed, 7919, role, k]


def _map(config: FLConfig, fn, items):
    if config.workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _skip_dict(nodes) -> dict:
    return {f"client{k}": n.skips.as_dict() for k, n in enumerate(nodes)}


def run_local(base: SeqModel, corpus, config: FLConfig) -> FLResult:
    """"Client" baseline: every client adapts alone."""
    settings = config.settings()
    ledger = CostLedger()
    nodes = [Node.create(base, settings, _node_seed(config, 0, k)) for k in range(config.clients)]
    trainable = base.names("ext.") + base.names("cls.")

    def work(k):
        node, data = nodes[k], corpus.clients[k]
        trail = CheckpointTrail(config.n_avg)
        for _ in range(config.global_epochs):
            train_epoch(node, data.train, settings, trainable)
            trail.add(val_loss(node.model, data.val), node.model.params)
        final = node.model.copy()
        final.params.update_from(trail.best_average())
        return final

    models = _map(config, work, list(range(config.clients)))
    for k in range(config.clients):
        ledger.client(k, config.global_epochs)
    return FLResult(models, Channel(), ledger, _skip_dict(nodes))


def run_centralized(base: SeqModel, corpus, config: FLConfig) -> FLResult:
    """Pooled adaptation on the server with continuous or vanilla PL."""
    settings = config.settings()
    node = Node.create(base, settings, _node_seed(config, 1, 0))
    train = iid_merge([c.train for c in corpus.clients])
    val = iid_merge([c.val for c in corpus.clients])
    trainable = base.names("ext.") + base.names("cls.")
    labels = None
    skips = {}
    if config.pl == "vanilla":
        labeled = vanilla_pl(base, train)
        labels = labeled.labels
        skips["vanilla_empty"] = labeled.skipped
    trail = CheckpointTrail(config.n_avg)
    ledger = CostLedger()
    for _ in range(config.global_epochs):
        train_epoch(node, train, settings, trainable, labels=labels)
        trail.add(val_loss(node.model, val), node.model.params)
    ledger.server(config.global_epochs, 1.0)
    final = node.model.copy()
    final.params.update_from(trail.best_average())
    skips["server"] = node.skips.as_dict()
    return FLResult([final] * config.clients, Channel(), ledger, skips)


def run_partitioned(base: SeqModel, corpus, config: FLConfig) -> FLResult:
    """FedAvg / FedNorm / FedExtract: local epochs, then mean of the global layers."""
    settings = config.settings()
    local, global_names = partition_params(base, config.strategy)
    K = config.clients
    channel, ledger = Channel(), CostLedger()
    nodes = [Node.create(base, settings, _node_seed(config, 0, k)) for k in range(K)]
    trainable = base.names("ext.") + base.names("cls.")
    trails = [CheckpointTrail(config.n_avg) for _ in range(K)]

    def local_train(k):
        for _ in range(config.local_epochs):
            train_epoch(nodes[k], corpus.clients[k].train, settings, trainable)

    for g in range(config.global_epochs):
        _map(config, local_train, list(range(K)))
        uploads = []
        for k in range(K):
            ledger.client(k, config.local_epochs)
            blob = channel.send(encode_params(nodes[k].model.params, global_names),
                                direction="up", client=k, epoch=g, kind="params")
            uploads.append(decode_params(blob))
        merged = encode_params(aggregate_global(uploads, global_names))
        for k in range(K):
            blob = channel.send(merged, direction="down", client=k, epoch=g, kind="params")
            nodes[k].model.params.update_from(decode_params(blob))
            trails[k].add(val_loss(nodes[k].model, corpus.clients[k].val), nodes[k].model.params)
    models = []
    for k in range(K):
        final = nodes[k].model.copy()
        final.params.update_from(trails[k].best_average())
        models.append(final)
    return FLResult(models, channel, ledger, _skip_dict(nodes))


def _stage1(node: Node, data, settings, epochs, n_avg, sit: bool):
    """Extractor (+ speaker head) training against a frozen classifier."""
    model = node.model
    trainable = model.names("ext.") + (model.names("spk.") if sit else [])
    trail = CheckpointTrail(n_avg)
    for _ in range(epochs):
        train_epoch(node, data.train, settings, trainable)
        trail.add(val_loss(model, data.val), model.params)
    best = trail.best_average()
    final = model.copy()
    final.params.update_from(best.subset(model.names("ext.") + model.names("spk.")))
    return final


def extract_items(model: SeqModel, utterances, labels, batch: int = 128):
    """Features from ``model``'s extractor for every utterance with a usable label."""
    items = []
    for i in range(0, len(utterances), batch):
        chunk = utterances[i:i + batch]
        X, lens = pad_batch([u.features for u in chunk])
        F, _ = extractor_fwd(model, X)
        flens = model.arch.out_frames(lens)
        for b, u in enumerate(chunk):
            lab = list(labels[i + b])
            if lab and is_feasible(int(flens[b]), lab):
                items.append(FeatureItem(F[b, :flens[b]].copy(), lab, u.client, u.uid))
    return items


def upload_features(k: int, model: SeqModel, labeler: SeqModel, utterances,
                    channel: Channel, epoch: int):
    """Client k labels its training set with ``labeler`` and ships features once."""
    labels = []
    for i in range(0, len(utterances), 128):
        labels.extend(gen_pseudo_labels(labeler, [u.features for u in utterances[i:i + 128]]))
    items = extract_items(model, utterances, labels)
    blob = channel.send(encode_features(k, items), direction="up", client=k,
                        epoch=epoch, kind="features")
    _, received = decode_features(blob)
    return received, len(utterances) - len(items)


def _stage2(base: SeqModel, items, val_items, settings, config: FLConfig, epochs: int):
    """Server-side classifier training on pooled features.

    Continuous mode keeps an EMA teacher over the classifier and relabels clean
    features every step; vanilla mode trains on the labels shipped by clients.
    The starting classifier is itself a checkpoint candidate.
    """
    server = Node.create(base, settings, _node_seed(config, 2, 0),
                         teacher=config.pl == "continuous")
    trail = CheckpointTrail(config.n_avg)
    trail.add(features_val_loss(server.model, val_items), server.model.params)
    for _ in range(epochs):
        train_classifier_epoch(server, items, settings, use_augment=config.stage2_augment)
        trail.add(features_val_loss(server.model, val_items), server.model.params)
    return trail.best_average().subset(base.names("cls.")), server.skips


def _val_items(models, corpus):
    out = []
    for k, m in enumerate(models):
        val = corpus.clients[k].val
        out.extend(extract_items(m, val, [u.labels for u in val]))
    return out


def _hash(store: ParamStore, names) -> str:
    return hashlib.sha256(encode_params(store, names)).hexdigest()


def run_decouple(base: SeqModel, corpus, config: FLConfig) -> FLResult:
    """DecoupleFL and its ablations (``config.variant``)."""
    settings = config.settings()
    K = config.clients
    channel, ledger = Channel(), CostLedger()
    variant = config.variant
    if variant == "joint":
        return _run_joint(base, corpus, config)
    s1, s2 = config.stage_epochs()
    if variant == "no_stage1":
        s1, s2 = 0, config.global_epochs
    elif variant == "no_stage2":
        s1, s2 = config.global_epochs, 0
    cls_names = base.names("cls.")
    ext_names = base.names("ext.")
    nodes = [Node.create(base, settings, _node_seed(config, 0, k)) for k in range(K)]
    hashes = {"cls_before_stage1": _hash(base.params, cls_names)}

    def stage1(k):
        if s1 == 0:
            return nodes[k].model.copy()
        return _stage1(nodes[k], corpus.clients[k], settings, s1, config.n_avg, config.sit)

    personal = _map(config, stage1, list(range(K)))
    for k in range(K):
        if s1:
            ledger.client(k, s1)
    hashes["cls_after_stage1"] = [_hash(m.params, cls_names) for m in personal]
    hashes["ext_after_stage1"] = [_hash(m.params, ext_names) for m in personal]

    shipments, skips = {}, _skip_dict(nodes)
    if s2 == 0:
        return FLResult(personal, channel, ledger, skips, shipments, hashes)

    items = []
    for k in range(K):
        received, dropped = upload_features(k, personal[k], nodes[k].teacher_model(),
                                            corpus.clients[k].train, channel, epoch=s1)
        shipments[k] = received
        skips[f"client{k}"]["upload_dropped"] = dropped
        items.extend(received)
    refined, server_skips = _stage2(base, items, _val_items(personal, corpus), settings, config, s2)
    skips["server"] = server_skips.as_dict()
    ledger.server(s2, config.server_weight)
    blob = encode_params(refined, cls_names)
    models = []
    for k in range(K):
        got = decode_params(channel.send(blob, direction="down", client=k,
                                         epoch=s1 + s2, kind="params"))
        m = personal[k].copy()
        m.params.update_from(got)
        models.append(m)
    hashes["ext_after_stage2"] = [_hash(m.params, ext_names) for m in models]
    return FLResult(models, channel, ledger, skips, shipments, hashes)


def _run_joint(base: SeqModel, corpus, config: FLConfig) -> FLResult:
    """End-to-end training of per-client extractors with one shared classifier.

    Each step takes one minibatch per client; classifier gradients are
    averaged over clients, extractor gradients stay with their client.
    """
    settings = config.settings()
    K = config.clients
    ledger = CostLedger()
    nodes = [Node.create(base, settings, _node_seed(config, 0, k)) for k in range(K)]
    shared = Node.create(base, settings, _node_seed(config, 3, 0), teacher=False)
    ext_names = set(base.names("ext."))
    cls_names = base.names("cls.")
    trails = [CheckpointTrail(config.n_avg) for _ in range(K)]
    for _ in range(config.global_epochs):
        plans = [_batches(n.rng, len(corpus.clients[k].train), settings.batch_size)
                 for k, n in enumerate(nodes)]
        for step in range(max(len(p) for p in plans)):
            cls_grads = []
            for k, node in enumerate(nodes):
                if step >= len(plans[k]):
                    continue
                utts = [corpus.clients[k].train[i] for i in plans[k][step]]
                node.model.params.update_from(shared.model.params.subset(cls_names))
                targets = gen_pseudo_labels(node.teacher_model(), [u.features for u in utts])
                keep = [i for i, (u, t) in enumerate(zip(utts, targets))
                        if usable(t, int(base.arch.out_frames(u.features.shape[0])))]
                node.skips.add(len(utts), len(utts) - len(keep))
                if not keep:
                    continue
                X, lens = pad_batch([augment(utts[i].features, settings.augment, node.rng)
                                     for i in keep])
                _, _, grads = batch_loss_grads(node.model, X, lens, [targets[i] for i in keep])
                _apply(node, grads, ext_names)
                cls_grads.append({n: grads[n] for n in cls_names})
            if cls_grads:
                shared.model.params.grads = {
                    n: sum(g[n] for g in cls_grads) / len(cls_grads) for n in cls_names}
                optimizer_step(shared.model.params, shared.opt, cls_names)
                shared.model.params.zero_grad()
            for node in nodes:
                node.model.params.update_from(shared.model.params.subset(cls_names))
                ema_update(node.teacher, node.model.params)
        for k, node in enumerate(nodes):
            trails[k].add(val_loss(node.model, corpus.clients[k].val), node.model.params)
    ledger.server(config.global_epochs, 1.0)
    models = []
    for k, node in enumerate(nodes):
        m = node.model.copy()
        m.params.update_from(trails[k].best_average())
        models.append(m)
    return FLResult(models, Channel(), ledger, _skip_dict(nodes))


def run_algorithm(base: SeqModel, corpus, config: FLConfig) -> FLResult:
    config.validate()
    if config.clients != len(corpus.clients):
        raise ConfigError(f"config has {config.clients} clients, corpus has {len(corpus.clients)}")
    if config.algorithm == "baseline":
        return FLResult([base.copy() for _ in range(config.clients)], Channel(), CostLedger())
    if config.algorithm == "client":
        return run_local(base, corpus, config)
    if config.algorithm == "centralized":
        return run_centralized(base, corpus, config)
    if config.algorithm == "decouple":
        return run_decouple(base, corpus, config)
    return run_partitioned(base, corpus, config)


def model_bytes(model: SeqModel) -> int:
    return encoded_param_size(model.params)
