"""Training loops shared by every algorithm: supervised CTC, continuous and
vanilla pseudo-labeling, classifier-only training on features, validation
loss and best-checkpoint averaging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import OptimState, ParamStore, exact_mean, optimizer_step
from .ctc import ctc_batch, greedy_decode, is_feasible
from .model import (SeqModel, batch_loss_grads, classifier_fwd, classifier_loss_grads,
                    extractor_fwd, pad_batch)
from .pseudo import (AugmentSpec, SkipStats, TeacherState, augment, ema_update,
                     gen_pseudo_labels, usable)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainSettings:
    lr: float = 3e-3
    optimizer: str = "adam"
    batch_size: int = 16
    ema_decay: float = 0.995
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    sit: bool = False
    sit_lambda: float = 0.1


@dataclass
class Node:
    """One trainer: a client, or the server in centralized / stage-2 training."""

    model: SeqModel
    opt: OptimState
    rng: np.random.Generator
    teacher: TeacherState | None = None
    skips: SkipStats = field(default_factory=SkipStats)
    epochs: int = 0

    @classmethod
    def create(cls, model: SeqModel, settings: TrainSettings, seed_key, teacher: bool = True):
        return cls(model=model.copy(),
                   opt=OptimState(settings.optimizer, lr=settings.lr),
                   rng=np.random.default_rng(seed_key),
                   teacher=TeacherState.from_model(model, settings.ema_decay) if teacher else None)

    def teacher_model(self) -> SeqModel:
        return SeqModel(self.model.arch, self.teacher.params)


def _batches(rng, n, size):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _apply(node: Node, grads: dict, trainable) -> None:
    names = [n for n in grads if n in trainable]
    for n in names:
        if not np.all(np.isfinite(grads[n])):
            raise DivergenceError(f"non-finite gradient in {n}")
    node.model.params.grads = {n: grads[n] for n in names}
    optimizer_step(node.model.params, node.opt, names)
    node.model.params.zero_grad()


def train_epoch(node: Node, utterances, settings: TrainSettings, trainable, *,
                labels=None, supervised: bool = False, use_augment: bool = True) -> float:
    """One pass over ``utterances``.

    Targets come from the reference (``supervised``), from ``labels`` (frozen
    pseudo labels), or else from the node's EMA teacher on clean input, with
    the teacher updated after every optimizer step. Returns the mean loss.
    """
    arch = node.model.arch
    trainable = set(trainable)
    train_ext = any(n.startswith("ext.") for n in trainable)
    train_cls = any(n.startswith("cls.") for n in trainable)
    sit = settings.sit and any(n.startswith("spk.") for n in trainable)
    total, count = 0.0, 0
    for idx in _batches(node.rng, len(utterances), settings.batch_size):
        utts = [utterances[i] for i in idx]
        if supervised:
            targets = [list(u.labels) for u in utts]
        elif labels is not None:
            targets = [list(labels[i]) for i in idx]
        else:
            targets = gen_pseudo_labels(node.teacher_model(), [u.features for u in utts])
        keep = [i for i, (u, t) in enumerate(zip(utts, targets))
                if usable(t, int(arch.out_frames(u.features.shape[0])))]
        node.skips.add(len(utts), len(utts) - len(keep))
        if not keep:
            continue
        xs = [utts[i].features for i in keep]
        if use_augment:
            xs = [augment(x, settings.augment, node.rng) for x in xs]
        X, lens = pad_batch(xs)
        spk = [utts[i].speaker for i in keep] if sit else None
        asr, _, grads = batch_loss_grads(node.model, X, lens, [targets[i] for i in keep],
                                         speakers=spk, lam=settings.sit_lambda,
                                         train_ext=train_ext, train_cls=train_cls)
        if not math.isfinite(asr):
            raise DivergenceError("loss became non-finite")
        _apply(node, grads, trainable)
        if node.teacher is not None:
            ema_update(node.teacher, node.model.params)
        total += asr * len(keep)
        count += len(keep)
    node.epochs += 1
    return total / count if count else float("nan")


@dataclass
class FeatureItem:
    features: np.ndarray
    labels: list
    client: int
    uid: int


def mask_features(F, spec: AugmentSpec, rng) -> np.ndarray:
    return augment(F, spec, rng)


def feature_pseudo_labels(model: SeqModel, fs) -> list[list[int]]:
    """Greedy labels from the classifier alone, given extracted features."""
    F, flens = pad_batch(fs)
    logits, _ = classifier_fwd(model, F)
    lp = logits - np.logaddexp.reduce(logits, axis=-1, keepdims=True)
    return [greedy_decode(lp[i, :flens[i]]) for i in range(len(fs))]


def train_classifier_epoch(node: Node, items, settings: TrainSettings,
                           use_augment: bool = True) -> float:
    """One pass of classifier-only CTC training on uploaded features.

    With a teacher on the node, targets are regenerated every step from clean
    features (continuous pseudo-labeling); otherwise the shipped labels are used.
    """
    trainable = node.model.names("cls.")
    total, count = 0.0, 0
    for idx in _batches(node.rng, len(items), settings.batch_size):
        batch = [items[i] for i in idx]
        if node.teacher is not None:
            targets = feature_pseudo_labels(node.teacher_model(), [it.features for it in batch])
            keep = [i for i, (it, t) in enumerate(zip(batch, targets))
                    if usable(t, it.features.shape[0])]
            node.skips.add(len(batch), len(batch) - len(keep))
            batch, targets = [batch[i] for i in keep], [targets[i] for i in keep]
            if not batch:
                continue
        else:
            targets = [it.labels for it in batch]
        fs = [it.features for it in batch]
        if use_augment:
            fs = [mask_features(f, settings.augment, node.rng) for f in fs]
        F, flens = pad_batch(fs)
        loss, grads = classifier_loss_grads(node.model, F, flens, targets)
        if not math.isfinite(loss):
            raise DivergenceError("loss became non-finite")
        _apply(node, grads, trainable)
        if node.teacher is not None:
            ema_update(node.teacher, node.model.params)
        total += loss * len(batch)
        count += len(batch)
    node.epochs += 1
    return total / count if count else float("nan")


def val_loss(model: SeqModel, utterances, batch: int = 128) -> float:
    """Mean reference-label CTC loss over feasible utterances."""
    total, count = 0.0, 0
    for i in range(0, len(utterances), batch):
        chunk = [u for u in utterances[i:i + batch]
                 if is_feasible(int(model.arch.out_frames(u.features.shape[0])), u.labels)]
        if not chunk:
            continue
        X, lens = pad_batch([u.features for u in chunk])
        feats, _ = extractor_fwd(model, X)
        logits, _ = classifier_fwd(model, feats)
        losses, _ = ctc_batch(logits, model.arch.out_frames(lens), [list(u.labels) for u in chunk],
                              with_grad=False)
        total += float(losses.sum())
        count += len(chunk)
    return total / count if count else float("inf")


def features_val_loss(model: SeqModel, items, batch: int = 128) -> float:
    total, count = 0.0, 0
    for i in range(0, len(items), batch):
        chunk = [it for it in items[i:i + batch] if is_feasible(it.features.shape[0], it.labels)]
        if not chunk:
            continue
        F, flens = pad_batch([it.features for it in chunk])
        logits, _ = classifier_fwd(model, F)
        losses, _ = ctc_batch(logits, flens, [list(it.labels) for it in chunk], with_grad=False)
        total += float(losses.sum())
        count += len(chunk)
    return total / count if count else float("inf")


def average_checkpoints(checkpoints, n: int) -> ParamStore:
    """Elementwise mean of the ``n`` lowest-scoring ``(score, ParamStore)`` pairs.

    Ties keep their original order. A single selected checkpoint is returned
    unchanged (as a copy).
    """
    if not checkpoints:
        raise ValueError("no checkpoints to average")
    ranked = sorted(range(len(checkpoints)), key=lambda i: checkpoints[i][0])
    chosen = [checkpoints[i][1] for i in ranked[:max(1, n)]]
    first = chosen[0]
    for c in chosen[1:]:
        if c.names() != first.names() or any(c[k].shape != first[k].shape for k in first.names()):
            raise ValueError("checkpoints have mismatched parameters")
    if len(chosen) == 1:
        return first.copy()
    return ParamStore({k: exact_mean([c[k] for c in chosen]) for k in first.names()})


@dataclass
class CheckpointTrail:
    """Per-epoch snapshots ranked later by validation loss."""

    n_avg: int
    entries: list = field(default_factory=list)

    def add(self, score: float, store: ParamStore) -> None:
        self.entries.append((score, store.copy()))

    def best_average(self) -> ParamStore:
        return average_checkpoints(self.entries, self.n_avg)


def pretrain(model: SeqModel, train, val, settings: TrainSettings, epochs: int, seed_key,
             n_avg: int = 1, log=None):
    """Supervised CTC training of every ASR parameter; returns (model, losses)."""
    node = Node.create(model, settings, seed_key, teacher=False)
    trainable = node.model.names("ext.") + node.model.names("cls.")
    trail = CheckpointTrail(n_avg)
    losses = []
    for ep in range(epochs):
        loss = train_epoch(node, train, settings, trainable, supervised=True, use_augment=False)
        losses.append(loss)
        trail.add(val_loss(node.model, val), node.model.params)
        if log:
            log(f"pretrain epoch {ep + 1}/{epochs} loss {loss:.4f}")
    final = node.model.copy()
    if epochs:
        final.params.update_from(trail.best_average())
    return final, losses
