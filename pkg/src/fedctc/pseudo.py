"""EMA teacher, masking augmentation and pseudo-label generation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, ParamStore
from .ctc import ctc_loss, greedy_decode, is_feasible
from .model import SeqModel, batch_log_probs, forward_asr, pad_batch


@dataclass
class TeacherState:
    params: ParamStore
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.decay}")

    @classmethod
    def from_model(cls, model: SeqModel, decay: float) -> "TeacherState":
        return cls(model.params.copy(), decay)


def ema_update(teacher: TeacherState, student: ParamStore) -> TeacherState:
    """xi <- a * xi + (1 - a) * theta, elementwise, in place."""
    if teacher.params.names() != student.names():
        raise DimensionError("teacher and student parameter names differ")
    a = teacher.decay
    if a == 1.0:
        return teacher
    for n, xi in teacher.params.params.items():
        th = student.params[n]
        if th.shape != xi.shape:
            raise DimensionError(f"shape mismatch for {n}: {xi.shape} vs {th.shape}")
        teacher.params.params[n] = th.copy() if a == 0.0 else a * xi + (1.0 - a) * th
    return teacher


def teacher_model(teacher: TeacherState, arch) -> SeqModel:
    return SeqModel(arch, teacher.params)


@dataclass(frozen=True)
class AugmentSpec:
    time_frac: float = 0.2
    feat_frac: float = 0.25
    mask_value: float = 0.0

    def __post_init__(self):
        for f in (self.time_frac, self.feat_frac):
            if not 0.0 <= f < 1.0:
                raise ValueError("mask fractions must lie in [0, 1)")


def augment(x, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Mask one random block of frames and one random band of feature dims."""
    x = np.array(x, dtype=np.float64, copy=True)
    T, D = x.shape
    nt = min(T, math.ceil(spec.time_frac * T))
    nf = min(D, math.ceil(spec.feat_frac * D))
    t0 = int(rng.integers(0, T - nt + 1))
    f0 = int(rng.integers(0, D - nf + 1))
    if nt:
        x[t0:t0 + nt, :] = spec.mask_value
    if nf:
        x[:, f0:f0 + nf] = spec.mask_value
    return x


def gen_pseudo_label(teacher: SeqModel, x) -> list[int]:
    """Greedy decode of the teacher on clean (unaugmented) input."""
    return greedy_decode(forward_asr(teacher, x))


def gen_pseudo_labels(teacher: SeqModel, xs) -> list[list[int]]:
    """Batched :func:`gen_pseudo_label`."""
    X, lens = pad_batch(xs)
    lp, flens = batch_log_probs(teacher, X, lens)
    return [greedy_decode(lp[i, :flens[i]]) for i in range(len(xs))]


def usable(label, n_frames: int) -> bool:
    return len(label) > 0 and is_feasible(n_frames, label)


def pl_loss(student: SeqModel, x, spec: AugmentSpec, pseudo, rng) -> float | None:
    """Student CTC on a(x) against ``pseudo``; None when the label is unusable."""
    xa = augment(x, spec, rng)
    lattice = forward_asr(student, xa)
    if not usable(pseudo, lattice.shape[0]):
        return None
    return ctc_loss(lattice, pseudo)


@dataclass
class SkipStats:
    seen: int = 0
    skipped: int = 0

    def add(self, seen: int, skipped: int) -> None:
        self.seen += seen
        self.skipped += skipped

    def as_dict(self) -> dict:
        return {"seen": self.seen, "skipped": self.skipped}


@dataclass
class LabeledSet:
    """Utterances with frozen pseudo labels (vanilla PL)."""

    utterances: list
    labels: list
    skipped: int = 0


def vanilla_pl(model: SeqModel, utterances, batch: int = 64) -> LabeledSet:
    """Label every utterance once with a fixed model; empty labels are counted as skipped."""
    labels = []
    for i in range(0, len(utterances), batch):
        chunk = utterances[i:i + batch]
        labels.extend(gen_pseudo_labels(model, [u.features for u in chunk]))
    skipped = sum(1 for l in labels if not l)
    return LabeledSet(list(utterances), labels, skipped)
