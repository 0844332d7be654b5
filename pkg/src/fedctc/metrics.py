"""Error rates, the client x test-set matrix and the speaker probe."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import OptimState, ParamStore, adam_step
from .ctc import greedy_decode
from .model import SeqModel, batch_log_probs, pad_batch


@dataclass
class WerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        return self.errors / max(1, self.ref_length)

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.substitutions + other.substitutions,
                         self.insertions + other.insertions,
                         self.deletions + other.deletions,
                         self.ref_length + other.ref_length)

    def as_dict(self) -> dict:
        return {"substitutions": self.substitutions, "insertions": self.insertions,
                "deletions": self.deletions, "ref_length": self.ref_length, "wer": self.wer}


def edit_distance(ref, hyp) -> WerReport:
    """Levenshtein alignment; on equal cost the backtrace prefers substitution."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i - 1, j] + 1, d[i, j - 1] + 1)
    S = I = D = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    return WerReport(int(S), I, D, n)


def decode_all(model: SeqModel, utterances, batch: int = 128) -> list[list[int]]:
    hyps = []
    for i in range(0, len(utterances), batch):
        chunk = utterances[i:i + batch]
        X, lens = pad_batch([u.features for u in chunk])
        lp, flens = batch_log_probs(model, X, lens)
        hyps.extend(greedy_decode(lp[b, :flens[b]]) for b in range(len(chunk)))
    return hyps


def eval_model(model: SeqModel, utterances) -> WerReport:
    """Micro-averaged error counts of greedy decoding over ``utterances``."""
    total = WerReport()
    for u, h in zip(utterances, decode_all(model, utterances)):
        total = total + edit_distance(u.labels, h)
    return total


def personalization_matrix(models, testsets) -> np.ndarray:
    """WER of model i (rows) on test set j (columns)."""
    K = len(models)
    M = np.zeros((K, len(testsets)))
    for i, m in enumerate(models):
        for j, ts in enumerate(testsets):
            M[i, j] = eval_model(m, ts).wer
    return M


def diagonal_dominant(M: np.ndarray) -> bool:
    """Each row's diagonal entry is at most the mean of its off-diagonal entries."""
    K = M.shape[0]
    if K < 2:
        return True
    for i in range(K):
        off = np.delete(M[i], i)
        if M[i, i] > off.mean():
            return False
    return True


def speaker_probe(features, speakers, heldout: float = 0.3, seed: int = 0,
                  steps: int = 100, lr: float = 0.1) -> float:
    """Held-out accuracy of a linear classifier on frame-mean-pooled features.

    ``features`` is a list of [T, H] arrays (or an [N, H] array of already
    pooled vectors).
    """
    spk = np.asarray(speakers)
    classes = np.unique(spk)
    if len(classes) < 2:
        raise ValueError("speaker probe needs at least two speakers")
    if isinstance(features, np.ndarray) and features.ndim == 2:
        pooled = features.astype(np.float64)
    else:
        pooled = np.stack([np.asarray(f).mean(axis=0) for f in features])
    y = np.searchsorted(classes, spk)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    n_test = max(1, int(round(heldout * len(y))))
    test, train = order[:n_test], order[n_test:]
    mu = pooled[train].mean(axis=0)
    sd = pooled[train].std(axis=0) + 1e-8
    Z = (pooled - mu) / sd
    C, H = len(classes), Z.shape[1]
    store = ParamStore({"w": np.zeros((H, C)), "b": np.zeros(C)})
    opt = OptimState("adam", lr=lr)
    Xtr, ytr = Z[train], y[train]
    onehot = np.eye(C)[ytr]
    for _ in range(steps):
        logits = Xtr @ store["w"] + store["b"]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(ytr)
        store.grads = {"w": Xtr.T @ g, "b": g.sum(axis=0)}
        adam_step(store, opt)
    pred = np.argmax(Z[test] @ store["w"] + store["b"], axis=1)
    return float(np.mean(pred == y[test]))
