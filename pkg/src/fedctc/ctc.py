"""CTC loss, gradient, greedy decoding and a brute-force reference.

Blank is token 0. Log-space with a finite ``NEG`` sentinel for log(0).
"""
from __future__ import annotations

import itertools

import numpy as np

BLANK = 0
NEG = -1e30


class InfeasibleAlignmentError(ValueError):
    """The label needs more frames than the lattice has."""


def min_frames(label) -> int:
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def is_feasible(n_frames: int, label) -> bool:
    return n_frames >= min_frames(label)


def _check_label(label, V):
    for tok in label:
        if not 1 <= tok < V:
            raise ValueError(f"label token {tok} outside [1, {V - 1}]")


def _extend(labels: np.ndarray, label_lens: np.ndarray):
    """Blank-interleaved labels [B, 2Lmax+1] and the skip-transition mask."""
    B, Lmax = labels.shape
    S = 2 * Lmax + 1
    ext = np.zeros((B, S), dtype=np.int64)
    ext[:, 1::2] = labels
    skip = np.zeros((B, S), dtype=bool)
    if S > 2:
        skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    # states past the label end never reach the final states; keep them inert
    pos = np.arange(S)[None, :]
    inert = pos >= (2 * label_lens[:, None] + 1)
    skip &= ~inert
    return ext, skip


def _shift(a, k):
    out = np.full_like(a, NEG)
    out[:, k:] = a[:, :-k]
    return out


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    return m + np.log(np.exp(a - m) + np.exp(b - m) + np.exp(c - m))


def ctc_batch(logits: np.ndarray, frame_lens, labels, with_grad: bool = True):
    """Batched CTC over padded inputs.

    logits: [B, T, V] pre-softmax scores; frame_lens: [B]; labels: list of
    token sequences. Returns per-utterance losses [B] and, if requested, the
    gradient of ``sum(losses)`` w.r.t. ``logits`` (zero on padded frames).
    Caller guarantees feasibility.
    """
    B, T, V = logits.shape
    frame_lens = np.asarray(frame_lens, dtype=np.int64)
    label_lens = np.array([len(l) for l in labels], dtype=np.int64)
    Lmax = int(label_lens.max()) if B else 0
    lab = np.zeros((B, Lmax), dtype=np.int64)
    for b, l in enumerate(labels):
        lab[b, :len(l)] = l
    ext, skip = _extend(lab, label_lens)
    S = ext.shape[1]

    m = logits.max(axis=-1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
    bidx = np.arange(B)[:, None]
    emit = logp[bidx[:, :, None], np.arange(T)[None, :, None], ext[:, None, :]]  # [B, T, S]

    alpha = np.full((B, T, S), NEG)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = emit[:, 0, 1]
    for t in range(1, T):
        prev = alpha[:, t - 1]
        a2 = np.where(skip, _shift(prev, 2), NEG) if S > 2 else np.full_like(prev, NEG)
        alpha[:, t] = _lse3(prev, _shift(prev, 1), a2) + emit[:, t]
    alpha = np.maximum(alpha, NEG)

    last = frame_lens - 1
    endS = 2 * label_lens
    a_end = alpha[np.arange(B), last, endS]
    a_pre = np.where(label_lens > 0, alpha[np.arange(B), last, np.maximum(endS - 1, 0)], NEG)
    log_lik = np.logaddexp(a_end, a_pre)
    losses = -log_lik
    if not with_grad:
        return losses, None

    # beta[t, s]: log-prob of emitting frames t+1.. given state s at t
    beta = np.full((B, T, S), NEG)
    rows = np.arange(B)
    for t in range(T - 1, -1, -1):
        init = last == t
        if t < T - 1:
            nxt = beta[:, t + 1] + emit[:, t + 1]
            stay = nxt
            step1 = np.full_like(nxt, NEG)
            step1[:, :-1] = nxt[:, 1:]
            step2 = np.full_like(nxt, NEG)
            if S > 2:
                step2[:, :-2] = np.where(skip[:, 2:], nxt[:, 2:], NEG)
            rec = _lse3(stay, step1, step2)
            active = t < last
            beta[active, t] = rec[active]
        if init.any():
            bi = rows[init]
            beta[bi, t] = NEG
            beta[bi, t, endS[init]] = 0.0
            has = label_lens[init] > 0
            beta[bi[has], t, endS[init][has] - 1] = 0.0
    beta = np.maximum(beta, NEG)

    gamma = np.exp(np.minimum(alpha + beta - log_lik[:, None, None], 0.0))  # [B, T, S]
    valid = np.arange(T)[None, :] < frame_lens[:, None]
    gamma *= valid[:, :, None]
    onehot = np.zeros((B, S, V))
    onehot[bidx, np.arange(S)[None, :], ext] = 1.0
    occ = np.einsum("bts,bsv->btv", gamma, onehot)
    grad = (np.exp(logp) - occ) * valid[:, :, None]
    return losses, grad


def _as_lattice(log_probs):
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[1] < 2:
        raise ValueError(f"lattice must be [T, V>=2], got {lp.shape}")
    return lp


def ctc_loss(log_probs, label) -> float:
    """Negative log-probability of ``label`` under a [T, V] log-prob lattice."""
    lp = _as_lattice(log_probs)
    label = [int(t) for t in label]
    _check_label(label, lp.shape[1])
    if not is_feasible(lp.shape[0], label):
        raise InfeasibleAlignmentError(
            f"label needs {min_frames(label)} frames, lattice has {lp.shape[0]}")
    losses, _ = ctc_batch(lp[None], [lp.shape[0]], [label], with_grad=False)
    return float(losses[0])


def ctc_grad(log_probs, label) -> np.ndarray:
    """Gradient of :func:`ctc_loss` w.r.t. the pre-softmax logits.

    The lattice is treated as logits; for a normalized lattice the softmax is
    the lattice's own probabilities, so the result is softmax - occupancy.
    """
    lp = _as_lattice(log_probs)
    label = [int(t) for t in label]
    _check_label(label, lp.shape[1])
    if not is_feasible(lp.shape[0], label):
        raise InfeasibleAlignmentError(
            f"label needs {min_frames(label)} frames, lattice has {lp.shape[0]}")
    _, g = ctc_batch(lp[None], [lp.shape[0]], [label])
    return g[0]


def collapse(path) -> list[int]:
    out, prev = [], None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != BLANK:
            out.append(tok)
        prev = tok
    return out


def ctc_brute_force(log_probs, label, max_paths: int = 10**6) -> float:
    """Enumerate every frame-level path; slow reference for tests."""
    lp = _as_lattice(log_probs)
    T, V = lp.shape
    if V ** T > max_paths:
        raise ValueError(f"{V}^{T} paths exceeds the enumeration guard {max_paths}")
    target = [int(t) for t in label]
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total += np.exp(sum(lp[t, s] for t, s in enumerate(path)))
    return float("inf") if total == 0.0 else float(-np.log(total))


def greedy_decode(log_probs) -> list[int]:
    """Per-frame argmax (ties to the lowest index), collapse repeats, drop blanks."""
    lp = np.asarray(log_probs)
    return collapse(np.argmax(lp, axis=-1))
