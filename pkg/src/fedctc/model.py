"""Sequence recognizer: conv + residual-block extractor, residual-block classifier
and a mean-pooled speaker head sitting behind a gradient reversal layer.

Parameter names carry the prefixes ``ext.``, ``cls.`` and ``spk.``, which is
all the partitioning logic needs.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .ctc import ctc_batch

PARTITION_STRATEGIES = ("all_global", "norm_layers", "extractor")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int = 8
    hidden: int = 16
    ffn: int = 32
    kernel: int = 3
    stride1: int = 2
    stride2: int = 1
    ext_blocks: int = 2
    cls_blocks: int = 2
    vocab: int = 13
    speakers: int = 15
    ln_eps: float = 1e-5

    def validate(self) -> "ArchSpec":
        dims = (self.input_dim, self.hidden, self.ffn, self.kernel, self.stride1, self.stride2)
        if min(dims) < 1:
            raise ConfigError(f"dimensions must be positive: {self}")
        if self.ext_blocks < 0 or self.cls_blocks < 0:
            raise ConfigError("block counts must be non-negative")
        if self.vocab < 2:
            raise ConfigError("vocab must include blank and at least one token")
        if self.speakers < 1:
            raise ConfigError("need at least one speaker")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def out_frames(self, T):
        """Frame count after the conv front end (works on ints and arrays)."""
        t1 = (np.asarray(T) - self.kernel) // self.stride1 + 1
        return (t1 - self.kernel) // self.stride2 + 1

    def min_input_frames(self) -> int:
        T = self.kernel
        while self.out_frames(T) < 1:
            T += 1
        return T

    def num_params(self) -> int:
        K, D, H, F = self.kernel, self.input_dim, self.hidden, self.ffn
        block = 2 * H + (H * F + F) + (F * H + H)
        conv = (K * D * H + H) + (K * H * H + H)
        return (conv + (self.ext_blocks + self.cls_blocks) * block
                + (H * self.vocab + self.vocab) + (H * self.speakers + self.speakers))

    def num_layernorms(self) -> int:
        return self.ext_blocks + self.cls_blocks


def _block_names(prefix):
    return [f"{prefix}.ln.gain", f"{prefix}.ln.bias", f"{prefix}.fc1.w",
            f"{prefix}.fc1.b", f"{prefix}.fc2.w", f"{prefix}.fc2.b"]


@dataclass
class SeqModel:
    arch: ArchSpec
    params: ParamStore

    def copy(self) -> "SeqModel":
        return SeqModel(self.arch, self.params.copy())

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params.names() if n.startswith(prefix)]


def build_model(arch: ArchSpec, seed: int) -> SeqModel:
    """Scaled-uniform init: weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases, unit gains."""
    arch.validate()
    rng = np.random.default_rng(seed)
    K, D, H, F = arch.kernel, arch.input_dim, arch.hidden, arch.ffn
    p = {}

    def unif(shape, fan_in):
        lim = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-lim, lim, size=shape)

    p["ext.conv1.w"] = unif((K, D, H), K * D)
    p["ext.conv1.b"] = np.zeros(H)
    p["ext.conv2.w"] = unif((K, H, H), K * H)
    p["ext.conv2.b"] = np.zeros(H)
    blocks = [f"ext.block{i}" for i in range(arch.ext_blocks)]
    blocks += [f"cls.block{i}" for i in range(arch.cls_blocks)]
    for pre in blocks:
        p[f"{pre}.ln.gain"] = np.ones(H)
        p[f"{pre}.ln.bias"] = np.zeros(H)
        p[f"{pre}.fc1.w"] = unif((H, F), H)
        p[f"{pre}.fc1.b"] = np.zeros(F)
        p[f"{pre}.fc2.w"] = unif((F, H), F)
        p[f"{pre}.fc2.b"] = np.zeros(H)
    p["cls.out.w"] = unif((H, arch.vocab), H)
    p["cls.out.b"] = np.zeros(arch.vocab)
    p["spk.out.w"] = unif((H, arch.speakers), H)
    p["spk.out.b"] = np.zeros(arch.speakers)
    return SeqModel(arch, ParamStore(p))


# ---------------------------------------------------------------------------
# batched forward / backward
# ---------------------------------------------------------------------------

def _block_fwd(P, pre, x, eps):
    h, c_ln = ad.layernorm_fwd(x, P[f"{pre}.ln.gain"], P[f"{pre}.ln.bias"], eps)
    h, c_fc1 = ad.affine_fwd(h, P[f"{pre}.fc1.w"], P[f"{pre}.fc1.b"])
    h, c_relu = ad.relu_fwd(h)
    h, c_fc2 = ad.affine_fwd(h, P[f"{pre}.fc2.w"], P[f"{pre}.fc2.b"])
    return x + h, (c_ln, c_fc1, c_relu, c_fc2)


def _block_bwd(g, cache, pre, grads):
    c_ln, c_fc1, c_relu, c_fc2 = cache
    dh, grads[f"{pre}.fc2.w"], grads[f"{pre}.fc2.b"] = ad.affine_bwd(g, c_fc2)
    dh = ad.relu_bwd(dh, c_relu)
    dh, grads[f"{pre}.fc1.w"], grads[f"{pre}.fc1.b"] = ad.affine_bwd(dh, c_fc1)
    dh, grads[f"{pre}.ln.gain"], grads[f"{pre}.ln.bias"] = ad.layernorm_bwd(dh, c_ln)
    return g + dh


def extractor_fwd(model: SeqModel, X):
    """X: [..., T, D] -> features [..., T', H] and a cache for backward."""
    a, P = model.arch, model.params.params
    if X.shape[-2] < a.min_input_frames():
        raise ad.SequenceTooShortError(
            f"{X.shape[-2]} frames, the conv front end needs {a.min_input_frames()}")
    h, c1 = ad.conv1d_fwd(X, P["ext.conv1.w"], a.stride1)
    h = h + P["ext.conv1.b"]
    h, r1 = ad.relu_fwd(h)
    h, c2 = ad.conv1d_fwd(h, P["ext.conv2.w"], a.stride2)
    h = h + P["ext.conv2.b"]
    h, r2 = ad.relu_fwd(h)
    blocks = []
    for i in range(a.ext_blocks):
        h, c = _block_fwd(P, f"ext.block{i}", h, a.ln_eps)
        blocks.append(c)
    return h, (c1, r1, c2, r2, blocks)


def extractor_bwd(model: SeqModel, g, cache, grads, need_input_grad: bool = False):
    c1, r1, c2, r2, blocks = cache
    for i in reversed(range(model.arch.ext_blocks)):
        g = _block_bwd(g, blocks[i], f"ext.block{i}", grads)
    g = ad.relu_bwd(g, r2)
    grads["ext.conv2.b"] = g.reshape(-1, g.shape[-1]).sum(axis=0)
    g, grads["ext.conv2.w"] = ad.conv1d_bwd(g, c2)
    g = ad.relu_bwd(g, r1)
    grads["ext.conv1.b"] = g.reshape(-1, g.shape[-1]).sum(axis=0)
    dx, grads["ext.conv1.w"] = ad.conv1d_bwd(g, c1)
    return dx if need_input_grad else None


def classifier_fwd(model: SeqModel, feats):
    """features [..., T', H] -> pre-softmax logits [..., T', V]."""
    a, P = model.arch, model.params.params
    if feats.shape[-1] != a.hidden:
        raise ad.DimensionError(f"features have dim {feats.shape[-1]}, classifier expects {a.hidden}")
    h, blocks = feats, []
    for i in range(a.cls_blocks):
        h, c = _block_fwd(P, f"cls.block{i}", h, a.ln_eps)
        blocks.append(c)
    logits, c_out = ad.affine_fwd(h, P["cls.out.w"], P["cls.out.b"])
    return logits, (blocks, c_out)


def classifier_bwd(model: SeqModel, g, cache, grads):
    blocks, c_out = cache
    g, grads["cls.out.w"], grads["cls.out.b"] = ad.affine_bwd(g, c_out)
    for i in reversed(range(model.arch.cls_blocks)):
        g = _block_bwd(g, blocks[i], f"cls.block{i}", grads)
    return g


def _frame_mask(lens, T):
    return (np.arange(T)[None, :] < np.asarray(lens)[:, None]).astype(np.float64)


def speaker_fwd(model: SeqModel, feats, frame_lens):
    """Mean-pool valid frames then affine; returns logits [B, S] and a cache."""
    P = model.params.params
    mask = _frame_mask(frame_lens, feats.shape[1])
    cnt = mask.sum(axis=1, keepdims=True)
    pooled = (feats * mask[:, :, None]).sum(axis=1) / cnt
    pooled = ad.grl_fwd(pooled)
    logits, c = ad.affine_fwd(pooled, P["spk.out.w"], P["spk.out.b"])
    return logits, (mask, cnt, c)


def speaker_bwd(g, cache, grads, lam):
    mask, cnt, c = cache
    dpool, grads["spk.out.w"], grads["spk.out.b"] = ad.affine_bwd(g, c)
    dpool = ad.grl_backward(dpool, lam)
    return (dpool / cnt)[:, None, :] * mask[:, :, None]


def pad_batch(xs):
    """List of [T_i, D] arrays -> zero-padded [B, Tmax, D] and lengths."""
    lens = np.array([x.shape[0] for x in xs], dtype=np.int64)
    out = np.zeros((len(xs), int(lens.max()), xs[0].shape[1]))
    for i, x in enumerate(xs):
        out[i, :x.shape[0]] = x
    return out, lens


def batch_loss_grads(model: SeqModel, X, lens, labels, *, speakers=None, lam: float = 0.0,
                     train_ext: bool = True, train_cls: bool = True):
    """CTC (+ speaker cross-entropy behind the GRL) on a padded batch.

    Returns ``(asr_loss, spk_loss, grads)``: mean losses over the batch and
    gradients of ``asr_loss + spk_loss`` with the extractor receiving the
    speaker gradient scaled by ``-lam``. Speaker terms are skipped when
    ``speakers`` is None. ``train_*`` flags only drop work; a frozen part's
    gradients are simply not returned.
    """
    B = X.shape[0]
    feats, ext_cache = extractor_fwd(model, X)
    flens = model.arch.out_frames(lens)
    logits, cls_cache = classifier_fwd(model, feats)
    losses, dlogits = ctc_batch(logits, flens, labels)
    grads: dict[str, np.ndarray] = {}
    dfeat = classifier_bwd(model, dlogits / B, cls_cache, grads)
    if not train_cls:
        grads = {}
    spk_loss = 0.0
    if speakers is not None:
        slogits, s_cache = speaker_fwd(model, feats, flens)
        slp, _ = ad.log_softmax_fwd(slogits)
        spk = np.asarray(speakers)
        spk_loss = float(-slp[np.arange(B), spk].mean())
        dsl = np.exp(slp)
        dsl[np.arange(B), spk] -= 1.0
        dfeat = dfeat + speaker_bwd(dsl / B, s_cache, grads, lam)
    if train_ext:
        extractor_bwd(model, dfeat, ext_cache, grads)
    return float(losses.mean()), spk_loss, grads


def classifier_loss_grads(model: SeqModel, F, flens, labels):
    """CTC on precomputed features; gradients for ``cls.*`` only."""
    logits, cache = classifier_fwd(model, F)
    losses, dlogits = ctc_batch(logits, flens, labels)
    grads: dict[str, np.ndarray] = {}
    classifier_bwd(model, dlogits / F.shape[0], cache, grads)
    return float(losses.mean()), grads


def batch_log_probs(model: SeqModel, X, lens):
    feats, _ = extractor_fwd(model, X)
    logits, _ = classifier_fwd(model, feats)
    return ad.log_softmax_fwd(logits)[0], model.arch.out_frames(lens)


# ---------------------------------------------------------------------------
# single-utterance API
# ---------------------------------------------------------------------------

def extract_features(model: SeqModel, x) -> np.ndarray:
    return extractor_fwd(model, np.asarray(x, dtype=np.float64))[0]


def classifier_forward(model: SeqModel, features) -> np.ndarray:
    logits, _ = classifier_fwd(model, np.asarray(features, dtype=np.float64))
    return ad.log_softmax_fwd(logits)[0]


def forward_asr(model: SeqModel, x) -> np.ndarray:
    """[T, D] input -> [T', V] log-probability lattice."""
    return classifier_forward(model, extract_features(model, x))


def forward_speaker(model: SeqModel, x) -> np.ndarray:
    """Speaker log-probabilities [S] from mean-pooled extractor features."""
    feats = extract_features(model, x)
    logits, _ = speaker_fwd(model, feats[None], [feats.shape[0]])
    return ad.log_softmax_fwd(logits)[0][0]


def partition_params(model: SeqModel, strategy: str) -> tuple[list[str], list[str]]:
    """Split parameter names into (personalized, global) for a strategy."""
    names = model.params.names()
    if strategy == "all_global":
        local = []
    elif strategy == "norm_layers":
        local = [n for n in names if ".ln." in n]
    elif strategy == "extractor":
        local = [n for n in names if n.startswith("ext.")]
    else:
        raise ConfigError(f"unknown partition strategy {strategy!r}")
    keep = set(local)
    return local, [n for n in names if n not in keep]
