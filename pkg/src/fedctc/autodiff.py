"""Small fixed-topology differentiable kernel.

Every layer is a pair of functions: ``*_fwd`` returns the output and a cache,
``*_bwd`` maps the upstream gradient (and the cache) to input/parameter
gradients. Arrays are float64 numpy arrays; leading batch axes are allowed
wherever the docstring says ``[..., D]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

CHECKPOINT_MAGIC = b"FSIM1"


class DimensionError(ValueError):
    pass


class SequenceTooShortError(ValueError):
    pass


class OptimizerStateError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def affine_fwd(x, W, b):
    """out[..., j] = sum_i x[..., i] W[i, j] + b[j]."""
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b, (x, W)


def affine_bwd(g, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return g @ W.T, x2.T @ g2, g2.sum(axis=0)


def conv_out_len(T: int, K: int, stride: int) -> int:
    return (T - K) // stride + 1


def conv1d_fwd(x, kernels, stride: int = 1):
    """Valid convolution over the time axis.

    x is [..., T, Din], kernels [K, Din, Dout]; returns [..., T', Dout] with
    T' = (T - K) // stride + 1.
    """
    K, din, _ = kernels.shape
    T = x.shape[-2]
    if x.shape[-1] != din:
        raise DimensionError(f"conv1d: x{x.shape} kernels{kernels.shape}")
    if T < K:
        raise SequenceTooShortError(f"conv1d needs at least {K} frames, got {T}")
    T_out = conv_out_len(T, K, stride)
    out = 0.0
    for k in range(K):
        out = out + x[..., k:k + stride * (T_out - 1) + 1:stride, :] @ kernels[k]
    return out, (x, kernels, stride)


def conv1d_bwd(g, cache):
    x, kernels, stride = cache
    K, din, dout = kernels.shape
    T_out = g.shape[-2]
    dx = np.zeros_like(x)
    dk = np.empty_like(kernels)
    g2 = g.reshape(-1, dout)
    for k in range(K):
        sl = slice(k, k + stride * (T_out - 1) + 1, stride)
        xs = x[..., sl, :]
        dk[k] = xs.reshape(-1, din).T @ g2
        dx[..., sl, :] += g @ kernels[k].T
    return dx, dk


def layernorm_fwd(x, gain, bias, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layernorm_bwd(g, cache):
    xhat, inv, gain = cache
    D = xhat.shape[-1]
    g2 = g.reshape(-1, D)
    dgain = (g2 * xhat.reshape(-1, D)).sum(axis=0)
    dbias = g2.sum(axis=0)
    gx = g * gain
    dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dbias


def relu_fwd(x):
    mask = x > 0
    return x * mask, mask


def relu_bwd(g, mask):
    return g * mask


def log_softmax_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    return out, out


def log_softmax_bwd(g, logp):
    return g - np.exp(logp) * g.sum(axis=-1, keepdims=True)


def grl_fwd(x):
    """Gradient reversal: identity on the way up."""
    return x


def grl_backward(upstream, lam: float):
    """Gradient reversal: scale by -lam on the way down."""
    return -lam * np.asarray(upstream, dtype=np.float64)


# ---------------------------------------------------------------------------
# parameter store and optimizers
# ---------------------------------------------------------------------------

@dataclass
class ParamStore:
    """Named float64 parameters with optional gradients and a step counter."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.params = {k: np.asarray(self.params[k], dtype=np.float64)
                       for k in sorted(self.params)}

    def names(self) -> list[str]:
        return sorted(self.params)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()}, step=self.step)

    def subset(self, names: Iterable[str]) -> "ParamStore":
        return ParamStore({k: self.params[k].copy() for k in names})

    def update_from(self, other: "ParamStore") -> None:
        for k, v in other.params.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise DimensionError(f"cannot load parameter {k!r}")
            self.params[k] = v.copy()

    def zero_grad(self) -> None:
        self.grads = {}

    def num_values(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def flatten(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([self.params[k].ravel() for k in self.names()])

    def unflatten(self, vec: np.ndarray) -> "ParamStore":
        out, i = {}, 0
        for k in self.names():
            n = self.params[k].size
            out[k] = np.array(vec[i:i + n], dtype=np.float64).reshape(self.params[k].shape)
            i += n
        if i != len(vec):
            raise DimensionError(f"vector has {len(vec)} values, store needs {i}")
        return ParamStore(out, step=self.step)

    def equals(self, other: "ParamStore") -> bool:
        return (self.names() == other.names()
                and all(np.array_equal(self.params[k], other.params[k]) for k in self.names()))


def _trainable_names(store: ParamStore, names):
    names = store.names() if names is None else sorted(names)
    missing = [n for n in names if n not in store.grads]
    if missing:
        raise OptimizerStateError(f"missing gradients for {missing[:3]}")
    return names


def exact_mean(arrays) -> np.ndarray:
    """Mean as ``a0 + sum(ai - a0) / n``; identical inputs return ``a0`` bit for bit."""
    ref = arrays[0]
    acc = np.zeros_like(ref, dtype=np.float64)
    for a in arrays[1:]:
        acc = acc + (a - ref)
    return ref + acc / len(arrays)


def sgd_step(store: ParamStore, lr: float, names=None) -> ParamStore:
    for n in _trainable_names(store, names):
        store.params[n] = store.params[n] - lr * store.grads[n]
    store.step += 1
    return store


@dataclass
class OptimState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def adam_step(store: ParamStore, opt: OptimState, names=None) -> ParamStore:
    """Bias-corrected Adam update on ``names`` (default: every parameter)."""
    names = _trainable_names(store, names)
    opt.t += 1
    c1 = 1.0 - opt.beta1 ** opt.t
    c2 = 1.0 - opt.beta2 ** opt.t
    for n in names:
        g = store.grads[n]
        m = opt.m.get(n)
        if m is None:
            m = opt.m[n] = np.zeros_like(g)
            opt.v[n] = np.zeros_like(g)
        v = opt.v[n]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        store.params[n] = store.params[n] - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    store.step += 1
    return store


def optimizer_step(store: ParamStore, opt: OptimState, names=None) -> ParamStore:
    if opt.kind == "sgd":
        return sgd_step(store, opt.lr, names)
    return adam_step(store, opt, names)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def rel_error(a, b) -> float:
    """||a - b|| / (||a|| + ||b||); zero when both are zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_check(closure: Callable[[ParamStore], tuple[float, dict]], store: ParamStore,
               h: float = 1e-5) -> float:
    """Max relative error between ``closure``'s analytic gradients and central differences.

    ``closure(store)`` returns ``(loss, grads)``; it must not mutate parameters.
    """
    _, grads = closure(store)
    worst = 0.0
    for name in store.names():
        num = numeric_grad(lambda: closure(store)[0], store.params[name], h)
        ana = grads.get(name, np.zeros_like(num))
        worst = max(worst, rel_error(ana, num))
    return worst


# ---------------------------------------------------------------------------
# FSIM1 checkpoint encoding
# ---------------------------------------------------------------------------

def encode_params(store: ParamStore, names=None) -> bytes:
    names = store.names() if names is None else sorted(names)
    parts = [CHECKPOINT_MAGIC]
    for n in names:
        arr = store.params[n]
        nb = n.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def encoded_param_size(store: ParamStore, names=None) -> int:
    names = store.names() if names is None else names
    total = len(CHECKPOINT_MAGIC)
    for n in names:
        arr = store.params[n]
        total += 4 + len(n.encode("utf-8")) + 4 + 4 * arr.ndim + 8 * arr.size
    return total


def decode_params(blob: bytes) -> ParamStore:
    if blob[:5] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:5]!r}")
    pos, params = 5, {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if pos + nlen > len(blob):
                raise struct.error("name overruns buffer")
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 8 * n > len(blob):
                raise struct.error("values overrun buffer")
            params[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint at byte {pos}: {exc}") from None
    return ParamStore(params)


def save_checkpoint(store: ParamStore, path) -> None:
    Path(path).write_bytes(encode_params(store))


def load_checkpoint(path) -> ParamStore:
    return decode_params(Path(path).read_bytes())
