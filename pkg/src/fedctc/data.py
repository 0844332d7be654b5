"""Synthetic non-IID "accented" corpus and its binary container.

Every token has a fixed prototype vector. An utterance renders its tokens as
prototypes held for a sampled number of frames, then applies the client's
accent (a linear map plus offset), the speaker's offset and frame noise.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"FDAT1"
SPLITS = ("train", "val", "test")


class DataFormatError(ValueError):
    def __init__(self, msg, offset=None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    clients: int = 3
    speakers_per_client: int = 5
    n_train: int = 300
    n_val: int = 60
    n_test: int = 60
    vocab: int = 13
    min_label: int = 2
    max_label: int = 6
    min_dur: int = 5
    max_dur: int = 7
    dim: int = 8
    accent_scale: float = 0.5
    offset_scale: float = 0.0
    dialect_scale: float = 0.0
    speaker_scale: float = 0.3
    noise_scale: float = 0.2
    domain: int = 0
    seed: int = 0

    def validate(self) -> "CorpusSpec":
        if self.clients < 1 or self.speakers_per_client < 1:
            raise DataError("need at least one client and one speaker per client")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise DataError("split sizes must be non-negative")
        if self.vocab < 3:
            raise DataError("vocab must hold blank plus two tokens (labels avoid adjacent repeats)")
        if not 1 <= self.min_label <= self.max_label:
            raise DataError("bad label length range")
        if not 1 <= self.min_dur <= self.max_dur:
            raise DataError("bad duration range")
        if self.dim < 1:
            raise DataError("feature dim must be positive")
        if min(self.accent_scale, self.offset_scale, self.dialect_scale,
               self.speaker_scale, self.noise_scale) < 0:
            raise DataError("scales must be non-negative")
        return self

    @property
    def total_speakers(self) -> int:
        return self.clients * self.speakers_per_client

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Utterance:
    features: np.ndarray
    labels: tuple
    speaker: int
    client: int
    uid: int

    def same_as(self, other: "Utterance") -> bool:
        return (self.labels == other.labels and self.speaker == other.speaker
                and self.client == other.client and self.uid == other.uid
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class ClientData:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return getattr(self, name)


@dataclass
class Corpus:
    spec: CorpusSpec
    clients: list

    def all_utterances(self):
        for c in self.clients:
            for s in SPLITS:
                yield s, c.split(s)


def _rng(spec: CorpusSpec, *key) -> np.random.Generator:
    return np.random.default_rng([spec.seed, *key])


def token_prototypes(spec: CorpusSpec) -> np.ndarray:
    """Unit-norm prototype per token plus the domain's dialect shift; row 0 (blank) unused.

    The base prototypes depend only on the seed, so source and target share
    them. The dialect shift is per token and common to every client of a domain.
    """
    P = _rng(spec, 0).normal(size=(spec.vocab, spec.dim))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    shift = _rng(spec, 4, spec.domain).normal(scale=1.0 / np.sqrt(spec.dim),
                                              size=P.shape)
    P = P + spec.dialect_scale * shift
    P[0] = 0.0
    return P


def client_accent(spec: CorpusSpec, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(A_k, c_k) with A_k = I + accent_scale*R_k and c_k = offset_scale*u_k."""
    rng = _rng(spec, 1, spec.domain, k)
    D = spec.dim
    R = rng.normal(scale=1.0 / np.sqrt(D), size=(D, D))
    u = rng.normal(scale=1.0 / np.sqrt(D), size=D)
    return np.eye(D) + spec.accent_scale * R, spec.offset_scale * u


def speaker_offsets(spec: CorpusSpec, k: int) -> np.ndarray:
    rng = _rng(spec, 2, spec.domain, k)
    o = rng.normal(size=(spec.speakers_per_client, spec.dim))
    o /= np.linalg.norm(o, axis=1, keepdims=True)
    return spec.speaker_scale * o


def _sample_label(rng, spec):
    L = int(rng.integers(spec.min_label, spec.max_label + 1))
    toks = [int(rng.integers(1, spec.vocab))]
    while len(toks) < L:
        # draw from the V-2 tokens that differ from the previous one
        t = int(rng.integers(1, spec.vocab - 1))
        toks.append(t if t < toks[-1] else t + 1)
    return tuple(toks)


def gen_corpus(spec: CorpusSpec) -> Corpus:
    spec.validate()
    protos = token_prototypes(spec)
    counts = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    clients, uid = [], 0
    for k in range(spec.clients):
        A, c = client_accent(spec, k)
        offs = speaker_offsets(spec, k)
        cd = ClientData()
        for si, split in enumerate(SPLITS):
            rng = _rng(spec, 3, spec.domain, k, si)
            out = cd.split(split)
            for _ in range(counts[split]):
                labels = _sample_label(rng, spec)
                durs = rng.integers(spec.min_dur, spec.max_dur + 1, size=len(labels))
                x = np.repeat(protos[list(labels)], durs, axis=0)
                spk = int(rng.integers(spec.speakers_per_client))
                x = x @ A.T + c + offs[spk]
                x = x + spec.noise_scale * rng.normal(size=x.shape)
                out.append(Utterance(x, labels, k * spec.speakers_per_client + spk, k, uid))
                uid += 1
        clients.append(cd)
    return Corpus(spec, clients)


def source_spec(spec: CorpusSpec) -> CorpusSpec:
    """Accent- and dialect-free source domain sharing the target's base prototypes."""
    return replace(spec, accent_scale=0.0, offset_scale=0.0, dialect_scale=0.0,
                   domain=spec.domain + 1)


def iid_merge(datasets) -> list:
    """Concatenate utterance lists, ordered by (client, uid); ids must not collide."""
    merged = [u for d in datasets for u in d]
    seen = set()
    for u in merged:
        if u.uid in seen:
            raise DataError(f"utterance id {u.uid} appears twice")
        seen.add(u.uid)
    return sorted(merged, key=lambda u: (u.client, u.uid))


# ---------------------------------------------------------------------------
# FDAT1 container
# ---------------------------------------------------------------------------

def encode_corpus(corpus: Corpus) -> bytes:
    spec_blob = json.dumps(corpus.spec.to_dict(), sort_keys=True).encode()
    parts = [DATASET_MAGIC, struct.pack("<I", len(spec_blob)), spec_blob]
    records = [(si, u) for _, c in enumerate(corpus.clients)
               for si, s in enumerate(SPLITS) for u in c.split(s)]
    parts.append(struct.pack("<I", len(records)))
    for si, u in records:
        T, D = u.features.shape
        parts.append(struct.pack("<IBIII", u.client, si, u.uid, u.speaker, len(u.labels)))
        parts.append(struct.pack(f"<{len(u.labels)}I", *u.labels))
        parts.append(struct.pack("<II", T, D))
        parts.append(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_corpus(blob: bytes) -> Corpus:
    if blob[:5] != DATASET_MAGIC:
        raise DataFormatError(f"bad magic {blob[:5]!r}", 0)
    pos = 5

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise DataFormatError("truncated dataset", pos)
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (n,) = take("<I")
    if pos + n > len(blob):
        raise DataFormatError("truncated spec header", pos)
    try:
        spec = CorpusSpec(**json.loads(blob[pos:pos + n]))
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"unreadable spec: {exc}", pos) from None
    pos += n
    clients = [ClientData() for _ in range(spec.clients)]
    (count,) = take("<I")
    for _ in range(count):
        client, si, uid, spk, L = take("<IBIII")
        labels = take(f"<{L}I")
        T, D = take("<II")
        if pos + 8 * T * D > len(blob):
            raise DataFormatError("truncated feature block", pos)
        x = np.frombuffer(blob, dtype="<f8", count=T * D, offset=pos).reshape(T, D).astype(np.float64)
        pos += 8 * T * D
        if client >= len(clients) or si >= len(SPLITS):
            raise DataFormatError(f"record references client {client} split {si}", pos)
        clients[client].split(SPLITS[si]).append(Utterance(x, tuple(labels), spk, client, uid))
    if pos != len(blob):
        raise DataFormatError("trailing bytes after last record", pos)
    return Corpus(spec, clients)


def save_dataset(corpus: Corpus, path) -> None:
    Path(path).write_bytes(encode_corpus(corpus))


def load_dataset(path) -> Corpus:
    return decode_corpus(Path(path).read_bytes())
