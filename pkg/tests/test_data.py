from dataclasses import replace

import numpy as np
import pytest

from fedctc import data as D
from fedctc.ctc import is_feasible
from fedctc.metrics import speaker_probe
from fedctc.model import ArchSpec

SMALL = D.CorpusSpec(n_train=10, n_val=4, n_test=4, seed=3)


def test_generation_is_deterministic():
    a, b = D.gen_corpus(SMALL), D.gen_corpus(SMALL)
    assert D.encode_corpus(a) == D.encode_corpus(b)
    c = D.gen_corpus(replace(SMALL, seed=4))
    assert D.encode_corpus(a) != D.encode_corpus(c)


def test_utterance_invariants():
    corpus = D.gen_corpus(SMALL)
    uids = set()
    for k, cd in enumerate(corpus.clients):
        for split in D.SPLITS:
            for u in cd.split(split):
                assert u.client == k
                assert u.speaker // SMALL.speakers_per_client == k
                assert SMALL.min_label <= len(u.labels) <= SMALL.max_label
                assert all(1 <= t < SMALL.vocab for t in u.labels)
                assert all(a != b for a, b in zip(u.labels, u.labels[1:]))
                L = len(u.labels)
                assert SMALL.min_dur * L <= u.features.shape[0] <= SMALL.max_dur * L
                assert u.features.shape[1] == SMALL.dim
                assert u.uid not in uids
                uids.add(u.uid)


def test_every_label_fits_the_default_front_end():
    arch = ArchSpec()
    for u in D.iid_merge([c.train for c in D.gen_corpus(SMALL).clients]):
        assert is_feasible(int(arch.out_frames(u.features.shape[0])), list(u.labels))


def test_zero_shift_is_iid():
    """With every scale at zero, clients render labels identically."""
    spec = replace(SMALL, accent_scale=0.0, offset_scale=0.0, speaker_scale=0.0, noise_scale=0.0)
    protos = D.token_prototypes(spec)
    for cd in D.gen_corpus(spec).clients:
        for u in cd.train:
            frames = {tuple(np.round(r, 12)) for r in u.features}
            assert frames <= {tuple(np.round(protos[t], 12)) for t in u.labels}
    for k in range(spec.clients):
        A, c = D.client_accent(spec, k)
        assert np.array_equal(A, np.eye(spec.dim)) and not c.any()


def test_accent_matrix_form():
    A, c = D.client_accent(D.CorpusSpec(accent_scale=0.5), 1)
    A0, _ = D.client_accent(D.CorpusSpec(accent_scale=0.0), 1)
    R = (A - np.eye(8)) / 0.5
    np.testing.assert_array_equal(A0, np.eye(8))
    assert np.abs(R).max() > 0 and not c.any()


def test_source_domain_shares_prototypes():
    spec = D.CorpusSpec(dialect_scale=0.4)
    src = D.source_spec(spec)
    assert src.accent_scale == src.dialect_scale == src.offset_scale == 0
    base = D.token_prototypes(replace(spec, dialect_scale=0.0))
    np.testing.assert_array_equal(D.token_prototypes(src), base)
    assert not np.array_equal(D.token_prototypes(spec), base)


def test_invalid_spec():
    for bad in (dict(clients=0), dict(noise_scale=-1.0), dict(vocab=2), dict(min_label=3, max_label=2)):
        with pytest.raises(D.DataError):
            D.gen_corpus(replace(SMALL, **bad))


def test_client_accents_are_linearly_separable_frames():
    """A frame-level linear probe tells client 0 from client 1 at accent 0.5."""
    accs = []
    for seed in range(5):
        c = D.gen_corpus(D.CorpusSpec(seed=seed, n_train=100, n_val=0, n_test=0))
        X0 = np.concatenate([u.features for u in c.clients[0].train])
        X1 = np.concatenate([u.features for u in c.clients[1].train])
        y = np.r_[np.zeros(len(X0)), np.ones(len(X1))]
        accs.append(speaker_probe(np.concatenate([X0, X1]), y, seed=seed, steps=200))
    assert np.mean(accs) > 0.9, accs


def test_dataset_roundtrip(tmp_path):
    corpus = D.gen_corpus(replace(SMALL, clients=2, n_train=3, n_val=1, n_test=1))
    path = tmp_path / "d.fdat"
    D.save_dataset(corpus, path)
    back = D.load_dataset(path)
    assert back.spec == corpus.spec
    for a, b in zip(corpus.clients, back.clients):
        for s in D.SPLITS:
            assert len(a.split(s)) == len(b.split(s))
            assert all(x.same_as(y) for x, y in zip(a.split(s), b.split(s)))
    assert D.encode_corpus(back) == path.read_bytes()


def test_empty_split_roundtrip():
    corpus = D.gen_corpus(replace(SMALL, n_val=0))
    back = D.decode_corpus(D.encode_corpus(corpus))
    assert all(cd.val == [] for cd in back.clients)
    assert len(back.clients[0].train) == SMALL.n_train


def test_truncated_and_bad_magic():
    blob = D.encode_corpus(D.gen_corpus(replace(SMALL, n_train=2, n_val=0, n_test=0)))
    with pytest.raises(D.DataFormatError) as err:
        D.decode_corpus(blob[:-5])
    assert err.value.offset is not None
    with pytest.raises(D.DataFormatError):
        D.decode_corpus(b"NOPE!" + blob[5:])
    with pytest.raises(D.DataFormatError):
        D.decode_corpus(blob + b"\x00")


def test_iid_merge():
    corpus = D.gen_corpus(SMALL)
    merged = D.iid_merge([c.train for c in corpus.clients])
    assert len(merged) == 3 * SMALL.n_train
    assert [(u.client, u.uid) for u in merged] == sorted((u.client, u.uid) for u in merged)
    for k, cd in enumerate(corpus.clients):
        assert [u.uid for u in merged if u.client == k] == [u.uid for u in cd.train]
    with pytest.raises(D.DataError):
        D.iid_merge([corpus.clients[0].train, corpus.clients[0].train[:1]])
