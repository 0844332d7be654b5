from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedctc.data import Utterance
from fedctc.metrics import (WerReport, diagonal_dominant, edit_distance, eval_model,
                            personalization_matrix, speaker_probe)
from fedctc.model import ArchSpec, build_model

tokens = st.lists(st.integers(1, 3), max_size=6)


def brute_distance(a, b):
    """Plain recursive Levenshtein distance (exponential, tiny inputs only)."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j + 1) + (a[i] != b[j]), go(i + 1, j) + 1, go(i, j + 1) + 1)

    return go(0, 0)


def test_identical_sequences():
    r = edit_distance([1, 2, 3], [1, 2, 3])
    assert r.wer == 0 and r.errors == 0


def test_single_deletion():
    r = edit_distance([1, 2, 3], [1, 3])
    assert (r.substitutions, r.insertions, r.deletions) == (0, 0, 1)
    assert r.wer == pytest.approx(1 / 3)


def test_substitution_preferred_over_insert_delete():
    r = edit_distance([1, 2], [1, 3])
    assert (r.substitutions, r.insertions, r.deletions) == (1, 0, 0)


def test_empty_reference_counts_insertions():
    r = edit_distance([], [1, 2])
    assert r.insertions == 2 and r.ref_length == 0 and r.wer == 2.0


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_distance_matches_recursion(a, b):
    assert edit_distance(a, b).errors == brute_distance(a, b)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 3), max_size=8), st.lists(st.integers(1, 3), max_size=8),
       st.lists(st.integers(1, 3), max_size=8))
def test_metric_axioms(a, b, c):
    d = lambda x, y: edit_distance(x, y).errors
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c)
    assert (d(a, b) == 0) == (a == b)


def _utts(rng, n, T=12, D=8):
    return [Utterance(rng.normal(size=(T, D)), (1, 2), 0, 0, i) for i in range(n)]


def test_eval_all_empty_hypotheses_is_all_deletions():
    model = build_model(ArchSpec(), 0)
    model.params.params["cls.out.b"][0] = 100.0
    utts = _utts(np.random.default_rng(0), 5)
    r = eval_model(model, utts)
    assert r.wer == 1.0 and r.deletions == 10


def test_eval_perfect_model():
    """A model whose output ignores the input and spells (1, 2) exactly."""
    model = build_model(ArchSpec(), 0)
    for n in model.names("cls.out."):
        model.params.params[n][...] = 0.0
    model.params.params["cls.out.b"][1] = 50.0
    utts = [Utterance(np.zeros((12, 8)), (1,), 0, 0, i) for i in range(3)]
    assert eval_model(model, utts).wer == 0.0


def test_eval_micro_average_and_order_invariance():
    model = build_model(ArchSpec(), 1)
    rng = np.random.default_rng(2)
    utts = [Utterance(rng.normal(size=(int(rng.integers(12, 30)), 8)),
                      tuple(int(t) for t in rng.integers(1, 13, size=int(rng.integers(1, 4)))),
                      0, 0, i) for i in range(8)]
    total = eval_model(model, utts)
    parts = [eval_model(model, [u]) for u in utts]
    assert total.errors == sum(p.errors for p in parts)
    assert total.ref_length == sum(p.ref_length for p in parts)
    assert eval_model(model, utts[::-1]) == total


def test_personalization_matrix_shapes():
    rng = np.random.default_rng(3)
    m = build_model(ArchSpec(), 2)
    sets = [_utts(rng, 3), _utts(rng, 4)]
    M = personalization_matrix([m, m], sets)
    assert M.shape == (2, 2) and np.all(M >= 0)
    assert np.array_equal(M[0], M[1])
    one = personalization_matrix([m], sets[:1])
    assert one[0, 0] == eval_model(m, sets[0]).wer


def test_diagonal_dominance():
    assert diagonal_dominant(np.array([[0.1, 0.3, 0.2], [0.4, 0.2, 0.5], [0.3, 0.3, 0.1]]))
    assert not diagonal_dominant(np.array([[0.5, 0.1], [0.1, 0.05]]))
    assert diagonal_dominant(np.array([[0.3]]))


def test_wer_report_addition():
    r = WerReport(1, 2, 3, 10) + WerReport(1, 0, 0, 5)
    assert r == WerReport(2, 2, 3, 15)
    assert r.as_dict()["wer"] == pytest.approx(7 / 15)


def test_probe_separable_codes():
    spk = np.repeat(np.arange(5), 20)
    assert speaker_probe(np.eye(5)[spk], spk) == pytest.approx(1.0)


def test_probe_noise_is_chance():
    accs = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        spk = rng.integers(0, 5, size=200)
        accs.append(speaker_probe(rng.normal(size=(200, 16)), spk, seed=seed))
    assert abs(np.mean(accs) - 0.2) <= 0.1
    assert all(0.0 <= a <= 1.0 for a in accs)


def test_probe_pools_frames_and_is_deterministic():
    rng = np.random.default_rng(4)
    feats = [rng.normal(size=(int(rng.integers(3, 8)), 4)) for _ in range(30)]
    spk = np.arange(30) % 3
    a = speaker_probe(feats, spk, seed=1)
    assert a == speaker_probe(feats, spk, seed=1)
    pooled = np.stack([f.mean(axis=0) for f in feats])
    assert a == speaker_probe(pooled, spk, seed=1)


def test_probe_needs_two_speakers():
    with pytest.raises(ValueError):
        speaker_probe(np.zeros((4, 2)), [1, 1, 1, 1])
