import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedctc.autodiff import DimensionError, ParamStore
from fedctc.ctc import ctc_loss
from fedctc.data import CorpusSpec, gen_corpus
from fedctc.model import ArchSpec, build_model, forward_asr
from fedctc.pseudo import (AugmentSpec, TeacherState, augment, ema_update, gen_pseudo_label,
                           gen_pseudo_labels, pl_loss, usable, vanilla_pl)
from fedctc.training import Node, TrainSettings, train_epoch

ARCH = ArchSpec(input_dim=4, hidden=6, ffn=6, vocab=5, speakers=2)


def _scalar(v):
    return ParamStore({"w": np.array([float(v)])})


def test_ema_two_step_trace():
    t = TeacherState(_scalar(0.0), 0.9)
    for _ in range(2):
        ema_update(t, _scalar(1.0))
    assert t.params["w"][0] == pytest.approx(0.19, abs=1e-15)


def test_ema_edge_decays():
    frozen = TeacherState(_scalar(0.3), 1.0)
    for _ in range(50):
        ema_update(frozen, _scalar(7.0))
    assert frozen.params["w"][0] == 0.3
    copy = TeacherState(_scalar(0.3), 0.0)
    ema_update(copy, _scalar(7.0))
    assert copy.params["w"][0] == 7.0


def test_ema_rejects_mismatch():
    t = TeacherState(_scalar(0.0), 0.5)
    with pytest.raises(DimensionError):
        ema_update(t, ParamStore({"v": np.zeros(1)}))
    with pytest.raises(DimensionError):
        ema_update(t, ParamStore({"w": np.zeros(2)}))
    with pytest.raises(ValueError):
        TeacherState(_scalar(0.0), 1.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_ema_is_elementwise(alpha, seed):
    """Updating a two-tensor store equals updating each tensor on its own."""
    rng = np.random.default_rng(seed)
    xa, xb, ta, tb = (rng.normal(size=s) for s in [(2, 3), 4, (2, 3), 4])
    both = TeacherState(ParamStore({"a": xa.copy(), "b": xb.copy()}), alpha)
    ema_update(both, ParamStore({"a": ta, "b": tb}))
    only_a = TeacherState(ParamStore({"a": xa.copy()}), alpha)
    ema_update(only_a, ParamStore({"a": ta}))
    assert np.array_equal(both.params["a"], only_a.params["a"])
    np.testing.assert_allclose(both.params["b"], alpha * xb + (1 - alpha) * tb, atol=1e-15)


def test_augment_zero_fractions_is_identity():
    x = np.random.default_rng(0).normal(size=(9, 8))
    assert np.array_equal(augment(x, AugmentSpec(0.0, 0.0), np.random.default_rng(1)), x)


def test_augment_counts():
    x = np.ones((10, 8))
    out = augment(x, AugmentSpec(0.0, 0.5, mask_value=-3.0), np.random.default_rng(2))
    assert np.sum(np.all(out == -3.0, axis=0)) == 4
    out = augment(x, AugmentSpec(0.2, 0.0), np.random.default_rng(2))
    assert np.sum(np.all(out == 0.0, axis=1)) == 2
    out = augment(x, AugmentSpec(0.25, 0.0), np.random.default_rng(2))
    assert np.sum(np.all(out == 0.0, axis=1)) == math.ceil(0.25 * 10)
    assert out.shape == x.shape and np.all(x == 1)


def test_augment_is_seeded():
    x = np.random.default_rng(3).normal(size=(12, 8))
    a = augment(x, AugmentSpec(), np.random.default_rng(5))
    b = augment(x, AugmentSpec(), np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_augment_spec_bounds():
    with pytest.raises(ValueError):
        AugmentSpec(1.0, 0.1)


def test_pseudo_label_is_teacher_greedy_decode():
    model = build_model(ARCH, 1)
    x = np.random.default_rng(4).normal(size=(15, 4))
    lab = gen_pseudo_label(model, x)
    assert lab == gen_pseudo_label(model, x)
    assert gen_pseudo_labels(model, [x, x[:9]])[0] == lab


def test_blank_dominant_teacher_gives_empty_label():
    model = build_model(ARCH, 1)
    model.params.params["cls.out.b"][0] = 100.0
    assert gen_pseudo_label(model, np.ones((11, 4))) == []
    assert not usable([], 4)


def test_pl_loss_equals_ctc_on_masked_input():
    model = build_model(ARCH, 2)
    x = np.random.default_rng(6).normal(size=(14, 4))
    spec = AugmentSpec(0.2, 0.25)
    loss = pl_loss(model, x, spec, [1, 2], np.random.default_rng(9))
    xa = augment(x, spec, np.random.default_rng(9))
    assert loss == ctc_loss(forward_asr(model, xa), [1, 2])


def test_pl_loss_without_masking_is_self_supervised_ctc():
    model = build_model(ARCH, 2)
    x = np.random.default_rng(7).normal(size=(14, 4))
    label = gen_pseudo_label(model, x) or [1]
    loss = pl_loss(model, x, AugmentSpec(0.0, 0.0), label, np.random.default_rng(0))
    assert loss == ctc_loss(forward_asr(model, x), label)


def test_pl_loss_skips_unusable_labels():
    model = build_model(ARCH, 2)
    x = np.zeros((9, 4))  # 2 frames after the front end
    assert pl_loss(model, x, AugmentSpec(), [], np.random.default_rng(0)) is None
    assert pl_loss(model, x, AugmentSpec(), [1, 2, 3], np.random.default_rng(0)) is None


def test_vanilla_labels_once_and_counts_empty():
    model = build_model(ARCH, 3)
    corpus = gen_corpus(CorpusSpec(clients=1, n_train=12, n_val=0, n_test=0, vocab=5, dim=4))
    a, b = vanilla_pl(model, corpus.clients[0].train), vanilla_pl(model, corpus.clients[0].train)
    assert a.labels == b.labels
    assert a.skipped == sum(1 for l in a.labels if not l)


def test_frozen_teacher_continuous_pl_equals_vanilla():
    """With decay 1 the teacher never moves, so its labels are the vanilla labels."""
    spec = CorpusSpec(clients=1, n_train=20, n_val=0, n_test=0, vocab=5, dim=4)
    train = gen_corpus(spec).clients[0].train
    base = build_model(ARCH, 4)
    st_ = TrainSettings(ema_decay=1.0, batch_size=8)
    names = base.names("ext.") + base.names("cls.")
    cont = Node.create(base, st_, [1])
    fixed = Node.create(base, st_, [1])
    labels = vanilla_pl(base, train).labels
    for _ in range(2):
        train_epoch(cont, train, st_, names)
        train_epoch(fixed, train, st_, names, labels=labels)
    assert cont.model.params.equals(fixed.model.params)
    assert cont.teacher.params.equals(base.params)


def test_labels_come_from_clean_input():
    """The teacher's label does not depend on the student's masking draw."""
    model = build_model(ARCH, 5)
    x = np.random.default_rng(8).normal(size=(16, 4))
    for seed in range(3):
        augment(x, AugmentSpec(), np.random.default_rng(seed))
        assert gen_pseudo_label(model, x) == gen_pseudo_label(model, x.copy())
