import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conda_cl import autodiff as ad
from conda_cl.adaptation import (AdaptConfig, TeacherState, adapt_step, adaptation_objective,
                                 bml_loss, cross_entropy, ema_update, entropy, init_teacher,
                                 kl_divergence, make_pseudo_labels, pseudo_labels_from_probs,
                                 run_adapt_stage)
from conda_cl.datagen import DataVault, DomainDataset
from conda_cl.errors import BadConfig, BadShape, InfiniteKL
from conda_cl.rng import Rng
from conda_cl.segmenter import IGNORE_ID, SegNetConfig, init_segnet
from conda_cl.selftest import kl_bound_sweep, random_pair, small_flow


def _store(value):
    s = ad.ParamStore()
    s.add("w", np.array(value, dtype=float))
    return s


def test_ema_examples():
    student = _store([4.0])
    assert ema_update(TeacherState({"w": np.array([2.0])}, 0.5), student).params["w"][0] == 3.0
    assert ema_update(TeacherState({"w": np.array([2.0])}, 1.0), student).params["w"][0] == 2.0
    assert ema_update(TeacherState({"w": np.array([2.0])}, 0.0), student).params["w"][0] == 4.0
    with pytest.raises(BadShape):
        ema_update(TeacherState({"w": np.zeros(2)}, 0.5), student)


def test_pseudo_label_hand_case():
    probs = np.array([[0.95, 0.6], [0.05, 0.4]]).reshape(1, 2, 1, 2)
    pl = pseudo_labels_from_probs(probs, 0.9)
    assert pl.labels.tolist() == [[[0, IGNORE_ID]]]
    assert pl.mask.tolist() == [[[True, False]]]


def test_pseudo_label_thresholds():
    cfg = SegNetConfig(n_classes=3, widths=[4, 4])
    params = init_segnet(cfg, Rng(0))
    for k in params:
        params[k].value = np.zeros(params[k].shape)
    teacher = init_teacher(params, 0.99)
    images = Rng(1).uniform((2, 3, 4, 4))
    assert not make_pseudo_labels(teacher, images, 1.0, cfg).mask.any()
    assert make_pseudo_labels(teacher, images, 1e-9, cfg).mask.all()
    with pytest.raises(BadConfig):
        pseudo_labels_from_probs(np.ones((1, 2, 1, 1)) / 2, 0.0)


def test_kl_examples():
    assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert math.isclose(kl_divergence([1.0, 0.0], [0.5, 0.5]), math.log(2), rel_tol=0, abs_tol=1e-15)
    with pytest.raises(InfiniteKL):
        kl_divergence([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(BadShape):
        kl_divergence([1.0], [0.5, 0.5])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**63))
def test_cross_entropy_decomposes_into_kl_plus_entropy(seed):
    p, q = random_pair(Rng(seed))
    ce, kl, h = cross_entropy(p, q), kl_divergence(p, q), entropy(p)
    assert kl >= -1e-12 and h >= -1e-12
    assert abs(ce - kl - h) <= 1e-12
    assert ce >= kl - 1e-12


def test_kl_bound_sweep_1000_pairs():
    h, kl, gap = kl_bound_sweep(Rng(7), 1000)
    assert h >= -1e-12 and kl >= -1e-12 and gap >= -1e-12


def test_objective_examples():
    ce, bml = ad.constant(2.0), ad.constant(10.0)
    assert float(adaptation_objective(ce, bml, 0.005).value) == pytest.approx(2.05, abs=1e-15)
    assert adaptation_objective(ce, bml, 0.0).value == ce.value
    with pytest.raises(BadConfig):
        adaptation_objective(ce, bml, -0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(-1e3, 1e3), st.floats(0, 10))
def test_objective_linear_in_lambda(l1, l2, b, c):
    ce, bml = ad.constant(c), ad.constant(b)
    lhs = adaptation_objective(ce, bml, l1).value + adaptation_objective(ce, bml, l2).value - c
    assert abs(lhs - adaptation_objective(ce, bml, l1 + l2).value) <= 1e-12 * max(1.0, abs(b))


def test_bml_loss_semantics():
    rng = Rng(9)
    flow = small_flow(2, 4, 4, rng, scales=1, blocks=2, hidden=4)
    flow.freeze()
    p = rng.uniform((1, 2, 4, 4))
    p = p / p.sum(axis=1, keepdims=True)
    single = float(bml_loss(ad.constant(p), flow).value)
    double = float(bml_loss(ad.constant(np.concatenate([p, p])), flow).value)
    assert single == pytest.approx(double, abs=1e-12)
    with pytest.raises(BadShape):
        bml_loss(ad.constant(np.ones((1, 3, 4, 4)) / 3), flow)


def test_bml_gradient_reaches_probs_not_flow():
    rng = Rng(10)
    flow = small_flow(2, 4, 4, rng, scales=1, blocks=2, hidden=4)
    flow.freeze()
    logits = ad.variable(rng.normal((2, 2, 4, 4)))
    ad.backward(bml_loss(ad.softmax_channels(logits), flow))
    assert np.any(logits.grad != 0)
    assert all(np.all(flow.store[k].grad == 0) for k in flow.store)


def _vault(n_classes=3, size=8):
    rng = Rng(12)
    data = {}
    for d in ("src", "t1", "t2"):
        labels = rng.integers(0, n_classes, size=(8, size, size)).astype(np.uint8)
        images = rng.integers(0, 256, size=(8, 3, size, size)).astype(np.uint8)
        for s in ("train", "val"):
            data[(d, s)] = DomainDataset(images, labels, d, s)
    return DataVault(data, ["src", "t1", "t2"])


def _setup(lam):
    seg_cfg = SegNetConfig(n_classes=3, widths=[4, 4])
    student = init_segnet(seg_cfg, Rng(0))
    flow = small_flow(3, 8, 8, Rng(1), scales=1, blocks=2, hidden=4)
    flow.freeze()
    cfg = AdaptConfig(lam=lam, tau=0.34, epochs_per_stage=2, batch=4)
    return seg_cfg, student, flow, cfg


def test_run_adapt_stage_reads_only_current_target():
    seg_cfg, student, flow, cfg = _setup(0.005)
    vault = _vault()
    teacher = init_teacher(student, cfg.alpha)
    with pytest.raises(BadConfig):
        run_adapt_stage(student, teacher, flow, vault, cfg, seg_cfg, Rng(2))
    for _ in range(2):
        vault.advance()
        student, teacher = run_adapt_stage(student, teacher, flow, vault, cfg, seg_cfg, Rng(2))
    train_reads = {k: v for k, v in vault.audit.items() if k[3] == "train" and k[0] >= 1}
    assert {(k[0], k[1]) for k in train_reads} == {(1, "t1"), (2, "t2")}
    assert vault.source_train_reads_after_stage0() == 0


def test_run_adapt_stage_is_deterministic():
    out = []
    for _ in range(2):
        seg_cfg, student, flow, cfg = _setup(0.005)
        vault = _vault()
        vault.advance()
        s, t = run_adapt_stage(student, init_teacher(student, cfg.alpha), flow, vault, cfg,
                               seg_cfg, Rng(3))
        out.append((s.snapshot(), t.params))
    assert all(np.array_equal(out[0][0][k], out[1][0][k]) for k in out[0][0])
    assert all(np.array_equal(out[0][1][k], out[1][1][k]) for k in out[0][1])


def test_alpha_one_keeps_teacher_frozen():
    seg_cfg, student, flow, cfg = _setup(0.0)
    cfg.alpha = 1.0
    vault = _vault()
    vault.advance()
    teacher = init_teacher(student, 1.0)
    before = {k: v.copy() for k, v in teacher.params.items()}
    student, teacher = run_adapt_stage(student, teacher, None, vault, cfg, seg_cfg, Rng(4))
    assert all(np.array_equal(before[k], teacher.params[k]) for k in before)
    assert any(not np.array_equal(before[k], student[k].value) for k in before)


def test_step_without_confident_pixels():
    seg_cfg, student, flow, cfg = _setup(0.005)
    cfg.tau = 1.0
    teacher = init_teacher(student, cfg.alpha)
    images = Rng(5).uniform((2, 3, 8, 8))
    before = student.snapshot()
    _, stats = adapt_step(student, teacher, flow, images, cfg, seg_cfg)
    assert stats["kept"] == 0.0 and stats["ce"] == 0.0
    assert any(not np.array_equal(before[k], student[k].value) for k in before)


def test_config_validation():
    for bad in (dict(lam=-1), dict(tau=0), dict(tau=1.5), dict(alpha=2), dict(pseudo_label_every="x")):
        with pytest.raises(BadConfig):
            AdaptConfig(**bad).validate()


def test_epoch_pseudo_labels_run():
    seg_cfg, student, flow, cfg = _setup(0.005)
    cfg.pseudo_label_every = "epoch"
    vault = _vault()
    vault.advance()
    run_adapt_stage(student, init_teacher(student, cfg.alpha), flow, vault, cfg, seg_cfg, Rng(6))
