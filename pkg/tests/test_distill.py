from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxkd.distill import (
    DistillConfig,
    hier_loss,
    kd_loss,
    load_checkpoint,
    save_checkpoint,
    soften,
    train,
    write_loss_history,
)
from taxkd.errors import ConfigError, ShapeError, TrainingError, UnknownLabelError
from taxkd.neuralnet import grad_check
from taxkd.taxonomy import RankedPath, build_tree, leaf_probabilities, path_log_likelihood

from conftest import tree_and_logits

LEAVES = ["d__A;p__A1;s__a", "d__A;p__A1;s__b", "d__A;p__A2;s__c", "d__B;p__B1;s__d"]


def toy_data(seed=0, n=30, width=10, emb_dim=6):
    rng = np.random.default_rng(seed)
    choices = LEAVES + ["d__A;p__A1", "d__B", ""]
    labels = [RankedPath.parse(choices[int(i)]) for i in rng.integers(0, len(choices), size=n)]
    tree = build_tree(LEAVES + labels)
    return tree, rng.normal(size=(n, width)), rng.normal(size=(n, emb_dim)), labels


def small_config(**kw):
    base = dict(epochs=3, batch_size=8, student_hidden=(12,), seed=0)
    base.update(kw)
    return DistillConfig(**base)


def params_of(model):
    return [p.copy() for p in model.parameters().values()]


# --- config --------------------------------------------------------------------------------

def test_defaults():
    c = DistillConfig()
    assert (c.alpha, c.tau, c.epochs, c.batch_size) == (0.3, 4.0, 100, 64)
    assert (c.lr_student, c.lr_teacher, c.weight_decay) == (1e-3, 1e-4, 1e-4)
    assert c.student_hidden == (512, 512) and c.teacher_hidden == ()


@pytest.mark.parametrize(
    "kw", [{"alpha": 1.5}, {"alpha": -0.1}, {"tau": 0}, {"epochs": 0}, {"batch_size": 0}, {"lr_student": 0.0}]
)
def test_config_bounds(kw):
    with pytest.raises(ConfigError):
        DistillConfig(**kw)


def test_config_json_round_trip():
    c = DistillConfig(alpha=0.5, student_hidden=(4, 3), student_seed=9)
    assert DistillConfig.from_json(c.to_json()) == c


# --- hierarchical loss ------------------------------------------------------------------------

def test_hier_loss_empty_targets():
    tree = build_tree(["a;x", "a;y", "b"])
    z = np.random.default_rng(0).normal(size=(3, 3))
    value, grad = hier_loss(tree, z, ["", "", ""])
    assert value == 0.0
    assert np.all(grad == 0.0)


def test_hier_loss_uniform_oracle():
    tree = build_tree(["a;x", "a;y", "b;z", "b;w"])
    value, _ = hier_loss(tree, np.zeros((1, 4)), ["a;x"])
    assert value == pytest.approx(2.0794415, abs=1e-7)
    assert value == pytest.approx(-(math.log(0.5) + math.log(0.25)), rel=1e-15)


def test_hier_loss_unknown_target():
    tree = build_tree(["a", "b"])
    with pytest.raises(UnknownLabelError):
        hier_loss(tree, np.zeros((1, 2)), ["c"])


@settings(max_examples=60)
@given(tree_and_logits(max_paths=8, scale=3.0), st.integers(0, 1000))
def test_hier_loss_matches_path_likelihood_and_fd(case, seed):
    tree, z0 = case
    if tree.n_leaves < 2:
        return
    rng = np.random.default_rng(seed)
    z = np.vstack([z0, z0 + rng.normal(size=z0.shape), rng.normal(size=z0.shape)])
    nodes = rng.integers(0, tree.n_nodes, size=3)
    targets = [tree.path_of(int(u)) for u in nodes]
    value, grad = hier_loss(tree, z, targets)
    p = leaf_probabilities(z)
    expect = -np.mean([path_log_likelihood(tree, p[i], targets[i]) for i in range(3)])
    assert value == pytest.approx(expect, rel=1e-12, abs=1e-14)
    params = {"z": z.copy()}
    err = grad_check(lambda ps: hier_loss(tree, ps["z"], targets)[0:1] + ({"z": hier_loss(tree, ps["z"], targets)[1]},), params)
    assert err <= 1e-4


# --- soften / KD ---------------------------------------------------------------------------------

def test_soften_examples():
    z = np.array([0.3, -1.2, 2.5])
    assert np.array_equal(soften(z, 1.0), leaf_probabilities(z))
    e = math.e
    assert soften([2.0, 0.0], 2.0) == pytest.approx([e / (e + 1), 1 / (e + 1)], abs=1e-15)
    assert soften([2.0, 0.0], 2.0) == pytest.approx([0.7310586, 0.2689414], abs=1e-7)
    assert soften(np.array([5.0, -3.0, 0.0]), 1e9) == pytest.approx([1 / 3] * 3, abs=1e-6)
    with pytest.raises(ConfigError):
        soften(z, 0.0)


def test_kd_examples():
    z = np.random.default_rng(0).normal(size=(4, 5))
    value, grad = kd_loss(z, z.copy(), 4.0)
    assert value == 0.0
    assert np.abs(grad).max() <= 1e-15
    value, _ = kd_loss(np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]]), 1.0)
    qt = np.array([math.e / (math.e + 1), 1 / (math.e + 1)])
    assert value == pytest.approx(float(np.sum(qt * np.log(qt / 0.5))), rel=1e-14)
    # brute-force KL of the worked two-leaf example; four-digit intermediates give 0.1110
    assert value == pytest.approx(0.1109441, abs=1e-7)


def test_kd_tau_squared_factor():
    zt, zs = np.array([[1.0, 0.0]]), np.array([[0.0, 0.0]])
    qt, qs = soften(zt[0], 4.0), soften(zs[0], 4.0)
    kl = float(np.sum(qt * np.log(qt / qs)))
    assert kd_loss(zt, zs, 4.0)[0] == pytest.approx(16 * kl, rel=1e-12)


def test_kd_errors():
    with pytest.raises(ShapeError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 4)), 4.0)
    with pytest.raises(ConfigError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 3)), -1.0)


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(2, 7), st.floats(0.2, 8.0), st.floats(0.1, 30.0))
def test_kd_non_negative_and_shift_invariant(seed, b, k, tau, scale):
    rng = np.random.default_rng(seed)
    zt = rng.normal(scale=scale, size=(b, k))
    zs = rng.normal(scale=scale, size=(b, k))
    assert kd_loss(zt, zs, tau)[0] >= 0.0
    shifted = zt + rng.normal(size=(b, 1)) * 5
    assert kd_loss(zt, shifted, tau)[0] == pytest.approx(0.0, abs=1e-10)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.sampled_from([1.0, 2.0, 4.0, 6.0]))
def test_kd_gradient_matches_fd(seed, tau):
    rng = np.random.default_rng(seed)
    zt = rng.normal(scale=2, size=(4, 6))
    params = {"z": rng.normal(scale=2, size=(4, 6))}
    err = grad_check(lambda ps: kd_loss(zt, ps["z"], tau)[0:1] + ({"z": kd_loss(zt, ps["z"], tau)[1]},), params)
    assert err <= 1e-4


# --- training loop -----------------------------------------------------------------------------------

def test_train_records_history_and_bookkeeping():
    tree, x, e, labels = toy_data()
    state = train(tree, x, e, labels, small_config(epochs=4))
    assert [h.epoch for h in state.history] == [1, 2, 3, 4]
    assert len(state.batch_log) == 4 * 4
    for rec in state.batch_log:
        assert all(math.isfinite(v) for v in (rec.teacher_hier, rec.student_hier, rec.kd))
        assert rec.kd >= 0
        assert abs(rec.total - (rec.teacher_hier + rec.student)) <= 1e-12
        assert rec.student == pytest.approx(0.3 * rec.student_hier + 0.7 * rec.kd, rel=1e-15)
    first = [r for r in state.batch_log if r.epoch == 1]
    w = np.array([r.size for r in first])
    assert state.history[0].kd == pytest.approx(np.sum(w * [r.kd for r in first]) / w.sum())


def test_train_is_deterministic():
    tree, x, e, labels = toy_data()
    a = train(tree, x, e, labels, small_config())
    b = train(tree, x, e, labels, small_config())
    assert a.history == b.history
    for pa, pb in zip(params_of(a.student) + params_of(a.teacher_head), params_of(b.student) + params_of(b.teacher_head)):
        assert np.array_equal(pa, pb)


def test_alpha_one_makes_kd_inert():
    tree, x, e, labels = toy_data(1)
    a = train(tree, x, e, labels, small_config(alpha=1.0, tau=2.0))
    b = train(tree, x, e, labels, small_config(alpha=1.0, tau=6.0))
    for pa, pb in zip(params_of(a.student), params_of(b.student)):
        assert np.array_equal(pa, pb)


def test_alpha_zero_student_learns_from_teacher_only():
    tree, x, e, labels = toy_data(2)
    state = train(tree, x, e, labels, small_config(alpha=0.0, epochs=1, weight_decay=0.0))
    for rec in state.batch_log:
        assert rec.student == rec.kd
    # relabelling changes the teacher, so it must change the student only through KD
    other = [RankedPath()] * len(labels)
    state2 = train(tree, x, e, other, small_config(alpha=0.0, epochs=1, weight_decay=0.0))
    assert all(r.teacher_hier == 0.0 for r in state2.batch_log)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 50))
def test_teacher_trajectory_ignores_alpha_and_student_init(seed, a1, a2, student_seed):
    tree, x, e, labels = toy_data(seed, n=20)
    s1 = train(tree, x, e, labels, small_config(alpha=a1, epochs=2, seed=seed))
    s2 = train(tree, x, e, labels, small_config(alpha=a2, epochs=2, seed=seed, student_seed=student_seed))
    for pa, pb in zip(params_of(s1.teacher_head), params_of(s2.teacher_head)):
        assert np.array_equal(pa, pb)
    assert [h.teacher_hier for h in s1.history] == [h.teacher_hier for h in s2.history]


def test_training_continues_from_state():
    tree, x, e, labels = toy_data(3)
    whole = train(tree, x, e, labels, small_config(epochs=4))
    half = train(tree, x, e, labels, small_config(epochs=2))
    resumed = train(tree, x, e, labels, small_config(epochs=2), state=half)
    assert resumed.epoch == 4
    for pa, pb in zip(params_of(whole.student), params_of(resumed.student)):
        assert np.array_equal(pa, pb)


def test_train_errors():
    tree, x, e, labels = toy_data()
    with pytest.raises(ShapeError):
        train(tree, x[:-1], e, labels, small_config())
    with pytest.raises(TrainingError):
        train(build_tree(["a"]), x, e, [RankedPath.parse("a")] * len(x), small_config())
    with pytest.raises(TrainingError):
        train(tree, x[:0], e[:0], [], small_config())
    bad = x.copy()
    bad[3, 0] = np.inf
    with pytest.raises(TrainingError, match="first row 3"):
        train(tree, bad, e, labels, small_config())
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match=r"epoch 1 batch \d"):
        train(tree, x * 1e200, e, labels, small_config(lr_student=1e300))


# --- checkpoint ---------------------------------------------------------------------------------------

def test_checkpoint_round_trip():
    tree, x, e, labels = toy_data(4)
    state = train(tree, x, e, labels, small_config(teacher_hidden=(5,)))
    buf = io.BytesIO()
    save_checkpoint(state, buf)
    raw = buf.getvalue()
    assert raw[:4] == b"TXDM"
    ck = load_checkpoint(io.BytesIO(raw))
    assert ck.tree.leaf_paths() == tree.leaf_paths()
    assert ck.config == state.config
    assert ck.history == state.history
    for pa, pb in zip(params_of(ck.student) + params_of(ck.teacher_head), params_of(state.student) + params_of(state.teacher_head)):
        assert np.array_equal(pa, pb)
    again = io.BytesIO()
    save_checkpoint(ck, again)
    assert again.getvalue() == raw


def test_loss_history_tsv():
    tree, x, e, labels = toy_data(5)
    state = train(tree, x, e, labels, small_config(epochs=2))
    buf = io.StringIO()
    write_loss_history(state.history, buf, 0.3)
    rows = buf.getvalue().splitlines()
    assert rows[0].split("\t") == ["epoch", "teacher_hier", "student_hier", "kd", "student_total", "total"]
    vals = [float(v) for v in rows[2].split("\t")]
    h = state.history[1]
    assert vals[:4] == [2, h.teacher_hier, h.student_hier, h.kd]
    assert vals[5] == pytest.approx(vals[1] + vals[4], rel=1e-15)
