import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    accuracy_confusion,
    adam_reference,
    confusion_loop,
    cross_entropy_direct,
    dice_sets,
    precision_confusion,
    softmax_direct,
)
from raunet.data import make_folds, synth_dataset
from raunet import model as M
from raunet.model import VARIANTS, ModelConfig, parameter_init, predict_mask
from raunet.tensor import Tensor, no_grad
from raunet.train import (
    METRIC_COLUMNS,
    AdamState,
    MetricsReport,
    NumericAbort,
    accuracy,
    adam_step,
    ablation_suite,
    confusion_matrix,
    cross_entropy,
    dice_score,
    evaluate,
    precision,
    score_masks,
    train,
    train_fold,
    write_report,
)

TINY = ModelConfig(depth=2, base_channels=4, cardinality=2, input_size=16)
DESK = ModelConfig(depth=3, base_channels=16, cardinality=4, input_size=96)

masks = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).integers(0, 4, (2, 6, 7)))


# -- cross-entropy -------------------------------------------------------------------


def test_ce_perfect_prediction(f64):
    mask = np.array([[[0, 1], [2, 3]]])
    logits = np.full((1, 4, 2, 2), -1e3)
    np.put_along_axis(logits, mask[:, None], 1e3, axis=1)
    assert cross_entropy(Tensor(logits), mask).item() == 0.0


def test_ce_uniform_is_log_m(f64):
    loss = cross_entropy(Tensor(np.zeros((2, 4, 3, 3))), np.zeros((2, 3, 3), int))
    assert abs(loss.item() - math.log(4)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_ce_matches_direct_formula(f64, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, 3, (2, 4, 5, 4))
    mask = rng.integers(0, 4, (2, 5, 4))
    assert abs(cross_entropy(Tensor(logits), mask).item() - cross_entropy_direct(logits, mask)) < 1e-6


def test_ce_gradient_identity(f64, rng):
    logits = Tensor(rng.normal(0, 2, (2, 4, 3, 5)), requires_grad=True)
    mask = rng.integers(0, 4, (2, 3, 5))
    cross_entropy(logits, mask).backward()
    probs = np.apply_along_axis(softmax_direct, 1, logits.data)
    onehot = np.moveaxis(np.eye(4)[mask], -1, 1)
    np.testing.assert_allclose(logits.grad, (probs - onehot) / mask.size, atol=1e-6)


def test_ce_label_errors(rng):
    logits = Tensor(np.zeros((1, 4, 2, 2)))
    with pytest.raises(ValueError, match=r"\[4\]"):
        cross_entropy(logits, np.array([[[0, 4], [1, 2]]]))
    with pytest.raises(ValueError, match="does not match"):
        cross_entropy(logits, np.zeros((1, 3, 2), int))


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 50))
def test_ce_nonnegative(seed, spread):
    rng = np.random.default_rng(seed)
    loss = cross_entropy(Tensor(rng.normal(0, spread, (1, 4, 3, 3))), rng.integers(0, 4, (1, 3, 3)))
    assert loss.item() >= 0


# -- Adam -----------------------------------------------------------------------------------------


def test_adam_first_step_is_signed_lr(f64, rng):
    p = {"w": Tensor(rng.standard_normal((3, 4)))}
    before = p["w"].data.copy()
    g = rng.choice([-1, 1], (3, 4)) * rng.uniform(0.1, 10, (3, 4))
    adam_step(p, {"w": g}, AdamState())
    assert np.all(np.abs(p["w"].data - before + 1e-3 * np.sign(g)) < 1e-3 * 1e-3)


def test_adam_zero_gradient(f64, rng):
    p = {"a": Tensor(rng.standard_normal(5)), "b": Tensor(rng.standard_normal((2, 2)))}
    before = {k: t.data.copy() for k, t in p.items()}
    state = adam_step(p, {"a": np.zeros(5), "b": np.zeros((2, 2))}, AdamState())
    assert state.step == 1
    for k in p:
        np.testing.assert_array_equal(p[k].data, before[k])


def test_adam_matches_reference_trajectory(f64):
    grad = lambda x: 2 * (x - 3.0)
    p = {"x": Tensor(np.array([0.5]))}
    state = AdamState()
    ours = []
    for _ in range(3):
        adam_step(p, {"x": grad(p["x"].data)}, state)
        ours.append(p["x"].data.item())
    assert max(abs(a - b) for a, b in zip(ours, adam_reference(0.5, grad, 3))) < 1e-10


def test_adam_missing_gradient():
    p = {"a": Tensor(np.zeros(2)), "b": Tensor(np.zeros(2))}
    with pytest.raises(ValueError, match="'b'"):
        adam_step(p, {"a": np.ones(2), "b": None}, AdamState())
    with pytest.raises(ValueError, match="shape"):
        adam_step(p, {"a": np.ones(3), "b": np.ones(2)}, AdamState())


def test_adam_deterministic(f64):
    def run():
        rng = np.random.default_rng(7)
        p = {n: Tensor(rng.standard_normal(4)) for n in "zyx"}
        state = AdamState()
        for _ in range(10):
            adam_step(p, {n: rng.standard_normal(4) for n in sorted(p)}, state)
        return b"".join(p[n].data.tobytes() for n in sorted(p))

    assert run() == run()


# -- metrics ------------------------------------------------------------------------------------


def test_dice_examples():
    truth = np.array([[1, 1, 0], [2, 0, 3]])
    assert dice_score(truth, truth, 1) == 1.0
    pred = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    ref = np.array([0, 0, 1, 1, 1, 1, 0, 0])
    assert dice_score(pred, ref, 1) == 0.5
    assert dice_score(np.zeros(4), np.zeros(4), 2) == 1.0


def test_metric_misalignment():
    for fn in (lambda a, b: dice_score(a, b, 1), accuracy, lambda a, b: precision(a, b, 1), confusion_matrix):
        with pytest.raises(ValueError, match="aligned"):
            fn(np.zeros((2, 3)), np.zeros((3, 2)))


@settings(max_examples=40)
@given(masks, masks)
def test_metrics_match_oracles(pred, truth):
    cm = confusion_loop(pred, truth)
    np.testing.assert_array_equal(confusion_matrix(pred, truth), cm)
    assert abs(accuracy(pred, truth) - accuracy_confusion(cm)) < 1e-9
    for c in range(4):
        assert abs(dice_score(pred, truth, c) - dice_sets(pred, truth, c)) < 1e-9
        assert abs(precision(pred, truth, c) - precision_confusion(cm, c)) < 1e-9


@settings(max_examples=40)
@given(masks, masks, st.integers(0, 3))
def test_dice_symmetric(pred, truth, c):
    assert dice_score(pred, truth, c) == dice_score(truth, pred, c)


@settings(max_examples=40)
@given(masks, st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_dice_monotone_under_intersection_loss(truth, c, seed):
    rng = np.random.default_rng(seed)
    pred = truth.copy()
    score = dice_score(pred, truth, c)
    for idx in rng.permutation(np.argwhere(pred == c)):
        pred[tuple(idx)] = (c + 1) % 4
        nxt = dice_score(pred, truth, c)
        assert nxt <= score
        score = nxt


def test_identity_and_complement():
    truth = np.array([[0, 1], [1, 0]])
    assert accuracy(truth, truth) == 1.0
    assert all(precision(truth, truth, c) == 1.0 for c in range(4))
    assert accuracy(1 - truth, truth) == 0.0
    assert precision(np.zeros(3, int), np.array([0, 2, 0]), 2) == 0.0


@pytest.mark.parametrize("factor", [0.1, 3.0, 1e4])
def test_metrics_invariant_to_logit_scaling(f64, rng, factor):
    params = parameter_init(TINY, 3)
    for _, t in params.named().items():
        t.data = t.data + rng.uniform(-0.1, 0.1, t.shape)
    x = rng.uniform(0, 1, (2, 1, 16, 16))
    truth = rng.integers(0, 4, (2, 16, 16))
    with no_grad():
        logits = M.forward(Tensor(x), params).data
    base = predict_mask(Tensor(x), params)
    scaled = np.argmax(logits * factor, axis=1)
    np.testing.assert_array_equal(base, scaled)
    a, b = score_masks(base, truth), score_masks(scaled, truth)
    assert a.as_dict() == b.as_dict()


def test_score_masks_pools_pixels():
    truth = np.zeros((2, 4, 4), int)
    truth[0, :2] = 1
    pred = truth.copy()
    pred[1, 0, 0] = 1
    m = score_masks(pred, truth)
    assert m.dice[1] == pytest.approx(2 * 8 / 17)
    assert m.dice[2] == m.dice[3] == 1.0
    assert m.macro_dice == pytest.approx((2 * 8 / 17 + 2) / 3)


def test_report_mean_and_files(tmp_path):
    a = score_masks(np.array([[1, 1]]), np.array([[1, 1]]))
    b = score_masks(np.array([[0, 1]]), np.array([[1, 1]]))
    report = MetricsReport([a, b])
    assert report.mean.accuracy == 0.75
    assert report.mean.macro_dice == pytest.approx((a.macro_dice + b.macro_dice) / 2)
    lines = report.table().splitlines()
    assert lines[0].split("\t")[:4] == ["fold", "dsc", "acc", "precision"] and lines[-1].startswith("mean\t")
    summary = dict(line.split("=") for line in report.summary().splitlines())
    assert summary["folds"] == "2" and float(summary["acc"]) == 0.75


# -- training -------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    return synth_dataset(6, 16, seed=2)


def test_zero_epochs_reports_initial_model(f64, tiny_data):
    plan = make_folds([s.id for s in tiny_data], 2, 0)
    result = train(TINY, tiny_data, plan, epochs=0, seed=4)
    assert result.losses == []
    init = parameter_init(TINY, 4)
    for trained, fold in zip(result.params, range(2)):
        for name, t in init.named().items():
            np.testing.assert_array_equal(trained.named()[name].data, t.data)
        held = [s for s in tiny_data if s.id in plan.folds[fold]]
        assert evaluate(init, held).as_dict() == result.report.folds[fold].as_dict()


def test_same_seed_identical_loss_curves(f64, tiny_data):
    plan = make_folds([s.id for s in tiny_data], 2, 1)
    a = train(TINY, tiny_data, plan, epochs=2, seed=5, batch_size=2)
    b = train(TINY, tiny_data, plan, epochs=2, seed=5, batch_size=2)
    assert a.loss_csv() == b.loss_csv() and len(a.losses) == 4
    assert a.report.summary() == b.report.summary()
    c = train(TINY, tiny_data, plan, epochs=2, seed=6, batch_size=2)
    assert c.loss_csv() != a.loss_csv()


def test_parallel_folds_match_serial(tiny_data):
    plan = make_folds([s.id for s in tiny_data], 2, 1)
    a = train(TINY, tiny_data, plan, epochs=1, seed=5, batch_size=3)
    b = train(TINY, tiny_data, plan, epochs=1, seed=5, batch_size=3, workers=2)
    assert a.loss_csv() == b.loss_csv() and a.report.table() == b.report.table()


def test_nan_loss_aborts(tiny_data):
    bad = [s for s in tiny_data]
    bad[0].image[0, 0, 0] = np.nan
    plan = make_folds([s.id for s in bad], 1, 0)
    try:
        with pytest.raises(NumericAbort, match=r"epoch 0, batch \d"):
            train(TINY, bad, plan, epochs=1, seed=0, batch_size=6)
    finally:
        bad[0].image[0, 0, 0] = 0.0


def test_train_input_errors(tiny_data):
    plan = make_folds([s.id for s in tiny_data], 2, 0)
    with pytest.raises(ValueError, match="empty"):
        train(TINY, [], plan, 1, 0)
    with pytest.raises(ValueError, match="expects"):
        train(ModelConfig(depth=2, base_channels=4, cardinality=2, input_size=32), tiny_data, plan, 1, 0)


def test_write_report(tmp_path, tiny_data):
    plan = make_folds([s.id for s in tiny_data], 2, 0)
    result = train(TINY, tiny_data, plan, epochs=1, seed=0, batch_size=3)
    write_report(result, tmp_path)
    assert (tmp_path / "loss_curves.csv").read_text().splitlines()[0] == "epoch,fold,loss"
    assert len((tmp_path / "report.tsv").read_text().splitlines()) == 4
    assert "dsc=" in (tmp_path / "summary.txt").read_text()


def test_overfit_four_samples():
    data = synth_dataset(4, 96, seed=3)
    _, metrics, losses = train_fold(DESK, data, data, epochs=200, seed=0)
    assert metrics.macro_dice >= 0.95, metrics.dice
    assert losses[-1][2] < losses[0][2]


def test_ablation_table_layout():
    data = synth_dataset(4, 16, seed=0)
    table = ablation_suite(data, seed=0, base=TINY, k=2, epochs=1, max_folds=1)
    assert list(table.rows) == list(VARIANTS)
    assert all(list(row) == list(METRIC_COLUMNS) for row in table.rows.values())
    lines = table.tsv().splitlines()
    assert len(lines) == 5 and all(len(line.split("\t")) == 7 for line in lines)
    assert any(c.startswith("aug_") for c in METRIC_COLUMNS) and any(c.startswith("noaug_") for c in METRIC_COLUMNS)
    assert ablation_suite(data, seed=0, base=TINY, k=2, epochs=1, max_folds=1).tsv() == table.tsv()
