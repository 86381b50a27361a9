import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crl_mmnar.kernel import Tensor
from crl_mmnar.outcome import (FALLBACK_KAPPA, RectifierCell, RectifierTable, TaskHeads, assign_folds,
                               fit_rectifier, pred_loss, rectify, rectify_array, select_kappa)

TASKS = ("readmission", "icu", "mortality")


def table_with(tau, applied=(True, True), kappa=0.05, support=(100, 100)):
    t = RectifierTable(("readmission",), kappa, 20)
    t.cells[("1101", "readmission")] = RectifierCell((tau, tau), support, applied)
    return t


def test_zero_initialised_heads_predict_one_half():
    heads = TaskHeads(TASKS, 16, np.random.default_rng(0), zero_init=True)
    probs = heads.predict(Tensor(np.random.default_rng(1).normal(size=(5, 16))))
    assert probs.shape == (5, 3)
    assert np.all(probs == 0.5)


def test_predictions_strictly_inside_unit_interval():
    heads = TaskHeads(TASKS, 8, np.random.default_rng(0))
    probs = heads.predict(Tensor(np.random.default_rng(2).normal(0, 3, size=(50, 8))))
    assert np.all((probs > 0) & (probs < 1))


def test_heads_share_no_parameters():
    heads = TaskHeads(TASKS, 8, np.random.default_rng(0))
    names = [n for n, _ in heads.named_parameters()]
    for t in TASKS:
        assert any(n.startswith(t + ".") for n in names)
    assert len({id(p) for p in heads.parameters()}) == len(names)


def test_pred_loss_saturated_and_weighted():
    labels = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    logits = Tensor(np.where(labels == 1, 40.0, -40.0))
    assert pred_loss(logits, labels, (1.2, 1.0, 1.5)).item() < 1e-6
    zero = pred_loss(Tensor(np.zeros((2, 3))), labels, (1.2, 1.0, 1.5)).item()
    assert zero == pytest.approx((1.2 + 1.0 + 1.5) * np.log(2), abs=1e-12)


def test_focal_zero_matches_cross_entropy():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.normal(size=(7, 3)))
    labels = rng.integers(0, 2, (7, 3)).astype(float)
    a = pred_loss(logits, labels, (1.2, 1.0, 1.5), focal_gamma=0.0).item()
    b = pred_loss(logits, labels, (1.2, 1.0, 1.5)).item()
    assert abs(a - b) <= 1e-12


def test_worked_correction_example():
    assert rectify(0.30, "1101", "readmission", table_with(0.08), fold=None) == 0.38


def test_clamp_at_one():
    assert rectify(0.97, "1101", "readmission", table_with(0.08), fold=0) == 1.0


def test_unapplied_correction_leaves_prediction_bitwise():
    t = table_with(0.03, applied=(False, False))
    x = 0.1 + 0.2  # not exactly representable
    out = rectify(x, "1101", "readmission", t, fold=1)
    assert out is x or (out == x and np.float64(out).tobytes() == np.float64(x).tobytes())


def test_unseen_pattern_counted_and_unchanged():
    t = table_with(0.08)
    assert rectify(0.4, "1000", "readmission", t) == 0.4
    assert t.unseen == 1


def test_fold_estimates_cross_applied():
    t = RectifierTable(("readmission",), 0.05, 20)
    t.cells[("1101", "readmission")] = RectifierCell((0.10, 0.06), (50, 50), (True, True))
    assert rectify(0.5, "1101", "readmission", t, fold=0) == 0.5 + 0.06
    assert rectify(0.5, "1101", "readmission", t, fold=1) == 0.5 + 0.10
    assert rectify(0.5, "1101", "readmission", t) == pytest.approx(0.58, abs=1e-15)


def test_test_time_uses_single_applied_estimate():
    cell = RectifierCell((0.10, 0.01), (50, 50), (True, False))
    assert cell.test_time_correction() == 0.10
    assert RectifierCell((0.0, 0.0), (5, 5), (False, False)).test_time_correction() == 0.0


def test_zero_residuals_apply_nothing():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, (200, 3)).astype(float)
    pats = rng.choice(["1111", "1011"], 200)
    table, _ = fit_rectifier(labels.copy(), labels, pats, TASKS, kappa=0.01)
    assert all(c.tau == (0.0, 0.0) and c.applied == (False, False) for c in table.cells.values())


def _planted(n, shift, seed=0, pattern="1101"):
    rng = np.random.default_rng(seed)
    pats = np.where(rng.random(n) < 0.5, pattern, "1111")
    base = rng.uniform(0.1, 0.5, n)
    p = base + np.where(pats == pattern, shift, 0.0)
    y = (rng.random(n) < p).astype(float)[:, None]
    return base[:, None], y, pats


def test_threshold_gate_on_fold_estimates():
    # 38% positives against a constant 0.30 prediction: mean residual +0.08 per fold
    preds = np.full((200, 1), 0.30)
    labels = np.zeros((200, 1))
    pats = np.array(["1101"] * 200)
    folds = np.array([0, 1] * 100)
    for k in (0, 1):
        rows = np.flatnonzero(folds == k)
        labels[rows[:38]] = 1.0
    hit, _ = fit_rectifier(preds, labels, pats, ("readmission",), kappa=0.05, folds=folds)
    cell = hit.cells[("1101", "readmission")]
    assert cell.applied == (True, True)
    assert cell.tau[0] == pytest.approx(0.08, abs=1e-12)
    miss, _ = fit_rectifier(preds, labels, pats, ("readmission",), kappa=0.10, folds=folds)
    assert miss.cells[("1101", "readmission")].applied == (False, False)


def test_min_support_gate():
    preds, labels, pats = _planted(60, 0.3, seed=1)
    table, _ = fit_rectifier(preds, labels, pats, ("readmission",), kappa=0.0, min_support=1000)
    assert not any(a for c in table.cells.values() for a in c.applied)


def test_folds_are_disjoint_balanced_and_seeded():
    pats = np.array(["a"] * 11 + ["b"] * 6)
    f1 = assign_folds(pats, seed=4)
    assert np.array_equal(f1, assign_folds(pats, seed=4))
    for p in ("a", "b"):
        counts = np.bincount(f1[pats == p], minlength=2)
        assert abs(counts[0] - counts[1]) <= 1


def test_cross_fit_separation():
    # every applied correction for a row must come from labels of the other fold only
    preds, labels, pats = _planted(400, 0.2, seed=2)
    table, folds = fit_rectifier(preds, labels, pats, ("readmission",), kappa=0.0)
    out = rectify_array(preds, pats, table, folds)
    for i in range(len(preds)):
        other = (pats == pats[i]) & (folds != folds[i])
        expected = np.clip(preds[i, 0] + (labels[other, 0] - preds[other, 0]).mean(), 0, 1)
        assert out[i, 0] == pytest.approx(expected, abs=1e-12)
    # flipping one row's own label leaves its own corrected value unchanged
    flipped = labels.copy()
    flipped[0, 0] = 1 - flipped[0, 0]
    t2, _ = fit_rectifier(preds, flipped, pats, ("readmission",), kappa=0.0, folds=folds)
    assert rectify_array(preds, pats, t2, folds)[0, 0] == out[0, 0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.3))
def test_rectified_outputs_stay_in_unit_interval(seed, kappa):
    rng = np.random.default_rng(seed)
    n = 120
    preds = rng.random((n, 2)) ** 3
    labels = rng.integers(0, 2, (n, 2)).astype(float)
    pats = rng.choice(["1111", "1001", "1100"], n)
    table, folds = fit_rectifier(preds, labels, pats, ("a", "b"), kappa, min_support=5)
    for f in (folds, None):
        out = rectify_array(preds, pats, table, f)
        assert np.all((out >= 0) & (out <= 1))


def test_rectify_array_matches_scalar_rectify():
    preds, labels, pats = _planted(300, 0.15, seed=5)
    table, folds = fit_rectifier(preds, labels, pats, ("readmission",), kappa=0.02)
    arr = rectify_array(preds, pats, table, folds)
    scal = [rectify(preds[i, 0], pats[i], "readmission", table, int(folds[i])) for i in range(len(preds))]
    assert np.array_equal(arr[:, 0], np.array(scal))


def test_table_tsv_round_trip(tmp_path):
    preds, labels, pats = _planted(300, 0.15, seed=6)
    table, _ = fit_rectifier(preds, labels, pats, ("readmission",), kappa=0.02)
    table.save(tmp_path / "r.tsv")
    back = RectifierTable.load(tmp_path / "r.tsv", ("readmission",))
    assert back.kappa == table.kappa and back.min_support == table.min_support
    assert back.cells == table.cells
    header = (tmp_path / "r.tsv").read_text().splitlines()[2]
    assert header.split("\t") == ["pattern", "task", "tau_1", "tau_2", "n_1", "n_2", "applied_1",
                                  "applied_2", "kappa"]


def test_select_kappa_never_applied_picks_largest():
    preds = np.full((100, 1), 0.5)
    labels = np.tile([[0.0], [1.0]], (50, 1))
    pats = np.array(["1111"] * 100)
    kappa, scores = select_kappa(preds, labels, pats, ("t",))
    assert kappa == 0.05 and len(scores) == 4


def test_select_kappa_degenerate_and_single_grid():
    preds, labels, pats = _planted(200, 0.1)
    assert select_kappa(preds, labels, pats, ("readmission",), grid=[])[0] == FALLBACK_KAPPA
    assert select_kappa(preds, labels, pats, ("readmission",), grid=[float("nan")])[0] == FALLBACK_KAPPA
    assert select_kappa(preds, labels, pats, ("readmission",), grid=[0.05])[0] == 0.05


def test_planted_shift_rectification_beats_no_rectification():
    preds, labels, pats = _planted(4000, 0.08, seed=7)
    kappa, scores = select_kappa(preds, labels, pats, ("readmission",))
    assert kappa <= 0.05
    no_rect = float(np.mean((preds - labels) ** 2))
    assert scores[kappa] < no_rect
