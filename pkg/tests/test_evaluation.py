import math
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from lgsleep import eegio, evaluation as E, model as M, train as T
from lgsleep.evaluation import ConfusionMatrix


# --- fold plans -------------------------------------------------------------

def test_sixteen_subjects_four_folds():
    subjects = [f"S{i:02d}" for i in range(16)]
    plan = E.subject_out_folds(subjects, k=4, repeats=4, seed=0)
    folds = plan.folds()
    assert len(folds) == 16
    for f in folds:
        assert len(f.test_subjects) == 4 and len(f.train_subjects) == 12
        assert set(f.test_subjects).isdisjoint(f.train_subjects)
    for r in range(4):
        tests = [s for f in folds if f.repeat == r for s in f.test_subjects]
        assert sorted(tests) == subjects
    # repeats re-randomize membership
    assert len({plan.assignments[r] for r in range(4)}) > 1


def test_leave_one_out_and_errors():
    plan = E.subject_out_folds(["a", "b", "c"], k=3, repeats=1)
    assert sorted(len(f.test_subjects) for f in plan.folds()) == [1, 1, 1]
    with pytest.raises(ValueError):
        E.subject_out_folds(["a", "b"], k=3)
    with pytest.raises(ValueError):
        E.subject_out_folds(["a", "b"], k=1)


@settings(max_examples=30)
@given(st.integers(2, 30), st.integers(2, 6), st.integers(0, 1000))
def test_fold_partition_property(n, k, seed):
    if k > n:
        return
    subjects = [f"s{i}" for i in range(n)]
    plan = E.subject_out_folds(subjects, k=k, repeats=2, seed=seed)
    for groups in plan.assignments:
        flat = [s for g in groups for s in g]
        assert sorted(flat) == sorted(subjects) and len(groups) == k
        sizes = [len(g) for g in groups]
        assert max(sizes) - min(sizes) <= 1


# --- metrics ------------------------------------------------------------------

def _brute(true, pred):
    cm = [[0] * 3 for _ in range(3)]
    for t, p in zip(true, pred):
        cm[t][p] += 1
    acc = sum(t == p for t, p in zip(true, pred)) / len(true)
    f1s = []
    for c in range(3):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return cm, acc, sum(f1s) / 3


def test_metrics_match_brute_force_on_random_label_sets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 200))
        true = rng.integers(0, 3, n)
        pred = np.where(rng.random(n) < 0.6, true, rng.integers(0, 3, n))
        cm_ref, acc, f1 = _brute(true.tolist(), pred.tolist())
        cm = E.confusion(true, pred)
        assert cm.counts.tolist() == cm_ref
        assert abs(E.accuracy(cm) - acc) <= 1e-12
        assert abs(E.macro_f1(cm) - f1) <= 1e-12


def test_hand_computed_cases():
    cm = ConfusionMatrix(np.array([[5, 5, 0], [0, 10, 0], [0, 0, 10]]))
    assert E.accuracy(cm) == 25 / 30
    assert math.isclose(E.macro_f1(cm), (2 / 3 + 0.8 + 1) / 3, rel_tol=1e-15)
    assert round(E.macro_f1(cm), 4) == 0.8222
    true = np.repeat([0, 1, 2], 10)
    allwake = E.confusion(true, np.zeros(30, dtype=int))
    assert math.isclose(E.macro_f1(allwake), 0.5 / 3, rel_tol=1e-15)
    assert round(E.macro_f1(allwake), 4) == 0.1667


def test_metric_edge_cases():
    assert E.accuracy(ConfusionMatrix(np.diag([10, 10, 10]))) == 1.0
    assert E.macro_f1(ConfusionMatrix(np.diag([10, 10, 10]))) == 1.0
    wrong = ConfusionMatrix(np.array([[0, 3, 0], [0, 0, 3], [3, 0, 0]]))
    assert E.accuracy(wrong) == 0.0 and E.macro_f1(wrong) == 0.0
    empty = E.confusion([], [])
    assert empty.total == 0 and not empty.counts.any()
    with pytest.raises(ValueError):
        E.accuracy(empty)
    with pytest.raises(ValueError):
        E.confusion([0, 3], [0, 0])
    with pytest.raises(ValueError):
        ConfusionMatrix(-np.eye(3))
    assert np.array_equal(E.confusion([0, 1, 2], [0, 1, 2]).counts, np.eye(3))


def _welch_p_by_quadrature(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1))
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    dens = lambda x: c * (1 + x * x / df) ** (-(df + 1) / 2)
    tail, _ = integrate.quad(dens, abs(t), math.inf, epsabs=1e-14, epsrel=1e-12)
    return t, 2 * tail


def test_t_test_against_quadrature():
    a, b = [1, 1.1, 0.9, 1], [2, 2.1, 1.9, 2]
    r = E.t_test(a, b)
    t, p = _welch_p_by_quadrature(a, b)
    assert r.p < 0.01
    assert math.isclose(r.t, t, rel_tol=1e-12) and math.isclose(r.p, p, rel_tol=1e-6)
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, y = rng.normal(0, 1, 6), rng.normal(0.5, 2, 9)
        t, p = _welch_p_by_quadrature(x, y)
        assert math.isclose(E.t_test(x, y).p, p, rel_tol=1e-6)


def test_t_test_conventions():
    same = E.t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert same.t == 0.0 and same.p == 1.0
    flat = E.t_test([2.0, 2.0], [2.0, 2.0])
    assert (flat.t, flat.p) == (0.0, 1.0)
    a, b = [0.8, 0.9, 0.85], [0.7, 0.75, 0.6, 0.65]
    assert E.t_test(a, b).t == -E.t_test(b, a).t and E.t_test(a, b).p == E.t_test(b, a).p
    with pytest.raises(ValueError):
        E.t_test([1.0], [1.0, 2.0])


# --- reports --------------------------------------------------------------------

def _fake_report(tag, f1s):
    folds = [E.FoldResult(0, i, (), (), 0.5 + v / 2, v, ConfusionMatrix(np.diag([i + 1, 1, 1])), 1, 1, 1, 1)
             for i, v in enumerate(f1s)]
    return E.ExperimentReport(tag, folds)


def test_report_summary_recomputable():
    rep = _fake_report("x", [0.8, 0.9, 0.7, 0.6])
    assert math.isclose(rep.mean("macro_f1"), 0.75)
    assert math.isclose(rep.std("macro_f1"), np.std([0.8, 0.9, 0.7, 0.6], ddof=1))
    rows = rep.to_csv().splitlines()
    assert rows[0] == "tag,repeat,fold,accuracy,macro_f1"
    assert rows[1] == "x,0,0,0.900000,0.800000"
    assert rows[-2].startswith("x,mean,,") and rows[-1].startswith("x,std,,")
    parsed = [float(r.split(",")[4]) for r in rows[1:5]]
    assert math.isclose(float(rows[-2].split(",")[4]), np.mean(parsed), abs_tol=5e-7)
    assert rep.confusion_total().counts.tolist() == [[10, 0, 0], [0, 4, 0], [0, 0, 4]]


def test_comparison_confusion_and_ttest_csv():
    a, b = _fake_report("LGSleep", [0.9, 0.92, 0.88, 0.91]), _fake_report("FC", [0.5, 0.6, 0.55, 0.52])
    comp = E.comparison_csv([a, b]).splitlines()
    assert comp[0].split(",")[:6] == ["tag", "n_folds", "accuracy_mean", "accuracy_std", "macro_f1_mean",
                                      "macro_f1_std"]
    assert comp[1].startswith("LGSleep,4,") and "±" in comp[1]
    conf = E.confusion_csv([a]).splitlines()
    assert conf[0] == "LGSleep,pred_Wake,pred_NREM,pred_REM" and conf[1] == "true_Wake,10,0,0"
    tt = E.t_test_csv([a, b], a).splitlines()
    assert len(tt) == 2 and tt[1].startswith("FC,LGSleep,macro_f1,")
    assert float(tt[1].split(",")[4]) < 0.05


def test_hypnogram_exports(tmp_path):
    E.hypnogram_export([0, 1, 2], [0, 2, 2], tmp_path / "h.csv", tmp_path / "h.svg")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines == ["epoch_index,true,pred", "0,W,W", "1,NR,R", "2,R,R"]
    root = ET.parse(tmp_path / "h.svg").getroot()
    rects = [el for el in root.iter() if el.tag.endswith("rect")]
    assert len(rects) == 2 * 3
    E.hypnogram_export([], [], tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "epoch_index,true,pred\n"
    n = 57
    svg = E.hypnogram_svg(np.arange(n) % 3, np.zeros(n, dtype=int))
    assert len(re.findall(r"<rect\b", svg)) == 2 * n
    with pytest.raises(ValueError):
        E.hypnogram_csv([0, 1], [0])


# --- data staging and fold runs ---------------------------------------------------

@pytest.fixture(scope="module")
def tiny_subjects():
    pairs = eegio.synth_dataset(eegio.SynthConfig(n_subjects=4, minutes_per_subject=2.0, seed=2))
    return E.prepare_subjects(pairs, "wide")


def test_prepare_and_standardize_on_train_only(tiny_subjects):
    assert sorted(tiny_subjects) == ["S00", "S01", "S02", "S03"]
    s0 = tiny_subjects["S00"]
    assert s0.signals.shape == (12, 5120) and s0.stages.shape == (12,)
    stats = E.fit_standardizer(tiny_subjects, ["S00", "S01"])
    x = np.concatenate([tiny_subjects[s].signals.ravel() for s in ["S00", "S01"]])
    assert stats.mean == x.mean() and stats.std == x.std()
    ts = E.assemble(tiny_subjects, ["S00", "S01"], stats)
    assert abs(ts.signals.mean()) < 1e-9 and abs(ts.signals.std() - 1) < 1e-6
    assert ts.slices().shape == (24, 19, 512, 1)
    with pytest.raises(ValueError):
        E.prepare_subjects([], "sigma")


def test_run_fold_audit_and_outputs(tiny_subjects):
    plan = E.subject_out_folds(list(tiny_subjects), k=2, repeats=1, seed=0)
    fold = plan.folds()[0]
    setup = E.ExperimentSetup(train=T.TrainConfig().with_epochs(1, 1))
    r = E.run_fold(tiny_subjects, fold, setup)
    assert r.n_test == 12 * len(fold.test_subjects)
    assert r.n_train + r.n_val == 12 * len(fold.train_subjects)
    assert r.confusion.total == r.n_test
    assert set(r.audit["test_subjects"]).isdisjoint(r.audit["train_subjects"] + r.audit["val_subjects"])
    assert r.audit["standardizer_subjects"] == sorted(fold.train_subjects)
    assert 0.0 <= r.macro_f1 <= 1.0 and r.history_csv.startswith("phase,")


def test_run_fold_label_fraction_counts(tiny_subjects):
    fold = E.Fold(0, 0, ("S00", "S01", "S02"), ("S03",))
    setup = E.ExperimentSetup(label_fraction=0.25, train=T.TrainConfig().with_epochs(1, 1))
    r = E.run_fold(tiny_subjects, fold, setup)
    assert r.n_labeled + r.n_val == math.floor(0.25 * 36)
    assert r.n_train + r.n_val == 36


def test_run_fold_rejects_leaky_fold(tiny_subjects):
    fold = E.Fold(0, 0, ("S00", "S01"), ("S01",))
    with pytest.raises(Exception, match="S01"):
        E.run_fold(tiny_subjects, fold, E.ExperimentSetup(train=T.TrainConfig().with_epochs(0, 1)))


def test_run_experiment_parallel_matches_serial(tiny_subjects):
    plan = E.subject_out_folds(list(tiny_subjects), k=2, repeats=1, seed=3)
    setup = E.ExperimentSetup(backbone="FC", train=T.TrainConfig().with_epochs(0, 2))
    a = E.run_experiment(tiny_subjects, plan, setup, jobs=1)
    b = E.run_experiment(tiny_subjects, plan, setup, jobs=2)
    assert a.to_csv() == b.to_csv() and a.tag == "FC-wide-1"
