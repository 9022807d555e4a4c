"""Subject-out cross-validation, metrics, significance tests and reports."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats as _stats

from . import model as M
from .dsp import Standardizer, geometry, preprocess_signal, subband_edges, trial_signals
from .eegio import STAGE_NAMES, DatasetIndex, IndexEntry, Stage, subsample_labels
from .errors import DataError, LGSleepError, TrainingDivergence
from .train import TrainConfig, TrialSet, split_validation, train_two_phase

log = logging.getLogger(__name__)

N_CLASSES = len(Stage)


# ------------------------------------------------------------------ fold plans


@dataclass(frozen=True)
class Fold:
    repeat: int
    fold: int
    train_subjects: tuple
    test_subjects: tuple


@dataclass(frozen=True)
class FoldPlan:
    repeats: int
    k: int
    # assignments[r][f] = test subjects of fold f in repeat r
    assignments: tuple

    def folds(self) -> list[Fold]:
        out = []
        for r, groups in enumerate(self.assignments):
            everyone = sorted(s for g in groups for s in g)
            for f, test in enumerate(groups):
                train = tuple(s for s in everyone if s not in set(test))
                out.append(Fold(r, f, train, tuple(test)))
        return out


def subject_out_folds(subjects: Sequence[str], k: int = 4, repeats: int = 4, seed=0) -> FoldPlan:
    """Each repeat shuffles the subjects independently and deals them into k groups."""
    subjects = sorted(set(subjects))
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if k > len(subjects):
        raise ValueError(f"k={k} folds need at least {k} subjects, got {len(subjects)}")
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    plan = []
    for r in range(repeats):
        perm = np.random.default_rng([seed, r]).permutation(len(subjects))
        groups = np.array_split(perm, k)
        plan.append(tuple(tuple(sorted(subjects[i] for i in g)) for g in groups))
    return FoldPlan(repeats, k, tuple(plan))


# --------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows: true stage, columns: predicted stage (wake, NREM, REM)."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.shape != (N_CLASSES, N_CLASSES) or (c < 0).any():
            raise ValueError("confusion counts must be a nonnegative 3x3 integer matrix")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash(self.counts.tobytes())


def confusion(true, pred) -> ConfusionMatrix:
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise ValueError(f"{true.size} true labels vs {pred.size} predictions")
    for name, v in (("true", true), ("pred", pred)):
        if v.size and (v.min() < 0 or v.max() >= N_CLASSES):
            raise ValueError(f"{name} labels must lie in 0..{N_CLASSES - 1}")
    counts = np.bincount(true * N_CLASSES + pred, minlength=N_CLASSES * N_CLASSES)
    return ConfusionMatrix(counts.reshape(N_CLASSES, N_CLASSES))


def accuracy(cm: ConfusionMatrix) -> float:
    n = cm.total
    if n == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / n


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    """F1 per class; an undefined precision or recall counts as 0."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    col, row = c.sum(axis=0), c.sum(axis=1)
    out = np.zeros(N_CLASSES)
    for i in range(N_CLASSES):
        p = tp[i] / col[i] if col[i] else 0.0
        r = tp[i] / row[i] if row[i] else 0.0
        out[i] = 2 * p * r / (p + r) if p + r else 0.0
    return out


def macro_f1(cm: ConfusionMatrix) -> float:
    return float(per_class_f1(cm).mean())


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    df: float


def t_test(a, b) -> TTest:
    """Two-sided Welch (unequal variance) two-sample t-test."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return TTest(0.0, 1.0, float(a.size + b.size - 2))
        return TTest(math.copysign(math.inf, diff), 0.0, float(a.size + b.size - 2))
    t = diff / math.sqrt(se2)
    df = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    p = 2.0 * float(_stats.t.sf(abs(t), df))
    return TTest(float(t), min(p, 1.0), float(df))


# --------------------------------------------------------------- data staging


@dataclass
class SubjectData:
    """One subject's preprocessed (filtered, not yet standardized) trials."""

    subject_id: str
    signals: np.ndarray  # (N, trial_len)
    stages: np.ndarray  # (N,)
    fs: float


def prepare_subjects(pairs, band: str = "wide", notch: bool = False) -> dict:
    """Filter each recording and cut it into trials. Returns ``{subject_id: SubjectData}``."""
    subband_edges(band)  # reject unknown names before any work
    out = {}
    for rec, track in pairs:
        track.check_fits(rec)
        x = preprocess_signal(rec.samples, rec.fs, band, notch)
        sig = trial_signals(x, rec.fs, track.epoch_len_s)
        n = min(len(sig), len(track))
        if rec.subject_id in out:
            raise DataError(f"duplicate subject id {rec.subject_id!r}")
        out[rec.subject_id] = SubjectData(rec.subject_id, sig[:n], track.as_array()[:n], rec.fs)
    if not out:
        raise DataError("dataset is empty")
    return out


def fit_standardizer(subjects: dict, ids) -> Standardizer:
    """Global z-score statistics over the given subjects' trial samples."""
    x = np.concatenate([subjects[s].signals.ravel() for s in ids])
    return Standardizer.fit(x)


def assemble(subjects: dict, ids, stats: Standardizer, labeled=None) -> TrialSet:
    ids = list(ids)
    fs = subjects[ids[0]].fs
    sig = np.concatenate([subjects[s].signals for s in ids])
    stages = np.concatenate([subjects[s].stages for s in ids])
    subj = np.concatenate([np.full(len(subjects[s].stages), s, dtype=object) for s in ids])
    lab = np.ones(len(stages), dtype=bool) if labeled is None else labeled
    return TrialSet(stats.apply(sig), stages, lab, subj, geometry(fs))


# ------------------------------------------------------------------- running


@dataclass
class FoldResult:
    repeat: int
    fold: int
    train_subjects: tuple
    test_subjects: tuple
    accuracy: float
    macro_f1: float
    confusion: ConfusionMatrix
    n_train: int
    n_labeled: int
    n_val: int
    n_test: int
    selected_epoch: Optional[int] = None
    history_csv: str = ""
    audit: dict = field(default_factory=dict)
    standardizer: Optional[Standardizer] = None
    model: Optional[M.Network] = field(default=None, repr=False, compare=False)


@dataclass
class ExperimentReport:
    tag: str
    folds: list
    backbone: str = "LGSleep"
    subband: str = "wide"
    label_fraction: float = 1.0

    def scores(self, metric: str) -> np.ndarray:
        return np.array([getattr(f, metric) for f in self.folds], dtype=np.float64)

    def mean(self, metric: str) -> float:
        return float(self.scores(metric).mean())

    def std(self, metric: str) -> float:
        """Sample standard deviation over folds (0 for a single fold)."""
        s = self.scores(metric)
        return float(s.std(ddof=1)) if s.size > 1 else 0.0

    def confusion_total(self) -> ConfusionMatrix:
        cm = ConfusionMatrix(np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))
        for f in self.folds:
            cm = cm + f.confusion
        return cm

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tag", "repeat", "fold", "accuracy", "macro_f1"])
        for f in self.folds:
            w.writerow([self.tag, f.repeat, f.fold, _num(f.accuracy), _num(f.macro_f1)])
        w.writerow([self.tag, "mean", "", _num(self.mean("accuracy")), _num(self.mean("macro_f1"))])
        w.writerow([self.tag, "std", "", _num(self.std("accuracy")), _num(self.std("macro_f1"))])
        return buf.getvalue()


def _num(v: float) -> str:
    return f"{v:.6f}"


def _fold_seed(seed, repeat, fold) -> int:
    return int(np.random.SeedSequence([seed, repeat, fold]).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentSetup:
    backbone: str = "LGSleep"
    label_fraction: float = 1.0
    train: TrainConfig = TrainConfig()
    model: M.ModelConfig = M.DESK
    seed: int = 0


def run_fold(subjects: dict, fold: Fold, setup: ExperimentSetup, keep_model: bool = False) -> FoldResult:
    """Train on the fold's training subjects and score its held-out subjects.

    ``keep_model`` attaches the trained network to the result (left off for
    sweeps so parallel workers do not ship weights back)."""
    s = _fold_seed(setup.seed, fold.repeat, fold.fold)
    leaked = set(fold.train_subjects) & set(fold.test_subjects)
    if leaked:
        raise LGSleepError(f"subjects {sorted(leaked)} are in both train and test")
    stats = fit_standardizer(subjects, fold.train_subjects)
    pool = assemble(subjects, fold.train_subjects, stats)
    index = DatasetIndex(tuple(
        IndexEntry(str(sid), i, Stage(int(st)), True)
        for i, (sid, st) in enumerate(zip(pool.subjects, pool.stages))
    ))
    index = subsample_labels(index, setup.label_fraction, seed=[s, 1])
    pool.labeled = index.labeled_mask()
    lab = pool.labeled_index
    split = split_validation(pool.stages[lab], setup.train.val_fraction, seed=[s, 2])
    keep = np.ones(len(pool), dtype=bool)
    keep[lab[split.val]] = False
    val = pool.subset(lab[split.val])
    train = pool.subset(np.flatnonzero(keep))

    test = assemble(subjects, fold.test_subjects, stats)
    audit = {
        "standardizer_subjects": sorted(fold.train_subjects),
        "train_subjects": sorted(set(train.subjects)),
        "val_subjects": sorted(set(val.subjects)),
        "test_subjects": sorted(set(test.subjects)),
    }
    seen = set(audit["train_subjects"]) | set(audit["val_subjects"]) | set(audit["standardizer_subjects"])
    if seen & set(audit["test_subjects"]):
        raise LGSleepError(f"test subjects leaked into training: {sorted(seen & set(audit['test_subjects']))}")

    net = M.build_backbone(setup.backbone, setup.model, seed=s)
    cfg = TrainConfig(setup.train.phase1, setup.train.phase2, setup.train.batch_size,
                      setup.train.val_fraction, s, setup.train.semi_supervised)
    try:
        _, history = train_two_phase(net, train, cfg, val=val, fold=(fold.repeat, fold.fold))
    except TrainingDivergence as e:
        e.fold = (fold.repeat, fold.fold)
        raise
    pred, _ = M.predict(net, test.slices())
    cm = confusion(test.stages, pred)
    log.info("repeat %d fold %d: acc=%.4f f1=%.4f", fold.repeat, fold.fold, accuracy(cm), macro_f1(cm))
    return FoldResult(fold.repeat, fold.fold, fold.train_subjects, fold.test_subjects,
                      accuracy(cm), macro_f1(cm), cm, len(train), int(train.labeled.sum()),
                      len(val), len(test), history.selected_epoch, history.to_csv(), audit, stats,
                      net if keep_model else None)


def _run_fold_job(args):
    return run_fold(*args)


def run_experiment(subjects: dict, plan: FoldPlan, setup: ExperimentSetup = ExperimentSetup(),
                   tag: Optional[str] = None, jobs: int = 1, subband: str = "wide") -> ExperimentReport:
    """Run every fold of ``plan``; results come back in plan order whatever ``jobs`` is."""
    folds = plan.folds()
    if jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_fold_job, [(subjects, f, setup) for f in folds]))
    else:
        results = [run_fold(subjects, f, setup) for f in folds]
    tag = tag or f"{setup.backbone}-{subband}-{setup.label_fraction:g}"
    return ExperimentReport(tag, results, setup.backbone, subband, setup.label_fraction)


# ------------------------------------------------------------------- exports


def comparison_csv(reports: Sequence[ExperimentReport]) -> str:
    """One row per report: mean and std of accuracy and macro F1, plus 'mean±std' text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tag", "n_folds", "accuracy_mean", "accuracy_std", "macro_f1_mean", "macro_f1_std",
                "accuracy", "macro_f1"])
    for r in reports:
        am, asd, fm, fsd = r.mean("accuracy"), r.std("accuracy"), r.mean("macro_f1"), r.std("macro_f1")
        w.writerow([r.tag, len(r.folds), _num(am), _num(asd), _num(fm), _num(fsd),
                    f"{am:.2f}±{asd:.2f}", f"{fm:.2f}±{fsd:.2f}"])
    return buf.getvalue()


def confusion_csv(reports: Sequence[ExperimentReport]) -> str:
    """Summed confusion matrix per report as a labeled 3x3 block."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in reports:
        cm = r.confusion_total().counts
        w.writerow([r.tag] + [f"pred_{n}" for n in STAGE_NAMES])
        for i, name in enumerate(STAGE_NAMES):
            w.writerow([f"true_{name}"] + [int(v) for v in cm[i]])
    return buf.getvalue()


def t_test_csv(reports: Sequence[ExperimentReport], reference: ExperimentReport,
               metric: str = "macro_f1") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tag", "reference", "metric", "t", "p"])
    for r in reports:
        if r is reference:
            continue
        res = t_test(reference.scores(metric), r.scores(metric))
        w.writerow([r.tag, reference.tag, metric, _num(res.t), _num(res.p)])
    return buf.getvalue()


_STAGE_COLORS = {Stage.WAKE: "#f2c14e", Stage.NREM: "#2e86ab", Stage.REM: "#d1495b"}


def hypnogram_csv(true, pred) -> str:
    true = [] if true is None else list(true)
    pred = list(pred)
    if true and len(true) != len(pred):
        raise ValueError(f"{len(true)} true stages vs {len(pred)} predictions")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch_index", "true", "pred"])
    for i, p in enumerate(pred):
        t = Stage(int(true[i])).token if true else ""
        w.writerow([i, t, Stage(int(p)).token])
    return buf.getvalue()


def hypnogram_svg(true, pred, epoch_px: float = 4.0, band_h: float = 24.0) -> str:
    """Two colored strips (true on top, predicted below), one rect per epoch each."""
    true = [] if true is None else list(true)
    pred = list(pred)
    width = max(len(pred), 1) * epoch_px + 60
    height = 2 * band_h + 30
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}">']
    for row, (label, track) in enumerate((("true", true), ("pred", pred))):
        y = 10 + row * (band_h + 10)
        parts.append(f'<text x="2" y="{y + band_h * 0.7:g}" font-size="12">{label}</text>')
        for i, s in enumerate(track):
            st = Stage(int(s))
            parts.append(f'<rect x="{50 + i * epoch_px:g}" y="{y:g}" width="{epoch_px:g}" '
                         f'height="{band_h:g}" fill="{_STAGE_COLORS[st]}"><title>{st.token}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def hypnogram_export(true, pred, path, svg_path=None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(hypnogram_csv(true, pred))
    if svg_path is not None:
        with open(svg_path, "w") as fh:
            fh.write(hypnogram_svg(true, pred))
