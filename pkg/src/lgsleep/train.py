"""Two-phase training with validation-based model selection.

Phase 1 minimizes classification + reconstruction loss at a small learning
rate; phase 2 fine-tunes encoder and head on the class-weighted
classification loss alone. After every phase-2 epoch the weighted validation
loss is recorded and the epoch with the lowest value is kept.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn
from .dsp import Geometry, geometry, slice_trials
from .eegio import Stage
from .errors import DataError, TrainingDivergence
from .model import Network, compute_loss

log = logging.getLogger(__name__)

# Class weights in stage-index order (wake, NREM, REM).
# "nrem_up" (default): wake 1.5, NREM 7, REM 1; "rem_up": the alternative
# reading in which the rare REM class gets the large weight.
WEIGHT_PRESETS = {
    "nrem_up": (1.5, 7.0, 1.0),
    "rem_up": (1.5, 1.0, 7.0),
    "equal": (1.0, 1.0, 1.0),
}


@dataclass(frozen=True)
class PhaseConfig:
    epochs: int
    lr: float
    use_mse: bool
    class_weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValueError(f"epochs must be a nonnegative integer, got {self.epochs}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        w = tuple(float(v) for v in self.class_weights)
        if len(w) != len(Stage) or not all(v > 0 and math.isfinite(v) for v in w):
            raise ValueError(f"class_weights must be {len(Stage)} positive numbers, got {w}")
        object.__setattr__(self, "class_weights", w)
        object.__setattr__(self, "epochs", int(self.epochs))


@dataclass(frozen=True)
class TrainConfig:
    phase1: PhaseConfig = PhaseConfig(20, 1e-4, True, WEIGHT_PRESETS["equal"])
    phase2: PhaseConfig = PhaseConfig(100, 1e-3, False, WEIGHT_PRESETS["nrem_up"])
    batch_size: int = 32
    val_fraction: float = 0.1
    seed: int = 0
    # L_mse over unlabeled trials too (False: drop unlabeled trials entirely)
    semi_supervised: bool = True

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def with_epochs(self, phase1: int, phase2: int) -> "TrainConfig":
        return replace(self, phase1=replace(self.phase1, epochs=phase1),
                       phase2=replace(self.phase2, epochs=phase2))


def reduced_schedule(cfg: TrainConfig = TrainConfig()) -> TrainConfig:
    """5 + 20 epochs: the short schedule used for desk-scale experiments."""
    return cfg.with_epochs(5, 20)


def class_weight_vector(weights, label) -> float:
    """Weight applied to one trial's cross-entropy term."""
    return float(np.asarray(weights, dtype=np.float64)[int(label)])


# ------------------------------------------------------------------ trial sets


@dataclass
class TrialSet:
    """Standardized trial signals plus per-trial bookkeeping.

    ``signals`` holds whole trials ``(N, trial_len)``; slices are cut per
    batch so a corpus is not stored 19/10 times over. ``stages`` uses -1 for
    unknown stages.
    """

    signals: np.ndarray
    stages: np.ndarray
    labeled: np.ndarray
    subjects: np.ndarray
    geo: Geometry = field(default_factory=lambda: geometry(512.0))

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.stages = np.asarray(self.stages, dtype=np.int64)
        self.labeled = np.asarray(self.labeled, dtype=bool) & (self.stages >= 0)
        self.subjects = np.asarray(self.subjects, dtype=object)
        n = len(self.signals)
        if not (len(self.stages) == len(self.labeled) == len(self.subjects) == n):
            raise DataError("trial set fields have different lengths")

    def __len__(self):
        return len(self.signals)

    def subset(self, idx) -> "TrialSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TrialSet(self.signals[idx], self.stages[idx], self.labeled[idx],
                        self.subjects[idx], self.geo)

    def batch(self, idx) -> np.ndarray:
        return slice_trials(self.signals[np.asarray(idx, dtype=np.int64)], self.geo)

    def slices(self) -> np.ndarray:
        return slice_trials(self.signals, self.geo)

    @property
    def labeled_index(self) -> np.ndarray:
        return np.flatnonzero(self.labeled)


# ---------------------------------------------------------- validation split


@dataclass(frozen=True)
class ValidationSplit:
    train: np.ndarray
    val: np.ndarray
    stratified: bool
    warning: Optional[str] = None


def _largest_remainder(counts, total):
    ideal = counts * (total / counts.sum())
    q = np.floor(ideal).astype(np.int64)
    short = total - int(q.sum())
    # stable order: biggest remainder first, then class index
    for j in np.lexsort((np.arange(len(counts)), -(ideal - q)))[:short]:
        q[j] += 1
    return q


def split_validation(stages, fraction: float = 0.1, seed=0) -> ValidationSplit:
    """Trial-level split stratified by stage; returns index arrays.

    The validation size is ``round(fraction * N)`` (at least 1, at most
    N - 1) and is shared among stages by largest remainder. When there are
    fewer validation slots than stages present the split falls back to a
    plain uniform draw and says so in ``warning``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    stages = np.asarray(stages, dtype=np.int64)
    n = len(stages)
    if n < 2:
        raise DataError(f"need at least 2 trials to split off validation data, got {n}")
    n_val = min(max(int(round(fraction * n)), 1), n - 1)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(stages, return_counts=True)
    if n_val < len(classes):
        warning = (f"{n_val} validation trials cannot cover {len(classes)} stages; "
                   "using an unstratified split")
        log.warning(warning)
        val = np.sort(rng.permutation(n)[:n_val])
        stratified = False
    else:
        quota = _largest_remainder(counts, n_val)
        parts = []
        for c, q in zip(classes, quota):
            rows = np.flatnonzero(stages == c)
            parts.append(rows[rng.permutation(len(rows))[:q]])
        val = np.sort(np.concatenate(parts))
        warning, stratified = None, True
    mask = np.zeros(n, dtype=bool)
    mask[val] = True
    return ValidationSplit(np.flatnonzero(~mask), val, stratified, warning)


# ------------------------------------------------------------------- history


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    train_L: float
    train_Lc: float
    train_Lmse: float
    val_loss: float = float("nan")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    selected_epoch: Optional[int] = None  # phase-2 epoch index

    def phase(self, p) -> list:
        return [r for r in self.records if r.phase == p]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "epoch", "train_L", "train_Lc", "train_Lmse", "val_loss", "selected"])
        for r in self.records:
            sel = int(r.phase == 2 and r.epoch == self.selected_epoch)
            w.writerow([r.phase, r.epoch, _fmt(r.train_L), _fmt(r.train_Lc), _fmt(r.train_Lmse),
                        _fmt(r.val_loss), sel])
        return buf.getvalue()

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt(v: float) -> str:
    return "" if v is None or math.isnan(v) else repr(float(v))


# ------------------------------------------------------------------ training


def _encoder_and_head_params(model: Network) -> list:
    dec = {id(p) for p in model.decoder_params()}
    return [p for p in model.params() if id(p) not in dec]


def validation_loss(model: Network, val: TrialSet, class_weights, batch_size=256) -> float:
    """Weighted cross-entropy over the labeled validation trials (inference mode)."""
    rows = val.labeled_index
    if rows.size == 0:
        raise DataError("validation set has no labeled trials")
    w = np.asarray(class_weights, dtype=np.float64)
    total = 0.0
    for i in range(0, rows.size, batch_size):
        idx = rows[i:i + batch_size]
        logp = nn.log_softmax(model.logits(val.batch(idx), training=False))
        y = val.stages[idx]
        total += float(np.sum(w[y] * -logp[np.arange(len(idx)), y]))
    return total / rows.size


def _epoch_order(seed, phase, epoch, n) -> np.ndarray:
    return np.random.default_rng([seed, phase, epoch]).permutation(n)


def _run_epoch(model, data: TrialSet, rows, opt, phase_cfg: PhaseConfig, phase, epoch,
               cfg: TrainConfig, fold=None):
    order = rows[_epoch_order(cfg.seed, phase, epoch, rows.size)]
    sums = np.zeros(3)
    for b, start in enumerate(range(0, order.size, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        x = data.batch(idx)
        y = np.where(data.labeled[idx], data.stages[idx], -1)
        res = compute_loss(model, x, y, data.labeled[idx], phase_cfg.class_weights,
                           use_mse=phase_cfg.use_mse, training=True, backward=True)
        if not math.isfinite(res.total):
            raise TrainingDivergence(phase, epoch, b, res.total, fold)
        opt.step()
        sums += len(idx) * np.array([res.total, res.classification, res.reconstruction])
    mean = sums / max(order.size, 1)
    return EpochRecord(phase, epoch, *map(float, mean))


def train_two_phase(model: Network, train: TrialSet, cfg: TrainConfig = TrainConfig(),
                    val: Optional[TrialSet] = None, fold=None):
    """Train ``model`` in place and load the selected phase-2 epoch into it.

    ``val`` defaults to a stratified split of the labeled training trials.
    Returns ``(selected state_dict, TrainHistory)``.
    """
    if val is None:
        lab = train.labeled_index
        split = split_validation(train.stages[lab], cfg.val_fraction, seed=[cfg.seed, 7])
        keep = np.ones(len(train), dtype=bool)
        keep[lab[split.val]] = False
        val = train.subset(lab[split.val])
        train = train.subset(np.flatnonzero(keep))
    if train.labeled_index.size == 0:
        raise DataError("no labeled training trials")
    history = TrainHistory()
    p1, p2 = cfg.phase1, cfg.phase2

    if p1.epochs:
        use_all = cfg.semi_supervised and p1.use_mse and model.has_decoder
        rows = np.arange(len(train)) if use_all else train.labeled_index
        opt = nn.Adam(model.params(), p1.lr)
        for epoch in range(p1.epochs):
            rec = _run_epoch(model, train, rows, opt, p1, 1, epoch, cfg, fold)
            history.records.append(rec)
            log.info("phase 1 epoch %d: L=%.4f Lc=%.4f Lmse=%.4f", epoch, rec.train_L,
                     rec.train_Lc, rec.train_Lmse)

    best_state = model.state_dict()
    if p2.epochs:
        if val.labeled_index.size == 0:
            raise DataError("validation set has no labeled trials")
        rows = train.labeled_index
        opt = nn.Adam(_encoder_and_head_params(model), p2.lr)
        best = math.inf
        for epoch in range(p2.epochs):
            rec = _run_epoch(model, train, rows, opt, p2, 2, epoch, cfg, fold)
            rec.val_loss = validation_loss(model, val, p2.class_weights)
            history.records.append(rec)
            log.info("phase 2 epoch %d: Lc=%.4f val=%.4f", epoch, rec.train_Lc, rec.val_loss)
            if rec.val_loss < best:
                best, history.selected_epoch = rec.val_loss, epoch
                best_state = model.state_dict()
        model.load_state_dict(best_state)
    return best_state, history


__all__ = [
    "WEIGHT_PRESETS", "PhaseConfig", "TrainConfig", "reduced_schedule", "class_weight_vector",
    "TrialSet", "ValidationSplit", "split_validation", "EpochRecord", "TrainHistory",
    "validation_loss", "train_two_phase",
]
