"""Exception types shared across the package."""


class LGSleepError(Exception):
    """Base class for all package errors."""


class FormatError(LGSleepError):
    """A file does not follow the expected binary or text layout."""


class DataError(LGSleepError):
    """Payload values are unusable (NaN, Inf, inconsistent lengths)."""


class ShapeError(LGSleepError, ValueError):
    """Array shapes do not match a layer or model contract."""


class UninitializedStatsError(LGSleepError):
    """Batch-norm inference requested before any running statistics exist."""


class TrainingDivergence(LGSleepError):
    """A non-finite loss was produced during training."""

    def __init__(self, phase, epoch, batch, loss, fold=None):
        self.phase = phase
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.fold = fold
        where = f"phase {phase}, epoch {epoch}, batch {batch}"
        if fold is not None:
            where = f"fold {fold}, " + where
        super().__init__(f"non-finite loss {loss!r} at {where}")
