"""IIR filter design, zero-phase filtering, subbands and trial segmentation."""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as _sps

from .eegio import LabelTrack, Recording, Stage
from .errors import DataError, ShapeError

TRIAL_S = 10.0
SLICE_MS = 1000.0
HOP_MS = 500.0

SUBBANDS = {
    "delta": (1.0, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "beta": (12.0, 29.0),
    "gamma": (30.0, 45.0),
    "wide": (1.0, 45.0),
}


@dataclass(frozen=True)
class FilterSOS:
    """Cascade of biquads; each row is ``(b0, b1, b2, a1, a2)`` with ``a0 = 1``."""

    sections: np.ndarray
    fs: float

    def __post_init__(self):
        s = np.asarray(self.sections, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != 5 or s.shape[0] < 1:
            raise ShapeError(f"sections must have shape (n>=1, 5), got {s.shape}")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "sections", s)

    @property
    def n_sections(self) -> int:
        return self.sections.shape[0]

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for a1, a2 in self.sections[:, 3:]])

    def is_stable(self, margin: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0 - margin))

    def as_scipy(self) -> np.ndarray:
        """The ``(n, 6)`` layout used by ``scipy.signal``."""
        s = self.sections
        return np.column_stack([s[:, :3], np.ones(len(s)), s[:, 3:]])

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response H(e^{jw}) at the given frequencies."""
        w = 2 * np.pi * np.asarray(freqs_hz, dtype=np.float64) / self.fs
        z1 = np.exp(-1j * w)
        z2 = z1 * z1
        h = np.ones_like(z1)
        for b0, b1, b2, a1, a2 in self.sections:
            h *= (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2)
        return h

    def gain(self, freqs_hz) -> np.ndarray:
        return np.abs(self.response(freqs_hz))


@dataclass(frozen=True)
class Subband:
    name: str
    low_hz: float
    high_hz: float

    def check(self, fs: float):
        if not 0 < self.low_hz < self.high_hz < fs / 2:
            raise ValueError(f"band {self.name} ({self.low_hz}-{self.high_hz} Hz) invalid at fs={fs}")


def subband_edges(name: str) -> tuple[float, float]:
    try:
        return SUBBANDS[name]
    except KeyError:
        raise ValueError(
            f"unknown subband {name!r}; expected one of {', '.join(SUBBANDS)}"
        ) from None


def subband(name: str) -> Subband:
    return Subband(name, *subband_edges(name))


# -------------------------------------------------------------------- design


def _check_edges(low_hz, high_hz, fs):
    if not 0 < low_hz < high_hz < fs / 2:
        raise ValueError(
            f"band edges must satisfy 0 < low < high < fs/2, got {low_hz}, {high_hz} at fs={fs}"
        )


@functools.lru_cache(maxsize=64)
def design_butterworth_bandpass(low_hz: float, high_hz: float, fs: float, order: int = 5) -> FilterSOS:
    """Butterworth bandpass as ``order`` second-order sections.

    The analog lowpass prototype is moved to the prewarped band and mapped
    through the bilinear transform, giving ``2 * order`` poles, ``order``
    zeros at z = 1 and ``order`` at z = -1.
    """
    _check_edges(low_hz, high_hz, fs)
    if order < 1:
        raise ValueError("order must be >= 1")
    fs2 = 2.0 * fs
    w1 = fs2 * np.tan(np.pi * low_hz / fs)
    w2 = fs2 * np.tan(np.pi * high_hz / fs)
    bw = w2 - w1
    w0sq = w1 * w2

    k = np.arange(1, order + 1)
    proto = np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    # s^2 - p*bw*s + w0^2 = 0 for every prototype pole p
    pb = proto * bw / 2
    disc = np.sqrt(pb * pb - w0sq)
    s_poles = np.concatenate([pb + disc, pb - disc])
    z_poles = (fs2 + s_poles) / (fs2 - s_poles)
    gain = np.real(bw ** order * fs2 ** order / np.prod(fs2 - s_poles))

    # Wide bands turn the real prototype pole into two real poles; those
    # share one section, every complex pole shares one with its conjugate.
    tol = 1e-10
    is_real = np.abs(z_poles.imag) <= tol * np.abs(z_poles)
    reals = np.sort(z_poles[is_real].real)
    upper = z_poles[~is_real & (z_poles.imag > 0)]
    if reals.size % 2 or upper.size + reals.size // 2 != order:
        raise ArithmeticError("pole pairing failed")
    denoms = [(-2.0 * p.real, abs(p) ** 2, abs(p)) for p in upper]
    for r1, r2 in reals.reshape(-1, 2):
        denoms.append((-(r1 + r2), r1 * r2, max(abs(r1), abs(r2))))
    denoms.sort(key=lambda d: d[2])
    sections = np.array([(1.0, 0.0, -1.0, a1, a2) for a1, a2, _ in denoms])
    sections[0, :3] *= gain
    return FilterSOS(sections, float(fs))


@functools.lru_cache(maxsize=16)
def design_notch(freq_hz: float = 50.0, q: float = 30.0, fs: float = 512.0) -> FilterSOS:
    if not 0 < freq_hz < fs / 2:
        raise ValueError(f"notch frequency must lie in (0, fs/2), got {freq_hz}")
    if q <= 0:
        raise ValueError("q must be positive")
    w0 = 2 * np.pi * freq_hz / fs
    beta = np.tan(w0 / q / 2)
    g = 1.0 / (1.0 + beta)
    c = np.cos(w0)
    sec = [g, -2 * g * c, g, -2 * g * c, 2 * g - 1]
    return FilterSOS(np.array([sec]), float(fs))


# ----------------------------------------------------------------- filtering


def sosfilt_zi(f: FilterSOS) -> np.ndarray:
    """Per-section initial state matching the steady state of a unit step."""
    zi = np.empty((f.n_sections, 2))
    scale = 1.0
    for i, (b0, b1, b2, a1, a2) in enumerate(f.sections):
        # transposed direct form II: z = A z + B x, solve (I - A) z = B
        A = np.array([[-a1, 1.0], [-a2, 0.0]])
        B = np.array([b1 - a1 * b0, b2 - a2 * b0])
        zi[i] = scale * np.linalg.solve(np.eye(2) - A, B)
        scale *= (b0 + b1 + b2) / (1.0 + a1 + a2)
    return zi


def pad_length(f: FilterSOS) -> int:
    return 3 * 2 * f.n_sections


def filtfilt(f: FilterSOS, x) -> np.ndarray:
    """Forward-backward filtering with odd-reflection padding.

    The recursion itself runs in ``scipy.signal.sosfilt``; padding, initial
    conditions and the two passes are done here.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("filtfilt expects a 1-D signal")
    pad = pad_length(f)
    if x.size <= pad:
        raise ValueError(f"signal of length {x.size} too short; need more than {pad} samples")
    ext = np.concatenate([2 * x[0] - x[pad:0:-1], x, 2 * x[-1] - x[-2:-pad - 2:-1]])
    sos = f.as_scipy()
    zi = sosfilt_zi(f)
    y, _ = _sps.sosfilt(sos, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = _sps.sosfilt(sos, y, zi=zi * y[0])
    return y[::-1][pad:-pad].copy()


def preprocess_signal(samples, fs: float, band: str = "wide", notch: bool = False) -> np.ndarray:
    """Optional 50 Hz notch, the 1-45 Hz cleaning band, then an optional subband."""
    x = np.asarray(samples, dtype=np.float64)
    if notch:
        x = filtfilt(design_notch(50.0, 30.0, fs), x)
    lo, hi = subband_edges("wide")
    x = filtfilt(design_butterworth_bandpass(lo, hi, fs, 5), x)
    if band != "wide":
        lo, hi = subband_edges(band)
        x = filtfilt(design_butterworth_bandpass(lo, hi, fs, 5), x)
    return x


# -------------------------------------------------------------- segmentation


@dataclass(frozen=True, eq=False)
class Trial:
    slices: np.ndarray
    stage: Optional[Stage] = None
    subject_id: str = ""

    def __post_init__(self):
        s = np.asarray(self.slices, dtype=np.float64)
        if s.ndim != 3 or s.shape[2] != 1:
            raise ShapeError(f"trial slices must be (n, l, 1), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise DataError("trial contains non-finite values")
        object.__setattr__(self, "slices", s)


@dataclass(frozen=True)
class Geometry:
    """Sample counts implied by the sampling rate and window durations."""

    trial_len: int
    slice_len: int
    hop: int

    @property
    def n_slices(self) -> int:
        return (self.trial_len - self.slice_len) // self.hop + 1


def geometry(fs: float, trial_s=TRIAL_S, slice_ms=SLICE_MS, hop_ms=HOP_MS) -> Geometry:
    vals = []
    for what, v in (("trial", fs * trial_s), ("slice", fs * slice_ms / 1000), ("hop", fs * hop_ms / 1000)):
        if abs(v - round(v)) > 1e-9 or v <= 0:
            raise ValueError(f"{what} length {v} samples is not a positive integer at fs={fs}")
        vals.append(int(round(v)))
    return Geometry(*vals)


def trial_signals(samples, fs: float, trial_s=TRIAL_S) -> np.ndarray:
    """Consecutive non-overlapping trial windows, shape ``(n_trials, trial_len)``."""
    x = np.asarray(samples, dtype=np.float64)
    n = int(round(fs * trial_s))
    k = x.size // n
    return x[:k * n].reshape(k, n)


def slice_trials(signals: np.ndarray, geo: Geometry) -> np.ndarray:
    """``(N, trial_len)`` -> ``(N, n_slices, slice_len, 1)`` overlapping slices."""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape[-1] != geo.trial_len:
        raise ShapeError(f"expected trial length {geo.trial_len}, got {signals.shape[-1]}")
    w = sliding_window_view(signals, geo.slice_len, axis=-1)[..., ::geo.hop, :]
    return np.ascontiguousarray(w[..., None])


def segment(
    rec: Recording,
    labels: Optional[LabelTrack] = None,
    trial_s: float = TRIAL_S,
    slice_ms: float = SLICE_MS,
    hop_ms: float = HOP_MS,
    samples=None,
) -> list[Trial]:
    """Cut a recording into labeled trials of overlapping slices.

    ``samples`` replaces the raw recording samples (e.g. a filtered copy).
    Trailing partial trials are dropped.
    """
    geo = geometry(rec.fs, trial_s, slice_ms, hop_ms)
    x = rec.samples if samples is None else samples
    sig = trial_signals(x, rec.fs, trial_s)
    if len(sig) == 0:
        return []
    sl = slice_trials(sig, geo)
    stages = labels.stages if labels is not None else ()
    return [
        Trial(sl[i], stages[i] if i < len(stages) else None, rec.subject_id)
        for i in range(len(sl))
    ]


# ----------------------------------------------------------- standardization


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float
    eps: float = 1e-8

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(float(x.mean()), float(x.std()))

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / (self.std + self.eps)


def standardize(trials, stats: Optional[Standardizer] = None):
    """Z-score trials (an array or a list of :class:`Trial`).

    Statistics are fitted on the input when ``stats`` is None; pass the
    training-set statistics when standardizing held-out data.
    """
    if isinstance(trials, np.ndarray):
        stats = stats or Standardizer.fit(trials)
        return stats.apply(trials), stats
    trials = list(trials)
    if not trials:
        return [], stats
    if stats is None:
        stats = Standardizer.fit(np.stack([t.slices for t in trials]))
    out = [Trial(stats.apply(t.slices), t.stage, t.subject_id) for t in trials]
    return out, stats
