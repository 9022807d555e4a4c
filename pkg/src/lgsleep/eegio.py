"""Recording and label persistence, dataset indexing, synthetic EEG.

Recordings are stored in the little-endian ``LGS1`` layout::

    magic "LGS1" | u32 version | u16 id_len | id (utf-8) | f64 fs
    | u32 n_channels | u64 n_samples | f32 * n_samples

Labels are a two-column CSV (``epoch_index,stage``) with stage tokens
``W``, ``NR`` and ``R``.
"""
from __future__ import annotations

import csv
import enum
import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, FormatError

MAGIC = b"LGS1"
VERSION = 1
DEFAULT_FS = 512.0
EPOCH_LEN_S = 10.0

_HEAD = struct.Struct("<4sIH")
_TAIL = struct.Struct("<dIQ")


class Stage(enum.IntEnum):
    """Vigilance state. Integer values are the class indices used by the model."""

    WAKE = 0
    NREM = 1
    REM = 2

    @property
    def token(self) -> str:
        return _TOKENS[self]

    @classmethod
    def from_token(cls, tok: str) -> "Stage":
        try:
            return _FROM_TOKEN[tok.strip()]
        except KeyError:
            raise FormatError(f"unknown stage token {tok!r}") from None


_TOKENS = {Stage.WAKE: "W", Stage.NREM: "NR", Stage.REM: "R"}
_FROM_TOKEN = {v: k for k, v in _TOKENS.items()}
STAGE_NAMES = ("Wake", "NREM", "REM")


@dataclass(frozen=True, eq=False)
class Recording:
    """One subject's continuous single-channel EEG.

    Samples are held as float32, the on-disk precision, so that a
    save/load cycle is the identity. Computation upcasts to float64.
    """

    subject_id: str
    samples: np.ndarray
    fs: float = DEFAULT_FS

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype="<f4").reshape(-1)
        if s.size < 1:
            raise DataError("recording must hold at least one sample")
        if not np.all(np.isfinite(s)):
            raise DataError(f"recording {self.subject_id!r} contains NaN or Inf")
        if not self.fs > 0:
            raise DataError(f"sampling rate must be positive, got {self.fs}")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "fs", float(self.fs))

    def __eq__(self, other):
        if not isinstance(other, Recording):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.fs == other.fs
            and self.samples.tobytes() == other.samples.tobytes()
        )

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.fs


@dataclass(frozen=True)
class LabelTrack:
    stages: tuple[Stage, ...]
    epoch_len_s: float = EPOCH_LEN_S

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(Stage(s) for s in self.stages))

    def __len__(self):
        return len(self.stages)

    def as_array(self) -> np.ndarray:
        return np.array([int(s) for s in self.stages], dtype=np.int64)

    def check_fits(self, rec: Recording):
        need = len(self.stages) * self.epoch_len_s * rec.fs
        if need > rec.samples.size:
            raise DataError(
                f"{len(self.stages)} epochs need {need:.0f} samples, "
                f"recording {rec.subject_id!r} has {rec.samples.size}"
            )


# --------------------------------------------------------------------- files


def save_recording(rec: Recording, path) -> None:
    sid = rec.subject_id.encode("utf-8")
    if len(sid) > 0xFFFF:
        raise ValueError("subject id longer than 65535 bytes")
    header = _HEAD.pack(MAGIC, VERSION, len(sid)) + sid
    header += _TAIL.pack(rec.fs, 1, rec.samples.size)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rec.samples.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write recording to {path}: {exc}") from exc


def load_recording(path) -> Recording:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEAD.size:
        raise FormatError(f"{path}: file too short for header")
    magic, version, id_len = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEAD.size
    if len(blob) < pos + id_len + _TAIL.size:
        raise FormatError(f"{path}: truncated header")
    sid = blob[pos:pos + id_len].decode("utf-8")
    pos += id_len
    fs, n_channels, n_samples = _TAIL.unpack_from(blob, pos)
    pos += _TAIL.size
    if n_channels != 1:
        raise FormatError(f"{path}: expected 1 channel, header says {n_channels}")
    payload = blob[pos:]
    if len(payload) != 4 * n_samples:
        raise FormatError(
            f"{path}: header claims {n_samples} samples, payload holds {len(payload) / 4:g}"
        )
    samples = np.frombuffer(payload, dtype="<f4").copy()
    if not np.all(np.isfinite(samples)):
        raise DataError(f"{path}: payload contains NaN or Inf")
    return Recording(sid, samples, fs)


def save_labels(track: LabelTrack, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_labels(track))


def format_labels(track: LabelTrack) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch_index", "stage"])
    for i, s in enumerate(track.stages):
        w.writerow([i, s.token])
    return buf.getvalue()


def parse_labels(text: str, epoch_len_s: float = EPOCH_LEN_S) -> LabelTrack:
    stages = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and row[0].strip() == "epoch_index":
            continue
        if len(row) != 2:
            raise FormatError(f"line {lineno}: expected 2 fields, got {len(row)}")
        try:
            idx = int(row[0])
        except ValueError:
            raise FormatError(f"line {lineno}: bad epoch index {row[0]!r}") from None
        if idx != len(stages):
            raise FormatError(
                f"line {lineno}: epoch index {idx} breaks contiguity (expected {len(stages)})"
            )
        stages.append(Stage.from_token(row[1]))
    return LabelTrack(tuple(stages), epoch_len_s)


def load_labels(path, epoch_len_s: float = EPOCH_LEN_S) -> LabelTrack:
    with open(path, newline="") as fh:
        return parse_labels(fh.read(), epoch_len_s)


def save_dataset(pairs, directory) -> list[Path]:
    """Write ``<subject>.lgs`` and ``<subject>.csv`` for every pair."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for rec, track in pairs:
        p = directory / f"{rec.subject_id}.lgs"
        save_recording(rec, p)
        save_labels(track, directory / f"{rec.subject_id}.csv")
        written.append(p)
    return written


def load_dataset(directory) -> list[tuple[Recording, LabelTrack]]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.lgs"))
    if not paths:
        raise DataError(f"no .lgs recordings in {directory}")
    out = []
    for p in paths:
        rec = load_recording(p)
        lab = p.with_suffix(".csv")
        if not lab.exists():
            raise DataError(f"missing label file {lab}")
        track = load_labels(lab)
        track.check_fits(rec)
        out.append((rec, track))
    return out


# ----------------------------------------------------------------- synthetic


# (low_hz, high_hz, amplitude) per stage; values are arbitrary but keep the
# classes separable: NREM slow and large, Wake fast, REM theta-range.
SYNTH_SIGNATURES = {
    Stage.WAKE: (15.0, 30.0, 1.0),
    Stage.NREM: (1.0, 4.0, 3.0),
    Stage.REM: (4.0, 8.0, 1.0),
}


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 16
    minutes_per_subject: float = 60.0
    class_mix: tuple[float, float, float] = (0.34, 0.58, 0.08)
    noise_sigma: float = 0.5
    seed: int = 0
    fs: float = DEFAULT_FS
    mean_run_epochs: float = 6.0

    def __post_init__(self):
        mix = tuple(float(p) for p in self.class_mix)
        if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"class_mix must be 3 nonnegative values summing to 1, got {mix}")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if self.minutes_per_subject <= 0:
            raise ValueError("minutes_per_subject must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.mean_run_epochs < 1:
            raise ValueError("mean_run_epochs must be >= 1")
        object.__setattr__(self, "class_mix", mix)


def _stage_sequence(rng: np.random.Generator, n: int, mix, mean_run: float) -> np.ndarray:
    # Runs of geometric length; each run's stage is a fresh draw from the mix,
    # so the stationary distribution equals the mix exactly.
    out = np.empty(n, dtype=np.int64)
    i = 0
    while i < n:
        run = int(rng.geometric(1.0 / mean_run))
        out[i:i + run] = rng.choice(3, p=mix)
        i += run
    return out


def _band_noise(rng: np.random.Generator, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    band = (freqs >= lo) & (freqs <= hi)
    spec = np.zeros(freqs.size, dtype=np.complex128)
    k = int(band.sum())
    spec[band] = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    x = np.fft.irfft(spec, n)
    return x / x.std()


def synth_recording(cfg: SynthConfig, subject_index: int) -> tuple[Recording, LabelTrack]:
    rng = np.random.default_rng([cfg.seed, subject_index])
    epoch_n = int(round(EPOCH_LEN_S * cfg.fs))
    n_epochs = int(cfg.minutes_per_subject * 60 / EPOCH_LEN_S)
    stages = _stage_sequence(rng, n_epochs, cfg.class_mix, cfg.mean_run_epochs)
    x = np.empty(n_epochs * epoch_n, dtype=np.float64)
    for e, st in enumerate(stages):
        lo, hi, amp = SYNTH_SIGNATURES[Stage(st)]
        seg = amp * _band_noise(rng, epoch_n, cfg.fs, lo, hi)
        seg += cfg.noise_sigma * rng.standard_normal(epoch_n)
        x[e * epoch_n:(e + 1) * epoch_n] = seg
    rec = Recording(f"S{subject_index:02d}", x, cfg.fs)
    return rec, LabelTrack(tuple(Stage(s) for s in stages))


def synth_dataset(cfg: SynthConfig) -> list[tuple[Recording, LabelTrack]]:
    """Generate one labeled recording per subject; a pure function of ``cfg``."""
    return [synth_recording(cfg, i) for i in range(cfg.n_subjects)]


# ------------------------------------------------------------------- indexing


@dataclass(frozen=True)
class IndexEntry:
    subject_id: str
    trial_offset: int
    stage: Stage
    labeled: bool = True


@dataclass(frozen=True)
class DatasetIndex:
    entries: tuple[IndexEntry, ...]

    @property
    def N(self) -> int:
        return len(self.entries)

    @property
    def N_l(self) -> int:
        return sum(e.labeled for e in self.entries)

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})

    def labeled_mask(self) -> np.ndarray:
        return np.array([e.labeled for e in self.entries], dtype=bool)


def build_index(pairs: Sequence[tuple[Recording, LabelTrack]]) -> DatasetIndex:
    entries = []
    for rec, track in pairs:
        track.check_fits(rec)
        step = int(round(track.epoch_len_s * rec.fs))
        entries.extend(
            IndexEntry(rec.subject_id, i * step, s, True) for i, s in enumerate(track.stages)
        )
    return DatasetIndex(tuple(entries))


def _quotas(counts: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    # Largest-remainder allocation; ties among remainders broken at random.
    ideal = counts * (total / counts.sum())
    q = np.minimum(np.floor(ideal).astype(np.int64), counts)
    short = total - int(q.sum())
    if short > 0:
        rem = ideal - q
        order = np.lexsort((rng.random(counts.size), -rem))
        for j in order:
            if short == 0:
                break
            if q[j] < counts[j]:
                q[j] += 1
                short -= 1
    return q


def subsample_labels(index: DatasetIndex, fraction: float, seed=0) -> DatasetIndex:
    """Flag exactly ``floor(fraction * N)`` entries as labeled.

    Sampling is uniform without replacement inside each subject, with the
    per-subject quotas proportional to subject size.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = index.N
    total = int(np.floor(fraction * n + 1e-9)) if fraction < 1.0 else n
    rng = np.random.default_rng(seed)
    subjects = index.subjects
    rows = {s: [] for s in subjects}
    for i, e in enumerate(index.entries):
        rows[e.subject_id].append(i)
    counts = np.array([len(rows[s]) for s in subjects], dtype=np.int64)
    quota = _quotas(counts, total, rng)
    flags = np.zeros(n, dtype=bool)
    for s, q in zip(subjects, quota):
        pick = rng.choice(len(rows[s]), size=int(q), replace=False)
        flags[np.asarray(rows[s])[pick]] = True
    entries = tuple(replace(e, labeled=bool(f)) for e, f in zip(index.entries, flags))
    return DatasetIndex(entries)
