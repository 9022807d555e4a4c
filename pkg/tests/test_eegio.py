import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lgsleep import eegio
from lgsleep.eegio import LabelTrack, Recording, Stage, SynthConfig
from lgsleep.errors import DataError, FormatError


def test_single_sample_round_trip(tmp_path):
    rec = Recording("a", np.array([0.0]))
    eegio.save_recording(rec, tmp_path / "a.lgs")
    assert eegio.load_recording(tmp_path / "a.lgs") == rec


def test_header_fields(tmp_path):
    rec = Recording("S01", np.zeros(5120), fs=512.0)
    p = tmp_path / "s.lgs"
    eegio.save_recording(rec, p)
    blob = p.read_bytes()
    magic, version, id_len = struct.unpack_from("<4sIH", blob, 0)
    fs, n_ch, n = struct.unpack_from("<dIQ", blob, 10 + id_len)
    assert (magic, version, id_len, fs, n_ch, n) == (b"LGS1", 1, 3, 512.0, 1, 5120)
    assert len(blob) == 10 + 3 + 20 + 4 * 5120


def test_random_round_trip_bit_exact(tmp_path):
    x = np.random.default_rng(0).standard_normal(10_000).astype(np.float32)
    rec = Recording("rnd", x, fs=256.0)
    eegio.save_recording(rec, tmp_path / "r.lgs")
    back = eegio.load_recording(tmp_path / "r.lgs")
    assert back.samples.tobytes() == x.tobytes() and back.fs == 256.0


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.integers(1, 300), elements=st.floats(-1e6, 1e6, width=32)),
       st.text(min_size=0, max_size=12))
def test_round_trip_property(tmp_path_factory, x, sid):
    p = tmp_path_factory.mktemp("rt") / "x.lgs"
    rec = Recording(sid, x, fs=512.0)
    eegio.save_recording(rec, p)
    assert eegio.load_recording(p) == rec


def test_load_rejects_bad_files(tmp_path):
    p = tmp_path / "ok.lgs"
    eegio.save_recording(Recording("s", np.ones(8)), p)
    blob = p.read_bytes()
    cases = {
        "magic": b"XXXX" + blob[4:],
        "version": blob[:4] + struct.pack("<I", 2) + blob[8:],
        "truncated": blob[:-4],
        "short": blob[:6],
    }
    for name, data in cases.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(FormatError):
            eegio.load_recording(tmp_path / name)
    nan = bytearray(blob)
    nan[-4:] = struct.pack("<f", float("nan"))
    (tmp_path / "nan").write_bytes(bytes(nan))
    with pytest.raises(DataError):
        eegio.load_recording(tmp_path / "nan")


def test_recording_validation():
    with pytest.raises(DataError):
        Recording("s", np.array([1.0, np.inf]))
    with pytest.raises(DataError):
        Recording("s", np.zeros(0))
    with pytest.raises(DataError):
        Recording("s", np.zeros(4), fs=0.0)


def test_parse_labels_examples():
    assert eegio.parse_labels("0,W\n1,NR\n2,R").stages == (Stage.WAKE, Stage.NREM, Stage.REM)
    assert len(eegio.parse_labels("epoch_index,stage\n0,R\n")) == 1
    for bad in ("0,X", "0,W\n2,NR", "1,W", "0,W,extra", "a,W"):
        with pytest.raises(FormatError):
            eegio.parse_labels(bad)


def test_label_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    track = LabelTrack(tuple(Stage(int(s)) for s in rng.integers(0, 3, 100)))
    eegio.save_labels(track, tmp_path / "l.csv")
    assert eegio.load_labels(tmp_path / "l.csv") == track
    assert (tmp_path / "l.csv").read_text().startswith("epoch_index,stage\n0,")


def test_label_track_must_fit():
    rec = Recording("s", np.zeros(5120 * 2), fs=512.0)
    LabelTrack((Stage.WAKE, Stage.REM)).check_fits(rec)
    with pytest.raises(DataError):
        LabelTrack((Stage.WAKE,) * 3).check_fits(rec)


def test_dataset_dir_round_trip(tmp_path):
    pairs = eegio.synth_dataset(SynthConfig(n_subjects=2, minutes_per_subject=1.0))
    eegio.save_dataset(pairs, tmp_path)
    back = eegio.load_dataset(tmp_path)
    assert [(r, t) for r, t in back] == [(Recording(r.subject_id, r.samples, r.fs), t) for r, t in pairs]
    with pytest.raises(DataError):
        eegio.load_dataset(tmp_path / "empty")


def test_synth_degenerate_mix():
    pairs = eegio.synth_dataset(SynthConfig(n_subjects=2, minutes_per_subject=2.0, class_mix=(1, 0, 0)))
    assert all(s == Stage.WAKE for _, t in pairs for s in t.stages)


def test_synth_default_stage_fractions():
    pairs = eegio.synth_dataset(SynthConfig())
    stages = np.concatenate([t.as_array() for _, t in pairs])
    assert stages.size == 16 * 360
    frac = np.bincount(stages, minlength=3) / stages.size
    assert np.all(np.abs(frac - np.array([0.34, 0.58, 0.08])) <= 0.05)


def test_synth_deterministic_and_seed_sensitive():
    cfg = SynthConfig(n_subjects=2, minutes_per_subject=1.0, seed=3)
    a, b = eegio.synth_dataset(cfg), eegio.synth_dataset(cfg)
    assert all(ra.samples.tobytes() == rb.samples.tobytes() and ta == tb for (ra, ta), (rb, tb) in zip(a, b))
    c = eegio.synth_dataset(SynthConfig(n_subjects=2, minutes_per_subject=1.0, seed=4))
    assert a[0][0].samples.tobytes() != c[0][0].samples.tobytes()


def test_synth_class_signatures():
    rec, track = eegio.synth_recording(SynthConfig(minutes_per_subject=10.0, noise_sigma=0.0), 0)
    x = rec.samples.astype(np.float64).reshape(len(track), -1)
    y = track.as_array()
    freqs = np.fft.rfftfreq(x.shape[1], 1 / rec.fs)
    peak = freqs[np.abs(np.fft.rfft(x, axis=1)).argmax(axis=1)]
    for st_, (lo, hi, amp) in eegio.SYNTH_SIGNATURES.items():
        sel = y == int(st_)
        if sel.any():
            assert np.all((peak[sel] >= lo) & (peak[sel] <= hi))
            np.testing.assert_allclose(x[sel].std(axis=1), amp, rtol=1e-5)


def test_synth_config_validation():
    for kw in ({"class_mix": (0.5, 0.5, 0.5)}, {"class_mix": (-0.1, 1.0, 0.1)}, {"n_subjects": 0}):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


def _fake_index(sizes):
    ents = []
    for s, n in enumerate(sizes):
        ents += [eegio.IndexEntry(f"S{s:02d}", i * 5120, Stage(i % 3)) for i in range(n)]
    return eegio.DatasetIndex(tuple(ents))


@pytest.mark.parametrize("fraction,want", [(0.25, 3457), (0.5, 6914), (1.0, 13828)])
def test_subsample_reference_counts(fraction, want):
    idx = _fake_index([864] * 15 + [868])
    assert idx.N == 13828
    sub = eegio.subsample_labels(idx, fraction, seed=1)
    assert sub.N == 13828 and sub.N_l == want


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=1, max_size=6), st.floats(0.01, 1.0), st.integers(0, 99))
def test_subsample_properties(sizes, fraction, seed):
    idx = _fake_index(sizes)
    sub = eegio.subsample_labels(idx, fraction, seed)
    assert sub.N == idx.N
    assert sub.N_l == int(np.floor(fraction * idx.N + 1e-9))
    assert [(e.subject_id, e.trial_offset, e.stage) for e in sub.entries] == \
        [(e.subject_id, e.trial_offset, e.stage) for e in idx.entries]
    # per-subject quotas stay within one of the proportional share
    for s, n in zip(idx.subjects, sizes):
        got = sum(e.labeled for e in sub.entries if e.subject_id == s)
        assert abs(got - fraction * n * (sub.N_l / (fraction * idx.N))) <= 1.0 + 1e-9


def test_subsample_rejects_bad_fraction():
    idx = _fake_index([10])
    for bad in (0.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            eegio.subsample_labels(idx, bad)


def test_build_index_offsets():
    pairs = eegio.synth_dataset(SynthConfig(n_subjects=2, minutes_per_subject=1.0))
    idx = eegio.build_index(pairs)
    assert idx.N == 12 and idx.N_l == 12 and idx.subjects == ["S00", "S01"]
    assert [e.trial_offset for e in idx.entries[:3]] == [0, 5120, 10240]
