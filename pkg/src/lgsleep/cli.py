"""Command-line entry point: ``lgsleep <command> [flags]``.

Configuration is an INI file with the sections of ``DEFAULTS``; command-line
flags override single values. Every output is a CSV/SVG/checkpoint written
under ``output_dir``; nothing is written into ``data_dir`` except by ``synth``.

Exit codes: 0 ok, 1 usage/configuration, 2 data, 3 training divergence.
"""
import argparse
import configparser
import io
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dsp, eegio, evaluation as E, model as M, nn, train as T
from .errors import DataError, FormatError, LGSleepError, TrainingDivergence

log = logging.getLogger("lgsleep")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

DEFAULTS = {
    "paths": {"data_dir": "data", "output_dir": "out"},
    "data": {"subband": "wide", "notch": "false", "label_fraction": "1.0"},
    "model": {"backbone": "LGSleep", "preset": "desk"},
    "train": {
        "phase1_epochs": "20", "phase1_lr": "1e-4",
        "phase2_epochs": "100", "phase2_lr": "1e-3",
        "class_weights": "nrem_up", "batch_size": "32", "val_fraction": "0.1",
        "semi_supervised": "true",
    },
    "experiment": {
        "seed": "0", "folds": "4", "repeats": "4", "jobs": "1",
        "subbands": " ".join(dsp.SUBBANDS),
        "label_fractions": "0.25 0.5 1.0",
        "backbones": " ".join(M.BACKBONES),
    },
    "synth": {"n_subjects": "16", "minutes": "60", "noise_sigma": "0.5", "seed": "0"},
}


class ConfigError(LGSleepError):
    pass


@dataclass(frozen=True)
class RunConfig:
    data_dir: Path
    output_dir: Path
    subband: str
    notch: bool
    label_fraction: float
    backbone: str
    preset: str
    phase1_epochs: int
    phase1_lr: float
    phase2_epochs: int
    phase2_lr: float
    class_weights: tuple
    batch_size: int
    val_fraction: float
    semi_supervised: bool
    seed: int
    folds: int
    repeats: int
    jobs: int
    subbands: tuple
    label_fractions: tuple
    backbones: tuple
    synth_subjects: int
    synth_minutes: float
    synth_noise: float
    synth_seed: int

    def train_config(self) -> T.TrainConfig:
        return T.TrainConfig(
            T.PhaseConfig(self.phase1_epochs, self.phase1_lr, True, T.WEIGHT_PRESETS["equal"]),
            T.PhaseConfig(self.phase2_epochs, self.phase2_lr, False, self.class_weights),
            self.batch_size, self.val_fraction, self.seed, self.semi_supervised)

    def setup(self, **kw) -> E.ExperimentSetup:
        base = dict(backbone=self.backbone, label_fraction=self.label_fraction, train=self.train_config(),
                    model=M.PRESETS[self.preset], seed=self.seed)
        return E.ExperimentSetup(**{**base, **kw})

    def synth_config(self) -> eegio.SynthConfig:
        return eegio.SynthConfig(n_subjects=self.synth_subjects, minutes_per_subject=self.synth_minutes,
                                 noise_sigma=self.synth_noise, seed=self.synth_seed)


# ------------------------------------------------------------------ parsing


def _field(section, key, conv, raw):
    try:
        return conv(raw)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"{section}.{key}: {e}") from None


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _subband(s):
    s = s.strip()
    if s not in dsp.SUBBANDS:
        raise ValueError(f"unknown subband {s!r} (choose from {', '.join(dsp.SUBBANDS)})")
    return s


def _backbone(s):
    s = s.strip()
    if s not in M.BACKBONES:
        raise ValueError(f"unknown backbone {s!r} (choose from {', '.join(M.BACKBONES)})")
    return s


def _preset(s):
    s = s.strip().lower()
    if s not in M.PRESETS:
        raise ValueError(f"unknown model preset {s!r} (choose from {', '.join(M.PRESETS)})")
    return s


def _fraction(s):
    v = float(s)
    if not 0.0 < v <= 1.0:
        raise ValueError(f"label fraction must lie in (0, 1], got {v}")
    return v


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise ValueError(f"must be >= 1, got {v}")
    return v


def _weights(s):
    s = s.strip()
    if s in T.WEIGHT_PRESETS:
        return T.WEIGHT_PRESETS[s]
    w = tuple(float(v) for v in s.replace(",", " ").split())
    if len(w) != 3 or min(w) <= 0:
        raise ValueError(f"class_weights must be a preset ({', '.join(T.WEIGHT_PRESETS)}) "
                         f"or three positive numbers, got {s!r}")
    return w


def _listof(conv):
    def parse(s):
        items = tuple(conv(v) for v in s.replace(",", " ").split())
        if not items:
            raise ValueError("empty list")
        return items
    return parse


_SCHEMA = {
    ("paths", "data_dir"): ("data_dir", Path),
    ("paths", "output_dir"): ("output_dir", Path),
    ("data", "subband"): ("subband", _subband),
    ("data", "notch"): ("notch", _bool),
    ("data", "label_fraction"): ("label_fraction", _fraction),
    ("model", "backbone"): ("backbone", _backbone),
    ("model", "preset"): ("preset", _preset),
    ("train", "phase1_epochs"): ("phase1_epochs", int),
    ("train", "phase1_lr"): ("phase1_lr", float),
    ("train", "phase2_epochs"): ("phase2_epochs", int),
    ("train", "phase2_lr"): ("phase2_lr", float),
    ("train", "class_weights"): ("class_weights", _weights),
    ("train", "batch_size"): ("batch_size", _positive_int),
    ("train", "val_fraction"): ("val_fraction", float),
    ("train", "semi_supervised"): ("semi_supervised", _bool),
    ("experiment", "seed"): ("seed", int),
    ("experiment", "folds"): ("folds", _positive_int),
    ("experiment", "repeats"): ("repeats", _positive_int),
    ("experiment", "jobs"): ("jobs", _positive_int),
    ("experiment", "subbands"): ("subbands", _listof(_subband)),
    ("experiment", "label_fractions"): ("label_fractions", _listof(_fraction)),
    ("experiment", "backbones"): ("backbones", _listof(_backbone)),
    ("synth", "n_subjects"): ("synth_subjects", _positive_int),
    ("synth", "minutes"): ("synth_minutes", float),
    ("synth", "noise_sigma"): ("synth_noise", float),
    ("synth", "seed"): ("synth_seed", int),
}


def default_config_text() -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the INI file, then ``overrides`` keyed ``section.key``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        user = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                user.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from None
        for sec in user.sections():
            if sec not in DEFAULTS:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, val in user.items(sec, raw=True):
                if key not in DEFAULTS[sec]:
                    raise ConfigError(f"unknown config key {sec}.{key}")
                cp.set(sec, key, val)
    for dotted, val in (overrides or {}).items():
        sec, key = dotted.split(".")
        cp.set(sec, key, str(val))
    vals = {name: _field(sec, key, conv, cp.get(sec, key)) for (sec, key), (name, conv) in _SCHEMA.items()}
    cfg = RunConfig(**vals)
    try:
        cfg.train_config()
        cfg.synth_config()
    except ValueError as e:
        raise ConfigError(f"train/synth: {e}") from None
    return cfg


def config_text(cfg: RunConfig) -> str:
    """INI text that reloads to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    v = asdict(cfg)
    out = {sec: {} for sec in DEFAULTS}
    for (sec, key), (name, _) in _SCHEMA.items():
        x = v[name]
        if isinstance(x, tuple):
            x = " ".join(f"{i:g}" if isinstance(i, float) else str(i) for i in x)
        elif isinstance(x, bool):
            x = str(x).lower()
        out[sec][key] = str(x)
    cp.read_dict(out)
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------- helpers


def _need_data_dir(cfg: RunConfig):
    if not cfg.data_dir.is_dir():
        raise DataError(f"data_dir {cfg.data_dir} does not exist")


def _out(cfg: RunConfig, name: str) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir / name


def _write(path: Path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)
    log.info("wrote %s", path)


def _subjects(cfg: RunConfig, band: str) -> dict:
    _need_data_dir(cfg)
    return E.prepare_subjects(eegio.load_dataset(cfg.data_dir), band, cfg.notch)


def _plan(cfg: RunConfig, subjects: dict, repeats=None) -> E.FoldPlan:
    return E.subject_out_folds(sorted(subjects), cfg.folds, repeats or cfg.repeats, seed=cfg.seed)


def _folds_csv(reports) -> str:
    return "".join(r.to_csv() if i == 0 else r.to_csv().split("\n", 1)[1] for i, r in enumerate(reports))


def save_trial_cache(path, trials: T.TrialSet, stats: dsp.Standardizer, band: str):
    np.savez(path, signals=trials.signals.astype(np.float32), stages=trials.stages,
             subjects=trials.subjects.astype(str), mean=stats.mean, std=stats.std,
             band=band, geometry=np.array([trials.geo.trial_len, trials.geo.slice_len, trials.geo.hop]))


def load_trial_cache(path) -> T.TrialSet:
    with np.load(path) as z:
        geo = dsp.Geometry(*(int(v) for v in z["geometry"]))
        stages = z["stages"]
        return T.TrialSet(z["signals"].astype(np.float64), stages, np.ones(len(stages), dtype=bool),
                          z["subjects"].astype(object), geo)


# --------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, args) -> int:
    pairs = eegio.synth_dataset(cfg.synth_config())
    paths = eegio.save_dataset(pairs, cfg.data_dir)
    n = sum(len(t) for _, t in pairs)
    print(f"wrote {len(pairs)} subjects, {n} epochs to {cfg.data_dir} ({len(paths)} files)")
    return EXIT_OK


def cmd_preprocess(cfg: RunConfig, args) -> int:
    subjects = _subjects(cfg, cfg.subband)
    ids = sorted(subjects)
    stats = E.fit_standardizer(subjects, ids)
    trials = E.assemble(subjects, ids, stats)
    path = _out(cfg, f"trials_{cfg.subband}.npz")
    save_trial_cache(path, trials, stats, cfg.subband)
    shape = trials.slices()[:1].shape[1:]
    print(f"cached {len(trials)} trials of shape {shape} to {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    subjects = _subjects(cfg, cfg.subband)
    fold = _plan(cfg, subjects, repeats=1).folds()[0]
    r = E.run_fold(subjects, fold, cfg.setup(), keep_model=True)
    _write(_out(cfg, "history.csv"), r.history_csv)
    extra = {"subband": cfg.subband, "notch": cfg.notch, "mean": r.standardizer.mean,
             "std": r.standardizer.std, "test_subjects": list(fold.test_subjects)}
    M.save_checkpoint(_out(cfg, "model.lgsw"), r.model, extra=extra)
    report = E.ExperimentReport(f"{cfg.backbone}-{cfg.subband}-{cfg.label_fraction:g}", [r],
                                cfg.backbone, cfg.subband, cfg.label_fraction)
    _write(_out(cfg, "train_report.csv"), report.to_csv())
    _write(_out(cfg, "train_confusion.csv"), E.confusion_csv([report]))
    print(f"test subjects {','.join(fold.test_subjects)}: accuracy {r.accuracy:.4f} macro F1 {r.macro_f1:.4f}")
    return EXIT_OK


def _sweep(cfg, band_subjects, variants, tag_fn):
    reports = []
    for band, setup in variants:
        subj = band_subjects(band)
        reports.append(E.run_experiment(subj, _plan(cfg, subj), setup, tag=tag_fn(band, setup),
                                        jobs=cfg.jobs, subband=band))
    return reports


def _cached_loader(cfg):
    cache = {}

    def get(band):
        if band not in cache:
            cache[band] = _subjects(cfg, band)
        return cache[band]
    return get


def cmd_evaluate(cfg: RunConfig, args) -> int:
    get = _cached_loader(cfg)
    bands = _sweep(cfg, get, [(b, cfg.setup()) for b in cfg.subbands],
                   lambda b, s: f"{s.backbone}-{b}")
    _write(_out(cfg, "subbands.csv"), E.comparison_csv(bands))
    _write(_out(cfg, "subbands_folds.csv"), _folds_csv(bands))
    ref = next((r for r in bands if r.subband == "wide"), bands[-1])
    _write(_out(cfg, "subbands_ttest.csv"), E.t_test_csv(bands, ref))
    fracs = _sweep(cfg, get, [(cfg.subband, cfg.setup(label_fraction=f)) for f in cfg.label_fractions],
                   lambda b, s: f"{s.backbone}-{b}-{s.label_fraction:g}")
    _write(_out(cfg, "label_fractions.csv"), E.comparison_csv(fracs))
    _write(_out(cfg, "label_fractions_folds.csv"), _folds_csv(fracs))
    _write(_out(cfg, "confusion.csv"), E.confusion_csv(bands + fracs))
    for r in bands + fracs:
        print(f"{r.tag}: macro F1 {r.mean('macro_f1'):.4f} ± {r.std('macro_f1'):.4f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    get = _cached_loader(cfg)
    reports = _sweep(cfg, get, [(cfg.subband, cfg.setup(backbone=b)) for b in cfg.backbones],
                     lambda b, s: s.backbone)
    _write(_out(cfg, "ablation.csv"), E.comparison_csv(reports))
    _write(_out(cfg, "ablation_folds.csv"), _folds_csv(reports))
    _write(_out(cfg, "ablation_confusion.csv"), E.confusion_csv(reports))
    ref = next((r for r in reports if r.backbone == "LGSleep"), reports[0])
    _write(_out(cfg, "ablation_ttest.csv"), E.t_test_csv(reports, ref))
    for r in reports:
        print(f"{r.tag}: macro F1 {r.mean('macro_f1'):.4f} ± {r.std('macro_f1'):.4f}")
    return EXIT_OK


def cmd_score(cfg: RunConfig, args) -> int:
    net, _, extra = M.load_checkpoint(args.model)
    rec = eegio.load_recording(args.recording)
    track = eegio.load_labels(args.labels) if args.labels else None
    band = extra.get("subband", cfg.subband)
    x = dsp.preprocess_signal(rec.samples, rec.fs, band, bool(extra.get("notch", cfg.notch)))
    sig = dsp.trial_signals(x, rec.fs)
    if len(sig) == 0:
        raise DataError(f"{args.recording} is shorter than one trial")
    stats = dsp.Standardizer(extra["mean"], extra["std"]) if "mean" in extra else dsp.Standardizer.fit(sig)
    trials = T.TrialSet(stats.apply(sig), np.zeros(len(sig), dtype=np.int64), np.ones(len(sig), dtype=bool),
                        np.full(len(sig), rec.subject_id, dtype=object), dsp.geometry(rec.fs))
    pred, _ = M.predict(net, trials.slices())
    true = None
    if track is not None:
        track.check_fits(rec)
        true = track.as_array()[:len(pred)]
    stem = args.out or f"hypnogram_{rec.subject_id or 'recording'}"
    E.hypnogram_export(true, pred, _out(cfg, stem + ".csv"), _out(cfg, stem + ".svg"))
    counts = np.bincount(pred, minlength=3)
    msg = ", ".join(f"{n} {c}" for n, c in zip(eegio.STAGE_NAMES, counts))
    if true is not None:
        cm = E.confusion(true, pred)
        msg += f"; accuracy {E.accuracy(cm):.4f} macro F1 {E.macro_f1(cm):.4f}"
    print(f"scored {len(pred)} epochs: {msg}")
    return EXIT_OK


def gradcheck_report(seed=0, max_coords=200, tol=1e-4):
    """Full LG-Sleep loss on a (2,19,512,1) microbatch; returns ``{layer: max rel error}``."""
    net = M.LGSleep(M.DESK, seed=seed)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 19, 512, 1))
    y = rng.integers(0, 3, 2)

    def f(back):
        net.reseed_dropout(seed + 7)
        r = M.lg_sleep_loss(net, x, y, phase=1, backward=back, terms=not back)
        return r.total if back else r.terms

    res = nn.grad_check(f, net.params(), max_coords=max_coords, seed=seed)
    layers = {}
    for name, err in res.per_param.items():
        layer = name.rsplit(".", 1)[0]
        layers[layer] = max(layers.get(layer, 0.0), err)
    return layers, res


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    layers, res = gradcheck_report(cfg.seed, args.coords)
    for layer, err in layers.items():
        print(f"{layer:<16} max rel error {err:.3e} {'ok' if err < args.tol else 'FAIL'}")
    worst = max(layers.values())
    print(f"{res.n_coords} coordinates, {res.n_kinks} skipped at kinks, worst {worst:.3e}, "
          f"{time.perf_counter() - t0:.1f} s")
    if worst >= args.tol:
        print(f"error: gradient check above tolerance {args.tol:g}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic corpus into data_dir"),
    "preprocess": (cmd_preprocess, "filter, segment and standardize; cache trials"),
    "train": (cmd_train, "train on one subject-out split; export history and checkpoint"),
    "evaluate": (cmd_evaluate, "cross-validated subband and label-fraction sweeps"),
    "ablate": (cmd_ablate, "cross-validated backbone comparison"),
    "score": (cmd_score, "score a recording with a saved model; hypnogram CSV/SVG"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every layer's gradients"),
}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps their unset
    # defaults from overwriting values given before the command name
    d = {"default": argparse.SUPPRESS} if suppress else {}
    c = argparse.ArgumentParser(add_help=False)
    c.add_argument("--config", type=Path, help="INI configuration file", **d)
    c.add_argument("--seed", type=int, **d)
    c.add_argument("--subband", help=f"one of {', '.join(dsp.SUBBANDS)}", **d)
    c.add_argument("--backbone", help=f"one of {', '.join(M.BACKBONES)}", **d)
    c.add_argument("--label-fraction", type=float, **d)
    c.add_argument("--jobs", type=int, help="parallel fold workers", **d)
    c.add_argument("--notch", action="store_true", help="apply a 50 Hz notch",
                   **(d or {"default": None}))
    c.add_argument("--data-dir", type=Path, **d)
    c.add_argument("--output-dir", type=Path, **d)
    c.add_argument("--print-config", action="store_true", help="print the effective config and exit", **d)
    c.add_argument("-v", "--verbose", action="store_true", **d)
    return c


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lgsleep", description="EEG sleep scoring pipeline",
                                parents=[_common(False)])
    sub = p.add_subparsers(dest="command")
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, parents=[_common(True)])
        if name == "score":
            sp.add_argument("model", type=Path)
            sp.add_argument("recording", type=Path)
            sp.add_argument("--labels", type=Path, help="label CSV for agreement metrics")
            sp.add_argument("--out", help="output file stem")
        if name == "gradcheck":
            sp.add_argument("--coords", type=int, default=200, help="coordinates per parameter")
            sp.add_argument("--tol", type=float, default=1e-4)
    return p


_OVERRIDES = {"seed": "experiment.seed", "subband": "data.subband", "backbone": "model.backbone",
              "label_fraction": "data.label_fraction", "jobs": "experiment.jobs", "notch": "data.notch",
              "data_dir": "paths.data_dir", "output_dir": "paths.output_dir"}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    overrides = {k: getattr(args, a) for a, k in _OVERRIDES.items() if getattr(args, a, None) is not None}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.print_config:
        sys.stdout.write(config_text(cfg))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command][0](cfg, args)
    except TrainingDivergence as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, LGSleepError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
