"""Command-line surface for the seizure-detection pipeline.

Subcommands: synth | preprocess | train | eval | loo | sweep | rf | heatmap.

Every setting lives in a flat key=value namespace (`section.field` keys,
`#` comments in config files).  Precedence: built-in defaults, then
`--config FILE`, then command-line flags.  Each run writes its fully
resolved configuration to `config.txt` in the output directory; rerunning
from that file reproduces the run's CSV outputs byte-for-byte.

With `--stdout`, the subcommand's primary table is also written to
standard output as CSV and status chatter is suppressed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autograd import AutogradError
from .eeg_data import (
    WEAK_ONLY,
    AnnotationSet,
    FormatError,
    SynthConfig,
    load_annotations,
    load_record,
    synth_dataset,
    write_annotations,
    write_record,
)
from .fcn_model import Fcn1d, Fcn2d, FcnConfig, load_model, receptive_field, save_model
from .metrics import MetricsError, RocCurve, aggregate, roc_curve, write_roc_csv
from .postproc import PostprocConfig, postprocess_chain, write_trace_csv
from .preprocess import PreprocessConfig, preprocess_record, segment_windows
from .trainer import (
    TrainConfig,
    _split_by_subject,
    evaluate_record,
    loo_harness,
    make_samples_strong,
    make_samples_weak,
    predict_chunked,
    train_model,
)

# ---------------------------------------------------------------------------
# run configuration

_SECTIONS = (
    ("synth", SynthConfig),
    ("preprocess", PreprocessConfig),
    ("fcn", FcnConfig),
    ("train", TrainConfig),
    ("postproc", PostprocConfig),
)

_TOP_DEFAULTS = {
    "seed": 0,           # propagated to synth.seed / fcn.seed / train.seed
    "out": "",           # output directory
    "mode": "fcn1d",     # fcn1d | fcn2d
    "data": "",          # dataset directory of .neeg records (+ .ann files)
    "model": "",         # model file for eval/heatmap
    "record": "",        # single-record path for eval/heatmap
    "annotations": "",   # annotation file accompanying --record
    "blocks": "",        # int or range like 1..5 (rf/sweep take ranges)
    "pool_stride": "",   # int or range like 1..3
    "repeats": 3,        # LOO repetitions per sweep grid point
    "train_shift": 0.0,  # training extraction stride in s; 0 = window_shift
    "stdout": False,
}


def _default_values() -> dict:
    values = dict(_TOP_DEFAULTS)
    for prefix, cls in _SECTIONS:
        inst = cls()
        for f in dataclasses.fields(cls):
            values[f"{prefix}.{f.name}"] = getattr(inst, f.name)
    return values


def _coerce(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"expected true or false, got {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(p) for p in text.split(",") if p.strip())
        if isinstance(default, dict):
            out = {}
            for part in text.split(","):
                if part.strip():
                    k, _, v = part.partition(":")
                    out[int(k)] = float(v)
            return out
        return text.strip()
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, dict):
        return ",".join(f"{k}:{float(value[k])!r}" for k in sorted(value))
    return str(value)


def parse_config_text(text: str) -> dict:
    """key = value lines; blank lines and # comments ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


@dataclasses.dataclass
class RunConfig:
    """Fully resolved settings; echoes itself beside a run's outputs."""
    values: dict

    @classmethod
    def resolve(cls, file_text: str = "", overrides: dict | None = None) -> "RunConfig":
        values = _default_values()
        explicit = set()
        for source in (parse_config_text(file_text), overrides or {}):
            for key, text in source.items():
                if key not in values:
                    raise ValueError(f"unknown config key {key!r}")
                values[key] = _coerce(key, text, values[key])
                explicit.add(key)
        if "seed" in explicit:
            for sub in ("synth.seed", "fcn.seed", "train.seed"):
                if sub not in explicit:
                    values[sub] = values["seed"]
        return cls(values)

    def section(self, prefix: str):
        cls = dict(_SECTIONS)[prefix]
        return cls(**{f.name: self.values[f"{prefix}.{f.name}"]
                      for f in dataclasses.fields(cls)})

    def format(self) -> str:
        return "".join(f"{k} = {_format_value(self.values[k])}\n"
                       for k in sorted(self.values))

    def echo(self, directory: Path):
        (directory / "config.txt").write_text(self.format())


# ---------------------------------------------------------------------------
# small shared helpers

def _parse_range(text: str, name: str) -> list:
    values = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, _, hi = part.partition("..")
            values.extend(range(int(lo), int(hi) + 1))
        else:
            values.append(int(part))
    if not values:
        raise ValueError(f"{name}: expected an integer or range like 1..5, got {text!r}")
    return values


def _single(text: str, name: str):
    if not text:
        return None
    values = _parse_range(text, name)
    if len(values) != 1:
        raise ValueError(f"{name} takes a single value for this command, got {text!r}")
    return values[0]


def _g(value, fmt: str = "%.12g") -> str:
    return "" if value is None else fmt % value


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _emit(cfg: RunConfig, path: Path | None, header, rows, primary: bool = True):
    """Write a CSV table; the command's primary table also goes to stdout
    under --stdout."""
    text = _csv_text(header, rows)
    if path is not None:
        path.write_text(text)
    if primary and cfg.values["stdout"]:
        sys.stdout.write(text)


def _say(cfg: RunConfig, message: str):
    if not cfg.values["stdout"]:
        print(message)


def _outdir(cfg: RunConfig) -> Path:
    if not cfg.values["out"]:
        raise ValueError("--out DIR is required for this command")
    out = Path(cfg.values["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(cfg: RunConfig):
    if not cfg.values["data"]:
        raise ValueError("--data DIR is required for this command")
    root = Path(cfg.values["data"])
    if not root.is_dir():
        raise ValueError(f"data directory not found: {root}")
    paths = sorted(root.glob("*.neeg"))
    if not paths:
        raise ValueError(f"no .neeg records found in {root}")
    pairs = []
    for path in paths:
        record = load_record(path)
        ann_path = path.with_suffix(".ann")
        if ann_path.exists():
            annotations = load_annotations(ann_path)
        else:
            annotations = AnnotationSet(record.subject_id, (), WEAK_ONLY)
        annotations.validate_against(record)
        pairs.append((record, annotations))
    return pairs


def _fcn_config(cfg: RunConfig) -> FcnConfig:
    fcn = cfg.section("fcn")
    blocks = _single(cfg.values["blocks"], "--blocks")
    pool = _single(cfg.values["pool_stride"], "--pool-stride")
    if blocks is not None:
        fcn = replace(fcn, n_blocks=blocks)
    if pool is not None:
        fcn = replace(fcn, pool_stride=pool)
    return fcn.validate()


def _load_model(cfg: RunConfig):
    if not cfg.values["model"]:
        raise ValueError("--model PATH is required for this command")
    return load_model(cfg.values["model"])


def _single_pair(cfg: RunConfig):
    record = load_record(cfg.values["record"])
    if cfg.values["annotations"]:
        annotations = load_annotations(cfg.values["annotations"])
        annotations = AnnotationSet(record.subject_id, annotations.events,
                                    annotations.completeness)
    else:
        annotations = AnnotationSet(record.subject_id, (), WEAK_ONLY)
    annotations.validate_against(record)
    return record, annotations


# ---------------------------------------------------------------------------
# SVG rendering

_CANVAS = (640, 420)
_MARGIN = (70, 20, 30, 50)  # left, right, top, bottom
_RAMP_LOW = (20, 24, 82)
_RAMP_HIGH = (252, 217, 36)


def _ramp(v: float) -> str:
    v = min(1.0, max(0.0, float(v)))
    rgb = (round(lo + v * (hi - lo)) for lo, hi in zip(_RAMP_LOW, _RAMP_HIGH))
    return "rgb({},{},{})".format(*rgb)


def _axes(x_label: str, y_label: str, x_ticks, y_ticks, to_px):
    width, height = _CANVAS
    x0, y0 = to_px(x_ticks[0], y_ticks[0])
    x1, y1 = to_px(x_ticks[-1], y_ticks[-1])
    parts = [f'<rect x="{min(x0, x1):.2f}" y="{min(y0, y1):.2f}" '
             f'width="{abs(x1 - x0):.2f}" height="{abs(y0 - y1):.2f}" '
             f'fill="none" stroke="black"/>']
    for t in x_ticks:
        px, _ = to_px(t, y_ticks[0])
        parts.append(f'<line x1="{px:.2f}" y1="{y0:.2f}" x2="{px:.2f}" y2="{y0 + 5:.2f}" stroke="black"/>')
        parts.append(f'<text x="{px:.2f}" y="{y0 + 18:.2f}" font-size="11" text-anchor="middle">{t:g}</text>')
    for t in y_ticks:
        _, py = to_px(x_ticks[0], t)
        parts.append(f'<line x1="{x0 - 5:.2f}" y1="{py:.2f}" x2="{x0:.2f}" y2="{py:.2f}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 8:.2f}" y="{py + 4:.2f}" font-size="11" text-anchor="end">{t:g}</text>')
    parts.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{height - 8}" font-size="12" '
                 f'text-anchor="middle">{x_label}</text>')
    parts.append(f'<text x="16" y="{(y0 + y1) / 2:.2f}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(y0 + y1) / 2:.2f})">{y_label}</text>')
    return parts


def _svg(parts) -> str:
    width, height = _CANVAS
    body = "\n".join(parts)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="{width}" height="{height}" '
            f'fill="white"/>\n{body}\n</svg>\n')


def _unit_mapper(x_lo, x_hi, y_lo, y_hi):
    left, right, top, bottom = _MARGIN
    width, height = _CANVAS
    plot_w = width - left - right
    plot_h = height - top - bottom
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def to_px(x, y):
        return (left + (x - x_lo) / x_span * plot_w,
                height - bottom - (y - y_lo) / y_span * plot_h)

    return to_px


def render_svg(series, kind: str) -> str:
    """Deterministic, self-contained SVG for roc / heatmap / sweep data."""
    if kind == "roc":
        if isinstance(series, RocCurve):
            x, y = 1.0 - series.specificity, series.sensitivity
        else:
            x, y = (np.asarray(v, dtype=np.float64) for v in series)
        if len(x) == 0:
            raise ValueError("empty series")
        to_px = _unit_mapper(0.0, 1.0, 0.0, 1.0)
        parts = _axes("1 - specificity", "sensitivity", (0.0, 0.5, 1.0), (0.0, 0.5, 1.0), to_px)
        d0, d1 = to_px(0.0, 0.0), to_px(1.0, 1.0)
        parts.append(f'<line x1="{d0[0]:.2f}" y1="{d0[1]:.2f}" x2="{d1[0]:.2f}" y2="{d1[1]:.2f}" '
                     f'stroke="lightgray" stroke-dasharray="4,3"/>')
        pts = " ".join(f"{px:.2f},{py:.2f}" for px, py in (to_px(a, b) for a, b in zip(x, y)))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="crimson" stroke-width="1.5"/>')
        return _svg(parts)

    if kind == "heatmap":
        arr = np.atleast_2d(np.asarray(series, dtype=np.float64))
        if arr.size == 0:
            raise ValueError("empty series")
        n_rows, n_cols = arr.shape
        left, right, top, bottom = _MARGIN
        width, height = _CANVAS
        cell_w = (width - left - right) / n_cols
        cell_h = (height - top - bottom) / n_rows
        parts = []
        for r in range(n_rows):
            for c in range(n_cols):
                parts.append(f'<rect x="{left + c * cell_w:.2f}" y="{top + r * cell_h:.2f}" '
                             f'width="{cell_w:.2f}" height="{cell_h:.2f}" '
                             f'fill="{_ramp(arr[r, c])}" shape-rendering="crispEdges"/>')
        parts.append(f'<rect x="{left}" y="{top}" width="{width - left - right:.2f}" '
                     f'height="{height - top - bottom:.2f}" fill="none" stroke="black"/>')
        parts.append(f'<text x="{(left + width - right) / 2:.2f}" y="{height - 8}" '
                     f'font-size="12" text-anchor="middle">window</text>')
        parts.append(f'<text x="16" y="{(top + height - bottom) / 2:.2f}" font-size="12" '
                     f'text-anchor="middle" transform="rotate(-90 16 '
                     f'{(top + height - bottom) / 2:.2f})">channel</text>')
        return _svg(parts)

    if kind == "sweep":
        if not series:
            raise ValueError("empty series")
        xs = np.concatenate([np.asarray(x, dtype=np.float64) for x, _, _ in series.values()])
        ys = np.concatenate([np.asarray(y, dtype=np.float64) for _, y, _ in series.values()])
        es = np.concatenate([np.asarray(e, dtype=np.float64) for _, _, e in series.values()])
        to_px = _unit_mapper(float(xs.min()), float(xs.max()),
                             float((ys - es).min()), float((ys + es).max()))
        x_ticks = tuple(sorted(set(float(v) for v in xs)))
        y_lo, y_hi = float((ys - es).min()), float((ys + es).max())
        parts = _axes("receptive field (samples)", "AUC",
                      x_ticks, (y_lo, (y_lo + y_hi) / 2, y_hi), to_px)
        colors = ("crimson", "steelblue", "seagreen", "darkorange", "purple")
        for i, (label, (x, y, err)) in enumerate(series.items()):
            color = colors[i % len(colors)]
            pts = " ".join(f"{px:.2f},{py:.2f}" for px, py in (to_px(a, b) for a, b in zip(x, y)))
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            for a, b, e in zip(x, y, err):
                px0, py0 = to_px(a, b - e)
                px1, py1 = to_px(a, b + e)
                parts.append(f'<line x1="{px0:.2f}" y1="{py0:.2f}" x2="{px1:.2f}" y2="{py1:.2f}" '
                             f'stroke="{color}"/>')
                cx, cy = to_px(a, b)
                parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="3" fill="{color}"/>')
            parts.append(f'<text x="{_CANVAS[0] - 25}" y="{35 + 16 * i}" font-size="12" '
                         f'text-anchor="end" fill="{color}">{label}</text>')
        return _svg(parts)

    raise ValueError(f"unknown plot kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    cfg.echo(out)
    pairs = synth_dataset(cfg.section("synth"))
    rows = []
    for record, annotations in pairs:
        write_record(record, out / f"{record.subject_id}.neeg")
        write_annotations(annotations, out / f"{record.subject_id}.ann")
        rows.append([record.subject_id, record.n_channels, _g(record.duration),
                     len(annotations.weak_events()), len(annotations.strong_events())])
    _emit(cfg, out / "manifest.csv",
          ["subject_id", "n_channels", "duration_s", "n_weak_events", "n_strong_events"], rows)
    _say(cfg, f"wrote {len(pairs)} records to {out}")
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    cfg.echo(out)
    pre = cfg.section("preprocess").validate()
    pairs = [_single_pair(cfg)] if cfg.values["record"] else _load_dataset(cfg)
    rows = []
    for record, annotations in pairs:
        processed = preprocess_record(record, pre)
        write_record(processed, out / f"{processed.subject_id}.neeg")
        write_annotations(annotations, out / f"{processed.subject_id}.ann")
        rows.append([processed.subject_id, _g(processed.sample_rate), processed.n_samples])
    _emit(cfg, out / "processed.csv", ["subject_id", "sample_rate", "n_samples"], rows)
    _say(cfg, f"preprocessed {len(pairs)} records into {out}")
    return 0


def _extraction_config(cfg: RunConfig) -> PreprocessConfig:
    pre = cfg.section("preprocess").validate()
    shift = cfg.values["train_shift"]
    return replace(pre, window_shift=shift).validate() if shift else pre


def cmd_train(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    cfg.echo(out)
    pairs = _load_dataset(cfg)
    mode = cfg.values["mode"]
    extract = _extraction_config(cfg)
    make = make_samples_strong if mode == "fcn1d" else make_samples_weak
    samples = make([r for r, _ in pairs], [a for _, a in pairs], extract)
    train_cfg = cfg.section("train").validate()
    state = np.random.SeedSequence(train_cfg.seed, spawn_key=(0, 0)).generate_state(3)
    train_set, val_set = _split_by_subject(samples, 0.2, np.random.default_rng(state[0]))
    fcn = replace(_fcn_config(cfg), seed=int(state[1]))
    model = Fcn1d(fcn) if mode == "fcn1d" else Fcn2d(fcn)
    model, hist = train_model(model, train_set, val_set, replace(train_cfg, seed=int(state[2])))
    save_model(model, out / "model.npz")
    rows = [[e + 1, _g(l), _g(v)] for e, (l, v) in enumerate(zip(hist.train_loss, hist.val_auc))]
    _emit(cfg, out / "history.csv", ["epoch", "train_loss", "val_auc"], rows)
    _say(cfg, f"best epoch {hist.best_epoch}: validation AUC {hist.best_val_auc:.2f}; "
              f"model saved to {out / 'model.npz'}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    cfg.echo(out)
    model = _load_model(cfg)
    pairs = [_single_pair(cfg)] if cfg.values["record"] else _load_dataset(cfg)
    pre = cfg.section("preprocess").validate()
    post = cfg.section("postproc")
    rows, scores, labels = [], [], []
    for record, annotations in pairs:
        t0 = time.perf_counter()
        res = evaluate_record(model, record, annotations, pre, post)
        seconds = time.perf_counter() - t0
        write_trace_csv(res.trace, out / f"{record.subject_id}_trace.csv")
        if res.auc is not None:
            write_roc_csv(roc_curve(res.scores, res.labels), out / f"{record.subject_id}_roc.csv")
        scores.append(res.scores)
        labels.append(res.labels)
        per_hour = seconds / (record.duration / 3600.0)
        rows.append([record.subject_id, len(res.scores), _g(res.auc, "%.4f"),
                     _g(res.auc90, "%.4f"), "%.3f" % seconds, "%.3f" % per_hour])
    _emit(cfg, out / "results.csv",
          ["subject", "n_epochs", "auc", "auc90", "seconds", "seconds_per_hour_eeg"], rows)
    summary_rows = []
    for mode in ("mean-per-subject", "concatenated"):
        try:
            agg = aggregate(scores, labels, mode)
            summary_rows.append([mode, _g(agg.auc, "%.4f"), _g(agg.std, "%.4f"), len(agg.excluded)])
        except MetricsError:
            summary_rows.append([mode, "", "", len(pairs)])
    _emit(cfg, out / "summary.csv", ["mode", "auc", "std", "n_excluded"], summary_rows,
          primary=False)
    if rows:
        _say(cfg, f"seconds per hour of EEG: {rows[-1][-1]}")
    return 0


def cmd_loo(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    cfg.echo(out)
    pairs = _load_dataset(cfg)
    mode = cfg.values["mode"]
    folds = loo_harness(pairs, _fcn_config(cfg), cfg.section("train").validate(), arch=mode,
                        preprocess_cfg=cfg.section("preprocess").validate(),
                        postproc_cfg=cfg.section("postproc"),
                        train_shift=cfg.values["train_shift"] or None)
    rows, scores, labels = [], [], []
    for fold in folds:
        for split, model in zip(fold.splits, fold.models):
            save_model(model, out / f"{fold.subject_id}_split{split.split}.npz")
            rows.append([fold.subject_id, split.split, split.best_epoch,
                         _g(split.val_auc, "%.4f"), _g(fold.result.auc, "%.4f"),
                         _g(fold.result.auc90, "%.4f")])
        write_trace_csv(fold.result.trace, out / f"{fold.subject_id}_trace.csv")
        scores.append(fold.result.scores)
        labels.append(fold.result.labels)
    _emit(cfg, out / "folds.csv",
          ["subject", "split", "best_epoch", "val_auc", "test_auc", "test_auc90"], rows)
    summary_rows = []
    for agg_mode in ("mean-per-subject", "concatenated"):
        agg = aggregate(scores, labels, agg_mode)
        summary_rows.append([agg_mode, _g(agg.auc, "%.4f"), _g(agg.std, "%.4f"), len(agg.excluded)])
    _emit(cfg, out / "summary.csv", ["mode", "auc", "std", "n_excluded"], summary_rows,
          primary=False)
    _say(cfg, f"leave-one-out over {len(folds)} subjects: "
              f"mean AUC {summary_rows[0][1]}, concatenated AUC {summary_rows[1][1]}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    cfg.echo(out)
    pairs = _load_dataset(cfg)
    mode = cfg.values["mode"]
    blocks = _parse_range(cfg.values["blocks"] or "1..5", "--blocks")
    pools = _parse_range(cfg.values["pool_stride"] or "1..3", "--pool-stride")
    repeats = int(cfg.values["repeats"])
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    base_fcn = cfg.section("fcn")
    train_cfg = cfg.section("train").validate()
    pre = cfg.section("preprocess").validate()
    post = cfg.section("postproc")
    rows, series = [], {}
    for pool in pools:
        xs, ys, errs = [], [], []
        for n_blocks in blocks:
            fcn = replace(base_fcn, n_blocks=n_blocks, pool_stride=pool).validate()
            point = []
            for rep in range(repeats):
                folds = loo_harness(pairs, fcn, replace(train_cfg, seed=train_cfg.seed + rep),
                                    arch=mode, preprocess_cfg=pre, postproc_cfg=post,
                                    train_shift=cfg.values["train_shift"] or None)
                per_subject = [f.result.auc for f in folds if f.result.auc is not None]
                if not per_subject:
                    raise MetricsError("no subject produced a defined AUC")
                point.append(float(np.mean(per_subject)))
            rf = receptive_field(fcn)
            mean, std = float(np.mean(point)), float(np.std(point))
            rows.append([n_blocks, pool, rf, Fcn1d(fcn).count_params(),
                         _g(mean, "%.4f"), _g(std, "%.4f")])
            xs.append(rf)
            ys.append(mean)
            errs.append(std)
        series[f"pool stride {pool}"] = (xs, ys, errs)
    _emit(cfg, out / "sweep.csv",
          ["n_blocks", "pool_stride", "receptive_field", "n_params", "mean_auc", "std_auc"], rows)
    (out / "sweep.svg").write_text(render_svg(series, "sweep"))
    _say(cfg, f"swept {len(rows)} configurations x {repeats} repeats; table in {out / 'sweep.csv'}")
    return 0


def cmd_rf(cfg: RunConfig) -> int:
    base = cfg.section("fcn")
    blocks = _parse_range(cfg.values["blocks"] or str(base.n_blocks), "--blocks")
    pools = _parse_range(cfg.values["pool_stride"] or str(base.pool_stride), "--pool-stride")
    rows = []
    for n_blocks in blocks:
        for pool in pools:
            fcn = replace(base, n_blocks=n_blocks, pool_stride=pool).validate()
            rows.append([n_blocks, pool, receptive_field(fcn), Fcn1d(fcn).count_params()])
    sys.stdout.write(_csv_text(["n_blocks", "pool_stride", "receptive_field", "n_params"], rows))
    return 0


def cmd_heatmap(cfg: RunConfig) -> int:
    out = _outdir(cfg)
    cfg.echo(out)
    model = _load_model(cfg)
    if not cfg.values["record"]:
        raise ValueError("--record PATH is required for heatmap")
    record, _ = _single_pair(cfg)
    pre = cfg.section("preprocess").validate()
    if record.sample_rate != pre.target_rate:
        record = preprocess_record(record, pre)
    wins = segment_windows(record, pre.window_len, pre.window_shift)
    if not wins:
        raise ValueError(f"record shorter than one {pre.window_len:g} s window")
    stack = np.stack([w for _, w in wins]).astype(np.float32)
    n_wins, n_ch, _ = stack.shape
    if isinstance(model, Fcn2d):
        parts = [model.channel_scores(stack[i:i + 256]) for i in range(0, n_wins, 256)]
        matrix = np.concatenate(parts).T
    else:
        flat = stack.transpose(1, 0, 2).reshape(n_ch * n_wins, -1)
        matrix = predict_chunked(model, flat).reshape(n_ch, n_wins)
    trace = postprocess_chain(matrix, cfg.section("postproc"),
                              period=pre.window_shift, start_time=pre.window_len)
    rows = [["%.3f" % t, "%.9g" % v] for t, v in zip(trace.times(), trace.values)]
    _emit(cfg, out / "heatmap.csv", ["time_s", "seizureness"], rows)
    (out / "heatmap.svg").write_text(render_svg(matrix, "heatmap"))
    _say(cfg, f"heatmap for {record.subject_id}: {out / 'heatmap.svg'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

_DISPATCH = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "loo": cmd_loo,
    "sweep": cmd_sweep,
    "rf": cmd_rf,
    "heatmap": cmd_heatmap,
}

_FLAG_KEYS = (
    ("seed", "seed"),
    ("out", "out"),
    ("mode", "mode"),
    ("data", "data"),
    ("model", "model"),
    ("record", "record"),
    ("annotations", "annotations"),
    ("blocks", "blocks"),
    ("pool_stride", "pool_stride"),
    ("repeats", "repeats"),
    ("train_shift", "train_shift"),
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neoseize",
        description="Neonatal EEG seizure detection with fully convolutional networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic EEG dataset"),
        ("preprocess", "bandpass and decimate records to the working rate"),
        ("train", "fit one model on a dataset"),
        ("eval", "score a saved model on records and report AUC"),
        ("loo", "leave-one-subject-out cross-validation"),
        ("sweep", "grid over n_blocks x pool_stride with repeated LOO"),
        ("rf", "print receptive field and parameter count"),
        ("heatmap", "per-channel seizure-probability heatmap for one record"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one setting (repeatable)")
        p.add_argument("--seed", help="master seed (propagates to synth/fcn/train)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=("fcn1d", "fcn2d"), help="model family")
        p.add_argument("--data", help="dataset directory of .neeg/.ann files")
        p.add_argument("--model", help="saved model (.npz)")
        p.add_argument("--record", help="single record path")
        p.add_argument("--annotations", help="annotation file for --record")
        p.add_argument("--blocks", help="feature-block count, or range like 1..5")
        p.add_argument("--pool-stride", dest="pool_stride",
                       help="pool stride, or range like 1..3")
        p.add_argument("--repeats", help="LOO repetitions per sweep point")
        p.add_argument("--train-shift", dest="train_shift",
                       help="training extraction stride in seconds")
        p.add_argument("--stdout", action="store_true",
                       help="write the primary CSV to standard output")
    return parser


def run(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        file_text = Path(args.config).read_text() if args.config else ""
        overrides = {}
        for key, attr in _FLAG_KEYS:
            value = getattr(args, attr, None)
            if value is not None:
                overrides[key] = value
        if args.stdout:
            overrides["stdout"] = "true"
        for item in args.set or []:
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
            overrides[key.strip()] = value.strip()
        cfg = RunConfig.resolve(file_text, overrides)
        return _DISPATCH[args.command](cfg)
    except (ValueError, OSError, MetricsError, FormatError, AutogradError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    raise SystemExit(run())


if __name__ == "__main__":
    main()
