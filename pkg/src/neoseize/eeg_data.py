"""EEG records, seizure annotations, and synthetic data generation.

File formats
------------
NEEG binary: magic ``NEEG``, version u16 = 1, n_channels u16, sample_rate
f32, n_samples u64, then per channel a u16-length-prefixed UTF-8 name,
then all samples channel-major as little-endian f32 microvolts.
Bit-exact round trips.

CSV record (debug only): header row of channel names, one column per
channel; the sample rate is not stored and must be supplied on load.

Annotation CSV: header ``onset_s,offset_s,channel``; a blank channel
column marks a weak (record-level) event, an integer marks a strong
(channel-level) event.  Every strong event must lie inside a weak one.

Labels
------
Weak events localize seizures in time only; strong events also name the
channel.  ``rasterize`` turns events into per-epoch boolean masks: an
epoch is positive when events cover at least half of it.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

_MAGIC = b"NEEG"
_VERSION = 1
_HEADER = struct.Struct("<4sHHfQ")

WEAK_ONLY = "weak-only"
WEAK_PARTIAL_STRONG = "weak+partial-strong"


class FormatError(ValueError):
    """Raised for unreadable or internally inconsistent data files."""


@dataclass(frozen=True)
class EegRecord:
    subject_id: str
    sample_rate: float
    channel_names: tuple
    samples: np.ndarray  # [n_channels, n_samples], float32 microvolts

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D [channels, samples], got shape {samples.shape}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if len(self.channel_names) != samples.shape[0]:
            raise ValueError(f"{len(self.channel_names)} channel names for {samples.shape[0]} channels")
        bad = np.argwhere(~np.isfinite(samples))
        if bad.size:
            c, s = bad[0]
            raise ValueError(f"non-finite sample at channel {c}, sample {s}")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True, order=True)
class SeizureEvent:
    onset: float
    offset: float
    channel: int | None = None  # None = weak (time-only) event

    def __post_init__(self):
        if not (0 <= self.onset < self.offset):
            raise ValueError(f"need 0 <= onset < offset, got [{self.onset}, {self.offset})")
        if self.channel is not None and self.channel < 0:
            raise ValueError(f"channel must be non-negative, got {self.channel}")

    @property
    def is_weak(self) -> bool:
        return self.channel is None

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class AnnotationSet:
    subject_id: str
    events: tuple
    completeness: str = WEAK_ONLY

    def __post_init__(self):
        events = tuple(sorted(self.events, key=lambda e: (e.onset, e.offset, e.channel is not None,
                                                          -1 if e.channel is None else e.channel)))
        object.__setattr__(self, "events", events)
        if self.completeness not in (WEAK_ONLY, WEAK_PARTIAL_STRONG):
            raise ValueError(f"unknown completeness {self.completeness!r}")
        weak = self.weak_events()
        for e in events:
            if e.channel is not None and not any(w.onset <= e.onset and e.offset <= w.offset for w in weak):
                raise ValueError(f"strong event [{e.onset}, {e.offset}) ch {e.channel} not inside any weak event")

    def weak_events(self):
        return tuple(e for e in self.events if e.is_weak)

    def strong_events(self):
        return tuple(e for e in self.events if not e.is_weak)

    def validate_against(self, record: EegRecord):
        dur = record.duration
        for e in self.events:
            if e.offset > dur + 1e-9:
                raise ValueError(f"event [{e.onset}, {e.offset}) extends past record end ({dur:.3f} s)")
            if e.channel is not None and e.channel >= record.n_channels:
                raise ValueError(f"event channel {e.channel} out of range for {record.n_channels} channels")
        return self


@dataclass(frozen=True)
class LabelMask:
    epoch_period: float
    weak: np.ndarray                 # bool [n_epochs]
    strong: np.ndarray | None = None  # bool [n_channels, n_epochs]

    def __post_init__(self):
        object.__setattr__(self, "weak", np.asarray(self.weak, dtype=bool))
        if self.strong is not None:
            strong = np.asarray(self.strong, dtype=bool)
            object.__setattr__(self, "strong", strong)
            if strong.shape[-1] != self.weak.shape[0]:
                raise ValueError("strong and weak masks disagree on epoch count")
            if (strong.any(axis=0) & ~self.weak).any():
                raise ValueError("strong mask marks epochs outside the weak mask")


# ---------------------------------------------------------------------------
# record I/O

def write_record(record: EegRecord, path):
    """Write NEEG binary (default) or debug CSV when path ends in .csv."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            fh.write(",".join(record.channel_names) + "\n")
            np.savetxt(fh, record.samples.T, fmt="%.9g", delimiter=",")
        return
    blob = [_HEADER.pack(_MAGIC, _VERSION, record.n_channels, record.sample_rate, record.n_samples)]
    for name in record.channel_names:
        enc = name.encode("utf-8")
        blob.append(struct.pack("<H", len(enc)) + enc)
    blob.append(np.ascontiguousarray(record.samples, dtype="<f4").tobytes())
    path.write_bytes(b"".join(blob))


def load_record(path, sample_rate: float = 256.0) -> EegRecord:
    """Load a record, sniffing NEEG binary vs CSV by content.

    sample_rate applies only to CSV input (the binary header carries its own).
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0:
        raise FormatError(f"{path}: empty file")
    if raw[:4] == _MAGIC:
        return _parse_neeg(raw, path)
    return _parse_csv_record(raw, path, sample_rate)


def _parse_neeg(raw: bytes, path) -> EegRecord:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    _, version, n_channels, fs, n_samples = _HEADER.unpack_from(raw)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    names = []
    for _ in range(n_channels):
        if pos + 2 > len(raw):
            raise FormatError(f"{path}: truncated channel names")
        (ln,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + ln > len(raw):
            raise FormatError(f"{path}: truncated channel names")
        names.append(raw[pos:pos + ln].decode("utf-8"))
        pos += ln
    want = n_channels * n_samples * 4
    if len(raw) - pos != want:
        raise FormatError(f"{path}: payload is {len(raw) - pos} bytes, header implies {want} "
                          "(channel length mismatch or truncation)")
    samples = np.frombuffer(raw, dtype="<f4", count=n_channels * n_samples, offset=pos)
    samples = samples.reshape(n_channels, n_samples)
    try:
        return EegRecord(path.stem, float(fs), names, samples)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _parse_csv_record(raw: bytes, path, sample_rate: float) -> EegRecord:
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: neither NEEG binary nor text CSV") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise FormatError(f"{path}: CSV record needs a header row and at least one sample row")
    names = [c.strip() for c in lines[0].split(",")]
    try:
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric sample value ({exc})") from exc
    if rows.shape[1] != len(names):
        raise FormatError(f"{path}: {rows.shape[1]} columns for {len(names)} channel names")
    try:
        return EegRecord(path.stem, sample_rate, names, rows.T)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# annotation I/O

def load_annotations(path) -> AnnotationSet:
    path = Path(path)
    events = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:3]] != ["onset_s", "offset_s", "channel"]:
            raise FormatError(f"{path}: expected header 'onset_s,offset_s,channel'")
        for i, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) < 2:
                raise FormatError(f"{path}:{i}: need at least onset and offset")
            try:
                onset, offset = float(row[0]), float(row[1])
                chan = None
                if len(row) > 2 and row[2].strip():
                    chan = int(row[2])
                events.append(SeizureEvent(onset, offset, chan))
            except ValueError as exc:
                raise FormatError(f"{path}:{i}: {exc}") from exc
    completeness = WEAK_PARTIAL_STRONG if any(not e.is_weak for e in events) else WEAK_ONLY
    try:
        return AnnotationSet(path.stem, tuple(events), completeness)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_annotations(annotations: AnnotationSet, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["onset_s", "offset_s", "channel"])
        for e in annotations.events:
            writer.writerow([f"{e.onset:.6f}", f"{e.offset:.6f}",
                             "" if e.channel is None else e.channel])


# ---------------------------------------------------------------------------
# rasterization

def rasterize(annotations: AnnotationSet, epoch_period: float, n_epochs: int,
              n_channels: int | None = None) -> LabelMask:
    """Per-epoch masks: an epoch is positive when events cover >= 50% of it.

    Strong rows are produced only when n_channels is given and the set
    contains strong events.
    """
    if epoch_period <= 0:
        raise ValueError(f"epoch_period must be positive, got {epoch_period}")
    horizon = n_epochs * epoch_period
    weak = np.zeros(n_epochs, dtype=bool)
    for e in annotations.weak_events():
        _mark(weak, e, epoch_period, horizon)
    strong = None
    strong_events = annotations.strong_events()
    if n_channels is not None and strong_events:
        strong = np.zeros((n_channels, n_epochs), dtype=bool)
        for e in strong_events:
            if e.channel >= n_channels:
                raise ValueError(f"strong event channel {e.channel} out of range ({n_channels} channels)")
            _mark(strong[e.channel], e, epoch_period, horizon)
        # strong labels may under-cover but never extend beyond weak ones
        strong &= weak[None, :]
    return LabelMask(epoch_period, weak, strong)


def _mark(row, event, period, horizon):
    onset = max(0.0, min(event.onset, horizon))
    offset = max(0.0, min(event.offset, horizon))
    if offset <= onset:
        return
    first = int(np.floor(onset / period))
    last = min(int(np.ceil(offset / period)), row.shape[0])
    for e in range(first, last):
        overlap = min(offset, (e + 1) * period) - max(onset, e * period)
        if overlap >= 0.5 * period:
            row[e] = True


# ---------------------------------------------------------------------------
# synthetic data

_MONTAGE8 = ("F4-C4", "C4-O2", "F3-C3", "C3-O1", "T4-C4", "C4-Cz", "Cz-C3", "C3-T3")
_BACKGROUND_RMS_UV = 30.0


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 9
    record_duration: float = 3600.0
    n_channels: int = 8
    sample_rate: float = 256.0
    seizure_rate: float = 8.0            # expected events per hour
    duration_range: tuple = (15.0, 90.0)  # seconds
    channel_spread: dict = field(default_factory=lambda: {1: 0.4, 2: 0.35, 3: 0.25})
    snr: float = 2.0                      # seizure amplitude / background RMS
    seed: int = 0

    def validate(self):
        if min(self.n_subjects, self.n_channels) < 1 or self.record_duration <= 0:
            raise ValueError("n_subjects, n_channels, and record_duration must be positive")
        if self.sample_rate <= 0 or self.snr <= 0 or self.seizure_rate < 0:
            raise ValueError("sample_rate and snr must be positive, seizure_rate non-negative")
        lo, hi = self.duration_range
        if not (10.0 <= lo <= hi):
            raise ValueError(f"duration_range min must be >= 10 s and <= max, got {self.duration_range}")
        if not self.channel_spread or any(k < 1 or k > self.n_channels for k in self.channel_spread):
            raise ValueError("channel_spread keys must lie in 1..n_channels")
        if any(p < 0 for p in self.channel_spread.values()) or sum(self.channel_spread.values()) <= 0:
            raise ValueError("channel_spread probabilities must be non-negative and sum > 0")
        expected_busy = self.seizure_rate * self.record_duration / 3600.0 * (lo + hi) / 2.0
        if expected_busy > self.record_duration:
            raise ValueError("expected seizure time exceeds the record duration")
        return self


def synth_dataset(config: SynthConfig):
    """Generate (EegRecord, AnnotationSet) pairs; bit-deterministic in the seed.

    Background: per-channel 1/f-power noise normalized to 30 uV RMS.
    Seizures: amplitude-ramped rhythmic discharges whose instantaneous
    frequency moves monotonically within 1-3 Hz, with a waveshaping
    harmonic for a sharpened repetitive morphology, added to a random
    channel subset.  Each seizure yields one weak event plus one strong
    event per injected channel.
    """
    config.validate()
    return [_synth_subject(config, i) for i in range(config.n_subjects)]


def _synth_subject(config: SynthConfig, subject_idx: int):
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(subject_idx,)))
    fs = config.sample_rate
    n = int(round(config.record_duration * fs))
    samples = np.empty((config.n_channels, n))
    for c in range(config.n_channels):
        samples[c] = _pink_background(rng, n, fs)

    events = []
    n_seiz = rng.poisson(config.seizure_rate * config.record_duration / 3600.0)
    spread_counts = np.array(sorted(config.channel_spread), dtype=np.int64)
    spread_probs = np.array([config.channel_spread[k] for k in spread_counts], dtype=np.float64)
    spread_probs /= spread_probs.sum()
    occupied = []
    for _ in range(n_seiz):
        dur = rng.uniform(*config.duration_range)
        onset = _place(rng, dur, config.record_duration, occupied)
        k = int(rng.choice(spread_counts, p=spread_probs))
        chans = np.sort(rng.choice(config.n_channels, size=k, replace=False))
        wave = _seizure_wave(rng, dur, fs) * (config.snr * _BACKGROUND_RMS_UV)
        if onset is None:
            continue  # no room left; rng draws above keep the stream aligned
        occupied.append((onset, onset + dur))
        i0 = int(round(onset * fs))
        samples[chans, i0:i0 + wave.shape[0]] += wave
        events.append(SeizureEvent(onset, onset + dur))
        events.extend(SeizureEvent(onset, onset + dur, int(c)) for c in chans)

    sid = f"synth{subject_idx:02d}"
    names = _MONTAGE8 if config.n_channels == 8 else tuple(f"ch{c:02d}" for c in range(config.n_channels))
    record = EegRecord(sid, fs, names, samples.astype(np.float32))
    completeness = WEAK_PARTIAL_STRONG if events else WEAK_ONLY
    return record, AnnotationSet(sid, tuple(events), completeness)


def _pink_background(rng, n, fs):
    """1/f-power noise (flat below 0.5 Hz), exactly 30 uV RMS."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    shape = 1.0 / np.sqrt(np.maximum(freqs, 0.5))
    shape[0] = 0.0  # no DC
    x = np.fft.irfft(spec * shape, n)
    return x * (_BACKGROUND_RMS_UV / np.sqrt(np.mean(x * x)))


def _place(rng, dur, record_dur, occupied, gap=5.0, attempts=100):
    """Pick a start time clear of existing events (plus a gap), or None."""
    hi = record_dur - dur - gap
    if hi <= gap:
        return None
    for _ in range(attempts):
        onset = rng.uniform(gap, hi)
        if all(onset + dur + gap <= s or onset >= e + gap for s, e in occupied):
            return onset
    return None


def _seizure_wave(rng, dur, fs):
    """Rhythmic discharge: linear chirp within 1-3 Hz plus waveshaping.

    The second term (h * (sin^2 - 1/2)) sharpens one flank of every cycle,
    approximating a repetitive spike-and-wave shape; the trapezoid envelope
    ramps amplitude in and out.
    """
    n = int(round(dur * fs))
    t = np.arange(n) / fs
    f0, f1 = rng.uniform(1.0, 3.0, size=2)
    h = rng.uniform(0.3, 0.6)
    phi0 = rng.uniform(0.0, 2.0 * np.pi)
    gain = rng.uniform(0.9, 1.1)
    theta = 2.0 * np.pi * (f0 * t + (f1 - f0) * t * t / (2.0 * dur)) + phi0
    y = np.sin(theta) + h * (np.sin(theta) ** 2 - 0.5)
    ramp = min(2.0, dur / 4.0)
    env = np.clip(np.minimum(t / ramp, (dur - t) / ramp), 0.0, 1.0)
    return gain * env * y
