"""Post-processing of per-window seizure probabilities.

A ProbabilityTrace holds one probability per analysis window at a fixed
period (the window shift); each entry is timestamped at its window's
END, so entry k lives at start_time + k*period seconds.

The full chain, in order: max across channels, centered moving average,
background adaptation (subtract a slow baseline, off by default), and a
collar (sliding maximum) that widens detections to compensate for the
smoothing.  Every stage maps [0,1] traces to [0,1] traces of the same
length, and the collar is threshold-equivalent to dilating every
above-threshold region, so ROC analysis after it stays well defined.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import maximum_filter1d
from scipy.signal import lfilter

_DENOM_GUARD = 1e-9


@dataclass(frozen=True)
class ProbabilityTrace:
    period: float                       # seconds between entries
    values: np.ndarray                  # [n] in [0, 1]
    per_channel: np.ndarray | None = None  # [n_channels, n] pre-fusion
    start_time: float = 8.0             # timestamp of entry 0 = first window's end

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if self.period <= 0:
            raise ValueError(f"period must be positive, got {self.period}")
        if values.ndim != 1:
            raise ValueError(f"trace values must be 1-D, got shape {values.shape}")
        if values.size and (values.min() < 0 or values.max() > 1):
            raise ValueError("trace values must lie in [0, 1]")
        if self.per_channel is not None:
            pc = np.asarray(self.per_channel, dtype=np.float64)
            object.__setattr__(self, "per_channel", pc)
            if pc.ndim != 2 or pc.shape[1] != values.shape[0]:
                raise ValueError(f"per_channel shape {pc.shape} does not match {values.shape[0]} entries")

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(self.values.size) * self.period


@dataclass(frozen=True)
class PostprocConfig:
    smooth: bool = True
    window_s: float = 60.0
    adapt: bool = False       # background adaptation, disabled by default
    tau_s: float = 600.0
    beta: float = 1.0
    apply_collar: bool = True
    collar_s: float = 30.0    # half the moving-average length


def fuse_channels_max(per_channel, period: float = 1.0, start_time: float = 8.0) -> ProbabilityTrace:
    """Elementwise max across channels; identity for a single channel."""
    pc = np.asarray(per_channel, dtype=np.float64)
    if pc.ndim == 1:
        pc = pc[None, :]
    if pc.ndim != 2 or pc.shape[0] < 1 or pc.size == 0:
        raise ValueError(f"need a non-empty [n_channels, n] matrix, got shape {pc.shape}")
    return ProbabilityTrace(period, pc.max(axis=0), per_channel=pc, start_time=start_time)


def moving_average(trace: ProbabilityTrace, window_s: float = 60.0) -> ProbabilityTrace:
    """Centered mean over floor(window_s/period) entries, truncated at edges."""
    w = int(np.floor(window_s / trace.period))
    if w < 1:
        raise ValueError(f"moving-average window {window_s}s is shorter than one {trace.period}s entry")
    x = trace.values
    n = x.size
    left = (w - 1) // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(n)
    lo = np.clip(idx - left, 0, n)
    hi = np.clip(idx - left + w, 0, n)
    out = (csum[hi] - csum[lo]) / (hi - lo)
    return replace(trace, values=np.clip(out, 0.0, 1.0))


def background_adapt(trace: ProbabilityTrace, time_constant_s: float = 600.0,
                     beta: float = 1.0) -> ProbabilityTrace:
    """Subtract a causal EMA baseline, rescale to keep full range.

    baseline[k] = (1-a)*baseline[k-1] + a*x[k] with a = 1 - exp(-period/tau)
    and baseline[-1] = 0; output = clamp(x - beta*baseline, 0, 1) / (1 - beta*baseline),
    guarded and clipped back to [0, 1].
    """
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if time_constant_s <= 0:
        raise ValueError(f"time constant must be positive, got {time_constant_s}")
    if beta == 0:
        return replace(trace)
    x = trace.values
    alpha = 1.0 - np.exp(-trace.period / time_constant_s)
    baseline = lfilter([alpha], [1.0, -(1.0 - alpha)], x)
    num = np.clip(x - beta * baseline, 0.0, 1.0)
    out = num / np.maximum(1.0 - beta * baseline, _DENOM_GUARD)
    return replace(trace, values=np.clip(out, 0.0, 1.0))


def collar(trace: ProbabilityTrace, collar_s: float = 30.0) -> ProbabilityTrace:
    """Sliding maximum of width 2*floor(collar_s/period) + 1.

    Thresholding the result equals dilating the thresholded input by
    collar_s on each side, simultaneously for every threshold.
    """
    if collar_s < 0:
        raise ValueError(f"collar must be non-negative, got {collar_s}")
    half = int(np.floor(collar_s / trace.period))
    if half == 0 or trace.values.size == 0:
        return replace(trace)
    out = maximum_filter1d(trace.values, size=2 * half + 1, mode="nearest")
    return replace(trace, values=out)


def postprocess_chain(per_channel_or_fused, config: PostprocConfig | None = None,
                      period: float = 1.0, start_time: float = 8.0) -> ProbabilityTrace:
    """Fuse (for matrix input), then smooth, adapt, and collar per config."""
    cfg = config or PostprocConfig()
    if isinstance(per_channel_or_fused, ProbabilityTrace):
        trace = per_channel_or_fused
        if trace.per_channel is not None and trace.per_channel.shape[0] > 1:
            trace = fuse_channels_max(trace.per_channel, trace.period, trace.start_time)
    else:
        arr = np.asarray(per_channel_or_fused)
        if arr.ndim == 2:
            trace = fuse_channels_max(arr, period, start_time)
        else:
            trace = ProbabilityTrace(period, arr, start_time=start_time)
    if cfg.smooth:
        trace = moving_average(trace, cfg.window_s)
    if cfg.adapt:
        trace = background_adapt(trace, cfg.tau_s, cfg.beta)
    if cfg.apply_collar:
        trace = collar(trace, cfg.collar_s)
    return trace


# ---------------------------------------------------------------------------
# CSV export

def write_trace_csv(trace: ProbabilityTrace, path):
    """Write `time_s,probability` rows (times at window ends)."""
    with open(path, "w", newline="") as fh:
        fh.write("time_s,probability\n")
        for t, v in zip(trace.times(), trace.values):
            fh.write(f"{t:.6f},{v:.9f}\n")


def write_channel_csv(trace: ProbabilityTrace, path):
    """Wide per-channel CSV: `time_s,ch0,ch1,...` before fusion."""
    if trace.per_channel is None:
        raise ValueError("trace has no per-channel matrix")
    n_ch = trace.per_channel.shape[0]
    with open(path, "w", newline="") as fh:
        fh.write("time_s," + ",".join(f"ch{c}" for c in range(n_ch)) + "\n")
        for k, t in enumerate(trace.times()):
            row = ",".join(f"{trace.per_channel[c, k]:.9f}" for c in range(n_ch))
            fh.write(f"{t:.6f},{row}\n")
