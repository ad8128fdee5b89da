"""Fully convolutional seizure-detection networks.

Two heads share one architecture:

* ``Fcn1d`` scores single-channel windows.  Each block is three
  same-padded conv(width 3, stride 1) -> batch norm -> ReLU layers
  followed by an average pool of width == stride == ``pool_stride``
  (identity when 1).  A final conv maps to 2 class maps (no batch norm,
  no ReLU), global average pooling collapses positions, and a softmax
  yields class probabilities.  Every layer is convolutional, so the net
  accepts longer inputs than it was trained on.

* ``Fcn2d`` scores multi-channel segments with only per-segment labels:
  every channel runs through the shared 1D stack independently, and the
  segment's seizure probability is the maximum of the per-channel
  probabilities.  The output is invariant to channel order by
  construction.

``receptive_field`` computes the analytic receptive field;
``measure_receptive_field`` measures it empirically from gradient
support.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import BnState, Tensor


@dataclass
class FcnConfig:
    n_blocks: int = 3
    pool_stride: int = 2
    input_len: int = 256
    n_maps: int = 32
    filter_width: int = 3
    n_classes: int = 2
    seed: int = 0

    def validate(self):
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.pool_stride < 1:
            raise ValueError(f"pool_stride must be >= 1, got {self.pool_stride}")
        if self.filter_width % 2 != 1:
            raise ValueError(f"filter_width must be odd, got {self.filter_width}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        min_len = self.pool_stride ** self.n_blocks
        if self.input_len < min_len:
            raise ValueError(f"input_len {self.input_len} too short for {self.n_blocks} pools of stride {self.pool_stride}")
        return self


def receptive_field(config: FcnConfig) -> int:
    """Receptive field of one output position, in input samples.

    Walks the layers top-down: the classification conv sees filter_width
    samples of the last block's output; each block multiplies by the pool
    stride and adds the reach of its three convs.  Capped at input_len.
    """
    rf = config.filter_width
    for _ in range(config.n_blocks):
        rf = rf * config.pool_stride + 3 * (config.filter_width - 1)
    return min(rf, config.input_len)


class Fcn1d:
    """Per-window classifier over [batch, input_len] single-channel data."""

    def __init__(self, config: FcnConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        self.convs = []   # (w, b) per conv, classification conv last
        self.bns = []     # (gamma, beta, state) per stack conv
        k_in = 1
        for _ in range(3 * config.n_blocks):
            self.convs.append(self._init_conv(rng, config.n_maps, k_in, config.filter_width))
            self.bns.append((
                Tensor(np.ones(config.n_maps, dtype=np.float32), requires_grad=True),
                Tensor(np.zeros(config.n_maps, dtype=np.float32), requires_grad=True),
                BnState(config.n_maps),
            ))
            k_in = config.n_maps
        self.convs.append(self._init_conv(rng, config.n_classes, k_in, config.filter_width))

    @staticmethod
    def _init_conv(rng, k_out, k_in, f):
        std = np.sqrt(2.0 / (k_in * f))
        w = Tensor(rng.normal(0.0, std, size=(k_out, k_in, f)).astype(np.float32), requires_grad=True)
        b = Tensor(np.zeros(k_out, dtype=np.float32), requires_grad=True)
        return w, b

    # -- parameter access ---------------------------------------------------

    def params(self):
        out = []
        for i, (w, b) in enumerate(self.convs[:-1]):
            gamma, beta, _ = self.bns[i]
            out += [w, b, gamma, beta]
        out += list(self.convs[-1])
        return out

    def count_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def count_conv_layers(self) -> int:
        return len(self.convs)

    def astype(self, dtype):
        for p in self.params():
            p.data = p.data.astype(dtype)
        for _, _, st in self.bns:
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        return self

    # -- forward ------------------------------------------------------------

    def _stack(self, x: Tensor, mode: str, update_running: bool = True) -> Tensor:
        """Run convs through the classification conv; output [n_classes, B, I']."""
        cfg = self.config
        h = x
        for blk in range(cfg.n_blocks):
            for i in range(3 * blk, 3 * blk + 3):
                w, b = self.convs[i]
                gamma, beta, st = self.bns[i]
                h = ag.conv1d(h, w, b)
                h = ag.batch_norm(h, gamma, beta, st, mode, update_running=update_running)
                h = ag.relu(h)
            if cfg.pool_stride > 1:
                h = ag.pool1d(h, "avg", cfg.pool_stride, cfg.pool_stride)
        w, b = self.convs[-1]
        return ag.conv1d(h, w, b)

    @staticmethod
    def _as_batch(x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2:
            raise ValueError(f"expected [batch, samples] input, got shape {x.shape}")
        return x

    def forward(self, x, mode: str = "infer", update_running: bool = True) -> Tensor:
        """Class probabilities [n_classes, B] for windows x [B, samples]."""
        xb = self._as_batch(x)
        dtype = self.convs[0][0].data.dtype
        xt = Tensor(np.ascontiguousarray(xb[None, :, :], dtype=dtype))
        feat = self._stack(xt, mode, update_running)
        return ag.softmax(ag.global_avg_pool(feat), axis=0)

    def loss(self, x, targets, mode: str = "train", class_weights=None, update_running: bool = True):
        """Weighted categorical cross-entropy; returns (loss, probs)."""
        probs = self.forward(x, mode, update_running)
        return ag.cross_entropy(probs, np.asarray(targets), class_weights=class_weights), probs

    def predict_proba(self, x) -> np.ndarray:
        """Seizure probability per window, [B]."""
        return self.forward(x, "infer").data[1].copy()

    def position_scores(self, x) -> np.ndarray:
        """Per-position seizure evidence [B, I']: softmax before pooling."""
        xb = self._as_batch(x)
        dtype = self.convs[0][0].data.dtype
        xt = Tensor(np.ascontiguousarray(xb[None, :, :], dtype=dtype))
        feat = self._stack(xt, "infer")
        return ag.softmax(feat, axis=0).data[1].copy()


class Fcn2d:
    """Segment classifier over [batch, n_channels, input_len] data.

    Channels share the 1D stack; the segment score is the max of the
    per-channel seizure probabilities, so no channel labels are needed.

    Training (`forward`/`loss` in train mode) runs every channel of the
    batch through the stack together so batch-norm statistics see all
    windows.  The inference helpers (`predict_proba`, `channel_scores`)
    instead process channels one at a time: each window's score then
    depends only on its own samples, never on where the channel sits in
    the batch, which makes the fused output bit-identical under any
    channel permutation.
    """

    def __init__(self, config: FcnConfig):
        self.net = Fcn1d(config)

    @property
    def config(self):
        return self.net.config

    @property
    def convs(self):
        return self.net.convs

    @property
    def bns(self):
        return self.net.bns

    def params(self):
        return self.net.params()

    def count_params(self) -> int:
        return self.net.count_params()

    def count_conv_layers(self) -> int:
        return self.net.count_conv_layers()

    def astype(self, dtype):
        self.net.astype(dtype)
        return self

    @staticmethod
    def _as_batch(x) -> np.ndarray:
        x = np.asarray(x)
        if x.ndim == 2:
            x = x[None, :, :]
        if x.ndim != 3:
            raise ValueError(f"expected [batch, channels, samples] input, got shape {x.shape}")
        return x

    def forward(self, x, mode: str = "infer", update_running: bool = True) -> Tensor:
        """Seizure probability [B] for segments x [B, N, samples]."""
        xb = self._as_batch(x)
        nb, nch, ns = xb.shape
        dtype = self.net.convs[0][0].data.dtype
        flat = Tensor(np.ascontiguousarray(xb.reshape(1, nb * nch, ns), dtype=dtype))
        feat = self.net._stack(flat, mode, update_running)
        probs = ag.softmax(ag.global_avg_pool(feat), axis=0)       # [2, B*N]
        seiz = ag.take_map(probs, 1)                               # [B*N]
        per_chan = ag.reshape(seiz, (nb, nch))
        return ag.max_over_axis(per_chan, axis=1)                  # [B]

    def loss(self, x, targets, mode: str = "train", class_weights=None, update_running: bool = True):
        """Weighted binary cross-entropy on segment labels; returns (loss, probs)."""
        probs = self.forward(x, mode, update_running)
        return ag.cross_entropy(probs, np.asarray(targets, dtype=np.float64),
                                class_weights=class_weights), probs

    def predict_proba(self, x) -> np.ndarray:
        return self.channel_scores(x).max(axis=1)

    def channel_scores(self, x) -> np.ndarray:
        """Per-channel seizure probability [B, N] (inference)."""
        xb = self._as_batch(x)
        nb, nch, ns = xb.shape
        cols = [self.net.predict_proba(xb[:, c, :]) for c in range(nch)]
        return np.stack(cols, axis=1)

    def position_scores(self, x) -> np.ndarray:
        """Per-channel per-position seizure evidence [B, N, I']."""
        xb = self._as_batch(x)
        nb, nch, ns = xb.shape
        scores = self.net.position_scores(xb.reshape(nb * nch, ns))
        return scores.reshape(nb, nch, -1)


def measure_receptive_field(model) -> int:
    """Empirical receptive field from gradient support.

    Clones the network with strictly positive weights (|w| + 0.01, biases
    0.1) and unit batch-norm statistics so ReLUs never block gradient
    flow, feeds an all-ones input, and measures the width of the nonzero
    input-gradient span of one central final-layer position.  When the
    span touches an input border it may be clipped short of the true
    field, so the probe input is doubled until the span clears both
    borders; the result is capped at the configured input length.
    """
    net = model.net if isinstance(model, Fcn2d) else model
    cfg = net.config
    probe = Fcn1d(cfg).astype(np.float64)
    for (w, b), (sw, sb) in zip(probe.convs, net.convs):
        w.data = np.abs(sw.data.astype(np.float64)) + 0.01
        b.data[:] = 0.1
    for (gamma, beta, st), (sg, _, _) in zip(probe.bns, net.bns):
        gamma.data = np.abs(sg.data.astype(np.float64)) + 0.01
        beta.data[:] = 0.1
        st.mean = np.zeros_like(st.mean)
        st.var = np.ones_like(st.var)
        st.initialized = True

    probe_len = cfg.input_len
    while True:
        x = Tensor(np.ones((1, 1, probe_len)), requires_grad=True)
        feat = probe._stack(x, "infer")
        mask = np.zeros_like(feat.data)
        mask[0, 0, feat.data.shape[-1] // 2] = 1.0
        ag.backward(ag.tsum(ag.mul(feat, Tensor(mask))))
        support = np.nonzero(x.grad[0, 0] != 0.0)[0]
        width = int(support[-1] - support[0] + 1) if support.size else 0
        clipped = support.size and (support[0] == 0 or support[-1] == probe_len - 1)
        if width >= cfg.input_len:
            return cfg.input_len
        if not clipped or probe_len >= 64 * cfg.input_len:
            return width
        probe_len *= 2


# ---------------------------------------------------------------------------
# serialization

def save_model(model, path):
    """Write weights, batch-norm statistics, and config to an .npz file."""
    arch = "fcn2d" if isinstance(model, Fcn2d) else "fcn1d"
    net = model.net if isinstance(model, Fcn2d) else model
    arrays = {"meta": np.frombuffer(
        json.dumps({"arch": arch, **asdict(net.config)}).encode(), dtype=np.uint8)}
    for i, (w, b) in enumerate(net.convs):
        arrays[f"conv{i}_w"] = w.data
        arrays[f"conv{i}_b"] = b.data
    for i, (gamma, beta, st) in enumerate(net.bns):
        arrays[f"bn{i}_gamma"] = gamma.data
        arrays[f"bn{i}_beta"] = beta.data
        arrays[f"bn{i}_mean"] = st.mean
        arrays[f"bn{i}_var"] = st.var
        arrays[f"bn{i}_init"] = np.array(st.initialized)
    np.savez(path, **arrays)


def load_model(path):
    """Rebuild an Fcn1d or Fcn2d saved by save_model."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        arch = meta.pop("arch")
        cfg = FcnConfig(**{f.name: meta[f.name] for f in fields(FcnConfig)})
        model = Fcn2d(cfg) if arch == "fcn2d" else Fcn1d(cfg)
        net = model.net if arch == "fcn2d" else model
        for i, (w, b) in enumerate(net.convs):
            w.data = z[f"conv{i}_w"].copy()
            b.data = z[f"conv{i}_b"].copy()
        for i, (gamma, beta, st) in enumerate(net.bns):
            gamma.data = z[f"bn{i}_gamma"].copy()
            beta.data = z[f"bn{i}_beta"].copy()
            st.mean = z[f"bn{i}_mean"].copy()
            st.var = z[f"bn{i}_var"].copy()
            st.initialized = bool(z[f"bn{i}_init"])
    return model
