"""Minimal reverse-mode differentiation engine.

Provides exactly the operations the seizure-detection networks need:
1D convolution, batch normalization, ReLU, average/max pooling, global
average pooling, softmax, (weighted) cross-entropy, plus an SGD optimizer
with Nesterov momentum and a finite-difference gradient checker.

Axis convention for all array ops: axis 0 indexes feature maps (K), the
last axis indexes positions (I), and any axes in between are batch axes.
A single window is [K, I]; a batch is [K, B, I].  This maps-first layout
lets every convolution run as a handful of large GEMMs.

Everything is deterministic: backward walks a fixed topological order and
all reductions have a fixed evaluation order, so two identical runs give
bit-identical results.
"""

from __future__ import annotations

import numpy as np


class AutogradError(Exception):
    pass


class Tensor:
    """N-dimensional value with an optional gradient buffer.

    Tensors produced by ops keep references to their parents and a
    backward closure; calling :func:`backward` on a scalar loss walks the
    recorded graph in reverse topological order.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_backdone")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._backdone = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None
        self._backdone = False

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


def _result(data, parents, backward_fn):
    """Build an op output, recording the graph only where gradients can flow."""
    needs = any(p.requires_grad or p._parents for p in parents)
    out = Tensor(data, requires_grad=False)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def topo_order(root):
    """Return the nodes reachable from root in topological order.

    Parents are visited in their recorded order, so the resulting order
    (and hence gradient accumulation order) is deterministic.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate .grad for every tensor reachable from the scalar loss."""
    if loss.data.size != 1:
        raise AutogradError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backdone:
        raise AutogradError("backward called twice on the same graph without reset")
    order = topo_order(loss)
    for node in order:
        node._backdone = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementary ops (used by tests and loss plumbing)

def add(a, b):
    out = _result(a.data + b.data, (a, b), None)

    def back(g):
        a._accum(g)
        b._accum(g)

    out._backward = back
    return out


def mul(a, b):
    out = _result(a.data * b.data, (a, b), None)

    def back(g):
        a._accum(g * b.data)
        b._accum(g * a.data)

    out._backward = back
    return out


def tsum(x):
    out = _result(np.asarray(x.data.sum()), (x,), None)

    def back(g):
        x._accum(np.full_like(x.data, g))

    out._backward = back
    return out


def reshape(x, shape):
    orig = x.data.shape
    out = _result(x.data.reshape(shape), (x,), None)

    def back(g):
        x._accum(g.reshape(orig))

    out._backward = back
    return out


def take_map(x, index):
    """Select one slice along the feature-map axis (axis 0)."""
    out = _result(x.data[index], (x,), None)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[index] = g
        x._accum(gx)

    out._backward = back
    return out


def max_over_axis(x, axis):
    """Maximum along one axis; gradient routes to the first argmax."""
    idx = np.argmax(x.data, axis=axis)
    out = _result(np.take_along_axis(x.data, np.expand_dims(idx, axis), axis).squeeze(axis), (x,), None)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        x._accum(gx)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# network ops

def _conv_geometry(n_in, f, stride, padding):
    if padding == "same":
        n_out = -(-n_in // stride)  # ceil
        pad_total = max((n_out - 1) * stride + f - n_in, 0)
        pad_l = pad_total // 2
        pad_r = pad_total - pad_l
    elif padding == "valid":
        if n_in < f:
            raise AutogradError(f"input length {n_in} shorter than filter width {f}")
        n_out = (n_in - f) // stride + 1
        pad_l = pad_r = 0
    else:
        raise AutogradError(f"unknown padding {padding!r}")
    return n_out, pad_l, pad_r


def conv1d(x, w, b, stride=1, padding="same"):
    """Cross-correlation along the position axis.

    x: [K_in, I] or [K_in, B, I]; w: [K_out, K_in, f]; b: [K_out].
    y[k, ..., i] = sum_{c,j} w[k, c, j] * x_pad[c, ..., i*stride + j] + b[k].
    """
    k_out, k_in, f = w.data.shape
    if f % 2 != 1:
        raise AutogradError(f"filter width must be odd, got {f}")
    if stride < 1:
        raise AutogradError(f"stride must be >= 1, got {stride}")
    single = x.data.ndim == 2
    xd = x.data[:, None, :] if single else x.data
    if xd.ndim != 3 or xd.shape[0] != k_in:
        raise AutogradError(f"conv1d input shape {x.data.shape} incompatible with weights {w.data.shape}")
    if b.data.shape != (k_out,):
        raise AutogradError(f"bias shape {b.data.shape} != ({k_out},)")
    _, nb, n_in = xd.shape
    n_out, pad_l, pad_r = _conv_geometry(n_in, f, stride, padding)

    if pad_l or pad_r:
        xp = np.zeros((k_in, nb, n_in + pad_l + pad_r), dtype=xd.dtype)
        xp[:, :, pad_l:pad_l + n_in] = xd
    else:
        xp = xd
    n_pad = xp.shape[2]
    span = (n_out - 1) * stride + 1

    xp_flat = xp.reshape(k_in, nb * n_pad)
    y = np.empty((k_out, nb, n_out), dtype=xd.dtype)
    y[:] = b.data.astype(xd.dtype)[:, None, None]
    for j in range(f):
        t = (w.data[:, :, j].astype(xd.dtype) @ xp_flat).reshape(k_out, nb, n_pad)
        y += t[:, :, j:j + span:stride]

    out = _result(y[:, 0, :] if single else y, (x, w, b), None)

    def back(g):
        gy = g[:, None, :] if single else g
        gy_flat = gy.reshape(k_out, nb * n_out)
        b._accum(gy.sum(axis=(1, 2)).astype(b.data.dtype))
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp)
        for j in range(f):
            x_slice = xp[:, :, j:j + span:stride]
            gw[:, :, j] = np.tensordot(gy, x_slice, axes=([1, 2], [1, 2])).astype(w.data.dtype)
            gxp[:, :, j:j + span:stride] += (w.data[:, :, j].T.astype(xd.dtype) @ gy_flat).reshape(k_in, nb, n_out)
        w._accum(gw)
        gx = gxp[:, :, pad_l:pad_l + n_in] if (pad_l or pad_r) else gxp
        x._accum(gx[:, 0, :] if single else gx)

    out._backward = back
    return out


def relu(x):
    out = _result(np.maximum(x.data, 0), (x,), None)

    def back(g):
        x._accum(g * (x.data > 0))

    out._backward = back
    return out


class BnState:
    """Running statistics for one batch-norm layer (per feature map)."""

    __slots__ = ("mean", "var", "initialized")

    def __init__(self, n_maps, dtype=np.float32, initialized=False):
        self.mean = np.zeros(n_maps, dtype=dtype)
        self.var = np.ones(n_maps, dtype=dtype)
        self.initialized = initialized

    def copy(self):
        s = BnState(len(self.mean), dtype=self.mean.dtype, initialized=self.initialized)
        s.mean = self.mean.copy()
        s.var = self.var.copy()
        return s


def batch_norm(x, gamma, beta, state, mode, momentum_bn=0.1, eps=1e-5, update_running=True):
    """Normalize per feature map over all batch and position axes.

    Train mode uses batch statistics (and optionally updates the running
    ones); infer mode uses the running statistics and errors if none exist.
    """
    k = x.data.shape[0]
    axes = tuple(range(1, x.data.ndim))
    bshape = (k,) + (1,) * (x.data.ndim - 1)
    gma = gamma.data.reshape(bshape)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            if state.initialized:
                state.mean = ((1.0 - momentum_bn) * state.mean + momentum_bn * mu).astype(state.mean.dtype)
                state.var = ((1.0 - momentum_bn) * state.var + momentum_bn * var).astype(state.var.dtype)
            else:
                state.mean = mu.astype(state.mean.dtype)
                state.var = var.astype(state.var.dtype)
            state.initialized = True
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
        y = gma * xhat + beta.data.reshape(bshape)
        out = _result(y.astype(x.data.dtype), (x, gamma, beta), None)
        m = x.data.size // k

        def back(g):
            gamma._accum((g * xhat).sum(axis=axes).astype(gamma.data.dtype))
            beta._accum(g.sum(axis=axes).astype(beta.data.dtype))
            gxhat = g * gma
            term = gxhat - gxhat.mean(axis=axes, keepdims=True) \
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            x._accum((term * inv_std.reshape(bshape)).astype(x.data.dtype))

        out._backward = back
        return out

    if mode == "infer":
        if not state.initialized:
            raise AutogradError("batch_norm inference requested before any statistics exist")
        inv_std = 1.0 / np.sqrt(state.var.astype(x.data.dtype) + eps)
        xhat = (x.data - state.mean.astype(x.data.dtype).reshape(bshape)) * inv_std.reshape(bshape)
        y = gma * xhat + beta.data.reshape(bshape)
        out = _result(y.astype(x.data.dtype), (x, gamma, beta), None)

        def back(g):
            gamma._accum((g * xhat).sum(axis=axes).astype(gamma.data.dtype))
            beta._accum(g.sum(axis=axes).astype(beta.data.dtype))
            x._accum((g * gma * inv_std.reshape(bshape)).astype(x.data.dtype))

        out._backward = back
        return out

    raise AutogradError(f"unknown batch_norm mode {mode!r}")


def pool1d(x, kind, width, stride):
    """Pooling along the position axis; trailing remainder samples are dropped.

    Average pooling distributes its gradient uniformly; max pooling routes
    it to the first (earliest-position) maximum.
    """
    if width < 1 or stride < 1:
        raise AutogradError(f"pool width/stride must be >= 1, got {width}/{stride}")
    n_in = x.data.shape[-1]
    if n_in < width:
        raise AutogradError(f"input length {n_in} shorter than pool width {width}")
    n_out = (n_in - width) // stride + 1
    lead = x.data.shape[:-1]

    # strided window view [..., n_out, width]
    view = np.lib.stride_tricks.as_strided(
        x.data,
        shape=lead + (n_out, width),
        strides=x.data.strides[:-1] + (x.data.strides[-1] * stride, x.data.strides[-1]),
        writeable=False,
    )

    if kind == "avg":
        out = _result(view.mean(axis=-1).astype(x.data.dtype), (x,), None)

        def back(g):
            gx = np.zeros_like(x.data)
            if stride >= width:
                # windows don't overlap: write through a strided view
                gview = np.lib.stride_tricks.as_strided(
                    gx,
                    shape=lead + (n_out, width),
                    strides=gx.strides[:-1] + (gx.strides[-1] * stride, gx.strides[-1]),
                )
                gview[...] = (g / width)[..., None]
            else:
                gflat = (g / width).reshape(-1, n_out)
                gxflat = gx.reshape(-1, n_in)
                cols = (np.arange(n_out)[:, None] * stride + np.arange(width)[None, :]).ravel()
                np.add.at(gxflat, (np.arange(gxflat.shape[0])[:, None], cols[None, :]),
                          np.repeat(gflat, width, axis=1))
            x._accum(gx)

        out._backward = back
        return out

    if kind == "max":
        idx = np.argmax(view, axis=-1)  # first max on ties
        out = _result(np.take_along_axis(view, idx[..., None], axis=-1)[..., 0], (x,), None)

        def back(g):
            gx = np.zeros_like(x.data)
            pos = (np.arange(n_out) * stride).reshape((1,) * len(lead) + (n_out,)) + idx
            gxflat = gx.reshape(-1, n_in)
            np.add.at(gxflat, (np.arange(gxflat.shape[0])[:, None], pos.reshape(-1, n_out)),
                      g.reshape(-1, n_out))
            x._accum(gx)

        out._backward = back
        return out

    raise AutogradError(f"unknown pool kind {kind!r}")


def global_avg_pool(x):
    """Mean over the position axis per feature map; length-agnostic."""
    n = x.data.shape[-1]
    if n == 0:
        raise AutogradError("global_avg_pool on an empty position axis")
    out = _result(x.data.mean(axis=-1), (x,), None)

    def back(g):
        x._accum(np.repeat(g[..., None] / n, n, axis=-1).astype(x.data.dtype))

    out._backward = back
    return out


def softmax(z, axis=0):
    """Numerically stable softmax along one axis; outputs sum to 1."""
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, (z,), None)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        z._accum((y * (g - dot)).astype(z.data.dtype))

    out._backward = back
    return out


_CLAMP_LO = 1e-7
_CLAMP_HI = 1.0 - 1e-7


def cross_entropy(probs, target, class_weights=None):
    """Weighted cross-entropy averaged over the batch.

    Categorical when probs carries a class axis 0 ([C] or [C, B]) and target
    holds integer class indices; binary when probs and target have the same
    shape (target in {0, 1}).  Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the log.
    """
    t = np.asarray(target)
    if probs.data.ndim == t.ndim + 1:
        n_classes = probs.data.shape[0]
        if t.size and (t.min() < 0 or t.max() >= n_classes):
            raise AutogradError(f"target out of range [0, {n_classes})")
        w = np.ones(n_classes) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
        p = np.clip(probs.data, _CLAMP_LO, _CLAMP_HI)
        batch = 1 if t.ndim == 0 else t.size
        if t.ndim == 0:
            picked = p[int(t)]
            loss = -w[int(t)] * np.log(picked)
        else:
            cols = np.arange(t.size)
            picked = p[t, cols]
            loss = (-w[t] * np.log(picked)).sum() / batch
        out = _result(np.asarray(loss, dtype=np.float64), (probs,), None)

        def back(g):
            gp = np.zeros_like(probs.data)
            mask = (probs.data > _CLAMP_LO) & (probs.data < _CLAMP_HI)
            if t.ndim == 0:
                gp[int(t)] = -w[int(t)] / picked
            else:
                gp[t, cols] = -w[t] / (picked * batch)
            probs._accum((gp * mask * g).astype(probs.data.dtype))

        out._backward = back
        return out

    if probs.data.shape == t.shape:
        if t.size and not np.isin(t, (0, 1)).all():
            raise AutogradError("binary targets must be 0 or 1")
        w0, w1 = (1.0, 1.0) if class_weights is None else (float(class_weights[0]), float(class_weights[1]))
        p = np.clip(probs.data, _CLAMP_LO, _CLAMP_HI)
        batch = max(t.size, 1)
        y = t.astype(np.float64)
        loss = (-(w1 * y * np.log(p) + w0 * (1.0 - y) * np.log1p(-p))).sum() / batch
        out = _result(np.asarray(loss, dtype=np.float64), (probs,), None)

        def back(g):
            mask = (probs.data > _CLAMP_LO) & (probs.data < _CLAMP_HI)
            gp = (-(w1 * y / p) + w0 * (1.0 - y) / (1.0 - p)) / batch
            probs._accum((gp * mask * g).astype(probs.data.dtype))

        out._backward = back
        return out

    raise AutogradError(f"cross_entropy cannot pair probs {probs.data.shape} with target {t.shape}")


# ---------------------------------------------------------------------------
# optimizer

class SgdNesterov:
    """SGD with Nesterov momentum.

    Update per parameter: v <- mu*v - lr*g; theta <- theta + mu*v - lr*g.
    With mu = 0 this reduces to plain theta <- theta - lr*g.
    """

    def __init__(self, params, learning_rate=0.001, momentum=0.9):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        lr, mu = self.learning_rate, self.momentum
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            v *= mu
            v -= lr * g
            p.data += mu * v - lr * g

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(fn, params, eps=1e-5, max_coords=200, seed=0):
    """Compare analytic gradients of fn() against central finite differences.

    fn must rebuild and return the scalar loss Tensor on every call (pure in
    the params).  Checks up to max_coords coordinates per parameter, sampled
    with a fixed seed, and returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise AutogradError("non-finite loss in grad_check")
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        if a is None:
            a = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(fn().data)
            flat[c] = orig - eps
            f_minus = float(fn().data)
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a_c = float(a.reshape(-1)[c])
            err = abs(a_c - numeric) / max(abs(a_c), abs(numeric), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
