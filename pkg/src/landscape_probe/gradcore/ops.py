"""Differentiable operations: the layer set the classifier and the attacks need."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, active_tape


class NonFiniteError(FloatingPointError):
    pass


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(op, out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return _emit("add_scalar", a.data + b, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_residual(branch: Tensor, shortcut: Optional[Tensor] = None) -> Tensor:
    """Residual join. With no shortcut this is the identity map."""
    if shortcut is None:
        return _emit("identity", branch.data, (branch,), lambda g: (g,))
    return add(branch, shortcut)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        s = np.asarray(b, dtype=a.dtype)
        if s.ndim and s.shape != a.shape:
            raise ValueError(f"mul: constant of shape {s.shape} does not match {a.shape}")
        return _emit("mul_const", a.data * s, (a,), lambda g: (g * s,))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _emit("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=x.dtype),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _emit("relu", np.maximum(x.data, 0), (x,), lambda g: (g * pos,))


# ---------------------------------------------------------------- affine layers

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"linear: incompatible shapes {xd.shape} and {wd.shape}")
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)

    def backward_fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _emit("linear", out, inputs, backward_fn)


def channel_affine(x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """Fixed per-channel ``x * scale + shift`` on NCHW input (no learnable state)."""
    s = np.asarray(scale, dtype=x.dtype).reshape(1, -1, 1, 1)
    b = np.asarray(shift, dtype=x.dtype).reshape(1, -1, 1, 1)
    if s.shape[1] != x.shape[1]:
        raise ValueError(f"channel_affine: {s.shape[1]} scales for {x.shape[1]} channels")
    return _emit("channel_affine", x.data * s + b, (x,), lambda g: (g * s,))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w

    def backward_fn(g):
        return (np.broadcast_to((g / area)[:, :, None, None], (n, c, h, w)).astype(x.dtype),)

    return _emit("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward_fn)


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col_nhwc(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows are output positions, columns are (kh, kw, C) patches of a padded NHWC array."""
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with a (K, C, kh, kw) kernel.

    Internally the patches are gathered channel-last, which keeps the
    gather and scatter loops contiguous.
    """
    if stride <= 0:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    k, cw, kh, kw = wd.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {cw}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({k},)")

    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xn = xd.transpose(0, 2, 3, 1)
    xp = np.pad(xn, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col_nhwc(xp, kh, kw, stride, ho, wo)
    wmat = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(k, kh * kw * c)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    # patches are rebuilt in backward from the padded input, which is kh*kw times smaller
    xp_saved = xp if weight.requires_grad else None
    del cols, xp
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = gn.reshape(n * ho * wo, k)
        gx = gw = gb = None
        if weight.requires_grad:
            cols = _im2col_nhwc(xp_saved, kh, kw, stride, ho, wo)
            gw = (g2.T @ cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2)
            del cols
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gx = _conv_input_grad(gn, wd, h, w, stride, padding)
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _emit("conv2d", out, inputs, backward_fn)


def _conv_input_grad(gn: np.ndarray, wd: np.ndarray, h: int, w: int, stride: int, padding: int) -> np.ndarray:
    n, ho, wo, k = gn.shape
    _, c, kh, kw = wd.shape
    if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
        # full correlation of the output gradient with the flipped kernel
        ph, pw = kh - 1 - padding, kw - 1 - padding
        gp = np.pad(gn, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        cols = _im2col_nhwc(gp, kh, kw, 1, h, w)
        wflip = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)).reshape(kh * kw * k, c)
        return np.ascontiguousarray((cols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2))
    if c >= 16:
        wmat = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(k, kh * kw * c)
        dcols = (gn.reshape(-1, k) @ wmat).reshape(n, ho, wo, kh, kw, c)
        dxn = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=gn.dtype)
        for i in range(kh):
            for j in range(kw):
                dxn[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        return np.ascontiguousarray(dxn[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))
    # few channels (the stem): channel-major scatter keeps each tap's add contiguous
    gk = np.ascontiguousarray(gn.transpose(3, 0, 1, 2)).reshape(k, n * ho * wo)
    dcols = (wd.transpose(2, 3, 1, 0).reshape(kh * kw * c, k) @ gk).reshape(kh, kw, c, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=gn.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))


# ---------------------------------------------------------------- batch norm

class BatchNormState:
    """Running statistics of one batchnorm2d layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.initialized = False


class BatchNormNotReady(RuntimeError):
    pass


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} for {c} channels")
    xd, gd = x.data, gamma.data
    if not training:
        if not state.initialized:
            raise BatchNormNotReady("batchnorm2d in eval mode before any training step: running statistics are uninitialized")
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(xd.dtype)
        xhat = (xd - state.running_mean.astype(xd.dtype).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        out = xhat * gd.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
        scale = (gd * inv).reshape(1, c, 1, 1)

        def backward_eval(g):
            gx = g * scale if x.requires_grad else None
            if not (gamma.requires_grad or beta.requires_grad):
                return gx, None, None
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _emit("batchnorm2d_eval", out, (x, gamma, beta), backward_eval)

    m = n * h * w
    mean = xd.mean(axis=(0, 2, 3))
    centered = xd - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv.reshape(1, c, 1, 1)
    out = xhat * gd.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    mom = state.momentum
    unbiased = var * (m / max(m - 1, 1))
    state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(state.running_mean.dtype)
    state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)
    state.initialized = True

    def backward_train(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * gd.reshape(1, c, 1, 1)
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return _emit("batchnorm2d", out, (x, gamma, beta), backward_train)


# ---------------------------------------------------------------- loss

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under ``softmax(logits)``.

    ``reduction="sum"`` is what attacks use: its gradient row for each sample
    is exactly that sample's own loss gradient.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be (N, K), got {ld.shape}")
    n, k = ld.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"softmax_cross_entropy: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    logp = log_softmax(ld)
    losses = -logp[np.arange(n), labels]
    denom = n if reduction == "mean" else 1
    value = np.asarray(losses.sum() / denom, dtype=ld.dtype)

    def backward_fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / denom),)

    out = _emit("softmax_cross_entropy", value, (logits,), backward_fn)
    out.per_sample = losses
    return out


# ---------------------------------------------------------------- dispatch

def layer_forward(kind: str, *inputs, **kwargs) -> Tensor:
    """Name-based entry to the layer kinds (relu, linear, batchnorm2d, global_avg_pool, add_residual)."""
    table = {
        "relu": relu,
        "linear": linear,
        "batchnorm2d": batchnorm2d,
        "global_avg_pool": global_avg_pool,
        "add_residual": add_residual,
        "conv2d": conv2d,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return fn(*inputs, **kwargs)
