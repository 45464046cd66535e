"""Reverse-mode automatic differentiation over dense float64 tensors.

A Tensor wraps a numpy array plus the graph bookkeeping needed for
backpropagation (parents and a backward closure). Ops are module-level
functions that build the graph as they compute. Everything is double
precision; shapes are explicit and validated, broadcasting is limited to
the bias patterns the network needs.

Convolution orientation: conv1d slides the *flipped* kernel, i.e. it is a
true convolution. With "same" padding the output is centered,
y[n] = sum_i k[i] * x[n + (K-1)/2 - i], so the kernel vector read left to
right is exactly the tap vector b_0..b_N of the causal FIR filter that
this layer realizes with a (K-1)/2 sample delay. causal_conv1d removes
that delay and returns the causal filter output itself.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dsp import next_pow2

# Kernels at least this long go through the FFT convolution path.
FFT_KERNEL_MIN = 16

BCE_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Tensor:
    """Node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        # leaves are validated; op outputs are checked at the loss instead
        # (per-op scans would dominate the training hot path)
        if not parents and not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite values in tensor")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g)  # copy: g may be shared by another node
        else:
            self.grad += g

    def accumulate_owned(self, g):
        """Like accumulate, but takes ownership of g (caller-built buffer)."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"


def tensor(data) -> Tensor:
    """Constant leaf (no gradient collected)."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Trainable leaf."""
    return Tensor(data, requires_grad=True)


def _node(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents,
                  backward=backward if req else None, op=op)


def backward(root: Tensor) -> None:
    """Accumulate gradients of a scalar root into every reachable node.

    Nodes used more than once (shared parameters) receive the sum of the
    contributions from each use. Rejects cyclic graphs.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar, got shape {root.data.shape}")
    order: list[Tensor] = []
    VISITING, DONE = 0, 1
    state: dict[int, int] = {id(root): VISITING}
    stack: list[tuple[Tensor, object]] = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        child = next(it, None)
        if child is None:
            state[id(node)] = DONE
            order.append(node)
            stack.pop()
            continue
        if not child.requires_grad:
            continue
        st = state.get(id(child))
        if st == VISITING:
            raise ValueError("cycle detected in computation graph")
        if st is None:
            state[id(child)] = VISITING
            stack.append((child, iter(child._parents)))
    root.accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")

    def back(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(g)

    return _node(a.data + b.data, (a, b), back, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")

    def back(g):
        if a.requires_grad:
            a.accumulate_owned(g * b.data)
        if b.requires_grad:
            b.accumulate_owned(g * a.data)

    return _node(a.data * b.data, (a, b), back, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def back(g):
        if x.requires_grad:
            x.accumulate_owned(g * s)

    return _node(x.data * s, (x,), back, "scale")


def tsum(x: Tensor) -> Tensor:
    def back(g):
        if x.requires_grad:
            x.accumulate_owned(np.full_like(x.data, float(g)))

    return _node(x.data.sum(), (x,), back, "sum")


def sum_of_squares(x: Tensor) -> Tensor:
    def back(g):
        if x.requires_grad:
            x.accumulate_owned(2.0 * float(g) * x.data)

    return _node((x.data * x.data).sum(), (x,), back, "sum_sq")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0  # gradient at exactly 0 is 0

    def back(g):
        if x.requires_grad:
            x.accumulate_owned(g * mask)

    return _node(np.maximum(x.data, 0.0), (x,), back, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        if x.requires_grad:
            x.accumulate_owned(g * out * (1.0 - out))

    return _node(out, (x,), back, "sigmoid")


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))

    return _node(x.data.reshape(shape), (x,), back, "reshape")


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ValueError("concat of nothing")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(a), int(b))
                p.accumulate(g[tuple(idx)])

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), back, "concat")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[idx] += g

    return _node(x.data[idx], (x,), back, "slice")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(x, 1, start, stop)


def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(x, x.data.ndim - 1, start, stop)


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    width = [(0, 0)] * (x.data.ndim - 1) + [(left, right)]
    l_ = left
    n = x.data.shape[-1]

    def back(g):
        if x.requires_grad:
            x.accumulate(g[..., l_:l_ + n])

    return _node(np.pad(x.data, width), (x,), back, "pad_time")


def flip_time(x: Tensor) -> Tensor:
    def back(g):
        if x.requires_grad:
            x.accumulate_owned(np.ascontiguousarray(g[..., ::-1]))

    return _node(np.ascontiguousarray(x.data[..., ::-1]), (x,), back, "flip_time")


# ---------------------------------------------------------------------------
# convolution

def conv1d(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """1-D convolution of [batch, ch_in, length] with [ch_out, ch_in, k].

    "same" keeps the length (odd k only, zeros outside the signal);
    "valid" yields length - k + 1 samples. Gradients are defined for both
    the signal and the kernel. Long kernels run through an FFT path; both
    paths are deterministic.
    """
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ValueError("conv1d expects x [B, Ci, L] and kernel [Co, Ci, k]")
    b, ci, length = x.data.shape
    co, kci, k = kernel.data.shape
    if kci != ci:
        raise ValueError(f"channel mismatch: input {ci}, kernel {kci}")
    if k > length and padding == "valid":
        raise ValueError(f"kernel ({k}) longer than signal ({length}) for valid padding")
    if padding == "same" and k % 2 == 0:
        raise ValueError("same padding requires an odd kernel length")
    p = (k - 1) // 2 if padding == "same" else 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p))) if p else x.data
    lp = xp.shape[-1]

    ln = lp - k + 1
    use_fft = k >= FFT_KERNEL_MIN
    if use_fft:
        nfft = next_pow2(lp + k)
        xhat = np.fft.rfft(xp, nfft)
        khat = np.fft.rfft(kernel.data, nfft)
        full = np.fft.irfft(np.einsum("bcf,ocf->bof", xhat, khat), nfft)
        out = np.ascontiguousarray(full[:, :, k - 1:lp])
        cols = None
    else:
        nfft = xhat = khat = None
        win = sliding_window_view(xp, k, axis=2)  # [B, Ci, Ln, k]
        cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b, ln, ci * k)
        kf = kernel.data[:, :, ::-1].reshape(co, ci * k)
        out = np.ascontiguousarray((cols @ kf.T).transpose(0, 2, 1))

    def back(g):
        g = np.ascontiguousarray(g)
        if kernel.requires_grad:
            if use_fft:
                ghat = np.fft.rfft(g, nfft)
                corr = np.einsum("bof,bcf->ocf", np.conj(ghat), xhat)
                dkf = np.fft.irfft(corr, nfft)[:, :, :k]
            else:
                gm = g.transpose(1, 0, 2).reshape(co, b * ln)
                dkf = (gm @ cols.reshape(b * ln, ci * k)).reshape(co, ci, k)
            kernel.accumulate_owned(np.ascontiguousarray(dkf[:, :, ::-1]))
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1)))
            if use_fft:
                nfft2 = next_pow2(gp.shape[-1] + k)
                gph = np.fft.rfft(gp, nfft2)
                kh2 = khat if nfft2 == nfft else np.fft.rfft(kernel.data, nfft2)
                corr = np.einsum("bof,ocf->bcf", gph, np.conj(kh2))
                dxp = np.fft.irfft(corr, nfft2)[:, :, :lp]
            else:
                win_g = sliding_window_view(gp, k, axis=2)  # [B, Co, Lp, k]
                colsg = np.ascontiguousarray(win_g.transpose(0, 2, 1, 3)).reshape(b, lp, co * k)
                kk = kernel.data.transpose(0, 2, 1).reshape(co * k, ci)
                dxp = (colsg @ kk).transpose(0, 2, 1)
            x.accumulate_owned(np.ascontiguousarray(dxp[:, :, p:p + length]))

    return _node(out, (x, kernel), back, f"conv1d_{padding}")


def causal_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Causal FIR filtering y[n] = sum_i k[i] x[n-i] through the conv layer.

    The centered "same" convolution computes this very sum at an index
    offset of (K-1)/2; shifting the input right by that amount and keeping
    the first `length` outputs removes the offset exactly.
    """
    if kernel.data.ndim != 3 or kernel.data.shape[1] != 1:
        raise ValueError("causal_conv1d expects a single-channel kernel [Co, 1, k]")
    k = kernel.data.shape[-1]
    if k % 2 == 0:
        raise ValueError("kernel length must be odd")
    length = x.data.shape[-1]
    shifted = pad_time(x, (k - 1) // 2, 0)
    full = conv1d(shifted, kernel, padding="same")
    return slice_time(full, 0, length)


# ---------------------------------------------------------------------------
# dense / pooling / normalization / regularization

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("dense expects x [B, in], w [in, out], b [out]")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"dense shape mismatch: x {x.data.shape}, w {w.data.shape}, "
                         f"b {b.data.shape}")

    def back(g):
        if x.requires_grad:
            x.accumulate_owned(g @ w.data.T)
        if w.requires_grad:
            w.accumulate_owned(x.data.T @ g)
        if b.requires_grad:
            b.accumulate_owned(g.sum(axis=0))

    return _node(x.data @ w.data + b.data, (x, w, b), back, "dense")


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 3 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ValueError("add_channel_bias expects x [B, C, L] and b [C]")

    def back(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate_owned(g.sum(axis=(0, 2)))

    return _node(x.data + b.data[None, :, None], (x, b), back, "bias")


def maxpool1d(x: Tensor, pool: int) -> Tensor:
    """Non-overlapping max pooling; a trailing remainder is dropped.

    Ties route the gradient to the first maximal element of the window.
    """
    if pool < 1:
        raise ValueError(f"pool must be >= 1, got {pool}")
    if pool == 1:
        return x
    b, c, length = x.data.shape
    lo = length // pool
    if lo == 0:
        raise ValueError(f"signal of length {length} shorter than pool {pool}")
    view = x.data[:, :, :lo * pool].reshape(b, c, lo, pool)

    if pool == 2:
        left = view[..., 0]
        right = view[..., 1]
        second = right > left  # strict: ties stay with the first element
        out = np.where(second, right, left)

        def back(g):
            if x.requires_grad:
                full = np.zeros_like(x.data)
                buf = full[:, :, :lo * pool].reshape(b, c, lo, pool)
                np.multiply(g, second, out=buf[..., 1])
                np.multiply(g, ~second, out=buf[..., 0])
                x.accumulate_owned(full)

        return _node(out, (x,), back, "maxpool")

    am = view.argmax(axis=-1)  # argmax takes the first maximum

    def back(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            buf = full[:, :, :lo * pool].reshape(b, c, lo, pool)
            np.put_along_axis(buf, am[..., None], g[..., None], axis=-1)
            x.accumulate_owned(full)

    return _node(view.max(axis=-1), (x,), back, "maxpool")


class BatchNormState:
    """Running statistics owned by one batch-norm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.mean.size)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                train: bool, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalization over batch and length of [B, C, L].

    Train mode normalizes with (biased) batch statistics and updates the
    running statistics in place; infer mode uses the running statistics.
    """
    if x.data.ndim != 3:
        raise ValueError("batchnorm1d expects x [B, C, L]")
    b, c, length = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("gamma/beta must have shape [C]")
    if train:
        if b < 2:
            raise ValueError("batchnorm in train mode needs batch >= 2")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        state.mean = momentum * state.mean + (1.0 - momentum) * mu
        state.var = momentum * state.var + (1.0 - momentum) * var
    else:
        mu = state.mean.copy()
        var = state.var.copy()
    ivar = 1.0 / np.sqrt(var + eps)
    # single fused pass: out = x * (gamma*ivar) + (beta - gamma*ivar*mu)
    a_ch = gamma.data * ivar
    out = x.data * a_ch[None, :, None] + (beta.data - a_ch * mu)[None, :, None]
    m = b * length

    def back(g):
        if gamma.requires_grad or (x.requires_grad and train):
            xh = (x.data - mu[None, :, None]) * ivar[None, :, None]
        if gamma.requires_grad:
            gamma.accumulate_owned((g * xh).sum(axis=(0, 2)))
        if beta.requires_grad:
            beta.accumulate_owned(g.sum(axis=(0, 2)))
        if x.requires_grad:
            if train:
                # dL/dx through the batch statistics
                gsum = g.sum(axis=(0, 2))
                gxh = (g * xh).sum(axis=(0, 2))
                dx = (g - (gsum[None, :, None] + xh * gxh[None, :, None]) / m) \
                    * a_ch[None, :, None]
            else:
                dx = g * a_ch[None, :, None]
            x.accumulate_owned(dx)

    return _node(out, (x, gamma, beta), back, "batchnorm")


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) >= rate) / keep

    def back(g):
        if x.requires_grad:
            x.accumulate_owned(g * mask)

    return _node(x.data * mask, (x,), back, "dropout")


def weighted_bce(pred: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Per-sample weighted binary cross-entropy, averaged over the batch.

    Predictions are clamped to [BCE_CLAMP, 1-BCE_CLAMP] inside the logs;
    the gradient uses the clamped values so saturated predictions still
    produce a bounded, nonzero training signal.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    p = pred.data.reshape(-1)
    if y.shape != p.shape or w.shape != p.shape:
        raise ValueError("pred, labels and weights must have equal lengths")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("labels must be 0 or 1")
    n = p.size
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(w * (y * np.log(pc) + (1.0 - y) * np.log1p(-pc))).mean()

    def back(g):
        if pred.requires_grad:
            dp = -(w * (y / pc - (1.0 - y) / (1.0 - pc))) * (float(g) / n)
            pred.accumulate_owned(dp.reshape(pred.data.shape))

    return _node(loss, (pred,), back, "weighted_bce")
