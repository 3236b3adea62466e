"""Small differentiable kernels on numpy arrays.

Every layer is a pair of functions: ``op(...) -> (out, cache)`` and
``op_backward(dout, cache) -> grads``.  Arrays are NCHW for images and
``(N, T, D)`` for sequences.  Kernels keep the dtype of their inputs, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np


class DivergenceError(FloatingPointError):
    """A loss or gradient became NaN/inf."""


# ---------------------------------------------------------------------------
# Convolutions


def _im2col(x, k):
    """Columns ``(N, C*k*k, H*W)`` for a same-padded k x k window."""
    N, C, H, W = x.shape
    pad = k // 2
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((N, C, k * k, H, W), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = x[:, :, i:i + H, j:j + W]
    return cols.reshape(N, C * k * k, H * W)


def conv2d(x, w, b):
    """Stride-1 'same' convolution (cross-correlation) with an odd square kernel."""
    N, C, H, W = x.shape
    F, Cw, k, k2 = w.shape
    if Cw != C or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weights {w.shape}")
    cols = _im2col(x, k) if k > 1 else x.reshape(N, C, H * W)
    out = np.matmul(w.reshape(F, -1), cols) + b[:, None]
    return out.reshape(N, F, H, W), (x.shape, cols, w)


def conv2d_backward(dout, cache):
    shape, cols, w = cache
    N, C, H, W = shape
    F, _, k, _ = w.shape
    dmat = dout.reshape(N, F, H * W)
    dw = np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dmat.sum(axis=(0, 2))
    # gradient of a same-padded correlation is a same-padded correlation with the flipped kernel
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dx, _ = conv2d(dout, wt, np.zeros(C, dtype=dout.dtype))
    return dx, dw, db


def maxpool2(x):
    """2x2 max pooling, stride 2.  Ties route the gradient to the first maximum."""
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    blocks = x.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(N, C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    N, C, H, W = shape
    d = np.zeros((N, C, H // 2, W // 2, 4), dtype=dout.dtype)
    np.put_along_axis(d, idx[..., None], dout[..., None], axis=-1)
    d = d.reshape(N, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return d.reshape(shape)


def transposed_conv2(x, w, b):
    """2x2 transposed convolution with stride 2; ``w`` is ``(C_in, C_out, 2, 2)``."""
    N, C, H, W = x.shape
    if w.shape[0] != C or w.shape[2:] != (2, 2):
        raise ValueError(f"transposed_conv2 shape mismatch: input {x.shape}, weights {w.shape}")
    F = w.shape[1]
    out = np.einsum("nchw,cfab->nfhawb", x, w, optimize=True).reshape(N, F, 2 * H, 2 * W)
    out += b[None, :, None, None]
    return out, (x, w)


def transposed_conv2_backward(dout, cache):
    x, w = cache
    N, C, H, W = x.shape
    F = w.shape[1]
    d = dout.reshape(N, F, H, 2, W, 2)
    dx = np.einsum("nfhawb,cfab->nchw", d, w, optimize=True)
    dw = np.einsum("nchw,nfhawb->cfab", x, d, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    return dx, dw, db


# ---------------------------------------------------------------------------
# Pointwise and dense


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def linear(x, w, b):
    """``x @ w + b`` over the last axis; ``w`` is ``(D_in, D_out)``."""
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ w.T, x2.T @ d2, d2.sum(axis=0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Recurrent


def lstm(x, wx, wh, b):
    """Unidirectional LSTM from zero state.

    x: (N, T, D); wx: (D, 4H); wh: (H, 4H); b: (4H,) with gates ordered
    input, forget, output, candidate.  Returns hidden states (N, T, H).
    """
    N, T, _ = x.shape
    Hd = wh.shape[0]
    h = np.zeros((N, Hd), dtype=x.dtype)
    c = np.zeros((N, Hd), dtype=x.dtype)
    xw = x @ wx + b
    hs = np.empty((N, T, Hd), dtype=x.dtype)
    steps = []
    for t in range(T):
        a = xw[:, t] + h @ wh
        i = sigmoid(a[:, :Hd])
        f = sigmoid(a[:, Hd:2 * Hd])
        o = sigmoid(a[:, 2 * Hd:3 * Hd])
        g = np.tanh(a[:, 3 * Hd:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        steps.append((i, f, o, g, c_prev, h_prev, tc))
    return hs, (x, wx, wh, steps)


def lstm_backward(dhs, cache):
    x, wx, wh, steps = cache
    N, T, _ = x.shape
    Hd = wh.shape[0]
    dx = np.empty_like(x)
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(4 * Hd, dtype=x.dtype)
    dh_next = np.zeros((N, Hd), dtype=x.dtype)
    dc_next = np.zeros((N, Hd), dtype=x.dtype)
    for t in reversed(range(T)):
        i, f, o, g, c_prev, h_prev, tc = steps[t]
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1 - tc ** 2)
        da = np.concatenate([dc * g * i * (1 - i),
                             dc * c_prev * f * (1 - f),
                             dh * tc * o * (1 - o),
                             dc * i * (1 - g ** 2)], axis=1)
        dx[:, t] = da @ wx.T
        dwx += x[:, t].T @ da
        dwh += h_prev.T @ da
        db += da.sum(axis=0)
        dh_next = da @ wh.T
        dc_next = dc * f
    return dx, dwx, dwh, db


def bilstm(x, fwd, bwd):
    """Bidirectional LSTM; ``fwd``/``bwd`` are ``(wx, wh, b)`` triples.

    Output is ``(N, T, 2H)``: forward states then backward states, both
    aligned to input time.
    """
    hf, cf = lstm(x, *fwd)
    hb, cb = lstm(x[:, ::-1], *bwd)
    return np.concatenate([hf, hb[:, ::-1]], axis=2), (cf, cb, hf.shape[2])


def bilstm_backward(dout, cache):
    cf, cb, Hd = cache
    dxf, *gf = lstm_backward(np.ascontiguousarray(dout[:, :, :Hd]), cf)
    dxb, *gb = lstm_backward(np.ascontiguousarray(dout[:, ::-1, Hd:]), cb)
    return dxf + dxb[:, ::-1], tuple(gf), tuple(gb)


def attention_aggregate(hs, w, b, v):
    """Additive attention pooling over time.

    score_t = v . tanh(h_t W + b); weights = softmax_t(score); context = sum_t weights_t h_t.
    hs: (N, T, D); w: (D, A); b, v: (A,).  Returns context (N, D) and weights (N, T).
    """
    u = np.tanh(hs @ w + b)
    scores = u @ v
    a = softmax(scores, axis=1)
    ctx = np.einsum("nt,ntd->nd", a, hs)
    return ctx, a, (hs, w, v, u, a)


def attention_backward(dctx, cache):
    hs, w, v, u, a = cache
    da = np.einsum("nd,ntd->nt", dctx, hs)
    dhs = a[:, :, None] * dctx[:, None, :]
    ds = a * (da - (da * a).sum(axis=1, keepdims=True))
    dv = np.einsum("nt,nta->a", ds, u)
    du = ds[:, :, None] * v
    dpre = du * (1 - u ** 2)
    dhs += dpre @ w.T
    dw = hs.reshape(-1, hs.shape[2]).T @ dpre.reshape(-1, dpre.shape[2])
    db = dpre.sum(axis=(0, 1))
    return dhs, dw, db, dv


# ---------------------------------------------------------------------------
# Dropout and losses

DROPOUT_MODES = ("train", "mc", "off")


def dropout(x, p=0.3, mode="train", seed=None):
    """Inverted dropout.  ``seed`` is an int or a ``numpy.random.Generator``.

    Returns ``(out, mask)``; mask is None when nothing was dropped.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if mode not in DROPOUT_MODES:
        raise ValueError(f"unknown dropout mode {mode!r}")
    if mode == "off" or p == 0.0:
        return x, None
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def softmax_cross_entropy(logits, labels, ignore=255):
    """Pixel-wise cross entropy, averaged over labelled pixels.

    logits: (N, K, H, W); labels: (N, H, W) integer codes or (N, K, H, W)
    one-hot.  Pixels equal to ``ignore`` are excluded from the mean.
    The loss is accumulated in float64.
    """
    K = logits.shape[1]
    if labels.ndim == logits.ndim:
        onehot = labels.astype(np.float64)
        valid = onehot.sum(axis=1) > 0
    else:
        valid = labels != ignore
        if np.any(labels[valid] >= K):
            raise ValueError(f"label code outside 0..{K - 1}")
        onehot = np.zeros(logits.shape, dtype=np.float64)
        codes = np.where(valid, labels, 0).astype(np.int64)
        np.put_along_axis(onehot, codes[:, None], 1.0, axis=1)
        onehot *= valid[:, None]
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every pixel is nodata")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(onehot * logp).sum() / n
    if not np.isfinite(loss):
        raise DivergenceError("loss diverged")
    grad = (np.exp(logp) * valid[:, None] - onehot) / n
    return loss, grad.astype(logits.dtype)


def mse(pred, target):
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(diff ** 2))
    if not np.isfinite(loss):
        raise DivergenceError("loss diverged")
    return loss, (2.0 * diff / diff.size).astype(pred.dtype)


# ---------------------------------------------------------------------------
# Parameters, init and optimizer


class ParameterSet(dict):
    """Named parameter arrays plus seed, step counter and Adam moments."""

    def __init__(self, *args, seed=0, step=0, **kw):
        super().__init__(*args, **kw)
        self.seed = seed
        self.step = step
        self.m = {}
        self.v = {}

    def copy(self):
        out = ParameterSet({k: v.copy() for k, v in self.items()}, seed=self.seed, step=self.step)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def astype(self, dtype):
        return ParameterSet({k: v.astype(dtype) for k, v in self.items()},
                            seed=self.seed, step=self.step)

    def check_finite(self):
        for name, value in self.items():
            if not np.all(np.isfinite(value)):
                raise DivergenceError(f"parameter {name} is not finite")


def fan_in_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def adam_step(params: ParameterSet, grads: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update applied in place; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"diverged: non-finite gradient for {name}")
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = params.m.get(name)
        if m is None:
            m = params.m[name] = np.zeros_like(p)
            params.v[name] = np.zeros_like(p)
        v = params.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params


def sgd_step(params: ParameterSet, grads: dict, lr=1e-2):
    """Plain gradient descent in place; returns ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"diverged: non-finite gradient for {name}")
    params.step += 1
    for name, g in grads.items():
        params[name] -= (lr * g).astype(params[name].dtype)
    return params


def save_params(path, params: ParameterSet, extra: dict | None = None) -> None:
    """Checkpoint: one JSON manifest line, then the raw f32le arrays in manifest order."""
    names = sorted(params)
    entries, blobs, offset = [], [], 0
    for name in names:
        blob = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(params[name].shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"magic": "PSET1", "seed": int(params.seed), "step": int(params.step),
                "params": entries, "extra": extra or {}}
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write((json.dumps(manifest, sort_keys=True) + "\n").encode())
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_params(path) -> tuple[ParameterSet, dict]:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode())
        data = fh.read()
    if manifest.get("magic") != "PSET1":
        raise ValueError(f"{path}: not a parameter checkpoint")
    params = ParameterSet(seed=manifest["seed"], step=manifest["step"])
    for e in manifest["params"]:
        n = int(np.prod(e["shape"]))
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=e["offset"])
        params[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return params, manifest.get("extra", {})
