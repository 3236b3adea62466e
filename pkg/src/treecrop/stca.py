"""Spatiotemporal segmentation network with attention, and MC-dropout inference.

Multi-temporal mode runs a shared convolutional encoder on every timestep,
feeds each bottleneck pixel's feature sequence through a BiLSTM, pools the
sequence with additive attention and decodes the pooled map with a U-Net
decoder.  Skip connections carry encoder features averaged over time.
Mono-temporal mode is the plain U-Net on a single date.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .raster import NODATA, PatchSet, RasterStack, tile_patches

log = logging.getLogger(__name__)

MODES = ("multi_temporal", "mono_temporal")


@dataclass
class STCAConfig:
    mode: str = "multi_temporal"
    depth: int = 5
    base_channels: int = 8
    max_channels: int = 64
    bands: int = 4
    timesteps: int = 7
    classes: int = 4
    lstm_hidden: int = 32
    attention_dim: int = 32
    dropout: float = 0.3
    mc_runs: int = 10
    patch_size: int | None = None

    def __post_init__(self):
        if self.patch_size is None:
            self.patch_size = 64 if self.mode == "multi_temporal" else 256
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.patch_size % 2 ** (self.depth - 1):
            raise ValueError(f"patch size {self.patch_size} not divisible by 2^{self.depth - 1}")
        if self.mc_runs < 1:
            raise ValueError("mc_runs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.mode == "mono_temporal" and self.timesteps != 1:
            raise ValueError("mono-temporal mode takes a single timestep")

    @property
    def temporal(self):
        return self.mode == "multi_temporal"

    def channels(self, level):
        return min(self.base_channels * 2 ** level, self.max_channels)


def _bottleneck_channels(cfg):
    return 2 * cfg.lstm_hidden if cfg.temporal else cfg.channels(cfg.depth - 1)


def init_params(cfg: STCAConfig, seed: int) -> nn.ParameterSet:
    rng = np.random.default_rng([seed, 0x57CA])
    p = nn.ParameterSet(seed=seed)
    cin = cfg.bands
    for lvl in range(cfg.depth):
        c = cfg.channels(lvl)
        p[f"enc{lvl}.w"] = nn.fan_in_uniform(rng, (c, cin, 3, 3), cin * 9)
        p[f"enc{lvl}.b"] = np.zeros(c, np.float32)
        cin = c
    if cfg.temporal:
        H, D = cfg.lstm_hidden, cfg.channels(cfg.depth - 1)
        for d in ("f", "b"):
            p[f"lstm.{d}.wx"] = nn.fan_in_uniform(rng, (D, 4 * H), 3 * D)
            p[f"lstm.{d}.wh"] = nn.fan_in_uniform(rng, (H, 4 * H), 3 * H)
            b = np.zeros(4 * H, np.float32)
            b[H:2 * H] = 1.0  # forget gate open at start
            p[f"lstm.{d}.b"] = b
        A = cfg.attention_dim
        p["att.w"] = nn.fan_in_uniform(rng, (2 * H, A), 3 * 2 * H)
        p["att.b"] = np.zeros(A, np.float32)
        p["att.v"] = nn.fan_in_uniform(rng, (A,), 3 * A)
    cin = _bottleneck_channels(cfg)
    for lvl in reversed(range(cfg.depth - 1)):
        c = cfg.channels(lvl)
        p[f"up{lvl}.w"] = nn.fan_in_uniform(rng, (cin, c, 2, 2), cin)
        p[f"up{lvl}.b"] = np.zeros(c, np.float32)
        p[f"dec{lvl}.w"] = nn.fan_in_uniform(rng, (c, 2 * c, 3, 3), 2 * c * 9)
        p[f"dec{lvl}.b"] = np.zeros(c, np.float32)
        cin = c
    p["head.w"] = nn.fan_in_uniform(rng, (cfg.classes, cin, 1, 1), 3 * cin)
    p["head.b"] = np.zeros(cfg.classes, np.float32)
    return p


class STCA:
    """Model = configuration + parameter set."""

    def __init__(self, config: STCAConfig, params: nn.ParameterSet):
        self.config = config
        self.params = params

    # -- forward / backward -------------------------------------------------

    def forward(self, x, dropout_mode="off", rng=None):
        """Logits ``(N, K, S, S)`` for inputs ``(N, T, B, S, S)``."""
        cfg, p = self.config, self.params
        N, T, B, S, S2 = x.shape
        if B != cfg.bands or S != S2 or S % 2 ** (cfg.depth - 1):
            raise ValueError(f"input shape {x.shape} incompatible with the model")
        if not cfg.temporal and T != 1:
            raise ValueError("mono-temporal model takes T = 1")
        caches = {}
        z = x.reshape(N * T, B, S, S)
        skips = []
        for lvl in range(cfg.depth):
            if lvl:
                z, caches[f"pool{lvl}"] = nn.maxpool2(z)
            z, caches[f"enc{lvl}"] = nn.conv2d(z, p[f"enc{lvl}.w"], p[f"enc{lvl}.b"])
            z, caches[f"enc{lvl}.relu"] = nn.relu(z)
            if lvl < cfg.depth - 1:
                skips.append(z)
        C, s = z.shape[1], z.shape[2]
        if cfg.temporal:
            seq = z.reshape(N, T, C, s, s).transpose(0, 3, 4, 1, 2).reshape(N * s * s, T, C)
            hs, caches["lstm"] = nn.bilstm(
                seq, (p["lstm.f.wx"], p["lstm.f.wh"], p["lstm.f.b"]),
                (p["lstm.b.wx"], p["lstm.b.wh"], p["lstm.b.b"]))
            ctx, weights, caches["att"] = nn.attention_aggregate(hs, p["att.w"], p["att.b"], p["att.v"])
            caches["att.weights"] = weights
            y = ctx.reshape(N, s, s, -1).transpose(0, 3, 1, 2)
            caches["bneck"] = (N, T, C, s)
        else:
            y = z
        y, caches["drop.bneck"] = nn.dropout(y, cfg.dropout, dropout_mode, rng)
        for lvl in reversed(range(cfg.depth - 1)):
            y, caches[f"up{lvl}"] = nn.transposed_conv2(y, p[f"up{lvl}.w"], p[f"up{lvl}.b"])
            sk = skips[lvl]
            sk = sk.reshape(N, T, *sk.shape[1:]).mean(axis=1) if T > 1 else sk
            c = y.shape[1]
            y = np.concatenate([y, sk], axis=1)
            y, caches[f"dec{lvl}"] = nn.conv2d(y, p[f"dec{lvl}.w"], p[f"dec{lvl}.b"])
            y, caches[f"dec{lvl}.relu"] = nn.relu(y)
            y, caches[f"drop{lvl}"] = nn.dropout(y, cfg.dropout, dropout_mode, rng)
            caches[f"split{lvl}"] = c
        logits, caches["head"] = nn.conv2d(y, p["head.w"], p["head.b"])
        caches["shape"] = x.shape
        return logits, caches

    def backward(self, dlogits, caches):
        cfg = self.config
        N, T, B, S, _ = caches["shape"]
        g = {}
        dy, g["head.w"], g["head.b"] = nn.conv2d_backward(dlogits, caches["head"])
        dskips = {}
        for lvl in range(cfg.depth - 1):
            dy = nn.dropout_backward(dy, caches[f"drop{lvl}"])
            dy = nn.relu_backward(dy, caches[f"dec{lvl}.relu"])
            dy, g[f"dec{lvl}.w"], g[f"dec{lvl}.b"] = nn.conv2d_backward(dy, caches[f"dec{lvl}"])
            c = caches[f"split{lvl}"]
            dsk = dy[:, c:]
            dy = dy[:, :c]
            if T > 1:
                dsk = np.repeat(dsk[:, None] / T, T, axis=1).reshape(N * T, *dsk.shape[1:])
            dskips[lvl] = dsk
            dy, g[f"up{lvl}.w"], g[f"up{lvl}.b"] = nn.transposed_conv2_backward(dy, caches[f"up{lvl}"])
        dy = nn.dropout_backward(dy, caches["drop.bneck"])
        if cfg.temporal:
            n, t, C, s = caches["bneck"]
            dctx = dy.transpose(0, 2, 3, 1).reshape(n * s * s, -1)
            dhs, g["att.w"], g["att.b"], g["att.v"] = nn.attention_backward(dctx, caches["att"])
            dseq, gf, gb = nn.bilstm_backward(dhs, caches["lstm"])
            g["lstm.f.wx"], g["lstm.f.wh"], g["lstm.f.b"] = gf
            g["lstm.b.wx"], g["lstm.b.wh"], g["lstm.b.b"] = gb
            dz = dseq.reshape(n, s, s, t, C).transpose(0, 3, 4, 1, 2).reshape(n * t, C, s, s)
        else:
            dz = dy
        for lvl in reversed(range(cfg.depth)):
            if lvl < cfg.depth - 1:
                dz = dz + dskips[lvl]
            dz = nn.relu_backward(dz, caches[f"enc{lvl}.relu"])
            dz, g[f"enc{lvl}.w"], g[f"enc{lvl}.b"] = nn.conv2d_backward(dz, caches[f"enc{lvl}"])
            if lvl:
                dz = nn.maxpool2_backward(dz, caches[f"pool{lvl}"])
        return g

    def loss_and_grads(self, x, labels, dropout_mode="train", rng=None):
        logits, caches = self.forward(x, dropout_mode, rng)
        loss, dlogits = nn.softmax_cross_entropy(logits, labels, ignore=NODATA)
        return loss, self.backward(dlogits, caches)

    def predict_proba(self, x, dropout_mode="off", rng=None, chunk=8):
        out = []
        for i in range(0, len(x), chunk):
            logits, _ = self.forward(x[i:i + chunk], dropout_mode, rng)
            out.append(nn.softmax(logits, axis=1))
        return np.concatenate(out)

    def attention_weights(self, x):
        """Attention weights ``(N, s*s, T)`` at the bottleneck, dropout off."""
        if not self.config.temporal:
            raise ValueError("mono-temporal model has no temporal attention")
        _, caches = self.forward(x, "off")
        w = caches["att.weights"]
        return w.reshape(x.shape[0], -1, w.shape[1])


def build_model(config: STCAConfig | None = None, seed: int = 0) -> STCA:
    """Initialise a model deterministically from ``seed``."""
    config = config or STCAConfig()
    config.validate()
    return STCA(config, init_params(config, seed))


def prepare_input(values, nodata=None) -> np.ndarray:
    """float32 copy with nodata replaced by zero."""
    x = np.array(values, dtype=np.float32)
    if nodata is not None:
        x[x == np.float32(nodata)] = 0.0
    x[~np.isfinite(x)] = 0.0
    return x


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: STCA
    curve: list = field(default_factory=list)   # (epoch, train_loss, val_loss)
    best_epoch: int = 0


def _augment(x, y, rng):
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    x = np.rot90(x, k, axes=(-2, -1))
    y = np.rot90(y, k, axes=(-2, -1))
    if flip:
        x, y = x[..., ::-1], y[..., ::-1]
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def _mean_loss(model, x, y, batch_size):
    total, count = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits, _ = model.forward(x[i:i + batch_size], "off")
        n = int((y[i:i + batch_size] != NODATA).sum())
        if n:
            total += nn.softmax_cross_entropy(logits, y[i:i + batch_size])[0] * n
            count += n
    return total / max(count, 1)


def train(model: STCA, patches: PatchSet, epochs: int = 30, lr: float = 1e-3,
          val_fraction: float = 0.1, seed: int = 0, batch_size: int = 8,
          patience: int = 5, augment: bool = True, progress=None) -> TrainResult:
    """Adam on pixel-wise cross entropy; keeps the weights with the best validation loss.

    Epoch 0 of the curve is the untrained model evaluated with dropout off.
    Later train losses are minibatch means with dropout active; validation
    losses are always dropout-off.
    """
    if patches.labels is None:
        raise ValueError("training needs labelled patches")
    x = prepare_input(patches.patches)
    y = patches.labels
    present = set(np.unique(y[y != NODATA]).tolist())
    if len(present) < 2:
        warnings.warn(f"training data contains a single class {present}", stacklevel=2)
    rng = np.random.default_rng([seed, 0x7EA1])
    order = rng.permutation(len(x))
    n_val = int(round(val_fraction * len(x))) if len(x) > 1 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    if len(tr_idx) == 0:
        raise ValueError("no training patches left after the validation split")
    xv, yv = x[val_idx], y[val_idx]
    xt, yt = x[tr_idx], y[tr_idx]

    def evaluate():
        v = _mean_loss(model, xv, yv, batch_size) if n_val else float("nan")
        return v

    result = TrainResult(model)
    val0 = evaluate()
    result.curve.append((0, _mean_loss(model, xt, yt, batch_size), val0))
    best = val0 if n_val else result.curve[0][1]
    best_params = model.params.copy()
    stale = 0
    for epoch in range(1, epochs + 1):
        erng = np.random.default_rng([seed, 0x7EA1, epoch])
        perm = erng.permutation(len(xt))
        losses = []
        for i in range(0, len(perm), batch_size):
            idx = np.sort(perm[i:i + batch_size])
            xb, yb = xt[idx], yt[idx]
            if augment:
                xb, yb = _augment(xb, yb, erng)
            if not (yb != NODATA).any():
                continue
            loss, grads = model.loss_and_grads(xb, yb, "train", erng)
            nn.adam_step(model.params, grads, lr=lr)
            losses.append(loss)
        model.params.check_finite()
        tr_loss = float(np.mean(losses)) if losses else float("nan")
        val = evaluate()
        result.curve.append((epoch, tr_loss, val))
        if progress:
            progress(epoch, tr_loss, val)
        log.info("epoch %d train %.4f val %.4f", epoch, tr_loss, val)
        score = val if n_val else tr_loss
        if score < best:
            best, stale = score, 0
            best_params = model.params.copy()
            result.best_epoch = epoch
        else:
            stale += 1
            if stale >= patience:
                break
    model.params = best_params
    return result


# ---------------------------------------------------------------------------
# Monte Carlo dropout inference


def mc_moments(runs):
    """Mean and population standard deviation over axis 0, accumulated in float64.

    The mean is ``sum_r f_r / R`` summed in run order; the deviation is
    ``sqrt(sum_r (f_r - mean)^2 / R)``.
    """
    R = len(runs)
    acc = np.zeros(runs[0].shape, dtype=np.float64)
    for r in range(R):
        acc += runs[r]
    mean = acc / R
    sq = np.zeros_like(mean)
    for r in range(R):
        sq += (runs[r] - mean) ** 2
    return mean, np.sqrt(sq / R)


def argmax_uncertainty(mean, std, axis=1):
    """Deviation of the probability of each pixel's most likely class."""
    top = mean.argmax(axis=axis)
    return np.take_along_axis(std, np.expand_dims(top, axis), axis=axis).squeeze(axis)


def _run_seed(seed, r):
    return np.random.default_rng([seed, 0x3C, r])


def predict_mc(model: STCA, patch, R: int = 10, seed: int = 0, chunk: int = 8,
               return_runs: bool = False):
    """Average of ``R`` dropout-active passes and the spread of the top class.

    ``patch`` is ``(T, B, S, S)`` or a batch ``(N, T, B, S, S)``.  Returns
    ``(mean_probs, unc)`` and, with ``return_runs``, the per-run
    probabilities ``(R, N, K, S, S)`` as a third element.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    x = prepare_input(patch)
    single = x.ndim == 4
    if single:
        x = x[None]
    runs = np.stack([model.predict_proba(x, "mc", _run_seed(seed, r), chunk) for r in range(R)])
    mean, std = mc_moments(runs)
    unc = argmax_uncertainty(mean, std)
    if single:
        mean, unc, runs = mean[0], unc[0], runs[:, 0]
    return (mean, unc, runs) if return_runs else (mean, unc)


@dataclass
class ProbabilityField:
    probs: np.ndarray                      # (K, H, W) mean class probabilities
    unc: np.ndarray                        # (H, W) deviation of the top class
    class_std: np.ndarray                  # (K, H, W)
    runs: np.ndarray | None = None         # (R, K, H, W) per-run stitched probabilities
    provenance: dict = field(default_factory=dict)

    def to_stack(self) -> RasterStack:
        values = np.concatenate([self.probs, self.unc[None]])[None].astype(np.float32)
        names = [f"p{k}" for k in range(self.probs.shape[0])] + ["unc"]
        return RasterStack(values, band_names=names)

    @classmethod
    def from_stack(cls, stack: RasterStack, provenance=None) -> "ProbabilityField":
        v = stack.values[0].astype(np.float64)
        return cls(v[:-1], v[-1], np.full_like(v[:-1], np.nan), None, provenance or {})

    def argmax(self):
        return self.probs.argmax(axis=0).astype(np.uint8)


def stitch(per_patch, origins, extent):
    """Uniform average of overlapping patch outputs ``(N, ..., S, S)`` into ``(..., H, W)``."""
    H, W = extent
    S = per_patch.shape[-1]
    acc = np.zeros(per_patch.shape[1:-2] + (H, W), dtype=np.float64)
    count = np.zeros((H, W), dtype=np.float64)
    for k, (r, c) in enumerate(origins):
        acc[..., r:r + S, c:c + S] += per_patch[k]
        count[r:r + S, c:c + S] += 1
    return acc / count


def infer_scene(model: STCA, stack, R: int = 10, seed: int = 0, stride: int | None = None,
                keep_runs: bool = True) -> ProbabilityField:
    """MC-dropout probabilities and uncertainty for a whole (normalised) scene."""
    if R < 1:
        raise ValueError("R must be >= 1")
    values = stack.values if isinstance(stack, RasterStack) else np.asarray(stack)
    nodata = stack.nodata if isinstance(stack, RasterStack) else None
    S = model.config.patch_size
    if min(values.shape[-2:]) < S:
        raise ValueError(f"scene {values.shape[-2:]} smaller than patch size {S}")
    ps = tile_patches(values, size=S, stride=stride or S // 2)
    x = prepare_input(ps.patches, nodata)
    _, _, runs = predict_mc(model, x, R, seed, return_runs=True)     # (R, N, K, S, S)
    stitched = np.stack([stitch(runs[r], ps.origins, ps.extent) for r in range(R)])
    mean, std = mc_moments(stitched)
    unc = argmax_uncertainty(mean, std, axis=0)
    prov = {"model": model.params.digest()[:16], "runs": R, "seed": seed,
            "dropout": model.config.dropout, "config": asdict(model.config)}
    return ProbabilityField(mean, unc, std, stitched if keep_runs else None, prov)
