"""Self-supervised planting-density grading.

A spatiotemporal autoencoder (convolutional frame encoder, BiLSTM with
attention pooling, LSTM sequence decoder, convolutional frame decoder)
learns patch embeddings.  K-means seeds cluster centres, which deep embedded
clustering then refines together with the encoder by pulling the Student-t
soft assignments towards their sharpened targets.  Clusters are labelled
high or low density, and each plantation is scored by the share of its
patches that fall in high-density clusters.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy import ndimage

from . import nn
from .raster import CASHEW, EIGHT, NODATA

HIGH, LOW = "high", "low"


# ---------------------------------------------------------------------------
# Autoencoder


@dataclass
class AutoencoderConfig:
    patch_size: int = 32
    depth: int = 4
    base_channels: int = 8
    max_channels: int = 32
    bands: int = 4
    timesteps: int = 7
    frame_dim: int = 32
    lstm_hidden: int = 16
    attention_dim: int = 16
    embed_dim: int = 16
    decoder_hidden: int = 32

    def __post_init__(self):
        if self.patch_size % 2 ** (self.depth - 1):
            raise ValueError(f"patch size {self.patch_size} not divisible by 2^{self.depth - 1}")

    def channels(self, level):
        return min(self.base_channels * 2 ** level, self.max_channels)

    @property
    def bottleneck(self):
        s = self.patch_size // 2 ** (self.depth - 1)
        return self.channels(self.depth - 1), s


def _lstm_init(rng, p, prefix, D, H):
    p[f"{prefix}.wx"] = nn.fan_in_uniform(rng, (D, 4 * H), 3 * D)
    p[f"{prefix}.wh"] = nn.fan_in_uniform(rng, (H, 4 * H), 3 * H)
    b = np.zeros(4 * H, np.float32)
    b[H:2 * H] = 1.0
    p[f"{prefix}.b"] = b


def _lstm_params(p, prefix):
    return p[f"{prefix}.wx"], p[f"{prefix}.wh"], p[f"{prefix}.b"]


class Autoencoder:
    """Encoder ``h(X)`` and its reconstructing decoder, sharing one parameter set."""

    def __init__(self, config: AutoencoderConfig, params: nn.ParameterSet):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: AutoencoderConfig | None = None, seed: int = 0) -> "Autoencoder":
        cfg = config or AutoencoderConfig()
        rng = np.random.default_rng([seed, 0xCA57C])
        p = nn.ParameterSet(seed=seed)
        cin = cfg.bands
        for lvl in range(cfg.depth):
            c = cfg.channels(lvl)
            p[f"enc.conv{lvl}.w"] = nn.fan_in_uniform(rng, (c, cin, 3, 3), cin * 9)
            p[f"enc.conv{lvl}.b"] = np.zeros(c, np.float32)
            cin = c
        C, s = cfg.bottleneck
        flat = C * s * s
        p["enc.frame.w"] = nn.fan_in_uniform(rng, (flat, cfg.frame_dim), flat)
        p["enc.frame.b"] = np.zeros(cfg.frame_dim, np.float32)
        _lstm_init(rng, p, "enc.lstm.f", cfg.frame_dim, cfg.lstm_hidden)
        _lstm_init(rng, p, "enc.lstm.b", cfg.frame_dim, cfg.lstm_hidden)
        D = 2 * cfg.lstm_hidden
        p["enc.att.w"] = nn.fan_in_uniform(rng, (D, cfg.attention_dim), 3 * D)
        p["enc.att.b"] = np.zeros(cfg.attention_dim, np.float32)
        p["enc.att.v"] = nn.fan_in_uniform(rng, (cfg.attention_dim,), 3 * cfg.attention_dim)
        p["enc.embed.w"] = nn.fan_in_uniform(rng, (D, cfg.embed_dim), 3 * D)
        p["enc.embed.b"] = np.zeros(cfg.embed_dim, np.float32)

        _lstm_init(rng, p, "dec.lstm", cfg.embed_dim, cfg.decoder_hidden)
        p["dec.frame.w"] = nn.fan_in_uniform(rng, (cfg.decoder_hidden, flat), cfg.decoder_hidden)
        p["dec.frame.b"] = np.zeros(flat, np.float32)
        cin = C
        for lvl in reversed(range(cfg.depth - 1)):
            c = cfg.channels(lvl)
            p[f"dec.up{lvl}.w"] = nn.fan_in_uniform(rng, (cin, c, 2, 2), cin)
            p[f"dec.up{lvl}.b"] = np.zeros(c, np.float32)
            cin = c
        p["dec.out.w"] = nn.fan_in_uniform(rng, (cfg.bands, cin, 3, 3), 3 * cin * 9)
        p["dec.out.b"] = np.full(cfg.bands, 0.5, np.float32)
        return cls(cfg, p)

    # -- encoder ------------------------------------------------------------

    def encode(self, x):
        """Embeddings ``(N, d)`` and the cache for :meth:`encode_backward`."""
        cfg, p = self.config, self.params
        N, T, B, S, _ = x.shape
        if B != cfg.bands or S != cfg.patch_size:
            raise ValueError(f"input shape {x.shape} incompatible with the autoencoder")
        cache = {"shape": x.shape}
        z = x.reshape(N * T, B, S, S)
        for lvl in range(cfg.depth):
            if lvl:
                z, cache[f"pool{lvl}"] = nn.maxpool2(z)
            z, cache[f"conv{lvl}"] = nn.conv2d(z, p[f"enc.conv{lvl}.w"], p[f"enc.conv{lvl}.b"])
            z, cache[f"relu{lvl}"] = nn.relu(z)
        cache["bshape"] = z.shape
        f, cache["frame"] = nn.linear(z.reshape(N, T, -1), p["enc.frame.w"], p["enc.frame.b"])
        f, cache["frame.relu"] = nn.relu(f)
        hs, cache["lstm"] = nn.bilstm(f, _lstm_params(p, "enc.lstm.f"), _lstm_params(p, "enc.lstm.b"))
        ctx, _, cache["att"] = nn.attention_aggregate(hs, p["enc.att.w"], p["enc.att.b"], p["enc.att.v"])
        emb, cache["embed"] = nn.linear(ctx, p["enc.embed.w"], p["enc.embed.b"])
        return emb, cache

    def encode_backward(self, demb, cache):
        cfg = self.config
        N, T, B, S, _ = cache["shape"]
        g = {}
        dctx, g["enc.embed.w"], g["enc.embed.b"] = nn.linear_backward(demb, cache["embed"])
        dhs, g["enc.att.w"], g["enc.att.b"], g["enc.att.v"] = nn.attention_backward(dctx, cache["att"])
        df, gf, gb = nn.bilstm_backward(dhs, cache["lstm"])
        g["enc.lstm.f.wx"], g["enc.lstm.f.wh"], g["enc.lstm.f.b"] = gf
        g["enc.lstm.b.wx"], g["enc.lstm.b.wh"], g["enc.lstm.b.b"] = gb
        df = nn.relu_backward(df, cache["frame.relu"])
        dz, g["enc.frame.w"], g["enc.frame.b"] = nn.linear_backward(df, cache["frame"])
        dz = dz.reshape(cache["bshape"])
        for lvl in reversed(range(cfg.depth)):
            dz = nn.relu_backward(dz, cache[f"relu{lvl}"])
            dz, g[f"enc.conv{lvl}.w"], g[f"enc.conv{lvl}.b"] = nn.conv2d_backward(dz, cache[f"conv{lvl}"])
            if lvl:
                dz = nn.maxpool2_backward(dz, cache[f"pool{lvl}"])
        return g

    # -- decoder ------------------------------------------------------------

    def decode(self, emb, T):
        cfg, p = self.config, self.params
        N = emb.shape[0]
        cache = {"T": T}
        seq = np.repeat(emb[:, None, :], T, axis=1)
        hs, cache["lstm"] = nn.lstm(seq, *_lstm_params(p, "dec.lstm"))
        f, cache["frame"] = nn.linear(hs, p["dec.frame.w"], p["dec.frame.b"])
        f, cache["frame.relu"] = nn.relu(f)
        C, s = cfg.bottleneck
        y = f.reshape(N * T, C, s, s)
        for lvl in reversed(range(cfg.depth - 1)):
            y, cache[f"up{lvl}"] = nn.transposed_conv2(y, p[f"dec.up{lvl}.w"], p[f"dec.up{lvl}.b"])
            y, cache[f"up{lvl}.relu"] = nn.relu(y)
        y, cache["out"] = nn.conv2d(y, p["dec.out.w"], p["dec.out.b"])
        S = y.shape[-1]
        return y.reshape(N, T, cfg.bands, S, S), cache

    def decode_backward(self, drec, cache):
        cfg = self.config
        N, T = drec.shape[:2]
        g = {}
        dy = drec.reshape(N * T, *drec.shape[2:])
        dy, g["dec.out.w"], g["dec.out.b"] = nn.conv2d_backward(dy, cache["out"])
        for lvl in range(cfg.depth - 1):
            dy = nn.relu_backward(dy, cache[f"up{lvl}.relu"])
            dy, g[f"dec.up{lvl}.w"], g[f"dec.up{lvl}.b"] = nn.transposed_conv2_backward(dy, cache[f"up{lvl}"])
        df = nn.relu_backward(dy.reshape(N, T, -1), cache["frame.relu"])
        dhs, g["dec.frame.w"], g["dec.frame.b"] = nn.linear_backward(df, cache["frame"])
        dseq, g["dec.lstm.wx"], g["dec.lstm.wh"], g["dec.lstm.b"] = nn.lstm_backward(dhs, cache["lstm"])
        return dseq.sum(axis=1), g

    def reconstruction_loss(self, x):
        emb, ecache = self.encode(x)
        rec, dcache = self.decode(emb, x.shape[1])
        loss, drec = nn.mse(rec, x)
        demb, g = self.decode_backward(drec, dcache)
        g.update(self.encode_backward(demb, ecache))
        return loss, g

    def embed(self, x, chunk=64):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 4:
            return self.encode(x[None])[0][0]
        return np.concatenate([self.encode(x[i:i + chunk])[0] for i in range(0, len(x), chunk)])


def pretrain_autoencoder(patches, epochs: int = 10, seed: int = 0, lr: float = 1e-3,
                         batch_size: int = 16, config: AutoencoderConfig | None = None,
                         model: Autoencoder | None = None, progress=None):
    """Fit the autoencoder by mean squared reconstruction error.

    Returns ``(model, curve)``; ``curve[0]`` is the untrained loss over all
    patches and ``curve[e]`` the mean minibatch loss of epoch ``e``.
    """
    x = np.asarray(getattr(patches, "patches", patches), dtype=np.float32)
    if model is None:
        cfg = config or AutoencoderConfig(patch_size=x.shape[-1], bands=x.shape[2],
                                          timesteps=x.shape[1])
        model = Autoencoder.build(cfg, seed)

    def full_loss():
        total = 0.0
        for i in range(0, len(x), batch_size):
            emb, _ = model.encode(x[i:i + batch_size])
            rec, _ = model.decode(emb, x.shape[1])
            total += nn.mse(rec, x[i:i + batch_size])[0] * len(rec)
        return total / len(x)

    curve = [(0, full_loss())]
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, 0xAE, epoch])
        perm = rng.permutation(len(x))
        losses = []
        for i in range(0, len(x), batch_size):
            idx = np.sort(perm[i:i + batch_size])
            loss, grads = model.reconstruction_loss(x[idx])
            nn.adam_step(model.params, grads, lr=lr)
            losses.append(loss)
        model.params.check_finite()
        curve.append((epoch, float(np.mean(losses))))
        if progress:
            progress(epoch, curve[-1][1])
    return model, curve


# ---------------------------------------------------------------------------
# Clustering


def _sq_dist(X, C):
    return np.maximum((X * X).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C * C).sum(axis=1)[None], 0.0)


def _lloyd(X, K, rng, max_iter):
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        i = rng.choice(len(X), p=d2 / d2.sum())
        centers.append(X[i])
        d2 = np.minimum(d2, ((X - X[i]) ** 2).sum(axis=1))
    C = np.array(centers)
    assign = None
    for _ in range(max_iter):
        dist = _sq_dist(X, C)
        new = dist.argmin(axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(K):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the point farthest from its centre
                far = dist[np.arange(len(X)), assign].argmax()
                C[j] = X[far]
                assign[far] = j
    return C, assign, float(((X - C[assign]) ** 2).sum())


def kmeans_init(embeddings, K: int = 10, seed: int = 0, max_iter: int = 300, n_init: int = 10):
    """Lloyd's algorithm from seeded k-means++ starts, each run to an assignment fixpoint.

    The best of ``n_init`` starts by within-cluster sum of squares is kept.
    Returns ``(centroids, assignments)``.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    if len(np.unique(X, axis=0)) < K:
        raise ValueError(f"fewer than K={K} distinct points")
    best = None
    for r in range(n_init):
        run = _lloyd(X, K, np.random.default_rng([seed, 0x4EA5, r]), max_iter)
        if best is None or run[2] < best[2]:
            best = run
    return best[0], best[1]


def soft_assign(z, centroids, alpha: float = 1.0):
    """Student-t similarity of each embedding to each centre, normalised over centres."""
    z = np.asarray(z, dtype=np.float64)
    d2 = ((z[:, None, :] - np.asarray(centroids, np.float64)[None]) ** 2).sum(axis=2)
    # kernel maximum at zero distance, independent of a constant shift of both sets
    k = (1.0 + d2 / alpha) ** (-(alpha + 1.0) / 2.0)
    return k / k.sum(axis=1, keepdims=True)


def target_distribution(Q):
    """Square and renormalise by cluster frequency to sharpen the assignment."""
    Q = np.asarray(Q, dtype=np.float64)
    f = Q.sum(axis=0)
    if np.any(f <= 0):
        raise ValueError(f"collapsed cluster: {np.nonzero(f <= 0)[0].tolist()}")
    w = Q ** 2 / f
    return w / w.sum(axis=1, keepdims=True)


def kl_divergence(P, Q):
    """Mean over rows of KL(P_i || Q_i); 0 log 0 = 0."""
    P = np.asarray(P, np.float64)
    Q = np.asarray(Q, np.float64)
    pos = P > 0
    terms = np.where(pos, P * (np.log(np.where(pos, P, 1.0)) - np.log(np.where(pos, Q, 1.0))), 0.0)
    return float(terms.sum() / len(P))


def kl_gradients(z, centroids, P, alpha: float = 1.0):
    """KL(P||Q) for fixed targets ``P`` and its gradients w.r.t. embeddings and centres."""
    z = np.asarray(z, np.float64)
    M = np.asarray(centroids, np.float64)
    diff = z[:, None, :] - M[None]
    d2 = (diff ** 2).sum(axis=2)
    Q = soft_assign(z, M, alpha)
    loss = kl_divergence(P, Q)
    coef = (alpha + 1.0) / alpha * (P - Q) / (1.0 + d2 / alpha) / len(z)
    dz = (coef[:, :, None] * diff).sum(axis=1)
    dM = -(coef[:, :, None] * diff).sum(axis=0)
    return loss, dz, dM


@dataclass
class RefineResult:
    encoder: Autoencoder | None
    centroids: np.ndarray
    kl_curve: list
    assignments: np.ndarray


def refine(encoder, centroids, data, epochs: int = 10, seed: int = 0, lr: float = 1e-2,
           batch_size: int | None = None, alpha: float = 1.0, update_encoder: bool = True,
           optimizer: str = "sgd"):
    """Deep embedded clustering: minimise KL(P||Q) over encoder weights and centres.

    ``encoder`` is an :class:`Autoencoder` and ``data`` its input patches, or
    ``None`` with ``data`` holding fixed embeddings (only centres move).  The
    target ``P`` is recomputed from the current ``Q`` at the start of every
    epoch.  ``kl_curve[e]`` is KL(P_e||Q_e) at the start of epoch ``e``; the
    last entry is measured after the final epoch.

    ``optimizer`` is ``"sgd"`` (plain gradient descent) or ``"adam"``.  Adam
    rescales the small KL gradients to full-size steps, which lets the
    encoder drift away from its pretrained embedding.
    """
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    step = nn.sgd_step if optimizer == "sgd" else nn.adam_step
    x = np.asarray(getattr(data, "patches", data), dtype=np.float32 if encoder else np.float64)
    M = nn.ParameterSet({"centroids": np.array(centroids, dtype=np.float64)})
    batch_size = batch_size or len(x)

    def all_embeddings():
        return encoder.embed(x) if encoder is not None else x

    curve = []
    for epoch in range(epochs + 1):
        Z = all_embeddings()
        Q = soft_assign(Z, M["centroids"], alpha)
        P = target_distribution(Q)
        curve.append(kl_divergence(P, Q))
        if epoch == epochs:
            break
        rng = np.random.default_rng([seed, 0xDEC, epoch])
        perm = rng.permutation(len(x)) if batch_size < len(x) else np.arange(len(x))
        for i in range(0, len(x), batch_size):
            idx = np.sort(perm[i:i + batch_size])
            if encoder is not None:
                z, cache = encoder.encode(x[idx])
            else:
                z = x[idx]
            # loss normalised by the batch, as a mean over its rows
            _, dz, dM = kl_gradients(z, M["centroids"], P[idx], alpha)
            step(M, {"centroids": dM}, lr=lr)
            if encoder is not None and update_encoder:
                grads = encoder.encode_backward(dz.astype(np.float32), cache)
                step(encoder.params, grads, lr=lr)
    return RefineResult(encoder, M["centroids"], curve, Q.argmax(axis=1))


# ---------------------------------------------------------------------------
# Cluster labels and density scores


@dataclass
class ClusterModel:
    centroids: np.ndarray
    alpha: float = 1.0
    labels: list | None = None

    @property
    def K(self):
        return len(self.centroids)

    @property
    def d(self):
        return self.centroids.shape[1]

    def assign(self, z):
        return soft_assign(z, self.centroids, self.alpha).argmax(axis=1)

    def is_high(self):
        if self.labels is None or any(lbl not in (HIGH, LOW) for lbl in self.labels):
            raise ValueError("unlabeled cluster")
        return np.array([lbl == HIGH for lbl in self.labels])

    def save(self, path):
        header = {"magic": "CLUS1", "K": self.K, "alpha": self.alpha, "d": self.d,
                  "labels": self.labels}
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
            fh.write(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            blob = fh.read()
        if header.get("magic") != "CLUS1":
            raise ValueError(f"{path}: not a cluster model file")
        C = np.frombuffer(blob, dtype="<f4").reshape(header["K"], header["d"]).astype(np.float64)
        return cls(C, header["alpha"], header["labels"])


def label_clusters(model: ClusterModel, reference, assignments=None) -> ClusterModel:
    """Attach high/low labels to every cluster.

    ``reference`` is either a mapping ``{cluster: "high" | "low"}`` (e.g. from
    visual inspection) or per-patch truth (1 high, 0 low, anything else
    ignored) to be majority-voted through ``assignments``.  Ties vote high.
    """
    if isinstance(reference, dict):
        labels = []
        for j in range(model.K):
            lbl = reference.get(j, reference.get(str(j)))
            if lbl not in (HIGH, LOW):
                raise ValueError(f"unlabeled cluster {j}")
            labels.append(lbl)
    else:
        truth = np.asarray(reference)
        if assignments is None:
            raise ValueError("majority labelling needs per-patch cluster assignments")
        assignments = np.asarray(assignments)
        labels = []
        for j in range(model.K):
            votes = truth[(assignments == j) & np.isin(truth, (0, 1))]
            if votes.size == 0:
                raise ValueError(f"unlabeled cluster {j}: no reference patches")
            labels.append(HIGH if 2 * int(votes.sum()) >= votes.size else LOW)
    return ClusterModel(np.asarray(model.centroids), model.alpha, labels)


def grid_patches(values, size: int = 32):
    """Non-overlapping aligned ``size`` cells of a ``(T, B, H, W)`` array, row-major.

    Returns ``(patches, grid_shape)``; trailing partial cells are dropped.
    """
    T, B, H, W = values.shape
    gh, gw = H // size, W // size
    v = values[..., :gh * size, :gw * size].reshape(T, B, gh, size, gw, size)
    return np.ascontiguousarray(v.transpose(2, 4, 0, 1, 3, 5).reshape(gh * gw, T, B, size, size)), (gh, gw)


def patch_truth(density_truth, size: int = 32, min_fraction: float = 0.5):
    """Per-cell majority density (1 high, 0 low); 255 when cashew covers < ``min_fraction``."""
    H, W = density_truth.shape
    gh, gw = H // size, W // size
    d = density_truth[:gh * size, :gw * size].reshape(gh, size, gw, size).transpose(0, 2, 1, 3)
    d = d.reshape(gh, gw, -1)
    high = (d == 1).sum(axis=2)
    low = (d == 0).sum(axis=2)
    out = np.where(high >= low, 1, 0).astype(np.uint8)
    out[(high + low) < min_fraction * size * size] = NODATA
    return out


@dataclass
class DensityScoreMap:
    components: np.ndarray                  # (H, W) component id, 0 outside cashew
    scores: dict = field(default_factory=dict)     # id -> Fraction
    counts: dict = field(default_factory=dict)     # id -> (N_high, N_all)
    threshold: float = 0.5
    skipped: list = field(default_factory=list)

    def is_high(self, cid):
        return self.scores[cid] >= Fraction(self.threshold).limit_denominator()

    def score_plane(self, nodata=-9999.0):
        lut = np.full(self.components.max() + 1, nodata, dtype=np.float32)
        for cid, s in self.scores.items():
            lut[cid] = float(s)
        return lut[self.components]

    def class_plane(self):
        lut = np.full(self.components.max() + 1, NODATA, dtype=np.uint8)
        for cid in self.scores:
            lut[cid] = 1 if self.is_high(cid) else 0
        return lut[self.components]

    def to_dict(self):
        return {"threshold": self.threshold,
                "components": [{"id": int(c), "n_high": int(self.counts[c][0]),
                                "n_all": int(self.counts[c][1]),
                                "score": float(self.scores[c]),
                                "label": HIGH if self.is_high(c) else LOW}
                               for c in sorted(self.scores)],
                "skipped": [int(c) for c in self.skipped]}


def density_score(cashew_map, assignments, model: ClusterModel, cell: int = 32,
                  min_cover: float = 0.25, threshold: float = 0.5,
                  skip_empty: bool = False) -> DensityScoreMap:
    """Share of high-density cells per connected cashew plantation.

    ``assignments`` is the ``(H // cell, W // cell)`` grid of cluster ids
    (-1 where no patch was assigned).  A cell counts toward a plantation when
    at least ``min_cover`` of its pixels belong to it.  Plantations scoring
    ``>= threshold`` are high density.
    """
    codes = np.asarray(getattr(cashew_map, "codes", cashew_map))
    high_cluster = model.is_high()
    comp, n = ndimage.label(codes == CASHEW, structure=EIGHT)
    gh, gw = codes.shape[0] // cell, codes.shape[1] // cell
    assignments = np.asarray(assignments)
    if assignments.shape != (gh, gw):
        raise ValueError(f"assignment grid {assignments.shape} does not match ({gh}, {gw})")
    need = int(np.ceil(min_cover * cell * cell))
    n_high = np.zeros(n + 1, dtype=np.int64)
    n_all = np.zeros(n + 1, dtype=np.int64)
    for gi in range(gh):
        for gj in range(gw):
            block = comp[gi * cell:(gi + 1) * cell, gj * cell:(gj + 1) * cell]
            ids, cnt = np.unique(block[block > 0], return_counts=True)
            ids = ids[cnt >= need]
            if ids.size == 0:
                continue
            a = assignments[gi, gj]
            if a < 0:
                raise ValueError(f"cell ({gi}, {gj}) covers cashew but has no cluster assignment")
            n_all[ids] += 1
            if high_cluster[a]:
                n_high[ids] += 1
    out = DensityScoreMap(comp, threshold=threshold)
    for cid in range(1, n + 1):
        if n_all[cid] == 0:
            if not skip_empty:
                raise ValueError(f"plantation {cid} has no counted patches")
            out.skipped.append(cid)
            continue
        out.scores[cid] = Fraction(int(n_high[cid]), int(n_all[cid]))
        out.counts[cid] = (int(n_high[cid]), int(n_all[cid]))
    return out


def config_dict(cfg: AutoencoderConfig) -> dict:
    return asdict(cfg)
