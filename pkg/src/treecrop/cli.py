"""Command-line pipeline over a working directory.

Every stage reads the artifacts of earlier stages from ``--out`` and writes
its own subdirectory there.  Stages are pure functions of (inputs, config,
seed): outputs carry no timestamps, JSON is written with sorted keys, and
each stage draws its randomness from a substream labelled by the stage name.
Every artifact gets a ``<file>.prov.json`` sidecar.

Exit codes: 0 success, 2 config error, 3 input error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, nn, rstk
from .castc import (Autoencoder, AutoencoderConfig, ClusterModel, density_score, grid_patches,
                    kmeans_init, label_clusters, patch_truth, pretrain_autoencoder, refine)
from .evaluation import (STRATUM_NAMES, change_strata, confusion, draw_design, f1_scores,
                         pairwise_separability, read_samples_csv, stratified_estimates,
                         temporal_consistency, write_samples_csv)
from .postprocess import (GrowThresholds, apply_external_mask, assemble_classmap,
                          temporal_persistence, uncertainty_filter)
from .raster import (BUILTUP, CASHEW, CLASS_CODES, NODATA, PatchSet, RasterStack,
                     compute_normalization, erode_labels, load_mask, normalize, save_mask,
                     tile_patches)
from .stca import ProbabilityField, STCAConfig, build_model, infer_scene, train
from .synth import SceneConfig, synth_scene

log = logging.getLogger("treecrop")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3, 4

STAGES = ("synth", "normalize", "train-stca", "infer", "grow", "train-castc", "density",
          "sample", "evaluate", "report")

REFERENCE_NAMES = STRATUM_NAMES + ("other",)

DEFAULTS = {
    "pipeline": {"seed": "0", "years": "2", "train_scenes": "4"},
    "synth": {"height": "128", "width": "128", "mixture": "0.25, 0.35, 0.10, 0.30",
              "parcel_size": "24", "change_rate": "0.2", "noise": "0.01",
              "high_fraction": "0.5", "low_density_factor": "2.0"},
    "normalize": {"percentile_lo": "2", "percentile_hi": "98"},
    "stca": {"mode": "multi_temporal", "depth": "5", "base_channels": "8", "max_channels": "64",
             "lstm_hidden": "32", "attention_dim": "32", "dropout": "0.3", "runs": "10",
             "patch_size": "64", "stride": "32", "epochs": "30", "lr": "0.001",
             "batch_size": "8", "patience": "5", "val_fraction": "0.1", "erode_radius": "2",
             "min_component": "30", "mono_timestep": "-1", "infer_stride": "32"},
    "grow": {"seed_threshold": "0.8", "neighbor_low": "0.4", "connectivity": "8",
             "uncertainty_threshold": "0.06"},
    "castc": {"cell": "32", "k": "10", "alpha": "1.0", "embed_dim": "16", "depth": "4",
              "base_channels": "8", "max_channels": "32", "frame_dim": "32",
              "lstm_hidden": "16", "attention_dim": "16", "decoder_hidden": "32",
              "pretrain_epochs": "10", "pretrain_lr": "0.001", "refine_epochs": "10",
              "refine_lr": "0.01", "batch_size": "16"},
    "density": {"min_cover": "0.25", "threshold": "0.5"},
    "sample": {"cluster_size": "32", "n_clusters": "120",
               "allocation": "300, 200, 400, 100, 100, 100, 200"},
    "evaluate": {"z": "1.96"},
}


class ConfigError(Exception):
    """Unreadable or invalid configuration."""


class InputError(Exception):
    """A stage input is missing or unusable."""


# ---------------------------------------------------------------------------
# Configuration


def load_config(path=None, overrides=None) -> configparser.ConfigParser:
    """Defaults, then the config file (bundled fixture if ``path`` is None), then overrides."""
    cfg = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cfg.read_dict(DEFAULTS)
    try:
        if path is None:
            cfg.read_string(resources.files("treecrop").joinpath("data/fixture.ini").read_text())
        else:
            p = Path(path)
            if not p.is_file():
                raise InputError(f"config file not found: {p}")
            cfg.read_string(p.read_text(), source=str(p))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    for section, values in DEFAULTS.items():
        unknown = set(cfg[section]) - set(values)
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    unknown = set(cfg.sections()) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            cfg[section][key] = str(value)
    return cfg


def config_digest(cfg) -> str:
    canon = {s: dict(sorted(cfg[s].items())) for s in sorted(cfg.sections())}
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()


def _get(cfg, section, key, kind):
    raw = cfg[section][key]
    try:
        if kind is tuple:
            return tuple(float(v) for v in raw.split(","))
        if kind is bool:
            return cfg.getboolean(section, key)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _kind(default: str):
    if "," in default:
        return tuple
    for kind in (int, float):
        try:
            kind(default)
            return kind
        except ValueError:
            pass
    return str


def validate_config(cfg) -> None:
    """Type-check every key against its default so bad values fail before any input is read."""
    for section, values in DEFAULTS.items():
        for key, default in values.items():
            _get(cfg, section, key, _kind(default))


def stage_seed(seed: int, label: str) -> int:
    """A 32-bit substream seed for ``label`` derived from the global seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _build(factory, **kw):
    try:
        return factory(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Artifact plumbing


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def write_curve(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "value"])
        for epoch, value in rows:
            w.writerow([int(epoch), repr(float(value))])


class Stage:
    """One command invocation: resolved config, seed and output bookkeeping."""

    def __init__(self, name, out, cfg, seed):
        self.name = name
        self.out = Path(out)
        self.cfg = cfg
        self.seed = seed
        self.rng_seed = stage_seed(seed, name)
        self.config_hash = config_digest(cfg)
        self.inputs = {}

    def get(self, section, key, kind=str):
        return _get(self.cfg, section, key, kind)

    def need(self, rel) -> Path:
        p = self.out / rel
        if not p.is_file():
            raise InputError(f"missing input: {p}")
        self.inputs[str(rel)] = sha256_file(p)
        return p

    def dir(self, rel) -> Path:
        p = self.out / rel
        p.mkdir(parents=True, exist_ok=True)
        return p

    def provenance(self, path, operations=(), **extra) -> None:
        prov = {"command": self.name, "config_sha256": self.config_hash, "seed": self.seed,
                "stage_seed": self.rng_seed, "treecrop_version": __version__,
                "inputs": dict(sorted(self.inputs.items())), "operations": list(operations)}
        prov.update(extra)
        dump_json(f"{path}.prov.json", prov)

    def json(self, rel, obj, **prov) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        dump_json(p, obj)
        self.provenance(p, **prov)
        return p

    def load_json(self, rel):
        return json.loads(self.need(rel).read_text())

    def stack(self, rel) -> RasterStack:
        p = self.need(rel)
        try:
            return RasterStack.load(p)
        except (rstk.FormatError, ValueError) as exc:
            raise InputError(f"{p}: {exc}") from exc

    def mask(self, rel) -> np.ndarray:
        p = self.need(rel)
        try:
            return load_mask(p)
        except (rstk.FormatError, ValueError) as exc:
            raise InputError(f"{p}: {exc}") from exc


def _scenes(st: Stage) -> dict:
    return st.load_json("synth/scenes.json")


def _year_names(st: Stage):
    return _scenes(st)["years"]


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(st: Stage) -> None:
    """Training scenes and a multi-year study area with ground truth."""
    mixture = st.get("synth", "mixture", tuple)
    cfg = _build(SceneConfig, height=st.get("synth", "height", int),
                 width=st.get("synth", "width", int), mixture=mixture,
                 parcel_size=st.get("synth", "parcel_size", int),
                 change_rate=st.get("synth", "change_rate", float),
                 noise=st.get("synth", "noise", float),
                 high_fraction=st.get("synth", "high_fraction", float),
                 low_density_factor=st.get("synth", "low_density_factor", float))
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    n_train = st.get("pipeline", "train_scenes", int)
    n_years = st.get("pipeline", "years", int)
    if n_train < 1 or n_years < 1:
        raise ConfigError("need at least one training scene and one year")
    d = st.dir("synth")
    scene_cfg = asdict(cfg)
    names = {"train": [f"train_{i:02d}" for i in range(n_train)],
             "years": [f"year_{y}" for y in range(n_years)]}
    jobs = [(name, stage_seed(st.seed, f"synth:{name}"), 0) for name in names["train"]]
    area_seed = stage_seed(st.seed, "synth:area")
    jobs += [(name, area_seed, y) for y, name in enumerate(names["years"])]
    builtup = None
    for name, seed, year in jobs:
        stack, labels, density = synth_scene(cfg, seed, year=year)
        stack.save(d / f"{name}.rstk")
        save_mask(d / f"{name}.labels.rstk", labels)
        save_mask(d / f"{name}.density.rstk", density)
        for suffix in (".rstk", ".labels.rstk", ".density.rstk"):
            st.provenance(d / f"{name}{suffix}", [{"op": "synth_scene", "seed": seed, "year": year,
                                                   "config": scene_cfg}])
        if name.startswith("year") and builtup is None:
            builtup = (labels == BUILTUP).astype(np.uint8)
    save_mask(d / "builtup.rstk", builtup)
    st.provenance(d / "builtup.rstk", [{"op": "external_builtup_mask", "source": "year_0 truth"}])
    st.json("synth/scenes.json", names)


def cmd_normalize(st: Stage) -> None:
    """Per-scene percentile normalization of every stack."""
    lo = st.get("normalize", "percentile_lo", float)
    hi = st.get("normalize", "percentile_hi", float)
    if not 0 <= lo < hi <= 100:
        raise ConfigError(f"invalid percentiles {lo}, {hi}")
    d = st.dir("norm")
    scenes = _scenes(st)
    base_inputs = dict(st.inputs)
    for name in scenes["train"] + scenes["years"]:
        st.inputs = dict(base_inputs)
        stack = st.stack(f"synth/{name}.rstk")
        params = compute_normalization(stack, name, lo, hi)
        normalize(stack, params).save(d / f"{name}.rstk")
        st.json(f"norm/{name}.json", params.to_dict())
        st.provenance(d / f"{name}.rstk", [{"op": "normalize", **params.to_dict()}])


def _stca_config(st: Stage) -> STCAConfig:
    mode = st.get("stca", "mode")
    return _build(STCAConfig, mode=mode, depth=st.get("stca", "depth", int),
                  base_channels=st.get("stca", "base_channels", int),
                  max_channels=st.get("stca", "max_channels", int),
                  timesteps=1 if mode == "mono_temporal" else 7,
                  lstm_hidden=st.get("stca", "lstm_hidden", int),
                  attention_dim=st.get("stca", "attention_dim", int),
                  dropout=st.get("stca", "dropout", float), mc_runs=st.get("stca", "runs", int),
                  patch_size=st.get("stca", "patch_size", int))


def _model_input(stack: RasterStack, cfg: STCAConfig, mono_timestep: int) -> RasterStack:
    if cfg.temporal:
        if stack.T != cfg.timesteps:
            raise InputError(f"stack has {stack.T} timesteps, model expects {cfg.timesteps}")
        return stack
    t = mono_timestep % stack.T
    return RasterStack(stack.values[t:t + 1], stack.nodata, stack.transform, stack.band_names)


def cmd_train_stca(st: Stage) -> None:
    """Train the STCA segmentation network on the training scenes."""
    cfg = _stca_config(st)
    stride = st.get("stca", "stride", int)
    radius = st.get("stca", "erode_radius", int)
    min_component = st.get("stca", "min_component", int)
    mono_t = st.get("stca", "mono_timestep", int)
    sets = []
    for name in _scenes(st)["train"]:
        stack = _model_input(st.stack(f"norm/{name}.rstk"), cfg, mono_t)
        labels = erode_labels(st.mask(f"synth/{name}.labels.rstk"), radius, min_component)
        try:
            sets.append(tile_patches(stack, labels, cfg.patch_size, stride))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    patches = PatchSet.concat(sets)
    model = build_model(cfg, st.rng_seed)
    result = train(model, patches, epochs=st.get("stca", "epochs", int),
                   lr=st.get("stca", "lr", float), seed=st.rng_seed,
                   batch_size=st.get("stca", "batch_size", int),
                   patience=st.get("stca", "patience", int),
                   val_fraction=st.get("stca", "val_fraction", float))
    d = st.dir("stca")
    nn.save_params(d / "model.pset", model.params, {"config": asdict(cfg)})
    ops = [{"op": "erode_labels", "radius": radius, "min_component": min_component},
           {"op": "tile_patches", "size": cfg.patch_size, "stride": stride, "n": len(patches)},
           {"op": "train", "best_epoch": result.best_epoch}]
    st.provenance(d / "model.pset", ops, model_digest=model.params.digest())
    write_curve(d / "train_loss.csv", [(e, tr) for e, tr, _ in result.curve])
    write_curve(d / "val_loss.csv", [(e, v) for e, _, v in result.curve])
    for f in ("train_loss.csv", "val_loss.csv"):
        st.provenance(d / f, ops)
    st.json("stca/report.json", {"patches": len(patches), "best_epoch": result.best_epoch,
                                 "final_train_loss": result.curve[-1][1],
                                 "final_val_loss": result.curve[-1][2],
                                 "model_digest": model.params.digest()}, operations=ops)


def _load_stca(st: Stage):
    params, extra = nn.load_params(st.need("stca/model.pset"))
    kw = dict(extra["config"])
    kw["mc_runs"] = st.get("stca", "runs", int)
    kw["dropout"] = st.get("stca", "dropout", float)
    model = build_model(_build(STCAConfig, **kw), 0)
    model.params = params
    return model


def cmd_infer(st: Stage) -> None:
    """Monte Carlo dropout probability fields for every study-area year."""
    model = _load_stca(st)
    R = model.config.mc_runs
    stride = st.get("stca", "infer_stride", int)
    mono_t = st.get("stca", "mono_timestep", int)
    d = st.dir("infer")
    base_inputs = dict(st.inputs)
    for name in _year_names(st):
        st.inputs = dict(base_inputs)
        stack = _model_input(st.stack(f"norm/{name}.rstk"), model.config, mono_t)
        seed = stage_seed(st.seed, f"infer:{name}")
        try:
            field = infer_scene(model, stack, R=R, seed=seed, stride=stride)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        field.to_stack().save(d / f"{name}.field.rstk")
        rstk.write_array(d / f"{name}.runs.rstk", field.runs.astype(np.float32))
        ops = [{"op": "infer_scene", "runs": R, "seed": seed, "stride": stride,
                "dropout": model.config.dropout, "model": field.provenance["model"]}]
        st.provenance(d / f"{name}.field.rstk", ops)
        st.provenance(d / f"{name}.runs.rstk", ops)


def _thresholds(st: Stage) -> GrowThresholds:
    return _build(GrowThresholds, seed_threshold=st.get("grow", "seed_threshold", float),
                  neighbor_low=st.get("grow", "neighbor_low", float),
                  connectivity=st.get("grow", "connectivity", int))


def cmd_grow(st: Stage) -> None:
    """Grow probability fields into filtered class maps."""
    thr = _thresholds(st)
    unc_thr = st.get("grow", "uncertainty_threshold", float)
    if unc_thr < 0:
        raise ConfigError("uncertainty_threshold must be non-negative")
    names = _year_names(st)
    fields = [ProbabilityField.from_stack(st.stack(f"infer/{n}.field.rstk")) for n in names]
    builtup = st.mask("synth/builtup.rstk")
    maps = [assemble_classmap(f, thr) for f in fields]
    if len(maps) > 1:
        maps = temporal_persistence(maps)
    d = st.dir("grow")
    for name, m, f in zip(names, maps, fields):
        m = uncertainty_filter(apply_external_mask(m, builtup), f.unc, unc_thr)
        save_mask(d / f"{name}.map.rstk", m.codes)
        st.provenance(d / f"{name}.map.rstk", m.provenance)


def _castc_cells(st: Stage, names, cell):
    xs, truth = [], []
    for name in names:
        values = st.stack(f"norm/{name}.rstk").values
        patches, _ = grid_patches(values, cell)
        t = patch_truth(st.mask(f"synth/{name}.density.rstk"), cell).ravel()
        keep = t != NODATA
        xs.append(patches[keep])
        truth.append(t[keep])
    return np.concatenate(xs), np.concatenate(truth)


def cmd_train_castc(st: Stage) -> None:
    """Pretrain the autoencoder, then cluster cells by density."""
    cell = st.get("castc", "cell", int)
    K = st.get("castc", "k", int)
    alpha = st.get("castc", "alpha", float)
    if K < 2 or alpha <= 0:
        raise ConfigError("castc needs k >= 2 and alpha > 0")
    x, truth = _castc_cells(st, _scenes(st)["train"], cell)
    if len(x) < K:
        raise InputError(f"only {len(x)} cashew training cells for k={K} clusters")
    cfg = _build(AutoencoderConfig, patch_size=cell, depth=st.get("castc", "depth", int),
                 base_channels=st.get("castc", "base_channels", int),
                 max_channels=st.get("castc", "max_channels", int), bands=x.shape[2],
                 timesteps=x.shape[1], frame_dim=st.get("castc", "frame_dim", int),
                 lstm_hidden=st.get("castc", "lstm_hidden", int),
                 attention_dim=st.get("castc", "attention_dim", int),
                 embed_dim=st.get("castc", "embed_dim", int),
                 decoder_hidden=st.get("castc", "decoder_hidden", int))
    batch = st.get("castc", "batch_size", int)
    model, pre_curve = pretrain_autoencoder(x, st.get("castc", "pretrain_epochs", int),
                                            st.rng_seed, st.get("castc", "pretrain_lr", float),
                                            batch, cfg)
    z0 = model.embed(x)
    C, a0 = kmeans_init(z0, K, st.rng_seed)
    res = refine(model, C, x, st.get("castc", "refine_epochs", int), st.rng_seed,
                 st.get("castc", "refine_lr", float), batch, alpha)
    clusters = label_clusters(ClusterModel(res.centroids, alpha), truth, res.assignments)
    high = clusters.is_high()
    purity = float(np.mean(high[res.assignments] == (truth == 1)))
    raw = x.reshape(len(x), -1).astype(np.float64)
    _, raw_assign = kmeans_init(raw, K, st.rng_seed)
    si_emb = pairwise_separability(model.embed(x), res.assignments, per_dimension=True)
    si_raw = pairwise_separability(raw, raw_assign, per_dimension=True)

    d = st.dir("castc")
    ops = [{"op": "pretrain_autoencoder", "epochs": len(pre_curve) - 1},
           {"op": "kmeans_init", "k": K}, {"op": "refine", "alpha": alpha},
           {"op": "label_clusters", "source": "generator density truth"}]
    nn.save_params(d / "autoencoder.pset", model.params, {"config": asdict(cfg)})
    clusters.save(d / "clusters.clus")
    write_curve(d / "pretrain_loss.csv", pre_curve)
    write_curve(d / "kl.csv", list(enumerate(res.kl_curve)))
    for f in ("autoencoder.pset", "clusters.clus", "pretrain_loss.csv", "kl.csv"):
        st.provenance(d / f, ops)
    st.json("castc/report.json", {
        "cells": len(x), "k": K, "labels": clusters.labels, "purity": purity,
        "kmeans_purity": float(np.mean(high[a0] == (truth == 1))),
        "mean_si_embedding_per_dim": float(si_emb.mean()) if si_emb.size else None,
        "mean_si_raw_per_dim": float(si_raw.mean()) if si_raw.size else None,
        "kl_curve": [float(v) for v in res.kl_curve]}, operations=ops)


def cmd_density(st: Stage) -> None:
    """Per-plantation density scores from the cell clusters."""
    params, extra = nn.load_params(st.need("castc/autoencoder.pset"))
    model = Autoencoder(_build(AutoencoderConfig, **extra["config"]), params)
    clusters = ClusterModel.load(st.need("castc/clusters.clus"))
    cell = model.config.patch_size
    min_cover = st.get("density", "min_cover", float)
    threshold = st.get("density", "threshold", float)
    if not 0 < min_cover <= 1 or not 0 <= threshold <= 1:
        raise ConfigError("min_cover must lie in (0, 1] and threshold in [0, 1]")
    d = st.dir("density")
    base_inputs = dict(st.inputs)
    for name in _year_names(st):
        st.inputs = dict(base_inputs)
        codes = st.mask(f"grow/{name}.map.rstk")
        patches, grid = grid_patches(st.stack(f"norm/{name}.rstk").values, cell)
        assign = clusters.assign(model.embed(patches)).reshape(grid)
        ds = density_score(codes, assign, clusters, cell, min_cover, threshold, skip_empty=True)
        rstk.write_array(d / f"{name}.score.rstk", ds.score_plane()[None, None], "f32le",
                         nodata=-9999.0)
        save_mask(d / f"{name}.class.rstk", ds.class_plane())
        report = ds.to_dict()
        for comp in report["components"]:
            s = ds.scores[comp["id"]]
            comp["score_exact"] = f"{s.numerator}/{s.denominator}"
        ops = [{"op": "density_score", "cell": cell, "min_cover": min_cover,
                "threshold": threshold}]
        for f in (f"{name}.score.rstk", f"{name}.class.rstk"):
            st.provenance(d / f, ops)
        st.json(f"density/{name}.json", report, operations=ops)


def _reference_strata(st: Stage, names):
    first = st.mask(f"synth/{names[0]}.labels.rstk")
    last = st.mask(f"synth/{names[-1]}.labels.rstk")
    ref = change_strata(first, last)
    ref[ref < 0] = len(STRATUM_NAMES)
    return ref


def cmd_sample(st: Stage) -> None:
    """Draw the stratified cluster sample for accuracy assessment."""
    allocation = tuple(int(v) for v in st.get("sample", "allocation", tuple))
    if len(allocation) != len(STRATUM_NAMES) or min(allocation) < 2:
        raise ConfigError(f"allocation needs {len(STRATUM_NAMES)} entries of at least 2")
    names = _year_names(st)
    if len(names) < 2:
        raise ConfigError("sampling change strata needs at least two years")
    maps = [st.mask(f"grow/{n}.map.rstk") for n in names]
    design, points = draw_design(maps, st.get("sample", "cluster_size", int),
                                 st.get("sample", "n_clusters", int), allocation, st.rng_seed)
    # reference labels stand in for visual interpretation of the sample points
    ref = _reference_strata(st, names)
    for p in points:
        p.reference = int(ref[p.row, p.col])
        p.predicted = p.stratum
    d = st.dir("sample")
    write_samples_csv(d / "points.csv", points)
    ops = [{"op": "draw_design", "allocation": list(allocation)},
           {"op": "reference_labels", "source": "generator truth"}]
    st.provenance(d / "points.csv", ops)
    st.json("sample/design.json", {
        "cluster_size": design.cluster_size, "n_clusters": design.n_clusters,
        "allocation": list(design.allocation), "strata": list(design.strata_names),
        "strata_areas": [int(v) for v in design.strata_areas],
        "frame_sizes": [int(v) for v in design.frame_sizes],
        "clusters": [list(c) for c in design.clusters], "seed": design.seed}, operations=ops)


def cmd_evaluate(st: Stage) -> None:
    """Stratified area estimates and map accuracy."""
    z = st.get("evaluate", "z", float)
    design = st.load_json("sample/design.json")
    try:
        points = read_samples_csv(st.need("sample/points.csv"))
    except (KeyError, ValueError) as exc:
        raise InputError(f"sample/points.csv: {exc}") from exc
    names = _year_names(st)
    n_strata = len(STRATUM_NAMES)
    cm = confusion([p.reference for p in points], [p.predicted for p in points],
                   [p.stratum for p in points], n_strata, len(REFERENCE_NAMES), REFERENCE_NAMES)
    est = stratified_estimates(cm, design["strata_areas"], z)
    areas = est.to_dict(REFERENCE_NAMES)
    areas["area_exact"] = [f"{a.numerator}/{a.denominator}" for a in est.area_exact]
    areas["counts"] = cm.counts.tolist()

    # wall-to-wall map quality per year and class
    per_year = {}
    for name in names:
        truth = st.mask(f"synth/{name}.labels.rstk")
        pred = st.mask(f"grow/{name}.map.rstk")
        ok = pred != NODATA
        mat = confusion(truth[ok], pred[ok], np.zeros(int(ok.sum()), int), 1, len(CLASS_CODES))
        present = mat.pred_counts.sum(axis=0) + mat.pred_counts.sum(axis=1) > 0
        f1 = np.full(len(CLASS_CODES), np.nan)
        f1[present] = f1_scores(mat.pred_counts[np.ix_(present, present)])
        per_year[name] = {"f1": [None if np.isnan(v) else float(v) for v in f1],
                          "pixel_oa": float(np.trace(mat.pred_counts) / max(ok.sum(), 1)),
                          "filtered_pixels": int((~ok).sum())}

    stable = [p for p in points if p.stratum == STRATUM_NAMES.index("stable cashew")]
    maps = [st.mask(f"grow/{n}.map.rstk") for n in names]
    consistency = temporal_consistency(maps, stable, CASHEW) if stable else None

    density = {}
    for name in names:
        truth = st.mask(f"synth/{name}.density.rstk")
        pred = st.mask(f"density/{name}.class.rstk")
        both = (truth != NODATA) & (pred != NODATA)
        density[name] = {"pixels": int(both.sum()),
                         "oa": float((truth[both] == pred[both]).mean()) if both.any() else None}

    st.json("evaluate/accuracy.json", {"area_estimates": areas, "map": per_year,
                                       "temporal_consistency_stable_cashew": consistency,
                                       "density": density, "z": z},
            operations=[{"op": "stratified_estimates", "z": z}])


def cmd_report(st: Stage) -> None:
    """Summary of every stage report with an artifact manifest."""
    names = _year_names(st)
    parts = {"stca": "stca/report.json", "castc": "castc/report.json",
             "accuracy": "evaluate/accuracy.json", "design": "sample/design.json"}
    summary = {k: st.load_json(v) for k, v in parts.items()}
    summary["density"] = {n: st.load_json(f"density/{n}.json") for n in names}
    artifacts = {}
    for p in sorted(st.out.rglob("*")):
        rel = p.relative_to(st.out).as_posix()
        if p.is_file() and not rel.startswith("report/"):
            artifacts[rel] = sha256_file(p)
    summary["artifacts"] = artifacts
    st.json("report/summary.json", summary)


COMMANDS = {"synth": cmd_synth, "normalize": cmd_normalize, "train-stca": cmd_train_stca,
            "infer": cmd_infer, "grow": cmd_grow, "train-castc": cmd_train_castc,
            "density": cmd_density, "sample": cmd_sample, "evaluate": cmd_evaluate,
            "report": cmd_report}


# ---------------------------------------------------------------------------
# Entry point

# (flag, section, key, type, help) for stage-specific overrides
OVERRIDES = {
    "train-stca": [("--mode", "stca", "mode", str, "multi_temporal or mono_temporal"),
                   ("--dropout", "stca", "dropout", float, "dropout rate"),
                   ("--epochs", "stca", "epochs", int, "training epochs"),
                   ("--lr", "stca", "lr", float, "Adam learning rate")],
    "infer": [("--runs", "stca", "runs", int, "Monte Carlo dropout runs"),
              ("--dropout", "stca", "dropout", float, "dropout rate at inference")],
    "grow": [("--seed-threshold", "grow", "seed_threshold", float, "seed probability"),
             ("--neighbor-low", "grow", "neighbor_low", float, "growth probability"),
             ("--connectivity", "grow", "connectivity", int, "4 or 8"),
             ("--uncertainty-threshold", "grow", "uncertainty_threshold", float,
              "maximum uncertainty kept")],
    "train-castc": [("--k", "castc", "k", int, "number of clusters"),
                    ("--alpha", "castc", "alpha", float, "Student-t degrees of freedom"),
                    ("--embed-dim", "castc", "embed_dim", int, "embedding dimension"),
                    ("--epochs", "castc", "refine_epochs", int, "refinement epochs"),
                    ("--lr", "castc", "refine_lr", float, "refinement learning rate")],
    "density": [("--threshold", "density", "threshold", float, "high-density score threshold")],
    "sample": [("--n-clusters", "sample", "n_clusters", int, "clusters to draw")],
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: bundled synthetic fixture)")
    common.add_argument("--seed", type=int, help="global seed (overrides [pipeline] seed)")
    common.add_argument("--out", default="treecrop-out", help="working directory")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="treecrop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        help_ = "every stage in order" if name == "run" else (COMMANDS[name].__doc__ or name)
        p = sub.add_parser(name, parents=[common], help=help_.splitlines()[0])
        flags = OVERRIDES.get(name, []) if name != "run" else \
            [o for n in STAGES for o in OVERRIDES.get(n, []) if o[0] not in ("--epochs", "--lr",
                                                                              "--dropout")]
        for flag, section, key, kind, h in flags:
            p.add_argument(flag, dest=f"{section}.{key}", type=kind, help=h)
    return parser


def run(command: str, out, config=None, seed=None, overrides=None) -> None:
    """Run one command (or ``"run"`` for all of them); raises on failure."""
    cfg = load_config(config, overrides)
    if seed is not None:
        cfg["pipeline"]["seed"] = str(seed)
    validate_config(cfg)
    seed = _get(cfg, "pipeline", "seed", int)
    Path(out).mkdir(parents=True, exist_ok=True)
    for name in (STAGES if command == "run" else (command,)):
        log.info("stage %s", name)
        COMMANDS[name](Stage(name, out, cfg, seed))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    overrides = {tuple(k.split(".", 1)): v for k, v in vars(args).items() if "." in k}
    try:
        run(args.command, args.out, args.config, args.seed, overrides)
    except ConfigError as exc:
        print(f"treecrop: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except nn.DivergenceError as exc:
        print(f"treecrop: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, rstk.FormatError, ValueError, FileNotFoundError) as exc:
        print(f"treecrop: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
