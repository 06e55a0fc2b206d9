"""Staged pipeline over one run directory.

Each stage reads the previous stage's artifacts (re-verified on load),
writes its own, and embeds the configuration it ran with so the final
report can echo the whole chain without referencing any absolute path.
Artifacts are pure functions of inputs + seeds, which makes reruns
byte-identical.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cache as cache_mod
from . import contrast as contrast_mod
from . import datastore as ds
from . import mpg as mpg_mod
from . import propmine as pm
from .errors import ValidationError

FORMAT_VERSION = 1


def _log_timing(stage: str, started: float) -> None:
    print(f"[{stage}] {time.perf_counter() - started:.2f}s", file=sys.stderr)


@dataclass
class RunPaths:
    root: Path

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def clusters(self) -> Path:
        return self.root / "clusters.json"

    @property
    def centroids(self) -> Path:
        return self.root / "clusters_centroids.pct1"

    @property
    def assignment(self) -> Path:
        return self.root / "assignment.json"

    @property
    def mpg_dir(self) -> Path:
        return self.root / "mpg"

    @property
    def cache_dir(self) -> Path:
        return self.root / "cache"

    @property
    def train_mpg_trace(self) -> Path:
        return self.root / "train_mpg.json"

    @property
    def train_cache_trace(self) -> Path:
        return self.root / "train_cache.json"

    @property
    def report(self) -> Path:
        return self.root / "report.json"


def stage_gen_synth(out_dir, n_classes=10, shots=16, queries=20, dim=64,
                    patches=8, props=3, noise=0.1, seed=7) -> Path:
    started = time.perf_counter()
    bundle, desc_set, plant = ds.gen_synthetic(
        n_classes=n_classes, shots=shots, queries_per_class=queries, dim=dim,
        patches=patches, m_props=props, noise=noise, seed=seed)
    manifest_path = ds.write_bundle(out_dir, bundle, desc_set, plant,
                                    m_props=props, seed=seed)
    _log_timing("gen-synth", started)
    return manifest_path


def _load_inputs(run: RunPaths):
    manifest = ds.load_manifest(run.manifest)
    bundle = ds.validate_bundle(manifest)
    desc_set = ds.load_descriptions(manifest)
    return manifest, bundle, desc_set


def stage_cluster(run_dir, k="auto", seed=None) -> Path:
    started = time.perf_counter()
    run = RunPaths(Path(run_dir))
    manifest, bundle, desc_set = _load_inputs(run)
    if seed is None:
        seed = manifest.seed
    pool, _ = pm.build_pool(desc_set)
    k_value = pm.default_cluster_count(manifest.n_classes) if k == "auto" else int(k)
    clusters = pm.kmeans(pool, k=k_value, seed=seed)
    shape, crc = ds.save_tensor(run.centroids, clusters.centroids)
    ds.write_json(run.clusters, {
        "format_version": FORMAT_VERSION,
        "config": {"k": k_value, "k_requested": k, "seed": seed},
        "assignment": [int(a) for a in clusters.assignment],
        "inertia": clusters.inertia,
        "centroids": {"path": run.centroids.name, "shape": list(shape), "crc32": crc},
    })
    _log_timing("cluster", started)
    return run.clusters


def load_clusters(run: RunPaths) -> tuple[pm.ClusterSet, dict]:
    doc = ds.read_json(run.clusters)
    centroids = ds.load_tensor(run.root / doc["centroids"]["path"])
    clusters = pm.ClusterSet(
        k=centroids.shape[0],
        assignment=np.array(doc["assignment"], dtype=int),
        centroids=centroids,
        inertia=float(doc["inertia"]),
        seed=int(doc["config"]["seed"]),
    )
    return clusters, doc["config"]


def stage_select(run_dir, m=None) -> Path:
    started = time.perf_counter()
    run = RunPaths(Path(run_dir))
    manifest, bundle, desc_set = _load_inputs(run)
    clusters, cluster_cfg = load_clusters(run)
    m_props = manifest.m_props if m is None else int(m)
    assignment = pm.assemble_assignment(bundle, desc_set, clusters, m_props)
    fallbacks = sum(
        1 for c in assignment.classes for s in c.slots if s.fallback_from is not None)
    doc = assignment.to_json_dict()
    doc["format_version"] = FORMAT_VERSION
    doc["config"] = {"m": m_props, "cluster": cluster_cfg}
    doc["fallback_slots"] = fallbacks
    ds.write_json(run.assignment, doc)
    _log_timing("select", started)
    return run.assignment


def load_assignment(run: RunPaths) -> tuple[pm.PropertyAssignment, dict]:
    doc = ds.read_json(run.assignment)
    return pm.PropertyAssignment.from_json_dict(doc), doc["config"]


def stage_train_mpg(run_dir, cfg: contrast_mod.ContrastConfig | None = None,
                    **overrides) -> Path:
    started = time.perf_counter()
    run = RunPaths(Path(run_dir))
    manifest, bundle, desc_set = _load_inputs(run)
    assignment, select_cfg = load_assignment(run)
    if cfg is None:
        overrides.setdefault("seed", manifest.seed)
        cfg = contrast_mod.ContrastConfig(**overrides)
    params, trace = contrast_mod.train_mpg(bundle, desc_set, assignment, cfg)
    mpg_mod.save_mpg(run.mpg_dir, params)
    ds.write_json(run.train_mpg_trace, {
        "format_version": FORMAT_VERSION,
        "config": {
            "tau": cfg.tau, "n_negatives": cfg.n_negatives,
            "hard_frac_start": cfg.hard_frac_start,
            "hard_frac_end": cfg.hard_frac_end, "epochs": cfg.epochs,
            "lr": cfg.lr, "batch_size": cfg.batch_size, "seed": cfg.seed,
            "layers": cfg.layers, "hidden": cfg.hidden, "heads": cfg.heads,
            "select": select_cfg,
        },
        "trace": trace,
    })
    _log_timing("train-mpg", started)
    return run.train_mpg_trace


def stage_train_cache(run_dir, epochs=15, lr=1e-3, batch_size=128,
                      beta_s=cache_mod.DEFAULT_BETA_S,
                      logit_scale=cache_mod.DEFAULT_LOGIT_SCALE,
                      seed=None) -> Path:
    started = time.perf_counter()
    run = RunPaths(Path(run_dir))
    manifest, bundle, _ = _load_inputs(run)
    params = mpg_mod.load_mpg(run.mpg_dir)
    if seed is None:
        seed = manifest.seed
    cache = cache_mod.build_caches(bundle, params, beta_s=beta_s,
                                   logit_scale=logit_scale)
    cache, trace = cache_mod.train_cache(bundle, cache, params, epochs=epochs,
                                         lr=lr, batch_size=batch_size, seed=seed)
    cache_mod.save_cache(run.cache_dir, cache)
    ds.write_json(run.train_cache_trace, {
        "format_version": FORMAT_VERSION,
        "config": {"epochs": epochs, "lr": lr, "batch_size": batch_size,
                   "beta_s": beta_s, "logit_scale": logit_scale, "seed": seed},
        "trace": trace,
    })
    _log_timing("train-cache", started)
    return run.train_cache_trace


def stage_eval(run_dir, beta_s=cache_mod.DEFAULT_BETA_S,
               logit_scale=cache_mod.DEFAULT_LOGIT_SCALE) -> Path:
    """Score the query split; uses the trained cache when present, otherwise
    a freshly built (untrained) one."""
    started = time.perf_counter()
    run = RunPaths(Path(run_dir))
    manifest, bundle, _ = _load_inputs(run)
    params = mpg_mod.load_mpg(run.mpg_dir)
    if (run.cache_dir / "cache.json").is_file():
        cache = cache_mod.load_cache(run.cache_dir)
        cache_cfg = ds.read_json(run.train_cache_trace)["config"] \
            if run.train_cache_trace.is_file() else {}
    else:
        cache = cache_mod.build_caches(bundle, params, beta_s=beta_s,
                                       logit_scale=logit_scale)
        cache_cfg = {"beta_s": beta_s, "logit_scale": logit_scale}
    outcome = cache_mod.evaluate(bundle, params, cache)
    mpg_cfg = ds.read_json(run.train_mpg_trace)["config"] \
        if run.train_mpg_trace.is_file() else {}
    report = {
        "format_version": FORMAT_VERSION,
        "accuracies": outcome.accuracies,
        "alpha": cache.alpha,
        "beta": cache.beta,
        "token_angular_distances_deg": outcome.angles,
        "trained": cache.trained,
        "counts": {
            "classes": bundle.n_classes,
            "supports": len(bundle.support),
            "queries": outcome.n_queries,
        },
        "config": {
            "bundle": {"D": manifest.dim, "N": manifest.n_classes,
                       "K": manifest.shots, "M": manifest.m_props,
                       "seed": manifest.seed},
            "mpg": mpg_cfg,
            "cache": cache_cfg,
        },
    }
    ds.write_json(run.report, report)
    _log_timing("eval", started)
    return run.report


def report_diff(path_a, path_b) -> tuple[str, bool]:
    """Field-wise accuracy deltas between two reports; True if any differ."""
    import json
    try:
        a = ds.read_json(path_a)
        b = ds.read_json(path_b)
        acc_a, acc_b = a["accuracies"], b["accuracies"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ValidationError(f"cannot diff reports: {exc}") from exc
    lines = []
    for key in sorted(set(acc_a) | set(acc_b)):
        va, vb = acc_a.get(key), acc_b.get(key)
        if va is None or vb is None:
            lines.append(f"{key}: only in one report ({va} vs {vb})")
        elif va != vb:
            lines.append(f"{key}: {va:.6f} -> {vb:.6f} ({vb - va:+.6f})")
    for key in ("alpha", "beta"):
        va, vb = a.get(key), b.get(key)
        if va is not None and vb is not None and va != vb:
            lines.append(f"{key}: {va:.6f} -> {vb:.6f} ({vb - va:+.6f})")
    if not lines:
        return "no differences", False
    return "\n".join(lines), True
