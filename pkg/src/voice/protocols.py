"""Experiment protocols: clean-data evaluation, challenge curves, sweeps.

Every per-image result is cached on disk under the run's output
directory. The cache has two tiers: heatmap pairs keyed by everything
that determines their pixels, and metric records additionally keyed by
the IoU threshold. Re-running an unchanged configuration re-reads
records and performs no gradient passes at all.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import voice
from voice.config import ExperimentConfig, config_hash
from voice.data import ImageDataset, ImageTensor, load_dataset
from voice.engine import GradientEngine
from voice.explainers import ExplainerSpec, ExplanationMap
from voice.metrics import (
    AUCResult,
    ChallengeCurve,
    MetricRecord,
    auc_curve,
    curve_from_records,
    iou,
    nll,
    snr,
    split_means,
    threshold_sweep,
)
from voice.mapio import load_map, save_map
from voice.models import ModelHandle, load_weights
from voice.perturb import ChallengeSpec, apply_challenge
from voice.uncertainty import VoiceMap, compute_voice

CSV_COLUMNS = ("source_id", "method", "challenge", "level", "seed",
               "correct", "iou", "snr", "nll")


@dataclass
class RunManifest:
    """Everything one protocol run produced, plus its provenance."""

    config: dict
    config_hash: str
    weight_checksum: str
    version: str
    records: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    aucs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    backward_passes: int = 0
    wall_clock_s: float = 0.0
    outputs: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------

class MapCache:
    """Content-addressed store of heatmap pairs and metric records."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _digest(parts: dict) -> str:
        return hashlib.sha256(
            json.dumps(parts, sort_keys=True).encode()
        ).hexdigest()[:32]

    def map_key(self, handle: ModelHandle, source_id: str, spec: ExplainerSpec,
                p_t: float) -> str:
        return self._digest(
            {
                "weights": handle.weight_checksum,
                "source": source_id,
                "method": spec.method,
                "layer": spec.map_layer_name,
                "p_t": p_t,
                "sg_samples": spec.smoothgrad_samples,
                "sg_sigma": spec.smoothgrad_sigma,
                "seed": spec.seed,
            }
        )

    def record_key(self, map_key: str, iou_t: float, label) -> str:
        return self._digest({"map": map_key, "iou_t": iou_t, "label": label})

    def load_record(self, record_key: str) -> dict | None:
        p = self.root / f"{record_key}.record.json"
        if not p.is_file():
            return None
        return json.loads(p.read_text())

    def store_record(self, record_key: str, payload: dict) -> None:
        p = self.root / f"{record_key}.record.json"
        p.write_text(json.dumps(payload, sort_keys=True))

    def load_maps(self, map_key: str):
        base_p = self.root / f"{map_key}.base.png"
        voice_p = self.root / f"{map_key}.voice.png"
        if not (base_p.is_file() and voice_p.is_file()):
            return None
        return load_map(base_p), load_map(voice_p)

    def store_maps(self, map_key: str, base: ExplanationMap, vm: VoiceMap) -> None:
        save_map(self.root / f"{map_key}.base.png", base)
        save_map(self.root / f"{map_key}.voice.png", vm)


# ---------------------------------------------------------------------------
# shared evaluation machinery
# ---------------------------------------------------------------------------

def stable_seed(*parts) -> int:
    """Deterministic 63-bit seed from arbitrary string-able parts."""
    payload = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big") >> 1


@dataclass
class WorkItem:
    order: int
    image: ImageTensor
    label: int
    method: str
    challenge: str = "none"
    level: int = 0
    seed: int = 0


def _resolve_layer(cfg: ExperimentConfig, handle: ModelHandle) -> str:
    return handle.last_conv_layer if cfg.layer == "auto" else cfg.layer


def _spec_for(cfg: ExperimentConfig, handle: ModelHandle, method: str,
              item_seed: int) -> ExplainerSpec:
    return ExplainerSpec(
        method=method,
        layer=_resolve_layer(cfg, handle),
        smoothgrad_samples=cfg.smoothgrad_samples,
        smoothgrad_sigma=cfg.smoothgrad_sigma,
        seed=item_seed,
    )


def _evaluate_item(handle: ModelHandle, engine: GradientEngine,
                   cache: MapCache, cfg: ExperimentConfig,
                   item: WorkItem, keep_maps: bool):
    """One (image, explainer) evaluation through the cache."""
    spec = _spec_for(cfg, handle, item.method,
                     stable_seed(item.seed, item.image.source_id, item.method))
    map_key = cache.map_key(handle, item.image.source_id, spec, cfg.p_t)
    record_key = cache.record_key(map_key, cfg.iou_t, item.label)
    cached = cache.load_record(record_key)
    if cached is not None:
        rec = MetricRecord(
            source_id=item.image.source_id,
            method=item.method,
            iou=cached["iou"],
            snr=cached["snr"],
            nll=cached["nll"],
            correct=cached["correct"],
            threshold_t=cfg.iou_t,
            level=item.level,
            challenge=item.challenge,
            seed=item.seed,
        )
        maps = cache.load_maps(map_key) if keep_maps else None
        return rec, maps
    record, base, vm = compute_voice(
        handle, item.image, spec, p_t=cfg.p_t, label=item.label, engine=engine
    )
    rec = MetricRecord(
        source_id=item.image.source_id,
        method=item.method,
        iou=iou(vm, base, cfg.iou_t),
        snr=snr(vm),
        nll=nll(record),
        correct=bool(record.correct),
        threshold_t=cfg.iou_t,
        level=item.level,
        challenge=item.challenge,
        seed=item.seed,
    )
    cache.store_maps(map_key, base, vm)
    if keep_maps:
        base, vm = cache.load_maps(map_key)
    cache.store_record(
        record_key,
        {
            "iou": rec.iou,
            "snr": rec.snr,
            "nll": rec.nll,
            "correct": rec.correct,
            "predicted": record.predicted,
            "label": item.label,
            "probs": [float(p) for p in record.probs],
            "R_used": vm.R_used,
        },
    )
    return rec, ((base, vm) if keep_maps else None)


def _run_items(handle: ModelHandle, cache: MapCache, cfg: ExperimentConfig,
               items: list[WorkItem], keep_maps: bool = False):
    """Evaluate work items, optionally across a worker pool.

    Results come back in item order regardless of scheduling; each worker
    owns a model replica and its own engine, whose backward counts are
    summed.
    """
    import os

    workers = cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)
    workers = min(workers, max(1, len(items)))
    results: list = [None] * len(items)
    skipped: list[str] = []
    backwards = 0
    if workers <= 1:
        engine = GradientEngine()
        for i, item in enumerate(items):
            try:
                results[i] = _evaluate_item(handle, engine, cache, cfg, item, keep_maps)
            except (ValueError, OSError) as e:
                skipped.append(f"{item.image.source_id}: {e}")
        backwards = engine.backward_count
    else:
        shards = [items[w::workers] for w in range(workers)]
        orders = [list(range(w, len(items), workers)) for w in range(workers)]

        def run_shard(shard):
            replica = handle.replicate()
            engine = GradientEngine()
            out = []
            for item in shard:
                try:
                    out.append(_evaluate_item(replica, engine, cache, cfg, item, keep_maps))
                except (ValueError, OSError) as e:
                    out.append(e)
            return out, engine.backward_count

        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            for worker_out, order_ix in zip(pool.map(run_shard, shards), orders):
                shard_results, count = worker_out
                backwards += count
                for pos, res in zip(order_ix, shard_results):
                    if isinstance(res, Exception):
                        skipped.append(f"{items[pos].image.source_id}: {res}")
                    else:
                        results[pos] = res
    kept = [r for r in results if r is not None]
    return kept, skipped, backwards


def _build_items(dataset: ImageDataset, indices, explainers, seed: int,
                 challenge: str = "none", level: int = 0):
    """Work items for sampled indices; unloadable images become skips."""
    items: list[WorkItem] = []
    skipped: list[str] = []
    for pos, i in enumerate(indices):
        try:
            image = dataset.image(i)
        except ValueError as e:
            skipped.append(f"{dataset.source_ids[i]}: {e}")
            continue
        for method in explainers:
            items.append(
                WorkItem(
                    order=pos,
                    image=image,
                    label=int(dataset.labels[i]),
                    method=method,
                    challenge=challenge,
                    level=level,
                    seed=seed,
                )
            )
    return items, skipped


def _sample_dataset(dataset: ImageDataset, count: int, seed: int) -> list[int]:
    rng = np.random.default_rng(seed)
    k = min(count, len(dataset))
    return [int(i) for i in rng.choice(len(dataset), size=k, replace=False)]


def _check_skip_budget(skipped: list[str], requested: int) -> None:
    if requested and len(skipped) > 0.1 * requested:
        raise RuntimeError(
            f"{len(skipped)} of {requested} images failed to evaluate (>10%); "
            f"first failure: {skipped[0]}"
        )


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def _prepare(cfg: ExperimentConfig):
    cfg.validate()
    handle = load_weights(cfg.weights)
    dataset = load_dataset(cfg.data, split="test")
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = MapCache(out_dir / "cache")
    return handle, dataset, out_dir, cache


def run_clean_protocol(cfg: ExperimentConfig) -> RunManifest:
    """Evaluate a clean sample and aggregate correct-vs-wrong statistics."""
    started = time.time()
    handle, dataset, out_dir, cache = _prepare(cfg)
    seed = cfg.seeds[0]
    indices = _sample_dataset(dataset, cfg.sample_count, seed)
    items, load_skipped = _build_items(dataset, indices, cfg.explainers, seed)
    results, skipped, backwards = _run_items(handle, cache, cfg, items)
    skipped = load_skipped + skipped
    _check_skip_budget(skipped, len(indices) * len(cfg.explainers))
    records = [rec for rec, _ in results]
    summary = {
        method: split_means([r for r in records if r.method == method])
        for method in cfg.explainers
    }
    manifest = RunManifest(
        config=cfg.to_dict(),
        config_hash=config_hash(cfg),
        weight_checksum=handle.weight_checksum,
        version=voice.__version__,
        records=records,
        summary=summary,
        skipped=skipped + list(dataset.skipped),
        backward_passes=backwards,
        wall_clock_s=time.time() - started,
    )
    _write_outputs(manifest, out_dir)
    return manifest


def run_challenge_protocol(cfg: ExperimentConfig) -> RunManifest:
    """Per-level evaluation under each configured challenge.

    One full pass per seed; curves carry raw per-level means, the
    normalized view feeds the AUC table, and multi-seed runs additionally
    report the mean and variance across seeds per level.
    """
    if not cfg.challenges:
        raise ValueError("challenge protocol requires at least one challenge")
    for kind, levels in cfg.challenges.items():
        if len(levels) < 2:
            raise ValueError(
                f"challenge {kind!r} has {len(levels)} level(s); "
                "curves and area-under-curve need at least 2"
            )
    started = time.time()
    handle, dataset, out_dir, cache = _prepare(cfg)
    all_records: list[MetricRecord] = []
    all_skipped: list[str] = []
    backwards = 0
    accuracy: dict = {}
    per_seed_records: dict = {}
    for seed in cfg.seeds:
        indices = _sample_dataset(dataset, cfg.sample_count, seed)
        seed_records: list[MetricRecord] = []
        for kind, levels in cfg.challenges.items():
            for level in levels:
                items = []
                for pos, i in enumerate(indices):
                    try:
                        x = dataset.image(i)
                        spec = ChallengeSpec(
                            kind=kind,
                            level=int(level),
                            seed=stable_seed(seed, x.source_id, kind, level),
                            params={"eps": cfg.ifgsm_eps, "steps": cfg.ifgsm_steps},
                        )
                        xp = apply_challenge(
                            x, spec, handle=handle, label=int(dataset.labels[i])
                        )
                    except ValueError as e:
                        all_skipped.append(f"{dataset.source_ids[i]}: {e}")
                        continue
                    for method in cfg.explainers:
                        items.append(
                            WorkItem(
                                order=pos,
                                image=xp,
                                label=int(dataset.labels[i]),
                                method=method,
                                challenge=kind,
                                level=int(level),
                                seed=seed,
                            )
                        )
                results, skipped, count = _run_items(handle, cache, cfg, items)
                backwards += count
                all_skipped.extend(skipped)
                recs = [rec for rec, _ in results]
                seed_records.extend(recs)
                first = [r for r in recs if r.method == cfg.explainers[0]]
                accuracy.setdefault(kind, {}).setdefault(str(level), []).append(
                    float(np.mean([r.correct for r in first])) if first else None
                )
        per_seed_records[seed] = seed_records
        all_records.extend(seed_records)
    _check_skip_budget(all_skipped, len(all_records) + len(all_skipped))

    curves, aucs = _build_curves(cfg, per_seed_records)
    manifest = RunManifest(
        config=cfg.to_dict(),
        config_hash=config_hash(cfg),
        weight_checksum=handle.weight_checksum,
        version=voice.__version__,
        records=all_records,
        curves=curves,
        aucs=aucs,
        accuracy=accuracy,
        skipped=all_skipped + list(dataset.skipped),
        backward_passes=backwards,
        wall_clock_s=time.time() - started,
    )
    _write_outputs(manifest, out_dir)
    return manifest


def _build_curves(cfg: ExperimentConfig, per_seed_records: dict):
    """Raw + normalized curves per (challenge, explainer, seed), plus the
    AUC table averaged over seeds."""
    curves = []
    auc_acc: dict = {}
    for seed, records in per_seed_records.items():
        for kind in cfg.challenges:
            for method in cfg.explainers:
                curve = curve_from_records(records, kind, method)
                if not curve.levels:
                    continue
                normalized = curve.normalized()
                entry = {
                    "seed": seed,
                    "challenge": kind,
                    "explainer": method,
                    "levels": curve.levels,
                    "raw": curve.values,
                    "normalized": normalized.values,
                    "bounds": normalized.bounds,
                }
                curves.append(entry)
                if len(curve.levels) >= 2:
                    for metric in ("iou", "snr"):
                        res = auc_curve(normalized, metric, split="all")
                        auc_acc.setdefault((kind, method, metric), []).append(res.auc)
    # seed-aggregate statistics per curve family
    families: dict = {}
    for entry in curves:
        key = (entry["challenge"], entry["explainer"])
        families.setdefault(key, []).append(entry)
    for key, group in families.items():
        levels = group[0]["levels"]
        agg = {"challenge": key[0], "explainer": key[1], "seed": "aggregate",
               "levels": levels, "mean": {}, "variance": {}}
        for metric in ("iou", "snr", "nll"):
            series = [g["raw"][metric]["all"] for g in group]
            arr = np.asarray(
                [[np.nan if v is None else v for v in s] for s in series],
                dtype=np.float64,
            )
            agg["mean"][metric] = [
                None if np.isnan(v) else float(v) for v in np.nanmean(arr, axis=0)
            ]
            agg["variance"][metric] = [
                None if np.isnan(v) else float(v) for v in np.nanvar(arr, axis=0)
            ]
        curves.append(agg)
    aucs = [
        {
            "challenge": kind,
            "explainer": method,
            "metric": metric,
            "auc": float(np.mean(values)),
            "per_seed": [float(v) for v in values],
        }
        for (kind, method, metric), values in sorted(auc_acc.items())
    ]
    return curves, aucs


def run_threshold_sweep(cfg: ExperimentConfig) -> dict:
    """Recompute the overlap IoU across the configured threshold grid."""
    handle, dataset, out_dir, cache = _prepare(cfg)
    seed = cfg.seeds[0]
    indices = _sample_dataset(dataset, cfg.sample_count, seed)
    rows_by_method = {}
    for method in cfg.explainers:
        items, load_skipped = _build_items(dataset, indices, [method], seed)
        results, skipped, _ = _run_items(handle, cache, cfg, items, keep_maps=True)
        _check_skip_budget(load_skipped + skipped, len(indices))
        pairs = [
            (maps[1], maps[0], rec.correct)
            for rec, maps in results
            if maps is not None
        ]
        rows_by_method[method] = threshold_sweep(pairs, cfg.t_values)
    payload = {
        "config_hash": config_hash(cfg),
        "t_values": list(cfg.t_values),
        "methods": rows_by_method,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    return payload


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(records: list[MetricRecord], path: Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.source_id,
                    rec.method,
                    rec.challenge,
                    rec.level,
                    rec.seed,
                    _fmt(rec.correct),
                    _fmt(rec.iou),
                    _fmt(rec.snr),
                    _fmt(rec.nll),
                ]
            )


def _write_outputs(manifest: RunManifest, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(manifest.records, csv_path)
    summary_path = out_dir / "summary.json"
    summary_path.write_text(
        json.dumps(
            {
                "config_hash": manifest.config_hash,
                "weight_checksum": manifest.weight_checksum,
                "summary": manifest.summary,
                "accuracy": manifest.accuracy,
                "aucs": manifest.aucs,
                "n_records": len(manifest.records),
                "n_skipped": len(manifest.skipped),
            },
            indent=2,
            sort_keys=True,
        )
    )
    outputs = {"metrics_csv": str(csv_path), "summary_json": str(summary_path)}
    if manifest.curves:
        curves_path = out_dir / "curves.json"
        curves_path.write_text(json.dumps(manifest.curves, indent=2, sort_keys=True))
        outputs["curves_json"] = str(curves_path)
    manifest.outputs = outputs
    manifest_path = out_dir / "manifest.json"
    payload = {
        "config": manifest.config,
        "config_hash": manifest.config_hash,
        "weight_checksum": manifest.weight_checksum,
        "version": manifest.version,
        "backward_passes": manifest.backward_passes,
        "wall_clock_s": manifest.wall_clock_s,
        "n_records": len(manifest.records),
        "skipped": manifest.skipped,
        "outputs": outputs,
        "summary": manifest.summary,
        "accuracy": manifest.accuracy,
        "aucs": manifest.aucs,
    }
    manifest_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    manifest.outputs["manifest_json"] = str(manifest_path)
