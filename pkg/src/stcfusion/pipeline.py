"""Stage drivers behind the CLI: synth, preprocess, train, score, eval, plot."""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .errors import MissingPrerequisiteError
from .ingest import (SPATIAL, TEMPORAL, EmptyFrame, IngestParams, flow_statistics, iter_groups,
                     list_videos, load_detections, preprocess_video)
from .model import StreamModel
from .plotting import emit_report, plot_ablation, plot_series
from .scoring import ScoreSeries, TargetErrors, build_series, compute_auc, per_target_errors
from .synth import CorpusSpec, generate_corpus, load_labels
from .training import TrainConfig, standardize, train_stream

log = logging.getLogger(__name__)

STREAMS = (SPATIAL, TEMPORAL)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingPrerequisiteError(f"{path} not found; run `stcfusion {stage}` first")
    return path


def checkpoint_path(cfg: RunConfig, stream: str, memory: bool = True) -> Path:
    return cfg.path("checkpoints") / f"{stream}{'' if memory else '_nomem'}.ckpt"


# ---------------------------------------------------------------------------

def run_synth(cfg: RunConfig) -> dict:
    spec = CorpusSpec.from_dict({"seed": cfg.seed, **cfg.corpus})
    root = cfg.path("data_root")
    for split in ("train", "test"):
        if (root / split).exists():
            shutil.rmtree(root / split)
    return generate_corpus(spec, root, config=cfg.to_dict())


def run_preprocess(cfg: RunConfig) -> dict:
    root, cache = cfg.path("data_root"), cfg.path("cache_root")
    manifest = {"config": cfg.to_dict(), "splits": {}}
    for split in ("train", "test"):
        det_file = _require(root / f"{split}_detections.jsonl", "synth")
        params = IngestParams(
            patch_size=cfg.ingest.patch_size,
            threshold=cfg.ingest.train_threshold if split == "train" else cfg.ingest.test_threshold,
            n=cfg.ingest.train_n if split == "train" else cfg.ingest.test_n,
            seed=cfg.seed,
            flow_backend=cfg.ingest.flow_backend,
            flow_dir=cfg.ingest.flow_dir or None,
            flow_params=cfg.ingest.flow_params(),
        )
        detections = load_detections(det_file, params.threshold)
        shutil.rmtree(cache / "patches" / split, ignore_errors=True)
        videos = {}
        for source in list_videos(_require(root / split, "synth")):
            video = source.stem if source.is_file() else source.name
            t0 = time.perf_counter()
            videos[video] = preprocess_video(source, video, split, detections, params, cache)
            log.info("preprocessed %s/%s in %.1fs", split, video, time.perf_counter() - t0)
        manifest["splits"][split] = videos
    stats = flow_statistics(cache, "train")
    (cache / "flow_stats.json").write_text(_dump(stats))
    manifest["flow_stats"] = stats
    (cache / "preprocess_manifest.json").write_text(_dump(manifest))
    return manifest


def _flow_stats(cfg: RunConfig) -> dict:
    return json.loads(_require(cfg.path("cache_root") / "flow_stats.json", "preprocess").read_text())


def _groups(cfg: RunConfig, split: str, stream: str) -> list:
    _require(cfg.path("cache_root") / "preprocess_manifest.json", "preprocess")
    return list(iter_groups(cfg.path("cache_root"), split, stream))


def build_model(cfg: RunConfig, stream: str, memory: bool = True) -> StreamModel:
    m = cfg.model
    return StreamModel(1 if stream == SPATIAL else 2, m.latent_dim, m.memory_size, m.threshold(),
                       m.renormalize, m.channels, cfg.ingest.patch_size, use_memory=memory,
                       seed=cfg.seed)


def run_train(cfg: RunConfig, stream: str, memory: bool = True) -> Path:
    if stream not in STREAMS:
        raise ValueError(f"unknown stream {stream!r}")
    stats = _flow_stats(cfg)
    groups = [standardize(g, stats) for g in _groups(cfg, "train", stream)
              if not isinstance(g, EmptyFrame)]
    if not groups:
        raise MissingPrerequisiteError("no cached training groups; run `stcfusion preprocess` first")
    t = getattr(cfg.train, stream)
    tc = TrainConfig(stream=stream, learning_rate=t.learning_rate, batch_size=t.batch_size,
                     epochs=t.epochs, lambda_recon=t.lambda_recon, lambda_ent=t.lambda_ent,
                     n=cfg.ingest.train_n, seed=cfg.seed, batching=t.batching,
                     plateau_patience=t.plateau_patience, plateau_tol=t.plateau_tol)
    model = build_model(cfg, stream, memory)
    path = checkpoint_path(cfg, stream, memory)
    path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ckpt = train_stream(tc, groups, model, metrics_path=path.with_suffix(".metrics.jsonl"))
    log.info("trained %s (memory=%s) in %.1fs", stream, memory, time.perf_counter() - t0)
    ckpt.meta.update({"flow_stats": stats, "config": cfg.to_dict()})
    save_checkpoint(ckpt, path)
    return path


# ---------------------------------------------------------------------------

def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def stream_errors(cfg: RunConfig, stream: str, memory: bool = True) -> TargetErrors:
    """Raw test-set errors of one stream, cached next to the reports with the checkpoint digest."""
    ckpt_file = _require(checkpoint_path(cfg, stream, memory), f"train --stream {stream}"
                         + ("" if memory else " --no-memory"))
    reports = cfg.path("reports")
    stem = f"errors_{stream}{'' if memory else '_nomem'}"
    csv_path, key_path = reports / f"{stem}.csv", reports / f"{stem}.json"
    digest = _digest(ckpt_file)
    cache_digest = _digest(cfg.path("cache_root") / "preprocess_manifest.json")
    key = {"checkpoint_sha256": digest, "cache_sha256": cache_digest,
           "batch_size": cfg.eval.batch_size}
    if csv_path.exists() and key_path.exists() and json.loads(key_path.read_text()) == key:
        return TargetErrors.from_csv(csv_path)
    ckpt = load_checkpoint(ckpt_file, stream=stream)
    errs = per_target_errors(ckpt.model, _groups(cfg, "test", stream), stream,
                             ckpt.meta.get("flow_stats"), cfg.eval.batch_size)
    reports.mkdir(parents=True, exist_ok=True)
    errs.to_csv(csv_path)
    key_path.write_text(_dump(key))
    return errs


def _frame_index(cfg: RunConfig):
    return [(g.video, g.frame) for g in _groups(cfg, "test", SPATIAL)]


def _labels(cfg: RunConfig):
    return load_labels(_require(cfg.path("data_root") / "test_labels.jsonl", "synth"))


def run_score(cfg: RunConfig) -> ScoreSeries:
    app = stream_errors(cfg, SPATIAL)
    mot = stream_errors(cfg, TEMPORAL)
    series = build_series(_frame_index(cfg), _labels(cfg), app, mot,
                          cfg.eval.normalization, cfg.eval.window)
    reports = cfg.path("reports")
    (reports / "scores.csv").write_text(series.to_csv())
    (reports / "score_manifest.json").write_text(_dump({"config": cfg.to_dict(), "frames": len(series)}))
    return series


def ablation_rows(cfg: RunConfig) -> list[dict]:
    index, labels = _frame_index(cfg), _labels(cfg)
    rows = []
    for memory in (False, True):
        app = stream_errors(cfg, SPATIAL, memory)
        mot = stream_errors(cfg, TEMPORAL, memory)
        for network, a, m in (("spatial", app, None), ("temporal", None, mot), ("dual", app, mot)):
            s = build_series(index, labels, a, m, cfg.eval.normalization, cfg.eval.window)
            rows.append({"network": network, "memory": memory, "auc": compute_auc(s.smoothed, s.label)})
    return rows


def run_eval(cfg: RunConfig, ablation: bool = False) -> dict:
    reports = cfg.path("reports")
    series = ScoreSeries.from_csv(_require(reports / "scores.csv", "score"))
    auc = compute_auc(series.smoothed, series.label)
    extra = {"auc_unsmoothed": compute_auc(series.fused, series.label)}
    if ablation:
        rows = ablation_rows(cfg)
        lines = ["network,context_memory,auc"] + [
            f"{r['network']},{int(r['memory'])},{r['auc']:.6f}" for r in rows]
        (reports / "ablation.csv").write_text("\n".join(lines) + "\n")
        plot_ablation(rows, reports / "ablation.png")
        extra["ablation"] = rows
    report = emit_report(series, auc, reports, config=cfg.to_dict(), extra=extra)
    return report


def run_plot(cfg: RunConfig) -> list[Path]:
    reports = cfg.path("reports")
    series = ScoreSeries.from_csv(_require(reports / "scores.csv", "score"))
    return plot_series(series, reports / "curves")


def format_ablation(rows) -> str:
    out = [f"{'Method':<18}{'Context memory':<16}{'AUC (%)':>8}"]
    for r in rows:
        out.append(f"{r['network'].capitalize() + ' network':<18}{'yes' if r['memory'] else '':<16}"
                   f"{100 * r['auc']:>8.1f}")
    return "\n".join(out)
