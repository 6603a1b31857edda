"""Per-target reconstruction errors -> frame scores -> ROC AUC."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import DegenerateStreamError
from .ingest import EmptyFrame
from .model import StreamModel, forward_batch
from .training import collate, standardize


@dataclass
class TargetErrors:
    """Raw reconstruction error of every (frame, target slot) for one stream."""

    stream: str
    video: np.ndarray   # (M,) str
    frame: np.ndarray   # (M,) int
    target: np.ndarray  # (M,) int
    error: np.ndarray   # (M,) float64

    def __len__(self):
        return len(self.error)

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video", "frame", "target", "stream", "error"])
        for v, f, t, e in zip(self.video, self.frame, self.target, self.error):
            w.writerow([v, int(f), int(t), self.stream, repr(float(e))])
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, path) -> "TargetErrors":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        stream = rows[0]["stream"] if rows else ""
        return cls(stream,
                   np.array([r["video"] for r in rows], dtype=object),
                   np.array([int(r["frame"]) for r in rows], dtype=np.int64),
                   np.array([int(r["target"]) for r in rows], dtype=np.int64),
                   np.array([float(r["error"]) for r in rows], dtype=np.float64))


@torch.no_grad()
def per_target_errors(model: StreamModel, groups, stream: str, flow_stats=None,
                      batch_size: int = 256) -> TargetErrors:
    """Reconstruction error of every target slot; the memory is only read.

    ``batch_size`` bounds the number of distinct patches per forward pass and
    does not change the result.
    """
    expected_channels = 1 if stream == "spatial" else 2
    if model.input_channels != expected_channels:
        raise ValueError(f"model has {model.input_channels} input channels; {stream} needs {expected_channels}")
    model.eval()
    groups = [standardize(g, flow_stats) for g in groups if not isinstance(g, EmptyFrame)]
    for g in groups:
        if g.stream != stream:
            raise ValueError(f"group {g.video}:{g.frame} belongs to the {g.stream} stream, not {stream}")
    videos, frames, targets, errors = [], [], [], []
    batch, size = [], 0
    # Frames are the unit of batching: addressing uses the whole frame context.
    for i, g in enumerate(groups):
        batch.append(g)
        size += len(g.unique_patches)
        if size >= batch_size or i == len(groups) - 1:
            patches, mix = collate(batch)
            out = forward_batch(model, patches, mix)
            err = out.patch_errors.double().numpy()
            offset = 0
            for bg in batch:
                k = len(bg.unique_patches)
                per_slot = err[offset:offset + k][bg.slots]
                offset += k
                videos.extend([bg.video] * bg.n)
                frames.extend([bg.frame] * bg.n)
                targets.extend(range(bg.n))
                errors.extend(per_slot.tolist())
            batch, size = [], 0
    return TargetErrors(stream, np.array(videos, dtype=object), np.array(frames, dtype=np.int64),
                        np.array(targets, dtype=np.int64), np.array(errors, dtype=np.float64))


def normalize_errors(errors, mode: str = "literal") -> np.ndarray:
    """Scale raw errors over the whole test set.

    ``literal``: (L - min) / max. ``minmax``: (L - min) / (max - min).
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors to normalize")
    lo, hi = e.min(), e.max()
    if hi == 0:
        raise DegenerateStreamError("every reconstruction error is zero; normalization undefined")
    if mode == "literal":
        return (e - lo) / hi
    if mode == "minmax":
        span = hi - lo
        return np.zeros_like(e) if span == 0 else (e - lo) / span
    raise ValueError(f"unknown normalization {mode!r}")


def fuse_scores(appearance, motion):
    return np.maximum(appearance, motion)


def frame_score(target_scores) -> float:
    s = np.asarray(target_scores, dtype=np.float64)
    return float(s.max()) if s.size else 0.0


def smooth_scores(scores, videos=None, window: int = 10) -> np.ndarray:
    """Centered moving average over frames t - w//2 .. t + w - w//2 - 1.

    The window is truncated at the ends of each video and never crosses
    from one video into the next.
    """
    s = np.asarray(scores, dtype=np.float64)
    if videos is None:
        videos = np.zeros(len(s), dtype=np.int64)
    videos = np.asarray(videos)
    out = np.empty_like(s)
    back, fwd = window // 2, window - window // 2 - 1
    start = 0
    while start < len(s):
        end = start
        while end < len(s) and videos[end] == videos[start]:
            end += 1
        seg = s[start:end]
        csum = np.concatenate([[0.0], np.cumsum(seg)])
        idx = np.arange(len(seg))
        lo = np.maximum(idx - back, 0)
        hi = np.minimum(idx + fwd + 1, len(seg))
        out[start:end] = (csum[hi] - csum[lo]) / (hi - lo)
        start = end
    return out


class UndefinedAUCError(ValueError):
    pass


def compute_auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties credited 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative frame")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class ScoreSeries:
    video: np.ndarray
    frame: np.ndarray
    appearance: np.ndarray
    motion: np.ndarray
    fused: np.ndarray
    smoothed: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.frame)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["video", "frame", "appearance", "motion", "fused", "smoothed", "label"])
        for row in zip(self.video, self.frame, self.appearance, self.motion,
                       self.fused, self.smoothed, self.label):
            v, f, a, m, fu, sm, lab = row
            w.writerow([v, int(f), f"{a:.10f}", f"{m:.10f}", f"{fu:.10f}", f"{sm:.10f}", int(lab)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "ScoreSeries":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        col = lambda k, t: np.array([t(r[k]) for r in rows])  # noqa: E731
        return cls(col("video", str).astype(object), col("frame", int), col("appearance", float),
                   col("motion", float), col("fused", float), col("smoothed", float), col("label", int))

    def videos(self) -> list[str]:
        return list(dict.fromkeys(self.video.tolist()))


def _frame_max(errs: TargetErrors, normalized, index):
    out = np.zeros(len(index))
    pos = {key: i for i, key in enumerate(index)}
    for v, f, x in zip(errs.video, errs.frame, normalized):
        i = pos[(v, int(f))]
        if x > out[i]:
            out[i] = x
    return out


def build_series(frame_index, labels, appearance: TargetErrors | None = None,
                 motion: TargetErrors | None = None, normalization: str = "literal",
                 window: int = 10) -> ScoreSeries:
    """Assemble the scored frame series.

    ``frame_index`` lists every scored (video, frame) in order, including
    frames without targets (which score 0). A missing stream contributes 0,
    so passing only one stream gives that single network's scores.
    """
    index = [(str(v), int(f)) for v, f in frame_index]
    app = np.zeros(len(index))
    mot = np.zeros(len(index))
    if appearance is not None and len(appearance):
        app = _frame_max(appearance, normalize_errors(appearance.error, normalization), index)
    if motion is not None and len(motion):
        mot = _frame_max(motion, normalize_errors(motion.error, normalization), index)
    # max over targets of max(app, mot) == max(max over targets app, max over targets mot)
    fused = fuse_scores(app, mot)
    video = np.array([v for v, _ in index], dtype=object)
    smoothed = smooth_scores(fused, video, window)
    label = np.array([labels[k] for k in index], dtype=np.int64)
    return ScoreSeries(video, np.array([f for _, f in index], dtype=np.int64),
                       app, mot, fused, smoothed, label)


def per_video_auc(series: ScoreSeries, column: str = "smoothed") -> dict[str, float | None]:
    out = {}
    values = getattr(series, column)
    for v in series.videos():
        m = series.video == v
        try:
            out[v] = compute_auc(values[m], series.label[m])
        except UndefinedAUCError:
            out[v] = None
    return out
