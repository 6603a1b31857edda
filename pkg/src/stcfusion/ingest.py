"""Frames + detections -> aligned appearance and motion frame groups."""

from __future__ import annotations

import json
import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import IngestionError
from .flow import FlowField

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SPATIAL, TEMPORAL = "spatial", "temporal"


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    confidence: float = 1.0
    video: str = ""
    frame: int = -1

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2, self.confidence]


@dataclass
class FrameGroup:
    """The n target slots of one frame for one stream.

    Only the distinct detected patches are stored; ``slots[i]`` says which of
    them fills target slot i, so padding copies are exact by construction.
    """

    video: str
    frame: int
    stream: str
    unique_patches: np.ndarray  # (k, ch, P, P) float32
    slots: np.ndarray           # (n,) int
    boxes: list[Detection]      # k detections, descending confidence
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.slots)

    @property
    def patches(self) -> np.ndarray:
        return self.unique_patches[self.slots]

    @property
    def slot_boxes(self) -> list[Detection]:
        return [self.boxes[i] for i in self.slots]


@dataclass(frozen=True)
class EmptyFrame:
    """Marker for a frame without detections: never trained on, scored 0."""

    video: str
    frame: int
    stream: str = SPATIAL


# ---------------------------------------------------------------------------
# frames

def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    scale = 255.0 if image.dtype == np.uint8 else (65535.0 if image.dtype == np.uint16 else 1.0)
    image = image.astype(np.float64) / scale
    if image.ndim == 3:
        if image.shape[2] == 4:
            image = image[..., :3]
        image = image @ LUMA
    return image.astype(np.float32)


def extract_frames(source) -> list[np.ndarray]:
    """Ordered grayscale frames in [0, 1] from an image directory or a video file."""
    source = Path(source)
    frames = []
    if source.is_dir():
        files = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        for p in files:
            try:
                with Image.open(p) as im:
                    if im.mode not in ("L", "RGB", "RGBA", "I;16"):
                        im = im.convert("RGB")
                    frames.append(to_gray(np.asarray(im)))
            except OSError as exc:
                raise IngestionError(f"{p}: unreadable frame ({exc})") from exc
        return frames
    if not source.exists():
        raise IngestionError(f"{source}: no such video source")
    cap = cv2.VideoCapture(str(source))
    if not cap.isOpened():
        raise IngestionError(f"{source}: cannot open video")
    try:
        while True:
            ok, bgr = cap.read()
            if not ok:
                break
            frames.append(to_gray(bgr[..., ::-1]))
    finally:
        cap.release()
    if not frames:
        raise IngestionError(f"{source}: no decodable frames")
    return frames


# ---------------------------------------------------------------------------
# detections

def clip_box(box, height: int, width: int):
    x1, y1, x2, y2 = box
    return (min(max(x1, 0.0), width), min(max(y1, 0.0), height),
            min(max(x2, 0.0), width), min(max(y2, 0.0), height))


def load_detections(path, threshold: float, frame_shape: tuple[int, int] | None = None,
                    ) -> dict[tuple[str, int], list[Detection]]:
    """Read a JSON-lines detections file, keeping boxes with confidence >= threshold.

    Returns ``{(video, frame): [Detection, ...]}`` sorted by descending
    confidence. With ``frame_shape`` boxes are clipped to the frame; boxes
    with no area left are dropped. Both cases warn.
    """
    out: dict[tuple[str, int], list[Detection]] = {}
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read detections ({exc})") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            video, frame = str(rec["video"]), int(rec["frame"])
            raw = [tuple(float(v) for v in b) for b in rec["boxes"]]
            if any(len(b) != 5 for b in raw):
                raise ValueError("each box needs [x1, y1, x2, y2, conf]")
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(f"{path}:{lineno}: malformed detection record ({exc})") from exc
        kept = out.setdefault((video, frame), [])
        for *box, conf in raw:
            if conf < threshold:
                continue
            if frame_shape is not None:
                clipped = clip_box(box, *frame_shape)
                if clipped != tuple(box):
                    warnings.warn(f"{video}:{frame}: box {box} clipped to frame bounds", stacklevel=2)
                box = clipped
            if not (box[0] < box[2] and box[1] < box[3]):
                warnings.warn(f"{video}:{frame}: degenerate box {box} skipped", stacklevel=2)
                continue
            try:
                kept.append(Detection(*box, confidence=conf, video=video, frame=frame))
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
    for dets in out.values():
        dets.sort(key=lambda d: -d.confidence)
    return out


# ---------------------------------------------------------------------------
# crops and groups

def _pixel_bounds(det: Detection, height: int, width: int):
    x1 = max(int(math.floor(det.x1)), 0)
    y1 = max(int(math.floor(det.y1)), 0)
    x2 = min(int(math.ceil(det.x2)), width)
    y2 = min(int(math.ceil(det.y2)), height)
    return x1, y1, x2, y2


def crop_patches(source, detections, size: int = 64) -> list[np.ndarray]:
    """Crop every box and resize it to size x size (bilinear, aspect not kept).

    ``source`` is a grayscale frame (-> (1, P, P) patches) or a FlowField
    (-> (2, P, P) patches, u and v resized independently). Boxes that cover
    no pixels are skipped with a warning.
    """
    if isinstance(source, FlowField):
        planes = [source.u, source.v]
    else:
        planes = [np.asarray(source, dtype=np.float32)]
    height, width = planes[0].shape
    out = []
    for det in detections:
        x1, y1, x2, y2 = _pixel_bounds(det, height, width)
        if x2 <= x1 or y2 <= y1:
            warnings.warn(f"box {det.box} covers no pixels; skipped", stacklevel=2)
            continue
        patch = [cv2.resize(np.ascontiguousarray(p[y1:y2, x1:x2]), (size, size),
                            interpolation=cv2.INTER_LINEAR) for p in planes]
        out.append(np.stack(patch).astype(np.float32))
    return out


def frame_seed(seed: int, video: str, frame: int) -> int:
    ss = np.random.SeedSequence([seed, zlib.crc32(video.encode()), frame])
    return int(ss.generate_state(1)[0])


def group_and_pad(patches, detections, n: int, seed: int, *, video: str = "",
                  frame: int = -1, stream: str = SPATIAL):
    """Fix the target count of one frame at ``n``.

    Detections must arrive in descending confidence. More than n keeps the
    top n; fewer than n pads by drawing existing patches uniformly with
    replacement from a generator seeded with ``seed``. Zero patches returns
    an EmptyFrame.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(patches) != len(detections):
        raise ValueError("patches and detections must align")
    if not patches:
        return EmptyFrame(video, frame, stream)
    k = min(len(patches), n)
    slots = np.arange(k)
    if k < n:
        rng = np.random.default_rng(seed)
        slots = np.concatenate([slots, rng.integers(0, k, size=n - k)])
    unique = np.stack(patches[:k]).astype(np.float32)
    return FrameGroup(video, frame, stream, unique, slots.astype(np.int64), list(detections[:k]), seed)


# ---------------------------------------------------------------------------
# patch cache

def _group_dir(root: Path, split: str, video: str, stream: str) -> Path:
    return Path(root) / "patches" / split / video / stream


def write_group(root, split: str, group) -> None:
    d = _group_dir(root, split, group.video, group.stream)
    d.mkdir(parents=True, exist_ok=True)
    stem = f"frame_{group.frame:06d}"
    if isinstance(group, EmptyFrame):
        meta = {"video": group.video, "frame": group.frame, "stream": group.stream, "empty": True}
    else:
        np.save(d / f"{stem}.npy", np.ascontiguousarray(group.unique_patches, dtype="<f4"))
        meta = {"video": group.video, "frame": group.frame, "stream": group.stream, "empty": False,
                "boxes": [b.as_list() for b in group.boxes],
                "slots": [int(s) for s in group.slots], "seed": group.seed}
    (d / f"{stem}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_group(json_path) -> FrameGroup | EmptyFrame:
    json_path = Path(json_path)
    meta = json.loads(json_path.read_text())
    if meta["empty"]:
        return EmptyFrame(meta["video"], meta["frame"], meta["stream"])
    patches = np.load(json_path.with_suffix(".npy"))
    boxes = [Detection(*b[:4], confidence=b[4], video=meta["video"], frame=meta["frame"])
             for b in meta["boxes"]]
    return FrameGroup(meta["video"], meta["frame"], meta["stream"], patches,
                      np.asarray(meta["slots"], dtype=np.int64), boxes, meta["seed"])


def iter_groups(root, split: str, stream: str):
    """All cached groups of one split/stream in (video, frame) order."""
    base = Path(root) / "patches" / split
    if not base.is_dir():
        return
    for vdir in sorted(p for p in base.iterdir() if p.is_dir()):
        sdir = vdir / stream
        for js in sorted(sdir.glob("frame_*.json")):
            yield read_group(js)


# ---------------------------------------------------------------------------
# preprocessing driver

@dataclass
class IngestParams:
    patch_size: int = 64
    threshold: float = 0.5
    n: int = 18
    seed: int = 0
    flow_backend: str = "horn-schunck"
    flow_dir: str | None = None
    flow_params: dict = field(default_factory=dict)


def list_videos(split_dir) -> list[Path]:
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise IngestionError(f"{split_dir}: split directory missing")
    return sorted(p for p in split_dir.iterdir()
                  if p.is_dir() or p.suffix.lower() in {".avi", ".mp4", ".mov", ".mkv"})


def video_flows(video: str, frames, params: IngestParams, cache_root) -> list[FlowField]:
    """Flow for t = 1..T-1 (entry k is flow(k, k+1)), cached as STCFLOW1."""
    from .flow import compute_flow, read_flow_file, write_flow_file

    if params.flow_backend == "precomputed":
        if not params.flow_dir:
            raise IngestionError("flow_backend 'precomputed' needs ingest.flow_dir")
        flows = read_flow_file(Path(params.flow_dir) / f"{video}.flow")
        if len(flows) != len(frames) - 1:
            raise IngestionError(f"{video}: precomputed flow has {len(flows)} entries, "
                                 f"expected {len(frames) - 1}")
        return flows
    flows = [compute_flow(frames[t - 1], frames[t], params.flow_backend, **params.flow_params)
             for t in range(1, len(frames))]
    write_flow_file(Path(cache_root) / "flow" / f"{video}.flow", flows)
    return flows


def preprocess_video(source, video: str, split: str, detections, params: IngestParams,
                     cache_root) -> dict:
    """Write spatial and temporal groups for frames 1..T-1 of one video.

    Frame 0 has no flow and is dropped from both streams.
    """
    frames = extract_frames(source)
    flows = video_flows(video, frames, params, cache_root)
    height, width = frames[0].shape
    stats = {"frames": len(frames), "groups": 0, "empty": 0}
    for t in range(1, len(frames)):
        dets = clip_detections(detections.get((video, t), []), height, width)
        seed = frame_seed(params.seed, video, t)
        for stream, src in ((SPATIAL, frames[t]), (TEMPORAL, flows[t - 1])):
            patches = crop_patches(src, dets, params.patch_size)
            group = group_and_pad(patches, dets, params.n, seed, video=video, frame=t, stream=stream)
            write_group(cache_root, split, group)
        if dets:
            stats["groups"] += 1
        else:
            stats["empty"] += 1
    return stats


def clip_detections(dets, height: int, width: int) -> list[Detection]:
    """Clip boxes to the frame, warning on each change; drop boxes left without pixels."""
    out = []
    for d in dets:
        box = clip_box(d.box, height, width)
        if box != d.box:
            warnings.warn(f"{d.video}:{d.frame}: box {d.box} clipped to frame bounds", stacklevel=2)
            if not (box[0] < box[2] and box[1] < box[3]):
                warnings.warn(f"{d.video}:{d.frame}: box {d.box} lies outside the frame; skipped",
                              stacklevel=2)
                continue
            d = Detection(*box, confidence=d.confidence, video=d.video, frame=d.frame)
        x1, y1, x2, y2 = _pixel_bounds(d, height, width)
        if x2 > x1 and y2 > y1:
            out.append(d)
    return out


def flow_statistics(cache_root, split: str = "train") -> dict:
    """Per-channel mean/std of motion patches, used to standardize the motion stream."""
    total = np.zeros(2)
    total_sq = np.zeros(2)
    count = 0
    for g in iter_groups(cache_root, split, TEMPORAL):
        if isinstance(g, EmptyFrame):
            continue
        p = g.patches.astype(np.float64)
        total += p.sum(axis=(0, 2, 3))
        total_sq += (p ** 2).sum(axis=(0, 2, 3))
        count += p.shape[0] * p.shape[2] * p.shape[3]
    if count == 0:
        raise IngestionError(f"no motion patches in split {split!r} to compute flow statistics")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    std = np.where(std > 0, std, 1.0)
    return {"mean": mean.tolist(), "std": std.tolist()}
