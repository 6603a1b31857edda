"""Deterministic moving-sprite videos with ground-truth boxes and frame labels.

Normal videos hold a few small, slow squares, each bouncing inside its own
horizontal lane so normal sprites never overlap. Test videos additionally contain contiguous anomalous spans, each with one extra
sprite that is either a fast square (motion anomaly) or a large triangle
(appearance anomaly).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError

ANOMALY_KINDS = ("fast", "triangle")


@dataclass
class CorpusSpec:
    height: int = 96
    width: int = 128
    train_videos: int = 8
    test_videos: int = 4
    frames_per_video: int = 60
    normal_count: tuple[int, int] = (2, 4)
    normal_size: tuple[int, int] = (6, 10)
    normal_speed: tuple[float, float] = (0.5, 1.5)
    intensity: tuple[int, int] = (150, 255)
    background: int = 20
    fast_margin: float = 3.5
    fast_speed_span: float = 2.0
    triangle_size: tuple[int, int] = (22, 30)
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    anomaly_fraction: float = 0.25
    span_length: tuple[int, int] = (10, 20)
    box_margin: float = 1.0
    seed: int = 0

    def validate(self):
        largest = max(self.normal_size[1], self.triangle_size[1]) + 2 * self.box_margin
        if largest >= min(self.height, self.width):
            raise ConfigError(f"sprite of size {largest} does not fit a {self.height}x{self.width} frame")
        if min(self.height, self.width) - largest < self.fast_speed[1]:
            raise ConfigError("frame leaves no room for a fast sprite to reflect off the walls")
        if self.box_margin < 0.5:
            raise ConfigError("box_margin must be >= 0.5 so boxes contain every rendered pixel")
        if not 0 <= self.anomaly_fraction < 1:
            raise ConfigError("anomaly_fraction must lie in [0, 1)")
        if self.frames_per_video < 2:
            raise ConfigError("frames_per_video must be >= 2")
        for k in self.anomaly_kinds:
            if k not in ANOMALY_KINDS:
                raise ConfigError(f"unknown anomaly kind {k!r}")
        lo, hi = self.span_length
        if not 1 <= lo <= hi:
            raise ConfigError("span_length must satisfy 1 <= min <= max")
        if not 1 <= self.normal_count[0] <= self.normal_count[1]:
            raise ConfigError("normal_count must satisfy 1 <= min <= max")
        need = self.normal_size[1] + 2 * self.box_margin + self.normal_speed[1]
        if self.lane_height < need:
            raise ConfigError(f"{self.normal_count[1]} lanes of height {self.lane_height:.1f} "
                              f"cannot hold sprites needing {need:.1f}")

    @property
    def lane_height(self) -> float:
        return self.height / self.normal_count[1]

    @property
    def fast_speed(self) -> tuple[float, float]:
        lo = self.normal_speed[1] + self.fast_margin
        return (lo, lo + self.fast_speed_span)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        names = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown corpus keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class Sprite:
    kind: str  # "square" | "triangle"
    size: float
    intensity: int
    cx: float
    cy: float
    vx: float
    vy: float
    anomalous: bool = False
    lane: tuple[float, float] | None = None  # vertical extent the sprite bounces in

    def box(self, margin: float, height: int, width: int) -> list[float]:
        h = self.size / 2
        return [max(self.cx - h - margin, 0.0), max(self.cy - h - margin, 0.0),
                min(self.cx + h + margin, float(width)), min(self.cy + h + margin, float(height))]

    def step(self, spec: CorpusSpec):
        lo = self.size / 2 + spec.box_margin
        top, bottom = self.lane or (0.0, float(spec.height))
        self.cx, self.vx = _advance(self.cx, self.vx, lo, spec.width - lo)
        self.cy, self.vy = _advance(self.cy, self.vy, top + lo, bottom - lo)


def _advance(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    """One step along an axis, reflecting off [lo, hi] once the sprite is inside it.

    A sprite still sliding in through a border moves freely along that axis.
    """
    nxt = pos + vel
    if lo <= pos <= hi and not lo <= nxt <= hi:
        vel = -vel
        nxt = pos + vel
    return nxt, vel


def _spawn_normal(rng, spec: CorpusSpec, lane: int, size: float, speed: float) -> Sprite:
    lo = size / 2 + spec.box_margin
    top, bottom = lane * spec.lane_height, (lane + 1) * spec.lane_height
    # Start where the first step cannot leave the lane, so no reflection is needed.
    cx = rng.uniform(lo + speed, spec.width - lo - speed)
    cy = rng.uniform(top + lo, bottom - lo)
    angle = rng.uniform(0, 2 * math.pi)
    vx, vy = speed * math.cos(angle), speed * math.sin(angle)
    if not top + lo <= cy + vy <= bottom - lo:
        vy = -vy
    intensity = int(rng.integers(spec.intensity[0], spec.intensity[1] + 1))
    return Sprite("square", size, intensity, cx, cy, vx, vy, lane=(top, bottom))


def _spawn_entering(rng, spec: CorpusSpec, kind: str, size: float, speed: float) -> Sprite:
    """A sprite that slides in through a random border, first visible on this frame.

    Entering through the border keeps the optical flow of its first frame
    physically plausible; a sprite popping up mid-frame would not be.
    """
    h = size / 2
    side = int(rng.integers(4))
    angle = rng.uniform(-math.pi / 4, math.pi / 4)
    inward = max(speed * math.cos(angle), 0.5)
    depth = rng.uniform(1.0, max(1.0, inward))  # pixels visible on the first frame
    along_x = rng.uniform(h + spec.box_margin, spec.width - h - spec.box_margin)
    along_y = rng.uniform(h + spec.box_margin, spec.height - h - spec.box_margin)
    ca, sa = speed * math.cos(angle), speed * math.sin(angle)
    if side == 0:    # left border, moving right
        cx, cy, vx, vy = -h + depth, along_y, ca, sa
    elif side == 1:  # right border, moving left
        cx, cy, vx, vy = spec.width + h - depth, along_y, -ca, sa
    elif side == 2:  # top border, moving down
        cx, cy, vx, vy = along_x, -h + depth, sa, ca
    else:            # bottom border, moving up
        cx, cy, vx, vy = along_x, spec.height + h - depth, sa, -ca
    intensity = int(rng.integers(spec.intensity[0], spec.intensity[1] + 1))
    return Sprite(kind, size, intensity, cx, cy, vx, vy, anomalous=True)


def render(sprites, spec: CorpusSpec) -> np.ndarray:
    """8-bit frame; a pixel is lit when its centre falls inside a sprite."""
    canvas = np.full((spec.height, spec.width), spec.background, dtype=np.uint8)
    ys, xs = np.mgrid[0:spec.height, 0:spec.width] + 0.5
    for s in sprites:
        h = s.size / 2
        x0, x1, y0, y1 = s.cx - h, s.cx + h, s.cy - h, s.cy + h
        if s.kind == "square":
            mask = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        else:
            # apex at top centre, base along the bottom edge
            rel_y = (ys - y0) / s.size
            half_w = rel_y * h
            mask = (ys >= y0) & (ys < y1) & (np.abs(xs - s.cx) <= half_w)
        canvas[mask] = s.intensity
    return canvas


def _plan_spans(rng, spec: CorpusSpec) -> list[tuple[int, int]]:
    """Non-overlapping [start, end) spans inside frames 1..T-1 summing to the anomaly count."""
    total = round(spec.anomaly_fraction * spec.frames_per_video)
    if total == 0:
        return []
    usable = spec.frames_per_video - 1
    n_spans = math.ceil(total / spec.span_length[1])
    if total + n_spans - 1 > usable:
        raise ConfigError("anomaly spans do not fit in the video")
    base, extra = divmod(total, n_spans)
    lengths = [base + (1 if i < extra else 0) for i in range(n_spans)]
    free = usable - total - (n_spans - 1)
    cuts = np.sort(rng.integers(0, free + 1, size=n_spans))
    spans = []
    pos = 1
    prev_cut = 0
    for length, cut in zip(lengths, cuts):
        pos += int(cut - prev_cut)
        prev_cut = cut
        spans.append((pos, pos + length))
        pos += length + 1
    return spans


def _video_rng(spec: CorpusSpec, split: str, index: int):
    return np.random.default_rng(np.random.SeedSequence([spec.seed, 0 if split == "train" else 1, index]))


def generate_video(spec: CorpusSpec, split: str, index: int):
    """Frames (uint8), per-frame box lists and labels, plus the span plan."""
    rng = _video_rng(spec, split, index)
    count = int(rng.integers(spec.normal_count[0], spec.normal_count[1] + 1))
    lanes = rng.permutation(spec.normal_count[1])[:count]
    sprites = []
    for lane in sorted(int(k) for k in lanes):
        size = float(rng.integers(spec.normal_size[0], spec.normal_size[1] + 1))
        speed = rng.uniform(*spec.normal_speed)
        sprites.append(_spawn_normal(rng, spec, lane, size, speed))

    spans = _plan_spans(rng, spec) if split == "test" else []
    kinds = [spec.anomaly_kinds[(index + j) % len(spec.anomaly_kinds)] for j in range(len(spans))]
    frames, boxes, labels = [], [], []
    active: Sprite | None = None
    for t in range(spec.frames_per_video):
        for j, (start, end) in enumerate(spans):
            if t == start:
                if kinds[j] == "fast":
                    size = float(rng.integers(spec.normal_size[0], spec.normal_size[1] + 1))
                    active = _spawn_entering(rng, spec, "square", size, rng.uniform(*spec.fast_speed))
                else:
                    size = float(rng.integers(spec.triangle_size[0], spec.triangle_size[1] + 1))
                    active = _spawn_entering(rng, spec, "triangle", size, rng.uniform(*spec.normal_speed))
            if t == end:
                active = None
        current = sprites + ([active] if active is not None else [])
        frames.append(render(current, spec))
        boxes.append([s.box(spec.box_margin, spec.height, spec.width) + [1.0] for s in current])
        labels.append(int(active is not None))
        for s in current:
            s.step(spec)
    plan = [{"start": s, "end": e, "kind": k} for (s, e), k in zip(spans, kinds)]
    return frames, boxes, labels, plan


def generate_corpus(spec: CorpusSpec, root, config: dict | None = None) -> dict:
    """Write frames, detections, labels and a manifest under ``root``."""
    spec.validate()
    root = Path(root)
    manifest = {"spec": asdict(spec), "seed": spec.seed, "splits": {}, "config": config}
    for split, n_videos in (("train", spec.train_videos), ("test", spec.test_videos)):
        det_lines, label_lines, listing = [], [], []
        for i in range(n_videos):
            video = f"{split}_{i:02d}"
            frames, boxes, labels, plan = generate_video(spec, split, i)
            vdir = root / split / video
            vdir.mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(frames):
                Image.fromarray(frame, mode="L").save(vdir / f"frame_{t:06d}.png")
                det_lines.append(json.dumps({"video": video, "frame": t,
                                             "boxes": [[round(v, 6) for v in b] for b in boxes[t]]}))
                label_lines.append(json.dumps({"video": video, "frame": t, "label": labels[t]}))
            listing.append({"video": video, "frames": len(frames),
                            "anomalous_frames": int(sum(labels)), "spans": plan})
        (root / f"{split}_detections.jsonl").write_text("\n".join(det_lines) + "\n")
        (root / f"{split}_labels.jsonl").write_text("\n".join(label_lines) + "\n")
        manifest["splits"][split] = listing
    manifest["anomalous_frames_total"] = sum(v["anomalous_frames"] for v in manifest["splits"]["test"])
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_labels(path) -> dict[tuple[str, int], int]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            out[(str(rec["video"]), int(rec["frame"]))] = int(rec["label"])
    return out
