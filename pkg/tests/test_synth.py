import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stcfusion.errors import ConfigError
from stcfusion.synth import CorpusSpec, generate_corpus, generate_video, load_labels, render


def small_spec(**kw):
    base = dict(train_videos=2, test_videos=2, frames_per_video=30, height=48, width=64,
                normal_count=(2, 3), triangle_size=(14, 18))
    base.update(kw)
    return CorpusSpec(**base)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_same_seed_byte_identical(tmp_path):
    generate_corpus(small_spec(), tmp_path / "a")
    generate_corpus(small_spec(), tmp_path / "b")
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    generate_corpus(small_spec(seed=0), tmp_path / "a")
    generate_corpus(small_spec(seed=1), tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "b")


def test_declared_anomaly_count(tmp_path):
    spec = small_spec(test_videos=1, frames_per_video=100, anomaly_fraction=0.2)
    manifest = generate_corpus(spec, tmp_path)
    labels = load_labels(tmp_path / "test_labels.jsonl")
    assert len(labels) == 100
    assert sum(labels.values()) == manifest["anomalous_frames_total"] == 20


def test_training_labels_all_zero(tmp_path):
    generate_corpus(small_spec(), tmp_path)
    assert set(load_labels(tmp_path / "train_labels.jsonl").values()) == {0}


def test_default_corpus_layout(tmp_path):
    manifest = generate_corpus(CorpusSpec(train_videos=1, test_videos=1), tmp_path)
    assert manifest["spec"]["height"] == 96 and manifest["spec"]["width"] == 128
    assert len(list((tmp_path / "test" / "test_00").glob("*.png"))) == 60
    first = json.loads((tmp_path / "test_detections.jsonl").read_text().splitlines()[0])
    assert all(b[4] == 1.0 for b in first["boxes"])
    assert manifest["splits"]["test"][0]["anomalous_frames"] == 15


def test_sprite_larger_than_frame_rejected(tmp_path):
    with pytest.raises(ConfigError):
        generate_corpus(CorpusSpec(height=20, width=20), tmp_path)


def test_lanes_too_narrow_rejected(tmp_path):
    with pytest.raises(ConfigError, match="lanes"):
        generate_corpus(CorpusSpec(normal_count=(2, 8)), tmp_path)


def test_unknown_spec_key():
    with pytest.raises(ConfigError):
        CorpusSpec.from_dict({"colour": "red"})


def centers(box):
    return (box[0] + box[2]) / 2, (box[1] + box[3]) / 2


def interior(box, spec):
    return box[0] > 0 and box[1] > 0 and box[2] < spec.width and box[3] < spec.height


@settings(max_examples=12, deadline=None, derandomize=True)
@given(st.integers(0, 10_000), st.sampled_from(["train", "test"]), st.integers(0, 3))
def test_sprite_invariants(seed, split, index):
    spec = small_spec(seed=seed)
    frames, boxes, labels, plan = generate_video(spec, split, index)
    if split == "train":
        assert not any(labels) and not plan
    normal = len(boxes[0])
    for t, frame in enumerate(frames):
        lit = frame != spec.background
        covered = np.zeros_like(lit)
        for b in boxes[t]:
            x1, y1, x2, y2 = b[:4]
            covered[math.floor(y1):math.ceil(y2), math.floor(x1):math.ceil(x2)] = True
        # every rendered pixel lies inside some ground-truth box
        assert not (lit & ~covered).any()
        # an anomalous frame carries one extra sprite
        assert len(boxes[t]) == normal + labels[t]
        # the anomalous sprite keeps at least one pixel in view for its whole span
        if labels[t]:
            x1, y1, x2, y2 = boxes[t][normal][:4]
            assert min(x2 - x1, y2 - y1) >= 1 + spec.box_margin - 1e-9
        # normal sprites never overlap
        for i in range(normal):
            for j in range(i + 1, normal):
                a, c = boxes[t][i], boxes[t][j]
                assert a[2] <= c[0] or c[2] <= a[0] or a[3] <= c[1] or c[3] <= a[1]
    lo, hi = spec.normal_speed
    fast_lo = hi + spec.fast_margin
    for t in range(1, len(frames)):
        for i in range(normal):
            (ax, ay), (bx, by) = centers(boxes[t - 1][i]), centers(boxes[t][i])
            assert lo - 1e-9 <= math.hypot(bx - ax, by - ay) <= hi + 1e-9
    for span in plan:
        if span["kind"] != "fast":
            continue
        for t in range(span["start"] + 1, span["end"]):
            prev, cur = boxes[t - 1][normal], boxes[t][normal]
            if interior(prev, spec) and interior(cur, spec):
                (ax, ay), (bx, by) = centers(prev), centers(cur)
                assert math.hypot(bx - ax, by - ay) >= fast_lo - 1e-9


def test_anomalies_enter_from_the_border():
    spec = CorpusSpec()
    for i in range(spec.test_videos):
        _, boxes, _, plan = generate_video(spec, "test", i)
        for span in plan:
            box = boxes[span["start"]][-1]
            assert box[0] == 0 or box[1] == 0 or box[2] == spec.width or box[3] == spec.height


def test_anomalies_stay_in_view_across_seeds():
    for seed in range(6):
        spec = CorpusSpec(seed=seed)
        for i in range(spec.test_videos):
            _, boxes, labels, _ = generate_video(spec, "test", i)
            for t, label in enumerate(labels):
                if label:
                    x1, y1, x2, y2 = boxes[t][-1][:4]
                    assert min(x2 - x1, y2 - y1) >= 2 - 1e-9, (seed, i, t)


def test_render_square_pixels():
    from stcfusion.synth import Sprite
    spec = CorpusSpec(height=10, width=10, background=0)
    img = render([Sprite("square", 4, 200, 5.0, 5.0, 0, 0)], spec)
    assert (img == 200).sum() == 16
    assert (img[3:7, 3:7] == 200).all()
