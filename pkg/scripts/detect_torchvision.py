#!/usr/bin/env python3
"""Write a detections JSON-lines file for real footage with a pretrained detector.

Out-of-tree helper; needs torchvision (not a package dependency) and its
COCO-pretrained Faster R-CNN ResNet50-FPN weights, downloaded on first use.

    python scripts/detect_torchvision.py data/ucsd_ped2/test test_detections.jsonl

Each subdirectory (or video file) of the split directory is one video; frame
indices follow the sorted frame order used by ``stcfusion preprocess``. Boxes
of every class are kept with their score so the train/test thresholds can be
applied later by the loader.
"""

import argparse
import json
import sys

import numpy as np
import torch
import torchvision

from stcfusion.ingest import extract_frames, list_videos


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("split_dir")
    ap.add_argument("output")
    ap.add_argument("--min-score", type=float, default=0.3, help="drop boxes below this score")
    ap.add_argument("--device", default="cpu")
    args = ap.parse_args(argv)

    weights = torchvision.models.detection.FasterRCNN_ResNet50_FPN_Weights.DEFAULT
    model = torchvision.models.detection.fasterrcnn_resnet50_fpn(weights=weights).to(args.device).eval()
    with open(args.output, "w") as out, torch.no_grad():
        for source in list_videos(args.split_dir):
            video = source.stem if source.is_file() else source.name
            for t, frame in enumerate(extract_frames(source)):
                rgb = torch.from_numpy(np.repeat(frame[None], 3, axis=0)).to(args.device)
                det = model([rgb])[0]
                keep = det["scores"] >= args.min_score
                boxes = [[*map(float, b), float(s)]
                         for b, s in zip(det["boxes"][keep].cpu(), det["scores"][keep].cpu())]
                out.write(json.dumps({"video": video, "frame": t, "boxes": boxes}) + "\n")
            print(f"{video}: done", file=sys.stderr)


if __name__ == "__main__":
    main()
