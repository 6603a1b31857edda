"""Mini-batch training of one stream on normal-only frame groups."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import NumericFailure
from .ingest import EmptyFrame, FrameGroup
from .model import StreamModel, forward_batch, mixing_matrix

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stream: str
    learning_rate: float
    batch_size: int = 64
    epochs: int = 60
    lambda_recon: float = 1.0
    lambda_ent: float = 0.0002
    n: int = 18
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    batching: str = "frame"
    plateau_patience: int = 10
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def frames_per_batch(self) -> int:
        if self.batching == "target":
            return max(1, self.batch_size // self.n)
        return self.batch_size


def standardize(group: FrameGroup, flow_stats: dict | None) -> FrameGroup:
    """Apply the per-channel motion standardization fitted on the training split."""
    if flow_stats is None or group.stream != "temporal":
        return group
    mean = np.asarray(flow_stats["mean"], dtype=np.float32)[None, :, None, None]
    std = np.asarray(flow_stats["std"], dtype=np.float32)[None, :, None, None]
    return FrameGroup(group.video, group.frame, group.stream, (group.unique_patches - mean) / std,
                      group.slots, group.boxes, group.seed)


def collate(groups) -> tuple[torch.Tensor, torch.Tensor]:
    patches = torch.from_numpy(np.concatenate([g.unique_patches for g in groups]))
    mix = mixing_matrix([g.slots for g in groups], [len(g.unique_patches) for g in groups])
    return patches, mix


def _plateaued(epoch_totals, patience, tol) -> bool:
    if len(epoch_totals) <= patience:
        return False
    before = min(epoch_totals[:-patience])
    recent = min(epoch_totals[-patience:])
    return (before - recent) / max(abs(before), 1e-12) < tol


def train_stream(config: TrainConfig, groups, model: StreamModel,
                 metrics_path=None) -> Checkpoint:
    """Fit ``model`` on the non-empty groups; returns a Checkpoint with the loss history.

    The per-frame loss is lambda_recon * (mean target error) + lambda_ent *
    (entropy of the frame's shrunk addressing weights); a batch loss is the
    mean over its frames.
    """
    groups = [g for g in groups if not isinstance(g, EmptyFrame)]
    if not groups:
        raise ValueError("no non-empty training frames")
    if any(g.stream != config.stream for g in groups):
        raise ValueError(f"dataset contains groups of a stream other than {config.stream!r}")

    torch.use_deterministic_algorithms(True)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas)
    per_batch = config.frames_per_batch()
    history: list[dict] = []
    epoch_totals: list[float] = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = torch.randperm(len(groups), generator=gen).tolist()
            sums = np.zeros(3)
            for b, start in enumerate(range(0, len(order), per_batch)):
                batch = [groups[i] for i in order[start:start + per_batch]]
                patches, mix = collate(batch)
                out = forward_batch(model, patches, mix)
                recon = out.frame_recon.mean()
                entropy = out.frame_entropy.mean()
                total = config.lambda_recon * recon + config.lambda_ent * entropy
                for name, term in (("recon", recon), ("entropy", entropy), ("total", total)):
                    if not torch.isfinite(term):
                        raise NumericFailure(f"non-finite {name} loss at epoch {epoch}, batch {b}")
                opt.zero_grad()
                total.backward()
                opt.step()
                if model.use_memory:
                    try:
                        model.memory.check()
                    except FloatingPointError as exc:
                        raise NumericFailure(f"epoch {epoch}, batch {b}: {exc}") from exc
                rec = {"epoch": epoch, "batch": b, "recon": recon.item(),
                       "entropy": entropy.item(), "total": total.item()}
                history.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                sums += np.array([rec["recon"], rec["entropy"], rec["total"]]) * len(batch)
            means = sums / len(groups)
            epoch_totals.append(float(means[2]))
            log.info("%s epoch %d: recon %.6f entropy %.4f total %.6f",
                     config.stream, epoch, *means)
            if _plateaued(epoch_totals, config.plateau_patience, config.plateau_tol):
                log.info("%s: loss plateau after epoch %d, stopping", config.stream, epoch)
                break
    finally:
        if sink:
            sink.close()
    model.eval()
    return Checkpoint(model, config.stream, history,
                      {"train_config": asdict(config), "epoch_totals": epoch_totals})

