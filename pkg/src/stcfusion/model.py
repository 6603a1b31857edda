"""Object-centric autoencoder with a frame-context memory.

Each target patch is encoded to a C-dim feature. The features of one frame
are averaged into a context vector, which addresses an N x C memory bank by
softmax over cosine similarities. The weights are hard-shrunk, the memory is
read, and the read-out is concatenated behind every target feature before
decoding. The same architecture serves the appearance (1-channel crops) and
motion (2-channel flow crops) streams.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import ZeroReadWarning

DEFAULT_CHANNELS = (32, 48, 64, 64)


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# memory math

def cosine_similarity(a, b):
    """Cosine similarity along the last axis.

    With 1-D inputs returns a 0-d tensor. With ``a`` of shape (..., C) and
    ``b`` of shape (N, C) returns the (..., N) similarity matrix.
    """
    a, b = _t(a), _t(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na = torch.linalg.vector_norm(a, dim=-1)
    nb = torch.linalg.vector_norm(b, dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    if a.ndim == 1 and b.ndim == 1:
        return (a @ b) / (na * nb)
    return (a @ b.T) / (na.unsqueeze(-1) * nb)


def address_memory(z, memory):
    """Softmax over memory rows of their cosine similarity to ``z``."""
    items = memory.items if isinstance(memory, MemoryBank) else _t(memory)
    return torch.softmax(cosine_similarity(z, items), dim=-1)


def hard_shrink(w, threshold: float, renormalize: bool = False):
    """Zero every weight ``<= threshold``; survivors pass through unchanged.

    A row that shrinks to all zeros yields a zero read; this is reported with
    a ZeroReadWarning rather than an error.
    """
    if threshold < 0:
        raise ValueError("shrink threshold must be >= 0")
    w = _t(w)
    shrunk = w * (w > threshold).to(w.dtype)
    total = shrunk.sum(dim=-1, keepdim=True)
    if bool((total == 0).any()):
        warnings.warn("all memory weights shrunk to zero; memory read is the zero vector",
                      ZeroReadWarning, stacklevel=2)
    if renormalize:
        shrunk = torch.where(total > 0, shrunk / torch.where(total > 0, total, torch.ones_like(total)), shrunk)
    return shrunk


def read_memory(w_hat, memory):
    items = memory.items if isinstance(memory, MemoryBank) else _t(memory)
    w_hat = _t(w_hat).to(items.dtype)
    if w_hat.shape[-1] != items.shape[0]:
        raise ValueError(f"weight length {w_hat.shape[-1]} != memory size {items.shape[0]}")
    return w_hat @ items


def aggregate_context(features):
    """Mean of the per-target features of one frame, shape (n, C) -> (C,)."""
    if isinstance(features, (list, tuple)):
        if not features:
            raise ValueError("cannot aggregate an empty frame")
        features = torch.stack([_t(f) for f in features])
    features = _t(features)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("expected a non-empty (n, C) feature matrix")
    return features.mean(dim=0)


def fuse_context(target_feature, context):
    """Target feature first, memory context second."""
    target_feature, context = _t(target_feature), _t(context)
    if target_feature.shape[-1] != context.shape[-1]:
        raise ValueError(f"dimension mismatch: {target_feature.shape[-1]} vs {context.shape[-1]}")
    return torch.cat([target_feature, context.to(target_feature.dtype)], dim=-1)


def split_fused(fused):
    fused = _t(fused)
    c = fused.shape[-1] // 2
    return fused[..., :c], fused[..., c:]


def recon_loss(x, x_hat):
    """Mean squared difference over every pixel and channel."""
    x, x_hat = _t(x), _t(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat.to(x.dtype)) ** 2).mean()


def per_sample_recon(x, x_hat):
    """Mean squared difference per leading index, (K, ...) -> (K,)."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).flatten(1).mean(dim=1)


def entropy_loss(w_hat):
    """-sum w log w over the last axis, with 0 log 0 = 0."""
    w_hat = _t(w_hat)
    positive = w_hat > 0
    safe = torch.where(positive, w_hat, torch.ones_like(w_hat))
    return -(torch.where(positive, w_hat * torch.log(safe), torch.zeros_like(w_hat))).sum(dim=-1)


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    entropy: float
    total: float
    weights: tuple[float, float]


def total_loss(recon, entropy, lambda_recon: float, lambda_ent: float):
    """Weighted sum. Returns a LossBreakdown for plain numbers, a tensor for tensors."""
    if isinstance(recon, torch.Tensor) or isinstance(entropy, torch.Tensor):
        return lambda_recon * recon + lambda_ent * entropy
    if recon < 0 or entropy < 0:
        raise ValueError("loss terms must be non-negative")
    return LossBreakdown(float(recon), float(entropy),
                         lambda_recon * recon + lambda_ent * entropy,
                         (lambda_recon, lambda_ent))


# ---------------------------------------------------------------------------
# modules

class MemoryBank(nn.Module):
    """N learnable prototype rows, initialised uniformly on the unit sphere."""

    def __init__(self, size: int, dim: int, shrink_threshold: float | None = None,
                 renormalize: bool = False, seed: int = 0):
        super().__init__()
        if size < 1:
            raise ValueError("memory size must be >= 1")
        gen = torch.Generator().manual_seed(seed)
        rows = torch.randn(size, dim, generator=gen)
        rows = rows / torch.linalg.vector_norm(rows, dim=1, keepdim=True)
        self.items = nn.Parameter(rows)
        self.shrink_threshold = 1.0 / size if shrink_threshold is None else float(shrink_threshold)
        self.renormalize = bool(renormalize)

    @property
    def size(self) -> int:
        return self.items.shape[0]

    def check(self):
        if not torch.isfinite(self.items).all():
            raise FloatingPointError("memory bank contains non-finite values")
        if bool((torch.linalg.vector_norm(self.items, dim=1) == 0).any()):
            raise FloatingPointError("memory bank contains an all-zero row")

    def forward(self, context):
        w = address_memory(context, self)
        w_hat = hard_shrink(w, self.shrink_threshold, self.renormalize)
        return read_memory(w_hat, self), w_hat


class StreamModel(nn.Module):
    """Encoder, memory bank and decoder for one stream.

    Encoder: four 3x3 conv + ReLU layers with a 2x max-pool after each of the
    first three, then a linear projection to ``latent_dim``. The decoder
    mirrors it from a ``2 * latent_dim`` input with nearest-neighbour
    upsampling; its output layer is linear.
    """

    def __init__(self, input_channels: int, latent_dim: int = 256, memory_size: int = 100,
                 shrink_threshold: float | None = None, renormalize: bool = False,
                 channels: Sequence[int] = DEFAULT_CHANNELS, patch_size: int = 64,
                 use_memory: bool = True, seed: int = 0):
        super().__init__()
        if input_channels not in (1, 2):
            raise ValueError("input_channels must be 1 (appearance) or 2 (motion)")
        if len(channels) != 4:
            raise ValueError("channel plan needs exactly four entries")
        if patch_size % 8:
            raise ValueError("patch_size must be divisible by 8")
        self.input_channels = input_channels
        self.latent_dim = latent_dim
        self.channels = tuple(int(c) for c in channels)
        self.patch_size = patch_size
        self.use_memory = use_memory
        self.seed = seed
        s = patch_size // 8
        self._bottleneck = (self.channels[3], s, s)

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self._build(input_channels, latent_dim, s)
        self.memory = MemoryBank(memory_size, latent_dim, shrink_threshold, renormalize, seed=seed)

    def _build(self, input_channels, latent_dim, s):
        c1, c2, c3, c4 = self.channels
        self.encoder = nn.Sequential(
            nn.Conv2d(input_channels, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(c3, c4, 3, padding=1), nn.ReLU(),
            nn.Flatten(),
            nn.Linear(c4 * s * s, latent_dim),
        )
        self.decoder = nn.Sequential(
            nn.Linear(2 * latent_dim, c4 * s * s), nn.ReLU(),
            nn.Unflatten(1, self._bottleneck),
            nn.Conv2d(c4, c3, 3, padding=1), nn.ReLU(), nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c3, c2, 3, padding=1), nn.ReLU(), nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c2, c1, 3, padding=1), nn.ReLU(), nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(c1, input_channels, 3, padding=1),
        )

    def architecture(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "latent_dim": self.latent_dim,
            "memory_size": self.memory.size,
            "shrink_threshold": self.memory.shrink_threshold,
            "renormalize": self.memory.renormalize,
            "channels": list(self.channels),
            "patch_size": self.patch_size,
            "use_memory": self.use_memory,
            "seed": self.seed,
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "StreamModel":
        return cls(arch["input_channels"], arch["latent_dim"], arch["memory_size"],
                   arch["shrink_threshold"], arch["renormalize"], arch["channels"],
                   arch["patch_size"], arch["use_memory"], arch["seed"])

    def _dtype(self):
        return self.memory.items.dtype

    def encode(self, patches):
        """(K, ch, P, P) or a single (ch, P, P) / (P, P) patch -> (K, C) or (C,)."""
        x = _t(patches).to(self._dtype())
        single = False
        if x.ndim == 2 and self.input_channels == 1:
            x = x[None]
        if x.ndim == 3:
            x, single = x[None], True
        if x.ndim != 4 or x.shape[1:] != (self.input_channels, self.patch_size, self.patch_size):
            raise ValueError(
                f"expected patches of shape (*, {self.input_channels}, {self.patch_size}, "
                f"{self.patch_size}), got {tuple(x.shape)}")
        z = self.encoder(x)
        return z[0] if single else z

    def decode(self, fused):
        f = _t(fused).to(self._dtype())
        single = f.ndim == 1
        if single:
            f = f[None]
        if f.shape[-1] != 2 * self.latent_dim:
            raise ValueError(f"decoder expects width {2 * self.latent_dim}, got {f.shape[-1]}")
        out = self.decoder(f)
        return out[0] if single else out

    def context_read(self, context):
        """Memory read for (B, C) contexts; identity when memory is disabled."""
        if not self.use_memory:
            return context, None
        return self.memory(context)

    def forward(self, patches, mix):
        return forward_batch(self, patches, mix)


@dataclass
class BatchOutput:
    reconstructions: torch.Tensor  # (K, ch, P, P), one per unique patch
    patch_errors: torch.Tensor     # (K,)
    frame_recon: torch.Tensor      # (B,) mean per-target error of each frame
    frame_entropy: torch.Tensor    # (B,)
    weights: torch.Tensor | None   # (B, N) shrunk addressing weights


def mixing_matrix(slot_lists, sizes=None, dtype=torch.float32):
    """Build the (B, K) matrix of slot multiplicities / n for a batch of frames.

    ``slot_lists[g]`` lists, for each of the n target slots of frame g, which
    of that frame's unique patches fills it. Unique patches of consecutive
    frames are assumed to be stacked in order.
    """
    if sizes is None:
        sizes = [int(np.max(s)) + 1 for s in slot_lists]
    counts = [np.bincount(np.asarray(s), minlength=k) for s, k in zip(slot_lists, sizes)]
    total = sum(len(c) for c in counts)
    mix = torch.zeros(len(counts), total, dtype=dtype)
    offset = 0
    for g, (c, s) in enumerate(zip(counts, slot_lists)):
        mix[g, offset:offset + len(c)] = torch.as_tensor(c / len(s), dtype=dtype)
        offset += len(c)
    return mix


def forward_batch(model: StreamModel, patches, mix) -> BatchOutput:
    """Run B frames whose K unique patches are stacked in ``patches``.

    ``mix`` is the (B, K) slot-multiplicity matrix from :func:`mixing_matrix`.
    Averaging over the n slots of a frame equals a ``mix``-weighted sum over
    its unique patches, so padded duplicates are never recomputed.
    """
    x = _t(patches).to(model._dtype())
    mix = _t(mix).to(model._dtype())
    z = model.encode(x)
    context = mix @ z
    z_hat, w_hat = model.context_read(context)
    owner = (mix > 0).to(torch.long).argmax(dim=0)
    recon = model.decode(fuse_context(z, z_hat[owner]))
    errors = per_sample_recon(x, recon)
    frame_recon = mix @ errors
    if w_hat is None:
        frame_entropy = torch.zeros_like(frame_recon)
    else:
        frame_entropy = entropy_loss(w_hat)
    return BatchOutput(recon, errors, frame_recon, frame_entropy, w_hat)


@dataclass
class FrameOutput:
    reconstructions: torch.Tensor  # (n, ch, P, P)
    target_losses: torch.Tensor    # (n,)
    entropy: torch.Tensor          # scalar, shared by every target of the frame


def forward_frame(group, model: StreamModel) -> FrameOutput:
    """Forward one frame group (anything exposing ``unique_patches`` and ``slots``)."""
    slots = np.asarray(group.slots)
    patches = torch.as_tensor(np.asarray(group.unique_patches))
    mix = mixing_matrix([slots], [patches.shape[0]], dtype=model._dtype())
    out = forward_batch(model, patches, mix)
    idx = torch.as_tensor(slots, dtype=torch.long)
    return FrameOutput(out.reconstructions[idx], out.patch_errors[idx], out.frame_entropy[0])
