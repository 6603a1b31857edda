"""Dense optical flow between consecutive grayscale frames.

Two backends are provided: an iterative Horn-Schunck solver (optionally
coarse-to-fine) and a loader for precomputed flow stored in the ``STCFLOW1``
binary layout, so that an external TV-L1 run can be dropped in.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import IngestionError

FLOW_MAGIC = b"STCFLOW1"

_AVG_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12],
     [1 / 6, 0.0, 1 / 6],
     [1 / 12, 1 / 6, 1 / 12]]
)
_KX = np.array([[-1.0, 1.0], [-1.0, 1.0]]) * 0.25
_KY = np.array([[-1.0, -1.0], [1.0, 1.0]]) * 0.25
_KT = np.ones((2, 2)) * 0.25


@dataclass
class FlowField:
    """Per-pixel displacement (pixels/frame) from frame t-1 to frame t."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u/v shapes differ or are not 2-D: {self.u.shape} vs {self.v.shape}")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow field contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def stack(self) -> np.ndarray:
        """(2, H, W) array with u first."""
        return np.stack([self.u, self.v])


def _derivatives(im1, im2):
    # Averaged over the 2x2x2 cube, as in the original formulation.
    fx = ndimage.correlate(im1, _KX, mode="nearest") + ndimage.correlate(im2, _KX, mode="nearest")
    fy = ndimage.correlate(im1, _KY, mode="nearest") + ndimage.correlate(im2, _KY, mode="nearest")
    ft = ndimage.correlate(im2, _KT, mode="nearest") - ndimage.correlate(im1, _KT, mode="nearest")
    return fx, fy, ft


def _hs_single(im1, im2, u, v, alpha, iterations):
    fx, fy, ft = _derivatives(im1, im2)
    denom = alpha**2 + fx**2 + fy**2
    for _ in range(iterations):
        u_avg = ndimage.convolve(u, _AVG_KERNEL, mode="nearest")
        v_avg = ndimage.convolve(v, _AVG_KERNEL, mode="nearest")
        common = (fx * u_avg + fy * v_avg + ft) / denom
        u = u_avg - fx * common
        v = v_avg - fy * common
    return u, v


def _warp(image, u, v):
    h, w = image.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(image, [yy + v, xx + u], order=1, mode="nearest")


def horn_schunck(prev, cur, alpha: float = 0.5, iterations: int = 100,
                 levels: int = 3, presmooth: float = 2.0) -> FlowField:
    """Horn-Schunck flow from ``prev`` to ``cur``.

    With ``levels > 1`` the solve runs coarse-to-fine on a factor-2 pyramid,
    warping ``cur`` toward ``prev`` by the upsampled estimate at each level
    and solving for the increment. Identical inputs give exactly zero flow.
    """
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if prev.shape != cur.shape or prev.ndim != 2:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {cur.shape}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if presmooth > 0:
        prev = ndimage.gaussian_filter(prev, presmooth)
        cur = ndimage.gaussian_filter(cur, presmooth)

    pyr_prev, pyr_cur = [prev], [cur]
    for _ in range(levels - 1):
        if min(pyr_prev[-1].shape) < 16:
            break
        pyr_prev.append(ndimage.zoom(pyr_prev[-1], 0.5, order=1))
        pyr_cur.append(ndimage.zoom(pyr_cur[-1], 0.5, order=1))

    u = np.zeros(pyr_prev[-1].shape)
    v = np.zeros(pyr_prev[-1].shape)
    for level in range(len(pyr_prev) - 1, -1, -1):
        p, c = pyr_prev[level], pyr_cur[level]
        if u.shape != p.shape:
            zy = p.shape[0] / u.shape[0]
            zx = p.shape[1] / u.shape[1]
            u = ndimage.zoom(u, (zy, zx), order=1)[: p.shape[0], : p.shape[1]] * zx
            v = ndimage.zoom(v, (zy, zx), order=1)[: p.shape[0], : p.shape[1]] * zy
        if level == len(pyr_prev) - 1:
            u, v = _hs_single(p, c, u, v, alpha, iterations)
        else:
            warped = _warp(c, u, v)
            du, dv = _hs_single(p, warped, np.zeros_like(u), np.zeros_like(v), alpha, iterations)
            u, v = u + du, v + dv
    return FlowField(u, v)


def compute_flow(prev, cur, backend: str = "horn-schunck", **params) -> FlowField:
    if backend == "horn-schunck":
        return horn_schunck(prev, cur, **params)
    raise ValueError(f"unknown flow backend {backend!r} (precomputed flow is read with read_flow_file)")


def write_flow_file(path, flows) -> None:
    """Write a sequence of FlowFields as one ``STCFLOW1`` file.

    Entry k holds the flow from frame k to frame k+1.
    """
    flows = list(flows)
    if flows:
        h, w = flows[0].shape
    else:
        h = w = 0
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<III", len(flows), h, w))
        for f in flows:
            if f.shape != (h, w):
                raise ValueError("all flow fields in one file must share a shape")
            fh.write(f.u.astype("<f4").tobytes())
            fh.write(f.v.astype("<f4").tobytes())


def read_flow_file(path) -> list[FlowField]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read flow file ({exc})") from exc
    if data[:8] != FLOW_MAGIC:
        raise IngestionError(f"{path}: bad magic, expected {FLOW_MAGIC!r}")
    if len(data) < 20:
        raise IngestionError(f"{path}: truncated header")
    n, h, w = struct.unpack("<III", data[8:20])
    plane = h * w * 4
    if len(data) != 20 + n * 2 * plane:
        raise IngestionError(f"{path}: expected {20 + n * 2 * plane} bytes, found {len(data)}")
    out = []
    offset = 20
    for _ in range(n):
        u = np.frombuffer(data, dtype="<f4", count=h * w, offset=offset).reshape(h, w)
        v = np.frombuffer(data, dtype="<f4", count=h * w, offset=offset + plane).reshape(h, w)
        out.append(FlowField(u.copy(), v.copy()))
        offset += 2 * plane
    return out
