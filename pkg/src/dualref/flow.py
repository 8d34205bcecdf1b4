"""Inter-frame optical flow between consecutive LR frames.

Flow convention: a FlowField F aligned with the *current* frame satisfies
backward_warp(prev, F) ~= cur, i.e. cur(x, y) ~= prev(x + dx, y + dy).
Fields are float32 arrays of shape (H, W, 2) storing (dx, dy).

The default provider is a classical coarse-to-fine pyramid estimator with
iterative local least-squares refinement; no pretrained weights involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import bicubic_weight_matrix


def _to_gray(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        return frame @ np.array([0.299, 0.587, 0.114])
    return frame


def _downsample2(img):
    img = ndimage.gaussian_filter(img, sigma=1.0, mode="nearest")
    return img[::2, ::2]


def _warp_scalar(img, flow):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = np.clip(xx + flow[..., 0], 0, w - 1)
    sy = np.clip(yy + flow[..., 1], 0, h - 1)
    return ndimage.map_coordinates(img, [sy, sx], order=1, mode="nearest")


def _lk_refine(prev, cur, flow, window, iters, reg=1e-5):
    sigma = window / 4.0
    for _ in range(iters):
        warped = _warp_scalar(prev, flow)
        gy, gx = np.gradient(warped)
        r = cur - warped
        sm = lambda a: ndimage.uniform_filter(a, size=window, mode="nearest")
        gxx = sm(gx * gx) + reg
        gyy = sm(gy * gy) + reg
        gxy = sm(gx * gy)
        bx = sm(gx * r)
        by = sm(gy * r)
        det = gxx * gyy - gxy * gxy
        det = np.where(np.abs(det) < 1e-12, 1e-12, det)
        dx = (gyy * bx - gxy * by) / det
        dy = (gxx * by - gxy * bx) / det
        # cap per-iteration updates; LK linearization only holds locally
        step = np.stack([np.clip(dx, -1, 1), np.clip(dy, -1, 1)], axis=-1)
        flow = flow + step
        # local parametric model is constant-translation; diffuse the field
        # so untextured pixels inherit their neighborhood's motion
        flow = ndimage.gaussian_filter(flow, sigma=(sigma, sigma, 0), mode="nearest")
    return flow


@dataclass(frozen=True)
class FlowProvider:
    """Configured flow estimator; immutable after construction."""

    kind: str = "pyramid"  # pyramid | synthetic-truth | zero
    levels: int = 3
    iters: int = 10
    window: int = 9
    # synthetic-truth parameters: the known global translation (dx, dy)
    truth_shift: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("pyramid", "synthetic-truth", "zero"):
            raise ValueError(f"unknown flow provider kind: {self.kind!r}")


def estimate_flow(provider, frame_prev, frame_cur):
    """Estimate flow such that backward-warping frame_prev aligns with frame_cur."""
    frame_prev = np.asarray(frame_prev)
    frame_cur = np.asarray(frame_cur)
    if frame_prev.shape != frame_cur.shape:
        raise ValueError(
            f"frame sizes differ: {frame_prev.shape} vs {frame_cur.shape}"
        )
    h, w = frame_prev.shape[:2]
    if provider.kind == "zero":
        return np.zeros((h, w, 2), dtype=np.float32)
    if provider.kind == "synthetic-truth":
        out = np.zeros((h, w, 2), dtype=np.float32)
        out[..., 0] = provider.truth_shift[0]
        out[..., 1] = provider.truth_shift[1]
        return out

    prev = _to_gray(frame_prev)
    cur = _to_gray(frame_cur)
    levels = max(1, provider.levels)
    pyr = [(prev, cur)]
    for _ in range(levels - 1):
        p, c = pyr[-1]
        if min(p.shape) < 2 * provider.window:
            break
        pyr.append((_downsample2(p), _downsample2(c)))

    flow = np.zeros(pyr[-1][0].shape + (2,), dtype=np.float64)
    for lvl in range(len(pyr) - 1, -1, -1):
        p, c = pyr[lvl]
        if flow.shape[:2] != p.shape:
            flow = _resize_flow(flow, p.shape[0], p.shape[1]) * 2.0
        flow = _lk_refine(p, c, flow, provider.window, provider.iters)
    flow[..., 0] = np.clip(flow[..., 0], -w, w)
    flow[..., 1] = np.clip(flow[..., 1], -h, h)
    return flow.astype(np.float32)


def _resize_flow(flow, out_h, out_w):
    h, w = flow.shape[:2]
    wy = bicubic_weight_matrix(h, out_h).astype(np.float64)
    wx = bicubic_weight_matrix(w, out_w).astype(np.float64)
    out = np.einsum("oh,hwc->owc", wy, flow)
    return np.einsum("ow,hwc->hoc", wx, out)


def scale_flow(flow, factor):
    """Resample a flow field spatially by `factor`, scaling vectors to match."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    out_h = max(1, int(round(h * factor)))
    out_w = max(1, int(round(w * factor)))
    out = _resize_flow(flow, out_h, out_w) * factor
    return out.astype(np.float32)
