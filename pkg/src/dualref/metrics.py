"""PSNR, SSIM, and centered-FoV ring evaluation.

Rings are centered rectangular annuli defined by inner/outer area
percentages of the frame at the frame's aspect ratio. Per-ring values are
averaged per frame, then over frames (and over clips by the caller); the
report header records this convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP_DB = 100.0

AGGREGATION_NOTE = "PSNR/SSIM averaged per frame, then over frames and clips"


def _luma(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 3:
        return frame @ np.array([0.299, 0.587, 0.114])
    return frame


def psnr(a, b, mask=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("frame dims differ")
    se = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise ValueError("mask dims differ from frame")
        if not mask.any():
            raise ValueError("empty mask")
        se = se[mask]
    mse = se.mean()
    if mse <= 0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP_DB)


def _gaussian_window(size=11, sigma=1.5):
    half = size // 2
    x = np.arange(-half, half + 1)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, mask=None, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Single-scale SSIM on luminance, dynamic range 1.

    The SSIM map is evaluated at valid window centers only; the mean is
    taken over centers selected by the (cropped) mask.
    """
    x = _luma(a)
    y = _luma(b)
    if x.shape != y.shape:
        raise ValueError("frame dims differ")
    h, w = x.shape
    if h < window or w < window:
        raise ValueError(f"frame smaller than SSIM window ({window})")
    kern = _gaussian_window(window, sigma)
    filt = lambda img: _valid_correlate(img, kern)
    mu_x = filt(x)
    mu_y = filt(y)
    xx = filt(x * x) - mu_x * mu_x
    yy = filt(y * y) - mu_y * mu_y
    xy = filt(x * y) - mu_x * mu_y
    c1 = k1 * k1
    c2 = k2 * k2
    smap = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    )
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ValueError("mask dims differ from frame")
        half = window // 2
        centers = mask[half : h - half, half : w - half]
        if not centers.any():
            raise ValueError("empty mask after window cropping")
        return float(smap[centers].mean())
    return float(smap.mean())


def _valid_correlate(img, kern):
    out = ndimage.correlate(img, kern, mode="constant")
    half = kern.shape[0] // 2
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


@dataclass(frozen=True)
class FovRing:
    inner_area_pct: float
    outer_area_pct: float

    def __post_init__(self):
        if not (0 <= self.inner_area_pct < self.outer_area_pct <= 100):
            raise ValueError(
                f"require 0 <= inner < outer <= 100, got "
                f"({self.inner_area_pct}, {self.outer_area_pct})"
            )


def region_extents(h, w, area_pct):
    """Centered rectangle with ~area_pct% of the frame area at the frame
    aspect ratio; extents rounded to even so the rectangle stays centered."""
    if area_pct >= 100:
        return h, w
    if area_pct <= 0:
        return 0, 0
    f = np.sqrt(area_pct / 100.0)
    rh = min(h, int(round(h * f / 2.0)) * 2)
    rw = min(w, int(round(w * f / 2.0)) * 2)
    return rh, rw


def region_mask(h, w, area_pct):
    rh, rw = region_extents(h, w, area_pct)
    mask = np.zeros((h, w), dtype=bool)
    if rh and rw:
        y0 = (h - rh) // 2
        x0 = (w - rw) // 2
        mask[y0 : y0 + rh, x0 : x0 + rw] = True
    return mask


def ring_mask(h, w, ring):
    outer = region_mask(h, w, ring.outer_area_pct)
    inner = region_mask(h, w, ring.inner_area_pct)
    return outer & ~inner


@dataclass
class RingResult:
    ring: tuple
    psnr_db: float
    ssim: float
    pixel_count: int
    area_error_pct: float


@dataclass
class MetricReport:
    note: str = AGGREGATION_NOTE
    per_clip: dict = field(default_factory=dict)  # clip_id -> list of RingResult
    aggregate: list = field(default_factory=list)

    def to_json(self):
        def ring_dict(r):
            return dict(
                ring=list(r.ring), psnr_db=r.psnr_db, ssim=r.ssim,
                pixel_count=r.pixel_count, area_error_pct=r.area_error_pct,
            )

        return json.dumps(
            dict(
                note=self.note,
                per_clip={k: [ring_dict(r) for r in v] for k, v in self.per_clip.items()},
                aggregate=[ring_dict(r) for r in self.aggregate],
            ),
            indent=2,
        )

    def to_text(self):
        lines = [f"# {self.note}"]
        header = f"{'clip':<16}" + "".join(
            f"{f'{r.ring[0]:g}-{r.ring[1]:g}%':>16}" for r in self.aggregate
        )
        lines.append(header)
        for clip_id, results in sorted(self.per_clip.items()):
            row = f"{clip_id:<16}" + "".join(
                f"{r.psnr_db:>8.2f}/{r.ssim:<7.4f}" for r in results
            )
            lines.append(row)
        lines.append(
            f"{'ALL':<16}" + "".join(
                f"{r.psnr_db:>8.2f}/{r.ssim:<7.4f}" for r in self.aggregate
            )
        )
        return "\n".join(lines) + "\n"


def fov_ring_metrics(sr, gt, rings):
    """Per-ring PSNR/SSIM for one clip pair, averaged over frames."""
    if sr.frames.shape != gt.frames.shape:
        raise ValueError("clips must be aligned and equally sized")
    h, w = sr.height, sr.width
    results = []
    for ring in rings:
        mask = ring_mask(h, w, ring)
        count = int(mask.sum())
        if count == 0:
            raise ValueError(f"degenerate ring {ring}")
        target_area = (ring.outer_area_pct - ring.inner_area_pct) / 100.0 * h * w
        area_err = 100.0 * abs(count - target_area) / (h * w)
        ps = [psnr(sr.frames[t], gt.frames[t], mask) for t in range(len(sr))]
        ss = [ssim(sr.frames[t], gt.frames[t], mask) for t in range(len(sr))]
        results.append(
            RingResult(
                ring=(ring.inner_area_pct, ring.outer_area_pct),
                psnr_db=float(np.mean(ps)),
                ssim=float(np.mean(ss)),
                pixel_count=count,
                area_error_pct=area_err,
            )
        )
    return results


def aggregate_ring_results(per_clip):
    """Average RingResult lists across clips (rings must align)."""
    clips = list(per_clip.values())
    out = []
    for i in range(len(clips[0])):
        out.append(
            RingResult(
                ring=clips[0][i].ring,
                psnr_db=float(np.mean([c[i].psnr_db for c in clips])),
                ssim=float(np.mean([c[i].ssim for c in clips])),
                pixel_count=clips[0][i].pixel_count,
                area_error_pct=float(np.mean([c[i].area_error_pct for c in clips])),
            )
        )
    return out
