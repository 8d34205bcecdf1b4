"""Clip I/O, bicubic resampling, and synthetic multi-FoV triplet generation.

Frames are float32 numpy arrays of shape (H, W, 3) with values in [0, 1].
A clip stacks frames into (T, H, W, 3). Triplets are synthesized from a
single high-resolution clip: the LR stream is an s-times downsample of the
full frame, the reference stream is an s-times downsample of the centered
1/m-linear-fraction crop, so the reference shows the central field of view
at m-times the LR magnification.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, EmptyClipError, FormatError


@dataclass
class Clip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    frame_rate: float | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ValueError(f"clip must be (T,H,W,C), got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ValueError("clip must contain at least one frame")

    def __len__(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]


@dataclass
class TripletSample:
    lr: Clip
    ref: Clip
    gt: Clip
    scale: int
    ref_magnification: int = 2

    def __post_init__(self):
        if self.lr.frames.shape != self.ref.frames.shape:
            raise ValueError("lr and ref must share shape")
        s = self.scale
        if self.gt.height != s * self.lr.height or self.gt.width != s * self.lr.width:
            raise ValueError("gt dims must be scale x lr dims")
        if len(self.gt) != len(self.lr):
            raise ValueError("gt and lr must share length")


@dataclass
class ManifestEntry:
    clip_id: str
    split: str
    path: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def split_entries(self, split):
        return [e for e in self.entries if e.split == split]

    def save(self, path):
        with open(path, "w") as f:
            for e in self.entries:
                f.write(f"{e.clip_id}\t{e.split}\t{e.path}\n")

    @staticmethod
    def load(path):
        entries = []
        with open(path) as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise FormatError(f"bad manifest line: {line!r}")
                entries.append(ManifestEntry(*parts))
        ids = [e.clip_id for e in entries]
        if len(set(ids)) != len(ids):
            raise FormatError("duplicate clip identifiers in manifest")
        return DatasetManifest(entries)


def assign_split(clip_id, ratios=(0.85, 0.05, 0.10)):
    """Deterministic split assignment by hashing the clip identifier."""
    h = hashlib.sha256(clip_id.encode("utf-8")).digest()
    u = int.from_bytes(h[:8], "big") / 2**64
    if u < ratios[0]:
        return "train"
    if u < ratios[0] + ratios[1]:
        return "val"
    return "test"


def load_frame(path):
    try:
        img = Image.open(path).convert("RGB")
    except FileNotFoundError as e:
        raise DataError(f"cannot read frame: {path}") from e
    return np.asarray(img, dtype=np.float32) / 255.0


def save_frame(frame, path):
    arr = np.clip(np.asarray(frame, dtype=np.float32), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8))
    img.save(path)


def load_clip(directory, pattern=r".*\.png$"):
    """Load an image-sequence clip, frames sorted by embedded frame index."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"no such clip directory: {directory}")
    rx = re.compile(pattern)
    names = sorted(n for n in os.listdir(directory) if rx.match(n))
    if not names:
        raise EmptyClipError(f"no frames matching {pattern!r} in {directory}")

    def frame_key(name):
        m = re.search(r"(\d+)", name)
        return (int(m.group(1)) if m else 0, name)

    names.sort(key=frame_key)
    frames = [load_frame(directory / n) for n in names]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise FormatError(f"inconsistent frame sizes in {directory}: {sorted(shapes)}")
    return Clip(np.stack(frames))


def save_clip(clip, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in range(len(clip)):
        save_frame(clip.frames[t], directory / f"{t:06d}.png")


def cubic_kernel(t, a=-0.5):
    """Keys cubic interpolation kernel."""
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t <= 1.0
    m2 = (t > 1.0) & (t < 2.0)
    out[m1] = (a + 2.0) * t[m1] ** 3 - (a + 3.0) * t[m1] ** 2 + 1.0
    out[m2] = a * t[m2] ** 3 - 5.0 * a * t[m2] ** 2 + 8.0 * a * t[m2] - 4.0 * a
    return out


def bicubic_weight_matrix(in_size, out_size, a=-0.5):
    """Dense (out_size, in_size) row-stochastic resampling matrix.

    Downsampling stretches the kernel support (anti-aliasing prefilter);
    out-of-range taps are folded onto the clamped border samples.
    """
    if out_size < 1 or in_size < 1:
        raise ValueError("sizes must be positive")
    scale = out_size / in_size
    # kernel width in input-pixel units; widened when minifying
    stretch = max(1.0, 1.0 / scale)
    support = 2.0 * stretch
    out_coords = (np.arange(out_size) + 0.5) / scale - 0.5
    W = np.zeros((out_size, in_size), dtype=np.float64)
    for i, c in enumerate(out_coords):
        lo = int(np.floor(c - support)) + 1
        hi = int(np.ceil(c + support))
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((taps - c) / stretch, a=a)
        idx = np.clip(taps, 0, in_size - 1)
        np.add.at(W[i], idx, w)
        W[i] /= W[i].sum()
    return W.astype(np.float32)


def resample_bicubic(frame, out_h, out_w):
    """Separable bicubic resampling (a = -0.5) with clamped output."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid target size {out_h}x{out_w}")
    frame = np.asarray(frame, dtype=np.float32)
    h, w = frame.shape[:2]
    wy = bicubic_weight_matrix(h, out_h)
    wx = bicubic_weight_matrix(w, out_w)
    out = np.einsum("oh,hwc->owc", wy, frame)
    out = np.einsum("ow,hwc->hoc", wx, out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resample_clip(clip, out_h, out_w):
    return Clip(
        np.stack([resample_bicubic(f, out_h, out_w) for f in clip.frames]),
        frame_rate=clip.frame_rate,
    )


def center_crop(frame, out_h, out_w):
    h, w = frame.shape[:2]
    if out_h > h or out_w > w:
        raise ValueError("crop larger than frame")
    y0 = (h - out_h) // 2
    x0 = (w - out_w) // 2
    return frame[y0 : y0 + out_h, x0 : x0 + out_w]


def synthesize_triplet(gt, scale, magnification=2):
    """Build an (lr, ref, gt) triplet from one high-resolution clip.

    lr_t is the full frame downsampled by `scale`; ref_t is the centered
    1/magnification-per-axis crop downsampled to the same pixel size, i.e.
    the narrow-FoV camera at `magnification` x the LR magnification.
    """
    h, w = gt.height, gt.width
    if magnification < 2 or scale < magnification:
        raise ValueError("require scale >= magnification >= 2")
    if h % (scale * magnification) or w % (scale * magnification):
        raise ValueError(
            f"gt dims {h}x{w} must be divisible by scale*magnification "
            f"({scale * magnification})"
        )
    lr = resample_clip(gt, h // scale, w // scale)
    ref_frames = [
        resample_bicubic(
            center_crop(f, h // magnification, w // magnification),
            h // scale,
            w // scale,
        )
        for f in gt.frames
    ]
    ref = Clip(np.stack(ref_frames), frame_rate=gt.frame_rate)
    return TripletSample(lr=lr, ref=ref, gt=gt, scale=scale, ref_magnification=magnification)


def tele_crop(gt_frame, tele_magnification=4):
    """Centered crop matching the telephoto camera's FoV at native resolution."""
    h, w = gt_frame.shape[:2]
    return center_crop(gt_frame, h // tele_magnification, w // tele_magnification)


def write_triplet(triplet, clip_dir):
    clip_dir = Path(clip_dir)
    save_clip(triplet.gt, clip_dir / "gt")
    save_clip(triplet.lr, clip_dir / "lr")
    save_clip(triplet.ref, clip_dir / "ref")


def load_triplet(clip_dir, scale, magnification=2):
    clip_dir = Path(clip_dir)
    return TripletSample(
        lr=load_clip(clip_dir / "lr"),
        ref=load_clip(clip_dir / "ref"),
        gt=load_clip(clip_dir / "gt"),
        scale=scale,
        ref_magnification=magnification,
    )
