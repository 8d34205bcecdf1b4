"""Training objectives: Charbonnier, blurred reconstruction, contextual
distance, confidence-weighted fidelity, and the two stage composites.

All losses accept frames as numpy (H, W, C) arrays or torch tensors in
either (H, W, C) or (C, H, W) layout; torch inputs keep their gradient
graph. The perceptual embedder is a fixed, seed-reproducible shallow
random-feature network, so absolute loss values carry no pretrained
semantics but the loss structure (set-to-set matching, confidence
weighting) is preserved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .alignment import patch_match
from .torchresample import resize_bicubic_t

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.05
    gamma: float = 0.1
    charbonnier_eps: float = 1e-3

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.charbonnier_eps) < 0:
            raise ValueError("loss weights must be nonnegative")


def _to_chw(frame):
    """Normalize a frame to a (C, H, W) float tensor, keeping autograd."""
    if isinstance(frame, np.ndarray):
        frame = torch.as_tensor(frame, dtype=torch.float32)
    if frame.dim() != 3:
        raise ValueError(f"expected a 3D frame, got shape {tuple(frame.shape)}")
    if frame.shape[-1] in (1, 3) and frame.shape[0] not in (1, 3):
        frame = frame.permute(2, 0, 1)
    elif frame.shape[0] not in (1, 3):
        raise ValueError(f"cannot infer layout of shape {tuple(frame.shape)}")
    return frame


def charbonnier(pred, target, eps=1e-3):
    pred = _to_chw(pred)
    target = _to_chw(target)
    if pred.shape != target.shape:
        raise ValueError("frame dims differ")
    diff = pred - target.to(pred.dtype)
    return torch.sqrt(diff * diff + eps * eps).mean()


def _gauss3_kernel(dtype, device):
    sigma = 0.5
    x = np.array([-1.0, 0.0, 1.0])
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k /= k.sum()
    return torch.as_tensor(k, dtype=dtype, device=device)


def gaussian_blur3(frame):
    """Separable 3x3 Gaussian (sigma = 0.5), replicate borders."""
    x = _to_chw(frame)
    c = x.shape[0]
    k = _gauss3_kernel(x.dtype, x.device)
    ky = k.view(1, 1, 3, 1).expand(c, 1, 3, 1)
    kx = k.view(1, 1, 1, 3).expand(c, 1, 1, 3)
    out = F.pad(x.unsqueeze(0), (1, 1, 1, 1), mode="replicate")
    out = F.conv2d(out, ky, groups=c)
    out = F.conv2d(out, kx, groups=c)
    return out.squeeze(0)


class PerceptualEmbedder(nn.Module):
    """Frozen seeded 3-layer conv feature extractor.

    Strided so a 256-pixel frame lands on a 32x32 grid; anything larger is
    average-pooled down to at most 32x32 to bound the O(N^2) matching cost.
    """

    def __init__(self, seed=0, channels=(16, 32, 32), max_grid=32):
        super().__init__()
        self.max_grid = max_grid
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for c_out in channels:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = c_in * 9
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) / np.sqrt(fan_in)
                )
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, frame):
        x = _to_chw(frame).unsqueeze(0)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, 0.2)
        if max(x.shape[-2:]) > self.max_grid:
            x = F.adaptive_avg_pool2d(
                x,
                (min(x.shape[-2], self.max_grid), min(x.shape[-1], self.max_grid)),
            )
        return x.squeeze(0)


def _flat_unit(feat, eps=1e-8):
    v = feat.reshape(feat.shape[0], -1).t()  # (N, C)
    return v / v.norm(dim=1, keepdim=True).clamp_min(eps)


def contextual_distance(x, y, embedder):
    """Set-to-set perceptual distance.

    For every embedded source position i, delta_i = min over target
    positions j of (1 - cosine similarity); returns (delta map, mean).
    """
    ex = embedder(x)
    ey = embedder(y)
    if ex.shape != ey.shape:
        raise ValueError("frame dims differ")
    vx = _flat_unit(ex)
    vy = _flat_unit(ey)
    d = 1.0 - vx @ vy.t()
    delta = d.min(dim=1).values.view(ex.shape[1], ex.shape[2])
    return delta, delta.mean()


def reconstruction_loss(sr, gt, weights, embedder):
    term1 = (gaussian_blur3(sr) - gaussian_blur3(gt)).abs().mean()
    if weights.alpha == 0:
        return term1
    _, ctx = contextual_distance(sr, gt, embedder)
    return term1 + weights.alpha * ctx


def _match_confidence(emb_a, emb_b, patch=3):
    """Patch-match confidence between two embeddings on the full grid,
    shifted from [-1, 1] to [0, 1]."""
    p = patch // 2
    pa = F.pad(emb_a.unsqueeze(0), (p, p, p, p), mode="replicate")[0]
    pb = F.pad(emb_b.unsqueeze(0), (p, p, p, p), mode="replicate")[0]
    _, conf = patch_match(pa, pb, patch=patch)
    return (conf + 1.0) / 2.0


def fidelity_loss(sr, ref, embedder):
    """Contextual distance weighted by patch-match confidence."""
    emb_sr = embedder(sr)
    emb_ref = embedder(ref)
    if emb_sr.shape != emb_ref.shape:
        raise ValueError("frame dims differ")
    vx = _flat_unit(emb_sr)
    vy = _flat_unit(emb_ref)
    d = 1.0 - vx @ vy.t()
    delta = d.min(dim=1).values
    conf = _match_confidence(emb_sr.detach(), emb_ref.detach()).reshape(-1)
    denom = conf.sum()
    if denom <= 0:
        log.warning("fidelity_loss: all-zero confidence, returning 0")
        return delta.sum() * 0.0
    return (delta * conf).sum() / denom


def stage1_loss(sr, gt_uw, ref_wide, weights, embedder):
    loss = reconstruction_loss(sr, gt_uw, weights, embedder)
    if weights.beta:
        loss = loss + weights.beta * fidelity_loss(sr, ref_wide, embedder)
    return loss


def stage2_loss(sr, lr_uw, ref_tele, weights, embedder, tele_magnification=4):
    """Self-supervised stage: downsample-consistency plus telephoto fidelity.

    The fidelity term compares the centered region of the SR frame covered
    by the telephoto FoV against the telephoto frame (resized to that
    region's pixel grid if needed).
    """
    sr_t = _to_chw(sr)
    lr_t = _to_chw(lr_uw)
    h_lr, w_lr = lr_t.shape[-2:]
    down = resize_bicubic_t(sr_t, h_lr, w_lr)
    term1 = (gaussian_blur3(down) - gaussian_blur3(lr_t)).abs().mean()
    if not weights.gamma:
        return term1
    h_sr, w_sr = sr_t.shape[-2:]
    ch, cw = h_sr // tele_magnification, w_sr // tele_magnification
    y0, x0 = (h_sr - ch) // 2, (w_sr - cw) // 2
    sr_tele = sr_t[:, y0 : y0 + ch, x0 : x0 + cw]
    tele = _to_chw(ref_tele)
    if tele.shape[-2:] != (ch, cw):
        tele = resize_bicubic_t(tele, ch, cw)
    return term1 + weights.gamma * fidelity_loss(sr_tele, tele, embedder)
