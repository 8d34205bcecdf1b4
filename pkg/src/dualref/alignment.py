"""Spatial alignment primitives.

All operations work on torch tensors. Feature maps are (C, H, W) or
batched (B, C, H, W); flow fields are (2, H, W) / (B, 2, H, W) with
channel 0 = dx (columns) and channel 1 = dy (rows), in pixels. Sample
coordinates are clamped to the valid rectangle everywhere (border
replication); every op is differentiable where it makes sense (index
maps are integer-valued and carry no gradient).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

# offsets larger than this (in feature-scale pixels) are clamped
OFFSET_CLAMP = 10.0


def _as_batched(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected 3D or 4D tensor, got {x.dim()}D")


def flow_to_tensor(flow, device=None, dtype=torch.float32):
    """Convert a numpy (H, W, 2) flow field to a (2, H, W) tensor."""
    t = torch.as_tensor(flow, device=device, dtype=dtype)
    if t.dim() == 3 and t.shape[-1] == 2:
        t = t.permute(2, 0, 1).contiguous()
    return t


def backward_warp(feature, flow):
    """Bilinear backward warp: out(x, y) = feature(x + dx, y + dy)."""
    feature, squeeze = _as_batched(feature)
    flow, _ = _as_batched(flow)
    b, _, h, w = feature.shape
    if flow.shape[0] != b or flow.shape[2:] != (h, w) or flow.shape[1] != 2:
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match feature {tuple(feature.shape)}")
    if not flow.requires_grad and not flow.any():
        # grid_sample would round-trip through normalized coords and lose bits
        return feature.squeeze(0) if squeeze else feature
    dev, dt = feature.device, feature.dtype
    ys = torch.arange(h, device=dev, dtype=dt)
    xs = torch.arange(w, device=dev, dtype=dt)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    sx = xx.unsqueeze(0) + flow[:, 0]
    sy = yy.unsqueeze(0) + flow[:, 1]
    # normalize to [-1, 1]; guard the degenerate 1-pixel axis
    gx = 2.0 * sx / max(w - 1, 1) - 1.0
    gy = 2.0 * sy / max(h - 1, 1) - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(feature, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return out.squeeze(0) if squeeze else out


def _unfold_patches(feat, patch, stride):
    # (C, H, W) -> (L, C*patch*patch), L = h_q * w_q row-major
    c, h, w = feat.shape
    cols = F.unfold(feat.unsqueeze(0), kernel_size=patch, stride=stride)
    return cols[0].transpose(0, 1), ((h - patch) // stride + 1, (w - patch) // stride + 1)


def patch_match(lr_feat, ref_feat, patch=3, stride=1, tile=4096, eps=1e-8):
    """Exhaustive cosine-similarity matching of local patches.

    Returns (index_map, confidence): for each query (LR) patch position the
    flat index of the best-matching reference patch and its cosine
    similarity. Ties break to the lowest reference index; all-zero patches
    get an epsilon norm so they never beat a nonzero match.
    """
    if lr_feat.shape[0] != ref_feat.shape[0]:
        raise ValueError("feature channel counts differ")
    if min(lr_feat.shape[1:]) < patch or min(ref_feat.shape[1:]) < patch:
        raise ValueError(f"patch size {patch} exceeds feature extent")
    with torch.no_grad():
        q, q_grid = _unfold_patches(lr_feat, patch, stride)
        k, k_grid = _unfold_patches(ref_feat, patch, stride)
        q = q / q.norm(dim=1, keepdim=True).clamp_min(eps)
        k = k / k.norm(dim=1, keepdim=True).clamp_min(eps)
        n_k = k.shape[0]
        ar = torch.arange(n_k, device=q.device)
        idx_chunks, conf_chunks = [], []
        for start in range(0, q.shape[0], tile):
            s = q[start : start + tile] @ k.t()
            best = s.max(dim=1, keepdim=True).values
            # lowest index among ties
            cand = torch.where(s >= best, ar.expand_as(s), n_k)
            idx_chunks.append(cand.min(dim=1).values)
            conf_chunks.append(best[:, 0])
        index_map = torch.cat(idx_chunks).view(q_grid)
        confidence = torch.cat(conf_chunks).view(q_grid)
    return index_map, confidence


def index_warp(ref_feat, index_map, patch=3, stride=1):
    """Rearrange reference features by matched indices.

    Output position i receives the reference value at the center of the
    matched patch; output spatial dims equal the query grid dims.
    """
    c, h, w = ref_feat.shape
    k_grid_w = (w - patch) // stride + 1
    k_grid_h = (h - patch) // stride + 1
    flat = index_map.reshape(-1)
    assert int(flat.min()) >= 0 and int(flat.max()) < k_grid_h * k_grid_w, "index map out of range"
    ky = torch.div(flat, k_grid_w, rounding_mode="floor") * stride + patch // 2
    kx = (flat % k_grid_w) * stride + patch // 2
    vals = ref_feat[:, ky, kx]  # (C, L)
    return vals.view(c, *index_map.shape)


class OffsetMaskHead(nn.Module):
    """Small conv heads predicting per-tap offset corrections and gates."""

    def __init__(self, in_channels, taps=9):
        super().__init__()
        self.taps = taps
        self.offset = nn.Conv2d(in_channels, 2 * taps, 3, padding=1)
        self.mask = nn.Conv2d(in_channels, taps, 3, padding=1)
        # start from flow-only offsets and neutral gates
        nn.init.zeros_(self.offset.weight)
        nn.init.zeros_(self.offset.bias)
        nn.init.zeros_(self.mask.weight)
        nn.init.zeros_(self.mask.bias)


def compute_offsets_and_mask(guide_a, guide_b, flow, head, clamp=OFFSET_CLAMP):
    """Flow-guided offsets and modulation mask for deformable sampling.

    offsets = head.offset([guide_a, guide_b]) + flow broadcast to all taps,
    clamped; mask = sigmoid(head.mask([guide_a, guide_b])).
    """
    ga, squeeze = _as_batched(guide_a)
    gb, _ = _as_batched(guide_b)
    fl, _ = _as_batched(flow)
    if ga.shape[2:] != gb.shape[2:] or ga.shape[2:] != fl.shape[2:]:
        raise ValueError("guides and flow must share spatial dims")
    x = torch.cat([ga, gb], dim=1)
    off = head.offset(x) + fl.repeat(1, head.taps, 1, 1)
    off = off.clamp(-clamp, clamp)
    mask = torch.sigmoid(head.mask(x))
    if squeeze:
        return off.squeeze(0), mask.squeeze(0)
    return off, mask


def deformable_sample(feature, offsets, mask, weight, bias=None):
    """Modulated deformable 3x3 convolution with border-clamped sampling.

    Each tap samples `feature` bilinearly at (base grid + canonical tap
    offset + learned offset), is scaled by its gate, then the kernel
    weights are applied. Offsets are laid out (dx_0, dy_0, ..., dx_K, dy_K)
    channel-wise, taps in row-major kernel order.
    """
    feature, squeeze = _as_batched(feature)
    offsets, _ = _as_batched(offsets)
    mask, _ = _as_batched(mask)
    b, c_in, h, w = feature.shape
    c_out, c_in_w, kh, kw = weight.shape
    k = kh * kw
    if c_in_w != c_in:
        raise ValueError("kernel input channels do not match feature")
    if offsets.shape[1] != 2 * k or mask.shape[1] != k:
        raise ValueError("offset/mask channels do not match kernel taps")
    if offsets.shape[2:] != (h, w) or mask.shape[2:] != (h, w):
        raise ValueError("offset/mask spatial dims do not match feature")
    dev, dt = feature.device, feature.dtype
    ys = torch.arange(h, device=dev, dtype=dt)
    xs = torch.arange(w, device=dev, dtype=dt)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    sampled = []
    tap = 0
    for ty in range(kh):
        for tx in range(kw):
            dx = offsets[:, 2 * tap] + (tx - (kw - 1) / 2.0)
            dy = offsets[:, 2 * tap + 1] + (ty - (kh - 1) / 2.0)
            gx = 2.0 * (xx.unsqueeze(0) + dx) / max(w - 1, 1) - 1.0
            gy = 2.0 * (yy.unsqueeze(0) + dy) / max(h - 1, 1) - 1.0
            grid = torch.stack([gx, gy], dim=-1)
            samp = F.grid_sample(feature, grid, mode="bilinear", padding_mode="border", align_corners=True)
            sampled.append(samp * mask[:, tap : tap + 1])
            tap += 1
    stacked = torch.stack(sampled, dim=2)  # (B, C_in, K, H, W)
    out = torch.einsum("bikhw,oik->bohw", stacked, weight.reshape(c_out, c_in, k))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out.squeeze(0) if squeeze else out
