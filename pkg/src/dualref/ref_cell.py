"""Recurrent cell for the reference feature stream.

Per time step: warp the propagated reference state by inter-frame flow,
refine the warp with flow-guided deformable sampling, align the current
reference frame to the LR grid by patch matching, fuse both aligned
reference features with the current LR feature under confidence guidance,
and emit the state to propagate (optionally as a residual over the LR
feature so only high-frequency reference detail is carried forward).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .alignment import (
    OffsetMaskHead,
    backward_warp,
    compute_offsets_and_mask,
    deformable_sample,
    flow_to_tensor,
    index_warp,
    patch_match,
)
from .blocks import MatchEmbedder, resblock_stack
from .flow import estimate_flow


def confidence_gate(conf, feat, gate_head):
    """Lift a confidence map to feature channels and gate elementwise."""
    if conf.dim() == 2:
        conf = conf.unsqueeze(0)
    if conf.shape[-2:] != feat.shape[-2:]:
        raise ValueError("confidence and feature spatial dims differ")
    return gate_head(conf.unsqueeze(0)).squeeze(0) * feat


class RefCell(nn.Module):
    def __init__(self, channels, embed_channels=16, fusion_blocks=3, patch=3):
        super().__init__()
        self.channels = channels
        self.patch = patch
        self.offset_mask = OffsetMaskHead(2 * channels)
        self.deform = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.embedder = MatchEmbedder(embed_channels)
        self.conv_a = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.conv_conf = nn.Conv2d(1, channels, 3, padding=1)
        self.conv_b = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.fuse_in = nn.Conv2d(3 * channels, channels, 3, padding=1)
        self.fuse_blocks = resblock_stack(channels, fusion_blocks)

    def match(self, lr_img, ref_img):
        """Patch-match embedded frames on a replicate-padded grid.

        Padding by patch//2 makes the query/key grids coincide with the
        pixel grid, so matched flat indices address pixel positions
        directly.
        """
        p = self.patch // 2
        emb_lr = F.pad(self.embedder(lr_img).unsqueeze(0), (p, p, p, p), mode="replicate")[0]
        emb_ref = F.pad(self.embedder(ref_img).unsqueeze(0), (p, p, p, p), mode="replicate")[0]
        return patch_match(emb_lr, emb_ref, patch=self.patch)

    def forward(
        self,
        h_prev,
        f_ref,
        f_lr,
        flow,
        lr_img,
        ref_img,
        residual=True,
        conf_prev=None,
        propagate_conf=False,
    ):
        """One recurrence step.

        Returns (h_full, h_propagated, conf_out). conf_out is None unless
        confidence propagation (the heuristic ablation variant) is on, in
        which case the warped previous confidence is merged with the
        current matching confidence by elementwise max.
        """
        if h_prev.shape != f_lr.shape or f_ref.shape != f_lr.shape:
            raise ValueError("state and feature dims must match")
        h_breve = backward_warp(h_prev, flow)
        offsets, mask = compute_offsets_and_mask(f_lr, h_breve, flow, self.offset_mask)
        h_bar = deformable_sample(h_breve, offsets, mask, self.deform.weight)

        index_map, conf = self.match(lr_img, ref_img)
        p = self.patch // 2
        f_ref_pad = F.pad(f_ref.unsqueeze(0), (p, p, p, p), mode="replicate")[0]
        f_hat = index_warp(f_ref_pad, index_map, patch=self.patch)

        conf = conf.to(f_lr.dtype)
        conf_out = None
        if propagate_conf:
            if conf_prev is not None:
                warped_prev = backward_warp(conf_prev.unsqueeze(0), flow).squeeze(0)
                conf = torch.maximum(warped_prev, conf)
            conf_out = conf.detach()

        f_a = self.conv_a(torch.cat([f_lr, h_bar]).unsqueeze(0)).squeeze(0)
        f_b = confidence_gate(
            conf.detach(),
            self.conv_b(torch.cat([f_lr, f_hat]).unsqueeze(0)).squeeze(0),
            self.conv_conf,
        )
        h_full = self.fuse_blocks(
            self.fuse_in(torch.cat([f_a, f_b, f_lr]).unsqueeze(0))
        ).squeeze(0)
        h_prop = h_full - f_lr if residual else h_full
        return h_full, h_prop, conf_out


def ref_cell_step(
    cell,
    h_ref_prev,
    f_ref,
    f_lr,
    lr_prev,
    lr_cur,
    ref_cur,
    provider,
    residual=True,
):
    """Functional wrapper estimating the inter-frame flow from LR frames."""
    flow_np = estimate_flow(provider, lr_prev, lr_cur)
    flow = flow_to_tensor(flow_np, device=f_lr.device, dtype=f_lr.dtype)
    lr_t = frame_to_tensor(lr_cur, like=f_lr)
    ref_t = frame_to_tensor(ref_cur, like=f_lr)
    h_full, h_prop, _ = cell(
        h_ref_prev, f_ref, f_lr, flow, lr_t, ref_t, residual=residual
    )
    return h_full, h_prop


def frame_to_tensor(frame, like=None):
    """(H, W, C) array -> (C, H, W) tensor; passes torch tensors through."""
    if isinstance(frame, torch.Tensor):
        return frame
    t = torch.as_tensor(frame, dtype=like.dtype if like is not None else torch.float32)
    if like is not None:
        t = t.to(like.device)
    return t.permute(2, 0, 1).contiguous()
