"""Recurrent cell for the SR feature stream.

Per time step: warp the propagated SR state by inter-frame flow, refine
with deformable sampling whose offsets are guided by the fused reference
feature, then fuse the refined state with that reference feature through a
residual block stack ending in a residual skip.

Note the fusion consumes the deformable-refined state in both the block
input and the skip; fusing the flow-warped state instead would discard the
refinement entirely.
"""

from __future__ import annotations

import torch
from torch import nn

from .alignment import (
    OffsetMaskHead,
    backward_warp,
    compute_offsets_and_mask,
    deformable_sample,
)
from .blocks import resblock_stack


class SRCell(nn.Module):
    def __init__(self, channels, fusion_blocks=5):
        super().__init__()
        self.channels = channels
        self.offset_mask = OffsetMaskHead(2 * channels)
        self.deform = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.fuse_in = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.fuse_blocks = resblock_stack(channels, fusion_blocks)
        self.fuse_out = nn.Conv2d(channels, channels, 3, padding=1)
        # zero-init tail so the cell starts as pure alignment
        nn.init.zeros_(self.fuse_out.weight)
        nn.init.zeros_(self.fuse_out.bias)

    def forward(self, h_prev, context, flow, use_dcn=True):
        """`context` is the fused reference feature (or the LR feature when
        the reference path is disabled)."""
        if h_prev.shape != context.shape:
            raise ValueError("state and context dims must match")
        h_breve = backward_warp(h_prev, flow)
        if use_dcn:
            offsets, mask = compute_offsets_and_mask(
                context, h_breve, flow, self.offset_mask
            )
            h_bar = deformable_sample(h_breve, offsets, mask, self.deform.weight)
        else:
            h_bar = h_breve
        fused = self.fuse_out(
            self.fuse_blocks(
                self.fuse_in(torch.cat([context, h_bar]).unsqueeze(0))
            )
        ).squeeze(0)
        return fused + h_bar


def sr_cell_step(cell, h_sr_prev, h_ref_full, f_lr, flow, use_dcn=True):
    """Functional surface of one SR-stream step.

    `f_lr` enters the fusion through the `h_ref_full` slot when the
    reference path is disabled upstream; it is accepted here for interface
    symmetry with the reference cell.
    """
    del f_lr
    return cell(h_sr_prev, h_ref_full, flow, use_dcn=use_dcn)
