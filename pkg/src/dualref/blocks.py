"""Shared building blocks for the recurrent cells and the reconstruction head."""

from __future__ import annotations

import torch.nn.functional as F
from torch import nn


class ResBlock(nn.Module):
    """Plain conv-relu-conv residual block, no normalization."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


def resblock_stack(channels, count):
    return nn.Sequential(*[ResBlock(channels) for _ in range(count)])


class MatchEmbedder(nn.Module):
    """Small shared embedder turning RGB frames into matchable features."""

    def __init__(self, channels=16):
        super().__init__()
        self.conv1 = nn.Conv2d(3, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, img):
        # img: (3, H, W) or (B, 3, H, W)
        squeeze = img.dim() == 3
        if squeeze:
            img = img.unsqueeze(0)
        out = self.conv2(F.relu(self.conv1(img)))
        return out.squeeze(0) if squeeze else out
