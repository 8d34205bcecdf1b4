"""Differentiable bicubic resampling for torch tensors.

Uses the same separable weight matrices as the numpy frame resampler so
tensor-path and frame-path resampling agree to float precision. No output
clamping here; training losses need raw values.
"""

from __future__ import annotations

import torch

from .data import bicubic_weight_matrix

_CACHE = {}


def _weights(in_size, out_size, device, dtype):
    key = (in_size, out_size, device, dtype)
    if key not in _CACHE:
        w = bicubic_weight_matrix(in_size, out_size)
        _CACHE[key] = torch.as_tensor(w, device=device, dtype=dtype)
    return _CACHE[key]


def resize_bicubic_t(x, out_h, out_w):
    """Resample (C, H, W) or (B, C, H, W) tensors to (out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be positive")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    h, w = x.shape[-2:]
    wy = _weights(h, out_h, x.device, x.dtype)
    wx = _weights(w, out_w, x.device, x.dtype)
    out = torch.einsum("oh,bchw->bcow", wy, x)
    out = torch.einsum("ow,bchw->bcho", wx, out)
    return out.squeeze(0) if squeeze else out
