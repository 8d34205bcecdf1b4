"""End-to-end model: encoders, bidirectional dual-stream propagation,
direction fusion, and pixel-shuffle reconstruction.

Scheduling: the backward stream runs over the whole clip first, then the
forward stream, then per-frame fusion. Forward and backward directions own
separate cell parameters. The reconstruction adds a bicubically upsampled
copy of the LR frame as a global residual.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .blocks import resblock_stack
from .data import Clip
from .errors import ConfigError
from .flow import FlowProvider, estimate_flow
from .ref_cell import RefCell
from .sr_cell import SRCell
from .torchresample import resize_bicubic_t

CHECKPOINT_FORMAT = "refvsrpp-ckpt-v1"


@dataclass
class ModelConfig:
    channels: int = 64
    encoder_blocks: int = 2
    ref_fusion_blocks: int = 3
    sr_fusion_blocks: int = 5
    upsampler_blocks: int = 3
    embed_channels: int = 16
    scale: int = 4
    use_ref: bool = True
    use_ref_stream: bool = True
    use_sr_dcn: bool = True
    use_residual_prop: bool = True
    use_conf_prop: bool = False
    seed: int = 0

    def validate(self):
        if self.scale not in (2, 4):
            raise ConfigError(f"scale must be 2 or 4, got {self.scale}")
        if self.use_ref_stream and not self.use_ref:
            raise ConfigError("use_ref_stream requires use_ref")
        if self.use_residual_prop and not self.use_ref_stream:
            raise ConfigError("use_residual_prop requires use_ref_stream")
        if self.use_conf_prop and not self.use_ref:
            raise ConfigError("use_conf_prop requires use_ref")
        return self


# Table-style ablation rows: row id -> flag overrides
ABLATION_ROWS = {
    1: dict(use_ref=False, use_ref_stream=False, use_sr_dcn=False,
            use_residual_prop=False, use_conf_prop=False),
    2: dict(use_ref=True, use_ref_stream=False, use_sr_dcn=False,
            use_residual_prop=False, use_conf_prop=False),
    3: dict(use_ref=True, use_ref_stream=False, use_sr_dcn=False,
            use_residual_prop=False, use_conf_prop=True),
    4: dict(use_ref=True, use_ref_stream=False, use_sr_dcn=True,
            use_residual_prop=False, use_conf_prop=False),
    5: dict(use_ref=True, use_ref_stream=True, use_sr_dcn=False,
            use_residual_prop=False, use_conf_prop=False),
    6: dict(use_ref=True, use_ref_stream=True, use_sr_dcn=False,
            use_residual_prop=True, use_conf_prop=False),
    7: dict(use_ref=True, use_ref_stream=True, use_sr_dcn=True,
            use_residual_prop=True, use_conf_prop=False),
}


class Encoder(nn.Module):
    def __init__(self, channels, blocks):
        super().__init__()
        self.head = nn.Conv2d(3, channels, 3, padding=1)
        self.body = resblock_stack(channels, blocks)

    def forward(self, img):
        squeeze = img.dim() == 3
        if squeeze:
            img = img.unsqueeze(0)
        out = self.body(self.head(img))
        return out.squeeze(0) if squeeze else out


class Upsampler(nn.Module):
    """ResBlocks followed by x2 pixel-shuffle stages and a zero-init tail."""

    def __init__(self, channels, blocks, scale):
        super().__init__()
        self.body = resblock_stack(channels, blocks)
        stages = []
        for _ in range(int(math.log2(scale))):
            stages += [nn.Conv2d(channels, 4 * channels, 3, padding=1),
                       nn.PixelShuffle(2),
                       nn.LeakyReLU(0.1, inplace=True)]
        self.stages = nn.Sequential(*stages)
        self.tail = nn.Conv2d(channels, 3, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def forward(self, x):
        return self.tail(self.stages(self.body(x)))


class DualStreamVSR(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        c = config.channels
        self.lr_encoder = Encoder(c, config.encoder_blocks)
        if config.use_ref:
            self.ref_encoder = Encoder(c, config.encoder_blocks)
            self.ref_cell_fwd = RefCell(c, config.embed_channels, config.ref_fusion_blocks)
            self.ref_cell_bwd = RefCell(c, config.embed_channels, config.ref_fusion_blocks)
        self.sr_cell_fwd = SRCell(c, config.sr_fusion_blocks)
        self.sr_cell_bwd = SRCell(c, config.sr_fusion_blocks)
        self.fuse_dirs = nn.Conv2d(2 * c, c, 3, padding=1)
        self.upsampler = Upsampler(c, config.upsampler_blocks, config.scale)

    def encode_features(self, lr, ref=None):
        f_lr = self.lr_encoder(lr)
        f_ref = self.ref_encoder(ref) if (self.config.use_ref and ref is not None) else None
        return f_lr, f_ref

    def propagate_direction(self, lr, ref, flows, direction, f_lr_all=None, f_ref_all=None):
        """Run both streams over a clip in one direction.

        lr/ref: (T, 3, H, W); flows: (T, 2, H, W) where flows[t] maps the
        previous frame in traversal order into frame t (zero at the start).
        Returns a list of per-t SR states in clip order.
        """
        cfg = self.config
        t_len = lr.shape[0]
        if ref is not None and ref.shape[0] != t_len:
            raise ValueError("lr and ref clip lengths differ")
        order = range(t_len) if direction == "forward" else range(t_len - 1, -1, -1)
        ref_cell = None
        if cfg.use_ref:
            ref_cell = self.ref_cell_fwd if direction == "forward" else self.ref_cell_bwd
        sr_cell = self.sr_cell_fwd if direction == "forward" else self.sr_cell_bwd

        c = cfg.channels
        h, w = lr.shape[-2:]
        zeros = lr.new_zeros((c, h, w))
        h_ref_prop = zeros
        h_sr = zeros
        conf_prev = None
        states = [None] * t_len
        for t in order:
            f_lr = f_lr_all[t] if f_lr_all is not None else self.lr_encoder(lr[t])
            flow = flows[t]
            if cfg.use_ref:
                f_ref = f_ref_all[t] if f_ref_all is not None else self.ref_encoder(ref[t])
                h_prev = h_ref_prop if cfg.use_ref_stream else zeros
                h_full, h_ref_prop, conf_prev = ref_cell(
                    h_prev, f_ref, f_lr, flow, lr[t], ref[t],
                    residual=cfg.use_residual_prop,
                    conf_prev=conf_prev,
                    propagate_conf=cfg.use_conf_prop,
                )
                context = h_full
            else:
                context = f_lr
            h_sr = sr_cell(h_sr, context, flow, use_dcn=cfg.use_sr_dcn)
            states[t] = h_sr
        return states

    def fuse_and_upsample(self, h_fwd, h_bwd, lr_frame):
        if h_fwd.shape != h_bwd.shape:
            raise ValueError("direction states must share dims")
        fused = self.fuse_dirs(torch.cat([h_fwd, h_bwd]).unsqueeze(0)).squeeze(0)
        residual = self.upsampler(fused.unsqueeze(0)).squeeze(0)
        s = self.config.scale
        base = resize_bicubic_t(lr_frame, s * lr_frame.shape[-2], s * lr_frame.shape[-1])
        return residual + base

    def forward(self, lr, ref, flows_fwd, flows_bwd):
        """lr/ref: (T, 3, H, W); flows as in propagate_direction. Returns
        (T, 3, sH, sW), unclamped."""
        cfg = self.config
        f_lr_all = [self.lr_encoder(lr[t]) for t in range(lr.shape[0])]
        f_ref_all = (
            [self.ref_encoder(ref[t]) for t in range(ref.shape[0])]
            if cfg.use_ref else None
        )
        bwd = self.propagate_direction(lr, ref, flows_bwd, "backward", f_lr_all, f_ref_all)
        fwd = self.propagate_direction(lr, ref, flows_fwd, "forward", f_lr_all, f_ref_all)
        out = [self.fuse_and_upsample(fwd[t], bwd[t], lr[t]) for t in range(lr.shape[0])]
        return torch.stack(out)


def build_model(config):
    """Seed-deterministic model construction."""
    torch.manual_seed(config.seed)
    return DualStreamVSR(config)


def clip_to_tensor(clip, device=None, dtype=torch.float32):
    return torch.as_tensor(clip.frames, dtype=dtype, device=device).permute(0, 3, 1, 2).contiguous()


def tensor_to_clip(t):
    arr = t.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)
    return Clip(arr)


def compute_clip_flows(lr_clip, provider, device=None, dtype=torch.float32):
    """Per-direction flow stacks for a clip of numpy frames.

    flows_fwd[t] maps frame t-1 into t (zero at t=0); flows_bwd[t] maps
    frame t+1 into t (zero at t=T-1).
    """
    frames = lr_clip.frames if isinstance(lr_clip, Clip) else lr_clip
    t_len, h, w = frames.shape[0], frames.shape[1], frames.shape[2]
    fwd = np.zeros((t_len, h, w, 2), dtype=np.float32)
    bwd = np.zeros((t_len, h, w, 2), dtype=np.float32)
    for t in range(1, t_len):
        fwd[t] = estimate_flow(provider, frames[t - 1], frames[t])
    for t in range(t_len - 1):
        bwd[t] = estimate_flow(provider, frames[t + 1], frames[t])
    to_t = lambda a: torch.as_tensor(a, dtype=dtype, device=device).permute(0, 3, 1, 2).contiguous()
    return to_t(fwd), to_t(bwd)


def super_resolve(model, lr_clip, ref_clip, provider=None):
    """Full bidirectional pipeline on numpy clips; returns a clamped Clip."""
    if provider is None:
        provider = FlowProvider()
    if len(lr_clip) != len(ref_clip):
        raise ValueError("lr and ref clips must share length")
    device = next(model.parameters()).device
    lr = clip_to_tensor(lr_clip, device=device)
    ref = clip_to_tensor(ref_clip, device=device)
    flows_fwd, flows_bwd = compute_clip_flows(lr_clip, provider, device=device)
    model.eval()
    with torch.no_grad():
        out = model(lr, ref, flows_fwd, flows_bwd)
    return tensor_to_clip(out)


def model_config_to_dict(config):
    return asdict(config)


def model_config_from_dict(d):
    return ModelConfig(**d).validate()
