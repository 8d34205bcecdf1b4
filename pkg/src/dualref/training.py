"""Two-stage optimization loop, checkpointing, and the ablation harness.

Everything is seed-deterministic: data order comes from a dedicated
numpy Generator, model init from torch.manual_seed, and checkpoints are
serialized through a plain pickle container (stable bytes for identical
state, unlike zip-based archives with timestamps).
"""

from __future__ import annotations

import json
import logging
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as dmod
from .data import load_triplet
from .errors import ConfigError, NumericError
from .flow import FlowProvider, estimate_flow
from .losses import LossWeights, PerceptualEmbedder, charbonnier, stage1_loss, stage2_loss
from .metrics import psnr
from .network import (
    ABLATION_ROWS,
    CHECKPOINT_FORMAT,
    ModelConfig,
    build_model,
    model_config_from_dict,
    super_resolve,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 200
    batch: int = 1
    patch_crop: int = 32  # LR-space crop size
    clip_len: int = 3
    lr: float = 1e-4
    lr_min_factor: float = 0.1  # cosine decay floor as a fraction of lr
    loss_mode: str = "full"  # full | pix
    seed: int = 0
    grad_clip: float = 10.0
    val_every: int = 0  # 0 disables periodic validation
    checkpoint_every: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    tele_magnification: int = 4

    def validate(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.steps < 0 or self.batch < 1 or self.clip_len < 1:
            raise ConfigError("invalid steps/batch/clip_len")
        if self.loss_mode not in ("full", "pix"):
            raise ConfigError(f"loss_mode must be full or pix, got {self.loss_mode!r}")
        return self


# ---------------------------------------------------------------------------
# checkpoints


def _state_to_numpy(state):
    return {k: v.detach().cpu().numpy() for k, v in state.items()}


def _optim_state_to_numpy(state):
    def conv(v):
        if isinstance(v, torch.Tensor):
            return ("tensor", v.detach().cpu().numpy())
        if isinstance(v, dict):
            return ("dict", {k: conv(x) for k, x in v.items()})
        if isinstance(v, list):
            return ("list", [conv(x) for x in v])
        return ("raw", v)

    return conv(state)


def _optim_state_from_numpy(packed):
    tag, v = packed
    if tag == "tensor":
        return torch.as_tensor(v)
    if tag == "dict":
        return {k: _optim_state_from_numpy(x) for k, x in v.items()}
    if tag == "list":
        return [_optim_state_from_numpy(x) for x in v]
    return v


def save_checkpoint(path, model, optimizer=None, step=0, rng_state=None, train_config=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.config),
        "params": _state_to_numpy(model.state_dict()),
        "optimizer": _optim_state_to_numpy(optimizer.state_dict()) if optimizer else None,
        "step": int(step),
        "rng": rng_state,
        "train_config": _train_config_dict(train_config) if train_config else None,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(pickle.dumps(payload, protocol=4))


def _train_config_dict(tc):
    d = asdict(tc)
    return d


def load_checkpoint(path):
    with open(path, "rb") as f:
        payload = pickle.loads(f.read())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(
            f"unsupported checkpoint format {payload.get('format')!r}, "
            f"expected {CHECKPOINT_FORMAT!r}"
        )
    return payload


def restore_model(payload, override_config=None):
    config = override_config or model_config_from_dict(payload["model_config"])
    model = build_model(config)
    state = {k: torch.as_tensor(v) for k, v in payload["params"].items()}
    model.load_state_dict(state)
    return model


def restore_optimizer(payload, model, lr):
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    if payload.get("optimizer") is not None:
        opt.load_state_dict(_optim_state_from_numpy(payload["optimizer"]))
    return opt


# ---------------------------------------------------------------------------
# data sampling


class TripletDataset:
    """Lazy manifest-backed triplet store with per-clip caching."""

    def __init__(self, manifest, split, scale=4, magnification=2):
        self.entries = manifest.split_entries(split)
        self.scale = scale
        self.magnification = magnification
        self._cache = {}

    def __len__(self):
        return len(self.entries)

    def clip_ids(self):
        return [e.clip_id for e in self.entries]

    def get(self, index):
        e = self.entries[index]
        if e.clip_id not in self._cache:
            self._cache[e.clip_id] = load_triplet(e.path, self.scale, self.magnification)
        return self._cache[e.clip_id]


def _ref_window(y, x, crop, h, w, magnification):
    """Reference-frame crop window mirroring an LR window.

    The reference frame shows the central 1/magnification FoV at
    magnification x the LR scale, so the LR window center maps to
    m*(center) - (m-1)/2 * extent; the window is clamped into the frame.
    """
    m = magnification
    cy = (y + crop / 2.0) * m - h * (m - 1) / 2.0
    cx = (x + crop / 2.0) * m - w * (m - 1) / 2.0
    ry = int(round(cy - crop / 2.0))
    rx = int(round(cx - crop / 2.0))
    ry = min(max(ry, 0), h - crop)
    rx = min(max(rx, 0), w - crop)
    return ry, rx


@dataclass
class Sample:
    lr: np.ndarray  # (T, h, w, 3)
    ref: np.ndarray
    gt: np.ndarray | None  # (T, s*h, s*w, 3), stage 1 only
    tele: np.ndarray | None  # (T, th, tw, 3), stage 2 only


def sample_crop(triplet, rng, crop, clip_len, stage=1, tele_magnification=4):
    """Random spatio-temporal crop with FoV-consistent LR/Ref/GT windows."""
    t_total = len(triplet.lr)
    t0 = int(rng.integers(0, max(1, t_total - clip_len + 1)))
    ts = slice(t0, t0 + min(clip_len, t_total))
    h, w = triplet.lr.height, triplet.lr.width
    crop = min(crop, h, w)
    y = int(rng.integers(0, h - crop + 1))
    x = int(rng.integers(0, w - crop + 1))
    ry, rx = _ref_window(y, x, crop, h, w, triplet.ref_magnification)
    s = triplet.scale
    lr = triplet.lr.frames[ts, y : y + crop, x : x + crop]
    ref = triplet.ref.frames[ts, ry : ry + crop, rx : rx + crop]
    if stage == 1:
        gt = triplet.gt.frames[ts, s * y : s * (y + crop), s * x : s * (x + crop)]
        return Sample(lr=lr, ref=ref, gt=gt, tele=None)
    # stage 2: LR is native resolution; the tele pseudo-GT is the centered
    # 1/tele_magnification crop of the LR window's upscaled footprint
    tele = _tele_of_window(lr, tele_magnification)
    return Sample(lr=lr, ref=ref, gt=None, tele=tele)


def _tele_of_window(lr_window, tele_magnification):
    t, h, w = lr_window.shape[:3]
    th, tw = max(1, h // tele_magnification), max(1, w // tele_magnification)
    y0, x0 = (h - th) // 2, (w - tw) // 2
    return lr_window[:, y0 : y0 + th, x0 : x0 + tw]


def make_stage2_views(triplet):
    """Native-resolution LR/Ref/Tele streams from a synthetic triplet.

    LR = the original full-FoV clip; Ref = the centered half-FoV crop
    resampled to the same pixel size; Tele = the centered quarter-FoV crop
    kept at native resolution.
    """
    gt = triplet.gt
    h, w = gt.height, gt.width
    ref_frames = np.stack(
        [
            dmod.resample_bicubic(dmod.center_crop(f, h // 2, w // 2), h, w)
            for f in gt.frames
        ]
    )
    tele_frames = np.stack([dmod.tele_crop(f) for f in gt.frames])
    return gt.frames, ref_frames, tele_frames


# ---------------------------------------------------------------------------
# forward/loss plumbing


def _clip_flows_np(frames, provider):
    t_len, h, w = frames.shape[:3]
    fwd = np.zeros((t_len, h, w, 2), dtype=np.float32)
    bwd = np.zeros((t_len, h, w, 2), dtype=np.float32)
    for t in range(1, t_len):
        fwd[t] = estimate_flow(provider, frames[t - 1], frames[t])
    for t in range(t_len - 1):
        bwd[t] = estimate_flow(provider, frames[t + 1], frames[t])
    return fwd, bwd


def _to_tchw(arr, device):
    return torch.as_tensor(arr, dtype=torch.float32, device=device).permute(0, 3, 1, 2).contiguous()


def forward_sample(model, lr_np, ref_np, provider, device="cpu"):
    lr = _to_tchw(lr_np, device)
    ref = _to_tchw(ref_np, device)
    fwd_np, bwd_np = _clip_flows_np(lr_np, provider)
    fwd = _to_tchw(fwd_np, device)
    bwd = _to_tchw(bwd_np, device)
    return model(lr, ref, fwd, bwd)


def sample_loss(model, sample, train_config, embedder, provider, device="cpu"):
    sr = forward_sample(model, sample.lr, sample.ref, provider, device)
    w = train_config.weights
    total = sr.sum() * 0.0
    t_len = sr.shape[0]
    for t in range(t_len):
        sr_t = sr[t]
        if train_config.stage == 1:
            gt_t = torch.as_tensor(sample.gt[t], device=device).permute(2, 0, 1)
            if train_config.loss_mode == "pix":
                total = total + charbonnier(sr_t, gt_t, w.charbonnier_eps)
            else:
                ref_t = torch.as_tensor(sample.ref[t], device=device).permute(2, 0, 1)
                # the wide reference lives on the LR grid; lift to SR size
                from .torchresample import resize_bicubic_t

                ref_up = resize_bicubic_t(ref_t, sr_t.shape[-2], sr_t.shape[-1])
                total = total + stage1_loss(sr_t, gt_t, ref_up, w, embedder)
        else:
            lr_t = torch.as_tensor(sample.lr[t], device=device).permute(2, 0, 1)
            tele_t = torch.as_tensor(sample.tele[t], device=device).permute(2, 0, 1)
            if train_config.loss_mode == "pix":
                from .torchresample import resize_bicubic_t

                down = resize_bicubic_t(sr_t, lr_t.shape[-2], lr_t.shape[-1])
                total = total + charbonnier(down, lr_t, w.charbonnier_eps)
            else:
                total = total + stage2_loss(
                    sr_t, lr_t, tele_t, w, embedder,
                    tele_magnification=train_config.tele_magnification,
                )
    return total / t_len


# ---------------------------------------------------------------------------
# training loops


def _cosine_lr(base, floor_factor, step, total):
    if total <= 0:
        return base
    floor = base * floor_factor
    return floor + 0.5 * (base - floor) * (1 + np.cos(np.pi * min(step, total) / total))


def validate_psnr(model, dataset, provider, max_clips=2):
    """Mean full-frame PSNR of super-resolved val clips against GT."""
    if len(dataset) == 0:
        return float("nan")
    vals = []
    for i in range(min(max_clips, len(dataset))):
        trip = dataset.get(i)
        sr = super_resolve(model, trip.lr, trip.ref, provider)
        vals.append(
            np.mean([psnr(sr.frames[t], trip.gt.frames[t]) for t in range(len(sr))])
        )
    return float(np.mean(vals))


def train_stage1(manifest, model_config, train_config, workdir,
                 provider=None, init_payload=None):
    return _train(manifest, model_config, train_config, workdir, provider, init_payload)


def train_stage2(checkpoint_path, manifest, train_config, workdir, provider=None):
    if train_config.stage != 2:
        raise ConfigError("train_stage2 requires stage=2 config")
    payload = load_checkpoint(checkpoint_path)
    if payload["step"] == 0 and payload.get("optimizer") is None:
        raise ConfigError("stage 2 requires a trained stage-1 checkpoint")
    model_config = model_config_from_dict(payload["model_config"])
    return _train(manifest, model_config, train_config, workdir, provider, payload)


def _train(manifest, model_config, train_config, workdir, provider, init_payload):
    train_config.validate()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    provider = provider or FlowProvider()
    dataset = TripletDataset(manifest, "train", scale=model_config.scale)
    if len(dataset) == 0:
        raise ConfigError("manifest has no train split entries")
    val_set = TripletDataset(manifest, "val", scale=model_config.scale)

    torch.manual_seed(train_config.seed)
    if init_payload is not None:
        model = restore_model(init_payload, override_config=model_config)
    else:
        model = build_model(model_config)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    embedder = PerceptualEmbedder(seed=train_config.seed)
    rng = np.random.default_rng(train_config.seed)

    metrics_path = workdir / "metrics.jsonl"
    metrics_f = open(metrics_path, "a")
    stage2_cache = {}
    try:
        for step in range(train_config.steps):
            for g in optimizer.param_groups:
                g["lr"] = _cosine_lr(
                    train_config.lr, train_config.lr_min_factor, step, train_config.steps
                )
            optimizer.zero_grad()
            batch_loss = 0.0
            for _ in range(train_config.batch):
                idx = int(rng.integers(0, len(dataset)))
                trip = dataset.get(idx)
                if train_config.stage == 2:
                    trip = _stage2_triplet(trip, idx, stage2_cache)
                sample = sample_crop(
                    trip, rng, train_config.patch_crop, train_config.clip_len,
                    stage=train_config.stage,
                    tele_magnification=train_config.tele_magnification,
                )
                loss = sample_loss(model, sample, train_config, embedder, provider)
                (loss / train_config.batch).backward()
                batch_loss += float(loss.detach()) / train_config.batch
            if not np.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite loss at step {step} (clip index {idx})"
                )
            if train_config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip)
            optimizer.step()

            rec = {"step": step, "loss": batch_loss}
            if train_config.val_every and (step + 1) % train_config.val_every == 0:
                model.eval()
                rec["psnr_val"] = validate_psnr(model, val_set, provider)
                model.train()
            metrics_f.write(json.dumps(rec) + "\n")
            metrics_f.flush()
            if (
                train_config.checkpoint_every
                and (step + 1) % train_config.checkpoint_every == 0
            ):
                save_checkpoint(
                    workdir / f"ckpt_{step + 1:06d}.pkl", model, optimizer,
                    step + 1, _rng_state(rng), train_config,
                )
    finally:
        metrics_f.close()

    ckpt_path = workdir / f"ckpt_stage{train_config.stage}.pkl"
    save_checkpoint(ckpt_path, model, optimizer, train_config.steps,
                    _rng_state(rng), train_config)
    return ckpt_path, model


def _rng_state(rng):
    return json.dumps(rng.bit_generator.state)


def _stage2_triplet(triplet, idx, cache):
    """Wrap a triplet so crops come from native-resolution streams."""
    if idx not in cache:
        lr_f, ref_f, tele_f = make_stage2_views(triplet)
        cache[idx] = dmod.TripletSample(
            lr=dmod.Clip(lr_f),
            ref=dmod.Clip(ref_f),
            gt=dmod.Clip(np.repeat(np.repeat(lr_f, triplet.scale, axis=1), triplet.scale, axis=2)),
            scale=triplet.scale,
            ref_magnification=triplet.ref_magnification,
        )
    return cache[idx]


# ---------------------------------------------------------------------------
# ablation harness


def run_ablation(manifest, base_config, rows, train_config, workdir, provider=None):
    """Train each flag variant with identical seed/budget and report val PSNR."""
    provider = provider or FlowProvider()
    results = []
    for row in rows:
        if row not in ABLATION_ROWS:
            raise ConfigError(f"unknown ablation row {row}; valid: {sorted(ABLATION_ROWS)}")
        cfg = ModelConfig(**{**asdict(base_config), **ABLATION_ROWS[row]}).validate()
        row_dir = Path(workdir) / f"row{row}"
        _, model = _train(manifest, cfg, train_config, row_dir, provider, None)
        model.eval()
        val_set = TripletDataset(manifest, "val", scale=cfg.scale)
        score = validate_psnr(model, val_set, provider, max_clips=len(val_set) or 1)
        results.append({"row": row, **ABLATION_ROWS[row], "psnr": score})
        log.info("ablation row %d: %.3f dB", row, score)
    return results


def ablation_table_text(results):
    cols = ["row", "use_ref", "use_conf_prop", "use_sr_dcn", "use_ref_stream",
            "use_residual_prop", "psnr"]
    header = ("No.  w/ Ref  Conf.  SR stream  Ref stream  Res   PSNR")
    lines = [header]
    for r in results:
        mark = lambda b: "x" if b else " "
        lines.append(
            f"{r['row']:<4} {mark(r['use_ref']):^6} {mark(r['use_conf_prop']):^5} "
            f"{mark(r['use_sr_dcn']):^9} {mark(r['use_ref_stream']):^10} "
            f"{mark(r['use_residual_prop']):^4} {r['psnr']:6.2f}"
        )
    return "\n".join(lines) + "\n"
