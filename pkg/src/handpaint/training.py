"""Training loops: multi-task stage-I denoiser and masked stage-II
outpainter, with mask dropout, pixel augmentations, JSONL logging, and a
divergence guard. Deterministic under a fixed seed (single-thread data
order)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import schedule as sched
from .conditioning import PoseCondition, render_heatmaps, render_skeleton
from .denoiser import (
    DenoiserConfig,
    HandDenoiser,
    load_checkpoint,
    save_checkpoint,
)
from .synthetic import BodySample, HandSample


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda_mask: float = 0.5
    mask_dropout_p: float = 0.5
    batch_size: int = 4
    learning_rate: float = 1e-3
    steps: int = 2000
    augment_rgb_shift: bool = True
    augment_brightness_contrast: bool = True
    heatmap_sigma: float = 2.0
    seed: int = 0
    use_ema: bool = False
    ema_decay: float = 0.999
    log_every: int = 25

    def __post_init__(self):
        if self.lambda_mask < 0:
            raise ValueError("lambda_mask must be >= 0")
        if not (0.0 <= self.mask_dropout_p <= 1.0):
            raise ValueError("mask_dropout_p must lie in [0, 1]")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be positive")


def combined_loss(eps: torch.Tensor, eps_hat: torch.Tensor,
                  mask_gt: torch.Tensor, mask_pred: torch.Tensor,
                  lambda_mask: float):
    """Noise MSE plus lambda * mask MSE; mask_pred is post-sigmoid.

    Returns (total, noise_term, mask_term)."""
    for name, t in (("eps", eps), ("eps_hat", eps_hat),
                    ("mask_gt", mask_gt), ("mask_pred", mask_pred)):
        if torch.isnan(t).any():
            raise ValueError(f"NaN values in {name}")
    noise_term = (eps - eps_hat).pow(2).mean()
    mask_term = (mask_gt - mask_pred).pow(2).mean()
    return noise_term + lambda_mask * mask_term, noise_term, mask_term


def masked_l2_loss(eps: torch.Tensor, eps_hat: torch.Tensor,
                   keep: torch.Tensor) -> torch.Tensor:
    """MSE restricted to keep > 0 pixels (broadcast over channels)."""
    keep = (keep > 0).to(eps.dtype)
    denom = keep.sum() * eps.shape[1]
    if keep.ndim == eps.ndim and keep.shape[1] == 1:
        denom = keep.sum() * eps.shape[1]
    if denom == 0:
        return torch.zeros((), dtype=eps.dtype)
    return ((eps - eps_hat).pow(2) * keep).sum() / denom


def apply_mask_dropout(cond: PoseCondition, p: float, rng) -> PoseCondition:
    """Zero the mask channel with probability p; heatmaps untouched."""
    if p > 0.0 and rng.random() < p:
        return PoseCondition(cond.heatmaps,
                             np.zeros_like(cond.mask_channel),
                             cond.clamped_keypoints)
    return cond


def augment(sample: HandSample, rng, rgb_shift=True,
            brightness_contrast=True, *, rgb=None, brightness=None,
            contrast=None) -> HandSample:
    """Pixel-value-only augmentation; keypoints and mask are unchanged.

    Explicit draws (rgb, brightness, contrast) override the rng and the
    toggles; outputs are clipped to [0, 1]."""
    if rgb is None:
        rgb = (rng.uniform(-0.08, 0.08, size=3) if rgb_shift
               else np.zeros(3))
    if brightness is None:
        brightness = rng.uniform(-0.12, 0.12) if brightness_contrast else 0.0
    if contrast is None:
        contrast = rng.uniform(0.85, 1.15) if brightness_contrast else 1.0
    img = sample.image
    if (np.all(np.asarray(rgb) == 0) and brightness == 0.0
            and contrast == 1.0):
        return sample
    out = (img - 0.5) * contrast + 0.5 + brightness
    out = out + np.asarray(rgb, dtype=np.float32)[:, None, None]
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return replace(sample, image=out)


def to_signed(img: np.ndarray) -> np.ndarray:
    """[0, 1] pixels -> [-1, 1] diffusion space."""
    return img * 2.0 - 1.0


def to_unsigned(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0)


class _Ema:
    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone()
                       for k, v in model.state_dict().items()}

    def update(self, model: torch.nn.Module):
        for k, v in model.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v.detach(),
                                                     alpha=1 - self.decay)
            else:
                self.shadow[k] = v.detach().clone()


class _DivergenceGuard:
    """Aborts when the loss exceeds 10x its initial value for 100
    consecutive steps."""

    def __init__(self, factor=10.0, patience=100):
        self.initial = None
        self.factor = factor
        self.patience = patience
        self.streak = 0

    def check(self, loss: float, step: int):
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * self.initial:
            self.streak += 1
            if self.streak >= self.patience:
                raise TrainingDiverged(
                    f"loss {loss:.4g} above {self.factor}x initial "
                    f"{self.initial:.4g} for {self.patience} steps "
                    f"(at step {step})")
        else:
            self.streak = 0


def _epoch_order(n: int, steps: int, batch_size: int, rng) -> np.ndarray:
    """Seeded shuffled index stream long enough for the whole run."""
    reps = (steps * batch_size) // n + 2
    chunks = []
    for _ in range(reps):
        perm = np.arange(n)
        rng.shuffle(perm)
        chunks.append(perm)
    return np.concatenate(chunks)


def _log_line(fh, record):
    if fh is not None:
        fh.write(json.dumps(record) + "\n")


def hand_condition(sample: HandSample, sigma: float) -> PoseCondition:
    size = sample.image.shape[1:]
    cond = render_heatmaps(sample.keypoints, size, sigma)
    return cond.with_mask(sample.mask)


def train_hand_generator(dataset, config: TrainConfig,
                         model_config: DenoiserConfig,
                         noise_schedule: sched.NoiseSchedule,
                         log_path=None, checkpoint_path=None,
                         resume_from=None):
    """Multi-task training of the stage-I denoiser.

    Returns (model, history) where history is the list of logged records.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    model = HandDenoiser(model_config)
    step_offset = 0
    if resume_from is not None:
        blob = load_checkpoint(resume_from, "hand_denoiser")
        model.load_state_dict(blob["state_dict"])
        step_offset = blob["step"]
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    ema = _Ema(model, config.ema_decay) if config.use_ema else None
    guard = _DivergenceGuard()
    gen = torch.Generator().manual_seed(config.seed + 1)

    order = _epoch_order(len(dataset), config.steps, config.batch_size, rng)
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(config.steps):
            idxs = order[step * config.batch_size:
                         (step + 1) * config.batch_size]
            imgs, conds, masks, styles = [], [], [], []
            for i in idxs:
                s = augment(dataset[i], rng, config.augment_rgb_shift,
                            config.augment_brightness_contrast)
                cond = apply_mask_dropout(
                    hand_condition(s, config.heatmap_sigma),
                    config.mask_dropout_p, rng)
                imgs.append(to_signed(s.image))
                conds.append(cond.channels())
                masks.append(s.mask)
                styles.append(s.style)
            x0 = torch.from_numpy(np.stack(imgs))
            cond_t = torch.from_numpy(np.stack(conds))
            mask_gt = torch.from_numpy(np.stack(masks))
            style_t = torch.tensor(styles, dtype=torch.long)
            t = torch.randint(1, noise_schedule.T + 1,
                              (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            xt = sched.forward_noise(x0, t.numpy(), eps, noise_schedule)

            out = model(xt, t, cond_t, style_t)
            total, noise_term, mask_term = combined_loss(
                eps, out.eps_hat, mask_gt, torch.sigmoid(out.mask_logits),
                config.lambda_mask)
            opt.zero_grad()
            total.backward()
            opt.step()
            if ema is not None:
                ema.update(model)

            guard.check(total.item(), step)
            record = {"step": step_offset + step + 1,
                      "loss_total": total.item(),
                      "loss_noise": noise_term.item(),
                      "loss_mask": mask_term.item()}
            history.append(record)
            if (step + 1) % config.log_every == 0 or step == 0:
                _log_line(fh, record)
    finally:
        if fh is not None:
            fh.close()

    model.eval()
    if ema is not None:
        model.load_state_dict(ema.shadow)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, model_config,
                        step_offset + config.steps, "hand_denoiser")
    return model, history


def eval_hand_loss(model, samples, config: TrainConfig,
                   noise_schedule: sched.NoiseSchedule, probe_seed=1234,
                   n_probes=8) -> float:
    """Combined loss on fixed (t, eps) probes; no dropout, no augment."""
    gen = torch.Generator().manual_seed(probe_seed)
    ts = np.linspace(1, noise_schedule.T, n_probes).astype(int)
    total = 0.0
    model.eval()
    with torch.no_grad():
        for s in samples:
            cond = hand_condition(s, config.heatmap_sigma)
            x0 = torch.from_numpy(to_signed(s.image))[None]
            cond_t = torch.from_numpy(cond.channels())[None]
            mask_gt = torch.from_numpy(s.mask)[None]
            for t in ts:
                eps = torch.randn(x0.shape, generator=gen)
                xt = sched.forward_noise(x0, int(t), eps, noise_schedule)
                out = model(xt, int(t), cond_t, s.style)
                loss, _, _ = combined_loss(
                    eps, out.eps_hat, mask_gt,
                    torch.sigmoid(out.mask_logits), config.lambda_mask)
                total += float(loss)
    return total / (len(samples) * len(ts))


def outpaint_condition(sample: BodySample, latent_factor: int = 1):
    """(skeleton raster, union hand mask) stage-II conditioning stack."""
    from .conditioning import downsize_to_latent
    size = sample.image.shape[1:]
    skel = render_skeleton(sample.skeleton, size)
    union = np.maximum(sample.hand_masks[0], sample.hand_masks[1])[None]
    if latent_factor > 1:
        skel = downsize_to_latent(skel, latent_factor)
        union = (downsize_to_latent(union, latent_factor) >= 0.5).astype(
            np.float32)
    return skel, union


def make_canvas_from_sample(sample: BodySample) -> np.ndarray:
    """Ground-truth canvas: hand pixels kept, neutral gray elsewhere."""
    union = np.maximum(sample.hand_masks[0], sample.hand_masks[1])
    return np.where(union[None] > 0, sample.image,
                    np.float32(0.5)).astype(np.float32)


def train_outpainter(dataset, config: TrainConfig, model_config,
                     noise_schedule: sched.NoiseSchedule,
                     log_path=None, checkpoint_path=None, resume_from=None):
    """Masked reconstruction training of the stage-II denoiser: the hand
    region of x_t is replaced by the clean canvas latent at every noising
    step, and the loss covers only the unmasked region."""
    from .outpaint import OutpainterModel

    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    model = OutpainterModel(model_config)
    step_offset = 0
    if resume_from is not None:
        blob = load_checkpoint(resume_from, "outpainter")
        model.load_state_dict(blob["state_dict"])
        step_offset = blob["step"]
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    guard = _DivergenceGuard()
    gen = torch.Generator().manual_seed(config.seed + 1)

    # conditioning is pose-static: cache per sample
    cache = []
    for s in dataset:
        skel, union = outpaint_condition(s)
        cache.append((to_signed(s.image), to_signed(make_canvas_from_sample(s)),
                      np.concatenate([skel, union], 0), union, s.style))

    order = _epoch_order(len(dataset), config.steps, config.batch_size, rng)
    history = []
    fh = open(log_path, "w") if log_path else None
    try:
        for step in range(config.steps):
            idxs = order[step * config.batch_size:
                         (step + 1) * config.batch_size]
            x0 = torch.from_numpy(np.stack([cache[i][0] for i in idxs]))
            xc = torch.from_numpy(np.stack([cache[i][1] for i in idxs]))
            cond = torch.from_numpy(np.stack([cache[i][2] for i in idxs]))
            keep = torch.from_numpy(
                1.0 - np.stack([cache[i][3] for i in idxs]))
            style_t = torch.tensor([cache[i][4] for i in idxs],
                                   dtype=torch.long)
            t = torch.randint(1, noise_schedule.T + 1, (x0.shape[0],),
                              generator=gen)
            eps = torch.randn(x0.shape, generator=gen)
            xt = sched.forward_noise(x0, t.numpy(), eps, noise_schedule)
            mask = 1.0 - keep
            xt = mask * xc + keep * xt   # per-step canvas blending

            eps_hat = model(xt, t, cond, style_t)
            loss = masked_l2_loss(eps, eps_hat, keep)
            opt.zero_grad()
            loss.backward()
            opt.step()

            guard.check(loss.item(), step)
            record = {"step": step_offset + step + 1,
                      "loss_total": loss.item(),
                      "loss_noise": loss.item(), "loss_mask": 0.0}
            history.append(record)
            if (step + 1) % config.log_every == 0 or step == 0:
                _log_line(fh, record)
    finally:
        if fh is not None:
            fh.close()

    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, model_config,
                        step_offset + config.steps, "outpainter")
    return model, history


def eval_outpaint_loss(model, samples, noise_schedule, probe_seed=1234,
                       n_probes=8) -> float:
    gen = torch.Generator().manual_seed(probe_seed)
    ts = np.linspace(1, noise_schedule.T, n_probes).astype(int)
    total = 0.0
    model.eval()
    with torch.no_grad():
        for s in samples:
            skel, union = outpaint_condition(s)
            x0 = torch.from_numpy(to_signed(s.image))[None]
            xc = torch.from_numpy(to_signed(make_canvas_from_sample(s)))[None]
            cond = torch.from_numpy(np.concatenate([skel, union], 0))[None]
            keep = torch.from_numpy(1.0 - union)[None]
            for t in ts:
                eps = torch.randn(x0.shape, generator=gen)
                xt = sched.forward_noise(x0, int(t), eps, noise_schedule)
                xt = (1 - keep) * xc + keep * xt
                eps_hat = model(xt, int(t), cond, s.style)
                total += float(masked_l2_loss(eps, eps_hat, keep))
    return total / (len(samples) * len(ts))
