from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..schedule import NoiseSchedule
from .data import BlobDataset
from .model import Denoiser
from .samplers import forward_noise_batch

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 2e-3
    weight_decay: float = 0.0
    label_dropout: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    max_steps: int | None = None


@dataclass
class LossLog:
    epoch_losses: list[float]

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mean_loss"])
            for i, v in enumerate(self.epoch_losses):
                w.writerow([i, repr(float(v))])


def diffusion_loss(model: Denoiser, x0: torch.Tensor, labels: torch.Tensor, schedule: NoiseSchedule,
                   gen: torch.Generator, t: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between drawn noise and predicted noise (per element)."""
    B = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (B,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    xt = forward_noise_batch(x0, t, eps, schedule)
    return torch.mean((eps - model(xt, t, labels)) ** 2)


def train(model: Denoiser, dataset: BlobDataset, schedule: NoiseSchedule,
          config: TrainConfig = TrainConfig()) -> tuple[Denoiser, LossLog]:
    """Minibatch Adam on the noise-prediction loss with uniform timesteps.

    A fraction ``label_dropout`` of labels is swapped for the null class so the
    model also learns the unconditional prediction used by guidance.
    """
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    images = torch.from_numpy(dataset.images)
    labels = torch.from_numpy(dataset.labels)
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / max(total, 1))))

    losses = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        if step >= total:
            break
        perm = torch.randperm(n, generator=gen)
        running = []
        for i in range(steps_per_epoch):
            if step >= total:
                break
            idx = perm[i * config.batch_size:(i + 1) * config.batch_size]
            y = labels[idx].clone()
            drop = torch.rand(len(idx), generator=gen) < config.label_dropout
            y[drop] = model.cfg.null_class
            loss = diffusion_loss(model, images[idx], y, schedule, gen)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            running.append(loss.item())
            step += 1
        losses.append(float(np.mean(running)))
        log.info("epoch %d  mean loss %.5f", epoch, losses[-1])
    model.eval()
    return model, LossLog(losses)


@torch.no_grad()
def heldout_loss(model: Denoiser, dataset: BlobDataset, schedule: NoiseSchedule, seed: int,
                 t_range: range | None = None, batch_size: int = 512) -> float:
    """Noise-prediction loss on ``dataset`` with timesteps drawn uniformly from ``t_range``."""
    gen = torch.Generator().manual_seed(seed)
    images = torch.from_numpy(dataset.images).to(next(model.parameters()).dtype)
    labels = torch.from_numpy(dataset.labels)
    lo, hi = (1, schedule.T) if t_range is None else (t_range.start, t_range.stop - 1)
    total, count = 0.0, 0
    for i in range(0, len(dataset), batch_size):
        x0 = images[i:i + batch_size]
        t = torch.randint(lo, hi + 1, (x0.shape[0],), generator=gen)
        total += diffusion_loss(model, x0, labels[i:i + batch_size], schedule, gen, t=t).item() * x0.shape[0]
        count += x0.shape[0]
    return total / count
