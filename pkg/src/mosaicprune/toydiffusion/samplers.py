"""Forward noising and DDPM / DDIM reverse steps with optional classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..schedule import NoiseSchedule, sampler_timesteps


class SamplerError(ValueError):
    pass


def forward_noise(x0, t: int, epsilon, schedule: NoiseSchedule):
    """``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`` for a single scalar timestep."""
    if tuple(np.shape(x0)) != tuple(np.shape(epsilon)):
        raise ValueError(f"shape mismatch: {np.shape(x0)} vs {np.shape(epsilon)}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * epsilon


def forward_noise_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule):
    ab = torch.from_numpy(schedule.alpha_bars.copy())[t - 1].to(x0.dtype)
    ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


def predict_eps(model, x, t: int, labels, cfg_scale: float = 1.0):
    """Noise prediction, guided when ``cfg_scale != 1``.

    Guidance runs the model once on a doubled batch: conditional rows first,
    then the same latents with the null label.
    """
    B = x.shape[0]
    tt = torch.full((B,), int(t), dtype=torch.long)
    if cfg_scale == 1.0:
        return model(x, tt, labels)
    null = torch.full_like(labels, model.cfg.null_class)
    out = model(torch.cat([x, x]), torch.cat([tt, tt]), torch.cat([labels, null]))
    cond, uncond = out[:B], out[B:]
    return uncond + cfg_scale * (cond - uncond)


def ddpm_step(model, x_t, t: int, labels, cfg_scale: float, schedule: NoiseSchedule, z=None,
              generator: torch.Generator | None = None):
    """One ancestral step with sigma_t^2 = beta_t; no noise is added at t = 1."""
    if not 1 <= t <= schedule.T:
        raise SamplerError(f"timestep {t} outside 1..{schedule.T}")
    eps = predict_eps(model, x_t, t, labels, cfg_scale)
    beta = float(schedule.betas[t - 1])
    alpha = float(schedule.alphas[t - 1])
    ab = float(schedule.alpha_bars[t - 1])
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps) / math.sqrt(alpha)
    if t == 1:
        return mean
    if z is None:
        z = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + math.sqrt(beta) * z


def ddim_step(model, x_t, t: int, t_prev: int, labels, cfg_scale: float, schedule: NoiseSchedule):
    """Deterministic (eta = 0) jump from ``t`` to ``t_prev``; ``t_prev = 0`` means clean data."""
    if t_prev == t:
        return x_t
    if not (schedule.T >= t > t_prev >= 0):
        raise SamplerError(f"need T >= t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    eps = predict_eps(model, x_t, t, labels, cfg_scale)
    ab = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "ddim"
    steps: int | None = 20

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise SamplerError(f"unknown sampler {self.kind!r}")
        if self.steps is not None and self.steps < 1:
            raise SamplerError("steps must be >= 1")

    def timesteps(self, T: int) -> np.ndarray:
        if self.kind == "ddpm":
            return np.arange(T, 0, -1)
        return sampler_timesteps(T, self.steps)


@dataclass
class SampleRun:
    x0: torch.Tensor
    timesteps: list[int]
    trajectory: list[torch.Tensor] | None
    dispatch: list[tuple[int, int]]


def initial_noise(shape, seed: int, dtype=torch.float32) -> tuple[torch.Tensor, torch.Generator]:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=dtype), gen


def run_sampler(select: Callable[[int], object], schedule: NoiseSchedule, sampler: SamplerSpec,
                labels: torch.Tensor, seed: int, cfg_scale: float = 1.0, *, image_shape=(1, 8, 8),
                dtype=torch.float32, keep_trajectory: bool = False,
                stage_of: Callable[[int], int] | None = None) -> SampleRun:
    """Reverse sampling where ``select(t)`` picks the denoiser evaluated at ``t``."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    x, gen = initial_noise((len(labels), *image_shape), seed, dtype)
    ts = [int(t) for t in sampler.timesteps(schedule.T)]
    traj = [x.clone()] if keep_trajectory else None
    dispatch = []
    with torch.no_grad():
        for i, t in enumerate(ts):
            model = select(t)
            if stage_of is not None:
                dispatch.append((t, stage_of(t)))
            if sampler.kind == "ddpm":
                x = ddpm_step(model, x, t, labels, cfg_scale, schedule, generator=gen)
            else:
                t_prev = ts[i + 1] if i + 1 < len(ts) else 0
                x = ddim_step(model, x, t, t_prev, labels, cfg_scale, schedule)
            if keep_trajectory:
                traj.append(x.clone())
    return SampleRun(x, ts, traj, dispatch)


def sample(model, schedule: NoiseSchedule, sampler: SamplerSpec, labels, seed: int,
           cfg_scale: float = 1.0, **kw) -> SampleRun:
    cfg = model.cfg
    kw.setdefault("image_shape", (cfg.channels, cfg.image_size, cfg.image_size))
    kw.setdefault("dtype", next(model.parameters()).dtype)
    return run_sampler(lambda t: model, schedule, sampler, labels, seed, cfg_scale, **kw)


@dataclass
class EmpiricalCurve:
    timesteps: np.ndarray  # evaluation points, descending, ending with 0 (the final sample)
    mse: np.ndarray
    stderr: np.ndarray


def empirical_mse_curve(model, schedule: NoiseSchedule, sampler: SamplerSpec, n_traj: int, seed: int,
                        cfg_scale: float = 1.0) -> EmpiricalCurve:
    """Per-element squared distance of each intermediate latent to its own final sample."""
    labels = torch.arange(n_traj) % model.cfg.num_classes
    run = sample(model, schedule, sampler, labels, seed, cfg_scale, keep_trajectory=True)
    final = run.trajectory[-1].double()
    d = final[0].numel()
    per = np.stack([((x.double() - final) ** 2).reshape(n_traj, -1).sum(1).numpy() / d
                    for x in run.trajectory])
    ts = np.array(run.timesteps + [0])
    se = per.std(axis=1, ddof=1) / np.sqrt(n_traj) if n_traj > 1 else np.zeros(len(ts))
    return EmpiricalCurve(ts, per.mean(axis=1), se)
