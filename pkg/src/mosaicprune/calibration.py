"""Stage-targeted calibration data and per-layer Hessian capture."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .pruner import DEFAULT_DAMPING, HessianAccumulator
from .schedule import NoiseSchedule
from .toydiffusion.data import BlobDataset
from .toydiffusion.model import Denoiser, prunable_layers

LayerId = tuple[int, str]
LayerHessianSet = dict[LayerId, HessianAccumulator]


class CaptureError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibrationItem:
    """A noised latent at a stage timestep.

    With ``cfg_duplicated`` the item stands for two forward rows sharing
    ``x_t`` and ``t``: one with ``label`` and one with the null label.
    """

    x_t: np.ndarray
    t: int
    label: int
    cfg_duplicated: bool = False
    sample_id: int = -1

    @property
    def n_rows(self) -> int:
        return 2 if self.cfg_duplicated else 1


def build_calibration(dataset: BlobDataset, stage_range: Sequence[int], schedule: NoiseSchedule, n: int,
                      cfg_enabled: bool = False, seed: int = 0) -> list[CalibrationItem]:
    """Draw ``n`` dataset samples, noise each at a uniform timestep from ``stage_range``."""
    if len(dataset) == 0:
        raise ValueError("calibration dataset is empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    ts = np.asarray(list(stage_range), dtype=np.int64)
    if ts.size == 0:
        raise ValueError("stage range is empty")
    if ts.min() < 1 or ts.max() > schedule.T:
        raise ValueError(f"stage range must lie inside 1..{schedule.T}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(dataset), size=n)
    t = ts[rng.integers(0, ts.size, size=n)]
    x0 = dataset.images[idx].astype(np.float64)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bars[t - 1].reshape(-1, *([1] * (x0.ndim - 1)))
    xt = (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(np.float32)
    return [CalibrationItem(xt[i], int(t[i]), int(dataset.labels[idx[i]]), cfg_enabled, int(idx[i]))
            for i in range(n)]


def forward_rows(items: Sequence[CalibrationItem], null_class: int):
    """Stack items into model inputs, expanding guidance duplicates."""
    xs, ts, ys = [], [], []
    for it in items:
        xs.append(it.x_t)
        ts.append(it.t)
        ys.append(it.label)
        if it.cfg_duplicated:
            xs.append(it.x_t)
            ts.append(it.t)
            ys.append(null_class)
    return (torch.from_numpy(np.stack(xs)), torch.as_tensor(ts, dtype=torch.long),
            torch.as_tensor(ys, dtype=torch.long))


def capture_hessians(model: Denoiser, items: Sequence[CalibrationItem], batch_size: int = 256,
                     damping: float = DEFAULT_DAMPING) -> LayerHessianSet:
    """Run ``items`` through ``model`` and accumulate each prunable layer's input Gram matrix.

    Every token of every forward row contributes one Hessian row.
    """
    layers = dict(prunable_layers(model))
    accs = {lid: HessianAccumulator(mod.in_features, damping) for lid, mod in layers.items()}
    dtype = next(model.parameters()).dtype

    def hook_for(lid):
        def hook(_mod, inputs):
            x = inputs[0].detach().reshape(-1, inputs[0].shape[-1]).double()
            if not torch.isfinite(x).all():
                raise CaptureError(f"non-finite activations entering layer {lid}")
            accs[lid].accumulate(x.numpy())
        return hook

    handles = [mod.register_forward_pre_hook(hook_for(lid)) for lid, mod in layers.items()]
    try:
        with torch.no_grad():
            for i in range(0, len(items), batch_size):
                x, t, y = forward_rows(items[i:i + batch_size], model.cfg.null_class)
                model(x.to(dtype), t, y)
    finally:
        for h in handles:
            h.remove()
    return accs


def write_manifest(path, items: Sequence[CalibrationItem]) -> None:
    with open(Path(path), "w") as fh:
        fh.write("sample_id,t,label,cfg\n")
        for it in items:
            fh.write(f"{it.sample_id},{it.t},{it.label},{int(it.cfg_duplicated)}\n")
