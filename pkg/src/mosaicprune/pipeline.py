"""Divide, prune and conquer: stage plans, per-stage sub-networks, mosaic sampling, evaluation."""

from __future__ import annotations

import copy
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .calibration import LayerHessianSet, build_calibration, capture_hessians
from .pruner import DEFAULT_DAMPING, BlockPruneReport, n_pruned_groups, prune_attention_block, prune_mlp_block
from .schedule import NoiseSchedule, PowerAssumption, score_curve
from .toydiffusion.checkpoint import Checkpoint
from .toydiffusion.data import BlobDataset
from .toydiffusion.model import Denoiser
from .toydiffusion.samplers import SampleRun, SamplerSpec, run_sampler
from .toydiffusion.train import heldout_loss
from .trajectory import StagePlan, allocate_sparsity, divide_stages

log = logging.getLogger(__name__)


@dataclass
class MosaicModel:
    dense: Denoiser
    subnets: list[Denoiser]
    plan: StagePlan
    reports: list[dict] = field(default_factory=lambda: [{}, {}, {}])

    def model_for(self, t: int) -> Denoiser:
        return self.subnets[self.plan.stage_of(t)]

    def save(self, out_dir, meta: dict | None = None) -> list[Path]:
        """Write ``plan.txt`` and ``stage{1,2,3}.ckpt``; ``meta`` is copied into every header."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.plan.save(out / "plan.txt")
        paths = []
        for i, net in enumerate(self.subnets):
            p = out / f"stage{i + 1}.ckpt"
            Checkpoint.from_model(net, meta).save(p)
            paths.append(p)
        return paths

    @classmethod
    def load(cls, path, dense: Denoiser | None = None) -> "MosaicModel":
        """Load a mosaic directory, or treat a single checkpoint as a one-network mosaic."""
        path = Path(path)
        if path.is_dir():
            plan = StagePlan.load(path / "plan.txt")
            subnets = [Checkpoint.load(path / f"stage{i + 1}.ckpt").to_model() for i in range(3)]
        else:
            net = Checkpoint.load(path).to_model()
            plan = StagePlan(dividers=(666, 333), horizon=1000)
            subnets = [net, net, net]
        return cls(dense if dense is not None else subnets[0], subnets, plan)


def run_divide(schedule: NoiseSchedule, lam: float = 0.01, M: float = 0.55,
               powers: PowerAssumption = PowerAssumption(), target_aggregate: float = 0.3,
               weighting: str = "step", steps: int | None = 20) -> StagePlan:
    curve = score_curve(schedule, lam, powers)
    d1, d2 = divide_stages(curve, M)
    plan = StagePlan(dividers=(d1, d2), horizon=schedule.T, M=M, lam=lam)
    return allocate_sparsity(plan, curve, target_aggregate, weighting, steps)


def stage_seed(seed: int, stage: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(stage)]).generate_state(1)[0])


def stage_hessians(model: Denoiser, plan: StagePlan, dataset: BlobDataset, schedule: NoiseSchedule,
                   n_calib: int, cfg_enabled: bool, seed: int, stages=(0, 1, 2),
                   damping: float = DEFAULT_DAMPING) -> dict[int, LayerHessianSet]:
    """Hessians of every prunable layer, captured separately on each stage's calibration set."""
    out = {}
    for i in stages:
        items = build_calibration(dataset, plan.stage_ranges()[i], schedule, n_calib, cfg_enabled,
                                  stage_seed(seed, i))
        out[i] = capture_hessians(model, items, damping=damping)
    return out


def prune_subnet(dense: Denoiser, hessians: LayerHessianSet, sparsity: float,
                 damping: float | None = None) -> tuple[Denoiser, dict]:
    net = copy.deepcopy(dense)
    reports: dict[tuple[int, str], BlockPruneReport] = {}
    if sparsity == 0:
        return net, reports
    for i, blk in enumerate(net.blocks):
        reports[(i, "attn_out_proj")] = prune_attention_block(blk.attn, hessians[(i, "attn_out_proj")],
                                                              sparsity, damping)
        reports[(i, "mlp_down_proj")] = prune_mlp_block(blk.mlp, hessians[(i, "mlp_down_proj")],
                                                        sparsity, damping)
    return net, reports


def run_prune(model: Denoiser, plan: StagePlan, dataset: BlobDataset, schedule: NoiseSchedule,
              n_calib: int = 1024, cfg_enabled: bool = False, seed: int = 0,
              hessians: dict[int, LayerHessianSet] | None = None, workers: int = 1,
              damping: float | None = None) -> MosaicModel:
    """Build one pruned sub-network per stage; the dense model is never modified.

    Stages with zero sparsity get an untouched copy of the dense weights and
    skip calibration. Pass ``hessians`` to reuse captures across plans that
    share dividers.
    """
    todo = [i for i in range(3) if plan.sparsities[i] > 0]
    if hessians is None:
        hessians = {}
    missing = [i for i in todo if i not in hessians]
    if missing:
        hessians.update(stage_hessians(model, plan, dataset, schedule, n_calib, cfg_enabled, seed, missing))

    def job(i):
        if plan.sparsities[i] == 0:
            return copy.deepcopy(model), {}
        return prune_subnet(model, hessians[i], plan.sparsities[i], damping)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(job, range(3)))
    else:
        results = [job(i) for i in range(3)]
    return MosaicModel(model, [r[0] for r in results], plan, [r[1] for r in results])


def mosaic_sample(mosaic: MosaicModel, schedule: NoiseSchedule, sampler: SamplerSpec, labels, seed: int,
                  cfg_scale: float = 1.0) -> SampleRun:
    """Sample while routing each denoiser call to the sub-network of the stage containing t."""
    cfg = mosaic.dense.cfg
    return run_sampler(mosaic.model_for, schedule, sampler, labels, seed, cfg_scale,
                       image_shape=(cfg.channels, cfg.image_size, cfg.image_size),
                       dtype=next(mosaic.dense.parameters()).dtype, stage_of=mosaic.plan.stage_of)


def dense_sample(model: Denoiser, schedule: NoiseSchedule, sampler: SamplerSpec, labels, seed: int,
                 cfg_scale: float = 1.0) -> SampleRun:
    cfg = model.cfg
    return run_sampler(lambda t: model, schedule, sampler, labels, seed, cfg_scale,
                       image_shape=(cfg.channels, cfg.image_size, cfg.image_size),
                       dtype=next(model.parameters()).dtype)


# --- MAC accounting -----------------------------------------------------------

def kept_groups(model: Denoiser) -> list[tuple[int, int]]:
    """Per block: (surviving heads, surviving MLP neurons), read from zero columns."""
    out = []
    dh = model.cfg.head_dim
    for blk in model.blocks:
        W = blk.attn.proj.weight.detach()
        heads = sum(int(torch.any(W[:, g * dh:(g + 1) * dh] != 0)) for g in range(blk.attn.n_heads))
        neurons = int(torch.any(blk.mlp.fc2.weight.detach() != 0, dim=0).sum())
        out.append((heads, neurons))
    return out


def forward_macs(model: Denoiser) -> int:
    """Multiply-accumulates of one single-sample forward pass.

    Counts matmuls only (linear layers and the two attention products);
    norms, activations, softmax, biases and embedding lookups are free.
    """
    c = model.cfg
    N, d, P, dh = c.tokens, c.d_model, c.patch_dim, c.head_dim
    total = N * P * d + c.freq_dim * d + d * d + N * d * P
    for heads, neurons in kept_groups(model):
        total += d * d                             # per-block conditioning projection
        total += N * d * 3 * heads * dh            # q, k, v
        total += 2 * heads * N * N * dh            # scores and weighted values
        total += N * heads * dh * d                # output projection
        total += 2 * N * d * neurons               # MLP up and down
    return total


def mac_count(obj, steps: int | None = 20, horizon: int | None = None, cfg: bool = False) -> int:
    """Total MACs of one sampling run for a single image.

    For a mosaic each step is charged to the sub-network of its stage.
    Guidance doubles every forward pass.
    """
    from .schedule import sampler_timesteps

    mult = 2 if cfg else 1
    if isinstance(obj, MosaicModel):
        per = [forward_macs(n) for n in obj.subnets]
        ts = sampler_timesteps(obj.plan.horizon, steps)
        return mult * sum(per[obj.plan.stage_of(int(t))] for t in ts)
    n_steps = len(sampler_timesteps(horizon or 1000, steps))
    return mult * forward_macs(obj) * n_steps


def realized_sparsity(model: Denoiser) -> tuple[float, float]:
    """Fraction of pruned heads and of pruned MLP neurons over all blocks."""
    c = model.cfg
    kept = kept_groups(model)
    heads = 1 - sum(k[0] for k in kept) / (c.n_heads * c.depth)
    neurons = 1 - sum(k[1] for k in kept) / (c.mlp_hidden * c.depth)
    return heads, neurons


def expected_groups(model: Denoiser, sparsity: float) -> tuple[int, int]:
    c = model.cfg
    return (c.n_heads - n_pruned_groups(sparsity, c.n_heads),
            c.mlp_hidden - n_pruned_groups(sparsity, c.mlp_hidden))


# --- evaluation -------------------------------------------------------------------

@dataclass
class EvalReport:
    name: str
    divergence: float
    divergence_per_sample: np.ndarray
    stage_losses: tuple[float, float, float]
    macs: int
    dense_macs: int
    sparsities: tuple[float, float, float]
    realized: list[tuple[float, float]]

    def row(self) -> dict:
        return {
            "variant": self.name,
            "divergence": repr(float(self.divergence)),
            "loss_stage1": repr(float(self.stage_losses[0])),
            "loss_stage2": repr(float(self.stage_losses[1])),
            "loss_stage3": repr(float(self.stage_losses[2])),
            "macs": str(self.macs),
            "dense_macs": str(self.dense_macs),
            "s1": repr(self.sparsities[0]),
            "s2": repr(self.sparsities[1]),
            "s3": repr(self.sparsities[2]),
            "heads_pruned": ",".join(f"{h:.4f}" for h, _ in self.realized),
            "neurons_pruned": ",".join(f"{n:.4f}" for _, n in self.realized),
        }

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.row().items())


REPORT_COLUMNS = ("variant", "divergence", "loss_stage1", "loss_stage2", "loss_stage3", "macs",
                  "dense_macs", "s1", "s2", "s3", "heads_pruned", "neurons_pruned")


def write_report_csv(path, reports: list[EvalReport]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())


def eval_labels(n: int, num_classes: int) -> torch.Tensor:
    return torch.arange(n) % num_classes


def evaluate(dense: Denoiser, mosaic: MosaicModel, schedule: NoiseSchedule, n_eval: int = 256, seed: int = 0,
             sampler: SamplerSpec = SamplerSpec("ddim", 20), cfg_scale: float = 1.0,
             heldout: BlobDataset | None = None, name: str = "mosaic",
             dense_run: SampleRun | None = None) -> EvalReport:
    """Paired comparison against the dense parent under a shared seed."""
    labels = eval_labels(n_eval, dense.cfg.num_classes)
    if dense_run is None:
        dense_run = dense_sample(dense, schedule, sampler, labels, seed, cfg_scale)
    run = mosaic_sample(mosaic, schedule, sampler, labels, seed, cfg_scale)
    diff = (run.x0.double() - dense_run.x0.double()).reshape(n_eval, -1)
    per = (diff**2).mean(dim=1).numpy()

    losses = (float("nan"),) * 3
    if heldout is not None:
        losses = tuple(heldout_loss(net, heldout, schedule, seed + 1, rng)
                       for net, rng in zip(mosaic.subnets, mosaic.plan.stage_ranges()))
    steps = sampler.steps if sampler.kind == "ddim" else None
    guided = cfg_scale != 1.0
    return EvalReport(
        name=name,
        divergence=float(per.mean()),
        divergence_per_sample=per,
        stage_losses=losses,
        macs=mac_count(mosaic, steps, cfg=guided),
        dense_macs=mac_count(dense, steps, schedule.T, cfg=guided),
        sparsities=mosaic.plan.sparsities,
        realized=[realized_sparsity(n) for n in mosaic.subnets],
    )


def sign_test(better: np.ndarray, worse: np.ndarray) -> tuple[int, int, float]:
    """One-sided sign test that ``better < worse`` pairwise; ties are dropped.

    Returns (wins, informative pairs, p-value).
    """
    from scipy.stats import binomtest

    diff = np.asarray(worse) - np.asarray(better)
    wins = int(np.sum(diff > 0))
    n = int(np.sum(diff != 0))
    if n == 0:
        return 0, 0, 1.0
    return wins, n, float(binomtest(wins, n, 0.5, alternative="greater").pvalue)
