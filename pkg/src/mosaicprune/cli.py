"""Command-line entry point.

Exit codes: 0 success, 2 configuration or missing input, 3 degenerate or
ambiguous score curve, 4 training diverged, 5 pruning numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .pipeline import MosaicModel, evaluate, mac_count, mosaic_sample, run_prune, write_report_csv
from .pruner import AllHeadsPrunedError, PruningNumericalError
from .schedule import PowerAssumption, ScoreCurve, build_schedule, mse_table, score_curve, write_curves_csv
from .toydiffusion.checkpoint import Checkpoint, CheckpointError
from .toydiffusion.data import make_blob_dataset
from .toydiffusion.model import Denoiser, ModelConfig
from .toydiffusion.samplers import SamplerSpec
from .toydiffusion.train import TrainConfig, TrainingDivergedError, train
from .trajectory import (
    AmbiguousCrossingError,
    DegenerateCurveError,
    InfeasibleAllocationError,
    StagePlan,
    allocate_sparsity,
    divide_stages,
    preset_plan,
)

log = logging.getLogger("mosaicprune")

EXIT_CONFIG, EXIT_CURVE, EXIT_DIVERGED, EXIT_PRUNE = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _schedule(cfg: RunConfig):
    return build_schedule(cfg.family, cfg.T, cfg.beta_start, cfg.beta_end)


def _sampler(cfg: RunConfig) -> SamplerSpec:
    return SamplerSpec(cfg.sampler, cfg.steps if cfg.sampler == "ddim" else None)


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _curve(cfg: RunConfig, schedule):
    if not cfg.curve_file:
        return score_curve(schedule, cfg.lam, PowerAssumption(cfg.signal_power))
    path = Path(cfg.curve_file)
    if not path.exists():
        raise CliError(EXIT_CONFIG, f"curve file {path} not found")
    with open(path, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["score"] not in ("", "nan")]
    t = np.array([int(r["t"]) for r in rows])
    score = np.array([float(r["score"]) for r in rows])
    zeros = np.zeros_like(score)
    return ScoreCurve(t=t, grad=score.copy(), log_snr=zeros, score=score, lam=0.0)


def _plan(cfg: RunConfig, schedule) -> StagePlan:
    if cfg.plan:
        if not Path(cfg.plan).exists():
            raise CliError(EXIT_CONFIG, f"plan file {cfg.plan} not found")
        return StagePlan.load(cfg.plan)
    if cfg.preset:
        return preset_plan(cfg.preset, schedule.T)
    curve = _curve(cfg, schedule)
    d1, d2 = divide_stages(curve, cfg.M)
    plan = StagePlan(dividers=(d1, d2), horizon=schedule.T, M=cfg.M, lam=cfg.lam)
    return allocate_sparsity(plan, curve, cfg.aggregate, cfg.weighting, cfg.steps)


def _load_ckpt(path, what):
    if not path:
        raise CliError(EXIT_CONFIG, f"--{what} is required")
    if not Path(path).exists():
        raise CliError(EXIT_CONFIG, f"{what} file {path} not found")
    try:
        return Checkpoint.load(path)
    except CheckpointError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}") from None


def _print_plan(plan: StagePlan):
    print(f"dividers: {plan.dividers[0]} {plan.dividers[1]}")
    for i, ((lo, hi), s) in enumerate(zip(plan.stage_bounds(), plan.sparsities)):
        print(f"stage {i + 1}: t in [{lo}, {hi}]  sparsity {s:.4f}")


# --- subcommands --------------------------------------------------------------------

def cmd_analyze(cfg: RunConfig) -> int:
    from .plotting import plot_curves

    schedule = _schedule(cfg)
    powers = PowerAssumption(cfg.signal_power)
    out = _out(cfg)
    curve = _curve(cfg, schedule)
    if not cfg.curve_file:
        write_curves_csv(out / "curves.csv", schedule, curve, powers)
    plan = _plan(cfg, schedule)
    plan.save(out / "plan.txt")
    if not cfg.curve_file:
        plot_curves(out / "curves.png", schedule, curve, mse_table(schedule, powers), plan,
                    cfg.M * float(curve.score.max()))
    _print_plan(plan)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    from .plotting import plot_loss

    schedule = _schedule(cfg)
    out = _out(cfg)
    torch.manual_seed(cfg.seed)
    model = Denoiser(_model_config(cfg))
    data = make_blob_dataset(cfg.train_size, cfg.seed, cfg.image_size)
    tc = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
                     max_steps=cfg.max_steps or None)
    model, losses = train(model, data, schedule, tc)
    Checkpoint.from_model(model).save(out / "model.ckpt")
    losses.write_csv(out / "loss.csv")
    if losses.epoch_losses:
        plot_loss(out / "loss.png", losses.epoch_losses)
        print(f"final epoch loss {losses.epoch_losses[-1]:.5f}")
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def _model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(image_size=cfg.image_size, patch=cfg.patch, d_model=cfg.d_model, n_heads=cfg.n_heads,
                       depth=cfg.depth, mlp_ratio=cfg.mlp_ratio)


def cmd_prune(cfg: RunConfig) -> int:
    ckpt = _load_ckpt(cfg.checkpoint, "checkpoint")
    schedule = _schedule(cfg)
    plan = _plan(cfg, schedule)
    out = _out(cfg)
    dense = ckpt.to_model()
    data = make_blob_dataset(cfg.train_size, cfg.seed, dense.cfg.image_size)
    mosaic = run_prune(dense, plan, data, schedule, cfg.n_calib, cfg.cfg_calib, cfg.seed,
                       workers=cfg.workers, damping=cfg.damping)
    mosaic.save(out / "mosaic", ckpt.meta)
    traces = out / "traces"
    traces.mkdir(exist_ok=True)
    for i, reports in enumerate(mosaic.reports):
        for (block, layer), rep in sorted(reports.items()):
            rep.result.write_trace_csv(traces / f"stage{i + 1}_block{block}_{layer}.csv")
    _print_plan(plan)
    print(f"MACs per 1-image run ({cfg.steps} steps): mosaic {mac_count(mosaic, cfg.steps)}, "
          f"dense {mac_count(dense, cfg.steps, schedule.T)}")
    return 0


def _load_mosaic(path, dense=None) -> MosaicModel:
    if not path:
        raise CliError(EXIT_CONFIG, "--mosaic is required")
    p = Path(path)
    if not p.exists() or (p.is_dir() and not (p / "plan.txt").exists()):
        raise CliError(EXIT_CONFIG, f"mosaic {path} not found")
    try:
        return MosaicModel.load(p, dense)
    except CheckpointError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}") from None


def cmd_sample(cfg: RunConfig) -> int:
    from .plotting import plot_samples

    schedule = _schedule(cfg)
    if cfg.mosaic:
        mosaic = _load_mosaic(cfg.mosaic)
    else:
        net = _load_ckpt(cfg.checkpoint, "checkpoint").to_model()
        mosaic = MosaicModel(net, [net, net, net], StagePlan(dividers=(666, 333), horizon=schedule.T))
    out = _out(cfg)
    labels = torch.arange(cfg.n_samples) % mosaic.dense.cfg.num_classes
    run = mosaic_sample(mosaic, schedule, _sampler(cfg), labels, cfg.seed, cfg.cfg_scale)
    x = run.x0.numpy().astype("<f4")
    np.save(out / "samples.npy", x)
    with open(out / "dispatch.csv", "w") as fh:
        fh.write("t,stage\n")
        for t, s in run.dispatch:
            fh.write(f"{t},{s + 1}\n")
    plot_samples(out / "samples.png", x)
    print(f"wrote {len(x)} samples to {out / 'samples.npy'}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    from .plotting import plot_report

    dense = _load_ckpt(cfg.dense, "dense").to_model()
    mosaic = _load_mosaic(cfg.mosaic, dense)
    schedule = _schedule(cfg)
    out = _out(cfg)
    heldout = make_blob_dataset(cfg.n_eval, cfg.seed + 1, dense.cfg.image_size)
    sampler = _sampler(cfg)
    reports = [evaluate(dense, mosaic, schedule, cfg.n_eval, cfg.seed, sampler, cfg.cfg_scale, heldout, "mosaic")]
    if cfg.baseline == "uniform":
        agg = mosaic.plan.aggregate
        uplan = mosaic.plan.with_sparsities((agg, agg, agg), weighting="uniform")
        data = make_blob_dataset(cfg.train_size, cfg.seed, dense.cfg.image_size)
        uni = run_prune(dense, uplan, data, schedule, cfg.n_calib, cfg.cfg_calib, cfg.seed,
                        workers=cfg.workers, damping=cfg.damping)
        reports.append(evaluate(dense, uni, schedule, cfg.n_eval, cfg.seed, sampler, cfg.cfg_scale, heldout,
                                "uniform"))
    write_report_csv(out / "report.csv", reports)
    (out / "report.txt").write_text("\n".join(r.to_text() for r in reports))
    plot_report(out / "report.png", reports)
    for r in reports:
        print(f"{r.name}: divergence {r.divergence:.6g}  MACs {r.macs} / {r.dense_macs}")
    return 0


COMMANDS = {"analyze": cmd_analyze, "train": cmd_train, "prune": cmd_prune, "sample": cmd_sample,
            "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    seen = set()
    for name in RunConfig.field_names():
        flag = {"lam": "lambda", "out_dir": "out-dir"}.get(name, name)
        spellings = {f"--{flag}", f"--{flag.replace('_', '-')}"}
        if name in seen:
            continue
        seen.add(name)
        common.add_argument(*sorted(spellings), dest=name, default=None, metavar="VALUE")
    parser = argparse.ArgumentParser(prog="mosaicprune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common], help=COMMANDS[cmd].__name__.replace("cmd_", ""))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k in RunConfig.field_names() and v is not None}
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        cfg = RunConfig.from_mapping(overrides, cfg).validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(cfg.workers)
    try:
        return COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (DegenerateCurveError, AmbiguousCrossingError) as exc:
        print(f"stage division failed: {exc}", file=sys.stderr)
        return EXIT_CURVE
    except InfeasibleAllocationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (PruningNumericalError, AllHeadsPrunedError) as exc:
        print(f"pruning failed: {exc}", file=sys.stderr)
        return EXIT_PRUNE


if __name__ == "__main__":
    sys.exit(main())
