from .checkpoint import Checkpoint, CheckpointError, load_model, save_model
from .data import BlobDataset, make_blob_dataset
from .model import Denoiser, ModelConfig, prunable_layers
from .samplers import (
    EmpiricalCurve,
    SamplerSpec,
    ddim_step,
    ddpm_step,
    empirical_mse_curve,
    forward_noise,
    predict_eps,
    run_sampler,
    sample,
)
from .train import LossLog, TrainConfig, TrainingDivergedError, heldout_loss, train

__all__ = [
    "BlobDataset", "Checkpoint", "CheckpointError", "Denoiser", "EmpiricalCurve", "LossLog",
    "ModelConfig", "SamplerSpec", "TrainConfig", "TrainingDivergedError", "ddim_step", "ddpm_step",
    "empirical_mse_curve", "forward_noise", "heldout_loss", "load_model", "make_blob_dataset",
    "predict_eps", "prunable_layers", "run_sampler", "sample", "save_model", "train",
]
