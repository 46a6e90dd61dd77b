"""Discrete noise schedules and closed-form trajectory analytics.

Timesteps are 1-based throughout: ``t = 1`` is the least noisy step and
``t = T`` the noisiest. Arrays are stored 0-based, so ``alpha_bars[t - 1]``
is the cumulative signal retention at step ``t``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FAMILIES = ("linear", "scaled_linear")

DEFAULT_BETAS = {
    "linear": (1e-4, 0.02),
    "scaled_linear": (0.00085, 0.012),
}

CURVE_COLUMNS = ("t", "grad", "log_snr", "score", "mse", "snr")


class ScheduleError(ValueError):
    """Invalid schedule parameters."""


class UndefinedGradientError(ValueError):
    """The MSE difference needs a predecessor step; t = 1 has none."""


@dataclass(frozen=True)
class NoiseSchedule:
    family: str
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """ᾱ at 1-based step ``t``; ``t = 0`` returns 1 (clean data)."""
        if t == 0:
            return 1.0
        self._check(t)
        return float(self.alpha_bars[t - 1])

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")


@dataclass(frozen=True)
class PowerAssumption:
    """Per-element mean squares of the clean sample and of the noise."""

    signal_power: float = 1.0
    noise_power: float = 1.0

    def __post_init__(self):
        if not self.signal_power > 0:
            raise ScheduleError("signal_power must be positive")
        if self.noise_power != 1.0:
            raise ScheduleError("noise_power is fixed at 1 (unit Gaussian)")

    @classmethod
    def measured(cls, samples) -> "PowerAssumption":
        """Estimate the signal power from a batch of clean samples."""
        arr = np.asarray(samples, dtype=np.float64)
        return cls(signal_power=float(np.mean(arr**2)))


@dataclass(frozen=True)
class ScoreCurve:
    t: np.ndarray
    grad: np.ndarray
    log_snr: np.ndarray
    score: np.ndarray
    lam: float

    def __len__(self):
        return len(self.t)

    def restrict(self, lo: int, hi: int) -> np.ndarray:
        """Scores for timesteps in the closed interval [lo, hi]."""
        sel = (self.t >= lo) & (self.t <= hi)
        return self.score[sel]


def build_schedule(family: str = "linear", T: int = 1000, beta_start: float | None = None,
                   beta_end: float | None = None) -> NoiseSchedule:
    if family not in FAMILIES:
        raise ScheduleError(f"unknown schedule family {family!r}; expected one of {FAMILIES}")
    default_lo, default_hi = DEFAULT_BETAS[family]
    beta_start = default_lo if beta_start is None else float(beta_start)
    beta_end = default_hi if beta_end is None else float(beta_end)
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    T = int(T)
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")

    if family == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(np.sqrt(beta_start), np.sqrt(beta_end), T, dtype=np.float64) ** 2
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(family, T, beta_start, beta_end, betas, alphas, alpha_bars)


def sampler_timesteps(T: int, steps: int | None = None) -> np.ndarray:
    """Descending evaluation timesteps of a strided sampler, e.g. 1000, 950, ..., 50."""
    if steps is None or steps >= T:
        return np.arange(T, 0, -1)
    if steps < 1:
        raise ScheduleError("steps must be >= 1")
    ts = np.round(np.linspace(T, 0, steps + 1)[:-1]).astype(np.int64)
    return ts


def snr(schedule: NoiseSchedule, t: int) -> float:
    schedule._check(t)
    ab = schedule.alpha_bar(t)
    return ab / (1.0 - ab)


def log_snr(schedule: NoiseSchedule, t: int | None = None):
    """Natural-log SNR computed from ᾱ directly so tiny t cannot overflow.

    With ``t=None`` returns the whole table (length T).
    """
    if t is None:
        ab = schedule.alpha_bars
    else:
        schedule._check(t)
        ab = schedule.alpha_bar(t)
    return np.log(ab) - np.log1p(-ab)


def _mse_from_alpha_bar(ab, powers: PowerAssumption):
    return (1.0 - np.sqrt(ab)) ** 2 * powers.signal_power + (1.0 - ab) * powers.noise_power


def expected_mse(schedule: NoiseSchedule, t: int, powers: PowerAssumption = PowerAssumption()) -> float:
    """Expected per-element squared distance between the step-t latent and the clean sample."""
    schedule._check(t)
    return float(_mse_from_alpha_bar(schedule.alpha_bar(t), powers))


def _grad_from_alpha_bars(ab, ab_prev, powers: PowerAssumption):
    delta = ab - ab_prev
    return (delta + 2.0 * (np.sqrt(ab_prev) - np.sqrt(ab))) * powers.signal_power - delta * powers.noise_power


def expected_grad(schedule: NoiseSchedule, t: int, powers: PowerAssumption = PowerAssumption()) -> float:
    """Expected MSE(t) - MSE(t-1); defined for 2 <= t <= T."""
    if t == 1:
        raise UndefinedGradientError("expected gradient is undefined at t = 1")
    schedule._check(t)
    return float(_grad_from_alpha_bars(schedule.alpha_bar(t), schedule.alpha_bar(t - 1), powers))


def mse_table(schedule: NoiseSchedule, powers: PowerAssumption = PowerAssumption()) -> np.ndarray:
    return _mse_from_alpha_bar(schedule.alpha_bars, powers)


def grad_table(schedule: NoiseSchedule, powers: PowerAssumption = PowerAssumption()) -> np.ndarray:
    """Expected gradients for t = 2..T (length T - 1)."""
    ab = schedule.alpha_bars
    return _grad_from_alpha_bars(ab[1:], ab[:-1], powers)


def score_curve(schedule: NoiseSchedule, lam: float = 0.01,
                powers: PowerAssumption = PowerAssumption()) -> ScoreCurve:
    """Importance score = expected gradient + lam * ln SNR, over t = 2..T."""
    if lam < 0:
        raise ScheduleError("lambda must be non-negative")
    if schedule.T < 2:
        raise ScheduleError("score curve needs T >= 2")
    t = np.arange(2, schedule.T + 1)
    grad = grad_table(schedule, powers)
    lsnr = log_snr(schedule)[1:]
    return ScoreCurve(t=t, grad=grad, log_snr=lsnr, score=grad + lam * lsnr, lam=float(lam))


def write_curves_csv(path, schedule: NoiseSchedule, curve: ScoreCurve,
                     powers: PowerAssumption = PowerAssumption()) -> None:
    """One row per timestep; t = 1 has no gradient or score and writes ``nan`` there."""
    mse = mse_table(schedule, powers)
    lsnr = log_snr(schedule)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for t in range(1, schedule.T + 1):
            if t == 1:
                grad = score = float("nan")
            else:
                grad, score = curve.grad[t - 2], curve.score[t - 2]
            ab = schedule.alpha_bars[t - 1]
            w.writerow([t, repr(float(grad)), repr(float(lsnr[t - 1])), repr(float(score)),
                        repr(float(mse[t - 1])), repr(float(ab / (1.0 - ab)))])


def read_curves_csv(path) -> dict[str, np.ndarray]:
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in CURVE_COLUMNS}
