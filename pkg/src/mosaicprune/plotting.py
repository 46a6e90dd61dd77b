"""Figure writers for the CLI report paths.

Uses the Agg backend and strips the PNG software tag so reruns with the same
inputs give byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
STAGE_COLORS = ("#c44e52", "#4c72b0", "#55a868")


def _save(fig, path):
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def _shade_stages(ax, plan):
    if plan is None:
        return
    for i, (lo, hi) in enumerate(plan.stage_bounds()):
        ax.axvspan(lo - 0.5, hi + 0.5, color=STAGE_COLORS[i], alpha=0.08, lw=0)


def plot_curves(path, schedule, curve, mse, plan=None, threshold=None):
    """Four panels: expected MSE, expected gradient, ln SNR and the importance score."""
    t_all = np.arange(1, schedule.T + 1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(7.0, 4.8), sharex=True)
        panels = [
            (axes[0, 0], t_all, mse, "expected MSE"),
            (axes[0, 1], curve.t, curve.grad, "expected gradient"),
            (axes[1, 0], curve.t, curve.log_snr, "ln SNR"),
            (axes[1, 1], curve.t, curve.score, f"score (lambda={curve.lam:g})"),
        ]
        for ax, x, y, label in panels:
            _shade_stages(ax, plan)
            ax.plot(x, y, color="k")
            ax.set_ylabel(label)
        if threshold is not None:
            axes[1, 1].axhline(threshold, ls="--", color="0.4", lw=0.8)
        for ax in axes[1]:
            ax.set_xlabel("timestep t")
            ax.invert_xaxis()
        fig.tight_layout()
        _save(fig, path)


def plot_loss(path, losses):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ax.plot(np.arange(len(losses)), losses, marker="o", ms=2, color="k")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean noise-prediction loss")
        fig.tight_layout()
        _save(fig, path)


def plot_samples(path, images, ncols=8):
    imgs = np.asarray(images)[:, 0]
    n = len(imgs)
    nrows = max(1, int(np.ceil(n / ncols)))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(ncols * 0.8, nrows * 0.8), squeeze=False)
        for k, ax in enumerate(axes.flat):
            ax.set_axis_off()
            if k < n:
                ax.imshow(imgs[k], cmap="gray", interpolation="nearest")
        fig.tight_layout(pad=0.2)
        _save(fig, path)


def plot_report(path, reports):
    """Divergence per variant (log scale) next to its MAC fraction of dense."""
    names = [r.name for r in reports]
    div = [max(r.divergence, 1e-12) for r in reports]
    mac = [r.macs / r.dense_macs for r in reports]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(6.5, 2.8))
        a.bar(x, div, color="0.35")
        a.set_yscale("log")
        a.set_ylabel("divergence from dense")
        b.bar(x, mac, color="0.65")
        b.set_ylim(0, 1.05)
        b.set_ylabel("MACs / dense MACs")
        for ax in (a, b):
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=20, ha="right")
        fig.tight_layout()
        _save(fig, path)
