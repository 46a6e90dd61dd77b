"""Second-order structured pruning of linear layers.

A layer ``y = x @ W.T`` with ``W`` of shape ``(m, n)`` is pruned by removing
whole groups of input columns. Groups are contiguous: ``group_size = 1`` for
MLP neurons, ``group_size = head_dim`` for attention heads. Removal is greedy,
one group at a time, with the optimal compensation of the surviving columns
and exact maintenance of the inverse Hessian over survivors.

All linear algebra runs in float64 numpy.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

DEFAULT_DAMPING = 1e-2


class PruningNumericalError(ArithmeticError):
    pass


class AllHeadsPrunedError(ValueError):
    pass


@dataclass
class HessianAccumulator:
    """Running ``H = sum X.T @ X`` over calibration rows."""

    n: int
    damping: float = DEFAULT_DAMPING
    H: np.ndarray = None
    samples: int = 0

    def __post_init__(self):
        if self.H is None:
            self.H = np.zeros((self.n, self.n), dtype=np.float64)

    def accumulate(self, X) -> "HessianAccumulator":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n:
            raise ValueError(f"expected a (b, {self.n}) batch, got shape {X.shape}")
        if X.shape[0] < 1:
            raise ValueError("empty batch")
        self.H += X.T @ X
        self.samples += X.shape[0]
        return self

    def merge(self, other: "HessianAccumulator") -> "HessianAccumulator":
        """Fold in a partial sum built by another worker."""
        if other.n != self.n:
            raise ValueError(f"dimension mismatch: {self.n} vs {other.n}")
        self.H += other.H
        self.samples += other.samples
        return self

    def damped(self) -> np.ndarray:
        diag_mean = float(np.mean(np.diag(self.H)))
        # an all-zero Hessian still needs a positive ridge
        ridge = self.damping * (diag_mean if diag_mean > 0 else 1.0)
        return self.H + ridge * np.eye(self.n)


def accumulate(acc: HessianAccumulator, X_batch) -> HessianAccumulator:
    return acc.accumulate(X_batch)


@dataclass
class GroupMask:
    n_groups: int
    group_size: int
    pruned: list[int] = field(default_factory=list)

    @property
    def n_columns(self) -> int:
        return self.n_groups * self.group_size

    def columns(self, groups=None) -> np.ndarray:
        groups = self.pruned if groups is None else groups
        if not len(groups):
            return np.zeros(0, dtype=np.int64)
        g = np.asarray(sorted(groups), dtype=np.int64)
        return (g[:, None] * self.group_size + np.arange(self.group_size)).ravel()

    def column_mask(self) -> np.ndarray:
        """Boolean column mask, True where the column is pruned."""
        m = np.zeros(self.n_columns, dtype=bool)
        m[self.columns()] = True
        return m

    def kept(self) -> list[int]:
        gone = set(self.pruned)
        return [g for g in range(self.n_groups) if g not in gone]


@dataclass
class PruneResult:
    mask: GroupMask
    W_pruned: np.ndarray
    recon_error: float
    saliency_trace: list[tuple[int, float]]

    def cumulative_errors(self) -> np.ndarray:
        return np.cumsum([s for _, s in self.saliency_trace])

    def write_trace_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "group", "saliency", "cumulative_error"])
            for step, ((group, sal), cum) in enumerate(zip(self.saliency_trace, self.cumulative_errors())):
                w.writerow([step, group, repr(float(sal)), repr(float(cum))])


def reconstruction_error(X_or_H, W, W_hat, *, is_hessian: bool = False) -> float:
    """``||X W_hat.T - X W.T||^2`` from either the inputs or ``H = X.T X``."""
    D = np.asarray(W_hat, dtype=np.float64) - np.asarray(W, dtype=np.float64)
    if is_hessian:
        return float(np.einsum("ij,jk,ik->", D, X_or_H, D))
    R = np.asarray(X_or_H, dtype=np.float64) @ D.T
    return float(np.sum(R * R))


def _inv_spd(A: np.ndarray) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise PruningNumericalError(f"matrix of size {A.shape[0]} is not positive definite") from exc
    return scipy.linalg.cho_solve(c, np.eye(A.shape[0]))


def group_saliency(W, H_inv, group, group_size: int = 1) -> float:
    """Error increase from removing column group ``group`` with optimal compensation.

    ``H_inv`` must be the inverse damped Hessian over the currently surviving
    columns (rows/columns of removed groups are ignored).
    """
    W = np.asarray(W, dtype=np.float64)
    cols = np.arange(group * group_size, (group + 1) * group_size)
    Wg = W[:, cols]
    A = H_inv[np.ix_(cols, cols)]
    if group_size == 1:
        a = float(A[0, 0])
        if not a > 0:
            raise PruningNumericalError(f"non-positive inverse-Hessian diagonal for group {group}")
        return float(np.sum(Wg * Wg) / a)
    try:
        c = scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise PruningNumericalError(f"inverse-Hessian block of group {group} is singular") from exc
    return float(np.sum(Wg * scipy.linalg.cho_solve(c, Wg.T).T))


def _all_saliencies(W, H_inv, alive, group_size):
    if group_size == 1:
        d = np.diag(H_inv)
        sal = np.full(len(d), np.inf)
        idx = np.asarray(alive)
        if np.any(d[idx] <= 0):
            raise PruningNumericalError("non-positive inverse-Hessian diagonal")
        sal[idx] = np.sum(W[:, idx] ** 2, axis=0) / d[idx]
        return sal
    n_groups = W.shape[1] // group_size
    sal = np.full(n_groups, np.inf)
    for g in alive:
        sal[g] = group_saliency(W, H_inv, g, group_size)
    return sal


def eliminate_group(H_inv: np.ndarray, cols, A_inv=None) -> np.ndarray:
    """Drop ``cols`` from an inverse via its Schur complement.

    The surviving block of the result equals the inverse of the original
    matrix restricted to the surviving indices; removed rows and columns are
    zeroed.
    """
    cols = np.asarray(cols)
    if A_inv is None:
        A_inv = _inv_spd(H_inv[np.ix_(cols, cols)])
    out = H_inv - H_inv[:, cols] @ np.atleast_2d(A_inv) @ H_inv[cols, :]
    out[cols, :] = 0.0
    out[:, cols] = 0.0
    return out


def n_pruned_groups(sparsity: float, n_groups: int) -> int:
    # small guard so 0.3 * 10 -> 3, not 2, despite binary rounding
    return int(math.floor(sparsity * n_groups + 1e-9))


def prune_layer(W, acc: HessianAccumulator, sparsity: float, group_size: int = 1,
                damping: float | None = None) -> PruneResult:
    """Greedy group removal with compensation and incremental inverse updates.

    Each step picks the surviving group with the smallest saliency (lowest
    index on ties), applies the compensation update to every column, then
    eliminates the group from the inverse Hessian through its Schur complement.
    The returned weights have exact zeros in every pruned column.
    """
    W = np.array(W, dtype=np.float64, copy=True)
    m, n = W.shape
    if n != acc.n:
        raise ValueError(f"weight has {n} input columns but Hessian is {acc.n}x{acc.n}")
    if n % group_size:
        raise ValueError(f"{n} columns are not divisible into groups of {group_size}")
    if not 0 <= sparsity < 1:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    n_groups = n // group_size
    k = n_pruned_groups(sparsity, n_groups)
    mask = GroupMask(n_groups, group_size)
    if k == 0:
        return PruneResult(mask, W, 0.0, [])

    if damping is not None and damping != acc.damping:
        acc = HessianAccumulator(acc.n, damping, acc.H, acc.samples)
    H_inv = _inv_spd(acc.damped())
    W0 = W.copy()
    alive = list(range(n_groups))
    trace = []

    for _ in range(k):
        sal = _all_saliencies(W, H_inv, alive, group_size)
        g = int(np.argmin(sal))
        cols = np.arange(g * group_size, (g + 1) * group_size)
        A = H_inv[np.ix_(cols, cols)]
        A_inv = _inv_spd(A) if group_size > 1 else 1.0 / A
        W -= W[:, cols] @ A_inv @ H_inv[cols, :]
        W[:, cols] = 0.0
        H_inv = eliminate_group(H_inv, cols, A_inv)
        alive.remove(g)
        mask.pruned.append(g)
        trace.append((g, float(sal[g])))

    W[:, mask.column_mask()] = 0.0
    err = reconstruction_error(acc.H, W0, W, is_hessian=True)
    return PruneResult(mask, W, max(err, 0.0), trace)


# --- transformer sub-blocks ---------------------------------------------------

@dataclass
class BlockPruneReport:
    result: PruneResult
    kind: str


def prune_attention_block(attn, acc: HessianAccumulator, sparsity: float,
                          damping: float | None = None) -> BlockPruneReport:
    """Prune whole heads of a multi-head self-attention module in place.

    ``attn`` must expose ``n_heads``, ``head_dim``, ``qkv`` (packed Q, K, V
    linear) and ``proj`` (output projection). ``acc`` holds the Hessian of
    the output-projection input.
    """
    import torch

    h, dh = attn.n_heads, attn.head_dim
    k = n_pruned_groups(sparsity, h)
    if k >= h:
        raise AllHeadsPrunedError(f"sparsity {sparsity} would remove all {h} heads")
    W = attn.proj.weight.detach().cpu().double().numpy()
    res = prune_layer(W, acc, sparsity, group_size=dh, damping=damping)
    if not res.mask.pruned:
        return BlockPruneReport(res, "attn")
    with torch.no_grad():
        attn.proj.weight.copy_(torch.from_numpy(res.W_pruned).to(attn.proj.weight.dtype))
        d = h * dh
        for g in res.mask.pruned:
            for part in range(3):
                sl = slice(part * d + g * dh, part * d + (g + 1) * dh)
                attn.qkv.weight[sl, :] = 0.0
                if attn.qkv.bias is not None:
                    attn.qkv.bias[sl] = 0.0
    return BlockPruneReport(res, "attn")


def prune_mlp_block(mlp, acc: HessianAccumulator, sparsity: float,
                    damping: float | None = None) -> BlockPruneReport:
    """Remove intermediate neurons of an ``fc1 -> act -> fc2`` MLP in place."""
    import torch

    W = mlp.fc2.weight.detach().cpu().double().numpy()
    res = prune_layer(W, acc, sparsity, group_size=1, damping=damping)
    if not res.mask.pruned:
        return BlockPruneReport(res, "mlp")
    with torch.no_grad():
        mlp.fc2.weight.copy_(torch.from_numpy(res.W_pruned).to(mlp.fc2.weight.dtype))
        idx = torch.as_tensor(sorted(res.mask.pruned))
        mlp.fc1.weight[idx, :] = 0.0
        if mlp.fc1.bias is not None:
            mlp.fc1.bias[idx] = 0.0
    return BlockPruneReport(res, "mlp")
