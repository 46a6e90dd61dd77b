"""Three-stage division of the reverse trajectory and per-stage sparsity budgets.

Stage numbering follows the sampling direction: stage 1 is the noisy start
``(divider1, T]``, stage 2 the middle ``(divider2, divider1]`` and stage 3
the clean end ``[1, divider2]``. Python indices 0, 1, 2 map to stages 1, 2, 3.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .schedule import ScoreCurve, sampler_timesteps

WEIGHTINGS = ("uniform", "step", "preset")
S_MAX = 0.9


class DegenerateCurveError(ValueError):
    """The score curve does not cross the threshold twice."""


class AmbiguousCrossingError(ValueError):
    def __init__(self, regions):
        self.regions = [tuple(int(v) for v in r) for r in regions]
        super().__init__(f"score curve has {len(regions)} above-threshold regions: {self.regions}")


class InfeasibleAllocationError(ValueError):
    pass


class PresetLookupError(LookupError):
    pass


@dataclass(frozen=True)
class StagePlan:
    dividers: tuple[int, int]
    horizon: int
    sparsities: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mean_scores: tuple[float, float, float] | None = None
    M: float = float("nan")
    lam: float = float("nan")
    aggregate: float = 0.0
    weighting: str = "uniform"

    def __post_init__(self):
        d1, d2 = (int(v) for v in self.dividers)
        if not self.horizon > d1 > d2 >= 1:
            raise ValueError(f"dividers must satisfy T > divider1 > divider2 >= 1, got ({d1}, {d2}) "
                             f"with T = {self.horizon}")
        if len(self.sparsities) != 3 or not all(0.0 <= s < 1.0 for s in self.sparsities):
            raise ValueError(f"sparsities must be three values in [0, 1), got {self.sparsities}")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.weighting!r}")
        object.__setattr__(self, "dividers", (d1, d2))
        object.__setattr__(self, "sparsities", tuple(float(s) for s in self.sparsities))

    def stage_bounds(self) -> list[tuple[int, int]]:
        """Closed ``(lo, hi)`` timestep bounds of stages 1, 2, 3."""
        d1, d2 = self.dividers
        return [(d1 + 1, self.horizon), (d2 + 1, d1), (1, d2)]

    def stage_ranges(self) -> list[range]:
        return [range(lo, hi + 1) for lo, hi in self.stage_bounds()]

    def stage_of(self, t: int) -> int:
        """0-based index of the stage containing timestep ``t``."""
        d1, d2 = self.dividers
        if not 1 <= t <= self.horizon:
            raise IndexError(f"timestep {t} outside 1..{self.horizon}")
        if t > d1:
            return 0
        if t > d2:
            return 1
        return 2

    def step_counts(self, steps: int | None = None) -> np.ndarray:
        ts = sampler_timesteps(self.horizon, steps)
        return np.bincount([self.stage_of(int(t)) for t in ts], minlength=3)

    def with_sparsities(self, sparsities, weighting: str | None = None, aggregate: float | None = None):
        return replace(self, sparsities=tuple(sparsities),
                       weighting=self.weighting if weighting is None else weighting,
                       aggregate=self.aggregate if aggregate is None else aggregate)

    # --- text serialization -------------------------------------------------

    def to_text(self) -> str:
        def num(x):
            return repr(float(x))

        scores = "none" if self.mean_scores is None else ",".join(num(v) for v in self.mean_scores)
        lines = [
            f"dividers={self.dividers[0]},{self.dividers[1]}",
            f"horizon={self.horizon}",
            "sparsities=" + ",".join(num(s) for s in self.sparsities),
            f"mean_scores={scores}",
            f"M={num(self.M)}",
            f"lambda={num(self.lam)}",
            f"aggregate={num(self.aggregate)}",
            f"weighting={self.weighting}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StagePlan":
        kv = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            kv[key.strip()] = value.strip()
        try:
            d1, d2 = (int(v) for v in kv["dividers"].split(","))
            scores = None if kv.get("mean_scores", "none") == "none" else \
                tuple(float(v) for v in kv["mean_scores"].split(","))
            return cls(
                dividers=(d1, d2),
                horizon=int(kv["horizon"]),
                sparsities=tuple(float(v) for v in kv["sparsities"].split(",")),
                mean_scores=scores,
                M=float(kv.get("M", "nan")),
                lam=float(kv.get("lambda", "nan")),
                aggregate=float(kv.get("aggregate", "0")),
                weighting=kv.get("weighting", "uniform"),
            )
        except KeyError as exc:
            raise ValueError(f"plan document missing key {exc.args[0]!r}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "StagePlan":
        return cls.from_text(Path(path).read_text())


# --- stage division ---------------------------------------------------------

def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges [i, j] of contiguous True runs."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def divide_stages(curve: ScoreCurve, M: float = 0.55) -> tuple[int, int]:
    """Split the curve at ``M * max(score)``.

    Returns ``(divider1, divider2)``: the largest and smallest timesteps of
    the single above-threshold region. The region must lie strictly inside
    the curve so that both outer stages are non-empty.
    """
    if not 0 < M < 1:
        raise ValueError(f"M must lie in (0, 1), got {M}")
    if len(curve) < 3:
        raise DegenerateCurveError("curve needs at least 3 points")
    score = np.asarray(curve.score)
    threshold = M * score.max()
    above = score >= threshold
    runs = _runs(above)
    if len(runs) > 1:
        raise AmbiguousCrossingError([(curve.t[a], curve.t[b]) for a, b in runs])
    if not runs:
        raise DegenerateCurveError(f"no point reaches threshold {threshold!r} (max {score.max()!r})")
    a, b = runs[0]
    if a == 0 or b == len(score) - 1:
        raise DegenerateCurveError(
            f"above-threshold region [{curve.t[a]}, {curve.t[b]}] touches the curve boundary; "
            "the threshold is crossed fewer than two times")
    if a == b:
        raise DegenerateCurveError(f"above-threshold region is the single point t={curve.t[a]}; stage 2 would be empty")
    return int(curve.t[b]), int(curve.t[a])


def stage_mean_scores(curve: ScoreCurve, plan: StagePlan) -> tuple[float, float, float]:
    means = []
    for lo, hi in plan.stage_bounds():
        vals = curve.restrict(lo, hi)
        if vals.size == 0:
            raise DegenerateCurveError(f"stage [{lo}, {hi}] has no curve points")
        means.append(float(vals.mean()))
    return tuple(means)


def stage_weights(plan: StagePlan, weighting: str, steps: int | None = None) -> np.ndarray:
    if weighting == "uniform":
        w = np.ones(3)
    elif weighting == "step":
        w = plan.step_counts(steps).astype(np.float64)
    else:
        raise ValueError(f"weighting must be 'uniform' or 'step', got {weighting!r}")
    return w / w.sum()


def aggregate_sparsity(sparsities, weights) -> float:
    return float(np.dot(np.asarray(sparsities, dtype=np.float64), weights))


def allocate_sparsity(plan: StagePlan, curve: ScoreCurve, target_aggregate: float,
                      weighting: str = "uniform", steps: int | None = None,
                      s_max: float = S_MAX) -> StagePlan:
    """Fill per-stage sparsities with s_i proportional to 1 - normalized mean score.

    Mean stage scores are min-max normalized over the three stages. The scale
    is solved so the weighted aggregate hits ``target_aggregate``; stages that
    would exceed ``s_max`` are pinned there and the remaining budget is spread
    over the others in the same proportions.
    """
    if not 0 <= target_aggregate < 1:
        raise ValueError("target aggregate must lie in [0, 1)")
    means = np.array(stage_mean_scores(curve, plan))
    w = stage_weights(plan, weighting, steps)

    spread = means.max() - means.min()
    if spread > 0:
        raw = 1.0 - (means - means.min()) / spread
    else:
        raw = np.ones(3)

    s = np.zeros(3)
    if target_aggregate > 0:
        pinned = np.zeros(3, dtype=bool)
        while True:
            budget = target_aggregate - float(np.dot(w[pinned], np.full(pinned.sum(), s_max)))
            denom = float(np.dot(w[~pinned], raw[~pinned]))
            if denom <= 0:
                raise InfeasibleAllocationError(
                    f"target {target_aggregate} needs more than s_max={s_max} in every stage that can absorb it")
            s[~pinned] = raw[~pinned] * (budget / denom)
            s[pinned] = s_max
            over = (~pinned) & (s > s_max)
            if not over.any():
                break
            pinned |= over
    return replace(plan, sparsities=tuple(float(v) for v in s), mean_scores=tuple(float(v) for v in means),
                   aggregate=float(target_aggregate), weighting=weighting, lam=curve.lam)


# --- reference allocation tables -----------------------------------------------

@dataclass(frozen=True)
class AllocationRow:
    sparsities: tuple[float, float, float]
    dividers: tuple[int, int]
    note: str = ""


@dataclass
class AllocationTable:
    rows: dict[tuple[str, str], AllocationRow] = field(default_factory=dict)

    @staticmethod
    def key(aggregate: float) -> str:
        return f"{float(aggregate):.2f}"

    def add(self, family: str, aggregate: float, row: AllocationRow):
        self.rows[(family.lower(), self.key(aggregate))] = row

    def names(self) -> list[str]:
        return sorted(f"{fam}-{agg}" for fam, agg in self.rows)


def _default_table() -> AllocationTable:
    table = AllocationTable()
    dit = {0.25: (0.50, 0.02, 0.06), 0.30: (0.60, 0.04, 0.10), 0.35: (0.70, 0.06, 0.20),
           0.40: (0.80, 0.08, 0.30), 0.45: (0.90, 0.10, 0.40), 0.50: (0.90, 0.15, 0.40)}
    for agg, s in dit.items():
        table.add("dit", agg, AllocationRow(s, (900, 450), "DiT-XL/2, linear schedule, M=0.55"))
    sdxl = {0.10: (0.30, 0.03, 0.15), 0.15: (0.40, 0.04, 0.20),
            0.20: (0.60, 0.06, 0.30), 0.30: (0.80, 0.08, 0.40)}
    for agg, s in sdxl.items():
        table.add("sdxl", agg, AllocationRow(s, (900, 250), "SDXL, scaled-linear schedule, M=0.55"))
    return table


DEFAULT_TABLE = _default_table()

# Divider pairs reported for the linear schedule when only M varies. These use a
# different axis reading than the table rows above (550/100 vs 900/450 at M=0.55).
LINEAR_DIVIDERS_BY_M = {0.45: (600, 50), 0.55: (550, 100), 0.70: (500, 130)}

# Per-stage ablation allocations at nominal aggregate 0.3, dividers (900, 450).
ABLATION_ALLOCATIONS = {
    "uniform": (0.3, 0.3, 0.3),
    "sparser_stage1": (0.9, 0.04, 0.1),
    "sparser_stage2": (0.6, 0.15, 0.1),
    "non_snr_refined": (0.6, 0.04, 0.4),
    "ours": (0.6, 0.04, 0.1),
}


def lookup_allocation(table: AllocationTable | None, model_family: str, aggregate: float):
    """Return ``(s1, s2, s3, (divider1, divider2))`` stored for a preset."""
    table = DEFAULT_TABLE if table is None else table
    key = (model_family.lower(), table.key(aggregate))
    if key not in table.rows:
        raise PresetLookupError(f"no allocation preset for {model_family!r} at aggregate {aggregate}; "
                                f"known: {', '.join(table.names())}")
    row = table.rows[key]
    return (*row.sparsities, row.dividers)


def parse_preset(name: str) -> tuple[str, float]:
    """``'dit-0.30'`` -> ``('dit', 0.30)``."""
    family, _, agg = name.rpartition("-")
    if not family:
        raise PresetLookupError(f"preset name must look like 'dit-0.30', got {name!r}")
    try:
        return family, float(agg)
    except ValueError:
        raise PresetLookupError(f"bad aggregate in preset name {name!r}") from None


def preset_plan(name: str, horizon: int = 1000, table: AllocationTable | None = None) -> StagePlan:
    family, agg = parse_preset(name)
    s1, s2, s3, dividers = lookup_allocation(table, family, agg)
    return StagePlan(dividers=dividers, horizon=horizon, sparsities=(s1, s2, s3),
                     M=0.55, aggregate=agg, weighting="preset")


def uniform_thirds(horizon: int) -> tuple[int, int]:
    """Dividers splitting 1..T into three equal thirds (667, 333 for T = 1000)."""
    return int(math.floor(horizon * 2 / 3 + 0.5)), int(math.floor(horizon / 3))
