"""
Token accounting, planned contrasts, design averages and bootstrap intervals.

Bootstrap scheme: outputs are resampled with replacement within each pool, and
every statistic is recomputed on the resampled multiset (repeated outputs sit
at distance zero from each other). Replicate r of a cell always draws from the
stream seeded by (master seed, cell, r), so a cell's replicate r is the same
whichever contrast or average it feeds. Each resampled pool is also rarefied
along one random order; that curve gives the replicate's AUC values and is
checked for first-hit against the full indep-neutral metric of the same
replicate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from poolforge.core import CellCoord, Family, Method, Strategy
from poolforge.diversity import (
    DiversityReport,
    RarefactionCurve,
    RarefiedMetric,
    RegionLabels,
    d_ent,
    d_med,
    d_mst,
    d_nn,
    d_pair,
    first_hit,
    rarefy,
)
from poolforge.errors import AnalysisError
from poolforge.geometry import DistanceMatrix
from poolforge.log import get_logger
from poolforge.orchestrator import CellRun

logger = get_logger(__name__)

STATISTICS = ("d_pair", "d_nn", "d_med", "d_mst", "d_ent", "quality", "auc_d_pair", "auc_d_ent")
TOKENS_PER_EFFICIENCY_UNIT = 100_000


class ContrastKind(str, Enum):
    BASE = "base"
    DIVERGE = "diverge"
    REPR = "repr"


########################################
# TOKENS
########################################


def pipeline_tokens(run: CellRun) -> int:
    """
    Full inference path of a cell, prompt and completion tokens alike.

    indep: generation calls; strat: every planning attempt plus generation;
    two-stage methods: seed pool plus evaluated pool.
    """
    method = run.cell.method
    if method.two_stage and run.seed is None:
        raise AnalysisError(f"{run.cell.key}: seed pool usage missing")
    if method == Method.STRAT and not run.planning:
        raise AnalysisError(f"{run.cell.key}: planning usage missing")
    total = run.usage.total
    if total <= 0:
        raise AnalysisError(f"{run.cell.key}: no token usage recorded")
    return total


def r_tok(cell_tokens: int, baseline_tokens: int) -> float:
    if baseline_tokens <= 0:
        raise AnalysisError("baseline pipeline tokens must be positive")
    return cell_tokens / baseline_tokens


def efficiency(delta: float, tokens: float) -> float:
    """Gain per 100k pipeline tokens."""
    if tokens <= 0:
        raise AnalysisError("pipeline tokens must be positive")
    return delta / (tokens / TOKENS_PER_EFFICIENCY_UNIT)


########################################
# CONTRASTS AND DESIGN AVERAGES
########################################


def delta_base(values: Mapping[CellCoord, Any]) -> dict[CellCoord, Any]:
    """Y(cell) - Y(indep-neutral cell of the same model and prompt)."""
    deltas = {}
    for cell, value in values.items():
        baseline = cell.baseline()
        if baseline not in values:
            raise AnalysisError(f"{cell.key}: baseline cell {baseline.key} missing")
        deltas[cell] = value - values[baseline]
    return deltas


def delta_div(values: Mapping[CellCoord, Any]) -> dict[CellCoord, Any]:
    """Y(diverge) - Y(neutral) within a method; keyed by the diverge cell."""
    deltas = {}
    for cell, value in values.items():
        if cell.strategy != Strategy.DIVERGE:
            continue
        neutral = cell.with_strategy(Strategy.NEUTRAL)
        if neutral not in values:
            raise AnalysisError(f"{cell.key}: neutral counterpart {neutral.key} missing")
        deltas[cell] = value - values[neutral]
    return deltas


def delta_repr(values: Mapping[CellCoord, Any]) -> dict[CellCoord, Any]:
    """Y(cell) - Y(repr cell of the same model, prompt and strategy); cells without one are left out."""
    deltas = {}
    for cell, value in values.items():
        reference = cell.with_method(Method.REPR)
        if cell.method != Method.REPR and reference in values:
            deltas[cell] = value - values[reference]
    return deltas


@dataclass(frozen=True)
class DesignAverage:
    by_family: Mapping[Family, Any]
    overall: Any


def design_average(
    values: Mapping[str, Any],
    families: Mapping[str, Family],
) -> DesignAverage:
    """
    Unweighted mean over prompts within each family, then over families.

    `families` maps every prompt the design includes to its family; each of
    those prompts needs a value. Values may be scalars or replicate arrays.
    """
    missing = [p for p in families if p not in values]
    if missing:
        raise AnalysisError(f"design average is missing prompts: {', '.join(missing)}")
    by_family: dict[Family, Any] = {}
    for family in Family:
        prompts = [p for p, f in families.items() if f == family]
        if prompts:
            by_family[family] = np.mean(np.stack([np.asarray(values[p], dtype=np.float64) for p in prompts]), axis=0)
    if not by_family:
        raise AnalysisError("design average over no prompts")
    overall = np.mean(np.stack(list(by_family.values())), axis=0)
    return DesignAverage(by_family, overall)


########################################
# BOOTSTRAP
########################################


def stream_id(cell: CellCoord) -> int:
    return int(hashlib.sha256(cell.key.encode("utf-8")).hexdigest()[:8], 16)


def resample_indices(master_seed: int, cell: CellCoord, replicate: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, stream_id(cell), replicate]))
    return rng.integers(0, n, size=n)


@dataclass(frozen=True, eq=False)
class PoolData:
    """Everything a statistic needs about one evaluated pool."""

    cell: CellCoord
    distances: DistanceMatrix
    labels: np.ndarray
    k: int
    # per-slot standardized quality; None when the task has no scorer
    qz: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.distances.n

    def take(self, indices: np.ndarray) -> "PoolData":
        return PoolData(
            self.cell,
            self.distances.take(indices),
            self.labels[indices],
            self.k,
            self.qz[indices] if self.qz is not None else None,
        )

    def curve(
        self, metric: RarefiedMetric, repeats: int, rng_seed: int | np.random.SeedSequence
    ) -> RarefactionCurve:
        if metric == RarefiedMetric.D_PAIR:
            return rarefy(self.distances, metric, repeats, rng_seed)
        return rarefy(RegionLabels(self.labels, self.k), metric, repeats, rng_seed)

    def statistics(self, curves: Mapping[RarefiedMetric, np.ndarray] | None = None) -> np.ndarray:
        """Values in STATISTICS order; the AUC entries need `curves` and are NaN without them."""
        curves = curves or {}
        return np.array(
            [
                d_pair(self.distances),
                d_nn(self.distances),
                d_med(self.distances),
                d_mst(self.distances),
                d_ent(self.labels, self.k),
                float(self.qz.mean()) if self.qz is not None else math.nan,
                *(curve_auc(curves[m], m) if m in curves else math.nan for m in RarefiedMetric),
            ]
        )


def curve_auc(values: np.ndarray, metric: RarefiedMetric) -> float:
    """AUC of one curve, or of several stacked (repeats, n) curves."""
    return float(np.asarray(values, dtype=np.float64)[..., metric.q_min - 1 :].mean())


@dataclass(frozen=True, eq=False)
class ReplicateDraws:
    """Output-level bootstrap of one pool."""

    # (replicates, len(STATISTICS))
    statistics: np.ndarray
    # per metric, (replicates, n): one rarefaction order of every resampled pool
    curves: Mapping[RarefiedMetric, np.ndarray]

    @property
    def replicates(self) -> int:
        return self.statistics.shape[0]

    def full_values(self, metric: RarefiedMetric) -> np.ndarray:
        """Full-pool metric of every resampled pool, i.e. each curve at q = n."""
        return self.curves[metric][:, -1]


def bootstrap_draws(
    data: PoolData, replicates: int, master_seed: int, rarefaction_seed: int = 0
) -> ReplicateDraws:
    """
    Replicate r resamples the pool from the (master_seed, cell, r) stream and
    rarefies the resampled pool along one order drawn from
    (rarefaction_seed, cell, metric, r).
    """
    rows = np.empty((replicates, len(STATISTICS)))
    curves = {m: np.empty((replicates, data.n)) for m in RarefiedMetric}
    cell_stream = stream_id(data.cell)
    for r in range(replicates):
        resampled = data.take(resample_indices(master_seed, data.cell, r, data.n))
        drawn = {}
        for i, metric in enumerate(RarefiedMetric):
            seed = np.random.SeedSequence([rarefaction_seed, cell_stream, i, r])
            drawn[metric] = resampled.curve(metric, 1, seed).values
            curves[metric][r] = drawn[metric][0]
        rows[r] = resampled.statistics(drawn)
    return ReplicateDraws(rows, curves)


@dataclass(frozen=True)
class ContrastEstimate:
    # replicate mean, observed estimate and percentile interval
    value: float
    ci_low: float
    ci_high: float
    kind: ContrastKind
    replicates: int
    point: float = math.nan
    statistic: str = ""
    scope: Mapping[str, str] = field(default_factory=dict)

    def to_row(self) -> dict[str, Any]:
        return {
            **self.scope,
            "kind": self.kind.value,
            "statistic": self.statistic,
            "point": self.point,
            "value": self.value,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "replicates": self.replicates,
        }


def estimate(
    samples: np.ndarray,
    point: float = math.nan,
    kind: ContrastKind = ContrastKind.BASE,
    statistic: str = "",
    scope: Mapping[str, str] | None = None,
) -> ContrastEstimate:
    samples = np.asarray(samples, dtype=np.float64)
    if np.isnan(samples).any():
        low = high = value = math.nan
    else:
        low, high = np.percentile(samples, [2.5, 97.5])
        value = float(samples.mean())
    return ContrastEstimate(
        value=float(value),
        ci_low=float(low),
        ci_high=float(high),
        kind=kind,
        replicates=len(samples),
        point=float(point),
        statistic=statistic,
        scope=dict(scope or {}),
    )


def bootstrap_ci(
    pools: Sequence[PoolData],
    statistic: Callable[..., float],
    replicates: int = 1000,
    rng_seed: int = 0,
    kind: ContrastKind = ContrastKind.BASE,
) -> ContrastEstimate:
    """
    Percentile interval of `statistic(*pools)` under output-level resampling.

    Each pool is resampled independently in every replicate.
    """
    if replicates < 100:
        raise AnalysisError("bootstrap needs at least 100 replicates")
    samples = np.array(
        [
            statistic(*(p.take(resample_indices(rng_seed, p.cell, r, p.n)) for p in pools))
            for r in range(replicates)
        ]
    )
    return estimate(samples, statistic(*pools), kind)


########################################
# CELL SUMMARIES
########################################


@dataclass(frozen=True)
class RarefactionSummary:
    metric: RarefiedMetric
    auc: float
    auc_low: float
    auc_high: float
    first_hit_mean: float
    first_hit_low: float
    first_hit_high: float
    not_reached: int
    repeats: int
    replicates: int

    def to_row(self) -> dict[str, Any]:
        return {
            "metric": self.metric.value,
            "auc": self.auc,
            "auc_low": self.auc_low,
            "auc_high": self.auc_high,
            "first_hit_mean": self.first_hit_mean,
            "first_hit_low": self.first_hit_low,
            "first_hit_high": self.first_hit_high,
            "not_reached": self.not_reached,
            "repeats": self.repeats,
            "replicates": self.replicates,
        }


def summarize_rarefaction(
    metric: RarefiedMetric | str,
    auc: float,
    replicate_curves: np.ndarray,
    targets: np.ndarray,
    repeats: int,
) -> RarefactionSummary:
    """
    `auc` is the observed pool's value over `repeats` orders. Its interval and
    the first-hit figures come from the bootstrap: curve r is checked against
    target r, the full indep-neutral metric of the same replicate.
    """
    metric = RarefiedMetric(metric)
    replicate_curves = np.asarray(replicate_curves, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if replicate_curves.ndim != 2 or len(targets) != len(replicate_curves):
        raise AnalysisError("first-hit needs one target per replicate curve")

    aucs = replicate_curves[:, metric.q_min - 1 :].mean(axis=1)
    hits = [first_hit(curve, target, metric.q_min) for curve, target in zip(replicate_curves, targets)]
    reached = np.array([h for h in hits if h is not None], dtype=np.float64)
    if reached.size:
        hit_low, hit_high = np.percentile(reached, [2.5, 97.5])
        hit_mean = float(reached.mean())
    else:
        hit_low = hit_high = hit_mean = math.nan
    auc_low, auc_high = np.percentile(aucs, [2.5, 97.5])
    return RarefactionSummary(
        metric=metric,
        auc=float(auc),
        auc_low=float(auc_low),
        auc_high=float(auc_high),
        first_hit_mean=hit_mean,
        first_hit_low=float(hit_low),
        first_hit_high=float(hit_high),
        not_reached=len(hits) - int(reached.size),
        repeats=repeats,
        replicates=len(hits),
    )


def design_rarefaction(
    group: tuple[str, Method, Strategy],
    aucs: Mapping[str, Mapping[RarefiedMetric, float]],
    curves: Mapping[str, Mapping[RarefiedMetric, np.ndarray]],
    targets: Mapping[str, Mapping[RarefiedMetric, np.ndarray]],
    families: Mapping[str, Family],
    repeats: int,
) -> list[dict[str, Any]]:
    """
    Family and overall rarefaction rows for one (model, method, strategy).

    Replicate curves and targets are design-averaged per replicate before the
    first-hit search, so a family row reads one averaged curve per replicate.
    """
    model_id, method, strategy = group
    missing = sorted(set(families) - set(curves))
    if missing:
        logger.warning(
            "%s/%s-%s: design rarefaction skipped, prompts missing: %s",
            model_id, method.value, strategy.value, ", ".join(missing),
        )
        return []

    base_scope = {"model_id": model_id, "prompt_id": "", "method": method.value, "strategy": strategy.value}
    rows = []
    for metric in RarefiedMetric:
        point = design_average({p: aucs[p][metric] for p in families}, families)
        curve = design_average({p: curves[p][metric] for p in families}, families)
        target = design_average({p: targets[p][metric] for p in families}, families)
        scoped = [
            ({**base_scope, "scope": "family", "family": family.value}, point.by_family[family], curve.by_family[family], target.by_family[family])
            for family in curve.by_family
        ]
        scoped.append(({**base_scope, "scope": "overall", "family": "all"}, point.overall, curve.overall, target.overall))
        for scope, auc, averaged, averaged_target in scoped:
            rows.append({**scope, **summarize_rarefaction(metric, float(auc), averaged, averaged_target, repeats).to_row()})
    return rows


@dataclass(frozen=True)
class CellSummary:
    cell: CellCoord
    n: int
    diversity: DiversityReport
    quality: float
    pipeline_tokens: int
    r_tok: float
    usage_estimated: bool = False
    format_violations: int = 0
    rarefaction: tuple[RarefactionSummary, ...] = ()

    def to_row(self) -> dict[str, Any]:
        row: dict[str, Any] = {**self.cell.to_dict(), "n": self.n}
        row.update(self.diversity.to_dict())
        row.update(
            {
                "quality": self.quality,
                "pipeline_tokens": self.pipeline_tokens,
                "r_tok": self.r_tok,
                "usage_estimated": self.usage_estimated,
                "format_violations": self.format_violations,
            }
        )
        for summary in self.rarefaction:
            row[f"auc_{summary.metric.value}"] = summary.auc
            row[f"first_hit_{summary.metric.value}"] = summary.first_hit_mean
        return row


########################################
# CONTRAST TABLES
########################################


def _paired(values: Mapping[CellCoord, Any]) -> dict[CellCoord, Any]:
    """Cells that take part in a diverge contrast: neutral ones and diverge ones with a neutral twin."""
    return {
        c: v
        for c, v in values.items()
        if c.strategy == Strategy.NEUTRAL or c.with_strategy(Strategy.NEUTRAL) in values
    }


def _deltas(kind: ContrastKind, values: Mapping[CellCoord, Any]) -> dict[CellCoord, Any]:
    if kind == ContrastKind.BASE:
        return {c: v for c, v in delta_base(values).items() if not c.is_baseline}
    if kind == ContrastKind.DIVERGE:
        return delta_div(_paired(values))
    return delta_repr(values)


def cell_contrasts(
    points: Mapping[CellCoord, np.ndarray],
    samples: Mapping[CellCoord, np.ndarray],
    statistics: Sequence[str] = STATISTICS,
) -> list[ContrastEstimate]:
    """Per-cell base, diverge and repr contrasts for every statistic."""
    estimates = []
    for kind in ContrastKind:
        point_deltas = _deltas(kind, points)
        sample_deltas = _deltas(kind, samples)
        for cell in sorted(point_deltas):
            scope = {
                "scope": "cell",
                "model_id": cell.model_id,
                "prompt_id": cell.prompt_id,
                "family": cell.family.value,
                "method": cell.method.value,
                "strategy": cell.strategy.value,
            }
            for i, name in enumerate(statistics):
                estimates.append(
                    estimate(sample_deltas[cell][:, i], point_deltas[cell][i], kind, name, scope)
                )
    return estimates


def design_contrasts(
    points: Mapping[CellCoord, np.ndarray],
    samples: Mapping[CellCoord, np.ndarray],
    families: Mapping[str, Family],
    statistics: Sequence[str] = STATISTICS,
) -> list[ContrastEstimate]:
    """
    Design-average contrasts per (model, method, strategy): one row per family
    and one overall row, with the bootstrap carried through the averaging.
    """
    estimates = []
    for kind in ContrastKind:
        point_deltas = _deltas(kind, points)
        sample_deltas = _deltas(kind, samples)
        groups: dict[tuple[str, Method, Strategy], list[CellCoord]] = {}
        for cell in point_deltas:
            groups.setdefault((cell.model_id, cell.method, cell.strategy), []).append(cell)

        for (model_id, method, strategy), cells in sorted(groups.items()):
            by_prompt = {c.prompt_id: c for c in cells}
            present = {p: f for p, f in families.items() if p in by_prompt}
            if len(present) != len(families):
                logger.warning(
                    "%s/%s-%s: design average skipped, prompts missing: %s",
                    model_id, method.value, strategy.value,
                    ", ".join(sorted(set(families) - set(present))),
                )
                continue
            point_avg = design_average({p: point_deltas[c] for p, c in by_prompt.items()}, families)
            sample_avg = design_average({p: sample_deltas[c] for p, c in by_prompt.items()}, families)
            base_scope = {"model_id": model_id, "prompt_id": "", "method": method.value, "strategy": strategy.value}

            scoped = [
                ({**base_scope, "scope": "family", "family": family.value}, point_avg.by_family[family], sample_avg.by_family[family])
                for family in point_avg.by_family
            ]
            scoped.append(({**base_scope, "scope": "overall", "family": "all"}, point_avg.overall, sample_avg.overall))
            for scope, point, sample in scoped:
                for i, name in enumerate(statistics):
                    estimates.append(estimate(sample[:, i], point[i], kind, name, scope))
    return estimates


########################################
# EFFICIENCY
########################################


@dataclass(frozen=True)
class EfficiencyRow:
    model_id: str
    method: Method
    strategy: Strategy
    statistic: str
    delta: float
    mean_pipeline_tokens: float
    per_100k: float
    usage_estimated: bool

    def to_row(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "method": self.method.value,
            "strategy": self.strategy.value,
            "statistic": self.statistic,
            "delta_base": self.delta,
            "mean_pipeline_tokens": self.mean_pipeline_tokens,
            "per_100k_tokens": self.per_100k,
            "usage_estimated": self.usage_estimated,
        }


def efficiency_table(
    points: Mapping[CellCoord, np.ndarray],
    tokens: Mapping[CellCoord, int],
    estimated: Mapping[CellCoord, bool],
    families: Mapping[str, Family],
    statistics: Sequence[str] = ("d_pair", "d_ent", "quality"),
    allow_cross_provider: bool = False,
) -> list[EfficiencyRow]:
    """
    Design-average baseline contrast per 100k design-average pipeline tokens,
    per model. `points` hold observed values in STATISTICS order. A pooled
    cross-model row is added only when allowed, since providers count tokens
    differently.
    """
    columns = [STATISTICS.index(name) for name in statistics]
    deltas = delta_base(points)

    groups: dict[tuple[str, Method, Strategy], list[CellCoord]] = {}
    for cell in deltas:
        if not cell.is_baseline:
            groups.setdefault((cell.model_id, cell.method, cell.strategy), []).append(cell)

    rows: list[EfficiencyRow] = []
    pooled: dict[tuple[Method, Strategy], list[tuple[np.ndarray, float, bool]]] = {}
    for (model_id, method, strategy), cells in sorted(groups.items()):
        by_prompt = {c.prompt_id: c for c in cells}
        if set(families) - set(by_prompt):
            continue
        delta_avg = design_average({p: deltas[c][columns] for p, c in by_prompt.items()}, families).overall
        tokens_avg = float(design_average({p: tokens[c] for p, c in by_prompt.items()}, families).overall)
        flagged = any(estimated.get(c, False) for c in cells)
        pooled.setdefault((method, strategy), []).append((delta_avg, tokens_avg, flagged))
        for i, name in enumerate(statistics):
            delta = float(delta_avg[i])
            rows.append(
                EfficiencyRow(model_id, method, strategy, name, delta, tokens_avg, efficiency(delta, tokens_avg), flagged)
            )

    if allow_cross_provider:
        for (method, strategy), entries in sorted(pooled.items()):
            delta_avg = np.mean([e[0] for e in entries], axis=0)
            tokens_avg = float(np.mean([e[1] for e in entries]))
            flagged = any(e[2] for e in entries)
            for i, name in enumerate(statistics):
                delta = float(delta_avg[i])
                rows.append(
                    EfficiencyRow("pooled", method, strategy, name, delta, tokens_avg, efficiency(delta, tokens_avg), flagged)
                )
    return rows
