from __future__ import annotations

import math

import numpy as np
import pytest

from poolforge.analysis import (
    STATISTICS,
    ContrastKind,
    PoolData,
    bootstrap_ci,
    bootstrap_draws,
    cell_contrasts,
    curve_auc,
    delta_base,
    delta_div,
    delta_repr,
    design_average,
    design_contrasts,
    design_rarefaction,
    efficiency,
    efficiency_table,
    pipeline_tokens,
    r_tok,
    resample_indices,
    summarize_rarefaction,
)
from poolforge.backends import MockBackend
from poolforge.core import Family, Method, Strategy
from poolforge.diversity import RarefiedMetric, d_pair, rarefaction_auc, rarefy
from poolforge.errors import AnalysisError
from poolforge.geometry import DistanceMatrix
from poolforge.orchestrator import CellRunner

from conftest import random_distances

FAMILIES = {"aut_key": Family.AUT, "aut_shoe": Family.AUT, "slogan_soda": Family.SLOGANS}


def _pool_data(cell, n=8, seed=0, qz=True):
    rng = np.random.default_rng(seed)
    return PoolData(
        cell,
        random_distances(n, seed=seed),
        rng.integers(0, 4, size=n),
        12,
        rng.standard_normal(n) if qz else None,
    )


########################################
# TOKENS
########################################


def test_token_identities_on_mock_runs(manifest):
    runner = CellRunner(backend=MockBackend(model_id="m"))
    baseline = runner.run(manifest.cell("m", "aut_key", "indep", "neutral"), 6)
    strat = runner.run(manifest.cell("m", "aut_key", "strat", "neutral"), 6)
    peer1 = runner.run(manifest.cell("m", "aut_key", "peer1", "diverge"), 6)

    base_tokens = pipeline_tokens(baseline)
    assert r_tok(base_tokens, base_tokens) == 1.0
    assert pipeline_tokens(strat) == strat.planning_usage.total + strat.evaluated.usage.total
    assert pipeline_tokens(peer1) == peer1.seed.usage.total + peer1.evaluated.usage.total
    assert r_tok(pipeline_tokens(peer1), base_tokens) > 1.0


def test_pipeline_tokens_requires_upstream_usage(manifest):
    run = CellRunner(backend=MockBackend(model_id="m")).run(manifest.cell("m", "aut_key", "self", "neutral"), 2)
    without_seed = type(run)(run.cell, run.evaluated)
    with pytest.raises(AnalysisError, match="seed pool usage"):
        pipeline_tokens(without_seed)


def test_efficiency_per_100k_tokens():
    assert efficiency(0.05, 200_000) == pytest.approx(0.025)
    with pytest.raises(AnalysisError):
        efficiency(0.05, 0)
    with pytest.raises(AnalysisError):
        r_tok(10, 0)


########################################
# CONTRASTS
########################################


def _grid(manifest, prompts=("aut_key", "slogan_soda"), methods=(Method.INDEP, Method.STRAT)):
    return [
        manifest.cell("m", prompt, method, strategy)
        for prompt in prompts
        for method in methods
        for strategy in Strategy
    ]


def test_delta_base_and_delta_div(manifest):
    cells = _grid(manifest, prompts=("aut_key",))
    values = {c: float(i) for i, c in enumerate(cells)}
    base = delta_base(values)
    div = delta_div(values)
    indep_div = manifest.cell("m", "aut_key", "indep", "diverge")
    strat_div = manifest.cell("m", "aut_key", "strat", "diverge")
    assert base[indep_div] == 1.0
    assert base[cells[0]] == 0.0
    assert div[strat_div] == values[strat_div] - values[strat_div.with_strategy(Strategy.NEUTRAL)]
    assert set(div) == {indep_div, strat_div}
    with pytest.raises(AnalysisError):
        delta_base({strat_div: 1.0})


def test_delta_repr_compares_against_the_same_strategy(manifest):
    cells = _grid(manifest, prompts=("aut_key",), methods=(Method.INDEP, Method.STRAT, Method.REPR))
    values = {c: float(i) for i, c in enumerate(cells)}
    deltas = delta_repr(values)
    strat_div = manifest.cell("m", "aut_key", "strat", "diverge")
    repr_div = manifest.cell("m", "aut_key", "repr", "diverge")
    assert deltas[strat_div] == values[strat_div] - values[repr_div]
    assert all(c.method != Method.REPR for c in deltas)
    assert len(deltas) == 4
    assert delta_repr({strat_div: 1.0}) == {}


def test_design_average_weights_families_equally():
    values = {"aut_key": 1.0, "aut_shoe": 3.0, "slogan_soda": 10.0}
    average = design_average(values, FAMILIES)
    assert average.by_family[Family.AUT] == pytest.approx(2.0)
    assert average.overall == pytest.approx(6.0)
    with pytest.raises(AnalysisError):
        design_average({"aut_key": 1.0}, FAMILIES)
    arrays = design_average({p: np.full(3, v) for p, v in values.items()}, FAMILIES)
    assert np.allclose(arrays.overall, 6.0)


def test_cell_and_design_contrasts(manifest):
    cells = _grid(manifest)
    data = {c: _pool_data(c, seed=i) for i, c in enumerate(cells)}
    points = {c: d.statistics() for c, d in data.items()}
    samples = {c: bootstrap_draws(d, 100, master_seed=3).statistics for c, d in data.items()}

    per_cell = cell_contrasts(points, samples)
    # 2 prompts x (3 base + 2 diverge) contrasts x every statistic; no repr cells
    assert len(per_cell) == 2 * 5 * len(STATISTICS)
    row = per_cell[0].to_row()
    assert row["scope"] == "cell"
    assert row["ci_low"] <= row["ci_high"]

    families = {"aut_key": Family.AUT, "slogan_soda": Family.SLOGANS}
    design = design_contrasts(points, samples, families)
    scopes = {e.scope["scope"] for e in design}
    assert scopes == {"family", "overall"}
    overall = [
        e for e in design
        if e.scope["scope"] == "overall" and e.kind == ContrastKind.BASE
        and e.scope["method"] == "strat" and e.scope["strategy"] == "diverge" and e.statistic == "d_pair"
    ]
    assert len(overall) == 1
    expected = np.mean(
        [
            points[manifest.cell("m", p, "strat", "diverge")][0] - points[manifest.cell("m", p, "indep", "neutral")][0]
            for p in families
        ]
    )
    assert overall[0].point == pytest.approx(expected)


def test_design_contrasts_skip_incomplete_groups(manifest):
    cells = _grid(manifest, prompts=("aut_key",))
    points = {c: np.zeros(len(STATISTICS)) for c in cells}
    samples = {c: np.zeros((100, len(STATISTICS))) for c in cells}
    assert design_contrasts(points, samples, {"aut_key": Family.AUT, "slogan_soda": Family.SLOGANS}) == []


def test_efficiency_table_is_per_model_unless_pooling_is_allowed(manifest):
    cells = _grid(manifest) + [
        manifest.cell("other", p, method, s) for p in ("aut_key", "slogan_soda") for method in (Method.INDEP, Method.STRAT) for s in Strategy
    ]
    points = {c: np.full(len(STATISTICS), 1.0 if c.is_baseline else 1.5) for c in cells}
    tokens = {c: 100_000 for c in cells}
    estimated = {c: c.model_id == "other" for c in cells}
    families = {"aut_key": Family.AUT, "slogan_soda": Family.SLOGANS}

    rows = efficiency_table(points, tokens, estimated, families)
    assert {r.model_id for r in rows} == {"m", "other"}
    assert len(rows) == 2 * 3 * 3
    assert all(r.per_100k == pytest.approx(0.5) for r in rows)
    assert all(r.usage_estimated == (r.model_id == "other") for r in rows)

    pooled = efficiency_table(points, tokens, estimated, families, allow_cross_provider=True)
    assert {r.model_id for r in pooled} == {"m", "other", "pooled"}


########################################
# BOOTSTRAP
########################################


def test_resampling_streams_are_fixed_per_cell_and_replicate(manifest):
    cell = manifest.cell("m", "aut_key", "self", "neutral")
    other = manifest.cell("m", "aut_key", "peer1", "neutral")
    assert np.array_equal(resample_indices(1, cell, 4, 10), resample_indices(1, cell, 4, 10))
    assert not np.array_equal(resample_indices(1, cell, 4, 10), resample_indices(1, cell, 5, 10))
    assert not np.array_equal(resample_indices(1, cell, 4, 10), resample_indices(1, other, 4, 10))


def test_bootstrap_is_reproducible_and_degenerate_pools_have_zero_width(manifest):
    cell = manifest.cell("m", "aut_key", "indep", "neutral")
    data = _pool_data(cell, n=10, seed=4)
    first = bootstrap_ci([data], lambda p: d_pair(p.distances), replicates=200, rng_seed=9)
    again = bootstrap_ci([data], lambda p: d_pair(p.distances), replicates=200, rng_seed=9)
    assert first == again

    flat = PoolData(cell, DistanceMatrix(np.full((5, 5), 0.3) - np.eye(5) * 0.3), np.zeros(5, dtype=int), 12)
    ci = bootstrap_ci([flat], lambda p: float(np.mean(p.labels)), replicates=100)
    assert ci.ci_low == ci.ci_high == 0.0
    with pytest.raises(AnalysisError):
        bootstrap_ci([flat], lambda p: 0.0, replicates=50)


def test_bootstrap_intervals_cover_the_generating_mean(manifest):
    """Quality of an i.i.d. normal pool: the 95% interval should cover the true mean most of the time."""
    cell = manifest.cell("m", "aut_key", "indep", "neutral")
    D = random_distances(50, seed=0)
    covered = 0
    for trial in range(100):
        qz = np.random.default_rng(trial).normal(loc=0.5, size=50)
        data = PoolData(cell, D, np.zeros(50, dtype=int), 12, qz)
        ci = bootstrap_ci([data], lambda p: float(p.qz.mean()), replicates=400, rng_seed=trial)
        covered += ci.ci_low <= 0.5 <= ci.ci_high
    assert covered >= 90


def test_missing_quality_gives_nan_estimates(manifest):
    cell = manifest.cell("m", "aut_key", "indep", "neutral")
    data = _pool_data(cell, qz=False)
    quality = STATISTICS.index("quality")
    assert math.isnan(data.statistics()[quality])
    rows = bootstrap_draws(data, 100, 0).statistics
    assert np.isnan(rows[:, quality]).all()


########################################
# RAREFACTION SUMMARIES
########################################


def test_auc_statistics_follow_the_given_curves(manifest):
    data = _pool_data(manifest.cell("m", "aut_key", "strat", "neutral"), n=10, seed=3)
    curves = {m: data.curve(m, 40, 11) for m in RarefiedMetric}
    observed = data.statistics({m: c.values for m, c in curves.items()})
    assert observed[STATISTICS.index("auc_d_pair")] == pytest.approx(rarefaction_auc(curves[RarefiedMetric.D_PAIR]))
    assert observed[STATISTICS.index("auc_d_ent")] == pytest.approx(rarefaction_auc(curves[RarefiedMetric.D_ENT]))
    assert math.isnan(data.statistics()[STATISTICS.index("auc_d_ent")])


def test_bootstrap_draws_share_replicates_across_statistics(manifest):
    data = _pool_data(manifest.cell("m", "aut_key", "self", "diverge"), n=9, seed=5)
    draws = bootstrap_draws(data, 120, master_seed=2, rarefaction_seed=4)
    assert draws.replicates == 120
    assert draws.curves[RarefiedMetric.D_PAIR].shape == (120, 9)

    for r in (0, 57, 119):
        resampled = data.take(resample_indices(2, data.cell, r, data.n))
        plain = resampled.statistics()
        assert draws.statistics[r, 0] == pytest.approx(plain[0])
        assert draws.full_values(RarefiedMetric.D_PAIR)[r] == pytest.approx(plain[0])
        assert draws.full_values(RarefiedMetric.D_ENT)[r] == pytest.approx(plain[STATISTICS.index("d_ent")])
        assert draws.statistics[r, STATISTICS.index("auc_d_pair")] == pytest.approx(
            curve_auc(draws.curves[RarefiedMetric.D_PAIR][r], RarefiedMetric.D_PAIR)
        )

    again = bootstrap_draws(data, 120, master_seed=2, rarefaction_seed=4)
    assert np.array_equal(draws.statistics, again.statistics)


def test_baseline_reaches_its_own_target_within_the_pool(manifest):
    baseline = _pool_data(manifest.cell("m", "aut_key", "indep", "neutral"), n=12, seed=1)
    draws = bootstrap_draws(baseline, 200, master_seed=5)
    for metric in RarefiedMetric:
        summary = summarize_rarefaction(
            metric, math.nan, draws.curves[metric], draws.full_values(metric), repeats=1
        )
        # every replicate curve ends at its own target
        assert summary.not_reached == 0
        assert metric.q_min <= summary.first_hit_low <= summary.first_hit_high <= baseline.n
        assert summary.replicates == 200


def test_first_hit_targets_come_from_the_same_replicate():
    # replicate 0 needs 0.5, replicate 1 needs 0.9
    curves = np.array([[0.0, 0.4, 0.6, 0.95], [0.0, 0.4, 0.6, 0.95]])
    summary = summarize_rarefaction(RarefiedMetric.D_PAIR, 0.5, curves, np.array([0.5, 0.9]), repeats=7)
    assert summary.first_hit_low == pytest.approx(3.0 + 0.025 * 1)
    assert summary.first_hit_mean == pytest.approx(3.5)
    assert summary.auc == 0.5
    assert summary.auc_low == summary.auc_high == pytest.approx((0.4 + 0.6 + 0.95) / 3)
    row = summary.to_row()
    assert (row["metric"], row["repeats"], row["replicates"]) == ("d_pair", 7, 2)

    unreachable = summarize_rarefaction(RarefiedMetric.D_PAIR, 0.5, curves, np.full(2, 5.0), repeats=7)
    assert unreachable.not_reached == 2
    assert math.isnan(unreachable.first_hit_mean)
    with pytest.raises(AnalysisError):
        summarize_rarefaction(RarefiedMetric.D_PAIR, 0.5, curves, np.zeros(3), repeats=7)


def test_treated_pool_against_baseline_targets(manifest):
    baseline = _pool_data(manifest.cell("m", "aut_key", "indep", "neutral"), n=10, seed=1)
    treated = _pool_data(manifest.cell("m", "aut_key", "strat", "diverge"), n=10, seed=2)
    targets = bootstrap_draws(baseline, 100, master_seed=5).full_values(RarefiedMetric.D_PAIR)
    draws = bootstrap_draws(treated, 100, master_seed=5)
    curve = rarefy(treated.distances, RarefiedMetric.D_PAIR, repeats=50, rng_seed=1)
    summary = summarize_rarefaction(
        RarefiedMetric.D_PAIR, rarefaction_auc(curve), draws.curves[RarefiedMetric.D_PAIR], targets, repeats=50
    )
    assert summary.auc == pytest.approx(rarefaction_auc(curve))
    assert summary.auc_low <= summary.auc_high
    assert 0 <= summary.not_reached <= 100
    if summary.not_reached < 100:
        assert 2 <= summary.first_hit_mean <= 10


def test_design_rarefaction_averages_curves_per_replicate():
    families = {"aut_key": Family.AUT, "aut_shoe": Family.AUT, "slogan_soda": Family.SLOGANS}
    flat = {
        "aut_key": np.array([[0.0, 0.2, 0.4]]),
        "aut_shoe": np.array([[0.0, 0.6, 0.8]]),
        "slogan_soda": np.array([[0.0, 0.1, 0.9]]),
    }
    curves = {p: {m: c for m in RarefiedMetric} for p, c in flat.items()}
    targets = {p: {m: np.array([0.5]) for m in RarefiedMetric} for p in flat}
    aucs = {"aut_key": {m: 0.1 for m in RarefiedMetric}, "aut_shoe": {m: 0.3 for m in RarefiedMetric}, "slogan_soda": {m: 0.8 for m in RarefiedMetric}}

    rows = design_rarefaction(("m", Method.STRAT, Strategy.DIVERGE), aucs, curves, targets, families, repeats=5)
    assert len(rows) == 2 * 3
    by_scope = {(r["metric"], r["scope"], r["family"]): r for r in rows}
    aut = by_scope[("d_ent", "family", "aut")]
    # averaged AUT curve is [0, 0.4, 0.6]: reaches 0.5 at q = 3
    assert aut["first_hit_mean"] == 3.0
    assert aut["auc"] == pytest.approx(0.2)
    assert aut["prompt_id"] == "" and aut["method"] == "strat"
    overall = by_scope[("d_ent", "overall", "all")]
    # overall curve averages the AUT and slogan curves: [0, 0.25, 0.75]
    assert overall["first_hit_mean"] == 3.0
    assert overall["auc"] == pytest.approx((0.2 + 0.8) / 2)

    del curves["slogan_soda"]
    assert design_rarefaction(("m", Method.STRAT, Strategy.DIVERGE), aucs, curves, targets, families, 5) == []


def test_auc_contrasts_include_the_repr_reference(manifest):
    cells = _grid(manifest, prompts=("aut_key", "slogan_soda"), methods=(Method.INDEP, Method.STRAT, Method.REPR))
    data = {c: _pool_data(c, n=8, seed=i) for i, c in enumerate(cells)}
    points = {
        c: d.statistics({m: d.curve(m, 20, i).values for i, m in enumerate(RarefiedMetric)})
        for c, d in data.items()
    }
    samples = {c: bootstrap_draws(d, 100, master_seed=1).statistics for c, d in data.items()}
    families = {"aut_key": Family.AUT, "slogan_soda": Family.SLOGANS}

    design = design_contrasts(points, samples, families)
    repr_rows = [
        e for e in design
        if e.kind == ContrastKind.REPR and e.statistic == "auc_d_ent" and e.scope["scope"] == "overall"
    ]
    assert {(e.scope["method"], e.scope["strategy"]) for e in repr_rows} == {
        ("indep", "neutral"), ("indep", "diverge"), ("strat", "neutral"), ("strat", "diverge"),
    }
    auc = STATISTICS.index("auc_d_ent")
    strat_row = next(e for e in repr_rows if e.scope["method"] == "strat" and e.scope["strategy"] == "diverge")
    expected = np.mean(
        [
            points[manifest.cell("m", p, "strat", "diverge")][auc] - points[manifest.cell("m", p, "repr", "diverge")][auc]
            for p in families
        ]
    )
    assert strat_row.point == pytest.approx(expected)
    assert strat_row.ci_low <= strat_row.ci_high
