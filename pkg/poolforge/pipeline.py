"""
The five pipeline stages behind the CLI.

Run directory layout (everything under `output_dir`):

  cells/<model>/<prompt>/<method>-<strategy>/   seed.jsonl, evaluated.jsonl,
                                                planning.json, meta.json
  embeddings/cache/<embedder>/                  cached vectors (shards)
  embeddings/cells/<model>/<prompt>/<method>-<strategy>.npy
  embeddings/index.json
  regions/<prompt>.json, regions/<prompt>.centroids.npy
  scores/<prompt>.csv, scores/index.json
  analysis/*.csv, analysis/bootstrap.npz, analysis/index.json
  report/*.csv, report/run_manifest.json, report/failures.json
  failures.json, run_manifest.json

Each stage reads what the previous one wrote and stops with a StageError
naming the command to run when something is missing or out of date.
"""

from __future__ import annotations

import fnmatch
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from poolforge.__about__ import __version__
from poolforge.analysis import (
    STATISTICS,
    CellSummary,
    PoolData,
    bootstrap_draws,
    cell_contrasts,
    design_contrasts,
    design_rarefaction,
    efficiency_table,
    pipeline_tokens,
    r_tok,
    stream_id,
    summarize_rarefaction,
)
from poolforge.backends import make_backend
from poolforge.config import ProviderSecrets, RunConfig, dump_run_config
from poolforge.core import CellCoord, Family, Manifest, Method, Strategy, validate_pool
from poolforge.diversity import (
    RarefactionCurve,
    RarefiedMetric,
    RegionModel,
    diversity_report,
    fit_regions,
    rarefaction_auc,
)
from poolforge.embeddings import EmbeddingCache, embed_pool, get_embedder
from poolforge.errors import (
    AnalysisError,
    CellFailure,
    ConfigError,
    PoolforgeError,
    ScoreFileError,
    StageError,
)
from poolforge.geometry import EmbeddingSet, distance_matrix
from poolforge.log import get_logger
from poolforge.orchestrator import (
    CellRun,
    CellRunner,
    cell_dir,
    cell_hash,
    is_complete,
    read_cell_run,
    read_meta,
    utc_now,
    write_cell_failure,
    write_cell_run,
)
from poolforge.prompts import golden_index, judge_prompt_files, render_goldens
from poolforge.quality import (
    cell_quality,
    format_violations,
    ingest_scores,
    scorer_spec,
    slogan_lexical_table,
    standardize,
)

logger = get_logger(__name__)

CELL_COLUMNS = ["model_id", "prompt_id", "family", "method", "strategy"]
CELL_SUMMARY_COLUMNS = CELL_COLUMNS + [
    "n", "d_pair", "d_nn", "d_med", "d_mst", "d_ent", "quality",
    "pipeline_tokens", "r_tok", "usage_estimated", "format_violations",
    "auc_d_pair", "first_hit_d_pair", "auc_d_ent", "first_hit_d_ent",
]
CONTRAST_COLUMNS = [
    "scope", "model_id", "prompt_id", "family", "method", "strategy",
    "kind", "statistic", "point", "value", "ci_low", "ci_high", "replicates",
]
RAREFACTION_LONG_COLUMNS = ["cell", "metric", "q", "replicate", "value"]
RAREFACTION_CURVE_COLUMNS = CELL_COLUMNS + ["metric", "q", "mean", "ci_low", "ci_high"]
RAREFACTION_SUMMARY_COLUMNS = ["scope"] + CELL_COLUMNS + [
    "metric", "auc", "auc_low", "auc_high",
    "first_hit_mean", "first_hit_low", "first_hit_high", "not_reached", "repeats", "replicates",
]
EFFICIENCY_COLUMNS = [
    "model_id", "method", "strategy", "statistic",
    "delta_base", "mean_pipeline_tokens", "per_100k_tokens", "usage_estimated",
]
SCORE_COLUMNS = ["output_key", "scorer", "raw", "qz"]

REPORT_TABLES = {
    "cell_summaries.csv": CELL_SUMMARY_COLUMNS,
    "contrasts.csv": CONTRAST_COLUMNS,
    "rarefaction_long.csv": RAREFACTION_LONG_COLUMNS,
    "rarefaction_curves.csv": RAREFACTION_CURVE_COLUMNS,
    "rarefaction_summary.csv": RAREFACTION_SUMMARY_COLUMNS,
    "efficiency.csv": EFFICIENCY_COLUMNS,
}


########################################
# RUN DIRECTORY
########################################


class RunPaths:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.embeddings = self.root / "embeddings"
        self.embedding_cache = self.embeddings / "cache"
        self.embeddings_index = self.embeddings / "index.json"
        self.regions = self.root / "regions"
        self.scores = self.root / "scores"
        self.scores_index = self.scores / "index.json"
        self.analysis = self.root / "analysis"
        self.analysis_index = self.analysis / "index.json"
        self.bootstrap = self.analysis / "bootstrap.npz"
        self.report = self.root / "report"
        self.failures = self.root / "failures.json"
        self.run_manifest = self.root / "run_manifest.json"

    def cell(self, cell: CellCoord) -> Path:
        return cell_dir(self.root, cell)

    def embedding_file(self, cell: CellCoord) -> Path:
        return self.embeddings / "cells" / cell.model_id / cell.prompt_id / f"{cell.method.value}-{cell.strategy.value}.npy"

    def score_file(self, prompt_id: str) -> Path:
        return self.scores / f"{prompt_id}.csv"


def _read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(frame: pd.DataFrame, path: Path, columns: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.reindex(columns=list(columns)).to_csv(path, index=False)


@dataclass
class StageOutcome:
    stage: str
    done: int = 0
    skipped: int = 0
    failures: list[dict[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def fail(self, subject: str, error: Exception | str) -> None:
        logger.error("%s: %s failed: %s", self.stage, subject, error)
        self.failures.append({"subject": subject, "error": str(error)})

    def summary(self) -> str:
        return f"{self.stage}: {self.done} done, {self.skipped} skipped, {len(self.failures)} failed"


def record_failures(paths: RunPaths, outcome: StageOutcome) -> None:
    """failures.json keeps one list per stage; a stage rewrites only its own list."""
    data = _read_json(paths.failures) if paths.failures.exists() else {}
    data[outcome.stage] = outcome.failures
    _write_json(paths.failures, data)


def update_run_manifest(paths: RunPaths, config: RunConfig, stage: str, **extra: Any) -> None:
    data = _read_json(paths.run_manifest) if paths.run_manifest.exists() else {}
    data.update(
        {
            "poolforge_version": __version__,
            "settings_hash": config.settings_hash(),
            "generation_hash": config.generation_hash(),
            "config": config.model_dump(mode="json"),
        }
    )
    data.setdefault("stages", {})[stage] = {"finished_at": utc_now(), **extra}
    _write_json(paths.run_manifest, data)


def select_cells(
    config: RunConfig, manifest: Manifest, only_cells: Sequence[str] | None = None
) -> list[CellCoord]:
    """The run grid, optionally narrowed by shell globs over model/prompt/method/strategy."""
    cells = [
        manifest.cell(model_id, prompt_id, method, strategy)
        for model_id in config.models
        for prompt_id in config.prompts
        for method in config.methods
        for strategy in config.strategies
    ]
    if only_cells:
        cells = [c for c in cells if any(fnmatch.fnmatchcase(c.key, pattern) for pattern in only_cells)]
        if not cells:
            raise ConfigError(f"--only-cells matched no cell: {', '.join(only_cells)}")
    return cells


def _embedder(config: RunConfig):
    try:
        return get_embedder(config.embedder.name, config.embedder.batch_size)
    except (RuntimeError, ValueError) as e:
        raise ConfigError(f"embedder {config.embedder.name}: {e}") from e


def load_cell_runs(
    config: RunConfig, paths: RunPaths, cells: Iterable[CellCoord]
) -> tuple[dict[CellCoord, CellRun], list[dict[str, str]]]:
    """Complete cells of the grid, plus a failure entry for every cell that is not."""
    runs: dict[CellCoord, CellRun] = {}
    problems: list[dict[str, str]] = []
    stale: list[str] = []
    for cell in cells:
        directory = paths.cell(cell)
        meta = read_meta(directory)
        if meta is None:
            problems.append({"subject": cell.key, "error": "not generated"})
        elif meta.get("generation_hash") != config.generation_hash(cell.method):
            stale.append(cell.key)
        elif meta.get("status") != "complete":
            problems.append({"subject": cell.key, "error": f"generation failed: {meta.get('error', '')}"})
        else:
            runs[cell] = read_cell_run(directory)
    if stale:
        raise AnalysisError(
            f"{len(stale)} cells were generated with different settings (e.g. {stale[0]}); "
            "rerun `poolforge generate` before mixing them into this run"
        )
    if not runs:
        raise StageError("generated cells", "generate")
    return runs, problems


def prompt_cells(
    config: RunConfig, manifest: Manifest, only_cells: Sequence[str] | None = None
) -> tuple[list[CellCoord], set[str]]:
    """
    Every grid cell of the prompts a selection touches, plus the selected keys.

    Regions and z-scores are fitted over the whole corpus of a prompt, so a
    narrowed embed or score still reads all of that prompt's cells.
    """
    selected = select_cells(config, manifest, only_cells)
    prompts = {c.prompt_id for c in selected}
    cells = [c for c in select_cells(config, manifest) if c.prompt_id in prompts]
    return cells, {c.key for c in selected}


def _prompt_of(key: str) -> str:
    return key.rsplit("/", 3)[1]


def _previous_index(path: Path, config: RunConfig, **expected: Any) -> dict[str, Any]:
    """The index an earlier run of the stage left, if it was written under the same settings."""
    if not path.exists():
        return {}
    index = _read_json(path)
    if index.get("generation_hash") != config.generation_hash():
        return {}
    if any(index.get(field) != value for field, value in expected.items()):
        return {}
    return index


########################################
# GENERATE
########################################

BackendFactory = Callable[..., Any]


def cmd_generate(
    config: RunConfig,
    only_cells: Sequence[str] | None = None,
    resume: bool = True,
    backend_factory: BackendFactory = make_backend,
    secrets: ProviderSecrets | None = None,
) -> StageOutcome:
    manifest = config.load_manifest()
    paths = RunPaths(config.output_dir)
    cells = select_cells(config, manifest, only_cells)
    outcome = StageOutcome("generate")

    embedder = cache = None
    if any(c.method == Method.REPR for c in cells):
        embedder = _embedder(config)
        cache = EmbeddingCache(paths.embedding_cache, embedder.embedder_id)

    runners: dict[str, CellRunner] = {}
    for cell in cells:
        directory = paths.cell(cell)
        generation_hash = config.generation_hash(cell.method)
        if resume and is_complete(directory, cell_hash(cell, config.n, generation_hash)):
            outcome.skipped += 1
            continue

        if cell.model_id not in runners:
            backend = backend_factory(manifest.model(cell.model_id), config, secrets)
            runners[cell.model_id] = CellRunner(
                backend=backend,
                manifest=manifest,
                concurrency=config.backend.concurrency,
                max_attempts=config.backend.max_attempts,
                backoff_seconds=config.backend.backoff_seconds,
                planning_retries=config.backend.planning_retries,
                lenient_planning=config.backend.lenient_planning,
                partition_policy=config.partition_policy,
                partition_seed=config.seeds.partition,
                anchor_rule=config.anchor_rule,
                embedder=embedder,
                embedding_cache=cache,
            )
        runner = runners[cell.model_id]

        started_at = utc_now()
        logger.info("generating %s (n=%d)", cell.key, config.n)
        try:
            run = runner.run(cell, config.n)
            violations = validate_pool(run.evaluated) + (validate_pool(run.seed) if run.seed else [])
            if violations:
                raise CellFailure(f"{cell.key}: malformed pool: {violations[0]}")
        except PoolforgeError as e:
            failure = e if isinstance(e, CellFailure) else CellFailure(str(e))
            write_cell_failure(cell, failure, directory, generation_hash, config.n, started_at)
            outcome.fail(cell.key, failure)
            continue

        settings = {
            "backend": runner.backend.name,
            "seeds": config.seeds.model_dump(mode="json"),
            "partition_policy": config.partition_policy.value,
            "anchor_rule": config.anchor_rule.value,
            "embedder": config.embedder.name,
        }
        write_cell_run(run, directory, generation_hash, config.n, started_at, settings)
        outcome.done += 1

    record_failures(paths, outcome)
    update_run_manifest(paths, config, "generate", cells=len(cells), failed=len(outcome.failures))
    return outcome


########################################
# EMBED
########################################


def cmd_embed(config: RunConfig, only_cells: Sequence[str] | None = None) -> StageOutcome:
    """Embed every evaluated pool, then fit the semantic regions of each prompt."""
    manifest = config.load_manifest()
    paths = RunPaths(config.output_dir)
    cells, selected = prompt_cells(config, manifest, only_cells)
    runs, problems = load_cell_runs(config, paths, cells)
    outcome = StageOutcome("embed", failures=[p for p in problems if p["subject"] in selected])

    embedder = _embedder(config)
    cache = EmbeddingCache(paths.embedding_cache, embedder.embedder_id)

    embedded: dict[CellCoord, EmbeddingSet] = {}
    for cell, run in sorted(runs.items()):
        try:
            embeddings = embed_pool(run.evaluated, embedder, cache)
        except (PoolforgeError, RuntimeError, ValueError) as e:
            outcome.fail(cell.key, e)
            continue
        path = paths.embedding_file(cell)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, embeddings.vectors)
        embedded[cell] = embeddings
        outcome.done += 1

    fitted = []
    for prompt_id in sorted({c.prompt_id for c in embedded}):
        corpus = [c for c in sorted(embedded) if c.prompt_id == prompt_id]
        keys = [key for c in corpus for key in runs[c].evaluated.keys]
        vectors = np.vstack([embedded[c].vectors for c in corpus])
        k = manifest.family_settings(manifest.family_of(prompt_id)).regions
        try:
            fit_regions(prompt_id, keys, vectors, k, config.regions).save(paths.regions)
        except PoolforgeError as e:
            outcome.fail(f"regions/{prompt_id}", e)
            continue
        fitted.append(prompt_id)

    touched = {c.prompt_id for c in cells}
    stamp = {
        "embedder": config.embedder.name,
        "region_settings": config.regions.model_dump(mode="json"),
        "embedder_id": embedder.embedder_id,
    }
    previous = _previous_index(paths.embeddings_index, config, **stamp)
    kept_cells = [key for key in previous.get("cells", []) if _prompt_of(key) not in touched]
    kept_regions = [p for p in previous.get("regions", []) if p not in touched]
    _write_json(
        paths.embeddings_index,
        {
            "generation_hash": config.generation_hash(),
            "settings_hash": config.settings_hash(),
            **stamp,
            "cells": sorted(kept_cells + [c.key for c in embedded]),
            "regions": sorted(kept_regions + fitted),
        },
    )
    record_failures(paths, outcome)
    update_run_manifest(paths, config, "embed", embedder_id=embedder.embedder_id)
    return outcome


########################################
# SCORE
########################################


def cmd_score(config: RunConfig, only_cells: Sequence[str] | None = None) -> StageOutcome:
    """
    Standardized quality per evaluated output, one file per prompt.

    Slogans default to the in-process lexical score; stories and AUT need an
    external score file listed under `scores:` and otherwise get no quality.
    """
    manifest = config.load_manifest()
    paths = RunPaths(config.output_dir)
    cells, _ = prompt_cells(config, manifest, only_cells)
    runs, _ = load_cell_runs(config, paths, cells)
    outcome = StageOutcome("score")

    scored: dict[str, str] = {}
    for prompt_id in sorted({c.prompt_id for c in runs}):
        family = manifest.family_of(prompt_id)
        pools = [runs[c].evaluated for c in sorted(runs) if c.prompt_id == prompt_id]
        known_keys = [key for pool in pools for key in pool.keys]

        source = config.scores.get(prompt_id)
        scorer_id = source.scorer if source else (config.slogan_scorer if family == Family.SLOGANS else None)
        if scorer_id is None:
            logger.warning("%s: no scorer configured; quality will be reported as NaN", prompt_id)
            outcome.skipped += 1
            continue
        spec = scorer_spec(scorer_id)
        if family not in spec.families:
            raise ConfigError(f"{prompt_id}: scorer {scorer_id} does not apply to {family.value} tasks")

        try:
            if spec.computed:
                table = slogan_lexical_table(prompt_id, pools, config.analysis.commonness)
            elif source is None:
                raise ConfigError(f"{prompt_id}: scorer {scorer_id} needs a score file under `scores:`")
            else:
                table = ingest_scores(source.path, scorer_id, prompt_id, known_keys)
            unscored = [k for k in known_keys if k not in table.scores]
            if unscored:
                raise ScoreFileError(f"{prompt_id}: {len(unscored)} evaluated outputs have no score (e.g. {unscored[0]})")
        except (ScoreFileError, ConfigError) as e:
            outcome.fail(prompt_id, e)
            continue

        raw = {k: table.scores[k] for k in known_keys}
        qz = standardize(raw)
        frame = pd.DataFrame(
            {"output_key": known_keys, "scorer": scorer_id, "raw": [raw[k] for k in known_keys], "qz": [qz[k] for k in known_keys]}
        )
        _write_csv(frame, paths.score_file(prompt_id), SCORE_COLUMNS)
        scored[prompt_id] = scorer_id
        outcome.done += 1

    touched = {c.prompt_id for c in cells}
    score_hash = config.score_hash()
    previous = _previous_index(paths.scores_index, config, score_hash=score_hash)
    kept = {p: scorer for p, scorer in previous.get("prompts", {}).items() if p not in touched}
    _write_json(
        paths.scores_index,
        {
            "generation_hash": config.generation_hash(),
            "settings_hash": config.settings_hash(),
            "score_hash": score_hash,
            "prompts": dict(sorted({**kept, **scored}.items())),
        },
    )
    record_failures(paths, outcome)
    update_run_manifest(paths, config, "score", scorers=scored)
    return outcome


########################################
# ANALYZE
########################################


def _check_index(path: Path, config: RunConfig, what: str, stage: str, **expected: Any) -> dict[str, Any]:
    if not path.exists():
        raise StageError(what, stage)
    index = _read_json(path)
    if index.get("generation_hash") != config.generation_hash():
        raise StageError(f"up-to-date {what}", stage)
    if any(index.get(field) != value for field, value in expected.items()):
        raise StageError(f"up-to-date {what}", stage)
    return index


def _design_group(cell: CellCoord) -> tuple[str, bool, Method, Strategy]:
    return (cell.model_id, not cell.is_baseline, cell.method, cell.strategy)


def _curve_frames(cell: CellCoord, curve: RarefactionCurve) -> tuple[pd.DataFrame, pd.DataFrame]:
    repeats, n = curve.values.shape
    long = pd.DataFrame(
        {
            "cell": cell.key,
            "metric": curve.metric.value,
            "q": np.tile(curve.sizes, repeats),
            "replicate": np.repeat(np.arange(repeats), n),
            "value": curve.values.reshape(-1),
        }
    )
    low, high = np.percentile(curve.values, [2.5, 97.5], axis=0)
    summary = pd.DataFrame({"metric": curve.metric.value, "q": curve.sizes, "mean": curve.means, "ci_low": low, "ci_high": high})
    for column, value in cell.to_dict().items():
        summary.insert(len(summary.columns), column, value)
    return long, summary


def cmd_analyze(config: RunConfig, only_cells: Sequence[str] | None = None) -> StageOutcome:
    manifest = config.load_manifest()
    paths = RunPaths(config.output_dir)
    runs, problems = load_cell_runs(config, paths, select_cells(config, manifest, only_cells))
    outcome = StageOutcome("analyze", failures=list(problems))

    embeddings_index = _check_index(paths.embeddings_index, config, "embeddings", "embed")
    if embeddings_index.get("embedder") != config.embedder.name or embeddings_index.get(
        "region_settings"
    ) != config.regions.model_dump(mode="json"):
        raise StageError(f"embeddings and regions for {config.embedder.name}", "embed")
    scores_index = _check_index(paths.scores_index, config, "quality scores", "score", score_hash=config.score_hash())

    regions: dict[str, RegionModel] = {}
    qz_by_prompt: dict[str, dict[str, float]] = {}
    for prompt_id in sorted({c.prompt_id for c in runs}):
        if prompt_id in embeddings_index.get("regions", []):
            regions[prompt_id] = RegionModel.load(paths.regions, prompt_id)
        if prompt_id in scores_index.get("prompts", {}):
            frame = pd.read_csv(paths.score_file(prompt_id), dtype={"output_key": str})
            qz_by_prompt[prompt_id] = dict(zip(frame["output_key"], frame["qz"].astype(float)))

    data: dict[CellCoord, PoolData] = {}
    for cell, run in sorted(runs.items()):
        path = paths.embedding_file(cell)
        if cell.key not in embeddings_index.get("cells", []) or not path.exists():
            outcome.fail(cell.key, "embeddings missing")
            continue
        if cell.prompt_id not in regions:
            outcome.fail(cell.key, f"no semantic regions for {cell.prompt_id}")
            continue
        model = regions[cell.prompt_id]
        keys = run.evaluated.keys
        qz_table = qz_by_prompt.get(cell.prompt_id)
        try:
            distances = distance_matrix(EmbeddingSet(np.load(path), embeddings_index["embedder_id"]))
            qz = None
            if qz_table is not None:
                cell_quality(run.evaluated, qz_table)
                qz = np.array([qz_table[k] for k in keys])
            data[cell] = PoolData(cell, distances, model.labels_for(keys), model.k, qz)
        except PoolforgeError as e:
            outcome.fail(cell.key, e)

    for cell in [c for c in data if c.baseline() not in data]:
        outcome.fail(cell.key, f"baseline cell {cell.baseline().key} unavailable")
        del data[cell]

    repeats = config.analysis.rarefaction_repeats
    replicates = config.analysis.bootstrap_replicates
    present = {c.prompt_id for c in data}
    families = {p: manifest.family_of(p) for p in config.prompts if p in present}

    summaries: dict[CellCoord, dict[str, Any]] = {}
    long_frames: list[pd.DataFrame] = []
    curve_frames: list[pd.DataFrame] = []
    rarefaction_rows: list[dict[str, Any]] = []
    design_rows: list[dict[str, Any]] = []
    points: dict[CellCoord, np.ndarray] = {}
    samples: dict[CellCoord, np.ndarray] = {}
    targets: dict[CellCoord, dict[RarefiedMetric, np.ndarray]] = {}
    tokens: dict[str, int] = {}
    estimated: dict[str, bool] = {}

    # indep-neutral groups sort first: they supply every first-hit target of their model
    ordered = sorted(data, key=lambda c: (_design_group(c), c.prompt_id))
    for group, cells in itertools.groupby(ordered, key=_design_group):
        group_aucs: dict[str, dict[RarefiedMetric, float]] = {}
        group_curves: dict[str, Mapping[RarefiedMetric, np.ndarray]] = {}
        group_targets: dict[str, dict[RarefiedMetric, np.ndarray]] = {}
        for cell in cells:
            pool_data = data[cell]
            run = runs[cell]
            cell_tokens = pipeline_tokens(run)
            curves = {
                metric: pool_data.curve(
                    metric, repeats, np.random.SeedSequence([config.seeds.rarefaction, stream_id(cell), i])
                )
                for i, metric in enumerate(RarefiedMetric)
            }
            draws = bootstrap_draws(pool_data, replicates, config.seeds.bootstrap, config.seeds.rarefaction)
            if cell.is_baseline:
                targets[cell] = {m: draws.full_values(m) for m in RarefiedMetric}
            cell_targets = targets[cell.baseline()]

            rarefied = []
            for metric, curve in curves.items():
                summary = summarize_rarefaction(
                    metric, rarefaction_auc(curve), draws.curves[metric], cell_targets[metric], repeats
                )
                rarefied.append(summary)
                rarefaction_rows.append({"scope": "cell", **cell.to_dict(), **summary.to_row()})
                long, per_size = _curve_frames(cell, curve)
                long_frames.append(long)
                curve_frames.append(per_size)

            observed = pool_data.statistics({m: c.values for m, c in curves.items()})
            summaries[cell] = CellSummary(
                cell=cell,
                n=pool_data.n,
                diversity=diversity_report(pool_data.distances, pool_data.labels, pool_data.k),
                quality=float(observed[STATISTICS.index("quality")]),
                pipeline_tokens=cell_tokens,
                r_tok=r_tok(cell_tokens, pipeline_tokens(runs[cell.baseline()])),
                usage_estimated=run.usage.estimated,
                format_violations=format_violations(run.evaluated),
                rarefaction=tuple(rarefied),
            ).to_row()
            points[cell] = observed
            samples[cell] = draws.statistics
            tokens[cell.key] = cell_tokens
            estimated[cell.key] = run.usage.estimated
            group_aucs[cell.prompt_id] = {s.metric: s.auc for s in rarefied}
            group_curves[cell.prompt_id] = draws.curves
            group_targets[cell.prompt_id] = cell_targets
            outcome.done += 1

        model_id, _, method, strategy = group
        design_rows.extend(
            design_rarefaction((model_id, method, strategy), group_aucs, group_curves, group_targets, families, repeats)
        )

    if not summaries:
        raise AnalysisError("no cell could be analyzed; see failures.json")

    analyzed = sorted(data)
    _write_csv(pd.DataFrame([summaries[c] for c in analyzed]), paths.analysis / "cell_summaries.csv", CELL_SUMMARY_COLUMNS)
    _write_csv(pd.DataFrame(rarefaction_rows + design_rows), paths.analysis / "rarefaction_summary.csv", RAREFACTION_SUMMARY_COLUMNS)
    _write_csv(pd.concat(long_frames, ignore_index=True), paths.analysis / "rarefaction_long.csv", RAREFACTION_LONG_COLUMNS)
    _write_csv(pd.concat(curve_frames, ignore_index=True), paths.analysis / "rarefaction_curves.csv", RAREFACTION_CURVE_COLUMNS)
    np.savez_compressed(
        paths.bootstrap,
        points=np.stack([points[c] for c in analyzed]),
        samples=np.stack([samples[c] for c in analyzed]),
    )
    _write_json(
        paths.analysis_index,
        {
            "generation_hash": config.generation_hash(),
            "settings_hash": config.settings_hash(),
            "statistics": list(STATISTICS),
            "cells": [c.to_dict() for c in analyzed],
            "pipeline_tokens": tokens,
            "usage_estimated": estimated,
        },
    )
    record_failures(paths, outcome)
    update_run_manifest(paths, config, "analyze", cells=outcome.done, failed=len(outcome.failures))
    return outcome


########################################
# REPORT
########################################


@dataclass
class ReportBundle:
    tables: dict[str, pd.DataFrame]
    run_manifest: dict[str, Any]
    failures: dict[str, Any]

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        for name, columns in REPORT_TABLES.items():
            _write_csv(self.tables[name], directory / name, columns)
        _write_json(directory / "run_manifest.json", self.run_manifest)
        _write_json(directory / "failures.json", self.failures)


def build_report(config: RunConfig, paths: RunPaths) -> ReportBundle:
    if not paths.analysis_index.exists():
        raise StageError("analysis results", "analyze")
    index = _read_json(paths.analysis_index)
    if index.get("settings_hash") != config.settings_hash():
        raise StageError("up-to-date analysis results", "analyze")

    manifest = config.load_manifest()
    cells = [CellCoord.from_dict(c) for c in index["cells"]]
    arrays = np.load(paths.bootstrap)
    points = dict(zip(cells, arrays["points"]))
    samples = dict(zip(cells, arrays["samples"]))
    prompts = {c.prompt_id for c in cells}
    families = {p: manifest.family_of(p) for p in config.prompts if p in prompts}

    contrasts = cell_contrasts(points, samples) + design_contrasts(points, samples, families)
    efficiency = efficiency_table(
        points,
        {c: index["pipeline_tokens"][c.key] for c in cells},
        {c: index["usage_estimated"][c.key] for c in cells},
        families,
        allow_cross_provider=config.analysis.allow_cross_provider,
    )

    tables = {
        name: pd.read_csv(paths.analysis / name)
        for name in ("cell_summaries.csv", "rarefaction_long.csv", "rarefaction_curves.csv", "rarefaction_summary.csv")
    }
    tables["contrasts.csv"] = pd.DataFrame([e.to_row() for e in contrasts], columns=CONTRAST_COLUMNS)
    tables["efficiency.csv"] = pd.DataFrame([r.to_row() for r in efficiency], columns=EFFICIENCY_COLUMNS)

    run_manifest = _read_json(paths.run_manifest) if paths.run_manifest.exists() else {}
    failures = _read_json(paths.failures) if paths.failures.exists() else {}
    return ReportBundle(tables, run_manifest, failures)


def cmd_report(config: RunConfig, only_cells: Sequence[str] | None = None) -> StageOutcome:
    paths = RunPaths(config.output_dir)
    if only_cells:
        logger.info("report covers every analyzed cell; --only-cells is applied at analyze")
    bundle = build_report(config, paths)
    update_run_manifest(paths, config, "report")
    bundle.run_manifest = _read_json(paths.run_manifest)
    bundle.write(paths.report)
    (paths.report / "run_config.yaml").write_text(dump_run_config(config), encoding="utf-8")
    outcome = StageOutcome("report", done=len(bundle.tables["cell_summaries.csv"]))
    logger.info("report written to %s", paths.report)
    return outcome


########################################
# PROMPT EXPORTS
########################################


def _write_files(files: Mapping[str, str], out: str | Path) -> int:
    out = Path(out)
    for relative, content in files.items():
        path = out / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content, encoding="utf-8")
    return len(files)


def cmd_prompts_export(out: str | Path, n: int = 150, manifest: Manifest | None = None) -> int:
    """Every prompt the harness can send, rendered with placeholder texts, plus an index of hashes."""
    files = render_goldens(manifest, n)
    files["index.json"] = golden_index(files)
    return _write_files(files, out)


def cmd_judge_export(out: str | Path, manifest: Manifest | None = None) -> int:
    return _write_files(judge_prompt_files(manifest), out)


