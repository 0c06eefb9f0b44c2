# poolforge/quality.py

"""
Quality proxies.

Raw scores come from external scorer files (CLAUS for AUT, MAoSS for stories,
an LLM judge for slogans) or from the in-process slogan boilerplate score.
Every raw score is standardized within its task over the evaluated outputs of
all models and methods; a cell's quality is the mean standardized score.

Score files are CSV with two columns: output_key, score.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from nltk.util import ngrams

from poolforge.config import Commonness
from poolforge.core import Family, Pool
from poolforge.errors import MetricError, ScoreFileError
from poolforge.log import get_logger

logger = get_logger(__name__)

BIGRAM_WEIGHT = 0.45
TRIGRAM_WEIGHT = 0.55


@dataclass(frozen=True)
class ScorerSpec:
    scorer_id: str
    families: tuple[Family, ...]
    higher_is_better: bool = True
    # inclusive integer range the raw scores must fall in, if any
    integer_range: tuple[int, int] | None = None
    computed: bool = False


SCORERS: dict[str, ScorerSpec] = {
    "claus": ScorerSpec("claus", (Family.AUT,)),
    "maoss": ScorerSpec("maoss", (Family.STORIES,)),
    "judge": ScorerSpec("judge", (Family.SLOGANS,), integer_range=(1, 5)),
    "boilerplate": ScorerSpec("boilerplate", (Family.SLOGANS,), higher_is_better=False),
    "slogan_lexical": ScorerSpec("slogan_lexical", (Family.SLOGANS,), computed=True),
}


def scorer_spec(scorer_id: str) -> ScorerSpec:
    try:
        return SCORERS[scorer_id]
    except KeyError:
        raise ScoreFileError(f"Unknown scorer: {scorer_id} (known: {', '.join(SCORERS)})") from None


@dataclass(frozen=True)
class ScoreTable:
    scorer_id: str
    task_id: str
    # output key -> raw score, higher is better
    scores: Mapping[str, float]

    def __len__(self) -> int:
        return len(self.scores)


########################################
# SLOGAN NORMALIZATION
########################################

_DOUBLE_QUOTES = str.maketrans({c: '"' for c in "“”„‟«»″"})
_SINGLE_QUOTES = str.maketrans({c: "'" for c in "‘’‚‛′`´"})
_SURROUNDING_QUOTES = "\"'"
# a word with optional internal apostrophes or hyphens; underscores are punctuation
_WORD = re.compile(r"[^\W_]+(?:['\-][^\W_]+)*")


def normalize_slogan(text: str) -> list[str]:
    text = text.lower().translate(_DOUBLE_QUOTES).translate(_SINGLE_QUOTES)
    text = " ".join(text.split())
    text = text.strip().strip(_SURROUNDING_QUOTES).strip()
    return _WORD.findall(text)


########################################
# BOILERPLATE SCORE
########################################


class NgramIndex:
    """Bigram and trigram counts over one slogan task's corpus."""

    ORDERS = (2, 3)

    def __init__(self, task_id: str, slogans: Mapping[str, str]):
        self.task_id = task_id
        self.tokens = {key: normalize_slogan(text) for key, text in slogans.items()}
        self.counts: dict[int, Counter] = {order: Counter() for order in self.ORDERS}
        for tokens in self.tokens.values():
            for order in self.ORDERS:
                self.counts[order].update(ngrams(tokens, order))
        self.totals = {order: sum(self.counts[order].values()) for order in self.ORDERS}

    def __contains__(self, key: str) -> bool:
        return key in self.tokens

    def __len__(self) -> int:
        return len(self.tokens)

    def loo_commonness(self, key: str, order: int, mode: Commonness = Commonness.COUNT) -> float:
        """
        Mean leave-one-out commonness of the slogan's n-grams of one order.

        The slogan's own occurrences are removed from the corpus counts first.
        A slogan too short to have any n-gram of this order scores 0.
        """
        if key not in self.tokens:
            raise MetricError(f"{self.task_id}: slogan {key} is not in the index")
        grams = list(ngrams(self.tokens[key], order))
        if not grams:
            return 0.0
        own = Counter(grams)
        remaining = np.array([self.counts[order][g] - own[g] for g in grams], dtype=np.float64)
        if mode == Commonness.SHARE:
            rest = self.totals[order] - len(grams)
            if rest <= 0:
                return 0.0
            remaining = remaining / rest
        return float(remaining.mean())


def boilerplate_score(key: str, index: NgramIndex, mode: Commonness = Commonness.COUNT) -> float:
    return BIGRAM_WEIGHT * index.loo_commonness(key, 2, mode) + TRIGRAM_WEIGHT * index.loo_commonness(
        key, 3, mode
    )


########################################
# STANDARDIZATION
########################################


def standardize(scores: Mapping[str, float]) -> dict[str, float]:
    """(Q - mean) / population std within one task; a constant task maps to 0."""
    if not scores:
        raise MetricError("cannot standardize an empty task")
    keys = list(scores)
    values = np.array([scores[k] for k in keys], dtype=np.float64)
    sigma = values.std()
    if sigma == 0:
        return {k: 0.0 for k in keys}
    z = (values - values.mean()) / sigma
    return dict(zip(keys, z.tolist()))


def cell_quality(pool: Pool, qz: Mapping[str, float]) -> float:
    missing = [r.slot for r in pool.records if r.key not in qz]
    if missing:
        raise MetricError(f"{pool.cell.key}: no quality score for slots {missing}")
    return float(np.mean([qz[r.key] for r in pool.records]))


def slogan_lexical_table(
    task_id: str, pools: Iterable[Pool], mode: Commonness = Commonness.COUNT
) -> ScoreTable:
    """Negative standardized boilerplate score over the task's evaluated slogans."""
    slogans = {r.key: r.text for pool in pools for r in pool.records}
    index = NgramIndex(task_id, slogans)
    raw_b = {key: boilerplate_score(key, index, mode) for key in slogans}
    return ScoreTable("slogan_lexical", task_id, {k: -v for k, v in standardize(raw_b).items()})


########################################
# SCORE FILES
########################################


def ingest_scores(
    path: str | Path,
    scorer_id: str,
    task_id: str,
    known_keys: Sequence[str] | None = None,
) -> ScoreTable:
    """
    Read an external score file for one task.

    Only keys of evaluated outputs are accepted. Judge scores must be integers
    1-5. Raw boilerplate scores (lower is better) are flipped here into
    negative standardized values.
    """
    spec = scorer_spec(scorer_id)
    if spec.computed:
        raise ScoreFileError(f"{scorer_id} is computed in-process, not read from a file")
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"output_key": str})
    except FileNotFoundError:
        raise ScoreFileError(f"Score file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ScoreFileError(f"{path}: not a readable CSV: {e}") from e

    missing_columns = {"output_key", "score"} - set(frame.columns)
    if missing_columns:
        raise ScoreFileError(f"{path}: missing columns {sorted(missing_columns)}")

    keys = frame["output_key"].astype(str)
    duplicated = keys[keys.duplicated()].unique().tolist()
    if duplicated:
        raise ScoreFileError(f"{path}: duplicate output keys: {duplicated[:5]}")

    wrong_task = [k for k in keys if len(k.split("/")) < 2 or k.split("/")[1] != task_id]
    if wrong_task:
        raise ScoreFileError(f"{path}: keys outside task {task_id}: {wrong_task[:5]}")
    if known_keys is not None:
        known = set(known_keys)
        unknown = [k for k in keys if k not in known]
        if unknown:
            raise ScoreFileError(f"{path}: unknown output keys: {unknown[:5]}")

    values = pd.to_numeric(frame["score"], errors="coerce")
    bad = keys[values.isna() | ~np.isfinite(values.fillna(0))].tolist()
    if bad:
        raise ScoreFileError(f"{path}: non-numeric scores for {bad[:5]}")

    if spec.integer_range is not None:
        low, high = spec.integer_range
        out_of_range = keys[(values != values.round()) | (values < low) | (values > high)].tolist()
        if out_of_range:
            raise ScoreFileError(f"{path}: {scorer_id} scores must be integers {low}-{high}: {out_of_range[:5]}")

    scores = dict(zip(keys.tolist(), values.astype(float).tolist()))
    if not spec.higher_is_better:
        scores = {k: -v for k, v in standardize(scores).items()}
    logger.info("%s: %d %s scores from %s", task_id, len(scores), scorer_id, path)
    return ScoreTable(scorer_id, task_id, scores)


########################################
# FORMAT COMPLIANCE
########################################

STORY_SENTENCES = 8
SLOGAN_MAX_WORDS = 6
_SENTENCE_END = re.compile(r"[.!?]+(?:[\"'”’)]*)(?=\s|$)")


def count_sentences(text: str) -> int:
    return len(_SENTENCE_END.findall(text.strip()))


def violates_format(text: str, family: Family) -> bool:
    if family == Family.STORIES:
        return count_sentences(text) != STORY_SENTENCES
    if family == Family.SLOGANS:
        return len(normalize_slogan(text)) > SLOGAN_MAX_WORDS
    return "\n" in text.strip()


def format_violations(pool: Pool) -> int:
    """Outputs breaking the family's format rule; they are counted, never dropped."""
    return sum(violates_format(r.text, pool.cell.family) for r in pool.records)
