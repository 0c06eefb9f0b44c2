from __future__ import annotations

import numpy as np
import pytest

from poolforge.config import Commonness
from poolforge.core import Family
from poolforge.errors import MetricError, ScoreFileError
from poolforge.quality import (
    NgramIndex,
    boilerplate_score,
    cell_quality,
    count_sentences,
    format_violations,
    ingest_scores,
    normalize_slogan,
    scorer_spec,
    slogan_lexical_table,
    standardize,
    violates_format,
)

from conftest import make_pool

# three slogans share "taste the bright"; the rest share nothing with anyone
SLOGANS = {
    "s0": "Taste the bright side",
    "s1": "Taste the bright life.",
    "s2": "“Taste the bright sky”",
    "s3": "Taste it",
    "s4": "Just pop it, just pop it",
    "s5": "Fizz!",
    "s6": "Zero sugar, all fun",
    "s7": "Bubbles for brave hearts",
    "s8": "Cold cans, warm smiles",
    "s9": "Sip something louder",
    "s10": "Made for midnight",
    "s11": "Citrus never sleeps",
}


def test_normalize_slogan():
    assert normalize_slogan("“Zero-sugar, ALL fun!”") == ["zero-sugar", "all", "fun"]
    assert normalize_slogan("Don’t   stop") == ["don't", "stop"]
    assert normalize_slogan("'snake_case'") == ["snake", "case"]


def test_leave_one_out_commonness_by_hand():
    index = NgramIndex("slogan_soda", SLOGANS)
    # s0 bigrams: taste the (2 others), the bright (2 others), bright side (0)
    assert index.loo_commonness("s0", 2) == pytest.approx(4 / 3)
    # s0 trigrams: taste the bright (2 others), the bright side (0)
    assert index.loo_commonness("s0", 3) == pytest.approx(1.0)
    assert boilerplate_score("s0", index) == pytest.approx(0.45 * 4 / 3 + 0.55 * 1.0)
    assert boilerplate_score("s2", index) == pytest.approx(1.15)
    # repeats inside one slogan are removed with the slogan itself
    assert boilerplate_score("s4", index) == 0.0
    # too short for any bigram
    assert index.loo_commonness("s5", 2) == 0.0
    for key in ("s3", "s6", "s7", "s8", "s9", "s10", "s11"):
        assert boilerplate_score(key, index) == 0.0


def test_share_commonness_divides_by_the_rest_of_the_corpus():
    index = NgramIndex("slogan_soda", SLOGANS)
    rest = index.totals[2] - 3
    assert index.loo_commonness("s0", 2, Commonness.SHARE) == pytest.approx((2 + 2 + 0) / 3 / rest)


def test_standardize_uses_population_sigma():
    z = standardize({"a": 1.0, "b": 2.0, "c": 3.0, "d": 10.0})
    values = np.array(list(z.values()))
    assert values.mean() == pytest.approx(0.0, abs=1e-9)
    assert values.std() == pytest.approx(1.0, abs=1e-9)
    assert standardize({"a": 2.0, "b": 2.0}) == {"a": 0.0, "b": 0.0}
    with pytest.raises(MetricError):
        standardize({})


def test_slogan_lexical_scores_penalize_boilerplate(manifest):
    cell = manifest.cell("m", "slogan_soda", "indep", "neutral")
    pool = make_pool(cell, list(SLOGANS.values()))
    table = slogan_lexical_table("slogan_soda", [pool])
    scores = np.array([table.scores[k] for k in pool.keys])
    assert scores.mean() == pytest.approx(0.0, abs=1e-9)
    assert scores.std() == pytest.approx(1.0, abs=1e-9)
    raw = np.array([1.15, 1.15, 1.15] + [0.0] * 9)
    expected = -(raw - raw.mean()) / raw.std()
    assert np.allclose(scores, expected, atol=1e-9)


def test_cell_quality_needs_every_slot(manifest):
    cell = manifest.cell("m", "slogan_soda", "indep", "neutral")
    pool = make_pool(cell, ["a", "b"])
    qz = {pool.keys[0]: 1.0, pool.keys[1]: -0.5}
    assert cell_quality(pool, qz) == pytest.approx(0.25)
    with pytest.raises(MetricError, match=r"\[1\]"):
        cell_quality(pool, {pool.keys[0]: 1.0})


@pytest.fixture
def slogan_keys(manifest):
    cell = manifest.cell("gpt-5.4", "slogan_soda", "indep", "neutral")
    return make_pool(cell, ["a", "b", "c"]).keys


def _write_scores(path, rows, header="output_key,score"):
    path.write_text(header + "\n" + "\n".join(f"{k},{v}" for k, v in rows) + "\n", encoding="utf-8")
    return path


def test_ingest_judge_scores(tmp_path, slogan_keys):
    path = _write_scores(tmp_path / "judge.csv", zip(slogan_keys, [1, 5, 3]))
    table = ingest_scores(path, "judge", "slogan_soda", slogan_keys)
    assert table.scores[slogan_keys[1]] == 5.0
    assert len(table) == 3


@pytest.mark.parametrize(
    "values, message",
    [
        ([1, 6, 3], "integers 1-5"),
        ([1, 2.5, 3], "integers 1-5"),
        ([1, "high", 3], "non-numeric"),
    ],
)
def test_ingest_rejects_bad_judge_values(tmp_path, slogan_keys, values, message):
    path = _write_scores(tmp_path / "judge.csv", zip(slogan_keys, values))
    with pytest.raises(ScoreFileError, match=message):
        ingest_scores(path, "judge", "slogan_soda", slogan_keys)


def test_ingest_rejects_bad_keys(tmp_path, slogan_keys):
    dup = _write_scores(tmp_path / "dup.csv", [(slogan_keys[0], 1), (slogan_keys[0], 2)])
    with pytest.raises(ScoreFileError, match="duplicate"):
        ingest_scores(dup, "judge", "slogan_soda", slogan_keys)
    other_task = _write_scores(tmp_path / "task.csv", [(slogan_keys[0].replace("slogan_soda", "slogan_blood"), 1)])
    with pytest.raises(ScoreFileError, match="outside task"):
        ingest_scores(other_task, "judge", "slogan_soda")
    unknown = _write_scores(tmp_path / "unknown.csv", [(slogan_keys[0].replace("/0", "/99"), 1)])
    with pytest.raises(ScoreFileError, match="unknown output keys"):
        ingest_scores(unknown, "judge", "slogan_soda", slogan_keys)
    columns = _write_scores(tmp_path / "cols.csv", [(slogan_keys[0], 1)], header="key,score")
    with pytest.raises(ScoreFileError, match="missing columns"):
        ingest_scores(columns, "judge", "slogan_soda")
    with pytest.raises(ScoreFileError, match="not found"):
        ingest_scores(tmp_path / "absent.csv", "judge", "slogan_soda")


def test_ingest_flips_lower_is_better_scores(tmp_path, slogan_keys):
    path = _write_scores(tmp_path / "b.csv", zip(slogan_keys, [0.0, 1.0, 2.0]))
    table = ingest_scores(path, "boilerplate", "slogan_soda", slogan_keys)
    assert table.scores[slogan_keys[0]] > table.scores[slogan_keys[2]]


def test_scorer_registry():
    assert Family.AUT in scorer_spec("claus").families
    assert scorer_spec("slogan_lexical").computed
    with pytest.raises(ScoreFileError):
        scorer_spec("bleu")
    with pytest.raises(ScoreFileError):
        ingest_scores("x.csv", "slogan_lexical", "slogan_soda")


def test_format_compliance(manifest):
    assert count_sentences("One. Two! Three? “Four.”") == 4
    story = " ".join(f"Sentence {i}." for i in range(8))
    assert not violates_format(story, Family.STORIES)
    assert violates_format("Too short.", Family.STORIES)
    assert violates_format("one two three four five six seven", Family.SLOGANS)
    assert not violates_format("Taste the bright side", Family.SLOGANS)
    assert violates_format("a hat\na boat", Family.AUT)
    cell = manifest.cell("m", "slogan_soda", "indep", "neutral")
    assert format_violations(make_pool(cell, ["Fine slogan", "this slogan is far too long to count"])) == 1
