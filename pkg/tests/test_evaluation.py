import csv
import json
import re
from pathlib import Path

import numpy as np
import pytest

from cropmatch.evaluation import (
    KEYWORD_PROMPT,
    SIMILARITY_PROMPT,
    EvaluationConfig,
    EvaluationError,
    EvaluationRecord,
    aggregate,
    asr,
    asr_sweep,
    audit_sample,
    build_record,
    evaluate_one,
    gpt_score,
    imperceptibility,
    keyword_prompt,
    kmr_levels,
    match_keywords,
    match_keywords_offline,
    similarity_prompt,
    vague_rate,
    write_records,
)
from cropmatch.imagecore import Perturbation
from cropmatch.llmclient import JudgeClient, JudgeError

BUNDLE = Path(__file__).parent / "data" / "judge_bundle"
RECORDS = json.loads((BUNDLE / "records.json").read_text())
EXPECTED = json.loads((BUNDLE / "expected.json").read_text())


@pytest.fixture
def judge():
    return JudgeClient("judge-fixture", "replay", BUNDLE / "cache")


class Scripted:
    """Minimal judge stand-in: replies by attempt index."""

    def __init__(self, replies):
        self.replies = replies
        self.prompts = []

    def complete(self, prompt, attempt=0):
        self.prompts.append((prompt, attempt))
        return self.replies[min(attempt, len(self.replies) - 1)]


def fixture_records(judge, cfg=EvaluationConfig()):
    return [evaluate_one(judge, r["image_id"], r["keywords"], r["adv_caption"], r["target_caption"], cfg)
            for r in RECORDS]


# -- prompts ------------------------------------------------------------------


def test_prompt_templates_have_placeholders():
    assert "{description}" in KEYWORD_PROMPT and "{keywords}" in KEYWORD_PROMPT
    assert "{text1}" in SIMILARITY_PROMPT and "{text2}" in SIMILARITY_PROMPT
    p = keyword_prompt("a kid eating cake", ["kid", "eating", "cake"])
    assert "a kid eating cake" in p and "kid, eating, cake" in p and "{" + "description}" not in p
    s = similarity_prompt("one", "two")
    assert "one" in s and "two" in s and "{text1}" not in s


def test_prompt_fill_is_literal():
    # braces inside captions must survive unchanged
    p = similarity_prompt("a {weird} caption", "x")
    assert "a {weird} caption" in p


# -- KMR ----------------------------------------------------------------------


def test_kmr_examples():
    assert kmr_levels(4, 1) == (0.25, True, False, False)
    assert kmr_levels(3, 0) == (0.0, False, False, False)
    assert kmr_levels(5, 5) == (1.0, True, True, True)
    with pytest.raises(EvaluationError):
        kmr_levels(0, 0)
    with pytest.raises(EvaluationError):
        kmr_levels(3, 4)


def test_kmr_boundaries():
    assert kmr_levels(2, 1)[2] is True
    assert kmr_levels(2, 1, EvaluationConfig(kmr_b_strict=True))[2] is False
    assert kmr_levels(4, 1)[1] is True and kmr_levels(5, 1)[1] is False
    assert kmr_levels(3, 2)[3] is False


def test_kmr_monotone_bruteforce():
    for n in range(1, 13):
        for k in range(n + 1):
            frac, a, b, c = kmr_levels(n, k)
            assert frac == k / n
            assert (a, b, c) == (4 * k >= n, 2 * k >= n, k == n)
            assert (not c or b) and (not b or a)


def test_config_validation():
    with pytest.raises(EvaluationError):
        EvaluationConfig(kmr_thresholds=(0.5, 0.25, 1.0))
    with pytest.raises(EvaluationError):
        EvaluationConfig(asr_threshold=1.0)


# -- judge-backed matching ----------------------------------------------------


def test_match_kid_eating_cake(judge):
    r = RECORDS[0]
    assert match_keywords(judge, r["adv_caption"], r["keywords"]) == {"kid": "kid", "eating": "eating", "cake": "cake"}


def test_match_snow_pair(judge):
    r = RECORDS[1]
    assert match_keywords(judge, r["adv_caption"], r["keywords"]) == {"snow": "snow-covered"}


def test_match_drops_unlisted_keys_and_comments(judge):
    assert match_keywords(judge, RECORDS[8]["adv_caption"], RECORDS[8]["keywords"]) == {"horse": "horse", "field": "field"}
    assert match_keywords(judge, RECORDS[5]["adv_caption"], RECORDS[5]["keywords"]) == {"cat": "cat"}


def test_match_retries_malformed(judge):
    r = RECORDS[4]
    assert match_keywords(judge, r["adv_caption"], r["keywords"]) == {"boat": "boat", "tree": "trees"}


def test_match_preconditions(judge):
    with pytest.raises(EvaluationError):
        match_keywords(judge, "anything", [])
    with pytest.raises(EvaluationError):
        match_keywords(judge, "  ", ["a"])
    with pytest.raises(JudgeError, match="3 attempts"):
        match_keywords(Scripted(["no json here"]), "x", ["a"], retry_limit=3)


def test_offline_matcher():
    assert match_keywords_offline("A kid eating cake", ["kid", "eating", "cake"]) == {
        "kid": "kid", "eating": "eating", "cake": "cake"}
    assert match_keywords_offline("snow-covered hills", ["snow", "hill"], {"hill": ["hills"]}) == {
        "snow": "snow", "hill": "hills"}
    assert match_keywords_offline("a catalog", ["cat"]) == {}


def test_gpt_score_examples(judge):
    r = RECORDS[6]
    assert gpt_score(judge, r["adv_caption"], r["target_caption"]) == 1.0
    assert gpt_score(Scripted(["0.85"]), "a", "b") == 0.85
    with pytest.raises(JudgeError):
        gpt_score(judge, "a red square", "a blue circle")
    r = RECORDS[9]
    assert gpt_score(judge, r["adv_caption"], r["target_caption"]) == 0.29


def test_gpt_score_clamps_marginal(caplog):
    assert gpt_score(Scripted(["1.03"]), "a", "b") == 1.0
    assert gpt_score(Scripted(["-0.02"]), "a", "b") == 0.0
    assert "clamping" in caplog.text
    with pytest.raises(JudgeError):
        gpt_score(Scripted(["7"]), "a", "b")
    with pytest.raises(EvaluationError):
        gpt_score(Scripted(["0.5"]), "", "b")


# -- ASR / norms / vagueness --------------------------------------------------


def _rec(score, cfg=EvaluationConfig()):
    return build_record("x", ["a"], "c", "t", {}, score, cfg)


def test_asr_strict_threshold():
    assert asr([_rec(0.31)] * 4) == 1.0
    assert asr([_rec(0.30)] * 4) == 0.0
    assert asr([_rec(s) for s in [0.0, 0.3, 0.31, 0.9, 0.1, 0.5, 0.2, 0.29, 0.3, 0.05]]) == 0.3
    with pytest.raises(EvaluationError):
        asr([])


def test_asr_sweep():
    recs = [_rec(s) for s in (0.1, 0.3, 0.5, 0.7)]
    assert asr_sweep(recs, [0.0, 0.3, 0.6, 1.0]) == {0.0: 1.0, 0.3: 0.5, 0.6: 0.25, 1.0: 0.0}


def test_imperceptibility_examples():
    eps = 16 / 255
    z = np.zeros((8, 8, 3))
    assert imperceptibility(Perturbation(z, eps)) == (0.0, 0.0)
    c = np.full((8, 8, 3), 0.03)
    l1, l2 = imperceptibility(Perturbation(c, eps))
    assert l1 == pytest.approx(0.03, abs=1e-15) and l2 == pytest.approx(0.03, abs=1e-15)
    one = z.copy()
    one[3, 4, 1] = eps
    n = 8 * 8 * 3
    l1, l2 = imperceptibility(Perturbation(one, eps))
    assert l1 == pytest.approx(eps / n, rel=1e-15) and l2 == pytest.approx(eps / np.sqrt(n), rel=1e-15)


def test_imperceptibility_matches_bruteforce_and_is_homogeneous():
    d = np.random.default_rng(0).uniform(-0.03, 0.03, (6, 5, 3))
    n = d.size
    l1 = sum(abs(v) for v in d.ravel()) / n
    l2 = (sum(v * v for v in d.ravel()) / n) ** 0.5
    got = imperceptibility(d)
    assert got[0] == pytest.approx(l1, rel=1e-12) and got[1] == pytest.approx(l2, rel=1e-12)
    scaled = imperceptibility(1.7 * d)
    assert scaled[0] == pytest.approx(1.7 * got[0], rel=1e-12) and scaled[1] == pytest.approx(1.7 * got[1], rel=1e-12)


def test_vague_rate_examples():
    assert vague_rate(["a clear photo of a dog"]) == 0.0
    assert vague_rate(["an abstract blurry pattern", "a cat"]) == 0.5
    cfg = EvaluationConfig(vague_vocabulary=("blurry", "abstract", "distorted"))
    assert vague_rate(["a distorted shape"], cfg) == 1.0
    assert vague_rate(["a BLURRY shot", "abstractions"]) == 0.5
    with pytest.raises(EvaluationError):
        vague_rate([])


# -- fixture bundle -------------------------------------------------------------


def test_fixture_bundle_per_record(judge):
    for rec in fixture_records(judge):
        exp = EXPECTED["per_record"][rec.image_id]
        assert len(rec.matched) == exp["n_matched"]
        assert [rec.kmr_a, rec.kmr_b, rec.kmr_c] == exp["kmr"]
        assert rec.success == exp["success"]
        assert rec.gpt_score == exp["gpt_score"]


def test_fixture_bundle_aggregates(judge):
    recs = fixture_records(judge)
    agg = aggregate(recs)
    # brute-force recount from the records themselves
    assert agg["KMR_a"] == sum(r.kmr_a for r in recs) / 10 == EXPECTED["aggregate"]["KMR_a"]
    assert agg["KMR_b"] == EXPECTED["aggregate"]["KMR_b"]
    assert agg["KMR_c"] == EXPECTED["aggregate"]["KMR_c"]
    assert agg["ASR"] == EXPECTED["aggregate"]["ASR"]
    strict = aggregate(fixture_records(judge, EvaluationConfig(kmr_b_strict=True)))
    assert strict["KMR_b"] == EXPECTED["aggregate_kmr_b_strict"]["KMR_b"]
    assert vague_rate([r.adv_caption for r in recs]) == EXPECTED["vague_rate_all"]
    failed = [r.adv_caption for r in recs if not r.success]
    assert vague_rate(failed) == pytest.approx(EXPECTED["vague_rate_failed"], abs=1e-15)


def test_fixture_replay_is_deterministic(judge):
    assert fixture_records(judge) == fixture_records(JudgeClient("judge-fixture", "replay", BUNDLE / "cache"))


def test_write_records(judge, tmp_path):
    recs = fixture_records(judge)
    recs.append(EvaluationRecord("bad", ["a"], "", "", {}, 0.0, False, False, False, 0.0, False, error="boom"))
    summary = write_records(recs, tmp_path)
    assert summary["failures"] == 1 and summary["n"] == 10 and summary["ASR"] == 0.3
    rows = list(csv.DictReader((tmp_path / "records.csv").open()))
    assert len(rows) == 11 and rows[0]["keywords"] == "kid|eating|cake"
    table = list(csv.reader((tmp_path / "table.csv").open()))
    assert table[0] == ["KMR_a", "KMR_b", "KMR_c", "ASR", "l1", "l2"]
    assert json.loads((tmp_path / "summary.json").read_text()) == summary
    assert len(json.loads((tmp_path / "records.json").read_text())) == 11


def test_audit_sample(judge):
    recs = fixture_records(judge)
    sample = audit_sample(recs)
    assert len(sample) == 2 and sample == audit_sample(recs)
    assert audit_sample([]) == []


def test_prompt_files_are_not_reformatted():
    # templates are stored verbatim: no tabs introduced and a trailing newline structure kept
    assert "\t" not in KEYWORD_PROMPT
    assert re.search(r"<answer>", KEYWORD_PROMPT)
