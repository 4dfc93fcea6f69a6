"""Transferability and imperceptibility metrics.

KMR levels threshold the fraction of labeled keywords a victim's description
matches; ASR counts records whose judge similarity score strictly exceeds the
threshold. Judge prompts are loaded verbatim from ``prompts/``.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import asdict, dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .imagecore import Perturbation
from .llmclient import JudgeError

log = logging.getLogger(__name__)

TABLE_COLUMNS = ["KMR_a", "KMR_b", "KMR_c", "ASR", "l1", "l2"]


class EvaluationError(ValueError):
    pass


def load_prompt(name: str) -> str:
    return resources.files("cropmatch").joinpath("prompts").joinpath(f"{name}.txt").read_text()


KEYWORD_PROMPT = load_prompt("keyword_match")
SIMILARITY_PROMPT = load_prompt("similarity")


@dataclass(frozen=True)
class EvaluationConfig:
    kmr_thresholds: tuple[float, float, float] = (0.25, 0.5, 1.0)
    asr_threshold: float = 0.3
    vague_vocabulary: tuple[str, ...] = ("blurry", "abstract")
    retry_limit: int = 3
    kmr_b_strict: bool = False

    def __post_init__(self):
        t = tuple(self.kmr_thresholds)
        if len(t) != 3 or not all(0 < x <= 1 for x in t) or not (t[0] < t[1] < t[2]):
            raise EvaluationError(f"KMR thresholds must be strictly increasing in (0, 1], got {t}")
        if not 0 < self.asr_threshold < 1:
            raise EvaluationError(f"ASR threshold must lie in (0, 1), got {self.asr_threshold}")
        object.__setattr__(self, "kmr_thresholds", t)
        object.__setattr__(self, "vague_vocabulary", tuple(self.vague_vocabulary))


@dataclass
class EvaluationRecord:
    image_id: str
    keywords: list[str]
    adv_caption: str
    target_caption: str
    matched: dict[str, str]
    kmr_fraction: float
    kmr_a: bool
    kmr_b: bool
    kmr_c: bool
    gpt_score: float
    success: bool
    l1: float | None = None
    l2: float | None = None
    error: str | None = None

    def row(self) -> dict:
        d = asdict(self)
        d["keywords"] = "|".join(self.keywords)
        d["matched"] = json.dumps(self.matched, sort_keys=True)
        return d


# -- KMR ----------------------------------------------------------------------


def kmr_levels(n_keywords: int, n_matched: int, cfg: EvaluationConfig = EvaluationConfig()):
    """Matched fraction and the three threshold flags ``(fraction, a, b, c)``.

    Comparisons are inclusive; ``cfg.kmr_b_strict`` makes the middle one strict.
    """
    if n_keywords < 1:
        raise EvaluationError("at least one keyword is required")
    if not 0 <= n_matched <= n_keywords:
        raise EvaluationError(f"matched count {n_matched} outside [0, {n_keywords}]")
    frac = Fraction(n_matched, n_keywords)
    ta, tb, tc = (Fraction(str(t)) for t in cfg.kmr_thresholds)
    b = frac > tb if cfg.kmr_b_strict else frac >= tb
    return float(frac), frac >= ta, b, frac >= tc


_COMMENT = re.compile(r'("(?:\\.|[^"\\])*")|//[^\n]*')


def _extract_answer(text: str) -> dict:
    m = re.search(r"<answer>(.*?)</answer>", text, re.S)
    body = m.group(1) if m else text
    # drop // comments (the template shows one) but leave string contents alone
    body = _COMMENT.sub(lambda m: m.group(1) or "", body)
    start, end = body.find("{"), body.rfind("}")
    if start < 0 or end < start:
        raise ValueError("no JSON object in reply")
    obj = json.loads(body[start:end + 1])
    if not isinstance(obj, dict):
        raise ValueError("reply JSON is not an object")
    return obj


def keyword_prompt(description: str, keywords: Sequence[str]) -> str:
    return KEYWORD_PROMPT.replace("{description}", description).replace("{keywords}", ", ".join(keywords))


def match_keywords(judge, description: str, keywords: Sequence[str], retry_limit: int = 3) -> dict[str, str]:
    """Ask the judge which keywords the description matches.

    Only keywords from ``keywords`` are kept; malformed replies are re-asked up
    to ``retry_limit`` times.
    """
    if not description or not description.strip():
        raise EvaluationError("description must be nonempty")
    if not keywords:
        raise EvaluationError("keyword list must be nonempty")
    prompt = keyword_prompt(description, keywords)
    lookup = {k.lower(): k for k in keywords}
    last = None
    for attempt in range(retry_limit):
        reply = judge.complete(prompt, attempt=attempt)
        try:
            obj = _extract_answer(reply)
        except ValueError as exc:
            last = exc
            log.warning("malformed keyword-match reply (attempt %d): %s", attempt + 1, exc)
            continue
        return {lookup[k.lower()]: str(v) for k, v in obj.items() if k.lower() in lookup and v}
    raise JudgeError(f"keyword matching failed after {retry_limit} attempts: {last}")


def match_keywords_offline(description: str, keywords: Sequence[str], synonyms: dict[str, Sequence[str]] | None = None):
    """Exact whole-word (or synonym-table) matcher for hermetic runs."""
    if not description or not keywords:
        raise EvaluationError("description and keywords must be nonempty")
    synonyms = synonyms or {}
    out = {}
    for k in keywords:
        for cand in (k, *synonyms.get(k, ())):
            m = re.search(rf"\b{re.escape(cand)}\b", description, re.I)
            if m:
                out[k] = m.group(0)
                break
    return out


# -- GPTScore / ASR -----------------------------------------------------------

_NUMBER = re.compile(r"^\s*([-+]?(?:\d+(?:\.\d*)?|\.\d+))\s*$")
CLAMP_SLACK = 0.05


def similarity_prompt(text1: str, text2: str) -> str:
    return SIMILARITY_PROMPT.replace("{text1}", text1).replace("{text2}", text2)


def gpt_score(judge, text1: str, text2: str, retry_limit: int = 3) -> float:
    """Judge-rated semantic similarity of two captions in [0, 1]."""
    if not text1 or not text2:
        raise EvaluationError("both texts must be nonempty")
    prompt = similarity_prompt(text1, text2)
    for attempt in range(retry_limit):
        reply = judge.complete(prompt, attempt=attempt)
        m = _NUMBER.match(reply)
        if not m:
            log.warning("non-numeric similarity reply (attempt %d): %r", attempt + 1, reply[:80])
            continue
        value = float(m.group(1))
        if 0.0 <= value <= 1.0:
            return value
        if -CLAMP_SLACK <= value <= 1.0 + CLAMP_SLACK:
            log.warning("similarity %s outside [0, 1]; clamping", value)
            return min(1.0, max(0.0, value))
        log.warning("similarity %s far outside [0, 1] (attempt %d)", value, attempt + 1)
    raise JudgeError(f"no numeric similarity after {retry_limit} attempts")


def asr(records: Sequence[EvaluationRecord]) -> float:
    if not records:
        raise EvaluationError("no records")
    return sum(r.success for r in records) / len(records)


# -- imperceptibility / vagueness ---------------------------------------------


def imperceptibility(delta: Perturbation | np.ndarray) -> tuple[float, float]:
    """l1 norm over N entries and l2 norm over sqrt(N), with N = H * W * 3."""
    d = np.asarray(delta.data if isinstance(delta, Perturbation) else delta, dtype=np.float64)
    n = d.size
    return float(np.abs(d).sum() / n), float(np.linalg.norm(d.ravel()) / np.sqrt(n))


def vague_rate(descriptions: Sequence[str], cfg: EvaluationConfig = EvaluationConfig()) -> float:
    if not descriptions:
        raise EvaluationError("no descriptions")
    words = [re.escape(w) for w in cfg.vague_vocabulary]
    if not words:
        return 0.0
    pat = re.compile(r"\b(?:" + "|".join(words) + r")\b", re.I)
    return sum(bool(pat.search(d)) for d in descriptions) / len(descriptions)


# -- records ------------------------------------------------------------------


def build_record(
    image_id: str,
    keywords: Sequence[str],
    adv_caption: str,
    target_caption: str,
    matched: dict[str, str],
    score: float,
    cfg: EvaluationConfig = EvaluationConfig(),
    delta: Perturbation | None = None,
) -> EvaluationRecord:
    frac, a, b, c = kmr_levels(len(keywords), len(matched), cfg)
    l1 = l2 = None
    if delta is not None:
        l1, l2 = imperceptibility(delta)
    return EvaluationRecord(
        image_id=image_id,
        keywords=list(keywords),
        adv_caption=adv_caption,
        target_caption=target_caption,
        matched=dict(matched),
        kmr_fraction=frac,
        kmr_a=a,
        kmr_b=b,
        kmr_c=c,
        gpt_score=score,
        success=score > cfg.asr_threshold,
        l1=l1,
        l2=l2,
    )


def evaluate_one(judge, image_id, keywords, adv_caption, target_caption, cfg=EvaluationConfig(), delta=None):
    matched = match_keywords(judge, adv_caption, keywords, cfg.retry_limit)
    score = gpt_score(judge, adv_caption, target_caption, cfg.retry_limit)
    return build_record(image_id, keywords, adv_caption, target_caption, matched, score, cfg, delta)


def aggregate(records: Sequence[EvaluationRecord]) -> dict:
    """Table-style summary: KMR rates, ASR and mean normalized norms."""
    if not records:
        raise EvaluationError("no records")
    n = len(records)
    out = {
        "KMR_a": sum(r.kmr_a for r in records) / n,
        "KMR_b": sum(r.kmr_b for r in records) / n,
        "KMR_c": sum(r.kmr_c for r in records) / n,
        "ASR": asr(records),
    }
    l1s = [r.l1 for r in records if r.l1 is not None]
    l2s = [r.l2 for r in records if r.l2 is not None]
    out["l1"] = float(np.mean(l1s)) if l1s else None
    out["l2"] = float(np.mean(l2s)) if l2s else None
    out["n"] = n
    return out


def asr_sweep(records: Sequence[EvaluationRecord], thresholds: Iterable[float]) -> dict[float, float]:
    """Success rate at each threshold (strict comparison), for threshold-swept reports."""
    if not records:
        raise EvaluationError("no records")
    return {t: sum(r.gpt_score > t for r in records) / len(records) for t in thresholds}


def write_records(records: Sequence[EvaluationRecord], out_dir: str | Path, stem: str = "records") -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [r.row() for r in records]
    fields = list(rows[0]) if rows else [f.name for f in EvaluationRecord.__dataclass_fields__.values()]
    with (out_dir / f"{stem}.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    (out_dir / f"{stem}.json").write_text(json.dumps([asdict(r) for r in records], indent=1))
    summary = aggregate([r for r in records if r.error is None]) if any(r.error is None for r in records) else {}
    summary["failures"] = sum(r.error is not None for r in records)
    with (out_dir / "table.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        w.writerow([summary.get(c) for c in TABLE_COLUMNS])
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary


def audit_sample(records: Sequence[EvaluationRecord], fraction: float = 0.2, seed: int = 0) -> list[EvaluationRecord]:
    """Random subset of records for manual review of the judge's outputs."""
    if not records:
        return []
    k = max(1, int(round(fraction * len(records))))
    idx = np.random.default_rng(seed).choice(len(records), size=k, replace=False)
    return [records[i] for i in sorted(idx)]
