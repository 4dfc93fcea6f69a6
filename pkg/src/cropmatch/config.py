"""Run configuration: one YAML/JSON file, with ``key.path=value`` overrides."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .attack import AttackConfig
from .evaluation import EvaluationConfig

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm")


class ConfigError(ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot override {dotted!r}: {k!r} is not a mapping")
    d[keys[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    return key.strip(), yaml.safe_load(raw)


def list_images(directory: Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def derangement(n: int, seed: int) -> list[int]:
    """Seeded permutation of ``range(n)`` with no fixed points."""
    if n < 2:
        raise ConfigError("a derangement needs at least two images")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return [int(i) for i in perm]


@dataclass
class JudgeSettings:
    victim_model: str = "gpt-4o"
    judge_model: str = "gpt-4o"
    mode: str = "replay"
    cache_dir: str | None = None
    caption_prompt: str = "Describe this image."
    rate_limit: int = 60
    timeout: float = 60.0
    max_attempts: int = 3


@dataclass
class RunConfig:
    corpus: Path
    output: Path
    attack: AttackConfig = field(default_factory=AttackConfig)
    ensemble: dict | str | None = None
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    judge: JudgeSettings = field(default_factory=JudgeSettings)
    pairs: Path | None = None
    target_seed: int = 0
    image_side: int = 224
    parallel: int = 1
    keywords: Path | None = None
    max_cells: int = 64
    raw: dict = field(default_factory=dict, repr=False)
    base: Path = field(default_factory=Path.cwd, repr=False)

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        raw = copy.deepcopy(d)
        d = copy.deepcopy(d)
        base = (Path(base) if base else Path.cwd()).resolve()

        def path(key):
            v = d.pop(key, None)
            if v is None:
                return None
            p = Path(v)
            return p if p.is_absolute() else base / p

        known = {"corpus", "output", "attack", "ensemble", "evaluation", "judge", "pairs", "target_seed",
                 "image_side", "parallel", "keywords", "max_cells", "ablation"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        corpus, output = path("corpus"), path("output")
        if corpus is None or output is None:
            raise ConfigError("config needs both 'corpus' and 'output'")
        ens = d.pop("ensemble", None)
        if isinstance(ens, str) and not Path(ens).is_absolute():
            ens = str(base / ens)
        judge = dict(d.pop("judge", None) or {})
        if judge.get("cache_dir") and not Path(judge["cache_dir"]).is_absolute():
            judge["cache_dir"] = str(base / judge["cache_dir"])
        try:
            attack = AttackConfig.from_dict(d.pop("attack", None) or {})
            evaluation = EvaluationConfig(**(d.pop("evaluation", None) or {}))
            judge_settings = JudgeSettings(**judge)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        d.pop("ablation", None)
        return cls(
            corpus=corpus,
            output=output,
            attack=attack,
            ensemble=ens,
            evaluation=evaluation,
            judge=judge_settings,
            pairs=path("pairs"),
            target_seed=int(d.pop("target_seed", 0)),
            image_side=int(d.pop("image_side", 224)),
            parallel=int(d.pop("parallel", 1)),
            keywords=path("keywords"),
            max_cells=int(d.pop("max_cells", 64)),
            raw=raw,
            base=base,
        )

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] = ()) -> "RunConfig":
        path = Path(path)
        d = yaml.safe_load(path.read_text()) or {}
        for o in overrides:
            set_path(d, *parse_override(o))
        return cls.from_dict(d, base=path.parent)

    def effective(self) -> dict:
        """Merged configuration as plain data, for manifests."""
        return {
            "corpus": str(self.corpus),
            "output": str(self.output),
            "attack": self.attack.to_dict(),
            "ensemble": self.ensemble,
            "evaluation": {
                "kmr_thresholds": list(self.evaluation.kmr_thresholds),
                "asr_threshold": self.evaluation.asr_threshold,
                "vague_vocabulary": list(self.evaluation.vague_vocabulary),
                "retry_limit": self.evaluation.retry_limit,
                "kmr_b_strict": self.evaluation.kmr_b_strict,
            },
            "judge": vars(self.judge).copy(),
            "pairs": str(self.pairs) if self.pairs else None,
            "target_seed": self.target_seed,
            "image_side": self.image_side,
            "parallel": self.parallel,
            "keywords": str(self.keywords) if self.keywords else None,
            "max_cells": self.max_cells,
        }

    def validate(self) -> list[str]:
        """All problems found, without touching outputs."""
        problems = []
        if not self.corpus.is_dir():
            problems.append(f"corpus directory not found: {self.corpus}")
        elif len(list_images(self.corpus)) == 0:
            problems.append(f"corpus directory has no images: {self.corpus}")
        if self.pairs is not None and not self.pairs.is_file():
            problems.append(f"pairs file not found: {self.pairs}")
        if isinstance(self.ensemble, str) and not Path(self.ensemble).is_file():
            problems.append(f"ensemble manifest not found: {self.ensemble}")
        if self.keywords is not None and not self.keywords.is_file():
            problems.append(f"keywords file not found: {self.keywords}")
        if self.image_side < 8:
            problems.append(f"image_side must be at least 8, got {self.image_side}")
        if self.parallel < 1:
            problems.append(f"parallel must be at least 1, got {self.parallel}")
        if not problems:
            try:
                self.assignments()
            except ConfigError as exc:
                problems.extend(exc.problems)
        return problems

    def assignments(self) -> list[tuple[Path, Path]]:
        """(clean, target) image pairs; no image is ever its own target."""
        images = list_images(self.corpus)
        if self.pairs is None:
            perm = derangement(len(images), self.target_seed)
            return [(images[i], images[j]) for i, j in enumerate(perm)]
        by_name = {p.name: p for p in images}
        by_stem = {p.stem: p for p in images}
        out, problems = [], []
        with self.pairs.open(newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[0] == "clean":
                    continue
                if len(row) < 2:
                    problems.append(f"malformed pairs row: {row}")
                    continue
                c, t = row[0].strip(), row[1].strip()
                cp = by_name.get(c) or by_stem.get(c) or self._outside(c)
                tp = by_name.get(t) or by_stem.get(t) or self._outside(t)
                if cp is None or tp is None:
                    problems.append(f"pairs row references missing file: {c}, {t}")
                elif cp.resolve() == tp.resolve():
                    problems.append(f"image {c} is paired with itself")
                else:
                    out.append((cp, tp))
        if problems:
            raise ConfigError(problems)
        if not out:
            raise ConfigError("pairs file lists no pairs")
        return out

    def _outside(self, name: str) -> Path | None:
        p = Path(name)
        if not p.is_absolute():
            p = self.pairs.parent / p
        return p if p.is_file() else None
