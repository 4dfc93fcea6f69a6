"""Command line: ``cropmatch {attack,evaluate,analyze,ablate}``.

Each command reads one config file (``--config``), applies ``--set key=value``
overrides, and writes into the configured output directory.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import itertools
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import central_dominance, ecdf, export_report, heatmap
from .attack import AttackConfig, ensemble_similarities, run_attack
from .config import ConfigError, RunConfig, list_images
from .encoders import load_ensemble
from .evaluation import (
    EvaluationRecord,
    audit_sample,
    evaluate_one,
    imperceptibility,
    vague_rate,
    write_records,
)
from .imagecore import Perturbation, load_image, read_bytes_image, save_adversarial
from .llmclient import CaptionRequest, JudgeClient, JudgeError, RetryPolicy

log = logging.getLogger("cropmatch")

MANIFEST = "manifest.json"


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json_atomic(path: Path, obj) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=1, default=str)
    os.replace(tmp, path)


def image_seed(run_seed: int, index: int) -> int:
    return int(run_seed) ^ int(index)


# -- attack -------------------------------------------------------------------


def _attack_one(cfg: RunConfig, ens, index: int, clean_path: Path, target_path: Path, out: Path) -> dict:
    image_id = clean_path.stem
    seed = image_seed(cfg.attack.seed, index)
    t0 = time.perf_counter()
    clean = load_image(clean_path, cfg.image_side)
    target = load_image(target_path, cfg.image_side)
    attack_cfg = AttackConfig.from_dict({**cfg.attack.to_dict(), "seed": seed})
    result = run_attack(clean, target, attack_cfg, ens)
    clean_png = out / "clean" / f"{image_id}.png"
    zero = Perturbation(np.zeros_like(clean), result.delta.epsilon)
    save_adversarial(clean, zero, clean_png)
    adv_png = save_adversarial(clean, result.delta, out / "adv" / f"{image_id}.png")
    result.write_trace_csv(out / "traces" / f"{image_id}.csv")
    l1, l2 = imperceptibility(result.delta)
    return {
        "image_id": image_id,
        "index": index,
        "seed": seed,
        "clean": str(clean_path),
        "target": str(target_path),
        "clean_digest": sha256(clean_path),
        "target_digest": sha256(target_path),
        "adversarial": str(adv_png.relative_to(out)),
        "adversarial_digest": sha256(adv_png),
        "clean_similarity": result.clean_similarity,
        "final_similarity": result.final_similarity,
        "gain": result.gain,
        "member_final": dict(zip(result.member_names, result.final_similarities)),
        "l1": l1,
        "l2": l2,
        "seconds": time.perf_counter() - t0,
    }


def cmd_attack(cfg: RunConfig) -> dict:
    """Attack every corpus image toward its assigned target; return the manifest."""
    problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    pairs = cfg.assignments()
    ens = load_ensemble(cfg.ensemble)
    out = cfg.output
    for sub in ("adv", "clean", "traces"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def job(item):
        i, (c, t) = item
        try:
            return _attack_one(cfg, ens, i, c, t, out)
        except Exception as exc:  # one bad image must not abort the corpus
            log.error("attack failed for %s: %s", c.name, exc)
            return {"image_id": c.stem, "index": i, "clean": str(c), "target": str(t), "error": repr(exc)}

    with ThreadPoolExecutor(max_workers=cfg.parallel) as pool:
        entries = list(pool.map(job, enumerate(pairs)))

    manifest = {
        "tool": "cropmatch",
        "version": __version__,
        "config": cfg.effective(),
        "ensemble": ens.manifest(),
        "images": [e for e in entries if "error" not in e],
        "failures": [e for e in entries if "error" in e],
        "seconds": time.perf_counter() - t0,
    }
    write_json_atomic(out / MANIFEST, manifest)
    return manifest


# -- evaluate -----------------------------------------------------------------


def _judge(cfg: RunConfig, model: str) -> JudgeClient:
    s = cfg.judge
    retry = RetryPolicy(max_attempts=s.max_attempts)
    cache = s.cache_dir or str(cfg.output / "judge_cache")
    return JudgeClient.from_env(model, s.mode, cache, timeout=s.timeout, retry=retry, rate_limit=s.rate_limit)


def load_keywords(path: Path | None) -> dict[str, list[str]]:
    if path is None:
        return {}
    import yaml

    data = yaml.safe_load(Path(path).read_text()) or {}
    out = {}
    for k, v in data.items():
        out[str(k)] = [s.strip() for s in v.split(",")] if isinstance(v, str) else [str(s) for s in v]
    return out


def load_manifest(adv_dir: Path) -> dict:
    path = Path(adv_dir) / MANIFEST
    if not path.is_file():
        raise ConfigError(f"no {MANIFEST} in {adv_dir}; run 'attack' first")
    return json.loads(path.read_text())


def cmd_evaluate(cfg: RunConfig, adv_dir: Path | None = None, out_dir: Path | None = None) -> dict:
    """Caption adversarial and target images, judge them, and tabulate KMR/ASR."""
    adv_dir = Path(adv_dir or cfg.output)
    manifest = load_manifest(adv_dir)
    images = manifest["images"]
    if not images:
        raise ConfigError(f"{adv_dir} holds no adversarial images")
    keywords = load_keywords(cfg.keywords)
    missing = [e["image_id"] for e in images if Path(e["target"]).stem not in keywords]
    if missing:
        raise ConfigError(f"no keyword labels for the targets of: {', '.join(missing)}")
    victim = _judge(cfg, cfg.judge.victim_model)
    judge = _judge(cfg, cfg.judge.judge_model)
    prompt = cfg.judge.caption_prompt

    def one(entry) -> EvaluationRecord:
        image_id = entry["image_id"]
        kws = keywords[Path(entry["target"]).stem]
        try:
            adv_png = adv_dir / entry["adversarial"]
            adv_cap = victim.caption(CaptionRequest(adv_png, prompt))
            tgt_cap = victim.caption(CaptionRequest(Path(entry["target"]), prompt))
            clean_png = adv_dir / "clean" / f"{image_id}.png"
            delta = None
            if clean_png.is_file():
                d = (read_bytes_image(adv_png).astype(np.int16) - read_bytes_image(clean_png)) / 255.0
                delta = Perturbation(d, manifest["config"]["attack"]["epsilon_255"] / 255.0)
            return evaluate_one(judge, image_id, kws, adv_cap, tgt_cap, cfg.evaluation, delta)
        except (JudgeError, ValueError, OSError) as exc:
            log.error("evaluation failed for %s: %s", image_id, exc)
            return EvaluationRecord(image_id, list(kws), "", "", {}, 0.0, False, False, False, 0.0, False,
                                    error=repr(exc))

    with ThreadPoolExecutor(max_workers=cfg.parallel) as pool:
        records = list(pool.map(one, images))
    out_dir = Path(out_dir or adv_dir / "evaluation")
    summary = write_records(records, out_dir)
    ok = [r for r in records if r.error is None]
    if ok:
        summary["vague_rate_failed"] = (
            vague_rate([r.adv_caption for r in ok if not r.success], cfg.evaluation)
            if any(not r.success for r in ok) else 0.0
        )
        write_json_atomic(out_dir / "summary.json", summary)
        write_json_atomic(out_dir / "audit.json", [r.image_id for r in audit_sample(ok)])
    return summary


# -- analyze ------------------------------------------------------------------


def _cell_size(side: int) -> int:
    for cell in (side // 8, side // 7, 8, 4, 2, 1):
        if cell >= 1 and side % cell == 0:
            return cell
    return 1


def cmd_analyze(adv_dir: Path, clean_dir: Path | None = None, out_dir: Path | None = None,
                epsilon_255: int | None = None, ensemble=None) -> list[dict]:
    """Per-image ECDF, heatmap, centrality, norms and (when targets are known) similarity."""
    adv_dir = Path(adv_dir)
    manifest = None
    if (adv_dir / MANIFEST).is_file():
        manifest = load_manifest(adv_dir)
    adv_images = adv_dir / "adv" if (adv_dir / "adv").is_dir() else adv_dir
    clean_dir = Path(clean_dir) if clean_dir else adv_dir / "clean"
    if epsilon_255 is None:
        if manifest is None:
            raise ConfigError("pass --epsilon when analyzing a directory without a manifest")
        epsilon_255 = manifest["config"]["attack"]["epsilon_255"]
    adv_files = {p.stem: p for p in list_images(adv_images)}
    clean_files = {p.stem: p for p in list_images(clean_dir)} if clean_dir.is_dir() else {}
    unpaired = sorted(set(adv_files) ^ set(clean_files))
    if unpaired:
        raise ConfigError([f"unpaired file: {name}" for name in unpaired])
    if not adv_files:
        raise ConfigError(f"no images found in {adv_images}")
    targets = {e["image_id"]: e["target"] for e in manifest["images"]} if manifest else {}
    ens = None
    if targets:
        ens = load_ensemble(ensemble if ensemble is not None else manifest["config"].get("ensemble"))
    rows, curves, maps = [], {}, {}
    for image_id in sorted(adv_files):
        adv_b = read_bytes_image(adv_files[image_id])
        clean_b = read_bytes_image(clean_files[image_id])
        if adv_b.shape != clean_b.shape:
            raise ConfigError(f"shape mismatch for {image_id}: {adv_b.shape} vs {clean_b.shape}")
        delta = Perturbation((adv_b.astype(np.int16) - clean_b) / 255.0, epsilon_255 / 255.0)
        curve = ecdf(delta)
        grid = heatmap(delta, _cell_size(adv_b.shape[0]) if adv_b.shape[0] == adv_b.shape[1] else 1)
        inside, outside = central_dominance(delta)
        l1, l2 = imperceptibility(delta)
        row = {"image_id": image_id, "ks_uniform": curve.ks_to_uniform, "center_mean": inside,
               "margin_mean": outside, "l1": l1, "l2": l2}
        if image_id in targets and Path(targets[image_id]).is_file():
            adv = adv_b / 255.0
            clean = clean_b / 255.0
            target = load_image(targets[image_id], adv_b.shape[0])
            row["adv_similarity"] = float(np.dot(ens.weights, ensemble_similarities(ens, adv, target)))
            row["clean_similarity"] = float(np.dot(ens.weights, ensemble_similarities(ens, clean, target)))
        rows.append(row)
        curves[image_id] = curve
        maps[image_id] = grid
    export_report(Path(out_dir or adv_dir / "analysis"), rows, curves, maps, run_id="analysis")
    return rows


# -- ablate -------------------------------------------------------------------

GRID_KEYS = {
    "epsilon_255": "attack.epsilon_255",
    "alpha_255": "attack.alpha_255",
    "steps": "attack.steps",
    "mode": "attack.mode",
    "optimizer": "attack.optimizer",
    "crop_scale": None,
    "ensemble_subset": None,
}


def expand_grid(grid: dict) -> list[dict]:
    unknown = set(grid) - set(GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown ablation axes: {sorted(unknown)}")
    axes = sorted(grid)
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def _cell_config(base: dict, cell: dict, ens_manifest: dict) -> dict:
    d = copy.deepcopy(base)
    d.setdefault("attack", {})
    for axis, value in cell.items():
        if axis == "crop_scale":
            lo, hi = value
            crop = dict(d["attack"].get("crop_source") or {})
            crop.update(scale_lo=lo, scale_hi=hi)
            d["attack"]["crop_source"] = crop
        elif axis == "ensemble_subset":
            names = set(value)
            members = [m for m in ens_manifest["members"] if m["name"] in names]
            if len(members) != len(names):
                raise ConfigError(f"unknown ensemble members in subset {sorted(names)}")
            d["ensemble"] = {"members": members}
        else:
            section, key = GRID_KEYS[axis].split(".")
            d[section][key] = value
    return d


def cmd_ablate(cfg: RunConfig, grid: dict | None = None) -> list[dict]:
    """One attack run per grid cell, plus a combined comparison table."""
    grid = grid if grid is not None else (cfg.raw.get("ablation") or {}).get("grid")
    if not grid:
        raise ConfigError("no ablation grid given")
    cells = expand_grid(grid)
    if len(cells) > cfg.max_cells:
        raise ConfigError(f"grid has {len(cells)} cells, above the configured limit of {cfg.max_cells}")
    ens_manifest = load_ensemble(cfg.ensemble).manifest()
    for m in ens_manifest["members"]:
        m.setdefault("kind", "toy")
    rows = []
    for k, cell in enumerate(cells):
        d = _cell_config(cfg.raw, cell, ens_manifest)
        d["output"] = str(cfg.output / f"cell_{k:03d}")
        d.pop("ablation", None)
        manifest = cmd_attack(RunConfig.from_dict(d, base=cfg.base))
        imgs = manifest["images"]
        rows.append({
            "cell": k,
            **{a: json.dumps(v) if isinstance(v, (list, tuple)) else v for a, v in cell.items()},
            "n": len(imgs),
            "failures": len(manifest["failures"]),
            "mean_gain": float(np.mean([e["gain"] for e in imgs])) if imgs else None,
            "mean_final_similarity": float(np.mean([e["final_similarity"] for e in imgs])) if imgs else None,
            "mean_l1": float(np.mean([e["l1"] for e in imgs])) if imgs else None,
        })
    cfg.output.mkdir(parents=True, exist_ok=True)
    from .analysis import write_table

    write_table(rows, cfg.output / "ablation.csv")
    return rows


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cropmatch", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", "-c", required=True, help="YAML or JSON run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. attack.steps=10")
        sp.add_argument("--output", "-o", help="output directory (overrides config)")
        sp.add_argument("--parallel", "-j", type=int, help="images processed concurrently")

    sp = sub.add_parser("attack", help="craft adversarial images for a corpus")
    common(sp)

    sp = sub.add_parser("evaluate", help="caption and judge adversarial images")
    common(sp)
    sp.add_argument("--adv-dir", help="directory written by 'attack' (default: config output)")
    sp.add_argument("--judge-mode", choices=["live", "record", "replay"])

    sp = sub.add_parser("analyze", help="ECDF, heatmap and similarity exports")
    sp.add_argument("adv_dir")
    sp.add_argument("--clean-dir")
    sp.add_argument("--output", "-o")
    sp.add_argument("--epsilon", type=int, help="budget on the 0-255 scale (default: from manifest)")

    sp = sub.add_parser("ablate", help="run an ablation grid")
    common(sp)
    sp.add_argument("--grid", help="YAML/JSON grid file (default: config 'ablation.grid')")
    return p


def _load(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "output", None):
        overrides.append(f"output={args.output}")
    if getattr(args, "parallel", None):
        overrides.append(f"parallel={args.parallel}")
    if getattr(args, "judge_mode", None):
        overrides.append(f"judge.mode={args.judge_mode}")
    return RunConfig.load(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "attack":
            manifest = cmd_attack(_load(args))
            print(f"{len(manifest['images'])} adversarial images, {len(manifest['failures'])} failures")
            return 1 if manifest["failures"] else 0
        if args.command == "evaluate":
            summary = cmd_evaluate(_load(args), args.adv_dir)
            print(json.dumps(summary, indent=1))
            return 1 if summary.get("failures") else 0
        if args.command == "analyze":
            rows = cmd_analyze(Path(args.adv_dir), args.clean_dir, args.output, args.epsilon)
            print(f"analyzed {len(rows)} images")
            return 0
        if args.command == "ablate":
            cfg = _load(args)
            grid = None
            if args.grid:
                import yaml

                grid = yaml.safe_load(Path(args.grid).read_text())
            rows = cmd_ablate(cfg, grid)
            print(f"{len(rows)} ablation cells")
            return 1 if any(r["failures"] for r in rows) else 0
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
