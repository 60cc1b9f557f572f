"""Multi-seed ablation sweeps over the contrast losses and the crop size.

The contrast sweep trains the four switch combinations {baseline, +patch,
+pixel, both}; the crop-size sweep trains the full method at patch sizes
{32, 40, 48, 56}. Every variant runs the same seed list, and a given seed
fixes the model init and batch order across variants, so comparisons are
paired. Runs can execute as parallel worker processes, each confined to its
own run directory.
"""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, estimator_kwargs, flatten_config
from .estimator import DomainAdaptiveSegmenter
from .synth import load_domain
from .validation import require

CONTRAST_VARIANTS = (
    ("baseline", dict(enable_pixel=False, enable_patch=False)),
    ("patch", dict(enable_pixel=False, enable_patch=True)),
    ("pixel", dict(enable_pixel=True, enable_patch=False)),
    ("both", dict(enable_pixel=True, enable_patch=True)),
)

CROP_SIZES = (32, 40, 48, 56)


@dataclass
class SweepRun:
    name: str
    seed: int
    overrides: dict
    run_dir: str


def _load_split(data_root: str | Path, eval_count: int):
    source = load_domain(data_root, "source")
    target = load_domain(data_root, "target")
    n = target.images.shape[0]
    require(0 <= eval_count < n, f"eval_count {eval_count} out of range for "
            f"{n} target samples")
    split = n - eval_count
    return (source.images, source.labels, target.images[:split],
            target.images[split:], target.labels[split:])


def run_one(config: ExperimentConfig, data_root: str | Path,
            run_dir: str | Path, overrides: dict, seed: int,
            torch_threads: int | None = None) -> float:
    """Train one sweep entry and return its held-out target mIoU."""
    if torch_threads is not None:
        import torch
        torch.set_num_threads(torch_threads)
    src_imgs, src_labs, tgt_train, tgt_eval_imgs, tgt_eval_labs = _load_split(
        data_root, config.data.eval_count)
    kwargs = estimator_kwargs(config)
    kwargs.update(overrides)
    kwargs["seed"] = seed
    kwargs["run_dir"] = str(run_dir)
    model = DomainAdaptiveSegmenter(**kwargs)
    model.fit(src_imgs, src_labs, tgt_train, tgt_eval_imgs, tgt_eval_labs)
    miou = model.score(tgt_eval_imgs, tgt_eval_labs)
    Path(run_dir, "result.json").write_text(json.dumps(
        {"name": Path(run_dir).name, "seed": seed, "miou": miou}, indent=2) + "\n")
    return miou


def _worker(payload: dict) -> tuple[str, int, float]:
    config = payload["config"]
    miou = run_one(config, payload["data_root"], payload["run_dir"],
                   payload["overrides"], payload["seed"],
                   torch_threads=payload["torch_threads"])
    return payload["name"], payload["seed"], miou


def plan_sweep(config: ExperimentConfig, out_dir: str | Path, mode: str,
               seeds: list[int]) -> list[SweepRun]:
    require(mode in ("contrast", "crop-size"), f"unknown sweep mode {mode!r}")
    runs = []
    if mode == "contrast":
        variants = [(name, dict(overrides)) for name, overrides in CONTRAST_VARIANTS]
    else:
        variants = [(f"crop{size}",
                     dict(enable_pixel=True, enable_patch=True, patch_size=size))
                    for size in CROP_SIZES]
    for name, overrides in variants:
        for seed in seeds:
            runs.append(SweepRun(name=name, seed=seed, overrides=overrides,
                                 run_dir=str(Path(out_dir, f"{name}-seed{seed}"))))
    return runs


def estimate_step_seconds(config: ExperimentConfig, data_root: str | Path,
                          probe_steps: int = 3) -> float:
    """Time a few real steps of the heaviest variant for budget estimates."""
    src_imgs, src_labs, tgt_train, _, _ = _load_split(data_root,
                                                      config.data.eval_count)
    kwargs = estimator_kwargs(config)
    kwargs.update(iterations=probe_steps, enable_pixel=True, enable_patch=True,
                  eval_every=0, run_dir=None)
    model = DomainAdaptiveSegmenter(**kwargs)
    start = time.perf_counter()
    model.fit(src_imgs, src_labs, tgt_train)
    return (time.perf_counter() - start) / max(probe_steps, 1)


def run_sweep(config: ExperimentConfig, data_root: str | Path,
              out_dir: str | Path, mode: str = "contrast",
              seeds: list[int] | None = None, jobs: int = 1) -> dict:
    """Execute the sweep; returns {name: {seed: miou}} plus summary stats."""
    seeds = seeds if seeds is not None else [config.train.seed + i for i in range(3)]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = plan_sweep(config, out_dir, mode, seeds)
    payloads = [{"config": config, "data_root": str(data_root),
                 "run_dir": run.run_dir, "overrides": run.overrides,
                 "seed": run.seed, "name": run.name,
                 "torch_threads": 1 if jobs > 1 else None}
                for run in runs]

    scores: dict[str, dict[int, float]] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for name, seed, miou in pool.map(_worker, payloads):
                scores.setdefault(name, {})[seed] = miou
    else:
        for payload in payloads:
            name, seed, miou = _worker(payload)
            scores.setdefault(name, {})[seed] = miou

    results = summarize(scores, mode, seeds)
    results["config"] = flatten_config(config)
    (out_dir / "results.json").write_text(json.dumps(results, indent=2,
                                                     sort_keys=True) + "\n")
    (out_dir / "table.txt").write_text(format_table(results) + "\n")
    return results


def summarize(scores: dict[str, dict[int, float]], mode: str,
              seeds: list[int]) -> dict:
    names = ([name for name, _ in CONTRAST_VARIANTS] if mode == "contrast"
             else [f"crop{s}" for s in CROP_SIZES])
    rows = []
    baseline_mean = None
    for name in names:
        per_seed = [scores[name][s] for s in seeds]
        mean = statistics.fmean(per_seed)
        std = statistics.stdev(per_seed) if len(per_seed) > 1 else 0.0
        if name in ("baseline", f"crop{CROP_SIZES[0]}") and baseline_mean is None:
            baseline_mean = mean
        rows.append({"name": name, "mean_miou": mean, "std_miou": std,
                     "per_seed": {str(s): scores[name][s] for s in seeds}})
    for row in rows:
        row["delta_miou"] = row["mean_miou"] - baseline_mean
    out = {"mode": mode, "seeds": seeds, "rows": rows}
    if mode == "contrast":
        out["ordering_per_seed"] = {
            str(s): ordering_holds_for_seed(scores, s) for s in seeds}
        out["mean_gap_both_vs_baseline"] = (
            statistics.fmean(scores["both"][s] for s in seeds)
            - statistics.fmean(scores["baseline"][s] for s in seeds))
    return out


def ordering_holds_for_seed(scores: dict[str, dict[int, float]],
                            seed: int) -> bool:
    """baseline <= {+patch, +pixel} <= both, for one seed."""
    base = scores["baseline"][seed]
    both = scores["both"][seed]
    mids = (scores["patch"][seed], scores["pixel"][seed])
    return base <= min(mids) and max(mids) <= both


def format_table(results: dict) -> str:
    header = f"{'configuration':<14} {'mIoU (mean ± std)':>22} {'Δ mIoU':>9}"
    lines = [header, "-" * len(header)]
    for row in results["rows"]:
        delta = row["delta_miou"]
        delta_text = "  --  " if abs(delta) < 1e-12 else f"{100 * delta:+6.2f}"
        lines.append(f"{row['name']:<14} "
                     f"{100 * row['mean_miou']:10.2f} ± {100 * row['std_miou']:5.2f}   "
                     f"{delta_text:>9}")
    lines.append("(values are mIoU percentage points over "
                 f"{len(results['seeds'])} seed(s))")
    if "mean_gap_both_vs_baseline" in results:
        lines.append(f"both - baseline: "
                     f"{100 * results['mean_gap_both_vs_baseline']:+.2f} mIoU points")
        held = sum(results["ordering_per_seed"].values())
        lines.append(f"ordering baseline <= (pixel|patch) <= both holds in "
                     f"{held}/{len(results['seeds'])} seeds")
    return "\n".join(lines)
