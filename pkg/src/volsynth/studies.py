"""Synthesis evaluation, conditioning baselines, and the prompt-corruption study.

Reports are comma-separated tables with the fixed header
``kind, rate, seed, slot, psnr_db, ssim``. Evaluation patterns are drawn
per subject from a seeded generator, so every model and baseline sees the
same missing configurations and re-runs are reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import MDiT3D
from .config import RunConfig
from .diffusion import NoiseSchedule, sample_missing
from .metrics import psnr, ssim3d
from .phantom import Dataset, MissingPattern, apply_missing, sample_missing_pattern
from .tokenizer import CompletenessTokenizer, infer_prompts
from .train import seed_for

REPORT_HEADER = ["kind", "rate", "seed", "slot", "psnr_db", "ssim"]

CORRUPTION_KINDS = ("p_d", "p_p", "p_s", "all")
CORRUPTION_RATES = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class SampleResult:
    subject_id: int
    pattern: MissingPattern
    psnr_missing: float      # mean over missing slots
    ssim_missing: float
    psnr_whole: float
    per_slot: dict[int, tuple[float, float]]  # slot -> (psnr, ssim)

    @property
    def group_key(self) -> int:
        """Missing count (brain) or missing run length in slices (cardiac)."""
        return len(self.pattern.missing)


def eval_patterns(dataset: Dataset, seed: int, subject_ids=None) -> dict[int, MissingPattern]:
    """One fixed missing pattern per evaluated subject."""
    ids = dataset.test_ids if subject_ids is None else list(subject_ids)
    out = {}
    for sid in ids:
        rng = np.random.Generator(np.random.PCG64(seed_for(seed, sid, "eval-pattern")))
        out[sid] = sample_missing_pattern(rng, dataset.manifest.m, dataset.manifest.mode)
    return out


def _score(synth: np.ndarray, truth: np.ndarray, pattern: MissingPattern,
           subject_id: int) -> SampleResult:
    per_slot = {}
    miss = list(pattern.missing)
    for s in miss:
        a, b = synth[s], truth[s]
        if pattern.mode == "cardiac":
            # slices are 2D; score them within the stacked missing run below
            continue
        per_slot[s] = (psnr(a, b), ssim3d(a, b))
    if pattern.mode == "cardiac":
        a = synth[miss, 0]
        b = truth[miss, 0]
        val = (psnr(a, b), ssim3d(a, b))
        for s in miss:
            per_slot[s] = val
        pm, sm = val
    else:
        pm = float(np.mean([v[0] for v in per_slot.values()]))
        sm = float(np.mean([v[1] for v in per_slot.values()]))
    return SampleResult(
        subject_id=subject_id,
        pattern=pattern,
        psnr_missing=pm,
        ssim_missing=sm,
        psnr_whole=psnr(synth, truth),
        per_slot=per_slot,
    )


def evaluate_synthesis(model: MDiT3D, tok: CompletenessTokenizer, dataset: Dataset,
                       schedule: NoiseSchedule, n_substeps: int, seed: int,
                       conditioning: str = "prompts", subject_ids=None,
                       prompt_edit=None) -> list[SampleResult]:
    """Synthesize every evaluated subject once and score the missing slots.

    ``prompt_edit(sid, PromptTokens) -> vector`` optionally rewrites the
    conditioning vector per subject (used by the corruption study).
    """
    ids = dataset.test_ids if subject_ids is None else list(subject_ids)
    if not ids:
        raise ValueError("empty evaluation split")
    patterns = eval_patterns(dataset, seed, ids)
    results = []
    for sid in ids:
        vol = dataset.load(sid)
        pattern = patterns[sid]
        incomplete, _ = apply_missing(vol, pattern)
        override = None
        if prompt_edit is not None and conditioning == "prompts":
            override = prompt_edit(sid, infer_prompts(tok, incomplete))
        synth = sample_missing(
            model, tok, incomplete, pattern, schedule, n_substeps,
            seed=seed_for(seed, sid, "synth"), conditioning=conditioning,
            prompt_override=override,
        )
        results.append(_score(synth, vol.data, pattern, sid))
    return results


# ---------------------------------------------------------------------------
# Conditioning-free baselines
# ---------------------------------------------------------------------------


def baseline_results(dataset: Dataset, seed: int, kind: str, subject_ids=None) -> list[SampleResult]:
    """Score zero-fill or dataset-mean-volume imputation under the eval patterns."""
    ids = dataset.test_ids if subject_ids is None else list(subject_ids)
    patterns = eval_patterns(dataset, seed, ids)
    if kind == "mean":
        mean_vol = np.mean([dataset.load(i).data for i in dataset.train_ids], axis=0)
    elif kind != "zero":
        raise ValueError(f"unknown baseline {kind!r}")
    results = []
    for sid in ids:
        vol = dataset.load(sid)
        pattern = patterns[sid]
        pred, _ = apply_missing(vol, pattern)
        if kind == "mean":
            pred[list(pattern.missing)] = mean_vol[list(pattern.missing)]
        results.append(_score(pred, vol.data, pattern, sid))
    return results


def mean_missing_psnr(results: list[SampleResult]) -> float:
    return float(np.mean([r.psnr_missing for r in results]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_report(path: Path, rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        writer.writerows(rows)


def grouped_report_rows(results: list[SampleResult], seed: int, kind: str = "eval") -> list[list]:
    """Per-slot rows plus per-group aggregates keyed by missing count/length."""
    rows = []
    groups: dict[int, list[SampleResult]] = {}
    for r in results:
        groups.setdefault(r.group_key, []).append(r)
    for key in sorted(groups):
        rs = groups[key]
        rows.append([kind, key, seed, "all",
                     round(float(np.mean([r.psnr_missing for r in rs])), 4),
                     round(float(np.mean([r.ssim_missing for r in rs])), 6)])
    slot_scores: dict[int, list[tuple[float, float]]] = {}
    for r in results:
        for slot, val in r.per_slot.items():
            slot_scores.setdefault(slot, []).append(val)
    for slot in sorted(slot_scores):
        vals = slot_scores[slot]
        rows.append([kind, "any", seed, slot,
                     round(float(np.mean([v[0] for v in vals])), 4),
                     round(float(np.mean([v[1] for v in vals])), 6)])
    rows.append([kind, "any", seed, "aggregate",
                 round(mean_missing_psnr(results), 4),
                 round(float(np.mean([r.ssim_missing for r in results])), 6)])
    return rows


# ---------------------------------------------------------------------------
# Prompt-corruption study
# ---------------------------------------------------------------------------


def _swap_component(own, donor, kind: str) -> np.ndarray:
    parts = {
        "p_d": (donor.p_d, own.p_p, own.p_s),
        "p_p": (own.p_d, donor.p_p, own.p_s),
        "p_s": (own.p_d, own.p_p, donor.p_s),
        "all": (donor.p_d, donor.p_p, donor.p_s),
    }[kind]
    return np.concatenate(parts)


def corruption_study(model: MDiT3D, tok: CompletenessTokenizer, dataset: Dataset,
                     schedule: NoiseSchedule, n_substeps: int, seeds,
                     rates=CORRUPTION_RATES, kinds=CORRUPTION_KINDS,
                     subject_ids=None) -> list[list]:
    """Swap prompt components with donors for an r-fraction of test samples.

    Returns report rows: one aggregate row per (kind, rate, seed) cell plus
    one median row per (kind, rate) with seed='median'.
    """
    ids = dataset.test_ids if subject_ids is None else list(subject_ids)
    if len(ids) < 2:
        raise ValueError("corruption study needs at least 2 test samples for donor prompts")

    # donor prompts under each donor's own eval pattern, per seed
    rows = []
    cell_psnr: dict[tuple[str, float], dict[int, float]] = {}
    cell_ssim: dict[tuple[str, float], dict[int, float]] = {}
    for seed in seeds:
        patterns = eval_patterns(dataset, seed, ids)
        prompts = {}
        for sid in ids:
            vol = dataset.load(sid)
            incomplete, _ = apply_missing(vol, patterns[sid])
            prompts[sid] = infer_prompts(tok, incomplete)
        for kind in kinds:
            for rate in rates:
                rng = np.random.Generator(
                    np.random.PCG64(seed_for(seed, kind, rate, "corrupt"))
                )
                n_corrupt = int(round(rate * len(ids)))
                chosen = set(rng.choice(ids, size=n_corrupt, replace=False).tolist()) if n_corrupt else set()
                donors = {}
                for sid in chosen:
                    pool = [d for d in ids if d != sid and patterns[d].missing != patterns[sid].missing]
                    if not pool:
                        pool = [d for d in ids if d != sid]
                    donors[sid] = int(rng.choice(pool))

                def edit(sid, own, _chosen=chosen, _donors=donors):
                    if sid not in _chosen:
                        return own.p
                    return _swap_component(own, prompts[_donors[sid]], kind)

                results = evaluate_synthesis(
                    model, tok, dataset, schedule, n_substeps, seed,
                    conditioning="prompts", subject_ids=ids, prompt_edit=edit,
                )
                pm = mean_missing_psnr(results)
                sm = float(np.mean([r.ssim_missing for r in results]))
                rows.append([kind, rate, seed, "all", round(pm, 4), round(sm, 6)])
                cell_psnr.setdefault((kind, rate), {})[seed] = pm
                cell_ssim.setdefault((kind, rate), {})[seed] = sm
    for (kind, rate), by_seed in cell_psnr.items():
        rows.append([
            kind, rate, "median", "all",
            round(float(np.median(list(by_seed.values()))), 4),
            round(float(np.median(list(cell_ssim[(kind, rate)].values()))), 6),
        ])
    return rows


def median_psnr_from_rows(rows: list[list], kind: str, rate: float) -> float:
    for row in rows:
        if row[0] == kind and float(row[1]) == rate and row[2] == "median":
            return float(row[4])
    raise KeyError(f"no median row for ({kind}, {rate})")
