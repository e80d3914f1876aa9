"""Evaluation of a model on a split and the ablation sweep."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .kspace import ifft2c, zero_fill
from .metrics import MetricReport
from .network import MambaMdnModel
from .training import Sample, TrainResult, prepare_samples, to_batch, train

log = logging.getLogger(__name__)

__all__ = [
    "reconstruct",
    "evaluate",
    "AblationResult",
    "run_ablation_suite",
    "ABLATION_VARIANTS",
    "format_table",
    "write_per_sample_csv",
    "footprint_error",
]

# input-pairing variants first, then the block-arrangement variants
ABLATION_VARIANTS = (
    "MIX_MINUS_REF",
    "TARUS_MINUS_REF",
    "MIX_MINUS_TARUS",
    "MIX_MINUS_ZERO",
    "PARALLEL_T",
    "SINGLE_BLOCK",
)


def reconstruct(model: MambaMdnModel, samples: list[Sample], batch_size: int = 4) -> list[np.ndarray]:
    """Complex reconstructions, one ``[h, w]`` array per sample."""
    out = []
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            planes = model(to_batch(samples[start : start + batch_size])).data
            out.extend(p[0] + 1j * p[1] for p in planes)
    return out


def evaluate(model: MambaMdnModel | None, samples: list[Sample]) -> dict[str, MetricReport]:
    """Metrics for the zero-filled and complemented inputs and, if given, the model.

    Keys are ``"ZF"``, ``"KCM"`` and the model's variant name.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    rows = {"ZF": MetricReport(), "KCM": MetricReport()}
    for s in samples:
        gt = s.target.magnitude()
        rows["ZF"].add(zero_fill(s.k_us).magnitude(), gt)
        k_mix = np.where(s.mask.lines[:, None], s.k_us.data, s.k_ref.data)
        rows["KCM"].add(np.abs(ifft2c(k_mix)), gt)
    if model is not None:
        report = MetricReport()
        for s, rec in zip(samples, reconstruct(model, samples)):
            report.add(np.abs(rec), s.target.magnitude())
        rows[model.variant] = report
    return rows


def footprint_error(model: MambaMdnModel, samples: list[Sample], footprints: list[np.ndarray]) -> float:
    """Mean absolute magnitude error inside the given boolean footprints."""
    errs = []
    for s, rec, fp in zip(samples, reconstruct(model, samples), footprints):
        if fp.any():
            errs.append(float(np.mean(np.abs(np.abs(rec) - s.target.magnitude())[fp])))
    return float(np.mean(errs)) if errs else math.nan


@dataclass
class AblationResult:
    """Per-variant reports, pooled over seeds and kept per seed."""

    pooled: dict[str, MetricReport] = field(default_factory=dict)
    per_seed: dict[str, list[MetricReport]] = field(default_factory=dict)
    losses: dict[str, list[TrainResult]] = field(default_factory=dict)
    baselines: dict[str, MetricReport] = field(default_factory=dict)


def _train_and_eval(args) -> tuple[str, int, MetricReport, TrainResult]:
    key, cfg, train_samples, test_samples = args
    model = MambaMdnModel(cfg)
    result = train(model, train_samples, cfg)
    report = evaluate(model, test_samples)[cfg.variant]
    log.info("%s seed %d: PSNR %.3f SSIM %.4f", key, cfg.seed, report.psnr_db, report.mean_ssim)
    return key, cfg.seed, report, result


def run_ablation_suite(
    base: ModelConfig,
    train_pairs,
    test_pairs,
    seeds=(0, 1, 2, 3, 4),
    variants=ABLATION_VARIANTS,
    block_counts=(),
    fusion: bool = False,
    jobs: int = 1,
) -> AblationResult:
    """Train every variant once per seed on identical data and masks, then evaluate.

    ``block_counts`` adds an iterative-depth sweep keyed ``"T=<n>"``; ``fusion``
    adds the KCM-free additive-fusion counterpart keyed ``"FUSION"``.
    """
    train_samples = prepare_samples(train_pairs, base)
    test_samples = prepare_samples(test_pairs, base, mask_offset=len(train_pairs))
    jobs_list = []
    for seed in seeds:
        for v in variants:
            jobs_list.append((v, base.replace(variant=v, seed=seed), train_samples, test_samples))
        for t in block_counts:
            cfg = base.replace(variant="MIX_MINUS_REF", T=t, seed=seed)
            jobs_list.append((f"T={t}", cfg, train_samples, test_samples))
        if fusion:
            jobs_list.append(("FUSION", base.replace(variant="FUSION", seed=seed), train_samples, test_samples))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_train_and_eval, jobs_list))
    else:
        outcomes = [_train_and_eval(j) for j in jobs_list]

    result = AblationResult()
    for key, _seed, report, losses in outcomes:
        result.per_seed.setdefault(key, []).append(report)
        result.losses.setdefault(key, []).append(losses)
        result.pooled.setdefault(key, MetricReport()).extend(report)
    baselines = evaluate(None, test_samples)
    result.baselines = baselines
    return result


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.6f}"


def format_table(rows: dict[str, MetricReport], split: str = "test") -> str:
    """Tab-separated ``variant split PSNR SSIM RMSE n std`` with a header line."""
    lines = ["variant\tsplit\tPSNR\tSSIM\tRMSE\tn\tstd"]
    for name, r in rows.items():
        lines.append(
            "\t".join(
                [name, split, _fmt(r.psnr_db), _fmt(r.mean_ssim), _fmt(r.mean_rmse), str(r.n), _fmt(r.psnr_std)]
            )
        )
    return "\n".join(lines) + "\n"


def write_per_sample_csv(rows: dict[str, MetricReport], path: str | Path) -> None:
    lines = ["variant,index,psnr,ssim,rmse,nrmse"]
    for name, r in rows.items():
        for i in range(r.n):
            lines.append(f"{name},{i},{_fmt(r.psnr[i])},{_fmt(r.ssim[i])},{_fmt(r.rmse[i])},{_fmt(r.nrmse[i])}")
    Path(path).write_text("\n".join(lines) + "\n")
