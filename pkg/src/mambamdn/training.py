"""Sample preparation and the Adam/L1 training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Adam
from .config import ModelConfig
from .kspace import ComplexImage, KSpaceGrid, SamplingMask, add_noise, apply_mask, fft2, make_mask
from .network import Batch, MambaMdnModel, make_batch, l1_loss

log = logging.getLogger(__name__)

__all__ = ["Sample", "prepare_samples", "batches", "train", "TrainResult", "TrainingDiverged"]


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass
class Sample:
    target: ComplexImage
    reference: ComplexImage
    mask: SamplingMask
    k_us: KSpaceGrid
    k_ref: KSpaceGrid


def prepare_samples(
    pairs,
    cfg: ModelConfig,
    mask_offset: int = 0,
    acceleration: float | None = None,
) -> list[Sample]:
    """Undersample each ``(target, reference, ...)`` pair with its own fixed mask.

    Sample ``i`` uses mask seed ``cfg.mask_seed + mask_offset + i``.
    """
    accel = cfg.accel if acceleration is None else acceleration
    out = []
    for i, pair in enumerate(pairs):
        tar, ref = pair[0], pair[1]
        seed = cfg.mask_seed + mask_offset + i
        m = make_mask(tar.height, tar.width, accel, cfg.center_fraction, seed)
        k_full = fft2(tar)
        if cfg.noise_sigma > 0:
            k_full = add_noise(k_full, cfg.noise_sigma, seed)
        out.append(Sample(tar, ref, m, apply_mask(k_full, m), fft2(ref)))
    return out


def to_batch(samples: list[Sample]) -> Batch:
    return make_batch(
        [s.k_us for s in samples],
        [s.k_ref for s in samples],
        [s.mask for s in samples],
        [s.target for s in samples],
    )


def batches(samples: list[Sample], batch_size: int, rng: np.random.Generator):
    """One shuffled epoch of batches; the last short batch is kept."""
    order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        yield to_batch([samples[i] for i in order[start : start + batch_size]])


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else math.nan

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan

    def smoothed(self, window: int = 10) -> np.ndarray:
        x = np.asarray(self.losses)
        if x.size == 0:
            return x
        window = max(1, min(window, x.size))
        return np.convolve(x, np.ones(window) / window, mode="valid")


def train(
    model: MambaMdnModel,
    samples: list[Sample],
    cfg: ModelConfig | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train in place for ``cfg.epochs`` epochs, stopping early at ``cfg.max_steps``."""
    cfg = cfg or model.config
    if not samples:
        raise ValueError("no training samples")
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    result = TrainResult()
    epochs = cfg.epochs if cfg.max_steps == 0 else max(cfg.epochs, 10**9)
    for epoch in range(epochs):
        for batch in batches(samples, cfg.batch, rng):
            opt.zero_grad()
            loss = l1_loss(model(batch), batch.target)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at step {result.steps}")
            loss.backward()
            opt.step()
            result.losses.append(value)
            result.steps += 1
            if callback is not None:
                callback(result.steps, value)
            log.debug("epoch %d step %d loss %.6f", epoch, result.steps, value)
            if cfg.max_steps and result.steps >= cfg.max_steps:
                return result
    return result
