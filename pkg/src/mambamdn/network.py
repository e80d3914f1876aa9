"""The disentanglement network: encoders, gated MMD blocks, head and DC.

Data flow for one batch (complex data travel as two real planes)::

    K_mix = M*K_tar_us + (1-M)*K_ref        (k-space complementation)
    F_mix0 = MFE(I_mix),  F_ref = RFE(I_ref)
    F_tar <- F_mix0;  repeat T times:  F_tar <- MMD(F_tar, F_mix0, F_ref)
    I_hat = DC(I_mix + head(F_tar))
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, ShapeError, Tensor
from .config import VARIANTS, ModelConfig
from .kspace import ComplexImage, KSpaceGrid, SamplingMask, data_consistency, ifft2c
from .ssm import ss2d

__all__ = [
    "UNetEncoder",
    "SS2DLayer",
    "MmdBranch",
    "MmdBlock",
    "MambaMdnModel",
    "Batch",
    "make_batch",
    "l1_loss",
    "ablation_variant",
]


def _conv_param(rng, c_out, c_in, k, name) -> Parameter:
    std = np.sqrt(1.0 / (c_in * k * k))
    return Parameter(rng.normal(0.0, std, (c_out, c_in, k, k)), name)


def _linear_param(rng, c_out, c_in, name, std=None) -> Parameter:
    std = np.sqrt(1.0 / c_in) if std is None else std
    return Parameter(rng.normal(0.0, std, (c_out, c_in)), name)


class UNetEncoder(Module):
    """Small U-Net: 2 input planes -> ``c`` feature channels at full resolution.

    Each down level halves the extents (odd extents are padded) and doubles the
    channels; the decoder concatenates skips and crops back to the input size.
    """

    def __init__(self, c: int, depth: int = 2, kernel: int = 3, in_channels: int = 2, rng=None):
        rng = np.random.default_rng(rng)
        self.depth = depth
        widths = [c * 2**level for level in range(depth + 1)]
        self.stem_w = _conv_param(rng, c, in_channels, kernel, "stem.weight")
        self.stem_b = Parameter(np.zeros(c))
        self.down_w = []
        self.down_b = []
        for level in range(1, depth + 1):
            self.down_w.append(_conv_param(rng, widths[level], widths[level - 1], kernel, ""))
            self.down_b.append(Parameter(np.zeros(widths[level])))
        self.up_w = []
        self.up_b = []
        for level in range(depth, 0, -1):
            c_in = widths[level] + widths[level - 1]
            self.up_w.append(_conv_param(rng, widths[level - 1], c_in, kernel, ""))
            self.up_b.append(Parameter(np.zeros(widths[level - 1])))
        self.out_w = _conv_param(rng, c, c, kernel, "")
        self.out_b = Parameter(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.silu(ad.conv2d(x, self.stem_w, self.stem_b))
        skips = [h]
        for w, b in zip(self.down_w, self.down_b):
            h = ad.silu(ad.conv2d(ad.avg_pool2(h), w, b))
            skips.append(h)
        skips.pop()
        for w, b in zip(self.up_w, self.up_b):
            skip = skips.pop()
            h = ad.upsample2(h, skip.shape[-2:])
            h = ad.silu(ad.conv2d(ad.concat([h, skip], axis=1), w, b))
        return ad.conv2d(h, self.out_w, self.out_b)


class SS2DLayer(Module):
    """Parameters of a four-direction selective scan, stacked on a leading axis."""

    def __init__(self, c: int, state_dim: int = 8, merge: str = "sum", rng=None):
        rng = np.random.default_rng(rng)
        n = state_dim
        self.merge = merge
        self.a_log = Parameter(np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (4, c, 1))))
        self.d_skip = Parameter(np.ones((4, c)))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(0.1), (4, c)))
        self.delta_bias = Parameter(dt + np.log(-np.expm1(-dt)))
        self.w_delta = Parameter(rng.normal(0.0, 0.1 / np.sqrt(c), (4, c, c)))
        self.w_b = Parameter(rng.normal(0.0, 1.0 / np.sqrt(c), (4, c, n)))
        self.b_bias = Parameter(np.zeros((4, n)))
        self.w_c = Parameter(rng.normal(0.0, 1.0 / np.sqrt(c), (4, c, n)))
        self.c_bias = Parameter(np.zeros((4, n)))

    def __call__(self, x: Tensor) -> Tensor:
        return ss2d(
            x,
            self.a_log,
            self.d_skip,
            self.w_delta,
            self.delta_bias,
            self.w_b,
            self.b_bias,
            self.w_c,
            self.c_bias,
            merge=self.merge,
        )


class MmdBranch(Module):
    """Projection -> depthwise conv -> SiLU -> SS2D -> channel LayerNorm."""

    def __init__(self, c: int, state_dim: int, kernel: int, merge: str, rng):
        self.proj_w = _linear_param(rng, c, c, "")
        self.proj_b = Parameter(np.zeros(c))
        self.dw_w = Parameter(rng.normal(0.0, 1.0 / kernel, (c, kernel, kernel)))
        self.dw_b = Parameter(np.zeros(c))
        self.ssm = SS2DLayer(c, state_dim, merge, rng)
        self.norm_g = Parameter(np.ones(c))
        self.norm_b = Parameter(np.zeros(c))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.channel_linear(x, self.proj_w, self.proj_b)
        h = ad.silu(ad.depthwise_conv2d(h, self.dw_w, self.dw_b))
        h = self.ssm(h)
        return ad.layer_norm(h, self.norm_g, self.norm_b, eps=1e-5, axis=-3)


class MmdBlock(Module):
    """Gated modality disentanglement.

    ``F_mix = F_mix0 + F_tar``; the gate ``sigmoid(W_g F_tar + b_g)`` modulates
    the processed reference features, which are projected and subtracted from
    the processed mixed features.
    """

    def __init__(self, c: int, state_dim: int = 8, kernel: int = 3, merge: str = "sum", rng=None):
        rng = np.random.default_rng(rng)
        self.mix = MmdBranch(c, state_dim, kernel, merge, rng)
        self.ref = MmdBranch(c, state_dim, kernel, merge, rng)
        self.gate_w = _linear_param(rng, c, c, "")
        self.gate_b = Parameter(np.zeros(c))
        self.out_w = _linear_param(rng, c, c, "")

    def __call__(
        self,
        f_tar: Tensor,
        f_mix0: Tensor,
        f_ref: Tensor | None,
        combine: str = "subtract",
    ) -> Tensor:
        if f_tar.shape != f_mix0.shape or (f_ref is not None and f_ref.shape != f_tar.shape):
            shapes = (f_tar.shape, f_mix0.shape, None if f_ref is None else f_ref.shape)
            raise ShapeError(f"MMD inputs disagree: {shapes}")
        mixed = self.mix(ad.add(f_mix0, f_tar))
        if f_ref is None:
            return mixed
        gate = ad.sigmoid(ad.channel_linear(f_tar, self.gate_w, self.gate_b))
        removed = ad.channel_linear(ad.mul(gate, self.ref(f_ref)), self.out_w)
        if combine == "add":
            return ad.add(mixed, removed)
        return ad.sub(mixed, removed)


@dataclass
class Batch:
    """Stacked inputs for one forward pass (leading axis = sample)."""

    k_us: np.ndarray  # complex [b, h, w], centred, zero on unacquired rows
    k_ref: np.ndarray  # complex [b, h, w]
    lines: np.ndarray  # bool [b, h]
    target: np.ndarray | None = None  # real planes [b, 2, h, w]

    @property
    def size(self) -> int:
        return self.k_us.shape[0]


def _planes(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag], axis=-3)


def make_batch(
    k_us: list[KSpaceGrid],
    k_ref: list[KSpaceGrid],
    masks: list[SamplingMask],
    targets: list[ComplexImage] | None = None,
) -> Batch:
    for ku, kr, m in zip(k_us, k_ref, masks):
        if ku.shape != kr.shape or ku.shape != m.shape:
            raise ShapeError(f"batch member shapes differ: {ku.shape}, {kr.shape}, {m.shape}")
    tgt = None if targets is None else np.stack([t.planes() for t in targets])
    return Batch(
        np.stack([k.data for k in k_us]),
        np.stack([k.data for k in k_ref]),
        np.stack([m.lines for m in masks]),
        tgt,
    )


class MambaMdnModel(Module):
    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        self.mfe = UNetEncoder(cfg.c, cfg.depth, cfg.kernel, rng=rng)
        self.rfe = UNetEncoder(cfg.c, cfg.depth, cfg.kernel, rng=rng)
        n_blocks = 1 if cfg.variant == "SINGLE_BLOCK" else cfg.T
        self.blocks = [MmdBlock(cfg.c, cfg.state_dim, cfg.kernel, cfg.merge, rng) for _ in range(n_blocks)]
        # zero head: an untrained model returns the complemented image unchanged
        self.head_w = Parameter(np.zeros((2, cfg.c)))
        self.head_b = Parameter(np.zeros(2))
        if cfg.dc_mode == "every":
            self.lift_w = Parameter(np.zeros((cfg.c, 2)))
        self.parameters()

    @property
    def variant(self) -> str:
        return self.config.variant

    def inputs(self, batch: Batch) -> dict[str, np.ndarray]:
        """Image-domain inputs of the variant: mixed, zero-filled and reference planes."""
        keep = batch.lines[..., :, None]
        k_mix = np.where(keep, batch.k_us, batch.k_ref)
        return {
            "mix": _planes(ifft2c(k_mix)),
            "zf": _planes(ifft2c(batch.k_us)),
            "ref": _planes(ifft2c(batch.k_ref)),
        }

    def encode(self, batch: Batch) -> tuple[Tensor, Tensor | None, np.ndarray]:
        imgs = self.inputs(batch)
        v = self.variant
        base = imgs["zf"] if v in ("TARUS_MINUS_REF", "FUSION") else imgs["mix"]
        f_mix0 = self.mfe(Tensor(base))
        if v == "MIX_MINUS_ZERO":
            f_ref = None
        elif v == "MIX_MINUS_TARUS":
            f_ref = self.rfe(Tensor(imgs["zf"]))
        else:
            f_ref = self.rfe(Tensor(imgs["ref"]))
        return f_mix0, f_ref, base

    def _to_image(self, f: Tensor, base: np.ndarray) -> Tensor:
        return ad.add(Tensor(base), ad.channel_linear(f, self.head_w, self.head_b))

    def __call__(self, batch: Batch) -> Tensor:
        """Reconstruction planes ``[b, 2, h, w]`` after the final DC."""
        f_mix0, f_ref, base = self.encode(batch)
        combine = "add" if self.variant == "FUSION" else "subtract"
        if self.variant == "PARALLEL_T":
            outs = [blk(f_mix0, f_mix0, f_ref, combine) for blk in self.blocks]
            f = outs[0]
            for o in outs[1:]:
                f = ad.add(f, o)
            f = ad.scale(f, 1.0 / len(outs))
        else:
            f = f_mix0
            for i, blk in enumerate(self.blocks):
                f = blk(f, f_mix0, f_ref, combine)
                if self.config.dc_mode == "every" and i < len(self.blocks) - 1:
                    img = self._to_image(f, base)
                    fix = ad.sub(data_consistency(img, batch.k_us, batch.lines), img)
                    f = ad.add(f, ad.channel_linear(fix, self.lift_w))
        return data_consistency(self._to_image(f, base), batch.k_us, batch.lines)

    def reconstruct(self, k_tar_us: KSpaceGrid, k_ref_fs: KSpaceGrid, mask: SamplingMask) -> ComplexImage:
        with ad.no_grad():
            out = self(make_batch([k_tar_us], [k_ref_fs], [mask])).data[0]
        return ComplexImage(out[0] + 1j * out[1])

    def mfe_forward(self, image: ComplexImage) -> Tensor:
        return self.mfe(Tensor(image.planes()[None]))

    def rfe_forward(self, image: ComplexImage) -> Tensor:
        return self.rfe(Tensor(image.planes()[None]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.parameters()}
        missing = sorted(set(params) - set(state))
        if missing:
            raise ad.ContractError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint {state[name].shape} vs model {p.shape}")
            p.data = state[name].copy()


def l1_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute difference over every plane and pixel."""
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"l1_loss: {pred.shape} vs {gt.shape}")
    return ad.mean(ad.abs_(ad.sub(pred, gt)))


def ablation_variant(model: MambaMdnModel, variant: str) -> MambaMdnModel:
    """Rewire ``model`` as ``variant``, sharing its parameters.

    ``SINGLE_BLOCK`` keeps only the first block.
    """
    if variant not in VARIANTS:
        raise ad.ConfigError(f"unknown variant {variant!r}")
    out = copy.copy(model)
    out.config = model.config.replace(variant=variant)
    if variant == "SINGLE_BLOCK":
        out.blocks = model.blocks[:1]
    return out
