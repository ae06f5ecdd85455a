"""The four encoder-decoder segmentation architectures.

All variants share the same skeleton: four encoder stages (channel width
doubling from `base_channels`, spatial halving), an explicit double-conv
bottleneck at 16x the base width, decoder stages mirroring the encoder,
and a 1x1 sigmoid-ready head. Differences:

  unet       plain concat skips, max pooling
  a_unet     additive attention gates on skips, max pooling
  i_unet     inception conv units, hybrid (max + spectral) pooling
  rca_iunet  inception units, hybrid pooling, multi-scale cross-spatial
             attention with a residual add on each skip

The encoder (stages + bottleneck) is separately buildable so its weights
can be pre-trained and transferred; its parameter names are identical in
both builders.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from . import engine as E
from .blocks import (
    AttentionGate,
    InceptionBlock,
    PointwiseConv,
    SeparableConvBlock,
    hybrid_pool,
    residual_miniskip,
)
from .engine import Module, ModuleList, Tensor
from .errors import ConfigError, ShapeError


class Variant(str, Enum):
    UNET = "unet"
    A_UNET = "a_unet"
    I_UNET = "i_unet"
    RCA_IUNET = "rca_iunet"

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ConfigError(
                f"unknown variant '{name}', expected one of {[v.value for v in cls]}"
            ) from None


@dataclass(frozen=True)
class ModelArchConfig:
    variant: Variant
    input_size: int = 256
    input_channels: int = 1
    stages: int = 4
    base_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.stages != 4:
            raise ConfigError(f"architecture is fixed at 4 stages, got {self.stages}")
        if self.input_size < 2**self.stages or self.input_size % 2**self.stages != 0:
            raise ConfigError(
                f"input_size must be a positive multiple of {2 ** self.stages}, "
                f"got {self.input_size}"
            )
        if self.input_channels < 1:
            raise ConfigError("input_channels must be >= 1")
        if self.base_channels < 4 or self.base_channels % 4 != 0:
            raise ConfigError(
                f"base_channels must be a positive multiple of 4, got {self.base_channels}"
            )

    def stage_widths(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.stages)]

    def bottleneck_width(self) -> int:
        return self.base_channels * 2**self.stages

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArchConfig":
        return cls(**d)

    def compatible_with(self, other: "ModelArchConfig") -> bool:
        """Same wiring and shapes; seed is allowed to differ."""
        return (
            self.variant == other.variant
            and self.input_size == other.input_size
            and self.input_channels == other.input_channels
            and self.stages == other.stages
            and self.base_channels == other.base_channels
        )


def _uses_inception(variant: Variant) -> bool:
    return variant in (Variant.I_UNET, Variant.RCA_IUNET)


def _uses_hybrid_pool(variant: Variant) -> bool:
    return variant in (Variant.I_UNET, Variant.RCA_IUNET)


def _conv_unit(variant: Variant, c_in: int, c_out: int, *, rng, dtype) -> Module:
    if _uses_inception(variant):
        return InceptionBlock(c_in, c_out, rng=rng, dtype=dtype)
    return SeparableConvBlock(c_in, c_out, 3, rng=rng, dtype=dtype)


class EncoderStage(Module):
    """Double conv unit with a residual mini-skip from the stage input."""

    def __init__(self, variant: Variant, c_in: int, c_out: int, *, rng, dtype):
        super().__init__()
        self.unit1 = _conv_unit(variant, c_in, c_out, rng=rng, dtype=dtype)
        self.unit2 = _conv_unit(variant, c_out, c_out, rng=rng, dtype=dtype)
        self.skip_proj = (
            PointwiseConv(c_in, c_out, rng=rng, dtype=dtype, bias=False)
            if c_in != c_out
            else None
        )

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.unit2(self.unit1(x, training), training)
        return residual_miniskip(x, y, self.skip_proj)


class Encoder(Module):
    """Four pooled stages plus the bottleneck double conv."""

    def __init__(self, arch: ModelArchConfig, *, rng, dtype):
        super().__init__()
        self.arch = arch
        widths = arch.stage_widths()
        ins = [arch.input_channels] + widths[:-1]
        self.stages = ModuleList(
            [
                EncoderStage(arch.variant, c_in, c_out, rng=rng, dtype=dtype)
                for c_in, c_out in zip(ins, widths)
            ]
        )
        bw = arch.bottleneck_width()
        self.bottleneck = ModuleList(
            [
                _conv_unit(arch.variant, widths[-1], bw, rng=rng, dtype=dtype),
                _conv_unit(arch.variant, bw, bw, rng=rng, dtype=dtype),
            ]
        )
        self._pool = hybrid_pool if _uses_hybrid_pool(arch.variant) else E.max_pool2x2

    def __call__(self, x: Tensor, training: bool) -> tuple[list[Tensor], Tensor]:
        skips = []
        h = x
        for stage in self.stages:
            y = stage(h, training)
            skips.append(y)
            h = self._pool(y)
        for unit in self.bottleneck:
            h = unit(h, training)
        return skips, h


class CrossSpatialAttentionGate(Module):
    """Multi-scale attention for rca_iunet skips.

    The skip is hybrid-pooled to one (or, when the resolution allows, two)
    coarser scales, each projected and fused additively with the decoder
    gate signal; the sigmoid map is upsampled and applied residually:
    output = skip + alpha * skip.
    """

    def __init__(self, skip_channels: int, gate_channels: int, skip_size: int,
                 *, rng, dtype):
        super().__init__()
        inter = max(1, skip_channels // 2)
        self.theta1 = PointwiseConv(skip_channels, inter, rng=rng, dtype=dtype, bias=False)
        # second extra scale only when the once-pooled map can be pooled again
        self.theta2 = (
            PointwiseConv(skip_channels, inter, rng=rng, dtype=dtype, bias=False)
            if skip_size % 4 == 0 and skip_size >= 4
            else None
        )
        self.phi = PointwiseConv(gate_channels, inter, rng=rng, dtype=dtype)
        self.psi = PointwiseConv(inter, 1, rng=rng, dtype=dtype)

    def __call__(self, skip: Tensor, gate: Tensor, training: bool) -> Tensor:
        if skip.data.shape[1] != 2 * gate.data.shape[1]:
            raise ShapeError(
                f"cross-spatial gate needs skip at 2x gate resolution, got "
                f"{skip.data.shape} vs {gate.data.shape}"
            )
        pooled1 = hybrid_pool(skip)
        fused = self.theta1(pooled1) + self.phi(gate)
        if self.theta2 is not None:
            fused = fused + E.upsample_nearest2(self.theta2(hybrid_pool(pooled1)))
        alpha = E.upsample_nearest2(E.sigmoid(self.psi(E.relu(fused))))
        return skip + skip * alpha


class DecoderStage(Module):
    """Upsample, halve channels, merge the (possibly gated) skip, double conv."""

    def __init__(self, arch: ModelArchConfig, c_below: int, c_skip: int, skip_size: int,
                 *, rng, dtype):
        super().__init__()
        self.up_conv = SeparableConvBlock(c_below, c_skip, 3, rng=rng, dtype=dtype)
        if arch.variant == Variant.A_UNET:
            self.gate = AttentionGate(c_skip, c_below, rng=rng, dtype=dtype)
        elif arch.variant == Variant.RCA_IUNET:
            self.gate = CrossSpatialAttentionGate(
                c_skip, c_below, skip_size, rng=rng, dtype=dtype
            )
        else:
            self.gate = None
        self.unit1 = _conv_unit(arch.variant, 2 * c_skip, c_skip, rng=rng, dtype=dtype)
        self.unit2 = _conv_unit(arch.variant, c_skip, c_skip, rng=rng, dtype=dtype)

    def __call__(self, below: Tensor, skip: Tensor, training: bool) -> Tensor:
        x = self.up_conv(E.upsample_nearest2(below), training)
        merged = skip if self.gate is None else self.gate(skip, below, training)
        return self.unit2(self.unit1(E.concat([x, merged]), training), training)


class SegmentationModel(Module):
    """Full encoder-decoder network emitting mask logits (n, s, s, 1)."""

    def __init__(self, arch: ModelArchConfig, *, dtype=np.float32):
        super().__init__()
        self.arch = arch
        self.dtype = dtype
        self.encoder = Encoder(arch, rng=E.rng_for(arch.seed, "encoder"), dtype=dtype)
        dec_rng = E.rng_for(arch.seed, "decoder")
        widths = arch.stage_widths()
        belows = [arch.bottleneck_width()] + widths[:0:-1]  # 256, 128, 64, 32
        sizes = [arch.input_size // 2**i for i in range(arch.stages)]
        self.decoder = ModuleList(
            [
                DecoderStage(arch, c_below, c_skip, size, rng=dec_rng, dtype=dtype)
                for c_below, c_skip, size in zip(belows, widths[::-1], sizes[::-1])
            ]
        )
        self.head = PointwiseConv(
            widths[0], 1, rng=E.rng_for(arch.seed, "head"), dtype=dtype
        )

    def __call__(self, x, training: bool = False) -> Tensor:
        x = _check_input(x, self.arch)
        skips, h = self.encoder(x, training)
        for stage, skip in zip(self.decoder, reversed(skips)):
            h = stage(h, skip, training)
        return self.head(h)


class EncoderOnly(Module):
    """Encoder network alone, for pre-training; forwards to the bottleneck."""

    def __init__(self, arch: ModelArchConfig, *, dtype=np.float32):
        super().__init__()
        self.arch = arch
        self.dtype = dtype
        self.encoder = Encoder(arch, rng=E.rng_for(arch.seed, "encoder"), dtype=dtype)

    def __call__(self, x, training: bool = False) -> Tensor:
        x = _check_input(x, self.arch)
        _, bottom = self.encoder(x, training)
        return bottom


def _check_input(x, arch: ModelArchConfig) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    n, h, w, c = (x.data.shape + (None,) * 4)[:4] if x.data.ndim == 4 else (None,) * 4
    if x.data.ndim != 4 or h != arch.input_size or w != arch.input_size or c != arch.input_channels:
        raise ShapeError(
            f"expected input (n, {arch.input_size}, {arch.input_size}, "
            f"{arch.input_channels}), got {x.data.shape}"
        )
    E.check_finite(x.data, "model input")
    return x


def build_model(cfg: ModelArchConfig, *, dtype=np.float32) -> SegmentationModel:
    return SegmentationModel(cfg, dtype=dtype)


def build_encoder(cfg: ModelArchConfig, *, dtype=np.float32) -> EncoderOnly:
    return EncoderOnly(cfg, dtype=dtype)


def encoder_state_names(model: SegmentationModel | EncoderOnly) -> set[str]:
    return {k for k, _ in model.named_state() if k.startswith("encoder/")}
