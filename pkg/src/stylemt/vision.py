"""Encoders and receptive-field arithmetic.

Two encoder families are provided: a truncated residual network (stem plus
four stages of two basic blocks, cut after a chosen stage) and a shallow
PatchGAN trunk whose output units see small, tiled regions of the input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import BatchNorm2d, Conv2d, LeakyReLU, ReLU, Sequential, conv_output_size
from .tensor import Module


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid conv spec {self}")

    def output_size(self, size):
        out = conv_output_size(size, self.kernel, self.stride, self.padding)
        if out < 1:
            raise ConfigError(f"{self} does not fit an input of size {size}")
        return out

    def param_count(self, bias=True):
        return self.in_channels * self.out_channels * self.kernel ** 2 + (self.out_channels if bias else 0)


@dataclass
class EncoderConfig:
    family: str = "patchgan"            # "residual" | "patchgan"
    widths: tuple = (16, 32, 64, 128)   # residual stage widths
    truncate_after_layer: int = 2       # residual: last kept stage, 1-based
    ndf: int = 16                       # patchgan base width
    patch_size: int = 4                 # patchgan first-layer kernel and stride
    extra_layers: int = 1               # patchgan kernel-3 layers after the first
    in_channels: int = 3

    def validate(self):
        if self.family == "residual":
            if not 1 <= self.truncate_after_layer <= len(self.widths):
                raise ConfigError(
                    f"truncate_after_layer={self.truncate_after_layer} outside stages 1..{len(self.widths)}")
        elif self.family == "patchgan":
            if self.ndf < 4:
                raise ConfigError(f"ndf must be >= 4, got {self.ndf}")
            if self.patch_size < 1 or self.extra_layers < 0:
                raise ConfigError("patch_size must be >= 1 and extra_layers >= 0")
        else:
            raise ConfigError(f"unknown encoder family {self.family!r}")
        return self

    def to_dict(self):
        d = dict(vars(self))
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d.get("widths", cls.widths))
        return cls(**d)


# --------------------------------------------------------------------------
# receptive fields


@dataclass
class ReceptiveField:
    top: int
    left: int
    height: int
    width: int
    jump: int          # aggregate stride
    size: int          # unclipped field width
    offset: int        # input coordinate of the field's top-left for output 0

    @property
    def rect(self):
        return (self.top, self.left, self.height, self.width)


def field_geometry(layers):
    """(size, jump, offset) of the stacked layers via rf' = rf + (k-1)*jump."""
    if not layers:
        raise ConfigError("receptive field needs at least one layer")
    size, jump, offset = 1, 1, 0
    for spec in layers:
        offset -= spec.padding * jump
        size += (spec.kernel - 1) * jump
        jump *= spec.stride
    return size, jump, offset


def output_shape(layers, input_hw):
    h, w = input_hw
    for spec in layers:
        h, w = spec.output_size(h), spec.output_size(w)
    return h, w


def receptive_field(layers, pos, input_size=None):
    """Input rectangle seen by output coordinate ``pos`` = (row, col).

    With ``input_size`` = (H, W) the position is range-checked and the
    rectangle is clipped to the image.
    """
    size, jump, offset = field_geometry(layers)
    r, c = pos
    if r < 0 or c < 0:
        raise IndexError(f"output position {pos} out of range")
    top, left = offset + r * jump, offset + c * jump
    bottom, right = top + size, left + size
    if input_size is not None:
        oh, ow = output_shape(layers, input_size)
        if r >= oh or c >= ow:
            raise IndexError(f"output position {pos} outside {oh}x{ow} map")
        top, left = max(top, 0), max(left, 0)
        bottom, right = min(bottom, input_size[0]), min(right, input_size[1])
    return ReceptiveField(top, left, bottom - top, right - left, jump, size, offset)


def first_overlapping_layer(layers):
    """Index of the first layer after which neighbouring output fields overlap, or None."""
    for i in range(1, len(layers) + 1):
        size, jump, _ = field_geometry(layers[:i])
        if size > jump:
            return i - 1
    return None


def tiling_check(layers, input_hw):
    """Exhaustive disjointness/coverage test of per-output-pixel fields.

    Returns (disjoint, covers): no input pixel lies in two fields, and every
    input pixel lies in some field.
    """
    oh, ow = output_shape(layers, input_hw)
    hits = np.zeros(input_hw, dtype=np.int32)
    for r in range(oh):
        for c in range(ow):
            f = receptive_field(layers, (r, c), input_hw)
            hits[f.top:f.top + f.height, f.left:f.left + f.width] += 1
    return bool(hits.max() <= 1), bool(hits.min() >= 1)


@dataclass
class BlockLocality:
    block: int
    block_stride: int      # input pixels between neighbouring blocks
    field_radius: float    # half the per-pixel field width
    halo: int              # input pixels one block field extends past its stride footprint
    tiled: bool            # stride footprints of blocks tile the input exactly
    local: bool            # block_stride >= field_radius

    @property
    def ok(self):
        return self.tiled and self.local


def block_locality(layers, block, input_hw):
    """Locality of ``block`` x ``block`` groups of output pixels.

    A group's stride footprint is the block_stride-sized input square it is
    centred on; footprints of distinct groups are disjoint and tile the
    input when the map divides into whole blocks. Fields of neighbouring
    pixels may overlap; the group stays local while its stride is at least
    the per-pixel field radius.
    """
    size, jump, _ = field_geometry(layers)
    oh, ow = output_shape(layers, input_hw)
    stride = block * jump
    tiled = (oh % block == 0 and ow % block == 0
             and oh * jump == input_hw[0] and ow * jump == input_hw[1])
    return BlockLocality(block, stride, size / 2, size - jump, tiled, stride >= size / 2)


# --------------------------------------------------------------------------
# residual encoder


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, bias=False, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, bias=False, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = Sequential(Conv2d(cin, cout, 1, stride, 0, bias=False, rng=rng), BatchNorm2d(cout))
        else:
            self.shortcut = None
        self.relu2 = ReLU()

    def conv_specs(self):
        c1, c2 = self.conv1, self.conv2
        return [ConvSpec(c1.in_channels, c1.out_channels, 3, c1.stride, 1),
                ConvSpec(c2.in_channels, c2.out_channels, 3, 1, 1)]

    def forward(self, x):
        y = self.bn2(self.conv2(self.relu1(self.bn1(self.conv1(x)))))
        s = x if self.shortcut is None else self.shortcut(x)
        return self.relu2(y + s)

    def backward(self, dy):
        dy = self.relu2.backward(dy)
        dx = self.conv1.backward(self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(dy)))))
        if self.shortcut is None:
            return dx + dy
        return dx + self.shortcut.backward(dy)


class ResidualEncoder(Module):
    """Stem (3x3 stride-2 conv, BN, ReLU) then stages 1..truncate_after_layer.

    Stage 1 keeps resolution, later stages halve it. There is no global
    pooling and no classifier.
    """

    def __init__(self, cfg: EncoderConfig, rng=None):
        cfg.validate()
        if cfg.family != "residual":
            raise ConfigError("ResidualEncoder needs family='residual'")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        w = cfg.widths
        self.stem = Sequential(Conv2d(cfg.in_channels, w[0], 3, 2, 1, bias=False, rng=rng), BatchNorm2d(w[0]), ReLU())
        self.blocks = []
        cin = w[0]
        for i in range(cfg.truncate_after_layer):
            stride = 1 if i == 0 else 2
            self.blocks.append(BasicBlock(cin, w[i], stride, rng))
            self.blocks.append(BasicBlock(w[i], w[i], 1, rng))
            cin = w[i]
        self.out_channels = cin

    def conv_specs(self):
        specs = [ConvSpec(self.cfg.in_channels, self.cfg.widths[0], 3, 2, 1)]
        for b in self.blocks:
            specs.extend(b.conv_specs())
        return specs

    def output_hw(self, input_hw):
        return output_shape(self.conv_specs(), input_hw)

    def forward(self, x):
        x = self.stem(x)
        for b in self.blocks:
            x = b(x)
        return x

    def backward(self, dy):
        for b in reversed(self.blocks):
            dy = b.backward(dy)
        return self.stem.backward(dy)


def build_truncated_encoder(cfg: EncoderConfig, rng=None):
    if cfg.family != "residual":
        raise ConfigError(f"truncated encoder needs family='residual', got {cfg.family!r}")
    return ResidualEncoder(cfg, rng)


# --------------------------------------------------------------------------
# PatchGAN trunk


class PatchGANTrunk(Module):
    """Conv(k=patch_size, s=patch_size) -> BN -> LeakyReLU(0.2), then
    ``extra_layers`` x [Conv(k3, s1, p1) -> BN -> LeakyReLU(0.2)].

    Channel width starts at ndf and doubles per extra layer, capped at 8*ndf.
    """

    def __init__(self, cfg: EncoderConfig, rng=None):
        cfg.validate()
        if cfg.family != "patchgan":
            raise ConfigError("PatchGANTrunk needs family='patchgan'")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self._specs = [ConvSpec(cfg.in_channels, cfg.ndf, cfg.patch_size, cfg.patch_size, 0)]
        ch = cfg.ndf
        for i in range(cfg.extra_layers):
            nxt = cfg.ndf * min(2 ** (i + 1), 8)
            self._specs.append(ConvSpec(ch, nxt, 3, 1, 1))
            ch = nxt
        layers = []
        for s in self._specs:
            layers += [Conv2d(s.in_channels, s.out_channels, s.kernel, s.stride, s.padding, rng=rng),
                       BatchNorm2d(s.out_channels), LeakyReLU(0.2)]
        self.net = Sequential(*layers)
        self.out_channels = ch

    def conv_specs(self):
        return list(self._specs)

    def output_hw(self, input_hw):
        return output_shape(self._specs, input_hw)

    def forward(self, x):
        return self.net(x)

    def backward(self, dy):
        return self.net.backward(dy)


def build_patchgan_trunk(cfg: EncoderConfig, rng=None, require_disjoint=None, block=None, input_hw=None):
    """Build the trunk, optionally enforcing receptive-field locality.

    ``require_disjoint="pixel"`` demands pairwise-disjoint per-pixel fields;
    ``"block"`` demands block-level locality for ``block`` x ``block`` groups
    of map pixels (see :func:`block_locality`).
    """
    if cfg.family != "patchgan":
        raise ConfigError(f"patchgan trunk needs family='patchgan', got {cfg.family!r}")
    trunk = PatchGANTrunk(cfg, rng)
    specs = trunk.conv_specs()
    if require_disjoint == "pixel":
        bad = first_overlapping_layer(specs)
        if bad is not None:
            raise ConfigError(f"receptive fields overlap after layer {bad} ({specs[bad]})")
    elif require_disjoint == "block":
        if block is None or input_hw is None:
            raise ConfigError("block-level disjointness needs block and input_hw")
        for i in range(1, len(specs) + 1):
            loc = block_locality(specs[:i], block, input_hw)
            if not loc.ok:
                raise ConfigError(
                    f"block fields lose locality after layer {i - 1} ({specs[i - 1]}): "
                    f"block stride {loc.block_stride} < field radius {loc.field_radius}"
                    if loc.tiled else f"blocks of {block} do not tile the map after layer {i - 1}")
    elif require_disjoint is not None:
        raise ConfigError(f"unknown disjointness level {require_disjoint!r}")
    return trunk


def build_encoder(cfg: EncoderConfig, rng=None):
    if cfg.family == "residual":
        return build_truncated_encoder(cfg, rng)
    return build_patchgan_trunk(cfg, rng)


def check_input(x, channels):
    if x.ndim != 4 or x.shape[1] != channels:
        raise DimensionError(f"expected B x {channels} x H x W input, got {x.shape}")
