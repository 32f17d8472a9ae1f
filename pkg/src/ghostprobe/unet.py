"""Convolutional encoder-decoder over the RGB+gradient image stack.

Each contracting stage applies two same-size 3x3 convolutions (the first
changes the channel count, a single ReLU follows the second) and a 2x2 max
pool.  Channel law: stage l outputs 2^l * base_channels, the first stage
mapping whatever in_channels it is given; the bottleneck doubles once more.
Each expansive stage upsamples with a 2x2 stride-2 transpose convolution
(halving channels), concatenates the same-scale skip, and applies another
conv-conv-ReLU block whose first convolution halves the concatenated width.
The final decoder output returns to the input spatial extents with
2 * base_channels channels.
"""

from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeError
from .optim import kaiming_conv, kaiming_tconv, zeros_param


@dataclass
class UNetConfig:
    """Input width, channel scale, and number of contracting stages."""

    in_channels: int = 4
    base_channels: int = 8
    depth: int = 3

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1 or self.depth < 1:
            raise ShapeError(f"invalid network config {self}")


@dataclass
class Pyramid2D:
    """Forward products: encoder skips (finest first), bottleneck, decoder
    outputs (finest first), and the final full-resolution map."""

    skips: list
    bottleneck: object
    decoded: list
    final: object


def skip_channels(cfg, level):
    return (2 ** level) * cfg.base_channels

def stage_in_channels(cfg, level):
    return cfg.in_channels if level == 1 else skip_channels(cfg, level - 1)

def bottleneck_channels(cfg):
    return (2 ** (cfg.depth + 1)) * cfg.base_channels


def double_conv(x, w1, b1, w2, b2):
    """conv 3x3, conv 3x3, ReLU; padding keeps spatial extents."""
    h = T.conv2d(x, w1, b1, stride=1, padding=1)
    return T.relu(T.conv2d(h, w2, b2, stride=1, padding=1))


def contract_stage(x, w1, b1, w2, b2):
    """One encoder stage; returns (skip, pooled) with halved extents."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"encoder stage needs even spatial extents, got {x.shape}")
    skip = double_conv(x, w1, b1, w2, b2)
    return skip, T.maxpool2x2(skip)


def expand_stage(x, skip, wt, bt, w1, b1, w2, b2):
    """One decoder stage: upsample, concat skip (upsample channels first),
    conv-conv-ReLU."""
    up = T.transpose_conv2x2(x, wt, bt)
    if up.shape[0] != skip.shape[0] or up.shape[2:] != skip.shape[2:]:
        raise ShapeError(f"skip extents {skip.shape} do not match upsample {up.shape}")
    return double_conv(T.concat_channels(up, skip), w1, b1, w2, b2)


def _add_conv(params, rng, name, out_ch, in_ch):
    params[f"{name}.w"] = kaiming_conv(rng, out_ch, in_ch, 3, 3)
    params[f"{name}.b"] = zeros_param((out_ch,))


def init_unet_params(rng, cfg, inject_level=None, inject_channels=0):
    """Parameter dict for the network.

    When fused point features are concatenated in at some level,
    inject_level (0 = bottleneck, else decoder level) widens the decoder
    stage that consumes the concatenated map by inject_channels.
    """
    params = {}
    for l in range(1, cfg.depth + 1):
        cout = skip_channels(cfg, l)
        _add_conv(params, rng, f"enc{l}.c1", cout, stage_in_channels(cfg, l))
        _add_conv(params, rng, f"enc{l}.c2", cout, cout)
    mid_out = bottleneck_channels(cfg)
    _add_conv(params, rng, "mid.c1", mid_out, skip_channels(cfg, cfg.depth))
    _add_conv(params, rng, "mid.c2", mid_out, mid_out)
    for l in range(cfg.depth, 0, -1):
        cin = mid_out if l == cfg.depth else skip_channels(cfg, l + 1)
        if inject_level is not None and (
                (inject_level == 0 and l == cfg.depth) or inject_level == l + 1):
            cin += inject_channels
        cout = skip_channels(cfg, l)
        params[f"dec{l}.up.w"] = kaiming_tconv(rng, cin, cout)
        params[f"dec{l}.up.b"] = zeros_param((cout,))
        _add_conv(params, rng, f"dec{l}.c1", cout, 2 * cout)
        _add_conv(params, rng, f"dec{l}.c2", cout, cout)
    return params


def _stage(params, name, *parts):
    return tuple(params[f"{name}.{p}"] for p in parts)


def encode(x, cfg, params):
    """Contracting path; returns (skips finest-first, bottleneck)."""
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input {x.shape} does not carry {cfg.in_channels} channels")
    scale = 2 ** cfg.depth
    if x.shape[2] % scale or x.shape[3] % scale:
        raise ShapeError(f"extents {x.shape[2:]} not divisible by 2^{cfg.depth}")
    skips = []
    h = x
    for l in range(1, cfg.depth + 1):
        skip, h = contract_stage(h, *_stage(params, f"enc{l}", "c1.w", "c1.b", "c2.w", "c2.b"))
        skips.append(skip)
    bottleneck = double_conv(h, *_stage(params, "mid", "c1.w", "c1.b", "c2.w", "c2.b"))
    return skips, bottleneck


def decode(bottleneck, skips, cfg, params):
    """Expansive path; returns decoder outputs finest-first."""
    decoded = [None] * cfg.depth
    h = bottleneck
    for l in range(cfg.depth, 0, -1):
        h = expand_stage(h, skips[l - 1],
                         *_stage(params, f"dec{l}", "up.w", "up.b",
                                 "c1.w", "c1.b", "c2.w", "c2.b"))
        decoded[l - 1] = h
    return decoded


def unet_forward(x, cfg, params):
    """Full pass of the plain network."""
    skips, bottleneck = encode(x, cfg, params)
    decoded = decode(bottleneck, skips, cfg, params)
    return Pyramid2D(skips=skips, bottleneck=bottleneck, decoded=decoded, final=decoded[0])
