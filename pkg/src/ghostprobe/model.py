"""The full pipeline model: 2D path, 3D path, fusion, detection head.

A ModelConfig fixes which inputs are enabled (RGB channels, gradient
channel, point cloud), the network sizes, and the fusion point; from it a
flat named-parameter dict is initialized, checkpointed, and fed to
model_forward.  Disabling the point cloud collapses the model to the plain
2D network; disabling both 2D inputs feeds a single all-zero channel so the
image path still carries the fused point features to full resolution.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .fusion import FusionConfig, fuse_into_head
from .optim import kaiming_conv, xavier_linear, zeros_param
from .pointnet import SALevelConfig, encode_decode
from .unet import (
    Pyramid2D,
    UNetConfig,
    bottleneck_channels,
    decode,
    encode,
    init_unet_params,
    skip_channels,
)

DESK_SA_LEVELS = (
    SALevelConfig(n_out=256, k=8, mlp_widths=(16, 16, 32)),
    SALevelConfig(n_out=64, k=8, mlp_widths=(32, 32, 64)),
    SALevelConfig(n_out=16, k=8, mlp_widths=(64, 64, 128)),
    SALevelConfig(n_out=4, k=8, mlp_widths=(128, 128, 256)),
)

POINT_FEATURE_DIM = 3  # per-point RGB


@dataclass
class ModelConfig:
    """Network sizes, enabled inputs, and the fusion point."""

    base_channels: int = 8
    depth: int = 3
    sa_levels: tuple = DESK_SA_LEVELS
    dim: int = 64
    fuse_level: int = 0
    rgb: bool = True
    ig: bool = True
    pcd: bool = True
    max_points: int = 512
    interp_k: int = 3

    def __post_init__(self):
        if not (self.rgb or self.ig or self.pcd):
            raise ConfigError("at least one of rgb/ig/pcd must be enabled")
        if self.pcd and not self.sa_levels:
            raise ConfigError("point path enabled but no set-abstraction levels given")
        if self.pcd and self.fuse_level > self.depth:
            raise ConfigError(
                f"fuse_level {self.fuse_level} exceeds decoder depth {self.depth}")

    @property
    def in_channels(self):
        n = (3 if self.rgb else 0) + (1 if self.ig else 0)
        return n if n else 1  # point-only mode feeds one zero channel

    def unet_config(self):
        return UNetConfig(in_channels=self.in_channels,
                          base_channels=self.base_channels, depth=self.depth)

    def fusion_config(self):
        return FusionConfig(dim=self.dim, fuse_level=self.fuse_level)

    def kv_width(self):
        """Feature width of the point features used as keys/values."""
        if self.fuse_level == 0:
            return self.sa_levels[-1].mlp_widths[-1]
        idx = min(self.fuse_level, len(self.sa_levels)) - 1
        return self.sa_levels[idx].mlp_widths[-1]

    def query_width(self):
        ucfg = self.unet_config()
        if self.fuse_level == 0:
            return bottleneck_channels(ucfg)
        return skip_channels(ucfg, self.fuse_level)

    def head_in_channels(self):
        ucfg = self.unet_config()
        width = skip_channels(ucfg, 1)
        if self.pcd and self.fuse_level == 1:
            width += self.dim
        return width


def init_model_params(rng, cfg):
    """Flat name -> Tensor dict covering every trainable weight."""
    ucfg = cfg.unet_config()
    if cfg.pcd:
        params = init_unet_params(rng, ucfg, inject_level=cfg.fuse_level,
                                  inject_channels=cfg.dim)
        in_ch = 3 + POINT_FEATURE_DIM
        for i, level in enumerate(cfg.sa_levels):
            for j, width in enumerate(level.mlp_widths):
                params[f"sa{i}.m{j}.w"] = kaiming_conv(rng, width, in_ch, 1, 1)
                params[f"sa{i}.m{j}.b"] = zeros_param((width,))
                in_ch = width
            in_ch = 3 + width
        for i in range(len(cfg.sa_levels) - 1):
            w_fine = cfg.sa_levels[i].mlp_widths[-1]
            w_coarse = cfg.sa_levels[i + 1].mlp_widths[-1]
            params[f"fp{i}.w"] = xavier_linear(rng, w_coarse + w_fine, w_fine)
            params[f"fp{i}.b"] = zeros_param((w_fine,))
        params["fuse.wq"] = xavier_linear(rng, cfg.query_width(), cfg.dim)
        params["fuse.wk"] = xavier_linear(rng, cfg.kv_width(), cfg.dim)
        params["fuse.wv"] = xavier_linear(rng, cfg.kv_width(), cfg.dim)
    else:
        params = init_unet_params(rng, ucfg)
    params["head.w"] = kaiming_conv(rng, 1, cfg.head_in_channels(), 1, 1)
    params["head.b"] = zeros_param((1,))
    return params


def _sa_params(params, cfg):
    out = []
    for i, level in enumerate(cfg.sa_levels):
        out.append([(params[f"sa{i}.m{j}.w"], params[f"sa{i}.m{j}.b"])
                    for j in range(len(level.mlp_widths))])
    return out


def _fp_params(params, cfg):
    return [(params[f"fp{i}.w"], params[f"fp{i}.b"])
            for i in range(len(cfg.sa_levels) - 1)]


def head_forward(final_map, params):
    """Per-pixel probability map: 1x1 convolution and a logistic squash."""
    return T.sigmoid(T.conv2d(final_map, params["head.w"], params["head.b"]))


def model_forward(images, cloud, cfg, params):
    """Full pass from assembled inputs to a [B,1,H,W] probability map.

    images: Tensor [B, in_channels, H, W] already stacked per the flags.
    cloud: PointCloud batch, required iff cfg.pcd.
    """
    if cfg.pcd and cloud is None:
        raise ShapeError("point path enabled but no cloud given")
    ucfg = cfg.unet_config()
    skips, bottleneck = encode(images, ucfg, params)
    if cfg.pcd:
        pyr3d = encode_decode(cloud, list(cfg.sa_levels), _sa_params(params, cfg),
                              _fp_params(params, cfg), k=cfg.interp_k)
        pyr2d = Pyramid2D(skips=skips, bottleneck=bottleneck, decoded=None, final=None)
        final = fuse_into_head(pyr2d, pyr3d, ucfg, cfg.fusion_config(), params)
    else:
        final = decode(bottleneck, skips, ucfg, params)[0]
    return head_forward(final, params)
