"""Cross-attention fusion of 2D image features with 3D point features.

The flattened 2D map provides queries; the point features provide keys and
values.  A single head computes softmax((Q/sqrt(dim)) K^T) V, so every
output row is a convex combination of projected point features.  The
attended map is concatenated back into the 2D decoder at a configurable
level (default: the bottleneck, paired with the coarsest point features)
and the remaining decoder stages run to full resolution.
"""

import math
from dataclasses import dataclass

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor
from .unet import expand_stage


@dataclass
class FusionConfig:
    """Latent width and injection point (0 = bottleneck, else decoder level,
    1 being the finest)."""

    dim: int = 64
    fuse_level: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeError(f"attention width must be at least 1, got {self.dim}")
        if self.fuse_level < 0:
            raise ShapeError(f"fuse_level must be 0 (bottleneck) or a decoder level, got {self.fuse_level}")


@dataclass
class ProjectionWeights:
    """The three learned projections: W_Q [C,dim], W_K and W_V [D,dim]."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    def __post_init__(self):
        dims = {self.wq.shape[1], self.wk.shape[1], self.wv.shape[1]}
        if len(dims) != 1:
            raise ShapeError(f"projection widths differ: q={self.wq.shape}, "
                             f"k={self.wk.shape}, v={self.wv.shape}")
        if self.wk.shape[0] != self.wv.shape[0]:
            raise ShapeError("key and value projections must share the feature width")

    @property
    def dim(self):
        return self.wq.shape[1]


def cross_attention(f2d, f3d, w):
    """Attend image queries over point keys/values -> [B, H*W, dim]."""
    if f2d.ndim != 4:
        raise ShapeError(f"2D features must be [B,C,H,W], got {f2d.shape}")
    if f3d.ndim != 3:
        raise ShapeError(f"3D features must be [B,N,D], got {f3d.shape}")
    if f2d.shape[1] != w.wq.shape[0]:
        raise ShapeError(f"query projection expects {w.wq.shape[0]} channels, map has {f2d.shape[1]}")
    if f3d.shape[2] != w.wk.shape[0]:
        raise ShapeError(f"key projection expects {w.wk.shape[0]} features, points have {f3d.shape[2]}")
    q = T.matmul(T.flatten_spatial(f2d), w.wq)
    k = T.matmul(f3d, w.wk)
    v = T.matmul(f3d, w.wv)
    scores = T.matmul(T.mul(q, 1.0 / math.sqrt(w.dim)), T.transpose(k, (0, 2, 1)))
    return T.matmul(T.softmax_rows(scores), v)


def attention_to_map(att, h, w):
    """[B, h*w, dim] rows back into a [B, dim, h, w] feature map."""
    b, n, dim = att.shape
    if n != h * w:
        raise ShapeError(f"{n} attention rows cannot fill a {h}x{w} map")
    return T.transpose(T.reshape(att, (b, h, w, dim)), (0, 3, 1, 2))


def _kv_features(pyramid3d, fuse_level):
    """Point features paired with an injection level: coarsest encoder
    features for the bottleneck, same-numbered decoded level otherwise."""
    if fuse_level == 0:
        return pyramid3d.levels[-1].feats
    idx = min(fuse_level, len(pyramid3d.levels)) - 1
    return pyramid3d.decoded[idx]


def fuse_into_head(pyramid2d, pyramid3d, ucfg, fcfg, params):
    """Inject attended point features into the decoder; returns the final map.

    pyramid2d needs skips and bottleneck filled; its decoded/final fields
    are populated here.  params must carry decoder stages sized for the
    injected width plus fuse.wq/wk/wv.
    """
    L = ucfg.depth
    if fcfg.fuse_level > L:
        raise ShapeError(f"fuse_level {fcfg.fuse_level} exceeds decoder depth {L}")
    proj = ProjectionWeights(params["fuse.wq"], params["fuse.wk"], params["fuse.wv"])
    decoded = [None] * L
    h = pyramid2d.bottleneck
    if fcfg.fuse_level == 0:
        att = cross_attention(h, _kv_features(pyramid3d, 0), proj)
        h = T.concat_channels(h, attention_to_map(att, h.shape[2], h.shape[3]))
    for l in range(L, 0, -1):
        h = expand_stage(h, pyramid2d.skips[l - 1],
                         params[f"dec{l}.up.w"], params[f"dec{l}.up.b"],
                         params[f"dec{l}.c1.w"], params[f"dec{l}.c1.b"],
                         params[f"dec{l}.c2.w"], params[f"dec{l}.c2.b"])
        if fcfg.fuse_level == l:
            att = cross_attention(h, _kv_features(pyramid3d, l), proj)
            h = T.concat_channels(h, attention_to_map(att, h.shape[2], h.shape[3]))
        decoded[l - 1] = h
    pyramid2d.decoded = decoded
    pyramid2d.final = decoded[0]
    return pyramid2d.final
