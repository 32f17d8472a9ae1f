"""Hierarchical point-set encoder-decoder.

Set-abstraction levels shrink the cloud: farthest point sampling picks
centroids, K-nearest-neighbor grouping builds local neighborhoods in
centroid-relative coordinates, a shared MLP (1x1 convolutions) encodes each
neighborhood, and a max pool over the K neighbors yields one feature per
centroid.  Feature propagation decodes back up: inverse-distance
interpolation of the coarser features, concatenation with the same-scale
encoder features, and a linear per-point projection.

Coordinates are plain arrays; only features ride the gradient tape.  All
distance computations run in float64 so index choices (FPS picks, KNN
order, interpolation neighbors) are stable under float32 feature noise.
Ties are always broken toward the lowest index.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

# below this distance a target is treated as coincident with a source point
# and inverse-distance weights collapse to that point
COINCIDENT_EPS = 1e-8


@dataclass
class PointCloud:
    """Batched point set: coords [B,N,3], feats [B,N,D], valid_count [B].

    Padding (repeated points) counts toward N; valid_count records how many
    leading points per batch element are genuine.
    """

    coords: np.ndarray
    feats: Tensor
    valid_count: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        if self.coords.ndim != 3 or self.coords.shape[-1] != 3:
            raise ShapeError(f"point coords must be [B,N,3], got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ShapeError("point coords must be finite")
        if self.feats.shape[:2] != self.coords.shape[:2]:
            raise ShapeError(
                f"feats {self.feats.shape} do not align with coords {self.coords.shape}")
        self.valid_count = np.asarray(self.valid_count, dtype=np.int64)
        if self.valid_count.shape != (self.coords.shape[0],):
            raise ShapeError("valid_count must hold one entry per batch element")
        if np.any(self.valid_count < 1) or np.any(self.valid_count > self.coords.shape[1]):
            raise ShapeError("valid_count entries must lie in [1, N]")

    @property
    def batch_size(self):
        return self.coords.shape[0]

    @property
    def n_points(self):
        return self.coords.shape[1]

    @property
    def n_feats(self):
        return self.feats.shape[2]


@dataclass
class SALevelConfig:
    """One set-abstraction level: centroid count, neighborhood size, MLP widths."""

    n_out: int
    k: int
    mlp_widths: tuple

    def __post_init__(self):
        if self.n_out < 1 or self.k < 1 or not self.mlp_widths:
            raise ShapeError(f"invalid set-abstraction level config {self}")


@dataclass
class Pyramid3D:
    """Encoder outputs finest-first, plus decoded features once propagated."""

    levels: list
    decoded: list = field(default=None)


def farthest_point_sample(coords, n_out, start_index=0):
    """Greedy maximin subsample; returns indices [B, n_out].

    First pick is start_index; each later pick is the unpicked point whose
    distance to the picked set is largest, lowest index on ties.  With
    n_out == N this enumerates every index exactly once.
    """
    coords = np.asarray(coords)
    if coords.ndim != 3 or coords.shape[-1] != 3:
        raise ShapeError(f"farthest_point_sample expects [B,N,3], got {coords.shape}")
    B, N = coords.shape[0], coords.shape[1]
    if not 1 <= n_out <= N:
        raise ShapeError(f"cannot sample {n_out} points from a cloud of {N}")
    if not 0 <= start_index < N:
        raise ShapeError(f"start index {start_index} out of range for {N} points")
    pts = coords.astype(np.float64)
    rows = np.arange(B)
    idx = np.empty((B, n_out), dtype=np.int64)
    idx[:, 0] = start_index
    # squared distances preserve the maximin ordering; picked points are
    # parked at -1 so they can never be re-chosen
    dist = ((pts - pts[:, start_index, None]) ** 2).sum(axis=2)
    dist[:, start_index] = -1.0
    for m in range(1, n_out):
        nxt = dist.argmax(axis=1)
        idx[:, m] = nxt
        np.minimum(dist, ((pts - pts[rows, nxt, None]) ** 2).sum(axis=2), out=dist)
        dist[rows, nxt] = -1.0
    return idx


def knn_indices(coords, queries, k):
    """Indices [B,M,k] of the k nearest cloud points per query, nearest first."""
    coords = np.asarray(coords)
    queries = np.asarray(queries)
    N = coords.shape[1]
    if not 1 <= k <= N:
        raise ShapeError(f"k={k} invalid for a cloud of {N} points")
    diff = queries[:, :, None, :].astype(np.float64) - coords[:, None, :, :].astype(np.float64)
    d2 = (diff * diff).sum(axis=-1)
    if k == N:
        picked = np.broadcast_to(np.arange(N), d2.shape).copy()
    else:
        # partition finds the k-smallest set; the stable order among them is
        # restored below, so this matches a full stable argsort except when
        # distances tie exactly at the k-th place
        picked = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    d2k = np.take_along_axis(d2, picked, axis=-1)
    order = np.lexsort((picked, d2k), axis=-1)
    return np.take_along_axis(picked, order, axis=-1)


def knn_group(coords, feats, centroids, k):
    """Neighborhoods [B,M,K,3+D]: centroid-relative coords then raw features."""
    idx = knn_indices(coords, centroids, k)
    batch = np.arange(coords.shape[0])[:, None, None]
    local = coords[batch, idx] - np.asarray(centroids)[:, :, None, :]
    grouped_feats = T.gather_points(feats, idx)
    local_t = Tensor(local.astype(feats.dtype.type))
    return T.concat([local_t, grouped_feats], axis=-1)


def set_abstraction(cloud, cfg, mlp_params, start_index=0):
    """One encoder level: FPS centroids, KNN grouping, shared MLP, max pool.

    mlp_params: list of (weight [O,C,1,1], bias [O]) pairs, one per MLP layer.
    """
    if cfg.n_out > cloud.n_points:
        raise ShapeError(f"level wants {cfg.n_out} centroids from {cloud.n_points} points")
    centre_idx = farthest_point_sample(cloud.coords, cfg.n_out, start_index)
    batch = np.arange(cloud.batch_size)[:, None]
    centroids = cloud.coords[batch, centre_idx]
    grouped = knn_group(cloud.coords, cloud.feats, centroids, cfg.k)
    x = T.transpose(grouped, (0, 3, 1, 2))
    for w, b in mlp_params:
        x = T.relu(T.conv2d(x, w, b))
    pooled = T.reduce_max(x, axis=3)
    feats = T.transpose(pooled, (0, 2, 1))
    valid = np.minimum(cloud.valid_count, cfg.n_out)
    return PointCloud(centroids, feats, valid)


def interp_weights(dists, eps=COINCIDENT_EPS):
    """Inverse-distance weights over the last axis.

    Nonnegative, sum to 1; when a distance falls below eps the weight
    collapses entirely onto the first such (nearest) point.
    """
    d = np.asarray(dists, dtype=np.float64)
    inv = 1.0 / np.maximum(d, eps)
    w = inv / inv.sum(axis=-1, keepdims=True)
    near = d < eps
    collapse = near.any(axis=-1)
    if np.any(collapse):
        onehot = np.zeros_like(w)
        np.put_along_axis(onehot, near.argmax(axis=-1)[..., None], 1.0, axis=-1)
        w = np.where(collapse[..., None], onehot, w)
    return w


def interpolate_features(target_coords, source, k=3):
    """Inverse-distance interpolation of source features onto target points."""
    target_coords = np.asarray(target_coords)
    idx = knn_indices(source.coords, target_coords, k)
    batch = np.arange(source.batch_size)[:, None, None]
    picked = source.coords[batch, idx].astype(np.float64)
    d = np.sqrt(((target_coords[:, :, None, :].astype(np.float64) - picked) ** 2).sum(axis=-1))
    w = interp_weights(d)
    gathered = T.gather_points(source.feats, idx)
    weighted = T.mul(gathered, w[..., None].astype(source.feats.dtype.type))
    return T.tsum(weighted, axis=2)


def point_linear(x, w, b):
    """Per-point linear map ([B,N,C] @ [C,D] + [D]), the 1x1 conv of decoding."""
    return T.add(T.matmul(x, w), b)


def feature_propagation(levels, fp_params, k=3):
    """Decode coarse features back to the finest encoder level.

    levels: PointCloud list, finest first.  fp_params[i] = (w, b) producing
    the decoded features at level i from level i+1.  Returns one feature
    Tensor per level; the coarsest entry is the encoder output unchanged.
    """
    L = len(levels)
    if len(fp_params) != L - 1:
        raise ShapeError(f"{L} levels need {L - 1} propagation layers, got {len(fp_params)}")
    decoded = [None] * L
    decoded[L - 1] = levels[L - 1].feats
    for i in range(L - 2, -1, -1):
        coarse = levels[i + 1]
        src = PointCloud(coarse.coords, decoded[i + 1], coarse.valid_count)
        kk = min(k, coarse.n_points)
        interp = interpolate_features(levels[i].coords, src, k=kk)
        cat = T.concat([interp, levels[i].feats], axis=-1)
        w, b = fp_params[i]
        decoded[i] = point_linear(cat, w, b)
    return decoded


def encode_decode(cloud, level_cfgs, sa_params, fp_params, k=3):
    """Run the full encoder-decoder; returns a Pyramid3D with decoded set."""
    levels = []
    current = cloud
    for cfg, mlp in zip(level_cfgs, sa_params):
        current = set_abstraction(current, cfg, mlp)
        levels.append(current)
    for a, b in zip(levels, levels[1:]):
        if b.n_points >= a.n_points:
            raise ShapeError("set-abstraction levels must strictly shrink the cloud")
    decoded = feature_propagation(levels, fp_params, k=k)
    return Pyramid3D(levels=levels, decoded=decoded)
