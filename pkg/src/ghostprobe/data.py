"""Dataset loading and batch assembly for training and evaluation.

Samples come from the on-disk dataset layout; each is resized to the
configured square input, its annotation boxes scaled along, and turned into
the model inputs: stacked 2D channels (RGB and/or the normalized depth
gradient, or a single zero channel when both are off), a back-projected
point cloud, and the rasterized target mask.

The train/validation split hashes each sample id, so membership is a pure
function of the id and the split fraction, stable across runs and machines.
"""

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import formats
from .detect import Annotation, rasterize_annotation
from .errors import ConfigError
from .geometry import CameraIntrinsics, DepthFrame, backproject, scharr_gradient
from .pointnet import PointCloud
from .tensor import Tensor


@dataclass
class PreparedSample:
    """Model-ready inputs for one sample at the training resolution."""

    sample_id: str
    channels: np.ndarray      # [C, H, W] float32
    cloud: PointCloud         # batch of one
    target: np.ndarray        # [1, H, W] float32 mask
    annotation: Annotation    # boxes scaled to the input resolution


def _nearest_indices(n_out, n_in):
    return np.minimum((np.arange(n_out) + 0.5) * (n_in / n_out), n_in - 1).astype(int)


def resize_frame(frame, size):
    """Nearest-neighbour resize to size x size with matching intrinsics."""
    h, w = frame.intrinsics.height, frame.intrinsics.width
    if (h, w) == (size, size):
        return frame
    rows = _nearest_indices(size, h)
    cols = _nearest_indices(size, w)
    intr = CameraIntrinsics(fx=frame.intrinsics.fx * size / w,
                            fy=frame.intrinsics.fy * size / h,
                            cx=frame.intrinsics.cx * size / w,
                            cy=frame.intrinsics.cy * size / h,
                            width=size, height=size)
    return DepthFrame(depth=frame.depth[np.ix_(rows, cols)],
                      rgb=frame.rgb[np.ix_(rows, cols)],
                      intrinsics=intr, sample_id=frame.sample_id)


def scale_boxes(boxes, from_w, from_h, size):
    sx, sy = size / from_w, size / from_h
    return [(x0 * sx, y0 * sy, x1 * sx, y1 * sy) for x0, y0, x1, y1 in boxes]


def stack_channels(frame, rgb, ig):
    """2D input planes per the ablation flags; [1, H, W] zeros if none."""
    planes = []
    if rgb:
        planes.append(np.transpose(frame.rgb, (2, 0, 1)))
    if ig:
        planes.append(scharr_gradient(frame).magnitude[None].astype(np.float32))
    if not planes:
        h, w = frame.depth.shape
        planes.append(np.zeros((1, h, w), dtype=np.float32))
    return np.concatenate(planes, axis=0)


def prepare_sample(frame, boxes, cfg, input_size, seed=0):
    """Resize, stack 2D channels, back-project, rasterize the target."""
    src_w, src_h = frame.intrinsics.width, frame.intrinsics.height
    frame = resize_frame(frame, input_size)
    boxes = scale_boxes(boxes, src_w, src_h, input_size)
    ann = Annotation(frame.sample_id, boxes)
    channels = stack_channels(frame, cfg.rgb, cfg.ig)
    cloud = backproject(frame, cfg.max_points, seed=seed) if cfg.pcd else None
    target = rasterize_annotation(ann, input_size, input_size).data
    return PreparedSample(sample_id=frame.sample_id, channels=channels,
                          cloud=cloud, target=target, annotation=ann)


def load_samples(dataset_dir, cfg, input_size, ids=None):
    """Prepare every sample in the dataset (or the given id subset)."""
    all_ids = formats.read_index(dataset_dir)
    if ids is None:
        ids = all_ids
    else:
        missing = set(ids) - set(all_ids)
        if missing:
            raise ConfigError(f"{dataset_dir}: unknown sample ids {sorted(missing)}")
    anns = formats.read_annotations(os.path.join(dataset_dir, formats.ANNOTATIONS_NAME))
    out = []
    for sid in ids:
        frame = formats.read_sample_files(dataset_dir, sid)
        out.append(prepare_sample(frame, anns.get(sid, []), cfg, input_size))
    return out


def id_fraction(sample_id):
    """Deterministic hash of an id into [0, 1)."""
    digest = hashlib.sha256(sample_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2.0 ** 64


def split_ids(ids, split_fraction):
    """Hash split into (train, validation), stable across runs."""
    train = [sid for sid in ids if id_fraction(sid) < split_fraction]
    val = [sid for sid in ids if id_fraction(sid) >= split_fraction]
    return train, val


def make_batch(samples):
    """Stack prepared samples into model inputs.

    Returns (images Tensor [B,C,H,W], cloud PointCloud batch or None,
    targets ndarray [B,1,H,W]).
    """
    images = Tensor(np.stack([s.channels for s in samples]))
    targets = np.stack([s.target for s in samples])
    if samples[0].cloud is None:
        return images, None, targets
    coords = np.concatenate([s.cloud.coords for s in samples], axis=0)
    feats = Tensor(np.concatenate([s.cloud.feats.data for s in samples], axis=0))
    valid = np.concatenate([s.cloud.valid_count for s in samples], axis=0)
    return images, PointCloud(coords, feats, valid), targets
