"""Deterministic synthetic street scenes with known blind-zone boxes.

A scene is a perspective ground plane (depth K/(row+a), near at the image
bottom) with box-shaped occluders standing on it.  Each occluder hides the
road volume beside its inner vertical edge, so the ground truth is a
pedestrian-sized box (1.5 m wide, 1.8 m tall, projected at the occluder's
depth) sitting on the ground against that edge, toward the road centre.
By construction every box edge coincides with a strong depth discontinuity,
which is exactly the cue the pipeline is meant to learn.

Everything is a pure function of the spec: same seed, same bytes.
"""

import os
import shutil
from dataclasses import dataclass

import numpy as np

from . import formats
from .detect import Annotation
from .errors import ConfigError, SceneSpecError
from .geometry import CameraIntrinsics, DepthFrame
from .optim import make_rng

ZONE_WIDTH_M = 1.5
ZONE_HEIGHT_M = 1.8
MIN_DEPTH_M = 0.01


@dataclass(frozen=True)
class Occluder:
    """A flat slab standing on the ground, fronto-parallel to the camera.

    lateral: metres right (+) or left (-) of the optical axis.
    width/height: metres.  depth: metres from the camera.
    """

    lateral: float
    width: float
    height: float
    depth: float


@dataclass
class SceneSpec:
    """Everything needed to render one scene."""

    seed: int
    size: int = 64
    near: float = 2.0
    far: float = 20.0
    occluders: tuple = ()
    noise: float = 0.02

    def __post_init__(self):
        self.occluders = tuple(self.occluders)
        if self.size < 16:
            raise SceneSpecError(f"image size {self.size} too small to render")
        if not 0 < self.near < self.far:
            raise SceneSpecError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.noise < 0:
            raise SceneSpecError(f"noise level must be nonnegative, got {self.noise}")
        for occ in self.occluders:
            if occ.width <= 0 or occ.height <= 0 or occ.depth <= 0:
                raise SceneSpecError(f"occluder extents must be positive: {occ}")
            if not self.near < occ.depth < self.far:
                raise SceneSpecError(
                    f"occluder depth {occ.depth} outside the visible ground "
                    f"range ({self.near}, {self.far})")


@dataclass
class Sample:
    """One rendered scene: the frame plus its ground-truth boxes."""

    frame: DepthFrame
    annotation: Annotation


def scene_intrinsics(size):
    f = size / 2.0
    return CameraIntrinsics(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0,
                            width=size, height=size)


def _ground_profile(spec):
    """Per-row ground depth: K/(v+a), near at the bottom row, far at the top."""
    a = spec.near * (spec.size - 1) / (spec.far - spec.near)
    k = spec.far * a
    rows = np.arange(spec.size, dtype=np.float64)
    return k / (rows + a), k, a


def _slab_extents(spec, occ, intr):
    """Integer pixel extents (u0, u1, v_top, v_base) of a slab, or raise."""
    k = spec.far * spec.near * (spec.size - 1) / (spec.far - spec.near)
    a = k / spec.far
    v_base = int(round(k / occ.depth - a))
    v_top = v_base - int(round(intr.fy * occ.height / occ.depth))
    u0 = int(round(intr.cx + intr.fx * (occ.lateral - occ.width / 2) / occ.depth))
    u1 = int(round(intr.cx + intr.fx * (occ.lateral + occ.width / 2) / occ.depth))
    if u0 < 0 or u1 > spec.size or u1 - u0 < 1:
        raise SceneSpecError(f"occluder {occ} spans columns [{u0}, {u1}) outside the frame")
    if v_top < 0 or v_base >= spec.size or v_base <= v_top:
        raise SceneSpecError(f"occluder {occ} spans rows [{v_top}, {v_base}] outside the frame")
    return u0, u1, v_top, v_base


def _zone_box(spec, occ, intr, extents):
    """Blind-zone box against the slab's road-side edge, clipped to frame."""
    u0, u1, _, v_base = extents
    bw = intr.fx * ZONE_WIDTH_M / occ.depth
    bh = intr.fy * ZONE_HEIGHT_M / occ.depth
    if occ.lateral <= 0:
        x0, x1 = float(u1), float(u1) + bw
    else:
        x0, x1 = float(u0) - bw, float(u0)
    y1 = float(v_base + 1)
    y0 = y1 - bh
    x0, y0 = max(x0, 0.0), max(y0, 0.0)
    x1, y1 = min(x1, float(spec.size)), min(y1, float(spec.size))
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        return None
    return (x0, y0, x1, y1)


def generate(spec):
    """Render a spec into a depth frame, RGB image, and annotation boxes."""
    rng = make_rng(spec.seed)
    size = spec.size
    intr = scene_intrinsics(size)
    ground, _, _ = _ground_profile(spec)
    depth = np.repeat(ground[:, None], size, axis=1)

    shade = 0.35 + 0.2 * (1.0 - np.arange(size) / (size - 1))
    rgb = np.repeat(np.repeat(shade[:, None], size, axis=1)[:, :, None], 3, axis=2)
    rgb = rgb + rng.uniform(-0.03, 0.03, size=3)

    palette = rng.uniform(0.15, 0.85, size=(len(spec.occluders), 3))
    extents = [_slab_extents(spec, occ, intr) for occ in spec.occluders]
    order = sorted(range(len(spec.occluders)),
                   key=lambda i: -spec.occluders[i].depth)
    for i in order:  # far to near, so nearer slabs paint over
        u0, u1, v_top, v_base = extents[i]
        depth[v_top:v_base + 1, u0:u1] = spec.occluders[i].depth
        rgb[v_top:v_base + 1, u0:u1] = palette[i]

    boxes = []
    for occ, ext in zip(spec.occluders, extents):
        box = _zone_box(spec, occ, intr, ext)
        if box is not None:
            boxes.append(box)

    depth = depth + rng.normal(0.0, spec.noise, size=depth.shape)
    np.maximum(depth, MIN_DEPTH_M, out=depth)
    rgb = rgb + rng.normal(0.0, 0.01, size=rgb.shape)
    np.clip(rgb, 0.0, 1.0, out=rgb)

    sample_id = f"scene{spec.seed:08d}"
    frame = DepthFrame(depth=depth.astype(np.float32), rgb=rgb.astype(np.float32),
                       intrinsics=intr, sample_id=sample_id)
    return Sample(frame=frame, annotation=Annotation(sample_id, boxes))


def _boxes_disjoint(a, b):
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def random_scene_spec(rng, seed, size=64, max_occluders=3, near=2.0, far=20.0,
                      noise=0.02):
    """Sample a scene with 1..max_occluders non-overlapping slabs.

    Drawn degenerate layouts (slabs or zones colliding) are rejected and
    resampled; the rng alone determines the result.
    """
    spec = SceneSpec(seed=seed, size=size, near=near, far=far, noise=noise)
    intr = scene_intrinsics(size)
    depth_lo = near + 2.0
    depth_hi = min(far - 2.0, depth_lo + 1.5)
    if depth_hi <= depth_lo:
        raise SceneSpecError(
            f"depth window [{near}, {far}] too narrow to place occluders")
    count = int(rng.integers(1, max_occluders + 1))
    attempts = 0
    while True:
        attempts += 1
        if attempts > 200:
            if count == 1:
                raise SceneSpecError("could not place a single occluder")
            count -= 1  # crowded draw; retry the layout with one slab fewer
            attempts = 0
        occluders = []
        k = spec.far * spec.near * (size - 1) / (spec.far - spec.near)
        a = k / spec.far
        for _ in range(count):
            # depth and height ranges sit a couple of metres past the near
            # plane: slab tops stay below the horizon band (top rows), keeping
            # the normalizing gradient percentile comparable to every zone's
            # own edge response
            d = float(rng.uniform(depth_lo, depth_hi))
            w = float(rng.uniform(0.8, 1.6))
            h_max = (k / d - a - size / 8) * d / intr.fy
            if h_max <= ZONE_HEIGHT_M:
                break
            # slabs at least zone height, so the zone's rows all sit beside
            # slab rows and inherit the full depth discontinuity
            h = float(rng.uniform(ZONE_HEIGHT_M, min(h_max, 2.4)))
            margin = 3.0 * d / intr.fx  # keep slab edges off the frame border
            lat_max = (size / 2) * d / intr.fx - w / 2 - margin
            if lat_max <= 0.3:
                break
            lat = float(rng.uniform(0.3, lat_max)) * (1 if rng.random() < 0.5 else -1)
            occluders.append(Occluder(lateral=lat, width=w, height=h, depth=d))
        if len(occluders) < count:
            continue
        candidate = SceneSpec(seed=seed, size=size, near=near, far=far,
                              occluders=tuple(occluders), noise=noise)
        try:
            extents = [_slab_extents(candidate, occ, intr) for occ in occluders]
        except SceneSpecError:
            continue
        # 2 px padding keeps neighbouring discontinuity columns separate
        slabs = [(e[0] - 2, e[2] - 2, e[1] + 2, e[3] + 3) for e in extents]
        zones = [_zone_box(candidate, occ, intr, ext)
                 for occ, ext in zip(occluders, extents)]
        if any(z is None for z in zones):
            continue
        # zones also padded: touching zone rectangles would fuse into one
        # connected component after rasterization and break box recovery
        padded_zones = [(z[0] - 2, z[1] - 2, z[2] + 2, z[3] + 2) for z in zones]
        n = len(occluders)
        ok = all(_boxes_disjoint(slabs[i], slabs[j])
                 for i in range(n) for j in range(i + 1, n))
        ok = ok and all(_boxes_disjoint(padded_zones[i], padded_zones[j])
                        for i in range(n) for j in range(i + 1, n))
        ok = ok and all(_boxes_disjoint(slabs[i], zones[j])
                        for i in range(n) for j in range(n) if i != j)
        if ok:
            return candidate


def generate_dataset(out_dir, count, base_seed, size=64, near=2.0, far=20.0,
                     noise=0.02, max_occluders=3, force=False):
    """Render ``count`` scenes into the on-disk dataset layout.

    Refuses to touch an existing non-empty directory unless force is set.
    Returns the list of sample ids in index order.
    """
    if count < 1:
        raise ConfigError(f"dataset needs at least one sample, got {count}")
    if os.path.isdir(out_dir) and os.listdir(out_dir):
        if not force:
            raise ConfigError(f"{out_dir} is not empty; pass force to overwrite")
        shutil.rmtree(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = make_rng(base_seed)
    seeds = []
    while len(seeds) < count:  # unique seeds keep sample ids collision-free
        s = int(rng.integers(0, 2 ** 31 - 1))
        if s not in seeds:
            seeds.append(s)
    sample_ids = []
    boxes_by_id = {}
    for seed in seeds:
        sample = generate(random_scene_spec(rng, seed, size=size,
                                            max_occluders=max_occluders,
                                            near=near, far=far, noise=noise))
        formats.write_sample_files(out_dir, sample.frame)
        sample_ids.append(sample.frame.sample_id)
        boxes_by_id[sample.frame.sample_id] = sample.annotation.boxes
    formats.write_annotations(os.path.join(out_dir, formats.ANNOTATIONS_NAME),
                              boxes_by_id)
    formats.write_index(out_dir, sample_ids)
    return sample_ids
