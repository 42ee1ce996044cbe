"""Deterministic synthetic scenes and their modality-characteristic BEV renders.

A scene is a square patch of ground seen from above: a few oriented boxes
(objects), a handful of map layers built from axis-aligned strips, and a dense
semantic occupancy volume obtained by extruding the boxes over a thin ground
layer. Rendering turns a scene into two BEV feature grids:

* ``f_lidar`` carries geometry: sub-cell box footprints, footprint boundary,
  box height, and the per-height histogram of simulated LiDAR returns.
* ``f_cam`` carries semantics: blurred per-class map layers and per-class
  object blobs, without shape or orientation detail.

Axis convention: the first grid axis (``h``) is the forward ``x`` direction,
the second (``w``) is ``y``. Cell ``i`` spans ``[-extent + i*cell, -extent + (i+1)*cell)``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .config import ConfigError, SceneSpec

CONTAINER_VERSION = 1
GROUND_FINE_CELLS = 2
MIX_SEED = 20240917

# (length range, width range) in meters per detection class; classes beyond
# the table reuse a generic 1-3 m size range. Every extent is at least two
# coarse cells at the default 0.5 m cell size: thinner objects cannot be
# recovered at the output resolution after x2 trilinear upsampling.
CLASS_SIZES = (
    ((3.6, 4.6), (1.7, 2.0)),   # car
    ((1.0, 1.3), (1.0, 1.3)),   # pedestrian (desk-scale)
    ((5.0, 6.5), (2.2, 2.5)),   # truck
    ((2.0, 3.0), (1.0, 1.2)),   # barrier (desk-scale)
)
GENERIC_SIZE = ((1.0, 3.0), (1.0, 3.0))


class Box(NamedTuple):
    center_xy: tuple[float, float]
    size_lw: tuple[float, float]
    yaw: float
    cls: int
    height: float


@dataclass
class SceneSample:
    boxes: list[Box]
    map_masks: np.ndarray    # (n_seg, out_h, out_w) bool
    occ_labels: np.ndarray   # (out_h, out_w, out_z) int64, empty == M
    lidar_mask: np.ndarray   # (grid_h, grid_w, grid_z) bool
    seed: int

    def boxes_array(self) -> np.ndarray:
        """Boxes as an (n, 7) array of [x, y, length, width, yaw, height, cls]."""
        if not self.boxes:
            return np.zeros((0, 7))
        return np.array([[b.center_xy[0], b.center_xy[1], b.size_lw[0], b.size_lw[1],
                          b.yaw, b.height, b.cls] for b in self.boxes], dtype=np.float64)


@dataclass
class ModalityFeatures:
    f_lidar: np.ndarray      # (H, W, C) float32
    f_cam: np.ndarray        # (H, W, C) float32
    lidar_mask: np.ndarray   # (H, W, Z) bool

    def __post_init__(self):
        if self.f_lidar.shape != self.f_cam.shape:
            raise ValueError(f"modality grids differ: {self.f_lidar.shape} vs {self.f_cam.shape}")
        if self.lidar_mask.shape[:2] != self.f_lidar.shape[:2]:
            raise ValueError("lidar_mask does not match the BEV grid")


@dataclass
class Targets:
    center_heatmaps: np.ndarray  # (H, W, n_det) float32
    seg_grid: np.ndarray         # (H, W, n_seg) bool, majority-vote downsampled
    seg_full: np.ndarray         # (out_h, out_w, n_seg) bool
    occ_labels: np.ndarray       # (out_h, out_w, out_z) int64
    boxes: np.ndarray            # (n, 7), see SceneSample.boxes_array


def sample_seed(base: int, index: int) -> int:
    """Independent per-sample seed derived from a dataset seed."""
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


def cell_centers(n: int, extent: float) -> np.ndarray:
    size = 2.0 * extent / n
    return -extent + (np.arange(n) + 0.5) * size


def box_footprint(box: Box, n: int, extent: float) -> np.ndarray:
    """Boolean (n, n) raster of cells whose centers fall inside the rotated box."""
    c = cell_centers(n, extent)
    xs, ys = np.meshgrid(c, c, indexing="ij")
    dx, dy = xs - box.center_xy[0], ys - box.center_xy[1]
    cos, sin = np.cos(box.yaw), np.sin(box.yaw)
    along = dx * cos + dy * sin
    across = -dx * sin + dy * cos
    return (np.abs(along) <= box.size_lw[0] / 2) & (np.abs(across) <= box.size_lw[1] / 2)


def _class_size(rng: np.random.Generator, cls: int) -> tuple[float, float]:
    (l0, l1), (w0, w1) = CLASS_SIZES[cls] if cls < len(CLASS_SIZES) else GENERIC_SIZE
    return float(rng.uniform(l0, l1)), float(rng.uniform(w0, w1))


def _sample_boxes(rng: np.random.Generator, spec: SceneSpec) -> list[Box]:
    n_target = int(rng.integers(1, 7))
    boxes: list[Box] = []
    radii: list[float] = []
    for _ in range(n_target):
        cls = int(rng.integers(spec.n_det_classes))
        length, width = _class_size(rng, cls)
        yaw = float(rng.uniform(-np.pi, np.pi))
        height = float(rng.uniform(1.0, 3.0))
        radius = 0.5 * float(np.hypot(length, width))
        lim = spec.extent_m - radius
        if lim <= 0:
            continue
        for _attempt in range(100):
            center = rng.uniform(-lim, lim, size=2)
            if all(np.hypot(*(center - np.array(b.center_xy))) > radius + r + 0.25
                   for b, r in zip(boxes, radii)):
                boxes.append(Box((float(center[0]), float(center[1])), (length, width),
                                 yaw, cls, min(height, spec.height_m)))
                radii.append(radius)
                break
    return boxes


def _sample_map(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    n, ext = spec.out_h, spec.extent_m
    c = cell_centers(n, ext)
    coord = np.stack(np.meshgrid(c, c, indexing="ij"))  # (2, n, n): x, y
    masks = np.zeros((spec.n_seg_classes, n, n), dtype=bool)

    roads = []
    for _ in range(int(rng.integers(1, 3))):
        across_axis = int(rng.integers(2))
        roads.append((across_axis, float(rng.uniform(-0.6, 0.6) * ext), float(rng.uniform(4.0, 7.0))))
    drivable = np.zeros((n, n), dtype=bool)
    for axis, center, width in roads:
        drivable |= np.abs(coord[axis] - center) <= width / 2
    masks[0] = drivable

    if spec.n_seg_classes > 1:
        axis, center, width = roads[int(rng.integers(len(roads)))]
        along = float(rng.uniform(-0.7, 0.7) * ext)
        cw = float(rng.uniform(1.5, 2.5))
        masks[1] = (np.abs(coord[axis] - center) <= width / 2) & (np.abs(coord[1 - axis] - along) <= cw / 2)
    if spec.n_seg_classes > 2:
        walk = np.zeros((n, n), dtype=bool)
        for axis, center, width in roads:
            ww = float(rng.uniform(1.0, 1.5))
            dist = np.abs(coord[axis] - center)
            walk |= (dist > width / 2) & (dist <= width / 2 + ww)
        masks[2] = walk & ~drivable
    for k in range(3, spec.n_seg_classes):
        axis = int(rng.integers(2))
        center = float(rng.uniform(-0.8, 0.8) * ext)
        width = float(rng.uniform(1.0, 3.0))
        masks[k] = np.abs(coord[axis] - center) <= width / 2
    return masks


def _build_occupancy(spec: SceneSpec, boxes: list[Box], map_masks: np.ndarray) -> np.ndarray:
    m, k = spec.n_occ_classes, spec.n_det_classes
    occ = np.full((spec.out_h, spec.out_w, spec.out_z), m, dtype=np.int64)
    n_bg = m - k
    if n_bg >= 1:
        ground = np.full((spec.out_h, spec.out_w), k, dtype=np.int64)
        if n_bg >= 2:
            ground[~map_masks[0]] = k + 1
        occ[:, :, :GROUND_FINE_CELLS] = ground[:, :, None]
    dz = spec.height_m / spec.out_z
    z_centers = (np.arange(spec.out_z) + 0.5) * dz
    for box in boxes:
        fp = box_footprint(box, spec.out_h, spec.extent_m)
        column = z_centers < box.height
        occ[fp[:, :, None] & column[None, None, :]] = box.cls
    return occ


def pool_occupancy(occ_labels: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """Coarse labels: most frequent non-empty class per block, else empty.

    Ties resolve to the smaller class id.
    """
    h, w, z = spec.grid_h, spec.grid_w, spec.grid_z
    fh, fw, fz = spec.out_h // h, spec.out_w // w, spec.out_z // z
    blocks = occ_labels.reshape(h, fh, w, fw, z, fz).transpose(0, 2, 4, 1, 3, 5).reshape(h, w, z, -1)
    counts = np.stack([(blocks == c).sum(-1) for c in range(spec.n_occ_classes)], axis=-1)
    pooled = counts.argmax(-1)
    pooled[counts.sum(-1) == 0] = spec.empty_class
    return pooled


def _simulate_lidar(rng: np.random.Generator, spec: SceneSpec, occ: np.ndarray,
                    boxes: list[Box]) -> np.ndarray:
    pooled = pool_occupancy(occ, spec)
    occupied = pooled != spec.empty_class
    foreground = pooled < spec.n_det_classes
    x = cell_centers(spec.grid_h, spec.extent_m)
    # ground returns thin out along the forward axis
    p_ground = 0.9 - 0.6 * np.abs(x) / spec.extent_m
    prob = np.where(foreground, 0.95, p_ground[:, None, None])
    draw = rng.random(occupied.shape)
    return occupied & (draw < prob)


def generate_scene(spec: SceneSpec) -> SceneSample:
    """Generate one scene; a pure function of ``spec`` (including its seed)."""
    if not isinstance(spec, SceneSpec):
        raise ConfigError("generate_scene expects a SceneSpec")
    rng = np.random.default_rng(spec.seed)
    boxes = _sample_boxes(rng, spec)
    map_masks = _sample_map(rng, spec)
    occ = _build_occupancy(spec, boxes, map_masks)
    lidar = _simulate_lidar(rng, spec, occ, boxes)
    return SceneSample(boxes=boxes, map_masks=map_masks, occ_labels=occ,
                       lidar_mask=lidar, seed=spec.seed)


def _standardize(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=(0, 1), keepdims=True)
    std = x.std(axis=(0, 1), keepdims=True)
    return np.where(std > 1e-8, (x - mean) / np.maximum(std, 1e-8), 0.0)


def _mixing(n_signals: int, channels: int, salt: int) -> np.ndarray:
    """Fixed signal-to-channel map: identity on the first channels, random mixes after."""
    rng = np.random.default_rng([MIX_SEED, salt, n_signals, channels])
    mix = rng.standard_normal((n_signals, channels)) / np.sqrt(n_signals)
    eye = min(n_signals, channels)
    mix[:, :eye] = np.eye(n_signals, eye)
    return mix


def lidar_signals(sample: SceneSample, spec: SceneSpec) -> np.ndarray:
    h = spec.grid_h
    fine = np.zeros((spec.out_h, spec.out_w))
    height = np.zeros((h, spec.grid_w))
    for box in sample.boxes:
        fp = box_footprint(box, spec.out_h, spec.extent_m)
        fine = np.maximum(fine, fp)
        coarse = fp.reshape(h, 2, spec.grid_w, 2).any(axis=(1, 3))
        height = np.maximum(height, coarse * box.height / spec.height_m)
    sub = fine.reshape(h, 2, spec.grid_w, 2).transpose(0, 2, 1, 3).reshape(h, spec.grid_w, 4)
    cover = sub.mean(-1)
    inside = cover > 0
    eroded = ndimage.binary_erosion(inside, border_value=0)
    boundary = inside & ~eroded
    hist = sample.lidar_mask.astype(np.float64)
    return np.concatenate([sub, cover[..., None], boundary[..., None], height[..., None], hist], axis=-1)


def cam_signals(sample: SceneSample, spec: SceneSpec) -> np.ndarray:
    h, w = spec.grid_h, spec.grid_w
    area = sample.map_masks.reshape(spec.n_seg_classes, h, 2, w, 2).mean(axis=(2, 4))
    blobs = np.zeros((spec.n_det_classes, h, w))
    ii, jj = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    for box in sample.boxes:
        cx = (box.center_xy[0] + spec.extent_m) / spec.cell_m
        cy = (box.center_xy[1] + spec.extent_m) / spec.cell_m
        g = np.exp(-((ii - cx) ** 2 + (jj - cy) ** 2) / 2.0)
        blobs[box.cls] = np.maximum(blobs[box.cls], g)
    stack = np.concatenate([area, blobs], axis=0)
    stack = ndimage.gaussian_filter(stack, sigma=(0, 0.7, 0.7), mode="nearest")
    return stack.transpose(1, 2, 0)


def render_modality_features(sample: SceneSample, spec: SceneSpec) -> ModalityFeatures:
    """Render LiDAR-like and camera-like BEV features; noise is seeded by ``spec.seed``."""
    if sample.lidar_mask.shape != (spec.grid_h, spec.grid_w, spec.grid_z):
        raise ValueError(f"lidar_mask shape {sample.lidar_mask.shape} does not match spec")
    if sample.map_masks.shape != (spec.n_seg_classes, spec.out_h, spec.out_w):
        raise ValueError(f"map_masks shape {sample.map_masks.shape} does not match spec")
    c = spec.channels
    sig_l = lidar_signals(sample, spec)
    sig_c = cam_signals(sample, spec)
    f_lidar = _standardize(sig_l @ _mixing(sig_l.shape[-1], c, 1))
    f_cam = _standardize(sig_c @ _mixing(sig_c.shape[-1], c, 2))
    rng = np.random.default_rng([spec.seed, 0x5EED])
    f_lidar = f_lidar + spec.lidar_noise * rng.standard_normal(f_lidar.shape)
    f_cam = f_cam + spec.cam_noise * rng.standard_normal(f_cam.shape)
    return ModalityFeatures(f_lidar=f_lidar.astype(np.float32), f_cam=f_cam.astype(np.float32),
                            lidar_mask=sample.lidar_mask.copy())


def gaussian_splat(shape: tuple[int, int], center: tuple[int, int], sigma: float) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    return np.exp(-((ii - center[0]) ** 2 + (jj - center[1]) ** 2) / (2.0 * sigma ** 2))


def box_center_cell(box: Box, spec: SceneSpec) -> tuple[int, int]:
    ci = int(np.floor((box.center_xy[0] + spec.extent_m) / spec.cell_m))
    cj = int(np.floor((box.center_xy[1] + spec.extent_m) / spec.cell_m))
    return min(max(ci, 0), spec.grid_h - 1), min(max(cj, 0), spec.grid_w - 1)


def heatmap_sigma(box: Box, spec: SceneSpec) -> float:
    return max(1.0, float(np.hypot(*box.size_lw)) / spec.cell_m / 6.0)


def make_targets(sample: SceneSample, spec: SceneSpec) -> Targets:
    h, w = spec.grid_h, spec.grid_w
    heat = np.zeros((h, w, spec.n_det_classes), dtype=np.float64)
    for box in sample.boxes:
        g = gaussian_splat((h, w), box_center_cell(box, spec), heatmap_sigma(box, spec))
        heat[..., box.cls] = np.maximum(heat[..., box.cls], g)
    frac = sample.map_masks.reshape(spec.n_seg_classes, h, 2, w, 2).mean(axis=(2, 4))
    # ties (2 of 4 fine cells) count as foreground
    seg_grid = (frac >= 0.5).transpose(1, 2, 0)
    return Targets(center_heatmaps=heat.astype(np.float32), seg_grid=seg_grid,
                   seg_full=sample.map_masks.transpose(1, 2, 0).copy(),
                   occ_labels=sample.occ_labels.copy(), boxes=sample.boxes_array())


def build_dataset(spec: SceneSpec, n: int, seed: int | None = None):
    """Return ``n`` (sample, features, targets) triples with per-sample seeds."""
    base = spec.seed if seed is None else seed
    out = []
    for i in range(n):
        s = spec.with_seed(sample_seed(base, i))
        sample = generate_scene(s)
        out.append((sample, render_modality_features(sample, s), make_targets(sample, s)))
    return out


def save_sample(path: str | Path, sample: SceneSample, spec: SceneSpec,
                features: ModalityFeatures | None = None) -> None:
    """Write a sample as ``.npz``: named arrays plus a JSON ``meta`` header."""
    targets = make_targets(sample, spec)
    features = features or render_modality_features(sample, spec)
    arrays = {
        "boxes": sample.boxes_array(),
        "map_masks": sample.map_masks,
        "occ_labels": sample.occ_labels,
        "lidar_mask": sample.lidar_mask,
        "f_lidar": features.f_lidar,
        "f_cam": features.f_cam,
        "center_heatmaps": targets.center_heatmaps,
        "seg_grid": targets.seg_grid,
    }
    meta = {
        "format": "mtbev-scene",
        "version": CONTAINER_VERSION,
        "seed": int(sample.seed),
        "spec": dataclasses.asdict(spec),
        "arrays": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in arrays.items()},
        "box_columns": ["x", "y", "length", "width", "yaw", "height", "cls"],
    }
    np.savez_compressed(path, meta=np.array(json.dumps(meta)), **arrays)


def load_sample(path: str | Path) -> tuple[SceneSample, ModalityFeatures, SceneSpec, dict]:
    with np.load(path) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != "mtbev-scene":
            raise ValueError(f"{path} is not a scene container")
        arrays = {k: data[k] for k in data.files if k != "meta"}
    spec = SceneSpec(**meta["spec"])
    boxes = [Box((float(r[0]), float(r[1])), (float(r[2]), float(r[3])), float(r[4]), int(r[6]), float(r[5]))
             for r in arrays["boxes"]]
    sample = SceneSample(boxes=boxes, map_masks=arrays["map_masks"].astype(bool),
                         occ_labels=arrays["occ_labels"].astype(np.int64),
                         lidar_mask=arrays["lidar_mask"].astype(bool), seed=int(meta["seed"]))
    feats = ModalityFeatures(arrays["f_lidar"], arrays["f_cam"], sample.lidar_mask)
    return sample, feats, spec, meta
