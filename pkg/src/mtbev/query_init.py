"""Confidence maps and per-task query initialization from the fused BEV grid."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import ConfigError


@dataclass
class TaskQuerySet:
    """A batch of queries for one task.

    ``positions`` holds integer grid coordinates, ``(h, w)`` for det/seg and
    ``(h, w, z)`` for occupancy. Occupancy sets differ in size per sample, so
    they are padded and ``valid`` marks the real entries.
    """

    task: str
    embeddings: torch.Tensor        # (B, n, C)
    positions: torch.Tensor         # (B, n, 2|3) long
    pos_embeddings: torch.Tensor    # (B, n, C)
    class_ids: torch.Tensor | None = None
    blocks: torch.Tensor | None = None
    valid: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.embeddings.shape[1]

    def counts(self) -> torch.Tensor:
        if self.valid is None:
            return torch.full((self.embeddings.shape[0],), len(self), dtype=torch.long)
        return self.valid.sum(1)

    def with_embeddings(self, embeddings: torch.Tensor) -> "TaskQuerySet":
        return dataclasses.replace(self, embeddings=embeddings)


class PositionEncoder(nn.Module):
    """Two-layer MLP from normalized (x, y, z) in [0, 1] to a C-vector."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc1 = nn.Linear(3, channels)
        self.fc2 = nn.Linear(channels, channels)

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        if p.shape[-1] == 2:
            p = torch.cat([p, torch.full_like(p[..., :1], 0.5)], dim=-1)
        if bool(((p < 0) | (p > 1)).any()):
            raise ValueError("positions must be normalized to [0, 1]")
        return self.fc2(nn.functional.gelu(self.fc1(p)))


def normalize_positions(positions: torch.Tensor, dims: tuple[int, ...], dtype=torch.float32) -> torch.Tensor:
    """Integer cell indices to cell-center coordinates in [0, 1]."""
    size = torch.tensor(dims, dtype=dtype)
    return (positions.to(dtype) + 0.5) / size


def confidence_logits(f_bev: torch.Tensor, embeddings: torch.Tensor) -> torch.Tensor:
    """Per-cell dot product with each category embedding: (B, H, W, K)."""
    return torch.einsum("bhwc,kc->bhwk", f_bev, embeddings)


def build_confidence_maps(f_bev: torch.Tensor, cat: torch.Tensor, n_det: int):
    """Sigmoid confidences for detection rows ``cat[:n_det]`` and segmentation rows after."""
    logits = confidence_logits(f_bev, cat)
    return torch.sigmoid(logits[..., :n_det]), torch.sigmoid(logits[..., n_det:])


def select_topk(conf: torch.Tensor, k: int) -> torch.Tensor:
    """Flat (h, w, class) indices of the k largest entries per batch element.

    Ties go to the smaller flat index (row-major h, then w, then class).
    """
    flat = conf.detach().reshape(conf.shape[0], -1)
    if not 1 <= k <= flat.shape[1]:
        raise ConfigError(f"n_d={k} out of range for a confidence volume of {flat.shape[1]} entries")
    order = torch.sort(-flat, dim=1, stable=True).indices
    return order[:, :k]


def _gather_cells(f_bev: torch.Tensor, hw: torch.Tensor) -> torch.Tensor:
    b, h, w, c = f_bev.shape
    flat = hw[..., 0] * w + hw[..., 1]
    return torch.gather(f_bev.reshape(b, h * w, c), 1, flat.unsqueeze(-1).expand(-1, -1, c))


def init_detection_queries(f_bev: torch.Tensor, det_conf: torch.Tensor, n_d: int,
                           pos_enc: PositionEncoder) -> TaskQuerySet:
    _, h, w, k = det_conf.shape
    idx = select_topk(det_conf, n_d)
    cls = idx % k
    cell = idx // k
    positions = torch.stack([cell // w, cell % w], dim=-1)
    pos = pos_enc(normalize_positions(positions, (h, w), f_bev.dtype))
    feats = _gather_cells(f_bev, positions)
    return TaskQuerySet("det", feats + pos, positions, pos, class_ids=cls)


def band_bounds(h: int, s: int) -> list[tuple[int, int]]:
    """Row ranges of ``s`` contiguous bands; the last band absorbs the remainder."""
    if not 1 <= s <= h:
        raise ConfigError(f"S={s} blocks cannot partition {h} rows")
    base = h // s
    return [(b * base, (b + 1) * base if b < s - 1 else h) for b in range(s)]


def row_band_index(h: int, s: int) -> torch.Tensor:
    out = torch.empty(h, dtype=torch.long)
    for b, (lo, hi) in enumerate(band_bounds(h, s)):
        out[lo:hi] = b
    return out


def init_segmentation_queries(f_bev: torch.Tensor, seg_conf: torch.Tensor, s: int,
                              pos_enc: PositionEncoder) -> TaskQuerySet:
    bsz, h, w, k = seg_conf.shape
    conf = seg_conf.detach()
    positions, blocks, classes = [], [], []
    for b, (lo, hi) in enumerate(band_bounds(h, s)):
        band = conf[:, lo:hi].reshape(bsz, -1, k)
        arg = band.argmax(dim=1)  # first maximum on ties -> smaller flat index
        positions.append(torch.stack([arg // w + lo, arg % w], dim=-1))
        blocks.append(torch.full((bsz, k), b, dtype=torch.long))
        classes.append(torch.arange(k).expand(bsz, k))
    positions = torch.cat(positions, dim=1)
    pos = pos_enc(normalize_positions(positions, (h, w), f_bev.dtype))
    feats = _gather_cells(f_bev, positions)
    return TaskQuerySet("seg", feats + pos, positions, pos,
                        class_ids=torch.cat(classes, dim=1), blocks=torch.cat(blocks, dim=1))


def split_occupancy_queries(lidar_mask) -> tuple[np.ndarray, np.ndarray]:
    """(definite, uncertain) voxel coordinates, each (n, 3), in row-major order."""
    mask = np.asarray(lidar_mask, dtype=bool)
    coords = np.indices(mask.shape).reshape(3, -1).T
    flat = mask.reshape(-1)
    return coords[flat], coords[~flat]


def _pad_stack(items: list[np.ndarray], width: int) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(1, max(len(x) for x in items))
    out = torch.zeros((len(items), n, width), dtype=torch.long)
    valid = torch.zeros((len(items), n), dtype=torch.bool)
    for i, x in enumerate(items):
        out[i, :len(x)] = torch.from_numpy(x)
        valid[i, :len(x)] = True
    return out, valid


def init_occupancy_queries(f_bev: torch.Tensor, lidar_mask: torch.Tensor, shared_embed: torch.Tensor,
                           pos_enc: PositionEncoder) -> tuple[TaskQuerySet, TaskQuerySet]:
    """Definite voxels start from the BEV feature of their column, uncertain ones
    from ``shared_embed``; both add the 3D positional embedding."""
    _, h, w, _ = f_bev.shape
    z = lidar_mask.shape[-1]
    splits = [split_occupancy_queries(m.cpu().numpy()) for m in lidar_mask]
    sets = []
    for which, task in ((0, "occ-definite"), (1, "occ-uncertain")):
        positions, valid = _pad_stack([sp[which] for sp in splits], 3)
        pos = pos_enc(normalize_positions(positions, (h, w, z), f_bev.dtype))
        if which == 0:
            base = _gather_cells(f_bev, positions[..., :2])
        else:
            base = shared_embed.expand_as(pos)
        emb = (base + pos) * valid.unsqueeze(-1)
        sets.append(TaskQuerySet(task, emb, positions, pos, valid=valid))
    return sets[0], sets[1]
