"""Task heads: per-query box regression, band-local segmentation, dense occupancy."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .decoder import SSM
from .query_init import TaskQuerySet, row_band_index

log = logging.getLogger(__name__)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


@dataclass
class DetectionOutput:
    cls_logits: torch.Tensor    # (B, n, K)
    offset: torch.Tensor        # (B, n, 2) cells
    log_size: torch.Tensor      # (B, n, 2) log meters
    yaw_sc: torch.Tensor        # (B, n, 2) unnormalized (sin, cos)
    center_cells: torch.Tensor  # (B, n, 2) continuous grid coordinates
    center_m: torch.Tensor      # (B, n, 2) meters

    def regression_vector(self) -> torch.Tensor:
        """(center_h, center_w in cells, log l, log w, sin, cos) per query."""
        return torch.cat([self.center_cells, self.log_size, self.yaw_sc], dim=-1)

    def decode(self):
        """Boxes (B, n, 5) as [x, y, l, w, yaw], scores (B, n) and labels (B, n)."""
        sc = self.yaw_sc / self.yaw_sc.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        yaw = torch.atan2(sc[..., 0], sc[..., 1])
        boxes = torch.cat([self.center_m, self.log_size.exp(), yaw.unsqueeze(-1)], dim=-1)
        scores, labels = torch.sigmoid(self.cls_logits).max(dim=-1)
        return boxes, scores, labels


class DetectionHead(nn.Module):
    """Two-layer MLP per output group, applied independently to each query."""

    def __init__(self, dim: int, n_classes: int, cell_m: float, extent_m: float, prior: float = 0.1):
        super().__init__()
        self.cell_m, self.extent_m = cell_m, extent_m
        self.cls = MLP(dim, dim, n_classes)
        self.offset = MLP(dim, dim, 2)
        self.size = MLP(dim, dim, 2)
        self.yaw = MLP(dim, dim, 2)
        nn.init.constant_(self.cls.fc2.bias, -math.log((1 - prior) / prior))

    def forward(self, queries: TaskQuerySet) -> DetectionOutput:
        q = queries.embeddings
        offset = self.offset(q)
        center = queries.positions.to(q.dtype) + 0.5 + offset
        return DetectionOutput(
            cls_logits=self.cls(q), offset=offset, log_size=self.size(q), yaw_sc=self.yaw(q),
            center_cells=center, center_m=center * self.cell_m - self.extent_m)


def box_regression_targets(boxes, cell_m: float, extent_m: float, dtype=torch.float32) -> torch.Tensor:
    """Ground-truth rows [x, y, l, w, yaw, ...] to the regression vector layout."""
    b = torch.as_tensor(boxes, dtype=dtype).reshape(-1, 7)
    return torch.stack([(b[:, 0] + extent_m) / cell_m, (b[:, 1] + extent_m) / cell_m,
                        b[:, 2].log(), b[:, 3].log(), b[:, 4].sin(), b[:, 4].cos()], dim=-1)


def segmentation_head(seg_q: TaskQuerySet, f_seg: torch.Tensor, s: int) -> torch.Tensor:
    """Per-class mask logits (B, H, W, K); each row only sees the queries of its band."""
    b, h, w, _ = f_seg.shape
    k = len(seg_q) // s
    scores = torch.einsum("bhwc,bnc->bhwn", f_seg, seg_q.embeddings).reshape(b, h, w, s, k)
    band = row_band_index(h, s).to(f_seg.device).view(1, h, 1, 1, 1).expand(b, h, w, 1, k)
    return torch.gather(scores, 3, band).squeeze(3)


def serpentine_order(h: int, w: int, z: int) -> torch.Tensor:
    """Flat (h, w, z) indices of a boustrophedon walk; consecutive voxels are neighbours."""
    order = []
    step = 0
    for i in range(h):
        cols = range(w) if i % 2 == 0 else range(w - 1, -1, -1)
        for j in cols:
            zs = range(z) if step % 2 == 0 else range(z - 1, -1, -1)
            order.extend((i * w + j) * z + k for k in zs)
            step += 1
    return torch.tensor(order, dtype=torch.long)


def trilinear_upsample(vol: torch.Tensor, size: tuple[int, int, int]) -> torch.Tensor:
    """(B, C, H, W, Z) -> (B, C, *size), cell-center aligned."""
    return F.interpolate(vol, size=size, mode="trilinear", align_corners=False)


def trilinear_interpolate(vol: torch.Tensor, point) -> torch.Tensor:
    """Sample (H, W, Z, C) at a continuous index-space point (voxel centers at integers).

    Coordinates are clamped to the volume, matching the edge handling of
    :func:`trilinear_upsample`.
    """
    out = 0.0
    dims = vol.shape[:3]
    lo, frac = [], []
    for p, n in zip(point, dims):
        p = min(max(float(p), 0.0), n - 1.0)
        i0 = int(math.floor(p))
        lo.append(i0)
        frac.append(p - i0)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                wgt = ((frac[0] if di else 1 - frac[0]) * (frac[1] if dj else 1 - frac[1])
                       * (frac[2] if dk else 1 - frac[2]))
                idx = [min(lo[a] + d, dims[a] - 1) for a, d in enumerate((di, dj, dk))]
                out = out + wgt * vol[idx[0], idx[1], idx[2]]
    return out


def scatter_voxels(sets: list[TaskQuerySet], grid: tuple[int, int, int]) -> torch.Tensor:
    """Place every valid query at its voxel: (B, H*W*Z, C) in row-major voxel order."""
    h, w, z = grid
    first = sets[0].embeddings
    vol = first.new_zeros(first.shape[0], h * w * z, first.shape[-1])
    for qs in sets:
        valid = qs.valid if qs.valid is not None else torch.ones(qs.embeddings.shape[:2], dtype=torch.bool)
        bi, ni = valid.nonzero(as_tuple=True)
        p = qs.positions[bi, ni]
        flat = (p[:, 0] * w + p[:, 1]) * z + p[:, 2]
        vol = vol.index_put((bi, flat), qs.embeddings[bi, ni])
    return vol


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None):
    """Single-head SDPA on (B, L, E); the head axis lets CPU use the fused kernel."""
    if mask is not None:
        mask = mask.unsqueeze(1)
    return F.scaled_dot_product_attention(q.unsqueeze(1), k.unsqueeze(1), v.unsqueeze(1),
                                          attn_mask=mask).squeeze(1)


class OccupancyHead(nn.Module):
    """Uncertain->definite attention, scatter, one refinement block, upsample, classify."""

    def __init__(self, dim: int, n_classes: int, grid: tuple[int, int, int], out: tuple[int, int, int],
                 variant: str = "transformer", attn_dim: int = 16, state_dim: int = 8):
        super().__init__()
        self.grid, self.out, self.variant = tuple(grid), tuple(out), variant
        self.q_proj = nn.Linear(dim, attn_dim)
        self.k_proj = nn.Linear(dim, attn_dim)
        self.v_proj = nn.Linear(dim, attn_dim)
        self.o_proj = nn.Linear(attn_dim, dim)
        if variant == "transformer":
            self.qkv = nn.Linear(dim, 3 * attn_dim)
            self.refine_out = nn.Linear(attn_dim, dim)
        else:
            self.ssm = SSM(dim, state_dim)
            self.refine_out = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, dim))
            order = serpentine_order(*grid)
            self.register_buffer("order", order, persistent=False)
            self.register_buffer("inverse_order", torch.argsort(order), persistent=False)
        self.proj = nn.Linear(dim, n_classes + 1)

    def attend_uncertain(self, definite: TaskQuerySet, uncertain: TaskQuerySet) -> TaskQuerySet:
        has_keys = definite.valid.any(dim=1)
        if not bool(has_keys.any()):
            log.warning("no definitely occupied voxels in batch; skipping uncertain->definite attention")
            return uncertain
        if not bool(has_keys.all()):
            log.warning("some samples have no definitely occupied voxels; their attention update is skipped")
        mask = definite.valid | ~has_keys.unsqueeze(1)
        q = self.q_proj(uncertain.embeddings)
        k = self.k_proj(definite.embeddings)
        v = self.v_proj(definite.embeddings)
        att = _attention(q, k, v, mask.unsqueeze(1))
        upd = self.o_proj(att) * (has_keys.view(-1, 1, 1) & uncertain.valid.unsqueeze(-1)).to(q.dtype)
        return uncertain.with_embeddings(uncertain.embeddings + upd)

    def refine(self, vol: torch.Tensor) -> torch.Tensor:
        if self.variant == "transformer":
            q, k, v = self.qkv(vol).chunk(3, dim=-1)
            return vol + self.refine_out(_attention(q, k, v))
        seq = vol[:, self.order]
        y = self.ssm(seq) + self.ssm(seq.flip(1)).flip(1)
        return vol + self.refine_out(y[:, self.inverse_order])

    def forward(self, definite: TaskQuerySet, uncertain: TaskQuerySet) -> torch.Tensor:
        """Occupancy logits (B, H', W', Z', M+1)."""
        uncertain = self.attend_uncertain(definite, uncertain)
        vol = self.refine(scatter_voxels([definite, uncertain], self.grid))
        b = vol.shape[0]
        # per-voxel projection commutes with trilinear upsampling (weights sum to 1)
        logits = self.proj(vol).view(b, *self.grid, -1).permute(0, 4, 1, 2, 3)
        return trilinear_upsample(logits, self.out).permute(0, 2, 3, 4, 1)
