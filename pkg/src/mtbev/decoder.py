"""Shared multi-task decoder.

Each layer propagates context across the BEV grid (deformable self-attention
or a four-direction selective scan), carves one task-specific grid per task
with task-oriented channel scaling, and updates every task's queries from its
own grid (deformable cross-attention or a direct index lookup).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError
from .query_init import TaskQuerySet
from .selective_scan import selective_scan

TASK_INDEX = {"det": 0, "seg": 1, "occ": 2}
SCAN_DIRECTIONS = ("left", "right", "top", "bottom")


def cell_reference(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """Continuous (h, w) coordinates of cell centers, shape (h*w, 2)."""
    ii, jj = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([ii, jj], dim=-1).reshape(-1, 2) + 0.5


def bilinear_sample(value: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample a channel-last grid with zero padding.

    Args:
        value: (N, H, W, C).
        loc: (N, Q, P, 2) continuous (h, w) coordinates, cell centers at +0.5.

    Returns:
        (N, C, Q, P) samples.
    """
    _, h, w, _ = value.shape
    grid = torch.stack([2.0 * loc[..., 1] / w - 1.0, 2.0 * loc[..., 0] / h - 1.0], dim=-1)
    return F.grid_sample(value.permute(0, 3, 1, 2), grid, mode="bilinear",
                         padding_mode="zeros", align_corners=False)


class DeformableAttention(nn.Module):
    """Single-scale deformable attention (heads x points samples per query)."""

    def __init__(self, dim: int, heads: int = 4, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ConfigError("dim must be divisible by heads")
        self.dim, self.heads, self.points = dim, heads, points
        self.sampling_offsets = nn.Linear(dim, heads * points * 2)
        self.attention_weights = nn.Linear(dim, heads * points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.zeros_(self.sampling_offsets.weight)
        theta = torch.arange(self.heads, dtype=torch.float32) * (2.0 * math.pi / self.heads)
        dirs = torch.stack([theta.cos(), theta.sin()], -1)
        dirs = dirs / dirs.abs().max(-1, keepdim=True).values
        scale = torch.arange(1, self.points + 1, dtype=torch.float32).view(1, -1, 1)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_((dirs[:, None, :] * scale).reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        for lin in (self.value_proj, self.output_proj):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def sampling(self, query: torch.Tensor, ref: torch.Tensor):
        """Sampling locations (B, Q, heads, points, 2) and weights (B, Q, heads, points)."""
        b, q, _ = query.shape
        off = self.sampling_offsets(query).view(b, q, self.heads, self.points, 2)
        if not bool(torch.isfinite(off).all()):
            raise FloatingPointError("non-finite sampling offsets")
        weights = self.attention_weights(query).view(b, q, self.heads, self.points).softmax(-1)
        return ref[:, :, None, None, :] + off, weights

    def forward(self, query: torch.Tensor, ref: torch.Tensor, value_map: torch.Tensor) -> torch.Tensor:
        b, q, c = query.shape
        _, h, w, _ = value_map.shape
        ch = c // self.heads
        value = self.value_proj(value_map).view(b, h, w, self.heads, ch)
        value = value.permute(0, 3, 1, 2, 4).reshape(b * self.heads, h, w, ch)
        loc, weights = self.sampling(query, ref)
        loc = loc.permute(0, 2, 1, 3, 4).reshape(b * self.heads, q, self.points, 2)
        samples = bilinear_sample(value, loc)                       # (B*heads, ch, Q, P)
        weights = weights.permute(0, 2, 1, 3).reshape(b * self.heads, 1, q, self.points)
        out = (samples * weights).sum(-1).view(b, self.heads, ch, q)
        return self.output_proj(out.permute(0, 3, 1, 2).reshape(b, q, c))


def deformable_self_attention(f_bev: torch.Tensor, attn: DeformableAttention) -> torch.Tensor:
    """Every cell attends around its own center; residual included."""
    b, h, w, c = f_bev.shape
    if h < 2 or w < 2:
        raise ValueError("deformable self-attention needs H, W >= 2")
    flat = f_bev.reshape(b, h * w, c)
    ref = cell_reference(h, w, f_bev.dtype).expand(b, -1, -1)
    return f_bev + attn(flat, ref, f_bev).view(b, h, w, c)


class FFN(nn.Module):
    def __init__(self, dim: int, ratio: int = 2):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TCS(nn.Module):
    """Task-oriented channel scaling: ``F_i = W_i * F`` with ``W_i`` predicted per cell.

    The output linear of each branch starts at zero weight and unit bias, so
    every task grid equals the shared grid at initialization.
    """

    def __init__(self, dim: int, n_tasks: int = 3):
        super().__init__()
        self.embed = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_tasks))
        self.weight = nn.ModuleList(nn.Linear(dim, dim) for _ in range(n_tasks))
        self.reset_identity()

    def reset_identity(self) -> None:
        for lin in self.weight:
            nn.init.zeros_(lin.weight)
            nn.init.ones_(lin.bias)

    def scales(self, f: torch.Tensor) -> list[torch.Tensor]:
        return [wl(F.gelu(el(f))) for el, wl in zip(self.embed, self.weight)]

    def forward(self, f: torch.Tensor) -> list[torch.Tensor]:
        return [s * f for s in self.scales(f)]


class SSM(nn.Module):
    """Selective state-space recurrence over token sequences (B, L, C)."""

    def __init__(self, dim: int, state_dim: int = 8, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.dt_proj = nn.Linear(dim, dim)
        self.b_proj = nn.Linear(dim, state_dim, bias=False)
        self.c_proj = nn.Linear(dim, state_dim, bias=False)
        a = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(dim, 1)
        self.A_log = nn.Parameter(torch.log(a))
        self.D = nn.Parameter(torch.ones(dim))
        nn.init.uniform_(self.dt_proj.weight, -dim ** -0.5 * 0.1, dim ** -0.5 * 0.1)
        dt = torch.exp(torch.rand(dim) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus

    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = F.softplus(self.dt_proj(x))
        return selective_scan(x, delta, self.A(), self.b_proj(x), self.c_proj(x), self.D)


def to_sequences(f: torch.Tensor, direction: str) -> torch.Tensor:
    """Unroll (B, H, W, C) into per-row or per-column sequences for one scan direction."""
    b, h, w, c = f.shape
    if direction == "left":
        return f.reshape(b * h, w, c)
    if direction == "right":
        return f.flip(2).reshape(b * h, w, c)
    if direction == "top":
        return f.transpose(1, 2).reshape(b * w, h, c)
    if direction == "bottom":
        return f.flip(1).transpose(1, 2).reshape(b * w, h, c)
    raise ValueError(f"unknown scan direction {direction!r}")


def from_sequences(y: torch.Tensor, direction: str, shape: tuple[int, ...]) -> torch.Tensor:
    b, h, w, c = shape
    if direction == "left":
        return y.reshape(b, h, w, c)
    if direction == "right":
        return y.reshape(b, h, w, c).flip(2)
    if direction == "top":
        return y.reshape(b, w, h, c).transpose(1, 2)
    if direction == "bottom":
        return y.reshape(b, w, h, c).transpose(1, 2).flip(1)
    raise ValueError(f"unknown scan direction {direction!r}")


class VSS2D(nn.Module):
    """Four-direction scan over rows and columns, summed, merged, plus residual.

    The merge projection is a LayerNorm followed by a linear map; the norm keeps
    long-memory scan sums at unit scale.
    """

    def __init__(self, dim: int, state_dim: int = 8):
        super().__init__()
        self.ssm = SSM(dim, state_dim)
        self.merge = nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, dim))

    def forward(self, f_bev: torch.Tensor) -> torch.Tensor:
        total = None
        for direction in SCAN_DIRECTIONS:
            y = from_sequences(self.ssm(to_sequences(f_bev, direction)), direction, f_bev.shape)
            total = y if total is None else total + y
        return f_bev + self.merge(total)


def vss2d_scan(f_bev: torch.Tensor, block: VSS2D) -> torch.Tensor:
    return block(f_bev)


def _check_positions(positions: torch.Tensor, h: int, w: int) -> None:
    hw = positions[..., :2]
    if bool((hw < 0).any()) or bool((hw[..., 0] >= h).any()) or bool((hw[..., 1] >= w).any()):
        raise IndexError("query position outside the BEV grid")


def _valid(qs: TaskQuerySet, x: torch.Tensor) -> torch.Tensor:
    return x if qs.valid is None else x * qs.valid.unsqueeze(-1).to(x.dtype)


class QueryCrossAttention(nn.Module):
    """Deformable cross-attention from queries into a task grid, then an FFN; both residual."""

    def __init__(self, dim: int, heads: int = 4, points: int = 4, ffn_ratio: int = 2):
        super().__init__()
        self.attn = DeformableAttention(dim, heads, points)
        self.ffn = FFN(dim, ffn_ratio)

    def forward(self, queries: TaskQuerySet, f_task: torch.Tensor) -> TaskQuerySet:
        _, h, w, _ = f_task.shape
        _check_positions(queries.positions, h, w)
        ref = queries.positions[..., :2].to(f_task.dtype) + 0.5
        q = queries.embeddings
        q = q + self.attn(q, ref, f_task)
        q = q + self.ffn(q)
        return queries.with_embeddings(_valid(queries, q))


def cross_attend_queries(queries: TaskQuerySet, f_task: torch.Tensor,
                         block: QueryCrossAttention) -> TaskQuerySet:
    return block(queries, f_task)


def index_update_queries(queries: TaskQuerySet, f_task: torch.Tensor) -> TaskQuerySet:
    """``q <- q + f_task[h, w]`` at each query's own (h, w)."""
    b, h, w, c = f_task.shape
    _check_positions(queries.positions, h, w)
    flat = queries.positions[..., 0] * w + queries.positions[..., 1]
    picked = torch.gather(f_task.reshape(b, h * w, c), 1, flat.unsqueeze(-1).expand(-1, -1, c))
    return queries.with_embeddings(queries.embeddings + _valid(queries, picked))


class TransformerDecoderLayer(nn.Module):
    def __init__(self, dim: int, tasks, heads: int, points: int, ffn_ratio: int, use_tcs: bool):
        super().__init__()
        self.dsa = DeformableAttention(dim, heads, points)
        self.ffn = FFN(dim, ffn_ratio)
        self.tcs = TCS(dim, len(TASK_INDEX)) if use_tcs else None
        self.cross = nn.ModuleDict({t: QueryCrossAttention(dim, heads, points, ffn_ratio) for t in tasks})

    def forward(self, queries: dict[str, TaskQuerySet], f_bev: torch.Tensor):
        f_bev = deformable_self_attention(f_bev, self.dsa)
        f_bev = f_bev + self.ffn(f_bev)
        grids = self.tcs(f_bev) if self.tcs is not None else [f_bev] * len(TASK_INDEX)
        out = {t: self.cross[t](q, grids[TASK_INDEX[t]]) for t, q in queries.items()}
        return out, f_bev, grids


class MambaDecoderLayer(nn.Module):
    def __init__(self, dim: int, tasks, state_dim: int, use_tcs: bool):
        super().__init__()
        self.vss = VSS2D(dim, state_dim)
        self.tcs = TCS(dim, len(TASK_INDEX)) if use_tcs else None

    def forward(self, queries: dict[str, TaskQuerySet], f_bev: torch.Tensor):
        f_bev = self.vss(f_bev)
        grids = self.tcs(f_bev) if self.tcs is not None else [f_bev] * len(TASK_INDEX)
        out = {t: index_update_queries(q, grids[TASK_INDEX[t]]) for t, q in queries.items()}
        return out, f_bev, grids


class Decoder(nn.Module):
    def __init__(self, dim: int, layers: int = 2, variant: str = "transformer", tasks=("det", "seg", "occ"),
                 heads: int = 4, points: int = 4, state_dim: int = 8, ffn_ratio: int = 2,
                 use_tcs: bool = True):
        super().__init__()
        if variant == "transformer":
            make = lambda: TransformerDecoderLayer(dim, tasks, heads, points, ffn_ratio, use_tcs)  # noqa: E731
        elif variant == "mamba":
            make = lambda: MambaDecoderLayer(dim, tasks, state_dim, use_tcs)  # noqa: E731
        else:
            raise ConfigError(f"unknown decoder variant {variant!r}")
        self.variant = variant
        self.layers = nn.ModuleList(make() for _ in range(layers))

    def forward(self, queries: dict[str, TaskQuerySet], f_bev: torch.Tensor):
        """Returns (queries, f_bev, task grids of the last layer)."""
        grids = [f_bev] * len(TASK_INDEX)
        for layer in self.layers:
            queries, f_bev, grids = layer(queries, f_bev)
        return queries, f_bev, grids


def decoder_forward(queries: dict[str, TaskQuerySet], f_bev: torch.Tensor, decoder: Decoder):
    return decoder(queries, f_bev)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
