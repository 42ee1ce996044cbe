"""Modality-adaptive feature integration of LiDAR and camera BEV grids.

All BEV tensors are channel-last: ``(B, H, W, C)``.
"""

from __future__ import annotations

import torch
from torch import nn


def check_finite(x: torch.Tensor, name: str) -> None:
    """Raise ``FloatingPointError`` naming the first non-finite entry of ``x``."""
    bad = ~torch.isfinite(x)
    if bool(bad.any()):
        where = tuple(int(i) for i in bad.nonzero()[0])
        raise FloatingPointError(f"non-finite value in {name} at index {where}")


class MAFI(nn.Module):
    """Initial conv fusion followed by per-modality sigmoid gating.

    ``F_bev = G_lidar * F_init + G_cam * F_init`` where each gate is a
    per-cell linear map of its modality followed by a sigmoid. With
    ``gated=False`` the module reduces to the plain conv fusion.
    """

    def __init__(self, channels: int, gated: bool = True):
        super().__init__()
        self.channels = channels
        self.gated = gated
        self.fuse_conv = nn.Conv2d(2 * channels, channels, kernel_size=3, padding=1)
        self.gate_lidar = nn.Linear(channels, channels)
        self.gate_cam = nn.Linear(channels, channels)

    def init_fuse(self, f_lidar: torch.Tensor, f_cam: torch.Tensor) -> torch.Tensor:
        if f_lidar.shape != f_cam.shape:
            raise ValueError(f"modality shapes differ: {tuple(f_lidar.shape)} vs {tuple(f_cam.shape)}")
        x = torch.cat([f_lidar, f_cam], dim=-1).permute(0, 3, 1, 2)
        return self.fuse_conv(x).permute(0, 2, 3, 1)

    @staticmethod
    def gate_weights(f_mod: torch.Tensor, gate: nn.Linear) -> torch.Tensor:
        return torch.sigmoid(gate(f_mod))

    def forward(self, f_lidar: torch.Tensor, f_cam: torch.Tensor) -> torch.Tensor:
        check_finite(f_lidar, "f_lidar")
        check_finite(f_cam, "f_cam")
        f_init = self.init_fuse(f_lidar, f_cam)
        if not self.gated:
            return f_init
        g_lidar = self.gate_weights(f_lidar, self.gate_lidar)
        g_cam = self.gate_weights(f_cam, self.gate_cam)
        return g_lidar * f_init + g_cam * f_init

