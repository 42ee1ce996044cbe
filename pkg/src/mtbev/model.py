"""End-to-end multi-task network: fusion -> query init -> shared decoder -> heads."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from . import losses as L
from .config import RunConfig
from .decoder import Decoder, TASK_INDEX
from .fusion import MAFI
from .heads import DetectionHead, OccupancyHead, segmentation_head
from .query_init import (PositionEncoder, confidence_logits, init_detection_queries,
                         init_occupancy_queries, init_segmentation_queries)


class MultiTaskNet(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        s, m, d = cfg.scene, cfg.model, cfg.decoder
        c = s.channels
        self.cfg = cfg
        self.tasks = tuple(m.tasks)
        self.n_det, self.n_seg = s.n_det_classes, s.n_seg_classes
        self.mafi = MAFI(c, gated=m.use_mafi)
        self.category = nn.Parameter(torch.randn(s.n_det_classes + s.n_seg_classes, c) * c ** -0.5)
        self.pos_enc = PositionEncoder(c)
        self.shared_embed = nn.Parameter(torch.randn(c) * 0.02)
        self.decoder = Decoder(c, d.layers, d.variant, self.tasks, d.heads, d.points,
                               d.state_dim, d.ffn_ratio, d.use_tcs)
        if "det" in self.tasks:
            self.det_head = DetectionHead(c, s.n_det_classes, s.cell_m, s.extent_m)
        if "seg" in self.tasks:
            # mask embedding: decoded queries grow in norm over layers; normalizing before
            # the dot product keeps initial mask logits O(1)
            self.seg_embed = nn.Sequential(nn.LayerNorm(c), nn.Linear(c, c))
            nn.init.normal_(self.seg_embed[1].weight, std=1.0 / c)
            nn.init.zeros_(self.seg_embed[1].bias)
        if "occ" in self.tasks:
            self.occ_head = OccupancyHead(c, s.n_occ_classes, (s.grid_h, s.grid_w, s.grid_z),
                                          (s.out_h, s.out_w, s.out_z), d.variant,
                                          m.occ_attn_dim, d.state_dim)

    def forward(self, batch: dict, tasks: tuple[str, ...] | None = None) -> dict:
        tasks = self.tasks if tasks is None else tuple(t for t in tasks if t in self.tasks)
        f_bev = self.mafi(batch["f_lidar"], batch["f_cam"])
        logits = confidence_logits(f_bev, self.category)
        out = {"f_bev": f_bev, "det_conf_logits": logits[..., :self.n_det],
               "seg_conf_logits": logits[..., self.n_det:]}
        queries = {}
        if "det" in tasks:
            # selecting on logits equals selecting on sigmoid confidences without saturation ties
            queries["det"] = init_detection_queries(f_bev, out["det_conf_logits"],
                                                    self.cfg.model.n_det_queries, self.pos_enc)
        if "seg" in tasks:
            queries["seg"] = init_segmentation_queries(f_bev, out["seg_conf_logits"],
                                                       self.cfg.model.seg_blocks, self.pos_enc)
        if "occ" in tasks:
            queries["occ"], uncertain = init_occupancy_queries(f_bev, batch["lidar_mask"],
                                                               self.shared_embed, self.pos_enc)
        queries, f_out, grids = self.decoder(queries, f_bev)
        out["queries"], out["f_out"] = queries, f_out
        if "det" in tasks:
            out["det"] = self.det_head(queries["det"])
        if "seg" in tasks:
            seg_q = queries["seg"].with_embeddings(self.seg_embed(queries["seg"].embeddings))
            out["seg_logits"] = segmentation_head(seg_q, grids[TASK_INDEX["seg"]],
                                                  self.cfg.model.seg_blocks)
        if "occ" in tasks:
            out["occ_logits"] = self.occ_head(queries["occ"], uncertain)
        return out

    def compute_losses(self, out: dict, batch: dict) -> dict:
        lc = self.cfg.loss
        w = L.LossWeights(lc.lambda_cls, lc.lambda_reg, lc.lambda_det, lc.lambda_seg, lc.lambda_occ)
        zero = out["f_bev"].new_zeros(())
        parts = {"det": zero, "seg": zero, "occ": zero}
        if "det" in out:
            det = L.detection_loss(out["det"], batch["boxes"], w, self.cfg.scene.cell_m,
                                   self.cfg.scene.extent_m, lc.focal_alpha, lc.focal_gamma)
            heat = L.heatmap_focal_loss(out["det_conf_logits"], batch["heatmaps"])
            parts["det"] = det["det"] + heat
            parts.update(det_cls=det["cls"], det_reg=det["reg"], det_heatmap=heat)
        if "seg_logits" in out:
            mask = L.segmentation_loss(out["seg_logits"], batch["seg_grid"], lc.focal_alpha, lc.focal_gamma)
            conf = L.segmentation_loss(out["seg_conf_logits"], batch["seg_grid"], lc.focal_alpha, lc.focal_gamma)
            parts["seg"] = mask + conf
            parts.update(seg_mask=mask, seg_conf=conf)
        if "occ_logits" in out:
            parts["occ"] = L.occupancy_loss(out["occ_logits"], batch["occ_labels"], self.cfg.scene.n_occ_classes)
        parts["total"] = L.total_loss(parts["det"], parts["seg"], parts["occ"], w)
        return parts


def collate(items, dtype=torch.float32) -> dict:
    """Stack (sample, features, targets) triples into a batch dict."""
    samples, feats, targets = zip(*items)
    return {
        "f_lidar": torch.from_numpy(np.stack([f.f_lidar for f in feats])).to(dtype),
        "f_cam": torch.from_numpy(np.stack([f.f_cam for f in feats])).to(dtype),
        "lidar_mask": torch.from_numpy(np.stack([f.lidar_mask for f in feats])),
        "heatmaps": torch.from_numpy(np.stack([t.center_heatmaps for t in targets])).to(dtype),
        "seg_grid": torch.from_numpy(np.stack([t.seg_grid for t in targets])),
        "occ_labels": torch.from_numpy(np.stack([t.occ_labels for t in targets])),
        "boxes": [t.boxes for t in targets],
    }
