"""Registry of gradient and oracle checks, grouped by module.

Each check builds a minimal float64 instance, runs the implementation, and
compares it against finite differences or a loop oracle from
:mod:`mtbev.verify.oracles`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import oracles as O
from .gradcheck import GradCheckReport, check_gradients, finite_diff_grad, module_tensors


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float
    passed: bool
    detail: str = ""

    def summary(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{flag}] oracle {self.name:<33} max_err={self.max_error:.2e} tol={self.tol:.0e}{extra}"


def _close(name: str, got, want, tol: float) -> CheckResult:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return CheckResult(name, float("inf"), tol, False, f"shape {got.shape} vs {want.shape}")
    err = float(np.abs(got - want).max()) if got.size else 0.0
    return CheckResult(name, err, tol, err <= tol)


def _exact(name: str, ok: bool, detail: str = "") -> CheckResult:
    return CheckResult(name, 0.0 if ok else 1.0, 0.0, bool(ok), detail)


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().double().numpy()


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(*shape, seed: int, scale: float = 1.0) -> torch.Tensor:
    return torch.randn(*shape, generator=_gen(seed), dtype=torch.float64) * scale


def _randomize(module: torch.nn.Module, seed: int, scale: float = 0.5) -> torch.nn.Module:
    """float64 copy with every parameter redrawn (keeps checks away from special inits)."""
    module = module.double()
    g = _gen(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * scale)
    return module


def _projection(out: torch.Tensor, seed: int) -> torch.Tensor:
    """Random fixed weights so a scalar loss touches every output entry."""
    return torch.randn(out.shape, generator=_gen(seed), dtype=torch.float64)


# fusion_mafi ------------------------------------------------------------------

def _mafi_params(m) -> tuple:
    return (_np(m.fuse_conv.weight), _np(m.fuse_conv.bias), _np(m.gate_lidar.weight),
            _np(m.gate_lidar.bias), _np(m.gate_cam.weight), _np(m.gate_cam.bias))


def grad_mafi() -> GradCheckReport:
    from ..fusion import MAFI
    m = _randomize(MAFI(4), 1)
    fl, fc = _randn(1, 3, 3, 4, seed=2), _randn(1, 3, 3, 4, seed=3)
    w = None

    def fn():
        nonlocal w
        out = m(fl, fc)
        w = _projection(out, 4) if w is None else w
        return (out * w).sum()
    return check_gradients("mafi_fuse", fn, {**module_tensors(m), "f_lidar": fl, "f_cam": fc})


def oracle_mafi() -> list[CheckResult]:
    from ..fusion import MAFI
    m = _randomize(MAFI(4), 5)
    fl, fc = _randn(1, 3, 3, 4, seed=6), _randn(1, 3, 3, 4, seed=7)
    with torch.no_grad():
        got = m(fl, fc)[0]
        f_init = m.init_fuse(fl, fc)[0]
    want = O.mafi_oracle(_np(fl[0]), _np(fc[0]), *_mafi_params(m))
    conv = O.naive_conv3x3(np.concatenate([_np(fl[0]), _np(fc[0])], -1), *_mafi_params(m)[:2])
    m2 = _randomize(MAFI(2), 8)
    a, b = _randn(1, 4, 4, 2, seed=9), _randn(1, 4, 4, 2, seed=10)
    with torch.no_grad():
        got2 = m2.init_fuse(a, b)[0]
    want2 = O.naive_conv3x3(np.concatenate([_np(a[0]), _np(b[0])], -1), *_mafi_params(m2)[:2])
    return [_close("mafi_fuse 3x3x4", got, want, 1e-6),
            _close("init_fuse 3x3x4", f_init, conv, 1e-6),
            _close("init_fuse 4x4x2", got2, want2, 1e-6)]


# query_init -------------------------------------------------------------------

def grad_confidence() -> GradCheckReport:
    from ..query_init import build_confidence_maps
    f, cat = _randn(1, 3, 3, 4, seed=11), _randn(5, 4, seed=12, scale=0.5)
    w1, w2 = _randn(1, 3, 3, 3, seed=13), _randn(1, 3, 3, 2, seed=14)

    def fn():
        det, seg = build_confidence_maps(f, cat, 3)
        return (det * w1).sum() + (seg * w2).sum()
    return check_gradients("confidence_maps", fn, {"f_bev": f, "category": cat})


def grad_position_mlp() -> GradCheckReport:
    from ..query_init import PositionEncoder
    m = _randomize(PositionEncoder(4), 15)
    p = torch.rand(5, 3, generator=_gen(16), dtype=torch.float64) * 0.8 + 0.1
    w = _randn(5, 4, seed=17)
    return check_gradients("encode_position", lambda: (m(p) * w).sum(), {**module_tensors(m), "p": p})


def oracle_query_init() -> list[CheckResult]:
    from ..query_init import (PositionEncoder, band_bounds, build_confidence_maps, init_occupancy_queries,
                              init_segmentation_queries, select_topk, split_occupancy_queries)
    from ..heads import scatter_voxels
    res = []
    m = _randomize(PositionEncoder(4), 18)
    p = torch.tensor([[0.5, 0.5, 0.5]], dtype=torch.float64)
    with torch.no_grad():
        got = m(p)[0]
    want = O.mlp2_oracle([0.5, 0.5, 0.5], _np(m.fc1.weight), _np(m.fc1.bias), _np(m.fc2.weight), _np(m.fc2.bias))
    res.append(_close("encode_position", got, want, 1e-7))

    f, cat = _randn(1, 2, 2, 2, seed=19), _randn(4, 2, seed=20)
    with torch.no_grad():
        det, seg = build_confidence_maps(f, cat, 2)
    want = O.confidence_oracle(_np(f[0]), _np(cat))
    res.append(_close("confidence_maps 2x2x2", torch.cat([det, seg], -1)[0], want, 1e-7))

    # top-k: random volumes up to 8x8x4, half of them with heavy ties
    ok = True
    rng = np.random.default_rng(21)
    for trial in range(40):
        shape = tuple(int(v) for v in (rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5)))
        conf = rng.random(shape)
        if trial % 2:
            conf = np.round(conf * 3) / 3
        k = int(rng.integers(1, conf.size + 1))
        idx = select_topk(torch.from_numpy(conf)[None], k)[0].tolist()
        h, w, kk = shape
        got = [(i // kk // w, i // kk % w, i % kk) for i in idx]
        ok &= got == O.exhaustive_topk(conf, k)
    res.append(_exact("top-k vs full sort (40 volumes)", ok))

    ok = True
    pos_enc = _randomize(PositionEncoder(3), 22)
    for trial in range(20):
        h, w, k = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        s = int(rng.integers(1, h + 1))
        conf = np.round(rng.random((h, w, k)) * 4) / 4
        fb = torch.from_numpy(rng.standard_normal((1, h, w, 3)))
        with torch.no_grad():
            qs = init_segmentation_queries(fb, torch.from_numpy(conf)[None], s, pos_enc)
        want = O.band_argmax_oracle(conf, s)
        got = qs.positions[0].tolist()
        ok &= got == [list(c) for band in want for c in band]
        bounds = band_bounds(h, s)
        ok &= all(bounds[int(b)][0] <= p[0] < bounds[int(b)][1] for b, p in zip(qs.blocks[0], got))
    res.append(_exact("band argmax vs exhaustive (20 maps)", ok))

    ok = True
    for _ in range(10):
        mask = rng.random((3, 3, 2)) < 0.5
        d, u = split_occupancy_queries(mask)
        wd, wu = O.exhaustive_partition(mask)
        ok &= [tuple(x) for x in d.tolist()] == wd and [tuple(x) for x in u.tolist()] == wu
    res.append(_exact("occupancy split vs enumeration", ok))

    mask = torch.from_numpy(rng.random((2, 3, 3, 2)) < 0.4)
    fb = _randn(2, 3, 3, 4, seed=23)
    shared = _randn(4, seed=24)
    pe = _randomize(PositionEncoder(4), 25)
    with torch.no_grad():
        dq, uq = init_occupancy_queries(fb, mask, shared, pe)
        vol = scatter_voxels([dq, uq], (3, 3, 2)).view(2, 3, 3, 2, 4)
    ok, err = True, 0.0
    for b in range(2):
        entries = []
        for i, j, k in itertools.product(range(3), range(3), range(2)):
            pos = O.mlp2_oracle([(i + 0.5) / 3, (j + 0.5) / 3, (k + 0.5) / 2], _np(pe.fc1.weight),
                                _np(pe.fc1.bias), _np(pe.fc2.weight), _np(pe.fc2.bias))
            base = _np(fb[b, i, j]) if bool(mask[b, i, j, k]) else _np(shared)
            entries.append(((i, j, k), base + pos))
        bij, e = O.per_voxel_scatter_check(_np(vol[b]), entries)
        ok &= bij
        err = max(err, e)
    res.append(CheckResult("occupancy init + scatter vs loop", err, 1e-7, ok and err <= 1e-7))
    return res


# decoder ----------------------------------------------------------------------

def _attn_params(a) -> dict:
    return {"offset_w": _np(a.sampling_offsets.weight), "offset_b": _np(a.sampling_offsets.bias),
            "attn_w": _np(a.attention_weights.weight), "attn_b": _np(a.attention_weights.bias),
            "value_w": _np(a.value_proj.weight), "value_b": _np(a.value_proj.bias),
            "out_w": _np(a.output_proj.weight), "out_b": _np(a.output_proj.bias)}


def _ssm_params(vss) -> dict:
    s = vss.ssm
    return {"dt_w": _np(s.dt_proj.weight), "dt_b": _np(s.dt_proj.bias), "b_w": _np(s.b_proj.weight),
            "c_w": _np(s.c_proj.weight), "A_log": _np(s.A_log), "D": _np(s.D),
            "ln_w": _np(vss.merge[0].weight), "ln_b": _np(vss.merge[0].bias),
            "merge_w": _np(vss.merge[1].weight), "merge_b": _np(vss.merge[1].bias)}


def _tcs_params(tcs) -> list[dict]:
    return [{"embed_w": _np(e.weight), "embed_b": _np(e.bias), "weight_w": _np(w.weight),
             "weight_b": _np(w.bias)} for e, w in zip(tcs.embed, tcs.weight)]


def _deform(dim, heads, points, seed):
    from ..decoder import DeformableAttention
    a = _randomize(DeformableAttention(dim, heads, points), seed, 0.3)
    with torch.no_grad():
        a.sampling_offsets.bias.copy_(_randn(heads * points * 2, seed=seed + 1, scale=1.2))
    return a


def _random_vss(dim: int, state: int, seed: int):
    from ..decoder import VSS2D
    v = VSS2D(dim, state).double()
    g = _gen(seed)
    with torch.no_grad():
        for name, p in v.named_parameters():
            if name == "ssm.A_log":
                p.copy_(torch.rand(p.shape, generator=g, dtype=torch.float64) * 1.5 - 0.5)
            elif name == "merge.0.weight":
                p.copy_(1.0 + 0.2 * torch.randn(p.shape, generator=g, dtype=torch.float64))
            else:
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 0.4)
    return v


def grad_deformable_self() -> GradCheckReport:
    from ..decoder import deformable_self_attention
    a = _deform(8, 2, 2, 30)
    f = _randn(1, 3, 3, 8, seed=32)
    w = _randn(1, 3, 3, 8, seed=33)
    return check_gradients("deformable_self_attention", lambda: (deformable_self_attention(f, a) * w).sum(),
                           {**module_tensors(a), "f_bev": f})


def grad_cross_attention() -> GradCheckReport:
    from ..decoder import QueryCrossAttention
    from ..query_init import TaskQuerySet
    block = _randomize(QueryCrossAttention(8, 2, 2, 2), 34, 0.3)
    with torch.no_grad():
        block.attn.sampling_offsets.bias.copy_(_randn(8, seed=35, scale=1.2))
    q, f = _randn(1, 3, 8, seed=36), _randn(1, 3, 3, 8, seed=37)
    pos = torch.tensor([[[0, 1], [2, 2], [1, 0]]])
    w = _randn(1, 3, 8, seed=38)

    def fn():
        qs = TaskQuerySet("det", q, pos, torch.zeros_like(q))
        return (block(qs, f).embeddings * w).sum()
    return check_gradients("cross_attend_queries", fn, {**module_tensors(block), "queries": q, "f_task": f})


def grad_vss2d() -> GradCheckReport:
    v = _random_vss(4, 3, 39)
    f = _randn(1, 3, 2, 4, seed=40)
    w = _randn(1, 3, 2, 4, seed=41)
    return check_gradients("vss2d_scan", lambda: (v(f) * w).sum(), {**module_tensors(v), "f_bev": f})


def grad_tcs() -> GradCheckReport:
    from ..decoder import TCS
    t = _randomize(TCS(4, 3), 42)
    f = _randn(1, 3, 3, 4, seed=43)
    ws = [_randn(1, 3, 3, 4, seed=44 + i) for i in range(3)]
    return check_gradients("tcs", lambda: sum((o * w).sum() for o, w in zip(t(f), ws)),
                           {**module_tensors(t), "f_bev": f})


def grad_index_update() -> GradCheckReport:
    from ..decoder import index_update_queries
    from ..query_init import TaskQuerySet
    q, f = _randn(1, 4, 3, seed=47), _randn(1, 3, 3, 3, seed=48)
    pos = torch.tensor([[[0, 0], [2, 1], [1, 2], [2, 1]]])
    w = _randn(1, 4, 3, seed=49)
    return check_gradients("index_update_queries",
                           lambda: (index_update_queries(TaskQuerySet("seg", q, pos, q), f).embeddings * w).sum(),
                           {"queries": q, "f_task": f})


def oracle_decoder() -> list[CheckResult]:
    from ..decoder import (Decoder, QueryCrossAttention, TCS, deformable_self_attention,
                           index_update_queries)
    from ..query_init import TaskQuerySet
    res = []
    # VSS2D vs naive recurrences: 1x1, 1xL, Lx1 and random grids up to 4x4
    for k, (h, w, c, n) in enumerate([(1, 1, 3, 2), (1, 4, 3, 4), (4, 1, 2, 3), (3, 4, 4, 8), (4, 4, 8, 8)]):
        v = _random_vss(c, n, 50 + k)
        f = _randn(1, h, w, c, seed=60 + k)
        with torch.no_grad():
            got = v(f)[0]
        res.append(_close(f"vss2d {h}x{w}x{c} N={n}", got, O.vss2d_oracle(_np(f[0]), _ssm_params(v)), 1e-6))

    a = _deform(8, 4, 4, 70)
    f = _randn(1, 4, 4, 8, seed=72)
    with torch.no_grad():
        got = deformable_self_attention(f, a)[0]
    ii, jj = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    ref = np.stack([ii.ravel(), jj.ravel()], -1) + 0.5
    want = _np(f[0]) + O.dense_attention_oracle(_np(f[0]).reshape(16, 8), ref, _np(f[0]), _attn_params(a),
                                                4, 4).reshape(4, 4, 8)
    res.append(_close("deformable self-attn 4x4x8", got, want, 1e-6))

    block = _randomize(QueryCrossAttention(8, 2, 3, 2), 73, 0.3)
    with torch.no_grad():
        block.attn.sampling_offsets.bias.copy_(_randn(12, seed=74, scale=1.5))
    q, ft = _randn(1, 5, 8, seed=75), _randn(1, 3, 4, 8, seed=76)
    pos = torch.tensor([[[0, 0], [2, 3], [1, 1], [0, 3], [2, 0]]])
    with torch.no_grad():
        got = block(TaskQuerySet("det", q, pos, q), ft).embeddings[0]
    qn = _np(q[0])
    upd = qn + O.dense_attention_oracle(qn, _np(pos[0]) + 0.5, _np(ft[0]), _attn_params(block.attn), 2, 3)
    ffn = {"fc1_w": _np(block.ffn.fc1.weight), "fc1_b": _np(block.ffn.fc1.bias),
           "fc2_w": _np(block.ffn.fc2.weight), "fc2_b": _np(block.ffn.fc2.bias)}
    want = np.stack([u + O.ffn_oracle(u, ffn) for u in upd])
    res.append(_close("deformable cross-attn + FFN", got, want, 1e-6))

    t = _randomize(TCS(4, 3), 77)
    f = _randn(1, 3, 3, 4, seed=78)
    with torch.no_grad():
        got = torch.stack(t(f))[:, 0]
    res.append(_close("tcs 3x3x4 n=3", got, np.stack(O.tcs_oracle(_np(f[0]), _tcs_params(t))), 1e-6))

    q, ft = _randn(1, 5, 3, seed=79), _randn(1, 4, 4, 3, seed=80)
    pos = torch.tensor([[[0, 0], [3, 3], [1, 2], [1, 2], [2, 0]]])
    with torch.no_grad():
        got = index_update_queries(TaskQuerySet("seg", q, pos, q), ft).embeddings[0]
    res.append(_close("index update 5 queries", got, O.index_update_oracle(_np(q[0]), _np(pos[0]), _np(ft[0])), 0.0))

    # L=2 mamba decoder replayed from the oracles
    dec = Decoder(4, 2, "mamba", ("det", "seg"), state_dim=3).double()
    for li, layer in enumerate(dec.layers):
        layer.vss = _random_vss(4, 3, 81 + li)
        _randomize(layer.tcs, 85 + li, 0.4)
    f = _randn(1, 4, 4, 4, seed=90)
    qd, qs_ = _randn(1, 3, 4, seed=91), _randn(1, 2, 4, seed=92)
    pd, ps = torch.tensor([[[0, 1], [3, 2], [1, 1]]]), torch.tensor([[[2, 2], [0, 3]]])
    with torch.no_grad():
        out, f_out, _ = dec({"det": TaskQuerySet("det", qd, pd, qd), "seg": TaskQuerySet("seg", qs_, ps, qs_)}, f)
    fo, dq, sq = _np(f[0]), _np(qd[0]), _np(qs_[0])
    for layer in dec.layers:
        fo = O.vss2d_oracle(fo, _ssm_params(layer.vss))
        grids = O.tcs_oracle(fo, _tcs_params(layer.tcs))
        dq = O.index_update_oracle(dq, _np(pd[0]), grids[0])
        sq = O.index_update_oracle(sq, _np(ps[0]), grids[1])
    got = np.concatenate([_np(out["det"].embeddings[0]), _np(out["seg"].embeddings[0]), _np(f_out[0]).reshape(-1, 4)])
    want = np.concatenate([dq, sq, fo.reshape(-1, 4)])
    res.append(_close("mamba decoder L=2 replay", got, want, 1e-6))
    return res


# heads_losses -----------------------------------------------------------------

def _boxes_gt():
    # rows [x, y, l, w, yaw, height, cls] on a 4x4 grid with 1 m cells, extent 2 m
    return [np.array([[-1.3, 0.4, 2.0, 1.0, 0.3, 1.0, 0], [0.6, -0.7, 1.5, 0.8, -1.1, 1.0, 1]]),
            np.array([[0.2, 1.1, 1.2, 0.6, 2.0, 1.5, 1]])]


def grad_detection() -> GradCheckReport:
    from ..heads import DetectionHead
    from ..losses import LossWeights, detection_loss
    from ..query_init import TaskQuerySet
    head = _randomize(DetectionHead(4, 2, 1.0, 2.0), 100, 0.4)
    q = _randn(2, 3, 4, seed=101)
    pos = torch.tensor([[[0, 1], [2, 0], [3, 3]], [[1, 2], [0, 0], [2, 3]]])
    gts = _boxes_gt()

    def fn():
        pred = head(TaskQuerySet("det", q, pos, q))
        return detection_loss(pred, gts, LossWeights(), 1.0, 2.0)["det"]
    return check_gradients("detection_head + detection_loss", fn, {**module_tensors(head), "queries": q})


def grad_segmentation() -> GradCheckReport:
    from ..heads import segmentation_head
    from ..losses import segmentation_loss
    from ..query_init import TaskQuerySet
    q, f = _randn(1, 4, 3, seed=102, scale=0.7), _randn(1, 4, 3, 3, seed=103, scale=0.7)
    masks = torch.from_numpy(np.random.default_rng(104).random((1, 4, 3, 2)) < 0.5)
    pos = torch.zeros(1, 4, 2, dtype=torch.long)

    def fn():
        return segmentation_loss(segmentation_head(TaskQuerySet("seg", q, pos, q), f, 2), masks)
    return check_gradients("segmentation_head + segmentation_loss", fn, {"queries": q, "f_seg": f})


def _occ_sets(c: int, seed: int):
    from ..query_init import TaskQuerySet
    grid = (2, 2, 2)
    coords = np.array(list(itertools.product(range(2), range(2), range(2))))
    definite_mask = np.array([1, 0, 1, 1, 0, 0, 1, 0], bool)
    dpos = torch.from_numpy(coords[definite_mask])[None]
    upos = torch.from_numpy(coords[~definite_mask])[None]
    de, ue = _randn(1, 4, c, seed=seed), _randn(1, 4, c, seed=seed + 1)
    mk = lambda e, p, tag: TaskQuerySet(tag, e, p, e, valid=torch.ones(1, 4, dtype=torch.bool))  # noqa: E731
    return grid, de, ue, lambda: (mk(de, dpos, "occ-definite"), mk(ue, upos, "occ-uncertain"))


def _grad_occupancy(variant: str, seed: int) -> GradCheckReport:
    from ..heads import OccupancyHead
    from ..losses import occupancy_loss
    grid, de, ue, sets = _occ_sets(4, seed)
    head = _randomize(OccupancyHead(4, 2, grid, (4, 4, 4), variant, attn_dim=3, state_dim=2), seed + 2, 0.4)
    if variant == "mamba":
        with torch.no_grad():
            head.ssm.A_log.uniform_(-0.5, 1.0, generator=_gen(seed + 3))
            head.refine_out[0].weight.add_(1.0)
    labels = torch.from_numpy(np.random.default_rng(seed + 4).integers(0, 3, (1, 4, 4, 4)))

    def fn():
        return occupancy_loss(head(*sets()), labels, 2)
    return check_gradients(f"occupancy_head[{variant}] + occupancy_loss", fn,
                           {**module_tensors(head), "definite": de, "uncertain": ue})


def grad_occupancy_transformer() -> GradCheckReport:
    return _grad_occupancy("transformer", 110)


def grad_occupancy_mamba() -> GradCheckReport:
    return _grad_occupancy("mamba", 120)


def grad_focal_losses() -> GradCheckReport:
    from ..losses import focal_loss, focal_loss_with_logits, heatmap_focal_loss
    logits = _randn(2, 3, 3, 2, seed=130)
    y = torch.from_numpy(np.random.default_rng(131).random((2, 3, 3, 2)) < 0.3)
    heat = torch.from_numpy(np.random.default_rng(132).random((2, 3, 3, 2)) * 0.9)
    heat[0, 1, 1, 0] = 1.0
    heat[1, 2, 0, 1] = 1.0

    def fn():
        return (focal_loss(torch.sigmoid(logits), y) + focal_loss_with_logits(logits, y)
                + heatmap_focal_loss(logits, heat))
    return check_gradients("focal losses + heatmap_focal_loss", fn, {"logits": logits})


def oracle_heads_losses() -> list[CheckResult]:
    from ..heads import DetectionHead, OccupancyHead, segmentation_head, trilinear_upsample
    from ..losses import (focal_loss, hungarian_match, occupancy_class_weights, occupancy_loss,
                          segmentation_loss, total_loss, LossWeights)
    from ..query_init import TaskQuerySet
    res = []
    rng = np.random.default_rng(140)
    ok = True
    for n_q, n_gt in [(2, 2), (4, 3), (6, 6), (6, 6), (7, 5)]:
        cost = rng.random((n_q, n_gt))
        rows, cols = hungarian_match(cost)
        perm, best = O.exhaustive_assignment(cost)
        assigned = [None] * n_gt
        for r, c in zip(rows, cols):
            assigned[c] = int(r)
        ok &= assigned == perm
    res.append(_exact("hungarian vs exhaustive permutations", ok))
    perm, _ = O.exhaustive_assignment(np.ones((3, 3)))
    res.append(_exact("identical costs -> lexicographic first", perm == [0, 1, 2]))

    vals = torch.tensor([0.5, 0.3, 0.9], dtype=torch.float64)
    got = [float(focal_loss(vals[i:i + 1], torch.ones(1))) for i in range(3)]
    got += [float(focal_loss(vals[i:i + 1], torch.zeros(1))) for i in range(3)]
    want = [O.focal_closed_form(float(v), 1) for v in vals] + [O.focal_closed_form(float(v), 0) for v in vals]
    res.append(_close("focal closed form", got, want, 1e-7))
    res.append(_close("focal p=0.5 y=1 value", got[0], 0.25 * 0.25 * np.log(2.0), 1e-7))
    num = finite_diff_grad(lambda x: O.focal_closed_form(float(x[0]), 1), np.array([0.3]))
    res.append(_close("focal derivative p=0.3", num[0], O.focal_derivative(0.3), 1e-7))

    logits = rng.standard_normal((1, 4, 4, 2))
    masks = rng.random((1, 4, 4, 2)) < 0.4
    got = float(segmentation_loss(torch.from_numpy(logits), torch.from_numpy(masks)))
    res.append(_close("segmentation loss 4x4", got, O.focal_mean_oracle(logits, masks), 1e-7))
    got = float(segmentation_loss(torch.zeros(1, 2, 2, 1, dtype=torch.float64), torch.zeros(1, 2, 2, 1)))
    res.append(_close("seg loss zero logits", got, -0.75 * 0.25 * np.log(0.5), 1e-7))

    logits = rng.standard_normal((1, 2, 2, 2, 4))
    labels = rng.integers(0, 4, (1, 2, 2, 2))
    got = float(occupancy_loss(torch.from_numpy(logits), torch.from_numpy(labels), 3))
    weights = O.class_weight_oracle(labels, 3)
    res.append(_close("occupancy class weights", occupancy_class_weights(torch.from_numpy(labels), 3,
                                                                         torch.float64), weights, 1e-12))
    res.append(_close("occupancy CE per-voxel", got, O.weighted_ce_oracle(logits, labels, weights), 1e-7))
    got = float(occupancy_loss(torch.zeros(1, 2, 2, 2, 3, dtype=torch.float64),
                               torch.full((1, 2, 2, 2), 2), 2))
    res.append(_close("occupancy CE uniform = ln 3", got, np.log(3.0), 1e-7))
    res.append(_close("total loss arithmetic",
                      float(total_loss(1.0, 2.0, 3.0, LossWeights(lambda_det=0.5, lambda_seg=1, lambda_occ=2))),
                      8.5, 1e-12))

    head = _randomize(DetectionHead(4, 3, 0.5, 8.0), 141, 0.5)
    q = _randn(1, 5, 4, seed=142)
    pos = torch.tensor([[[0, 0], [31, 31], [10, 3], [5, 20], [16, 16]]])
    with torch.no_grad():
        out = head(TaskQuerySet("det", q, pos, q))
        boxes, _, _ = out.decode()
    want = [O.decode_box_oracle(_np(pos[0, i]), _np(out.offset[0, i]), _np(out.log_size[0, i]),
                                _np(out.yaw_sc[0, i]), 0.5, 8.0) for i in range(5)]
    res.append(_close("detection decode per query", boxes[0], want, 1e-9))

    f, qs = _randn(1, 5, 3, 4, seed=143), _randn(1, 6, 4, seed=144)
    for s in (1, 2):
        with torch.no_grad():
            got = segmentation_head(TaskQuerySet("seg", qs[:, :3 * s], torch.zeros(1, 3 * s, 2, dtype=torch.long),
                                                 qs[:, :3 * s]), f, s)[0]
        res.append(_close(f"segmentation band dot product S={s}", got,
                          O.band_segmentation_oracle(_np(f[0]), _np(qs[0, :3 * s]), s), 1e-9))

    vol = _randn(1, 3, 2, 4, 2, seed=145)
    with torch.no_grad():
        got = trilinear_upsample(vol.permute(0, 4, 1, 2, 3), (6, 4, 16)).permute(0, 2, 3, 4, 1)[0]
    res.append(_close("trilinear upsample x2,x2,x4", got, O.trilinear_upsample_oracle(_np(vol[0]), (6, 4, 16)),
                      1e-9))

    grid, de, ue, sets = _occ_sets(4, 146)
    head = _randomize(OccupancyHead(4, 2, grid, (4, 4, 8), "transformer", attn_dim=3), 147, 0.5)
    with torch.no_grad():
        d, u = sets()
        got = head.attend_uncertain(d, u).embeddings[0]
    dn, un = _np(de[0]), _np(ue[0])
    qp = np.stack([O.linear(x, _np(head.q_proj.weight), _np(head.q_proj.bias)) for x in un])
    kp = np.stack([O.linear(x, _np(head.k_proj.weight), _np(head.k_proj.bias)) for x in dn])
    vp = np.stack([O.linear(x, _np(head.v_proj.weight), _np(head.v_proj.bias)) for x in dn])
    att = O.dense_softmax_attention_oracle(qp, kp, vp)
    want = un + np.stack([O.linear(a, _np(head.o_proj.weight), _np(head.o_proj.bias)) for a in att])
    res.append(_close("uncertain->definite attention", got, want, 1e-9))
    return res


# scene_synth / harness ----------------------------------------------------------

def oracle_scene() -> list[CheckResult]:
    from ..config import SceneSpec
    from ..scene_synth import Box, SceneSample, generate_scene, heatmap_sigma, box_center_cell, make_targets
    res = []
    spec = SceneSpec()
    ok = True
    for seed in range(3):
        s = generate_scene(spec.with_seed(seed))
        f = spec.out_h // spec.grid_h, spec.out_w // spec.grid_w, spec.out_z // spec.grid_z
        for i, j, k in itertools.product(range(spec.grid_h), range(spec.grid_w), range(spec.grid_z)):
            if s.lidar_mask[i, j, k]:
                block = s.occ_labels[i * f[0]:(i + 1) * f[0], j * f[1]:(j + 1) * f[1], k * f[2]:(k + 1) * f[2]]
                ok &= bool((block != spec.empty_class).any())
    res.append(_exact("lidar mask -> non-empty occ (exhaustive)", ok))

    boxes = [Box((0.3, 0.2), (4.0, 1.8), 0.0, 0, 1.5), Box((1.6, 0.9), (4.0, 1.8), 0.5, 0, 1.5),
             Box((-4.0, -4.0), (0.8, 0.8), 0.0, 1, 1.0)]
    sample = SceneSample(boxes, np.zeros((spec.n_seg_classes, spec.out_h, spec.out_w), bool),
                         np.full((spec.out_h, spec.out_w, spec.out_z), spec.empty_class),
                         np.zeros((spec.grid_h, spec.grid_w, spec.grid_z), bool), 0)
    heat = make_targets(sample, spec).center_heatmaps
    err = 0.0
    for cls in range(spec.n_det_classes):
        mine = [b for b in boxes if b.cls == cls]
        want = O.splat_oracle((spec.grid_h, spec.grid_w), [box_center_cell(b, spec) for b in mine],
                              [heatmap_sigma(b, spec) for b in mine])
        err = max(err, float(np.abs(heat[..., cls] - want).max()))
    res.append(CheckResult("heatmap splats vs brute force", err, 1e-6, err <= 1e-6))
    return res


def oracle_metrics() -> list[CheckResult]:
    from ..metrics import detection_map
    gt = [np.array([[1.0, 1.0, 2.0, 1.0, 0.0, 1.0, 0]])]
    pred = [{"xy": np.array([[1.7, 1.0]]), "scores": np.array([0.9]), "labels": np.array([0])}]
    got = detection_map(pred, gt, 1)["mAP"]
    return [_close("mAP one box at 0.7 m", got, 2.0 / 3.0, 1e-12)]


GRADIENT_CHECKS: dict[str, list[Callable[[], GradCheckReport]]] = {
    "fusion_mafi": [grad_mafi],
    "query_init": [grad_confidence, grad_position_mlp],
    "decoder": [grad_deformable_self, grad_cross_attention, grad_vss2d, grad_tcs, grad_index_update],
    "heads_losses": [grad_detection, grad_segmentation, grad_occupancy_transformer, grad_occupancy_mamba,
                     grad_focal_losses],
}

ORACLE_CHECKS: dict[str, list[Callable[[], list[CheckResult]]]] = {
    "scene_synth": [oracle_scene],
    "fusion_mafi": [oracle_mafi],
    "query_init": [oracle_query_init],
    "decoder": [oracle_decoder],
    "heads_losses": [oracle_heads_losses],
    "harness": [oracle_metrics],
}

MODULES = ("scene_synth", "fusion_mafi", "query_init", "decoder", "heads_losses", "harness", "verify")


def run_checks(module: str | None = None, kind: str = "all") -> list:
    """Run the registered checks for one module (or all); returns report objects.

    ``kind`` is ``"grad"``, ``"oracle"`` or ``"all"``.
    """
    if module is not None and module not in MODULES:
        from ..config import ConfigError
        raise ConfigError(f"unknown module {module!r}; choose from {MODULES}")
    reports: list = []
    for mod in MODULES:
        if module not in (None, mod):
            continue
        if kind in ("all", "grad"):
            reports.extend(check() for check in GRADIENT_CHECKS.get(mod, []))
        if kind in ("all", "oracle"):
            for check in ORACLE_CHECKS.get(mod, []):
                reports.extend(check())
    if module in (None, "verify") and kind in ("all", "oracle"):
        reports.extend(_self_checks())
    return reports


def _self_checks() -> list[CheckResult]:
    g = finite_diff_grad(lambda x: float((x ** 2).sum()), np.array([1.0, 2.0]))
    c = finite_diff_grad(lambda x: 3.0, np.array([0.4, -1.0]))
    return [_close("finite diff of sum of squares", g, [2.0, 4.0], 1e-8),
            _close("finite diff of constant", c, [0.0, 0.0], 0.0)]
