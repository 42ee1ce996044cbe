"""Loop-based reference implementations.

Everything here works on float64 numpy arrays (or Python scalars) and uses
explicit loops for the operation under test. Nothing is imported from the
model modules; parameters are passed in as plain arrays.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def softplus(x: float) -> float:
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``weight @ x + bias`` for one vector, as explicit dot products."""
    out = np.zeros(weight.shape[0])
    for o in range(weight.shape[0]):
        acc = 0.0 if bias is None else float(bias[o])
        for i in range(weight.shape[1]):
            acc += float(weight[o, i]) * float(x[i])
        out[o] = acc
    return out


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = sum(float(v) for v in x) / len(x)
    var = sum((float(v) - mean) ** 2 for v in x) / len(x)
    return np.array([(float(v) - mean) / math.sqrt(var + eps) * gamma[i] + beta[i] for i, v in enumerate(x)])


# fusion ---------------------------------------------------------------------

def naive_conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Zero-padded stride-1 3x3 convolution; x (H, W, Cin), weight (Cout, Cin, 3, 3)."""
    h, w, cin = x.shape
    cout = weight.shape[0]
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = float(bias[o])
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            for c in range(cin):
                                acc += float(weight[o, c, di, dj]) * float(x[ii, jj, c])
                out[i, j, o] = acc
    return out


def gate_oracle(f: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    h, w, _ = f.shape
    out = np.zeros((h, w, weight.shape[0]))
    for i in range(h):
        for j in range(w):
            out[i, j] = [sigmoid(v) for v in linear(f[i, j], weight, bias)]
    return out


def mafi_oracle(f_lidar, f_cam, conv_w, conv_b, gl_w, gl_b, gc_w, gc_b) -> np.ndarray:
    f_init = naive_conv3x3(np.concatenate([f_lidar, f_cam], axis=-1), conv_w, conv_b)
    g_l = gate_oracle(f_lidar, gl_w, gl_b)
    g_c = gate_oracle(f_cam, gc_w, gc_b)
    out = np.zeros_like(f_init)
    for idx in np.ndindex(*f_init.shape):
        out[idx] = g_l[idx] * f_init[idx] + g_c[idx] * f_init[idx]
    return out


# query initialization -------------------------------------------------------

def mlp2_oracle(x, w1, b1, w2, b2) -> np.ndarray:
    hidden = [gelu(v) for v in linear(np.asarray(x, float), w1, b1)]
    return linear(np.array(hidden), w2, b2)


def confidence_oracle(f: np.ndarray, cat: np.ndarray) -> np.ndarray:
    h, w, c = f.shape
    out = np.zeros((h, w, cat.shape[0]))
    for i in range(h):
        for j in range(w):
            for k in range(cat.shape[0]):
                out[i, j, k] = sigmoid(sum(float(f[i, j, ch]) * float(cat[k, ch]) for ch in range(c)))
    return out


def exhaustive_topk(conf: np.ndarray, k: int) -> list[tuple[int, int, int]]:
    """(h, w, class) of the k largest entries; ties go to the smaller row-major flat index."""
    entries = []
    for idx in itertools.product(*(range(n) for n in conf.shape)):
        flat = 0
        for i, n in zip(idx, conf.shape):
            flat = flat * n + i
        entries.append((-float(conf[idx]), flat, idx))
    entries.sort()
    return [e[2] for e in entries[:k]]


def band_argmax_oracle(conf: np.ndarray, s: int) -> list[list[tuple[int, int]]]:
    """Per band (forward-axis rows, last band takes the remainder), per class: argmax cell."""
    h, w, k = conf.shape
    base = h // s
    out = []
    for b in range(s):
        lo, hi = b * base, (h if b == s - 1 else (b + 1) * base)
        row = []
        for c in range(k):
            best, best_cell = -math.inf, None
            for i in range(lo, hi):
                for j in range(w):
                    if conf[i, j, c] > best:  # strict: first maximum wins
                        best, best_cell = conf[i, j, c], (i, j)
            row.append(best_cell)
        out.append(row)
    return out


def exhaustive_partition(mask: np.ndarray) -> tuple[list, list]:
    definite, uncertain = [], []
    for idx in itertools.product(*(range(n) for n in mask.shape)):
        (definite if mask[idx] else uncertain).append(tuple(idx))
    return definite, uncertain


def per_voxel_scatter(entries, grid, channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Volume (H, W, Z, C) and hit counts from ``(position, embedding)`` pairs."""
    vol = np.zeros((*grid, channels))
    hits = np.zeros(grid, dtype=int)
    for pos, emb in entries:
        i, j, k = (int(v) for v in pos)
        vol[i, j, k] = emb
        hits[i, j, k] += 1
    return vol, hits


def per_voxel_scatter_check(volume: np.ndarray, entries) -> tuple[bool, float]:
    """Compare a scattered volume with the per-voxel loop; also require one hit per voxel."""
    ref, hits = per_voxel_scatter(entries, volume.shape[:3], volume.shape[3])
    return bool((hits == 1).all()), float(np.abs(ref - volume).max())


# decoder ----------------------------------------------------------------------

def naive_ssm_recurrence(u, delta, A, B, C, D, direction: str = "forward") -> np.ndarray:
    """Zero-order-hold diagonal SSM, one explicit step at a time.

    Shapes: u, delta (L, Dm); A (Dm, N); B, C (L, N); D (Dm,).
    ``direction="reverse"`` scans from the last element to the first.
    """
    length, dm = u.shape
    ns = A.shape[1]
    steps = range(length) if direction == "forward" else range(length - 1, -1, -1)
    state = [[0.0] * ns for _ in range(dm)]
    y = np.zeros((length, dm))
    for t in steps:
        for d in range(dm):
            acc = float(D[d]) * float(u[t, d])
            for n in range(ns):
                decay = math.exp(float(delta[t, d]) * float(A[d, n]))
                state[d][n] = decay * state[d][n] + float(delta[t, d]) * float(B[t, n]) * float(u[t, d])
                acc += float(C[t, n]) * state[d][n]
            y[t, d] = acc
    return y


def ssm_oracle(x: np.ndarray, p: dict, direction: str = "forward") -> np.ndarray:
    """Input-dependent projections followed by the naive recurrence; x (L, C)."""
    length = x.shape[0]
    delta = np.array([[softplus(v) for v in linear(x[t], p["dt_w"], p["dt_b"])] for t in range(length)])
    B = np.array([linear(x[t], p["b_w"]) for t in range(length)])
    C = np.array([linear(x[t], p["c_w"]) for t in range(length)])
    A = -np.exp(p["A_log"])
    return naive_ssm_recurrence(x, delta, A, B, C, p["D"], direction)


def vss2d_oracle(f: np.ndarray, p: dict) -> np.ndarray:
    """Four directional scans per row/column, summed left, right, top, bottom; merge; residual."""
    h, w, c = f.shape
    total = np.zeros((h, w, c))
    for i in range(h):
        total[i] += ssm_oracle(f[i], p, "forward")       # left -> right
    for i in range(h):
        total[i] += ssm_oracle(f[i], p, "reverse")       # right -> left
    for j in range(w):
        total[:, j] += ssm_oracle(f[:, j], p, "forward")  # top -> bottom
    for j in range(w):
        total[:, j] += ssm_oracle(f[:, j], p, "reverse")  # bottom -> top
    out = np.zeros_like(f)
    for i in range(h):
        for j in range(w):
            normed = layer_norm(total[i, j], p["ln_w"], p["ln_b"])
            out[i, j] = f[i, j] + linear(normed, p["merge_w"], p["merge_b"])
    return out


def bilinear_oracle(value: np.ndarray, y: float, x: float) -> np.ndarray:
    """Sample (H, W, C) at continuous (y, x) with cell centers at +0.5, zeros outside."""
    h, w, c = value.shape
    py, px = y - 0.5, x - 0.5
    y0, x0 = math.floor(py), math.floor(px)
    out = np.zeros(c)
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            wy = (py - y0) if dy else (1.0 - (py - y0))
            wx = (px - x0) if dx else (1.0 - (px - x0))
            if 0 <= yy < h and 0 <= xx < w:
                for ch in range(c):
                    out[ch] += wy * wx * value[yy, xx, ch]
    return out


def dense_attention_oracle(query: np.ndarray, ref: np.ndarray, value_map: np.ndarray, p: dict,
                           heads: int, points: int) -> np.ndarray:
    """Deformable attention by explicit enumeration of heads, points and bilinear corners.

    query (Q, C); ref (Q, 2) continuous (h, w); value_map (H, W, C).
    """
    nq, c = query.shape
    h, w, _ = value_map.shape
    ch = c // heads
    value = np.zeros((h, w, c))
    for i in range(h):
        for j in range(w):
            value[i, j] = linear(value_map[i, j], p["value_w"], p["value_b"])
    out = np.zeros((nq, c))
    for q in range(nq):
        off = linear(query[q], p["offset_w"], p["offset_b"])
        logits = linear(query[q], p["attn_w"], p["attn_b"])
        agg = np.zeros(c)
        for m in range(heads):
            row = [logits[m * points + k] for k in range(points)]
            top = max(row)
            expo = [math.exp(v - top) for v in row]
            norm = sum(expo)
            for k in range(points):
                base = (m * points + k) * 2
                sample = bilinear_oracle(value[:, :, m * ch:(m + 1) * ch],
                                         ref[q, 0] + off[base], ref[q, 1] + off[base + 1])
                agg[m * ch:(m + 1) * ch] += expo[k] / norm * sample
        out[q] = linear(agg, p["out_w"], p["out_b"])
    return out


def tcs_oracle(f: np.ndarray, branches: list[dict]) -> list[np.ndarray]:
    """Per task: W = lin2(gelu(lin1(f))) per cell; F_i = W * f."""
    h, w, _ = f.shape
    outs = []
    for br in branches:
        o = np.zeros_like(f)
        for i in range(h):
            for j in range(w):
                scale = mlp2_oracle(f[i, j], br["embed_w"], br["embed_b"], br["weight_w"], br["weight_b"])
                o[i, j] = scale * f[i, j]
        outs.append(o)
    return outs


def index_update_oracle(q: np.ndarray, positions: np.ndarray, f_task: np.ndarray) -> np.ndarray:
    out = np.array(q, dtype=float, copy=True)
    for n in range(len(q)):
        out[n] = out[n] + f_task[int(positions[n][0]), int(positions[n][1])]
    return out


def ffn_oracle(x: np.ndarray, p: dict) -> np.ndarray:
    return mlp2_oracle(x, p["fc1_w"], p["fc1_b"], p["fc2_w"], p["fc2_b"])


# heads and losses -------------------------------------------------------------

def exhaustive_assignment(cost: np.ndarray) -> tuple[list[int], float]:
    """Query index assigned to each gt column, minimizing total cost.

    Permutations are enumerated in lexicographic order and only a strictly
    smaller total replaces the incumbent, so ties keep the lexicographically
    first assignment.
    """
    n_q, n_gt = cost.shape
    best, best_perm = math.inf, None
    for perm in itertools.permutations(range(n_q), n_gt):
        total = sum(float(cost[perm[g], g]) for g in range(n_gt))
        if total < best:
            best, best_perm = total, list(perm)
    return best_perm, best


def focal_closed_form(p: float, y: int, alpha: float = 0.25, gamma: float = 2.0) -> float:
    if y == 1:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p ** gamma * math.log(1.0 - p)


def focal_derivative(p: float, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """d/dp of the positive focal term."""
    return -alpha * ((1.0 - p) ** gamma / p - gamma * (1.0 - p) ** (gamma - 1.0) * math.log(p))


def focal_mean_oracle(logits: np.ndarray, targets: np.ndarray, alpha=0.25, gamma=2.0) -> float:
    vals = [focal_closed_form(min(max(sigmoid(float(z)), 1e-7), 1 - 1e-7), int(t), alpha, gamma)
            for z, t in zip(np.ravel(logits), np.ravel(targets))]
    return sum(vals) / len(vals)


def weighted_ce_oracle(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> float:
    """Weighted mean of per-voxel ``-log softmax``; logits (..., K), labels (...)."""
    flat_l = logits.reshape(-1, logits.shape[-1])
    flat_y = labels.reshape(-1)
    num = den = 0.0
    for z, y in zip(flat_l, flat_y):
        top = max(float(v) for v in z)
        lse = top + math.log(sum(math.exp(float(v) - top) for v in z))
        num += weights[int(y)] * (lse - float(z[int(y)]))
        den += weights[int(y)]
    return num / den


def class_weight_oracle(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = [0] * (n_classes + 1)
    for v in np.ravel(labels):
        counts[int(v)] += 1
    total = sum(counts)
    weights = np.array([1.0 / math.sqrt(c / total) if c else 0.0 for c in counts])
    present = [weights[k] for k in range(n_classes) if counts[k]]
    if present:
        scale = sum(present) / len(present)
        for k in range(n_classes):
            weights[k] /= scale
    weights[n_classes] = 1.0
    return weights


def splat_oracle(shape, centers, sigmas) -> np.ndarray:
    """Per-cell maximum of Gaussians ``exp(-d^2 / (2 sigma^2))`` centered on integer cells."""
    out = np.zeros(shape)
    for i in range(shape[0]):
        for j in range(shape[1]):
            for (ci, cj), s in zip(centers, sigmas):
                out[i, j] = max(out[i, j], math.exp(-((i - ci) ** 2 + (j - cj) ** 2) / (2.0 * s * s)))
    return out


def decode_box_oracle(position, offset, log_size, sin_cos, cell_m: float, extent_m: float) -> list[float]:
    """[x, y, l, w, yaw] for one query."""
    cx = (position[0] + 0.5 + offset[0]) * cell_m - extent_m
    cy = (position[1] + 0.5 + offset[1]) * cell_m - extent_m
    norm = math.hypot(sin_cos[0], sin_cos[1])
    return [cx, cy, math.exp(log_size[0]), math.exp(log_size[1]),
            math.atan2(sin_cos[0] / norm, sin_cos[1] / norm)]


def band_segmentation_oracle(f_seg: np.ndarray, queries: np.ndarray, s: int) -> np.ndarray:
    """logit[h, w, k] = <f[h, w], q_(band(h), k)> with queries ordered band-major."""
    h, w, c = f_seg.shape
    k = len(queries) // s
    base = h // s
    out = np.zeros((h, w, k))
    for i in range(h):
        band = min(i // base, s - 1)
        for j in range(w):
            for cls in range(k):
                q = queries[band * k + cls]
                out[i, j, cls] = sum(float(f_seg[i, j, ch]) * float(q[ch]) for ch in range(c))
    return out


def trilinear_upsample_oracle(vol: np.ndarray, size) -> np.ndarray:
    """Half-pixel-centered trilinear resize of (H, W, Z, C), clamped at the borders."""
    src = vol.shape[:3]
    out = np.zeros((*size, vol.shape[3]))
    for idx in itertools.product(*(range(n) for n in size)):
        lo, frac = [], []
        for a in range(3):
            pos = max((idx[a] + 0.5) * src[a] / size[a] - 0.5, 0.0)
            i0 = min(int(math.floor(pos)), src[a] - 1)
            lo.append(i0)
            frac.append(pos - i0 if i0 < src[a] - 1 else 0.0)
        acc = np.zeros(vol.shape[3])
        for corner in itertools.product((0, 1), repeat=3):
            wgt = 1.0
            pick = []
            for a, d in enumerate(corner):
                wgt *= frac[a] if d else 1.0 - frac[a]
                pick.append(min(lo[a] + d, src[a] - 1))
            acc += wgt * vol[pick[0], pick[1], pick[2]]
        out[idx] = acc
    return out


def dense_softmax_attention_oracle(q: np.ndarray, k: np.ndarray, v: np.ndarray, key_valid=None) -> np.ndarray:
    """Single-head scaled dot-product attention with an optional key mask."""
    nq, d = q.shape
    out = np.zeros((nq, v.shape[1]))
    for i in range(nq):
        scores = []
        for j in range(k.shape[0]):
            if key_valid is not None and not key_valid[j]:
                continue
            scores.append((j, sum(float(q[i, c]) * float(k[j, c]) for c in range(d)) / math.sqrt(d)))
        top = max(s for _, s in scores)
        expo = [(j, math.exp(s - top)) for j, s in scores]
        norm = sum(e for _, e in expo)
        for j, e in expo:
            out[i] += e / norm * v[j]
    return out
