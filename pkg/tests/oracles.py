"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops or the math module so it
shares no code path with the library under test.
"""

from __future__ import annotations

import math
from collections import Counter

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0, groups=1):
    """Seven-loop cross-correlation with zero padding."""
    B, C, H, W = x.shape
    O, Cg, k, _ = w.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    og = O // groups
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            g = o // og
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(Cg):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += float(x[n, g * Cg + c, y, xx]) * float(w[o, c, di, dj])
                    out[n, o, i, j] = acc
    return out


def bilinear_loops(x, factor):
    """Half-pixel-centred bilinear resize by an integer factor, edges clamped."""
    B, C, H, W = x.shape
    out = np.zeros((B, C, H * factor, W * factor))

    def coord(o, n):
        src = max((o + 0.5) / factor - 0.5, 0.0)
        lo = min(int(math.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        return lo, hi, src - lo

    for oy in range(H * factor):
        y0, y1, ly = coord(oy, H)
        for ox in range(W * factor):
            x0, x1, lx = coord(ox, W)
            for n in range(B):
                for c in range(C):
                    top = (1 - lx) * x[n, c, y0, x0] + lx * x[n, c, y0, x1]
                    bot = (1 - lx) * x[n, c, y1, x0] + lx * x[n, c, y1, x1]
                    out[n, c, oy, ox] = (1 - ly) * top + ly * bot
    return out


def sigmoid_scalar(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def asm_score_oracle(feature, psi1_w, psi1_b, psi2_w, psi2_b, w, b):
    """Per-sample score of one modality by scalar arithmetic: pool, project, dot, sigmoid."""
    B, C, H, W = feature.shape
    r = psi1_w.shape[0]
    m = psi2_w.shape[0]
    scores = []
    for n in range(B):
        pooled = [sum(float(v) for v in feature[n, c].ravel()) / (H * W) for c in range(C)]
        hidden = [max(0.0, sum(psi1_w[j, c, 0, 0] * pooled[c] for c in range(C)) + psi1_b[j]) for j in range(r)]
        proj = [sum(psi2_w[q, j, 0, 0] * hidden[j] for j in range(r)) + psi2_b[q] for q in range(m)]
        z = sum(w[0, q, 0, 0] * proj[q] for q in range(m)) + b[0]
        scores.append(sigmoid_scalar(float(z)))
    return scores


def argmin_lowest(values):
    best = 0
    for i, v in enumerate(values):
        if v < values[best]:
            best = i
    return best


def channel_gate_oracle(f, w1, b1, w2, b2):
    B, C, H, W = f.shape
    r = w1.shape[0]
    out = np.zeros((B, C, 1, 1))
    for n in range(B):
        pooled = [f[n, c].mean() for c in range(C)]
        hidden = [max(0.0, sum(w1[j, c, 0, 0] * pooled[c] for c in range(C)) + b1[j]) for j in range(r)]
        for c in range(C):
            out[n, c, 0, 0] = sigmoid_scalar(float(sum(w2[c, j, 0, 0] * hidden[j] for j in range(r)) + b2[c]))
    return out


def spatial_gate_oracle(f, w, b):
    B, C, H, W = f.shape
    out = np.zeros((B, 1, H, W))
    for n in range(B):
        mean = np.array([[sum(f[n, c, y, x] for c in range(C)) / C for x in range(W)] for y in range(H)])
        mx = np.array([[max(f[n, c, y, x] for c in range(C)) for x in range(W)] for y in range(H)])
        planes = (mean, mx)
        for y in range(H):
            for x in range(W):
                acc = float(b[0])
                for p in range(2):
                    for di in range(3):
                        for dj in range(3):
                            yy, xx = y + di - 1, x + dj - 1
                            if 0 <= yy < H and 0 <= xx < W:
                                acc += w[0, p, di, dj] * planes[p][yy, xx]
                out[n, 0, y, x] = sigmoid_scalar(acc)
    return out


def compensate_oracle(features, dropped, wc, ws):
    """Elementwise f_i + 0.5 sum_j Wc_j f_j + 0.5 sum_j Ws_j f_j over survivors.

    ``wc[j]`` is [B, C, 1, 1] and ``ws[j]`` is [B, 1, H, W].
    """
    out = {}
    for i, fi in features.items():
        if i in dropped:
            continue
        B, C, H, W = fi.shape
        res = np.array(fi, dtype=np.float64)
        for j in dropped:
            fj = features[j]
            for n in range(B):
                for c in range(C):
                    for y in range(H):
                        for x in range(W):
                            res[n, c, y, x] += 0.5 * wc[j][n, c, 0, 0] * fj[n, c, y, x]
                            res[n, c, y, x] += 0.5 * ws[j][n, 0, y, x] * fj[n, c, y, x]
        out[i] = res
    return out


def vote_oracle(candidates, threshold, ignore=255):
    """Brute-force mode count with ties mapped to the ignore label."""
    counts = Counter(candidates)
    top = max(counts.values())
    modes = [c for c, n in counts.items() if n == top]
    if len(modes) != 1 or top < threshold:
        return ignore
    return modes[0]


def power_set(items):
    """Non-empty subsets in binary-counting order, built by recursion-free bit tests."""
    out = []
    n = len(items)
    for mask in range(1, 1 << n):
        out.append(tuple(items[i] for i in range(n) if (mask >> i) & 1))
    return out


def miou_oracle(pred, truth, num_classes, ignore=255):
    """Per-class IoU by counting sets of pixel coordinates."""
    ious = []
    p = pred.ravel()
    t = truth.ravel()
    valid = [k for k in range(len(p)) if p[k] != ignore and t[k] != ignore]
    for c in range(num_classes):
        pc = {k for k in valid if p[k] == c}
        tc = {k for k in valid if t[k] == c}
        union = pc | tc
        ious.append(len(pc & tc) / len(union) if union else float("nan"))
    good = [v for v in ious if not math.isnan(v)]
    return ious, (sum(good) / len(good) if good else float("nan"))


def central_difference(fn, arrays, h=1e-4, indices=None):
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``arrays`` (mutated in place)."""
    grads = []
    for a_i, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        pick = range(flat.size) if indices is None else indices[a_i]
        for k in pick:
            orig = flat[k]
            flat[k] = orig + h
            up = fn()
            flat[k] = orig - h
            down = fn()
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_features(rng, names, shape, low=-2.0, high=2.0):
    """Dict of float64 tensors with entries uniform in [low, high]."""
    from modalfuse.tensor import Tensor

    return {n: Tensor(rng.uniform(low, high, size=shape), dtype=np.float64) for n in names}
