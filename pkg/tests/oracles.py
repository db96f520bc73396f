"""Independent brute-force reference implementations.

These are deliberately naive loops over pixels, written from the measure and
operator definitions without sharing code with the package.  Tests compare
the vectorised implementations against them and freeze selected values.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------- tensor ops

def conv2d_direct(x, w, b=None, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.result_type(x, w))
    for bn in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[oc]
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy = y * stride - padding + i * dilation
                                xc = xx * stride - padding + j * dilation
                                if 0 <= yy < h and 0 <= xc < wd:
                                    acc += x[bn, ic, yy, xc] * w[oc, ic, i, j]
                    out[bn, oc, y, xx] = acc
    return out


def conv_mult_count(h, w, c_in, c_out, k, padding, dilation=1):
    """Multiply-accumulates executed by a naive loop that also visits padded taps."""
    ho = h + 2 * padding - dilation * (k - 1)
    wo = w + 2 * padding - dilation * (k - 1)
    count = 0
    for _ in range(ho):
        for _ in range(wo):
            for _ in range(c_out):
                for _ in range(c_in):
                    for _ in range(k * k):
                        count += 1
    return count


def maxpool2_direct(x):
    """2x2/2 ceil-mode max pool plus the flat index (within the input plane) of each winner."""
    n, c, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    best, where = -math.inf, -1
                    for di in range(2):
                        for dj in range(2):
                            y, xx = 2 * i + di, 2 * j + dj
                            if y < h and xx < w and x[a, b, y, xx] > best:
                                best, where = x[a, b, y, xx], y * w + xx
                    out[a, b, i, j] = best
                    arg[a, b, i, j] = where
    return out, arg


def bilinear_direct(img, out_h, out_w):
    """Half-pixel-centre bilinear resize of an H x W array with edge clamping."""
    h, w = img.shape

    def src(i, n_in, n_out):
        s = (i + 0.5) * n_in / n_out - 0.5
        s = min(max(s, 0.0), n_in - 1)
        lo = int(math.floor(s))
        hi = min(lo + 1, n_in - 1)
        return lo, hi, s - lo

    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y0, y1, fy = src(i, h, out_h)
        for j in range(out_w):
            x0, x1, fx = src(j, w, out_w)
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def bce_oracle(pred, target, reduction="mean", clamp=1e-7):
    """Pixel-by-pixel binary cross-entropy with the probability clamp."""
    total = 0.0
    flat_p, flat_t = np.ravel(pred), np.ravel(target)
    for p, t in zip(flat_p, flat_t):
        p = min(max(float(p), clamp), 1 - clamp)
        total -= t * math.log(p) + (1 - t) * math.log(1 - p)
    return total / len(flat_p) if reduction == "mean" else total


# ---------------------------------------------------------------- metrics

def pr_oracle(pairs):
    """Dataset-mean (precision[256], recall[256]) by recounting every threshold."""
    precisions, recalls = [], []
    for pred, gt in pairs:
        h, w = gt.shape
        ps, rs = [], []
        for t in range(256):
            tp = fp = fn = 0
            for i in range(h):
                for j in range(w):
                    q = math.floor(pred[i, j] * 255 + 0.5)
                    on = q >= t
                    g = gt[i, j] == 1
                    tp += on and g
                    fp += on and not g
                    fn += (not on) and g
            ps.append(1.0 if tp + fp == 0 else tp / (tp + fp))
            rs.append(1.0 if tp + fn == 0 else tp / (tp + fn))
        precisions.append(ps)
        recalls.append(rs)
    return np.mean(precisions, axis=0), np.mean(recalls, axis=0)


def f_oracle(p, r, beta2):
    den = beta2 * p + r
    return 0.0 if den == 0 else (1 + beta2) * p * r / den


def max_f_oracle(precision, recall, beta2=0.3):
    return max(f_oracle(p, r, beta2) for p, r in zip(precision, recall))


def mae_oracle(pred, gt):
    h, w = gt.shape
    return sum(abs(pred[i, j] - gt[i, j]) for i in range(h) for j in range(w)) / (h * w)


def boundary_oracle(mask):
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            interior = True
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    y, x = i + di, j + dj
                    if not (0 <= y < h and 0 <= x < w) or not mask[y, x]:
                        interior = False
            out[i, j] = not interior
    return out


def relax_f_oracle(pred, gt, rho=3, beta2=0.3):
    bp = boundary_oracle(pred >= 0.5)
    bg = boundary_oracle(gt.astype(bool))
    pp = list(zip(*np.nonzero(bp)))
    gp = list(zip(*np.nonzero(bg)))
    if not pp and not gp:
        return 1.0

    def hit(src, dst):
        return sum(any((a - c) ** 2 + (b - d) ** 2 <= rho * rho for c, d in dst) for a, b in src)

    precision = 1.0 if not pp else hit(pp, gp) / len(pp)
    recall = 1.0 if not gp else hit(gp, pp) / len(gp)
    return f_oracle(precision, recall, beta2)


def weighted_f_oracle(pred, gt, beta2=1.0):
    h, w = gt.shape
    G = gt.astype(bool)
    if not G.any():
        return float("nan")
    E = np.abs(pred - G)
    fg = [(i, j) for i in range(h) for j in range(w) if G[i, j]]  # row-major order
    Et = np.zeros((h, w))
    dist = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if G[i, j]:
                Et[i, j] = E[i, j]
                continue
            best, bi, bj = math.inf, -1, -1
            for a, b in fg:
                d = (a - i) ** 2 + (b - j) ** 2
                if d < best:
                    best, bi, bj = d, a, b
            Et[i, j] = E[bi, bj]
            dist[i, j] = math.sqrt(best)
    sigma, size = 5.0, 7
    half = size // 2
    K = np.zeros((size, size))
    for a in range(size):
        for b in range(size):
            K[a, b] = math.exp(-((a - half) ** 2 + (b - half) ** 2) / (2 * sigma ** 2))
    K /= K.sum()
    EA = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(size):
                for b in range(size):
                    y = min(max(i + a - half, 0), h - 1)
                    x = min(max(j + b - half, 0), w - 1)
                    acc += K[a, b] * Et[y, x]
            EA[i, j] = acc
    Ew = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            if G[i, j]:
                Ew[i, j] = EA[i, j] if EA[i, j] < E[i, j] else E[i, j]
            else:
                Ew[i, j] = E[i, j] * (2 - math.exp(math.log(0.5) / 5 * dist[i, j]))
    tpw = sum(1 - Ew[i, j] for i, j in fg)
    fpw = sum(Ew[i, j] for i in range(h) for j in range(w) if not G[i, j])
    recall = 1 - sum(Ew[i, j] for i, j in fg) / len(fg)
    precision = 0.0 if tpw + fpw == 0 else tpw / (tpw + fpw)
    return f_oracle(precision, recall, beta2)


def _mean_std(values):
    n = len(values)
    m = sum(values) / n
    if n < 2 or len(set(values)) == 1:
        return m, 0.0
    return m, math.sqrt(sum((v - m) ** 2 for v in values) / (n - 1))


def _cov_oracle(a, b):
    n = len(a)
    if n < 2 or len(set(a)) == 1 or len(set(b)) == 1:
        return 0.0
    ma, mb = sum(a) / n, sum(b) / n
    return sum((u - ma) * (v - mb) for u, v in zip(a, b)) / (n - 1)


def _ssim_oracle(p, g):
    vals_p = list(p.ravel())
    vals_g = list(g.ravel())
    n = len(vals_p)
    mx, my = sum(vals_p) / n, sum(vals_g) / n
    sx, sy = _cov_oracle(vals_p, vals_p), _cov_oracle(vals_g, vals_g)
    sxy = _cov_oracle(vals_p, vals_g)
    num = 4 * mx * my * sxy
    den = (mx ** 2 + my ** 2) * (sx + sy)
    if num != 0:
        return num / den
    return 1.0 if den == 0 else 0.0


def s_measure_oracle(pred, gt, alpha=0.5):
    h, w = gt.shape
    G = gt.astype(bool)
    y = G.mean()
    if y == 0:
        return 1 - pred.mean()
    if y == 1:
        return pred.mean()

    def obj(values):
        if not values:
            return 0.0
        m, s = _mean_std(values)
        return 2 * m / (m * m + 1 + s)

    fg = [pred[i, j] for i in range(h) for j in range(w) if G[i, j]]
    bg = [1 - pred[i, j] for i in range(h) for j in range(w) if not G[i, j]]
    so = y * obj(fg) + (1 - y) * obj(bg)

    rows = [i for i in range(h) for j in range(w) if G[i, j]]
    cols = [j for i in range(h) for j in range(w) if G[i, j]]
    X = math.floor(sum(cols) / len(cols) + 0.5) + 1
    Y = math.floor(sum(rows) / len(rows) + 0.5) + 1
    gf = G.astype(float)
    quads = [(0, Y, 0, X), (0, Y, X, w), (Y, h, 0, X), (Y, h, X, w)]
    sr = 0.0
    for r0, r1, c0, c1 in quads:
        area = (r1 - r0) * (c1 - c0)
        if area <= 0:
            continue
        sr += area / (h * w) * _ssim_oracle(pred[r0:r1, c0:c1], gf[r0:r1, c0:c1])
    return max(0.0, alpha * so + (1 - alpha) * sr)


# ---------------------------------------------------------------- receptive field

def delta_probe_extent(response, size):
    """Width (in input columns) of the set of delta positions that reach the probed output.

    ``response(r, c)`` returns True when a unit impulse at input (r, c)
    changes the probed output value.
    """
    cols = [c for r in range(size) for c in range(size) if response(r, c)]
    return max(cols) - min(cols) + 1 if cols else 0
