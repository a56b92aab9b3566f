"""Independent reference implementations used only by the tests.

These deliberately share no code with the library: plain loops, explicit
index arithmetic, exhaustive search.
"""
import math

import numpy as np


def softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def naive_scan(u, delta, A, B, C, D):
    """Unrolled recurrence for one sequence: u, delta [L, d]; A [d, N]; B, C [L, N]; D [d]."""
    L, d = u.shape
    N = A.shape[1]
    h = [[0.0] * N for _ in range(d)]
    y = np.zeros((L, d))
    for t in range(L):
        for c in range(d):
            acc = 0.0
            for n in range(N):
                h[c][n] = math.exp(delta[t, c] * A[c, n]) * h[c][n] + delta[t, c] * B[t, n] * u[t, c]
                acc += C[t, n] * h[c][n]
            y[t, c] = acc + D[c] * u[t, c]
    return y


def naive_selective_scan(u, a_log, d_skip, w_delta, b_delta, w_b, w_c):
    """Projections by explicit sums, then :func:`naive_scan`."""
    L, d = u.shape
    N = a_log.shape[1]
    delta = np.array([[softplus(sum(u[t, i] * w_delta[i, c] for i in range(d)) + b_delta[c])
                       for c in range(d)] for t in range(L)])
    B = np.array([[sum(u[t, i] * w_b[i, n] for i in range(d)) for n in range(N)] for t in range(L)])
    C = np.array([[sum(u[t, i] * w_c[i, n] for i in range(d)) for n in range(N)] for t in range(L)])
    A = -np.exp(a_log)
    return naive_scan(u, delta, A, B, C, d_skip)


def traversal_orders(rows, cols):
    """Four traversal index lists over a rows x cols grid (flat row-major ids)."""
    d1 = [r * cols + c for r in range(rows) for c in range(cols)]
    d2 = [r * cols + c for c in range(cols) for r in range(rows)]
    return [d1, d2, d1[::-1], d2[::-1]]


def overlap_counts(pred, gt):
    tp = fp = fn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        tp += bool(p and g)
        fp += bool(p and not g)
        fn += bool(g and not p)
    return tp, fp, fn


def surface_points(mask):
    m = np.asarray(mask, dtype=bool)
    H, W, D = m.shape
    pts = []
    for i in range(H):
        for j in range(W):
            for k in range(D):
                if not m[i, j, k]:
                    continue
                for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    a, b, c = i + di, j + dj, k + dk
                    if not (0 <= a < H and 0 <= b < W and 0 <= c < D) or not m[a, b, c]:
                        pts.append((i, j, k))
                        break
    return np.array(pts, dtype=np.int64).reshape(-1, 3)


def all_pairs_min(src, dst, spacing):
    """Exhaustive nearest distances; same arithmetic as the library's scaled formula."""
    sp = np.asarray(spacing, dtype=np.float64)
    a, b = src.astype(np.float64) * sp, dst.astype(np.float64) * sp
    out = np.empty(len(a))
    for i in range(len(a)):
        d = a[i] - b
        out[i] = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]).min()
    return out


def brute_hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    sp, sg = surface_points(pred), surface_points(gt)

    def p95(v):
        v = sorted(v.tolist())
        return v[-(-95 * len(v) // 100) - 1]  # ceil(0.95 n), 1-based

    return max(p95(all_pairs_min(sp, sg, spacing)), p95(all_pairs_min(sg, sp, spacing)))


def brute_assd(pred, gt, spacing=(1.0, 1.0, 1.0)):
    sp, sg = surface_points(pred), surface_points(gt)
    d = np.concatenate([all_pairs_min(sp, sg, spacing), all_pairs_min(sg, sp, spacing)])
    return math.fsum(d.tolist()) / len(d)
