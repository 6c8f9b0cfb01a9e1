"""Brute-force reference implementations used only by the tests."""
import math

import numpy as np

from rfnet.engine import no_grad


def windowed_softmax_loop(h, window):
    n, height, width = h.shape
    r = window // 2
    out = np.zeros_like(h, dtype=np.float64)
    for y in range(height):
        for x in range(width):
            vals = []
            for k in range(n):
                for yy in range(y - r, y + r + 1):
                    for xx in range(x - r, x + r + 1):
                        if 0 <= yy < height and 0 <= xx < width:
                            vals.append(float(h[k, yy, xx]))
            top = max(vals)
            denom = sum(math.exp(v - top) for v in vals)
            for k in range(n):
                out[k, y, x] = math.exp(float(h[k, y, x]) - top) / denom
    return out


def descriptor_distance_loop(a, b):
    dot = sum(float(p) * float(q) for p, q in zip(a, b))
    return math.sqrt(max(0.0, 2.0 - 2.0 * dot))


def distance_matrix_loop(da, db):
    return np.array([[descriptor_distance_loop(a, b) for b in db] for a in da])


def nn_loop(da, db):
    """(index_a, index_b, distance, second_distance) for every row of da."""
    out = []
    for i, a in enumerate(da):
        best, best_j, second = math.inf, -1, math.inf
        for j, b in enumerate(db):
            d = descriptor_distance_loop(a, b)
            if d < best:
                second, best, best_j = best, d, j
            elif d < second:
                second = d
        out.append((i, best_j, best, second))
    return out


def nnt_loop(da, db, t):
    return [(i, j) for i, j, d, _ in nn_loop(da, db) if d < t]


def nnr_loop(da, db, t):
    kept = []
    for i, j, d, d2 in nn_loop(da, db):
        if d2 == 0:
            ratio = 0.0 if d == 0 else 1.0
        else:
            ratio = d / d2
        if ratio < t:
            kept.append((i, j))
    return kept


def description_loss_loop(di, dj, centers_i, centers_j, c, margin=1.0):
    """Hard loss with neighbor mask, written as explicit loops over n' and m'."""
    k = len(di)
    total = 0.0
    for a in range(k):
        pos = descriptor_distance_loop(di[a], dj[a])
        best = math.inf
        for n2 in range(k):
            if n2 == a:
                continue
            if math.dist(centers_j[a], centers_j[n2]) <= c:
                continue
            best = min(best, descriptor_distance_loop(di[a], dj[n2]))
        for m2 in range(k):
            if m2 == a:
                continue
            if math.dist(centers_i[m2], centers_i[a]) <= c:
                continue
            best = min(best, descriptor_distance_loop(di[m2], dj[a]))
        if best == math.inf:
            continue
        total += max(0.0, margin + pos - best)
    return total / k


def adam_scalar(grad_fn, w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def bilinear_loop(img, x, y):
    h, w = img.shape
    if x < 0 or y < 0 or x > w - 1 or y > h - 1:
        return 0.0
    x0, y0 = min(int(math.floor(x)), max(w - 2, 0)), min(int(math.floor(y)), max(h - 2, 0))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return (
        img[y0, x0] * (1 - ax) * (1 - ay)
        + img[y0, x1] * ax * (1 - ay)
        + img[y1, x0] * (1 - ax) * ay
        + img[y1, x1] * ax * ay
    )


def impulse_footprint(detector, n, size=41):
    """Pixels of layer n whose features differ from the far-field background."""
    img = np.zeros((size, size))
    img[size // 2, size // 2] = 1.0
    with no_grad():
        m = detector.build_feature_maps(img)[n - 1].data[0]
    background = m[:, 2 * n + 4, 2 * n + 4]
    changed = (np.abs(m - background[:, None, None]) > 1e-9 * (1 + np.abs(background[:, None, None]))).any(axis=0)
    # zero padding perturbs a band of width n at the edges; ignore it
    changed[:n, :] = changed[-n:, :] = False
    changed[:, :n] = changed[:, -n:] = False
    return changed
