"""Independent brute-force reference implementations used to derive expected values."""

import itertools

import numpy as np


def conv2d_loop(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi, oc, i, j in itertools.product(range(n), range(o), range(ho), range(wo)):
        acc = 0.0
        for ci, di, dj in itertools.product(range(c), range(kh), range(kw)):
            acc += xp[bi, ci, i * stride + di, j * stride + dj] * w[oc, ci, di, dj]
        out[bi, oc, i, j] = acc + (0.0 if b is None else b[oc])
    return out


def central_difference(f, x, step=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


def edges_from_faces(faces):
    edges = set()
    for f in faces:
        for a, b in itertools.combinations(f, 2):
            edges.add((min(a, b), max(a, b)))
    return edges


def random_connected_graph(rng, c):
    """Random spanning tree plus extra edges, as a dense 0/1 adjacency."""
    a = np.zeros((c, c))
    order = rng.permutation(c)
    for i in range(1, c):
        j = order[rng.integers(0, i)]
        a[order[i], j] = a[j, order[i]] = 1
    extra = rng.integers(0, c)
    for _ in range(extra):
        i, j = rng.integers(0, c, 2)
        if i != j:
            a[i, j] = a[j, i] = 1
    return a


def laplacian_eig(adjacency):
    d = adjacency.sum(1)
    lap = np.eye(len(d)) - adjacency / np.sqrt(np.outer(d, d))
    return lap, np.linalg.eigh(lap)


def chebyshev_value(k, x):
    return np.cos(k * np.arccos(np.clip(x, -1, 1)))


def epe_loop(pred, gt):
    total, count = 0.0, 0
    for p, g in zip(np.reshape(pred, (-1, 3)), np.reshape(gt, (-1, 3))):
        total += np.sqrt(sum((pi - gi) ** 2 for pi, gi in zip(p, g)))
        count += 1
    return total / count


def pck_count(pred, gt, thresholds):
    errs = [np.sqrt(((p - g) ** 2).sum()) for p, g in zip(np.reshape(pred, (-1, 3)), np.reshape(gt, (-1, 3)))]
    return np.array([sum(e <= t for e in errs) / len(errs) for t in thresholds])


def riemann_auc(thresholds, values, lo, hi, samples=200_001):
    xs = np.linspace(lo, hi, samples)
    ys = np.interp(xs, thresholds, values)
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)) / (hi - lo))


ICOSAHEDRON_FACES = [
    (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
    (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
    (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
    (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
]
