"""Inner loops that dominate runtime: per-frame region statistics and KNN voting.

Each kernel exists as a numba loop (``*_loop``) and a numpy expression
(``*_numpy``). The public names bind to one of them according to
:data:`roadsurf._accel.NUMBA_ENABLED`.
"""

import numpy as np

from ._accel import NUMBA_ENABLED, njit

N_REGIONS = 4


@njit(cache=True)
def region_stats_loop(pts, z_max, y_min, y_max, x_min, x_max, split):
    counts = np.zeros(N_REGIONS, dtype=np.int64)
    sums = np.zeros(N_REGIONS, dtype=np.float64)
    for i in range(pts.shape[0]):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        if z > z_max or y < y_min or y > y_max or x < x_min or x > x_max:
            continue
        r = 0 if y >= 0.0 else 1
        if x > split:
            r += 2
        counts[r] += 1
        sums[r] += pts[i, 3]
    return counts, sums


def region_stats_numpy(pts, z_max, y_min, y_max, x_min, x_max, split):
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    keep = (z <= z_max) & (y >= y_min) & (y <= y_max) & (x >= x_min) & (x <= x_max)
    x, y = x[keep], y[keep]
    r = np.where(y >= 0.0, 0, 1) + np.where(x > split, 2, 0)
    counts = np.bincount(r, minlength=N_REGIONS).astype(np.int64)
    sums = np.bincount(r, weights=pts[keep, 3], minlength=N_REGIONS)
    return counts, sums


@njit(cache=True)
def knn_predict_loop(train_x, train_y, query_x, k, n_classes):
    n_train, dim = train_x.shape
    out = np.empty(query_x.shape[0], dtype=np.int64)
    best_d = np.empty(k, dtype=np.float64)
    best_i = np.empty(k, dtype=np.int64)
    votes = np.zeros(n_classes, dtype=np.int64)
    for q in range(query_x.shape[0]):
        filled = 0
        for j in range(n_train):
            d = 0.0
            for c in range(dim):
                t = query_x[q, c] - train_x[j, c]
                d += t * t
            if filled < k:
                pos = filled
                filled += 1
            elif d < best_d[k - 1]:
                pos = k - 1
            else:
                continue
            # insertion keeps earlier training rows ahead on equal distance
            while pos > 0 and best_d[pos - 1] > d:
                best_d[pos] = best_d[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_d[pos] = d
            best_i[pos] = j
        votes[:] = 0
        for m in range(k):
            votes[train_y[best_i[m]]] += 1
        winner = 0
        for c in range(1, n_classes):
            if votes[c] > votes[winner]:
                winner = c
        out[q] = winner
    return out


def knn_predict_numpy(train_x, train_y, query_x, k, n_classes, chunk=512):
    sq_train = np.einsum("ij,ij->i", train_x, train_x)
    out = np.empty(query_x.shape[0], dtype=np.int64)
    for start in range(0, query_x.shape[0], chunk):
        q = query_x[start:start + chunk]
        d = sq_train[None, :] - 2.0 * (q @ train_x.T) + np.einsum("ij,ij->i", q, q)[:, None]
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        labels = train_y[nearest]
        votes = np.zeros((q.shape[0], n_classes), dtype=np.int64)
        np.add.at(votes, (np.arange(q.shape[0])[:, None], labels), 1)
        out[start:start + chunk] = np.argmax(votes, axis=1)
    return out


if NUMBA_ENABLED:
    region_stats = region_stats_loop
    knn_predict = knn_predict_loop
else:
    region_stats = region_stats_numpy
    knn_predict = knn_predict_numpy
