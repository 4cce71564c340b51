"""Slow, independent reference implementations used to cross-check the
package. Everything here is written the most literal way possible —
explicit loops, no shared code with the implementations under test.
"""

from collections import deque
from itertools import product

import numpy as np

_OFFSETS_6 = [
    (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1),
]
_OFFSETS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def flood_fill_components(binary: np.ndarray, connectivity: int) -> set:
    """Partition of the true voxels as a set of frozensets, via BFS."""
    offs = _OFFSETS_6 if connectivity == 6 else _OFFSETS_26
    binary = np.asarray(binary, dtype=bool)
    seen = np.zeros_like(binary)
    comps = set()
    nx, ny, nz = binary.shape
    for start in map(tuple, np.argwhere(binary)):
        if seen[start]:
            continue
        queue = deque([start])
        seen[start] = True
        comp = []
        while queue:
            x, y, z = queue.popleft()
            comp.append((x, y, z))
            for dx, dy, dz in offs:
                p = (x + dx, y + dy, z + dz)
                if 0 <= p[0] < nx and 0 <= p[1] < ny and 0 <= p[2] < nz:
                    if binary[p] and not seen[p]:
                        seen[p] = True
                        queue.append(p)
        comps.add(frozenset(comp))
    return comps


def auc_pair_count(labels, scores) -> float:
    """Probability a positive outscores a negative, ties worth half."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def max_f1_exhaustive(labels, scores) -> tuple:
    """Try every distinct score as a >= threshold; smallest wins ties."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    best_f1, best_thr = 0.0, float("inf")
    for t in sorted(set(scores.tolist())):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        n_pred = int(pred.sum())
        if n_pred == 0 or tp == 0:
            f1 = 0.0
        else:
            precision = tp / n_pred
            recall = tp / n_pos
            f1 = 2 * precision * recall / (precision + recall)
        if f1 > best_f1 or (f1 == best_f1 and t < best_thr):
            best_f1, best_thr = f1, t
    return best_f1, best_thr


def froc_recount(rows, n_gt: int, n_patients: int) -> list:
    """Recount (fp rate, sensitivity) at every distinct score threshold."""
    points = []
    for t in sorted({r.score for r in rows}, reverse=True):
        kept = [r for r in rows if r.score >= t]
        tp = sum(1 for r in kept if r.matched_gt is not None)
        fp = len(kept) - tp
        points.append((fp / n_patients, tp / n_gt))
    return points


def conv3d_direct(x, w, b, stride: int, padding: int) -> np.ndarray:
    """Seven-loop convolution over an explicitly zero-padded input."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c_in, d, h, wd = x.shape
    c_out, _, kd, kh, kw = w.shape
    xp = np.zeros((c_in, d + 2 * padding, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + d, padding : padding + h, padding : padding + wd] = x
    od = (d + 2 * padding - kd) // stride + 1
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, od, oh, ow))
    for co in range(c_out):
        for i in range(od):
            for j in range(oh):
                for k in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for a, bb, c in product(range(kd), range(kh), range(kw)):
                            acc += (
                                w[co, ci, a, bb, c]
                                * xp[ci, i * stride + a, j * stride + bb, k * stride + c]
                            )
                    out[co, i, j, k] = acc + float(b[co])
    return out


def gcn_double_sum(adj_logits, phi) -> np.ndarray:
    """out[j] = sum_k softmax_row(logits)[k, j] * phi[k], all explicit."""
    logits = np.asarray(adj_logits, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    n, d = phi.shape
    out = np.zeros((n, d))
    for j in range(n):
        for k in range(n):
            row = logits[k] - logits[k].max()
            a_kj = np.exp(row[j]) / np.exp(row).sum()
            for m in range(d):
                out[j, m] += a_kj * phi[k, m]
    return out
