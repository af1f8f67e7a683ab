"""Brute-force reference implementations used to pin down the fast kernels.

Everything here is written as plain loops over pixels / classes / dims /
batch entries in float64 numpy, deliberately sharing no code with the
package under test.
"""

from __future__ import annotations

import math

import numpy as np

EPS = 1e-8


def prototype_oracle(prob: np.ndarray, feat: np.ndarray) -> np.ndarray:
    """q^c = sum_i p^c(i) f(i) / (sum_i p^c(i) + eps), looped per class/dim/pixel."""
    c_count, h, w = prob.shape
    d_count = feat.shape[0]
    out = np.zeros((c_count, d_count), dtype=np.float64)
    for c in range(c_count):
        mass = 0.0
        for i in range(h):
            for j in range(w):
                mass += float(prob[c, i, j])
        for d in range(d_count):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += float(prob[c, i, j]) * float(feat[d, i, j])
            out[c, d] = acc / (mass + EPS)
    return out


def cosine_oracle(feat: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Pixel-by-pixel cosine similarity against each prototype vector."""
    d_count, h, w = feat.shape
    c_count = vectors.shape[0]
    out = np.zeros((c_count, h, w), dtype=np.float64)
    for c in range(c_count):
        qn = math.sqrt(sum(float(vectors[c, d]) ** 2 for d in range(d_count)))
        for i in range(h):
            for j in range(w):
                f = feat[:, i, j].astype(np.float64)
                fn = math.sqrt(sum(float(f[d]) ** 2 for d in range(d_count)))
                dot = sum(float(f[d]) * float(vectors[c, d]) for d in range(d_count))
                out[c, i, j] = max(-1.0, min(1.0, dot / (fn * qn + EPS)))
    return out


def cross_sample_oracle(maps: np.ndarray, target: int) -> np.ndarray:
    """Eq-by-eq pooled exponential of every non-target similarity map."""
    b, c_count, h, w = maps.shape
    out = np.zeros((c_count, h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            pooled = [0.0] * c_count
            for n in range(b):
                if n == target:
                    continue
                for c in range(c_count):
                    pooled[c] += math.exp(float(maps[n, c, i, j]))
            denom = sum(pooled)
            for c in range(c_count):
                out[c, i, j] = pooled[c] / denom
    return out


def vote_oracle(maps: np.ndarray) -> np.ndarray:
    """Per-pixel vote histogram of argmax (lowest index on ties) over B maps."""
    b, c_count, h, w = maps.shape
    out = np.zeros((c_count, h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            for n in range(b):
                best, best_val = 0, float(maps[n, 0, i, j])
                for c in range(1, c_count):
                    v = float(maps[n, c, i, j])
                    if v > best_val:
                        best, best_val = c, v
                out[best, i, j] += 1.0
    return out / b


def entropy_oracle(p_norm: np.ndarray) -> np.ndarray:
    """Normalized Shannon entropy per pixel with the 0 log 0 = 0 convention."""
    c_count, h, w = p_norm.shape
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for c in range(c_count):
                p = float(p_norm[c, i, j])
                if p > 0.0:
                    acc -= p * math.log(p)
            out[i, j] = acc / math.log(c_count)
    return out


def surface_oracle(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels: any of the 6 axis neighbors is background or outside."""
    s, h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    neighbors = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    for z in range(s):
        for y in range(h):
            for x in range(w):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in neighbors:
                    nz, ny, nx = z + dz, y + dy, x + dx
                    if not (0 <= nz < s and 0 <= ny < h and 0 <= nx < w) or not mask[nz, ny, nx]:
                        out[z, y, x] = True
                        break
    return out


def assd_oracle(pred: np.ndarray, gt: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float | None:
    """All-pairs average symmetric surface distance in mm."""
    ps = np.argwhere(surface_oracle(pred)).astype(np.float64) * np.asarray(spacing)
    gs = np.argwhere(surface_oracle(gt)).astype(np.float64) * np.asarray(spacing)
    if len(ps) == 0 or len(gs) == 0:
        return None

    def directed(a: np.ndarray, b: np.ndarray) -> float:
        total = 0.0
        for p in a:
            best = math.inf
            for q in b:
                dist = math.sqrt(((p - q) ** 2).sum())
                if dist < best:
                    best = dist
            total += best
        return total / len(a)

    return (directed(ps, gs) + directed(gs, ps)) / 2.0


def dice_oracle(pred: np.ndarray, gt: np.ndarray) -> float:
    """Counting form of the Dice percentage."""
    a = int(np.count_nonzero(pred))
    b = int(np.count_nonzero(gt))
    if a + b == 0:
        return 100.0
    inter = int(np.count_nonzero(np.logical_and(pred, gt)))
    return 100.0 * 2.0 * inter / (a + b)
