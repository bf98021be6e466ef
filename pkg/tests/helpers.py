"""Brute-force reference implementations the test suite checks against.

Everything here is written for obviousness, not speed: explicit loops,
no vectorization tricks, no shared code with the package under test.
"""

from __future__ import annotations

import numpy as np

from volmae.ndnum import Tensor, backward


# ---------------------------------------------------------------------------
# autodiff


def numeric_grad(fn, tensors, h: float = 1e-6):
    """Central-difference gradients of scalar fn(*tensors) w.r.t. each tensor."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*tensors).data)
            flat[i] = orig - h
            fm = float(fn(*tensors).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def autodiff_grad(fn, tensors):
    """Backward-pass gradients of scalar fn(*tensors) w.r.t. each tensor."""
    for t in tensors:
        t.grad = None
    out = fn(*tensors)
    backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def check_gradients(fn, tensors, h: float = 1e-6, atol: float = 1e-7, rtol: float = 1e-5):
    """Assert autodiff and finite differences agree elementwise."""
    ad = autodiff_grad(fn, tensors)
    fd = numeric_grad(fn, tensors, h=h)
    for a, f in zip(ad, fd):
        np.testing.assert_allclose(a, f, atol=atol, rtol=rtol)


def leaf(rng, *shape, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# linear algebra


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product (2-D only)."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


# ---------------------------------------------------------------------------
# filtering


def naive_min_filter(data: np.ndarray, kernel: tuple[int, int, int]) -> np.ndarray:
    """Per-voxel minimum over an anisotropic window, edges clamped.

    `data` is (C, Z, Y, X); `kernel` is (kx, ky, kz). Odd extents center on
    the voxel; even extents extend forward (window {v, .., v + k - 1} shifted
    back by (k-1)//2).
    """
    kx, ky, kz = kernel
    C, Z, Y, X = data.shape
    out = np.empty_like(data)

    def window(center, k, dim):
        before = (k - 1) // 2
        lo = max(0, center - before)
        hi = min(dim, center - before + k)
        return range(lo, hi)

    for c in range(C):
        for z in range(Z):
            for y in range(Y):
                for x in range(X):
                    best = np.inf
                    for zz in window(z, kz, Z):
                        for yy in window(y, ky, Y):
                            for xx in window(x, kx, X):
                                v = data[c, zz, yy, xx]
                                if v < best:
                                    best = v
                    out[c, z, y, x] = best
    return out


def naive_subtraction(pre: np.ndarray, posts: list[np.ndarray],
                      kernel: tuple[int, int, int], per_term: bool) -> np.ndarray:
    """Mean squared pre/post difference with the minimum filter applied
    either once at the end or to every term."""
    terms = [(pre - post) ** 2 for post in posts]
    if per_term:
        filtered = [naive_min_filter(t, kernel) for t in terms]
        return sum(filtered) / len(filtered)
    return naive_min_filter(sum(terms) / len(terms), kernel)


def naive_fuse(a: np.ndarray, b: np.ndarray, kernel: tuple[int, int, int]) -> np.ndarray:
    return naive_min_filter(0.5 * (a + b), kernel)


# ---------------------------------------------------------------------------
# metrics


def pairwise_auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """AUROC as the probability a positive outranks a negative (ties 1/2)."""
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


def sweep_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP by explicit threshold sweep over distinct score values."""
    thresholds = np.unique(scores)[::-1]
    n_pos = int(np.sum(labels == 1))
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        picked = scores >= t
        tp = int(np.sum(labels[picked] == 1))
        precision = tp / int(np.sum(picked))
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap
