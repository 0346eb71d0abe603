"""
Brute-force references used to check the learning rules and the vectorised
layers: exact PCA through a self-contained cyclic Jacobi eigensolver, a
k-means centroid reference for WTA, naive loop versions of matmul, conv and
max-pool, and a central finite-difference gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from hebbian_engine.tensor_core import DimensionError, Tensor, check_finite

MAX_JACOBI_DIM = 64


@dataclass
class PcaOracle:
    covariance: Tensor
    eigvals: Tensor
    eigvecs: Tensor

    def top(self, k: int) -> Tensor:
        """First k eigenvectors as columns (d x k)."""
        return self.eigvecs[:, :k]


def jacobi_eigh(
    matrix: Tensor, tol: float = 1e-14, max_sweeps: int = 100
) -> tuple[Tensor, Tensor]:
    """
    Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigvals descending, eigvecs as orthonormal columns).
    """
    A = np.array(matrix, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"Expected a square matrix, got shape {A.shape}")
    d = A.shape[0]
    if d > MAX_JACOBI_DIM:
        raise ValueError(f"Jacobi solver is limited to d <= {MAX_JACOBI_DIM}, got {d}")
    check_finite(A, "matrix")
    if not np.allclose(A, A.T, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("Matrix is not symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(d)
    scale = max(np.sum(A**2), np.finfo(float).tiny)
    previous = np.inf

    for _ in range(max_sweeps):
        # summed directly; total minus diagonal cancels near convergence
        off = np.sum(np.triu(A, 1) ** 2)
        if off <= tol**2 * scale or off >= previous:
            break
        previous = off
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta**2 + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t**2 + 1.0)
                s = t * c
                # rotate rows and columns p, q
                Ap, Aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * Ap - s * Aq
                A[:, q] = s * Ap + c * Aq
                Ap, Aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * Ap - s * Aq
                A[q, :] = s * Ap + c * Aq
                A[p, q] = A[q, p] = 0.0
                Vp, Vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * Vp - s * Vq
                V[:, q] = s * Vp + c * Vq

    eigvals = np.diag(A).copy()
    order = np.argsort(-eigvals, kind="stable")
    return eigvals[order], np.ascontiguousarray(V[:, order])


def exact_pca(samples: Tensor) -> PcaOracle:
    """
    PCA of n x d samples: centre by the sample mean, eigendecompose (1/n) X^T X.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.ndim != 2:
        raise DimensionError(f"Expected n x d samples, got shape {X.shape}")
    check_finite(X, "samples")
    X = X - X.mean(axis=0)
    covariance = X.T @ X / X.shape[0]
    eigvals, eigvecs = jacobi_eigh(covariance)
    return PcaOracle(covariance, eigvals, eigvecs)


def subspace_angle(W: Tensor, V: Tensor) -> float:
    """
    Largest per-pair angle in degrees between row i of W (k x d) and column i
    of V (d x k), ignoring sign.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    V = np.asarray(V, dtype=np.float64)
    if V.ndim == 1:
        V = V[:, None]
    if V.shape != (W.shape[1], W.shape[0]):
        raise DimensionError(f"W {W.shape} and V {V.shape} are not k x d and d x k")
    w_norms = np.linalg.norm(W, axis=1)
    v_norms = np.linalg.norm(V, axis=0)
    if np.any(w_norms == 0) or np.any(v_norms == 0):
        raise ValueError("subspace_angle is undefined for zero vectors")
    cosines = np.abs(np.sum(W * V.T, axis=1)) / (w_norms * v_norms)
    angles = np.degrees(np.arccos(np.clip(cosines, 0.0, 1.0)))
    return float(angles.max())


def kmeans_centroids(
    samples: Tensor, init: Tensor, iterations: int = 100
) -> Tensor:
    """Lloyd iterations from the given initial centroids."""
    X = np.asarray(samples, dtype=np.float64)
    centroids = np.array(init, dtype=np.float64)
    for _ in range(iterations):
        distances = np.linalg.norm(X[:, None, :] - centroids[None, :, :], axis=2)
        assignment = np.argmin(distances, axis=1)
        updated = centroids.copy()
        for k in range(len(centroids)):
            members = X[assignment == k]
            if len(members):
                updated[k] = members.mean(axis=0)
        if np.array_equal(updated, centroids):
            break
        centroids = updated
    return centroids


def naive_matmul(a: Tensor, b: Tensor) -> Tensor:
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"Cannot multiply shapes {a.shape} and {b.shape}")
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            total = 0.0
            for p in range(k):
                total += a[i, p] * b[p, j]
            out[i, j] = total
    return out


def naive_conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    B, C, H, W = x.shape
    O, C2, kh, kw = weight.shape
    if C != C2:
        raise DimensionError(f"Input {x.shape} does not match filters {weight.shape}")
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    window = padded[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(window * weight[o]) + bias[o]
    return out


def naive_maxpool(x: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    B, C, H, W = x.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    out = np.zeros((B, C, Ho, Wo))
    for b in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    out[b, c, i, j] = x[b, c, i * stride : i * stride + kh, j * stride : j * stride + kw].max()
    return out


def naive_conv_hebbian_delta(
    weights: Tensor, patches: Tensor, delta_fn: Callable[[Tensor, Tensor], Tensor]
) -> Tensor:
    """
    Shared-filter delta computed offset by offset: per-sample deltas at every
    (batch, position) pair, averaged over all of them.
    """
    B, P, _ = patches.shape
    total = np.zeros_like(weights)
    for b in range(B):
        for p in range(P):
            total += delta_fn(weights, patches[b, p])
    return total / (B * P)


def finite_difference_gradient(
    f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5, indices=None
) -> Tensor:
    """
    Central differences of scalar f at x. With `indices` only those flat
    coordinates are evaluated; the rest of the result stays zero.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    coords = range(flat_x.size) if indices is None else indices
    for i in coords:
        original = flat_x[i]
        flat_x[i] = original + h
        plus = f(x)
        flat_x[i] = original - h
        minus = f(x)
        flat_x[i] = original
        flat_g[i] = (plus - minus) / (2.0 * h)
    return grad
