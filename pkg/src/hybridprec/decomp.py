"""Complex SVD and geometric mean decomposition (GMD).

The GMD factors a matrix as W1 * Q1 * R1^H where W1 and R1 have orthonormal
columns and Q1 is upper triangular with every diagonal entry equal to the
geometric mean of the retained singular values. It is built from the SVD by
repeatedly pairing a diagonal entry above the geometric mean with one below
and applying a 2x2 rotation pair that pins the leading entry exactly, so the
equal-diagonal property holds by construction at O(ns^2) cost after the SVD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class RankDeficiencyError(ValueError):
    """The input does not have enough strictly positive singular values."""


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD m = u @ diag(sigma) @ v^H with sigma sorted descending."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.conj().T


@dataclass(frozen=True)
class GmdFactors:
    """Rank-ns GMD: w1 (nr x ns), q1 (ns x ns upper triangular), r1 (nt x ns)."""

    w1: np.ndarray
    q1: np.ndarray
    r1: np.ndarray
    sigma_bar: float

    def reconstruct(self) -> np.ndarray:
        return self.w1 @ self.q1 @ self.r1.conj().T


def svd(m: np.ndarray) -> SvdFactors:
    """Thin SVD of a complex (or real) matrix with descending singular values."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix entries must be finite")
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    return SvdFactors(u=u, sigma=s, v=vh.conj().T)


def geometric_mean_sigma(sigma: np.ndarray, ns: int) -> float:
    """Geometric mean of the ns largest values, computed in the log domain.

    Log-domain evaluation keeps products of very small or very large
    singular values from underflowing or overflowing.
    """
    sigma = np.asarray(sigma, dtype=float)
    if ns < 1 or ns > sigma.size:
        raise ValueError(f"ns must be in [1, {sigma.size}], got {ns}")
    top = sigma[:ns]
    if np.any(top <= 0):
        raise RankDeficiencyError(f"top {ns} singular values must be positive, got {top}")
    return float(np.exp(np.mean(np.log(top))))


def _gmd_rotations(sigma: np.ndarray, sigma_bar: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rotate diag(sigma) into an upper triangular matrix with constant diagonal.

    Returns (gl, q, gr) with gl^T @ diag(sigma) @ gr = q, gl and gr real
    orthogonal. At each step a symmetric permutation brings one entry >=
    sigma_bar and one <= sigma_bar to the pivot pair; the 2x2 rotation then
    fixes the leading entry to sigma_bar while preserving the determinant,
    so the trailing entries keep geometric mean sigma_bar.
    """
    k = sigma.size
    gl = np.eye(k)
    gr = np.eye(k)
    q = np.diag(sigma.astype(float))
    for i in range(k - 1):
        diag = np.diag(q)[i:]
        hi = i + int(np.argmax(diag))
        lo = i + int(np.argmin(diag))
        d_hi, d_lo = q[hi, hi], q[lo, lo]
        if hi == lo or (
            abs(d_hi - sigma_bar) <= 1e-15 * sigma_bar and abs(d_lo - sigma_bar) <= 1e-15 * sigma_bar
        ):
            continue  # everything left already equals the mean
        # symmetric permutation: entry >= sigma_bar to slot i, entry <= to slot i+1
        perm = _swap_positions(k, i, hi, i + 1, lo)
        q = q[perm][:, perm]
        gl = gl[:, perm]
        gr = gr[:, perm]
        d1, d2 = q[i, i], q[i + 1, i + 1]
        if abs(d1 - d2) <= 1e-15 * sigma_bar:
            c, s = 1.0, 0.0
        else:
            # rounding can push d2 a hair past sigma_bar; keep c^2 in [0, 1]
            c2 = np.clip((sigma_bar**2 - d2**2) / (d1**2 - d2**2), 0.0, 1.0)
            c = np.sqrt(c2)
            s = np.sqrt(1.0 - c2)
        g2 = np.array([[c, -s], [s, c]])
        g1 = np.array([[c * d1, -s * d2], [s * d2, c * d1]]) / sigma_bar
        q[:, i : i + 2] = q[:, i : i + 2] @ g2
        q[i : i + 2, :] = g1.T @ q[i : i + 2, :]
        q[i + 1, i] = 0.0  # exact zero by construction
        q[i, i] = sigma_bar
        gl[:, i : i + 2] = gl[:, i : i + 2] @ g1
        gr[:, i : i + 2] = gr[:, i : i + 2] @ g2
    q[k - 1, k - 1] = sigma_bar
    return gl, q, gr


def _swap_positions(k: int, i: int, hi: int, j: int, lo: int) -> np.ndarray:
    """Permutation of range(k) placing index hi at slot i and lo at slot j."""
    perm = list(range(k))
    perm[i], perm[hi] = perm[hi], perm[i]
    # the first swap may have moved lo
    lo_pos = perm.index(lo)
    perm[j], perm[lo_pos] = perm[lo_pos], perm[j]
    return np.array(perm)


def gmd(m: np.ndarray, ns: int) -> GmdFactors:
    """Geometric mean decomposition of the best rank-ns part of m.

    w1 @ q1 @ r1^H equals the rank-ns SVD truncation of m; the diagonal of q1
    is real, positive, and constant at the geometric mean of the ns largest
    singular values. Raises RankDeficiencyError when sigma_ns is numerically
    zero relative to sigma_1.
    """
    factors = svd(m)
    if ns < 1 or ns > factors.sigma.size:
        raise ValueError(f"ns must be in [1, {factors.sigma.size}], got {ns}")
    s = factors.sigma[:ns]
    if s[-1] <= 1e-12 * factors.sigma[0]:
        raise RankDeficiencyError(
            f"rank below ns={ns}: sigma_ns={s[-1]:.3e} vs sigma_1={factors.sigma[0]:.3e}"
        )
    sigma_bar = geometric_mean_sigma(factors.sigma, ns)
    gl, q1, gr = _gmd_rotations(s, sigma_bar)
    w1 = factors.u[:, :ns] @ gl
    r1 = factors.v[:, :ns] @ gr
    return GmdFactors(w1=w1, q1=q1.astype(complex), r1=r1, sigma_bar=sigma_bar)
