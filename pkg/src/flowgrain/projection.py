"""Truncated SVD basis for reducing flattened crop vectors.

The basis is fit by eigendecomposition of whichever Gram matrix is
smaller (n x n or d x d), which is exact for the top-k subspace and keeps
memory bounded for high-dimensional crops. Per-component sign is fixed by
making the largest-magnitude entry of each component positive, so two
fits on identical samples are bit-identical.

Whitening divides each projected coordinate by sigma_i / sqrt(n - 1),
giving the training coordinates unit sample variance; it is on by default
because unit-scale inputs condition the downstream flow optimization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, ShapeMismatchError

ZERO_SV_TOL = 1e-10


@dataclass
class ProjectionBasis:
    mean: np.ndarray            # (d,)
    components: np.ndarray      # (k, d), orthonormal rows
    singular_values: np.ndarray  # (k,), nonincreasing, positive
    n_samples: int

    @property
    def k(self):
        return self.components.shape[0]

    @property
    def d(self):
        return self.components.shape[1]

    def whiten_scale(self):
        return self.singular_values / np.sqrt(self.n_samples - 1)


def fit_basis(samples, k):
    """Fit the top-k basis of the centered sample matrix.

    ``samples`` is (n, d) with n >= k and d >= k. Raises ValueError when k
    is out of range and DegenerateDataError when the data has fewer than k
    numerically nonzero singular values.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"samples must be 2-D, got shape {x.shape}")
    n, d = x.shape
    k = int(k)
    if k < 1 or k > min(n, d):
        raise ValueError(f"k={k} must satisfy 1 <= k <= min(n={n}, d={d})")

    mean = x.mean(axis=0)
    xc = x - mean
    if n <= d:
        gram = xc @ xc.T
        evals, evecs = np.linalg.eigh(gram)
        all_evals = np.maximum(evals[::-1].copy(), 0.0)
        evecs = evecs[:, ::-1][:, :k].copy()
    else:
        cov = xc.T @ xc
        evals, evecs = np.linalg.eigh(cov)
        all_evals = np.maximum(evals[::-1].copy(), 0.0)
        evecs = evecs[:, ::-1][:, :k].copy()

    # a singular value counts as zero when its eigenvalue is within
    # ZERO_SV_TOL of zero relative to the spectrum (numerical rank test)
    floor = ZERO_SV_TOL * max(float(all_evals[0]), 1.0)
    rank = int(np.count_nonzero(all_evals > floor))
    if rank < k:
        raise DegenerateDataError(
            f"requested k={k} components but data has only {rank} "
            f"numerically nonzero singular values"
        )
    svals = np.sqrt(all_evals[:k])
    if n <= d:
        comps = (xc.T @ evecs / svals).T
    else:
        comps = evecs.T.copy()

    # re-normalize rows (guards rounding from the Gram route)
    comps /= np.linalg.norm(comps, axis=1, keepdims=True)
    # sign convention: largest-magnitude entry of each component positive
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return ProjectionBasis(mean=mean, components=comps,
                           singular_values=svals, n_samples=n)


def project(basis, x, whiten=True):
    """Map vectors (or an (m, d) batch) into reduced coordinates."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != basis.d:
        raise ShapeMismatchError("project", x.shape, (basis.d,))
    y = (x - basis.mean) @ basis.components.T
    if whiten:
        y = y / basis.whiten_scale()
    return y[0] if single else y


def reconstruct(basis, y, whitened=True):
    """Map reduced coordinates back to the original space."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    if y.shape[1] != basis.k:
        raise ShapeMismatchError("reconstruct", y.shape, (basis.k,))
    if whitened:
        y = y * basis.whiten_scale()
    x = y @ basis.components + basis.mean
    return x[0] if single else x
