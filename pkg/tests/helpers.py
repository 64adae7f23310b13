"""Shared oracles and utilities for the test suite.

Everything here is deliberately independent of the package's analytic
paths: numerical Jacobians, a hand-rolled Jacobi eigensolver, rank
statistics, and small data generators.
"""

import numpy as np


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-6, skip=None):
    """Relative comparison with an absolute floor where the true gradient
    vanishes; ``skip`` marks coordinates to ignore (e.g. near relu kinks)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    keep = np.ones(analytic.shape, dtype=bool)
    if skip is not None:
        keep &= ~skip
    a, n = analytic[keep], numeric[keep]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-30)
    err = np.abs(a - n)
    ok = (err <= atol) | (err / denom <= rtol)
    assert ok.all(), f"max rel err {np.max(err / denom)}, max abs err {np.max(err)}"


def numerical_jacobian(f, x, h=1e-5):
    """Full Jacobian of a vector function by central differences.

    ``f`` maps a length-d vector to a length-m vector; returns (m, d).
    """
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xp[j] += h
        xm = x.copy()
        xm[j] -= h
        cols.append((f(xp) - f(xm)) / (2.0 * h))
    return np.stack(cols, axis=-1)


def logabsdet_numeric(f, x, h=1e-5):
    """log|det| of the numerically assembled Jacobian of f at x."""
    jac = numerical_jacobian(f, x, h)
    sign, ld = np.linalg.slogdet(jac)
    assert sign != 0
    return ld


def jacobi_eigh(a, sweeps=100, tol=1e-14):
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Independent oracle for the SVD fit; only intended for small matrices.
    Returns eigenvalues (descending) and the matching eigenvector columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < tol:
                    continue
                theta = 0.5 * np.arctan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    order = np.argsort(a.diagonal())[::-1]
    return a.diagonal()[order].copy(), v[:, order].copy()


def principal_angles(basis_a, basis_b):
    """Angles between subspaces spanned by the ROWS of the two matrices."""
    qa, _ = np.linalg.qr(basis_a.T)
    qb, _ = np.linalg.qr(basis_b.T)
    svals = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(svals, -1.0, 1.0))


def two_moons(n, seed=0, noise=0.08):
    """Classic interleaving half-circles in 2-D."""
    rng = np.random.default_rng(seed)
    n1 = n // 2
    n2 = n - n1
    t1 = rng.uniform(0.0, np.pi, n1)
    t2 = rng.uniform(0.0, np.pi, n2)
    x1 = np.stack([np.cos(t1), np.sin(t1)], axis=1)
    x2 = np.stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)], axis=1)
    pts = np.concatenate([x1, x2], axis=0)
    pts += rng.normal(0.0, noise, pts.shape)
    return pts[rng.permutation(n)]


def diag_gaussian_nll(train, test):
    """Mean NLL of ``test`` under the max-likelihood diagonal Gaussian fit
    to ``train``; closed-form oracle."""
    mu = train.mean(axis=0)
    var = train.var(axis=0)
    return float(
        np.mean(0.5 * np.sum((test - mu) ** 2 / var + np.log(2.0 * np.pi * var), axis=1))
    )


def auroc(scores_pos, scores_neg):
    """Rank-based AUROC of ``scores_pos`` (should be high) vs negatives."""
    scores = np.concatenate([scores_pos, scores_neg])
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    # midranks for ties
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    n_pos, n_neg = len(scores_pos), len(scores_neg)
    r_pos = ranks[:n_pos].sum()
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def knn_accuracy(embeddings, labels, k=5):
    """Leave-one-out k-nearest-neighbour accuracy in Euclidean space."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    d2 = np.sum((emb[:, None, :] - emb[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    correct = 0
    for i in range(len(emb)):
        nn = np.argsort(d2[i], kind="stable")[:k]
        votes = labels[nn]
        vals, counts = np.unique(votes, return_counts=True)
        correct += int(vals[np.argmax(counts)] == labels[i])
    return correct / len(emb)
