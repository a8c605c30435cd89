"""Sparse least-squares plumbing: block Jacobian assembly and damped solves."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


def block_triplets(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray):
    """COO triplets for dense (n, d, p) Jacobian blocks.

    ``rows`` is (n, d) and ``cols`` (n, p); entries with a negative column
    (fixed parameters) are dropped.
    """
    n, d, p = vals.shape
    r = np.broadcast_to(rows[:, :, None], (n, d, p))
    c = np.broadcast_to(cols[:, None, :], (n, d, p))
    keep = c >= 0
    return r[keep], c[keep], vals[keep]


def block_columns(start: np.ndarray, width: int) -> np.ndarray:
    """Column indices ``start .. start+width-1``; a negative start stays fixed."""
    start = np.asarray(start)
    cols = start[..., None] + np.arange(width)
    return np.where(start[..., None] < 0, -1, cols)


def assemble(triplets, n_rows: int, n_cols: int) -> sp.csr_matrix:
    if not triplets:
        return sp.csr_matrix((n_rows, n_cols))
    r = np.concatenate([t[0] for t in triplets])
    c = np.concatenate([t[1] for t in triplets])
    v = np.concatenate([t[2] for t in triplets])
    return sp.csr_matrix((v, (r, c)), shape=(n_rows, n_cols))


def solve_normal(H: sp.spmatrix, g: np.ndarray, lam: float = 0.0,
                 floor: float = 1e-12) -> np.ndarray:
    """Solve ``(H + lam * diag(H)) x = -g`` (Marquardt scaling with a floor)."""
    H = sp.csc_matrix(H)
    if lam > 0:
        d = H.diagonal()
        H = H + sp.diags(lam * np.maximum(d, floor * max(d.max(), 1.0)), format="csc")
    return -spla.spsolve(H, g, permc_spec="MMD_AT_PLUS_A")


def huber_weights(s: np.ndarray, c: float) -> np.ndarray:
    """IRLS weights for squared whitened norms ``s`` with threshold ``c``."""
    norm = np.sqrt(s)
    return np.where(norm <= c, 1.0, c / np.maximum(norm, 1e-300))


def huber_cost(s: np.ndarray, c: float) -> np.ndarray:
    norm = np.sqrt(s)
    return np.where(norm <= c, s, 2.0 * c * norm - c * c)
