"""Small batched linear-algebra helpers.

Every array here carries arbitrary leading batch dimensions followed by the
matrix dimensions, e.g. ``(steps, 3, D, n, n)``.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray

COND_CEILING = 1e12


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised with the batch index of the first offending matrix."""

    def __init__(self, index: tuple[int, ...], min_eig: float, cond: float):
        self.index = index
        self.min_eig = min_eig
        self.cond = cond
        super().__init__(f"matrix at {index} not positive definite "
                         f"(min eigenvalue {min_eig:.3e}, condition {cond:.3e})")


def sym(a: NDArray) -> NDArray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def tr(a: NDArray) -> NDArray:
    return np.swapaxes(a, -1, -2)


def spd_inverse(a: NDArray, ceiling: float = COND_CEILING) -> tuple[NDArray, float]:
    """Invert a batch of symmetric positive-definite matrices.

    The inverse is assembled from the eigendecomposition, ``A^{-1} = V diag(1/e) V'``,
    and symmetrised to remove rounding asymmetry.
    A matrix whose smallest eigenvalue is non-positive, or whose condition
    number exceeds ``ceiling``, raises :class:`NotPositiveDefinite`.

    Returns
    -------
    inverse, margin
        ``margin`` is the smallest eigenvalue over the whole batch.
    """
    a = np.asarray(a, dtype=float)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    if a.shape[-1] == 0:
        return a.copy(), np.inf
    eig, vec = np.linalg.eigh(a)
    lo = eig[..., 0]
    hi = np.abs(eig[..., -1])
    ok = lo > 0
    cond = np.divide(hi, lo, out=np.full(lo.shape, np.inf), where=ok)
    bad = ~(ok & (cond <= ceiling))
    if bad.any():
        idx = tuple(int(k) for k in np.argwhere(bad)[0])
        raise NotPositiveDefinite(idx, float(lo[idx]), float(cond[idx]))
    inv = sym((vec / eig[..., None, :]) @ np.swapaxes(vec, -1, -2))
    return inv, float(lo.min()) if lo.size else np.inf


def min_eig(a: NDArray) -> NDArray:
    """Smallest eigenvalue of the symmetric part of each matrix in the batch."""
    return np.linalg.eigvalsh(sym(np.asarray(a, dtype=float)))[..., 0]


def cond(a: NDArray) -> NDArray:
    """2-norm condition numbers of a batch of square matrices (inf if singular)."""
    s = np.linalg.svd(np.asarray(a, dtype=float), compute_uv=False)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(s[..., -1] > 0, s[..., 0] / s[..., -1], np.inf)
