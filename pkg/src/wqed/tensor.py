"""Dense complex tensor algebra: contraction, leg permutation/fusion and truncated SVD.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order. Fusing legs
``(i, j)`` maps the multi-index ``(a, b)`` onto ``a * dim_j + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

# singular values below this fraction of the largest one are treated as zero
RELATIVE_SV_FLOOR = 1e-14


class ShapeError(ValueError):
    """Raised when tensor legs do not line up."""


class NumericalError(ArithmeticError):
    """Raised when a decomposition or exponential fails numerically."""


def contract(a: np.ndarray, b: np.ndarray, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum over paired legs of ``a`` and ``b``.

    The result carries the free legs of ``a`` (in order) followed by the free
    legs of ``b``.
    """
    legs_a = [p[0] for p in pairs]
    legs_b = [p[1] for p in pairs]
    for la, lb in pairs:
        if not (-a.ndim <= la < a.ndim) or not (-b.ndim <= lb < b.ndim):
            raise ShapeError(f"leg pair ({la}, {lb}) out of range for ranks {a.ndim}, {b.ndim}")
        if a.shape[la] != b.shape[lb]:
            raise ShapeError(
                f"cannot contract leg {la} of a (dim {a.shape[la]}) "
                f"with leg {lb} of b (dim {b.shape[lb]})"
            )
    return np.tensordot(a, b, axes=(legs_a, legs_b))


def permute(a: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Reorder legs; the returned array is contiguous."""
    order = list(order)
    if sorted(order) != list(range(a.ndim)):
        raise ShapeError(f"{order} is not a permutation of the {a.ndim} legs")
    return np.ascontiguousarray(np.transpose(a, order))


def fuse(a: np.ndarray, groups: Sequence[Sequence[int]]) -> np.ndarray:
    """Fuse each group of legs into one leg (row-major within the group).

    ``groups`` must partition the legs of ``a``. Groups appear in the result in
    the order given, so ``fuse(t, [[1], [0]])`` is a transpose.
    """
    flat = [leg for g in groups for leg in g]
    if sorted(flat) != list(range(a.ndim)) or any(len(g) == 0 for g in groups):
        raise ShapeError(f"groups {groups} do not partition the {a.ndim} legs")
    t = permute(a, flat) if flat != list(range(a.ndim)) else a
    dims = [int(np.prod([a.shape[leg] for leg in g])) for g in groups]
    return t.reshape(dims)


def split(a: np.ndarray, leg: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`fuse` for a single leg."""
    dims = [int(d) for d in dims]
    if int(np.prod(dims)) != a.shape[leg]:
        raise ShapeError(f"cannot split leg {leg} of dim {a.shape[leg]} into {dims}")
    leg = leg % a.ndim
    return a.reshape(a.shape[:leg] + tuple(dims) + a.shape[leg + 1:])


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    s: np.ndarray
    vdag: np.ndarray
    discarded_weight: float

    @property
    def chi(self) -> int:
        return len(self.s)


def _raw_svd(m: np.ndarray):
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        pass
    try:
        # gesvd is slower but converges in cases where gesdd gives up
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(f"SVD did not converge for a {m.shape[0]}x{m.shape[1]} matrix") from exc


def svd_truncate(m: np.ndarray, chi_max: int) -> SvdResult:
    """Truncated SVD keeping at most ``chi_max`` singular values.

    ``discarded_weight`` is the squared norm of the dropped singular values
    relative to the squared norm of all of them.
    """
    if m.ndim != 2:
        raise ShapeError(f"svd_truncate needs a matrix, got rank {m.ndim}")
    if chi_max < 1:
        raise ValueError("chi_max must be >= 1")
    if not np.all(np.isfinite(m)):
        raise NumericalError(f"non-finite entries in {m.shape[0]}x{m.shape[1]} matrix")
    u, s, vdag = _raw_svd(m)
    total = float(np.sum(s**2))
    keep = min(chi_max, len(s))
    if total > 0.0:
        keep = min(keep, max(1, int(np.count_nonzero(s > RELATIVE_SV_FLOOR * s[0]))))
        discarded = float(np.sum(s[keep:] ** 2)) / total
    else:
        keep, discarded = 1, 0.0
    return SvdResult(u[:, :keep], s[:keep], vdag[:keep, :], discarded)
