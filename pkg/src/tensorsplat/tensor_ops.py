"""Dense third-order tensor algebra: unfoldings, Khatri-Rao products, MTTKRP.

Tensors are plain ``numpy`` arrays of ``float64``. A third-order tensor of
shape ``(n1, n2, n3)`` is stored row-major (C order), so the flat index of
element ``(i, j, k)`` is ``(i * n2 + j) * n3 + k``.

Index conventions, fixed once and asserted by the test suite:

* ``unfold(t, mode)`` puts the ``mode`` coordinate on rows. Columns
  linearize the two remaining modes with the *lower-numbered* remaining
  mode varying slowest; e.g. for ``mode=2`` on an ``(n1, n2, n3)`` tensor,
  element ``(i, j, k)`` lands at row ``j``, column ``i * n3 + k``.
* ``khatri_rao(a, b)`` with ``a`` of shape ``(I, R)`` and ``b`` of shape
  ``(J, R)`` places ``a[ia, r] * b[ib, r]`` at row ``ia * J + ib`` (a-major),
  which pairs with the unfold column order above.

All operations are pure: inputs are never modified.
"""

from __future__ import annotations

import numpy as np

_MODES = (1, 2, 3)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def as_tensor3(t) -> np.ndarray:
    """Validate and return ``t`` as a float64 third-order tensor."""
    arr = np.asarray(t, dtype=np.float64)
    _require(arr.ndim == 3, f"expected a third-order tensor, got ndim={arr.ndim}")
    _require(all(n > 0 for n in arr.shape), f"tensor dims must be positive, got {arr.shape}")
    return arr


def as_mat(m) -> np.ndarray:
    """Validate and return ``m`` as a float64 matrix."""
    arr = np.asarray(m, dtype=np.float64)
    _require(arr.ndim == 2, f"expected a matrix, got ndim={arr.ndim}")
    _require(all(n > 0 for n in arr.shape), f"matrix dims must be positive, got {arr.shape}")
    return arr


def unfold(t, mode: int) -> np.ndarray:
    """Mode-n unfolding of a third-order tensor.

    Row index is the ``mode`` coordinate; the column index linearizes the
    remaining two modes with the lower-numbered mode varying slowest:

    * mode 1: element (i, j, k) -> (i, j * n3 + k)
    * mode 2: element (i, j, k) -> (j, i * n3 + k)
    * mode 3: element (i, j, k) -> (k, i * n2 + j)
    """
    t = as_tensor3(t)
    _require(mode in _MODES, f"mode must be 1, 2 or 3, got {mode}")
    n1, n2, n3 = t.shape
    if mode == 1:
        return t.reshape(n1, n2 * n3).copy()
    if mode == 2:
        return t.transpose(1, 0, 2).reshape(n2, n1 * n3).copy()
    return t.transpose(2, 0, 1).reshape(n3, n1 * n2).copy()


def fold(m, mode: int, dims: tuple[int, int, int]) -> np.ndarray:
    """Exact inverse of :func:`unfold`: rebuild the tensor of shape ``dims``."""
    m = as_mat(m)
    _require(mode in _MODES, f"mode must be 1, 2 or 3, got {mode}")
    _require(len(dims) == 3 and all(int(n) > 0 for n in dims), f"bad dims {dims}")
    n1, n2, n3 = (int(n) for n in dims)
    expected = {
        1: (n1, n2 * n3),
        2: (n2, n1 * n3),
        3: (n3, n1 * n2),
    }[mode]
    _require(
        m.shape == expected,
        f"matrix shape {m.shape} does not match mode-{mode} unfolding of {dims}, expected {expected}",
    )
    if mode == 1:
        return m.reshape(n1, n2, n3).copy()
    if mode == 2:
        return m.reshape(n2, n1, n3).transpose(1, 0, 2).copy()
    return m.reshape(n3, n1, n2).transpose(1, 2, 0).copy()


def khatri_rao(a, b) -> np.ndarray:
    """Column-wise Kronecker product.

    ``a`` is ``(I, R)``, ``b`` is ``(J, R)``; the result is ``(I*J, R)`` with
    entry ``(ia * J + ib, r) = a[ia, r] * b[ib, r]``.
    """
    a = as_mat(a)
    b = as_mat(b)
    _require(
        a.shape[1] == b.shape[1],
        f"column counts must match, got {a.shape[1]} and {b.shape[1]}",
    )
    i, r = a.shape
    j = b.shape[0]
    return (a[:, None, :] * b[None, :, :]).reshape(i * j, r)


def mttkrp(t, f_other1, f_other2, mode: int) -> np.ndarray:
    """Matricized-tensor-times-Khatri-Rao product.

    ``f_other1`` and ``f_other2`` are the factor matrices of the two modes
    other than ``mode``, in ascending mode order (so for ``mode=2`` they are
    the mode-1 and mode-3 factors). Returns
    ``unfold(t, mode) @ khatri_rao(f_other1, f_other2)``.
    """
    t = as_tensor3(t)
    _require(mode in _MODES, f"mode must be 1, 2 or 3, got {mode}")
    f1 = as_mat(f_other1)
    f2 = as_mat(f_other2)
    _require(f1.shape[1] == f2.shape[1], "factors must share a common rank")
    other_dims = {
        1: (t.shape[1], t.shape[2]),
        2: (t.shape[0], t.shape[2]),
        3: (t.shape[0], t.shape[1]),
    }[mode]
    _require(
        (f1.shape[0], f2.shape[0]) == other_dims,
        f"factor rows {(f1.shape[0], f2.shape[0])} do not match tensor dims {other_dims} for mode {mode}",
    )
    return unfold(t, mode) @ khatri_rao(f1, f2)


def frob_norm(t) -> float:
    """Frobenius norm of an array of any shape."""
    return float(np.linalg.norm(np.asarray(t, dtype=np.float64).ravel()))


def rel_error(t, approx) -> float:
    """Relative reconstruction error ``||t - approx||_F / ||t||_F``.

    Defined as 0 when both arguments are exactly zero.
    """
    t = np.asarray(t, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    _require(t.shape == approx.shape, f"shape mismatch {t.shape} vs {approx.shape}")
    denom = frob_norm(t)
    num = frob_norm(t - approx)
    if denom == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / denom
