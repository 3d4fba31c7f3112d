"""Forward-mode automatic differentiation on sparse Jacobians.

An :class:`AdArray` carries a value vector and the sparse Jacobian of that
vector with respect to the global unknown vector. Only the operations needed
by the residual assembly are supported.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sps


class AdArray:
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, val, jac):
        self.val = np.asarray(val, dtype=float)
        self.jac = jac if type(jac) is sps.csr_matrix else sps.csr_matrix(jac)
        if self.jac.shape[0] != self.val.size:
            raise ValueError("value and Jacobian row counts differ")

    @property
    def size(self) -> int:
        return self.val.size

    @property
    def num_dofs(self) -> int:
        return self.jac.shape[1]

    def __repr__(self) -> str:
        return f"AdArray(size={self.size}, dofs={self.num_dofs})"

    def _zero_jac(self, n):
        return sps.csr_matrix((n, self.num_dofs))

    def _lift(self, other) -> AdArray:
        if isinstance(other, AdArray):
            return other
        v = np.broadcast_to(np.asarray(other, dtype=float), self.val.shape)
        return AdArray(v.copy(), self._zero_jac(self.size))

    def __add__(self, other):
        if isinstance(other, AdArray):
            return AdArray(self.val + other.val, self.jac + other.jac)
        return AdArray(self.val + other, self.jac)

    __radd__ = __add__

    def __neg__(self):
        return AdArray(-self.val, -self.jac)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, AdArray):
            jac = _scale_rows(self.jac, other.val) + _scale_rows(other.jac, self.val)
            return AdArray(self.val * other.val, jac)
        other = np.asarray(other, dtype=float)
        return AdArray(self.val * other, _scale_rows(self.jac, np.broadcast_to(other, self.val.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, AdArray):
            return self * other.reciprocal()
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def reciprocal(self) -> AdArray:
        return AdArray(1.0 / self.val, _scale_rows(self.jac, -1.0 / self.val**2))

    def __pow__(self, exponent: float):
        exponent = float(exponent)
        return AdArray(
            self.val**exponent,
            _scale_rows(self.jac, exponent * self.val ** (exponent - 1.0)),
        )

    def __rmatmul__(self, mat):
        jac = mat @ self.jac
        return AdArray(mat @ self.val, jac if sps.issparse(jac) else sps.csr_matrix(jac))

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return AdArray(self.val[idx], self.jac[idx])
        idx = np.arange(self.size)[idx]
        return AdArray(self.val[idx], self.jac[idx])


def _scale_rows(jac: sps.csr_matrix, w: np.ndarray) -> sps.csr_matrix:
    out = jac.copy()
    out.data *= np.repeat(np.asarray(w, dtype=float), np.diff(jac.indptr))
    return out


def as_ad(x, num_dofs: int) -> AdArray:
    """Wrap a constant vector as an AdArray with zero Jacobian."""
    if isinstance(x, AdArray):
        return x
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return AdArray(x, sps.csr_matrix((x.size, num_dofs)))


def value(x) -> np.ndarray:
    return x.val if isinstance(x, AdArray) else np.asarray(x, dtype=float)


def matmul(mat, x):
    """Sparse (or dense) matrix times AdArray or plain vector."""
    if isinstance(x, AdArray):
        return x.__rmatmul__(mat)
    return mat @ x


def concatenate(parts: list, num_dofs: int) -> AdArray:
    parts = [as_ad(p, num_dofs) for p in parts]
    val = np.concatenate([p.val for p in parts]) if parts else np.zeros(0)
    jac = sps.vstack([p.jac for p in parts], format="csr") if parts else sps.csr_matrix((0, num_dofs))
    return AdArray(val, jac)


def maximum(x, floor: float):
    """Elementwise max with a constant; derivative zero where the floor is active."""
    if not isinstance(x, AdArray):
        return np.maximum(x, floor)
    active = x.val > floor
    return AdArray(np.where(active, x.val, floor), _scale_rows(x.jac, active.astype(float)))
