"""Forward-mode algorithmic differentiation with vector-valued dual numbers.

A :class:`Dual` carries a value vector ``val`` of shape ``(m,)`` and its
Jacobian ``jac`` of shape ``(m, n)`` with respect to ``n`` seed variables.
Arithmetic and a handful of numpy ufuncs propagate both, so plain numpy
expressions such as ``np.sqrt(x * x + c)`` differentiate without change.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class Dual:
    __array_priority__ = 1000

    __slots__ = ("val", "jac")

    def __init__(self, val, jac):
        self.val = np.asarray(val, dtype=float)
        self.jac = np.asarray(jac, dtype=float)
        if self.val.ndim != 1 or self.jac.ndim != 2 or self.jac.shape[0] != self.val.shape[0]:
            raise ValueError(f"inconsistent dual shapes {self.val.shape} and {self.jac.shape}")

    @classmethod
    def variables(cls, z) -> "Dual":
        z = np.asarray(z, dtype=float).ravel()
        return cls(z.copy(), np.eye(len(z)))

    @classmethod
    def constant(cls, val, n: int) -> "Dual":
        val = np.atleast_1d(np.asarray(val, dtype=float))
        return cls(val, np.zeros((len(val), n)))

    @property
    def nvars(self) -> int:
        return self.jac.shape[1]

    def __len__(self):
        return len(self.val)

    def __repr__(self):
        return f"Dual(val={self.val!r}, jac.shape={self.jac.shape})"

    def __getitem__(self, idx):
        val = self.val[idx]
        jac = self.jac[idx]
        if np.ndim(val) == 0:
            return Dual(val[None], jac[None])
        return Dual(val, jac)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            val = self.val + other.val
            jac = self.jac + other.jac
        else:
            val = self.val + np.asarray(other, dtype=float)
            jac = self.jac
        if jac.shape[0] != len(val):
            jac = np.broadcast_to(jac, (len(val), self.nvars))
        return Dual(val, jac)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.val, -self.jac)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val * other.val,
                        self.jac * other.val[:, None] + other.jac * self.val[:, None])
        other = np.asarray(other, dtype=float)
        col = other[:, None] if other.ndim == 1 else other
        return Dual(self.val * other, self.jac * col)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            return Dual(self.val * inv,
                        self.jac * inv[:, None] - other.jac * (self.val * inv * inv)[:, None])
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        inv = 1.0 / self.val
        other = np.asarray(other, dtype=float)
        return Dual(other * inv, -self.jac * (other * inv * inv)[:, None])

    def __pow__(self, k):
        if isinstance(k, Dual):
            raise TypeError("dual exponents are not supported")
        k = float(k)
        return Dual(self.val**k, self.jac * (k * self.val ** (k - 1.0))[:, None])

    def __rmatmul__(self, mat):
        """``mat @ dual`` for a dense or sparse ``(p, m)`` matrix."""
        return Dual(np.asarray(mat @ self.val).ravel(), np.asarray(mat @ self.jac))

    def sum(self) -> "Dual":
        return Dual(self.val.sum(keepdims=True), self.jac.sum(axis=0, keepdims=True))

    # numpy interop ---------------------------------------------------------
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        handler = _UFUNCS.get(ufunc)
        if handler is None:
            return NotImplemented
        return handler(*inputs)


def _unary(fn, dfn):
    def apply(x):
        v = fn(x.val)
        return Dual(v, x.jac * dfn(x.val, v)[:, None])
    return apply


def _logaddexp(a, b):
    if not isinstance(a, Dual):
        a, b = b, a
        if not isinstance(a, Dual):
            raise TypeError
    if isinstance(b, Dual):
        v = np.logaddexp(a.val, b.val)
        wa = np.exp(a.val - v)
        wb = np.exp(b.val - v)
        return Dual(v, a.jac * wa[:, None] + b.jac * wb[:, None])
    b = np.asarray(b, dtype=float)
    v = np.logaddexp(a.val, b)
    return Dual(v, a.jac * expit(a.val - b)[:, None])


_UFUNCS = {
    np.add: lambda a, b: a + b if isinstance(a, Dual) else b + a,
    np.subtract: lambda a, b: a - b if isinstance(a, Dual) else (-b) + a,
    np.multiply: lambda a, b: a * b if isinstance(a, Dual) else b * a,
    np.true_divide: lambda a, b: a / b if isinstance(a, Dual) else b.__rtruediv__(a),
    np.negative: lambda a: -a,
    np.exp: _unary(np.exp, lambda x, v: v),
    np.log: _unary(np.log, lambda x, v: 1.0 / x),
    np.log1p: _unary(np.log1p, lambda x, v: 1.0 / (1.0 + x)),
    np.sqrt: _unary(np.sqrt, lambda x, v: 0.5 / v),
    np.square: _unary(np.square, lambda x, v: 2.0 * x),
    np.logaddexp: _logaddexp,
    np.matmul: lambda a, b: b.__rmatmul__(a),
}


def concatenate(parts) -> Dual:
    return Dual(np.concatenate([p.val for p in parts]), np.vstack([p.jac for p in parts]))


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def softplus(x):
    """``log(1 + exp(x))``, stable for large ``|x|``."""
    return np.logaddexp(0.0, x) if not isinstance(x, Dual) else _logaddexp(x, 0.0)


def logsumexp_rows(terms: list) -> Dual | np.ndarray:
    """Elementwise ``log(sum_j exp(terms[j]))`` with a max shift."""
    shift = np.max(np.stack([value(t) for t in terms]), axis=0)
    acc = None
    for t in terms:
        e = np.exp(t - shift)
        acc = e if acc is None else acc + e
    return np.log(acc) + shift
