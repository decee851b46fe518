"""Forward-mode derivative engine with a second-order extension.

Derivatives are propagated by operator overloading on :class:`DiffScalar`,
which carries a value, a tangent vector (first order) and optionally a
curvature matrix (second order).  Values may be scalars or numpy arrays, so
whole batches of structurally identical evaluations (e.g. all shooting
stages of an optimal control problem) can share one sweep.

Everything here is exact to machine precision; the ``fd_*`` helpers provide
the independent central finite-difference cross checks used by the tests.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DiffScalar",
    "DomainError",
    "seed",
    "gradient",
    "jacobian",
    "lagrangian_hessian",
    "fd_gradient",
    "fd_jacobian",
    "fd_hessian",
    "sin",
    "cos",
    "tan",
    "arctan",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "maximum",
    "value_of",
]


class DomainError(ValueError):
    """A function evaluated to a non-finite value at the requested point."""


def _outer(a, b):
    # symmetric-rank-one building block, batched over leading axes
    return a[..., :, None] * b[..., None, :]


class DiffScalar:
    """Scalar with attached first- and (optionally) second-order tangents.

    ``v`` is the value, ``d1`` has shape ``(..., p)`` for ``p`` seed
    directions and ``d2``, when present, has shape ``(..., p, p)`` and is
    kept exactly symmetric by construction.  Arithmetic follows the chain
    rule; mixing with plain numbers/arrays treats them as constants.
    """

    __slots__ = ("v", "d1", "d2")

    def __init__(self, v, d1, d2=None):
        self.v = v
        self.d1 = d1
        self.d2 = d2

    # -- helpers ---------------------------------------------------------

    @property
    def order(self):
        return 2 if self.d2 is not None else 1

    def _zero_like(self, c):
        z1 = np.zeros_like(self.d1)
        z2 = None if self.d2 is None else np.zeros_like(self.d2)
        return DiffScalar(c, z1, z2)

    def _lift(self, other):
        if isinstance(other, DiffScalar):
            return other
        return self._zero_like(other)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, DiffScalar):
            d2 = None
            if self.d2 is not None:
                d2 = self.d2 + other.d2
            return DiffScalar(self.v + other.v, self.d1 + other.d1, d2)
        return DiffScalar(self.v + other, self.d1, self.d2)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, DiffScalar):
            d2 = None
            if self.d2 is not None:
                d2 = self.d2 - other.d2
            return DiffScalar(self.v - other.v, self.d1 - other.d1, d2)
        return DiffScalar(self.v - other, self.d1, self.d2)

    def __rsub__(self, other):
        d2 = None if self.d2 is None else -self.d2
        return DiffScalar(other - self.v, -self.d1, d2)

    def __mul__(self, other):
        if isinstance(other, DiffScalar):
            av, bv = np.asarray(self.v), np.asarray(other.v)
            d1 = self.d1 * bv[..., None] + other.d1 * av[..., None]
            d2 = None
            if self.d2 is not None:
                cross = _outer(self.d1, other.d1)
                d2 = (
                    self.d2 * bv[..., None, None]
                    + other.d2 * av[..., None, None]
                    + cross
                    + np.swapaxes(cross, -1, -2)
                )
            return DiffScalar(self.v * other.v, d1, d2)
        ov = np.asarray(other)
        d2 = None if self.d2 is None else self.d2 * ov[..., None, None]
        return DiffScalar(self.v * other, self.d1 * ov[..., None], d2)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, DiffScalar):
            bv = np.asarray(other.v)
            wv = self.v / other.v
            d1 = (self.d1 - np.asarray(wv)[..., None] * other.d1) / bv[..., None]
            d2 = None
            if self.d2 is not None:
                cross = _outer(d1, other.d1)
                d2 = (
                    self.d2
                    - np.asarray(wv)[..., None, None] * other.d2
                    - cross
                    - np.swapaxes(cross, -1, -2)
                ) / bv[..., None, None]
            return DiffScalar(wv, d1, d2)
        inv = 1.0 / np.asarray(other)
        d2 = None if self.d2 is None else self.d2 * inv[..., None, None]
        return DiffScalar(self.v * inv, self.d1 * inv[..., None], d2)

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        d2 = None if self.d2 is None else -self.d2
        return DiffScalar(-self.v, -self.d1, d2)

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("exponent must be a plain number")
        v = np.asarray(self.v)
        return self._chain(self.v**k, k * v ** (k - 1), k * (k - 1) * v ** (k - 2))

    # comparisons operate on values (used for branching, e.g. maximum)
    def __lt__(self, other):
        return self.v < value_of(other)

    def __le__(self, other):
        return self.v <= value_of(other)

    def __gt__(self, other):
        return self.v > value_of(other)

    def __ge__(self, other):
        return self.v >= value_of(other)

    def __repr__(self):
        return f"DiffScalar(v={self.v!r}, order={self.order})"

    # -- elementary functions ---------------------------------------------

    def _chain(self, g, dg, ddg):
        """Apply a scalar function with derivative dg and second derivative ddg."""
        dg = np.asarray(dg)
        d1 = dg[..., None] * self.d1
        d2 = None
        if self.d2 is not None:
            d2 = dg[..., None, None] * self.d2 + np.asarray(ddg)[..., None, None] * _outer(
                self.d1, self.d1
            )
        return DiffScalar(g, d1, d2)

    def sin(self):
        s, c = np.sin(self.v), np.cos(self.v)
        return self._chain(s, c, -s)

    def cos(self):
        s, c = np.sin(self.v), np.cos(self.v)
        return self._chain(c, -s, -c)

    def tan(self):
        t = np.tan(self.v)
        sec2 = 1.0 + t * t
        return self._chain(t, sec2, 2.0 * t * sec2)

    def arctan(self):
        den = 1.0 + np.asarray(self.v) ** 2
        d = 1.0 / den
        return self._chain(np.arctan(self.v), d, -2.0 * np.asarray(self.v) * d * d)

    def tanh(self):
        t = np.tanh(self.v)
        sech2 = 1.0 - t * t
        return self._chain(t, sech2, -2.0 * t * sech2)

    def exp(self):
        e = np.exp(self.v)
        return self._chain(e, e, e)

    def log(self):
        v = np.asarray(self.v)
        return self._chain(np.log(self.v), 1.0 / v, -1.0 / (v * v))

    def sqrt(self):
        r = np.sqrt(self.v)
        ra = np.asarray(r)
        return self._chain(r, 0.5 / ra, -0.25 / (ra * ra * ra))

    def maximum(self, floor):
        """max(self, floor) for a constant floor; the floor branch has zero slope."""
        mask = np.asarray(self.v) > floor
        m1 = mask[..., None].astype(float) if np.ndim(mask) else float(mask)
        d1 = self.d1 * m1
        d2 = None
        if self.d2 is not None:
            m2 = mask[..., None, None].astype(float) if np.ndim(mask) else float(mask)
            d2 = self.d2 * m2
        return DiffScalar(np.maximum(self.v, floor), d1, d2)


# -- dispatch helpers: work on DiffScalar, ndarray or plain floats ---------


def value_of(x):
    return x.v if isinstance(x, DiffScalar) else x


def sin(x):
    return x.sin() if isinstance(x, DiffScalar) else np.sin(x)


def cos(x):
    return x.cos() if isinstance(x, DiffScalar) else np.cos(x)


def tan(x):
    return x.tan() if isinstance(x, DiffScalar) else np.tan(x)


def arctan(x):
    return x.arctan() if isinstance(x, DiffScalar) else np.arctan(x)


def tanh(x):
    return x.tanh() if isinstance(x, DiffScalar) else np.tanh(x)


def exp(x):
    return x.exp() if isinstance(x, DiffScalar) else np.exp(x)


def log(x):
    return x.log() if isinstance(x, DiffScalar) else np.log(x)


def sqrt(x):
    return x.sqrt() if isinstance(x, DiffScalar) else np.sqrt(x)


def maximum(x, floor):
    return x.maximum(floor) if isinstance(x, DiffScalar) else np.maximum(x, floor)


# -- seeding and driver routines -------------------------------------------


def seed(x, order=1):
    """Turn a 1-D point into a list of DiffScalar with identity tangents."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    out = []
    eye = np.eye(n)
    for i in range(n):
        d2 = np.zeros((n, n)) if order == 2 else None
        out.append(DiffScalar(float(x[i]), eye[i].copy(), d2))
    return out


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise DomainError("function evaluated to a non-finite value")


def gradient(f, x):
    """Exact gradient of a scalar function built from the supported primitives."""
    out = f(seed(x, order=1))
    if not isinstance(out, DiffScalar):
        # constant function: no dependence on x at all
        _check_finite(out)
        return np.zeros(len(np.asarray(x, dtype=float)))
    _check_finite(out.v)
    _check_finite(out.d1)
    return np.array(out.d1, dtype=float)


def jacobian(f, x, pattern=None):
    """Exact Jacobian of a vector function, returned as CSR.

    ``pattern``, when given as a (rows, cols) index pair, restricts the
    stored entries; it must be a superset of the structural nonzeros.
    """
    x = np.asarray(x, dtype=float)
    xs = seed(x, order=1)
    outs = f(xs)
    n = x.shape[0]
    if len(outs) == 0:
        return sp.csr_matrix((0, n))
    rows = []
    for o in outs:
        if isinstance(o, DiffScalar):
            _check_finite(o.v)
            rows.append(np.asarray(o.d1, dtype=float))
        else:
            _check_finite(o)
            rows.append(np.zeros(n))
    dense = np.vstack(rows)
    if pattern is not None:
        r, c = pattern
        mat = sp.csr_matrix((dense[r, c], (r, c)), shape=dense.shape)
        return mat
    return sp.csr_matrix(dense)


def lagrangian_hessian(f, g, x, multipliers=None):
    """Exact Hessian of f(x) + multipliers . g(x), symmetric by construction.

    ``g`` may be ``None`` for a plain objective Hessian.  Returned as CSC.
    """
    x = np.asarray(x, dtype=float)
    xs = seed(x, order=2)
    total = f(xs)
    if g is not None and multipliers is not None:
        cons = g(xs)
        for lam_i, c_i in zip(np.asarray(multipliers, dtype=float), cons):
            if isinstance(c_i, DiffScalar):
                total = total + lam_i * c_i
    if not isinstance(total, DiffScalar):
        _check_finite(total)
        n = x.shape[0]
        return sp.csc_matrix((n, n))
    _check_finite(total.v)
    _check_finite(total.d2)
    return sp.csc_matrix(np.asarray(total.d2, dtype=float))


# -- finite-difference cross checks ----------------------------------------

# step balances truncation against round-off for central differences
FD_REL_STEP = 1e-5


def _steps(x):
    return FD_REL_STEP * np.maximum(1.0, np.abs(x))


def fd_gradient(f, x):
    """Central finite-difference gradient (the independent cross check)."""
    x = np.asarray(x, dtype=float)
    h = _steps(x)
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        out[i] = (f(xp) - f(xm)) / (2.0 * h[i])
    return out


def fd_jacobian(f, x):
    x = np.asarray(x, dtype=float)
    h = _steps(x)
    cols = []
    for i in range(x.shape[0]):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h[i]))
    return np.stack(cols, axis=1)


def fd_hessian(f, x):
    """Central second differences of a scalar function."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    h = _steps(x)
    out = np.zeros((n, n))
    f0 = f(x)
    for i in range(n):
        for j in range(i, n):
            if i == j:
                xp, xm = x.copy(), x.copy()
                xp[i] += h[i]
                xm[i] -= h[i]
                out[i, i] = (f(xp) - 2.0 * f0 + f(xm)) / h[i] ** 2
            else:
                xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
                xpp[[i, j]] += [h[i], h[j]]
                xpm[i] += h[i]
                xpm[j] -= h[j]
                xmp[i] -= h[i]
                xmp[j] += h[j]
                xmm[[i, j]] -= [h[i], h[j]]
                out[i, j] = out[j, i] = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (
                    4.0 * h[i] * h[j]
                )
    return out
