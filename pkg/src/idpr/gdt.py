"""Generalized distance transform for concave quadratic costs.

For a score array ``f`` and a concave quadratic ``a*d**2 + b*d`` (``a < 0``)
the transform computes, for every output position ``p``::

    values[p] = max_q  f[q] + a*(p - q)**2 + b*(p - q)

in O(L) time by maintaining the upper envelope of the downward parabolas
rooted at each ``q`` (Felzenszwalb & Huttenlocher).  The 2D transform is two
separable 1D passes.

Two kernels implement the envelope sweep over a batch of rows: a numba loop
and a numpy version that vectorizes across rows.  Both return the same argmax
(smallest ``q`` on exact ties) and values recomputed directly from the argmax,
so results agree with a brute-force scan to the last bit whenever the
argmax agrees.
"""
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import ConcavityError

#: Smallest admissible magnitude of a quadratic coefficient.
MIN_CURVATURE = 1e-4


@_accel.njit(cache=True)
def _envelope_rows_numba(h, shift, arg):
    rows, n = h.shape
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    for row in range(rows):
        k = 0
        v[0] = 0
        z[0] = -np.inf
        z[1] = np.inf
        for q in range(1, n):
            while True:
                vk = v[k]
                s = (h[row, q] - h[row, vk]) / (2.0 * (q - vk))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = np.inf
        k = 0
        for p in range(n):
            x = p - shift
            while z[k + 1] < x:
                k += 1
            arg[row, p] = v[k]


def _envelope_rows_numpy(h, shift, arg):
    rows, n = h.shape
    idx = np.arange(rows)
    v = np.zeros((rows, n), dtype=np.int64)
    z = np.empty((rows, n + 1))
    z[:, 0] = -np.inf
    z[:, 1] = np.inf
    k = np.zeros(rows, dtype=np.int64)
    s_new = np.empty(rows)
    for q in range(1, n):
        act = idx
        while act.size:
            ka = k[act]
            vk = v[act, ka]
            s = (h[act, q] - h[act, vk]) / (2.0 * (q - vk))
            pop = s <= z[act, ka]
            keep = ~pop
            s_new[act[keep]] = s[keep]
            act = act[pop]
            k[act] -= 1
        k += 1
        v[idx, k] = q
        z[idx, k] = s_new
        z[idx, k + 1] = np.inf
    k[:] = 0
    for p in range(n):
        x = p - shift
        act = idx
        while act.size:
            act = act[z[act, k[act] + 1] < x]
            k[act] += 1
        arg[:, p] = v[idx, k]


def _transform_rows(f, a, b):
    """Unchecked batched 1D transform along the last axis of a 2D array."""
    rows, n = f.shape
    # max_q f[q] - A (x - q)^2 with A = -a, x = p - b / (2A)
    curv = -a
    q = np.arange(n, dtype=np.float64)
    h = np.ascontiguousarray(-f / curv + q * q)
    shift = b / (2.0 * curv)
    arg = np.empty((rows, n), dtype=np.int64)
    if _accel.backend() == "numba":
        _envelope_rows_numba(h, float(shift), arg)
    else:
        _envelope_rows_numpy(h, float(shift), arg)
    d = np.arange(n)[None, :] - arg
    values = np.take_along_axis(f, arg, axis=1) + a * d * d + b * d
    return values, arg


def _check_curvature(a, limit=0.0):
    if not np.isfinite(a) or a >= limit:
        raise ConcavityError(f"quadratic coefficient {a!r} must be < {limit}")


def gdt_1d(f, a, bcoef=0.0):
    """Exact 1D transform ``max_q f[q] + a*(p-q)**2 + bcoef*(p-q)``.

    Returns ``(values, argmax)``.  Raises :class:`ConcavityError` for ``a >= 0``.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 1 or f.size < 1:
        raise ValueError("f must be a non-empty 1D array")
    if not np.all(np.isfinite(f)):
        raise ValueError("f must be finite")
    _check_curvature(a)
    values, arg = _transform_rows(f[None, :], float(a), float(bcoef))
    return values[0], arg[0]


@dataclass(frozen=True)
class QuadCost:
    """Per-axis concave quadratic ``a*d**2 + bcoef*d`` with ``d = p - q - r``.

    Each field is an ``(x, y)`` pair.
    """
    a: tuple
    bcoef: tuple = (0.0, 0.0)
    r: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("a", "bcoef", "r"):
            val = tuple(float(c) for c in getattr(self, name))
            if len(val) != 2:
                raise ValueError(f"{name} must have one entry per axis")
            object.__setattr__(self, name, val)

    def validate(self):
        for a in self.a:
            if not np.isfinite(a) or a > -MIN_CURVATURE:
                raise ConcavityError(
                    f"quadratic coefficient {a!r} must be <= {-MIN_CURVATURE}")

    def folded(self, axis):
        """``(a, b, const)`` with the offset folded in: the axis cost equals
        ``a*e**2 + b*e + const`` for ``e = p - q``."""
        a, b, r = self.a[axis], self.bcoef[axis], self.r[axis]
        return a, b - 2.0 * a * r, a * r * r - b * r


def gdt_2d_unchecked(f, cost):
    """:func:`gdt_2d` without input validation; used on the inference hot path."""
    ax, bx, _ = cost.folded(0)
    ay, by, _ = cost.folded(1)
    # f is indexed [y, x]: rows first, then columns
    v1, argx = _transform_rows(f, ax, bx)
    _, argyt = _transform_rows(np.ascontiguousarray(v1.T), ay, by)
    argy = argyt.T
    h, w = f.shape
    px = np.arange(w)[None, :]
    py = np.arange(h)[:, None]
    qx = argx[argy, px]
    dx = px - qx - cost.r[0]
    dy = py - argy - cost.r[1]
    values = (f[argy, qx] + cost.a[0] * dx * dx + cost.bcoef[0] * dx
              + cost.a[1] * dy * dy + cost.bcoef[1] * dy)
    return values, qx, argy


def gdt_2d(f, cost):
    """Exact 2D transform of a grid ``f`` indexed ``[y, x]``.

    ``values[y, x] = max_q f[q] + sum_axis a*d**2 + bcoef*d`` with
    ``d = p - q - r`` per axis.  Returns ``(values, argmax)`` where
    ``argmax[y, x] = (qx, qy)``.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.size < 1:
        raise ValueError("f must be a non-empty 2D grid")
    if not np.all(np.isfinite(f)):
        raise ValueError("f must be finite")
    cost.validate()
    values, qx, qy = gdt_2d_unchecked(f, cost)
    return values, np.stack([qx, qy], axis=-1)
