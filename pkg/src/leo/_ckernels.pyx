# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled fast paths for the array kernels.

Same contract as ``leo._kernels_np``: float64 in, C-contiguous float64 out,
NaN-propagating division, log and sqrt. Inputs that fall outside the fast
paths are handed to the numpy implementations, so both backends accept the
exact same set of inputs and differ only in speed and last-ulp rounding.
"""

from libc.math cimport NAN
from libc.math cimport exp as c_exp
from libc.math cimport log as c_log
from libc.math cimport sqrt as c_sqrt

import numpy as np

from . import _kernels_np as _fallback

_F64 = np.dtype(np.float64)

_FB2 = (_fallback.add, _fallback.sub, _fallback.mul, _fallback.div)
_FB1 = (
    _fallback.neg,
    _fallback.exp,
    _fallback.square,
    _fallback.sqrt,
    _fallback.log,
    _fallback.relu,
)

# Multiply-add count above which BLAS beats the naive triple loop.
# Measured on the benchmark machine: BLAS-backed np.matmul beats the naive
# triple loop at every shape tried, down to 2x4x4, so the naive kernel is
# kept only as a reference path and never chosen by default.
cdef Py_ssize_t _NAIVE_MM_LIMIT = 0


cdef int _fast_ok(object a) except -1:
    if not isinstance(a, np.ndarray):
        return 0
    if a.dtype != _F64:
        return 0
    return 1 if a.flags.c_contiguous else 0


cdef inline double _apply(int op, double x, double y) noexcept nogil:
    if op == 0:
        return x + y
    elif op == 1:
        return x - y
    elif op == 2:
        return x * y
    return x / y


cdef inline double _apply1(int op, double x) noexcept nogil:
    if op == 0:
        return -x
    elif op == 1:
        return c_exp(x)
    elif op == 2:
        return x * x
    elif op == 3:
        return c_sqrt(x)
    elif op == 4:
        return c_log(x) if x > 0.0 else NAN
    # relu: keep NaN (numpy maximum propagates it), clamp the rest at zero.
    if x > 0.0:
        return x
    return x if x != x else 0.0


cdef _binary(int op, object a_obj, object b_obj):
    cdef object a = np.asarray(a_obj)
    cdef object b = np.asarray(b_obj)
    if not (_fast_ok(a) and _fast_ok(b)):
        return _FB2[op](a, b)
    cdef object big, small, out
    cdef bint big_left
    cdef Py_ssize_t i, r, c, n, rows, cols
    cdef double s
    cdef double[::1] xv, yv, ov
    cdef double[:, ::1] Xm, Om
    if a.shape == b.shape:
        out = np.empty_like(a)
        xv = a.ravel()
        yv = b.ravel()
        ov = out.ravel()
        n = xv.shape[0]
        with nogil:
            for i in range(n):
                ov[i] = _apply(op, xv[i], yv[i])
        return out
    if a.size >= b.size:
        big = a
        small = b
        big_left = True
    else:
        big = b
        small = a
        big_left = False
    if small.size == 1:
        out = np.empty_like(big)
        xv = big.ravel()
        ov = out.ravel()
        s = small.ravel()[0]
        n = xv.shape[0]
        if big_left:
            with nogil:
                for i in range(n):
                    ov[i] = _apply(op, xv[i], s)
        else:
            with nogil:
                for i in range(n):
                    ov[i] = _apply(op, s, xv[i])
        return out
    if big.ndim == 2:
        rows = big.shape[0]
        cols = big.shape[1]
        if small.shape == (cols,) or small.shape == (1, cols):
            out = np.empty_like(big)
            Xm = big
            Om = out
            yv = small.ravel()
            if big_left:
                with nogil:
                    for r in range(rows):
                        for c in range(cols):
                            Om[r, c] = _apply(op, Xm[r, c], yv[c])
            else:
                with nogil:
                    for r in range(rows):
                        for c in range(cols):
                            Om[r, c] = _apply(op, yv[c], Xm[r, c])
            return out
        if small.shape == (rows, 1):
            out = np.empty_like(big)
            Xm = big
            Om = out
            yv = small.ravel()
            if big_left:
                with nogil:
                    for r in range(rows):
                        for c in range(cols):
                            Om[r, c] = _apply(op, Xm[r, c], yv[r])
            else:
                with nogil:
                    for r in range(rows):
                        for c in range(cols):
                            Om[r, c] = _apply(op, yv[r], Xm[r, c])
            return out
    return _FB2[op](a, b)


cdef _unary(int op, object a_obj):
    cdef object a = np.asarray(a_obj)
    if not _fast_ok(a):
        return _FB1[op](a)
    cdef object out = np.empty_like(a)
    cdef double[::1] xv = a.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = _apply1(op, xv[i])
    return out


def add(a, b):
    return _binary(0, a, b)


def sub(a, b):
    return _binary(1, a, b)


def mul(a, b):
    return _binary(2, a, b)


def div(a, b):
    return _binary(3, a, b)


def neg(a):
    return _unary(0, a)


def exp(a):
    return _unary(1, a)


def square(a):
    return _unary(2, a)


def sqrt(a):
    return _unary(3, a)


def log(a):
    return _unary(4, a)


def relu(a):
    return _unary(5, a)


def matmul(a, b):
    cdef object aa = np.asarray(a)
    cdef object bb = np.asarray(b)
    if not (_fast_ok(aa) and _fast_ok(bb)):
        return _fallback.matmul(aa, bb)
    if aa.ndim != 2 or bb.ndim != 2 or aa.shape[1] != bb.shape[0]:
        return _fallback.matmul(aa, bb)
    cdef Py_ssize_t m = aa.shape[0]
    cdef Py_ssize_t kk = aa.shape[1]
    cdef Py_ssize_t n = bb.shape[1]
    if m * kk * n > _NAIVE_MM_LIMIT:
        return np.matmul(aa, bb)
    cdef object out = np.empty((m, n), dtype=_F64)
    cdef double[:, ::1] A = aa
    cdef double[:, ::1] B = bb
    cdef double[:, ::1] O = out
    cdef Py_ssize_t i, j, k
    cdef double acc
    with nogil:
        for i in range(m):
            for j in range(n):
                O[i, j] = 0.0
            for k in range(kk):
                acc = A[i, k]
                for j in range(n):
                    O[i, j] = O[i, j] + acc * B[k, j]
    return out


def transpose(a):
    cdef object aa = np.asarray(a)
    if not _fast_ok(aa) or aa.ndim != 2:
        return _fallback.transpose(aa)
    cdef Py_ssize_t m = aa.shape[0]
    cdef Py_ssize_t n = aa.shape[1]
    cdef object out = np.empty((n, m), dtype=_F64)
    cdef double[:, ::1] A = aa
    cdef double[:, ::1] O = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                O[j, i] = A[i, j]
    return out


def reduce_sum(a, axes):
    cdef object aa = np.asarray(a)
    if not _fast_ok(aa):
        return _fallback.reduce_sum(aa, axes)
    cdef double total
    cdef Py_ssize_t i, j, rows, cols
    cdef double[::1] flat, ov
    cdef double[:, ::1] M
    cdef object out
    cdef bint full = axes is None
    if not full and 0 < len(axes) == aa.ndim:
        full = tuple(sorted(axes)) == tuple(range(aa.ndim))
    if full:
        flat = aa.ravel()
        rows = flat.shape[0]
        total = 0.0
        with nogil:
            for i in range(rows):
                total += flat[i]
        return np.asarray(total, dtype=_F64)
    if aa.ndim == 2 and len(axes) == 1:
        rows = aa.shape[0]
        cols = aa.shape[1]
        M = aa
        if axes[0] == 0:
            out = np.zeros(cols, dtype=_F64)
            ov = out
            with nogil:
                for i in range(rows):
                    for j in range(cols):
                        ov[j] += M[i, j]
            return out
        if axes[0] == 1:
            out = np.empty(rows, dtype=_F64)
            ov = out
            with nogil:
                for i in range(rows):
                    total = 0.0
                    for j in range(cols):
                        total += M[i, j]
                    ov[i] = total
            return out
    return _fallback.reduce_sum(aa, axes)


def broadcast_to(a, shape):
    # Plain copy; numpy is already optimal here.
    return _fallback.broadcast_to(a, shape)
