# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched scan combinators.

Same contract as ``_pykernels``: C-contiguous float64 stacks in, new stacks
out. Each backward combination factorizes ``I + P2 C1`` once with partial
pivoting and reuses the factors for the transposed solves.
"""
import numpy as np

from libc.math cimport fabs
from libc.stdlib cimport free, malloc

from ..errors import SingularBlockError

BACKEND = "cython"


cdef int _lu_factor(double* a, int* piv, int n) noexcept nogil:
    cdef int i, j, k, p
    cdef double amax, t, l
    for k in range(n):
        p = k
        amax = fabs(a[k * n + k])
        for i in range(k + 1, n):
            t = fabs(a[i * n + k])
            if t > amax:
                amax = t
                p = i
        piv[k] = p
        if amax == 0.0:
            return k + 1
        if p != k:
            for j in range(n):
                t = a[k * n + j]
                a[k * n + j] = a[p * n + j]
                a[p * n + j] = t
        for i in range(k + 1, n):
            l = a[i * n + k] / a[k * n + k]
            a[i * n + k] = l
            for j in range(k + 1, n):
                a[i * n + j] -= l * a[k * n + j]
    return 0


cdef void _lu_solve(const double* lu, const int* piv, double* b, int n, int m) noexcept nogil:
    # solve G X = B, B is n x m row-major, overwritten
    cdef int i, j, k, p
    cdef double t, l
    for k in range(n):
        p = piv[k]
        if p != k:
            for j in range(m):
                t = b[k * m + j]
                b[k * m + j] = b[p * m + j]
                b[p * m + j] = t
    for i in range(1, n):
        for k in range(i):
            l = lu[i * n + k]
            if l != 0.0:
                for j in range(m):
                    b[i * m + j] -= l * b[k * m + j]
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            l = lu[i * n + k]
            if l != 0.0:
                for j in range(m):
                    b[i * m + j] -= l * b[k * m + j]
        l = lu[i * n + i]
        for j in range(m):
            b[i * m + j] /= l


cdef void _lu_solve_t(const double* lu, const int* piv, double* b, int n, int m) noexcept nogil:
    # solve G^T X = B; with P G = L U, G^T = U^T L^T P
    cdef int i, j, k, p
    cdef double t, l
    for i in range(n):
        for k in range(i):
            l = lu[k * n + i]
            if l != 0.0:
                for j in range(m):
                    b[i * m + j] -= l * b[k * m + j]
        l = lu[i * n + i]
        for j in range(m):
            b[i * m + j] /= l
    for i in range(n - 1, -1, -1):
        for k in range(i + 1, n):
            l = lu[k * n + i]
            if l != 0.0:
                for j in range(m):
                    b[i * m + j] -= l * b[k * m + j]
    for k in range(n - 1, -1, -1):
        p = piv[k]
        if p != k:
            for j in range(m):
                t = b[k * m + j]
                b[k * m + j] = b[p * m + j]
                b[p * m + j] = t


cdef int _combine_bwd_one(
    const double* P1, const double* p1, const double* C1, const double* A1, const double* c1,
    const double* P2, const double* p2, const double* C2, const double* A2, const double* c2,
    double* P, double* p, double* C, double* A, double* c,
    double* G, int* piv, double* X, double* Y, int n,
) noexcept nogil:
    cdef int i, j, k, info
    cdef int mx = n + 1
    cdef int my = 2 * n + 1
    cdef double s

    # G = I + P2 C1
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += P2[i * n + k] * C1[k * n + j]
            G[i * n + j] = s + (1.0 if i == j else 0.0)
    info = _lu_factor(G, piv, n)
    if info != 0:
        return info

    # X = G^{-1} [P2 A1 | p2 + P2 c1]
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += P2[i * n + k] * A1[k * n + j]
            X[i * mx + j] = s
        s = p2[i]
        for k in range(n):
            s += P2[i * n + k] * c1[k]
        X[i * mx + n] = s
    _lu_solve(G, piv, X, n, mx)

    # Y = G^{-T} [A1 | c1 - C1 p2 | C1 A2^T]
    for i in range(n):
        for j in range(n):
            Y[i * my + j] = A1[i * n + j]
        s = c1[i]
        for k in range(n):
            s -= C1[i * n + k] * p2[k]
        Y[i * my + n] = s
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += C1[i * n + k] * A2[j * n + k]
            Y[i * my + n + 1 + j] = s
    _lu_solve_t(G, piv, Y, n, my)

    # P = A1^T X[:, :n] + P1, p = A1^T X[:, n] + p1
    for i in range(n):
        for j in range(n):
            s = P1[i * n + j]
            for k in range(n):
                s += A1[k * n + i] * X[k * mx + j]
            P[i * n + j] = s
        s = p1[i]
        for k in range(n):
            s += A1[k * n + i] * X[k * mx + n]
        p[i] = s

    # A = A2 Y[:, :n], c = A2 Y[:, n] + c2, C = A2 Y[:, n+1:] + C2
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += A2[i * n + k] * Y[k * my + j]
            A[i * n + j] = s
            s = C2[i * n + j]
            for k in range(n):
                s += A2[i * n + k] * Y[k * my + n + 1 + j]
            C[i * n + j] = s
        s = c2[i]
        for k in range(n):
            s += A2[i * n + k] * Y[k * my + n]
        c[i] = s

    for i in range(n):
        for j in range(i + 1, n):
            s = 0.5 * (P[i * n + j] + P[j * n + i])
            P[i * n + j] = s
            P[j * n + i] = s
            s = 0.5 * (C[i * n + j] + C[j * n + i])
            C[i * n + j] = s
            C[j * n + i] = s
    return 0


def combine_bwd(P1, p1, C1, A1, c1, P2, p2, C2, A2, c2):
    """Combine conditional value elements ``k->j`` and ``j->i`` into ``k->i``."""
    cdef double[:, :, ::1] vP1 = np.ascontiguousarray(P1, dtype=np.float64)
    cdef double[:, ::1] vp1 = np.ascontiguousarray(p1, dtype=np.float64)
    cdef double[:, :, ::1] vC1 = np.ascontiguousarray(C1, dtype=np.float64)
    cdef double[:, :, ::1] vA1 = np.ascontiguousarray(A1, dtype=np.float64)
    cdef double[:, ::1] vc1 = np.ascontiguousarray(c1, dtype=np.float64)
    cdef double[:, :, ::1] vP2 = np.ascontiguousarray(P2, dtype=np.float64)
    cdef double[:, ::1] vp2 = np.ascontiguousarray(p2, dtype=np.float64)
    cdef double[:, :, ::1] vC2 = np.ascontiguousarray(C2, dtype=np.float64)
    cdef double[:, :, ::1] vA2 = np.ascontiguousarray(A2, dtype=np.float64)
    cdef double[:, ::1] vc2 = np.ascontiguousarray(c2, dtype=np.float64)

    cdef Py_ssize_t m = vP1.shape[0]
    cdef int n = <int>vP1.shape[1]
    P_out = np.empty((m, n, n))
    p_out = np.empty((m, n))
    C_out = np.empty((m, n, n))
    A_out = np.empty((m, n, n))
    c_out = np.empty((m, n))
    if m == 0:
        return P_out, p_out, C_out, A_out, c_out
    cdef double[:, :, ::1] vP = P_out
    cdef double[:, ::1] vp = p_out
    cdef double[:, :, ::1] vC = C_out
    cdef double[:, :, ::1] vA = A_out
    cdef double[:, ::1] vc = c_out

    cdef double* G = <double*>malloc(n * n * sizeof(double))
    cdef int* piv = <int*>malloc(n * sizeof(int))
    cdef double* X = <double*>malloc(n * (n + 1) * sizeof(double))
    cdef double* Y = <double*>malloc(n * (2 * n + 1) * sizeof(double))
    cdef Py_ssize_t b, bad = -1
    cdef int info
    if G == NULL or piv == NULL or X == NULL or Y == NULL:
        free(G); free(piv); free(X); free(Y)
        raise MemoryError()
    try:
        with nogil:
            for b in range(m):
                info = _combine_bwd_one(
                    &vP1[b, 0, 0], &vp1[b, 0], &vC1[b, 0, 0], &vA1[b, 0, 0], &vc1[b, 0],
                    &vP2[b, 0, 0], &vp2[b, 0], &vC2[b, 0, 0], &vA2[b, 0, 0], &vc2[b, 0],
                    &vP[b, 0, 0], &vp[b, 0], &vC[b, 0, 0], &vA[b, 0, 0], &vc[b, 0],
                    G, piv, X, Y, n,
                )
                if info != 0:
                    bad = b
                    break
    finally:
        free(G); free(piv); free(X); free(Y)
    if bad >= 0:
        raise SingularBlockError(bad, "I + P C")
    return P_out, p_out, C_out, A_out, c_out


def combine_fwd(A1, c1, A2, c2):
    """Compose affine maps: apply ``(A1, c1)`` first, then ``(A2, c2)``."""
    cdef double[:, :, ::1] vA1 = np.ascontiguousarray(A1, dtype=np.float64)
    cdef double[:, ::1] vc1 = np.ascontiguousarray(c1, dtype=np.float64)
    cdef double[:, :, ::1] vA2 = np.ascontiguousarray(A2, dtype=np.float64)
    cdef double[:, ::1] vc2 = np.ascontiguousarray(c2, dtype=np.float64)
    cdef Py_ssize_t m = vA1.shape[0]
    cdef Py_ssize_t n = vA1.shape[1]
    A_out = np.empty((m, n, n))
    c_out = np.empty((m, n))
    cdef double[:, :, ::1] vA = A_out
    cdef double[:, ::1] vc = c_out
    cdef Py_ssize_t b, i, j, k
    cdef double s
    with nogil:
        for b in range(m):
            for i in range(n):
                for j in range(n):
                    s = 0.0
                    for k in range(n):
                        s = s + vA2[b, i, k] * vA1[b, k, j]
                    vA[b, i, j] = s
                s = vc2[b, i]
                for k in range(n):
                    s = s + vA2[b, i, k] * vc1[b, k]
                vc[b, i] = s
    return A_out, c_out
