# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled log-domain Sinkhorn kernel (per-instance inner loops)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log

cnp.import_array()


cdef long _solve_one(const double[:, ::1] C, const double[::1] eloga,
                     const double[::1] elogb, const double[::1] b,
                     double[::1] alpha, double[::1] beta,
                     double epsilon, double eta, long max_iters) noexcept nogil:
    """Run sweeps on one instance; returns the sweep count (negative if
    the tolerance was never met)."""
    cdef Py_ssize_t n = C.shape[0]
    cdef Py_ssize_t m = C.shape[1]
    cdef Py_ssize_t i, j
    cdef long sweep
    cdef double mn, t, ssum, err, colsum
    for sweep in range(1, max_iters + 1):
        # beta update: softmin over i of (C_ij - alpha_i - beta_j)
        for j in range(m):
            mn = C[0, j] - alpha[0] - beta[j]
            for i in range(1, n):
                t = C[i, j] - alpha[i] - beta[j]
                if t < mn:
                    mn = t
            ssum = 0.0
            for i in range(n):
                ssum += exp(-(C[i, j] - alpha[i] - beta[j] - mn) / epsilon)
            beta[j] = elogb[j] + (mn - epsilon * log(ssum)) + beta[j]
        # alpha update: softmin over j of (C_ij - alpha_i - beta_j)
        for i in range(n):
            mn = C[i, 0] - alpha[i] - beta[0]
            for j in range(1, m):
                t = C[i, j] - alpha[i] - beta[j]
                if t < mn:
                    mn = t
            ssum = 0.0
            for j in range(m):
                ssum += exp(-(C[i, j] - alpha[i] - beta[j] - mn) / epsilon)
            alpha[i] = eloga[i] + (mn - epsilon * log(ssum)) + alpha[i]
        # column-marginal residual of exp((alpha_i + beta_j - C_ij)/eps)
        err = 0.0
        for j in range(m):
            colsum = 0.0
            for i in range(n):
                colsum += exp((alpha[i] + beta[j] - C[i, j]) / epsilon)
            err += fabs(colsum - b[j])
        if err < eta:
            return sweep
    return -max_iters


def log_solve_batch(cost, a, b, double epsilon, double eta, long max_iters):
    """Same contract as the NumPy reference: returns (alpha, beta,
    iterations, converged) for a (S, n, m) batch."""
    Cin = np.ascontiguousarray(cost, dtype=np.float64)
    if not Cin.flags.writeable:
        Cin = Cin.copy()
    cdef cnp.ndarray[double, ndim=3] C = Cin
    cdef Py_ssize_t S = C.shape[0]
    cdef Py_ssize_t n = C.shape[1]
    cdef Py_ssize_t m = C.shape[2]
    av = np.asarray(a, dtype=np.float64)
    bv = np.asarray(b, dtype=np.float64)
    bin_ = np.ascontiguousarray(bv)
    if not bin_.flags.writeable:
        bin_ = bin_.copy()
    cdef cnp.ndarray[double, ndim=2] eloga = epsilon * np.log(av)
    cdef cnp.ndarray[double, ndim=2] elogb = epsilon * np.log(bv)
    cdef cnp.ndarray[double, ndim=2] bmat = bin_
    cdef cnp.ndarray[double, ndim=2] alpha = np.zeros((S, n))
    cdef cnp.ndarray[double, ndim=2] beta = np.zeros((S, m))
    cdef cnp.ndarray[long, ndim=1] iterations = np.zeros(S, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] conv = np.zeros(S, dtype=np.uint8)
    cdef double[:, :, ::1] Cv = C
    cdef double[:, ::1] ea = eloga
    cdef double[:, ::1] eb = elogb
    cdef double[:, ::1] bm = bmat
    cdef double[:, ::1] alv = alpha
    cdef double[:, ::1] bev = beta
    cdef long[::1] itv = iterations
    cdef cnp.uint8_t[::1] cvv = conv
    cdef Py_ssize_t s
    cdef long res
    with nogil:
        for s in range(S):
            res = _solve_one(Cv[s], ea[s], eb[s], bm[s], alv[s], bev[s],
                             epsilon, eta, max_iters)
            if res > 0:
                itv[s] = res
                cvv[s] = 1
            else:
                itv[s] = -res
    return alpha, beta, iterations, conv.astype(bool)
