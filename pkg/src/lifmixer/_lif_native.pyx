# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled group-LIF kernels.

Arrays arrive as C-contiguous ``(outer, axis, inner)`` views: for vertical
chains ``outer = N*C, axis = H, inner = W``; for horizontal chains
``outer = N*C*H, axis = W, inner = 1``. Consecutive runs of ``groups``
positions along ``axis`` form independent chains.

Arithmetic mirrors the numpy fallback operation for operation (compiled with
-ffp-contract=off), so both backends round identically.
"""
from cython.parallel cimport parallel, prange
from libc.stdlib cimport free, malloc

cimport openmp

ctypedef fused floating:
    float
    double


def set_num_threads(int n):
    if n > 0:
        openmp.omp_set_num_threads(n)


def get_max_threads():
    return openmp.omp_get_max_threads()


def forward(floating[:, :, ::1] x, double tau_, double vth_, Py_ssize_t groups,
            floating[:, :, ::1] r, floating[:, :, ::1] u, unsigned char[:, :, ::1] o):
    cdef Py_ssize_t outer = x.shape[0], extent = x.shape[1], inner = x.shape[2]
    cdef Py_ssize_t p, a, i, base
    cdef floating tau = <floating>tau_
    cdef floating vth = <floating>vth_
    cdef floating cur
    cdef floating *xp
    cdef floating *up
    cdef floating *rp
    cdef unsigned char *op
    if outer == 0 or extent == 0 or inner == 0:
        return
    xp = &x[0, 0, 0]
    up = &u[0, 0, 0]
    rp = &r[0, 0, 0]
    op = &o[0, 0, 0]
    with nogil:
        for p in prange(outer, schedule="static"):
            for a in range(extent):
                base = (p * extent + a) * inner
                if a % groups == 0:
                    for i in range(inner):
                        cur = xp[base + i]
                        up[base + i] = cur
                        op[base + i] = cur > vth
                        rp[base + i] = cur if cur > vth else vth
                else:
                    # branchless (tau * u) * (1 - o) + x, rounded like the numpy path
                    for i in range(inner):
                        cur = tau * up[base - inner + i] * <floating>(1 - op[base - inner + i]) + xp[base + i]
                        up[base + i] = cur
                        op[base + i] = cur > vth
                        rp[base + i] = cur if cur > vth else vth


def backward(floating[:, :, ::1] dr, floating[:, :, ::1] u, unsigned char[:, :, ::1] o,
             double tau_, Py_ssize_t groups, floating[:, :, ::1] dx,
             double[::1] part_tau, double[::1] part_vth):
    """Reverse recurrence; writes dx and per-``outer`` partial sums.

    Within one ``outer`` slice the partials are combined chain by chain
    (block, then cross-axis index), each chain summed in step order. The
    caller adds the ``outer`` partials in index order, so the reduction order
    does not depend on the thread count.
    """
    cdef Py_ssize_t outer = dr.shape[0], extent = dr.shape[1], inner = dr.shape[2]
    cdef Py_ssize_t p, a, i, start, stop
    cdef floating tau = <floating>tau_
    cdef floating gcur, contrib
    cdef floating *gnext
    cdef double *ctau
    cdef double *cvth
    cdef double acc_tau, acc_vth
    with nogil, parallel():
        gnext = <floating *> malloc(inner * sizeof(floating))
        ctau = <double *> malloc(inner * sizeof(double))
        cvth = <double *> malloc(inner * sizeof(double))
        for p in prange(outer, schedule="static"):
            acc_tau = 0.0
            acc_vth = 0.0
            start = 0
            while start < extent:
                stop = start + groups
                if stop > extent:
                    stop = extent
                for i in range(inner):
                    gnext[i] = 0
                    ctau[i] = 0.0
                    cvth[i] = 0.0
                a = stop - 1
                while a >= start:
                    for i in range(inner):
                        if o[p, a, i]:
                            gcur = dr[p, a, i]
                        else:
                            gcur = gnext[i] * tau
                            cvth[i] = cvth[i] + dr[p, a, i]
                            if a < stop - 1:
                                contrib = gnext[i] * u[p, a, i]
                                ctau[i] = ctau[i] + contrib
                        dx[p, a, i] = gcur
                        gnext[i] = gcur
                    a = a - 1
                for i in range(inner):
                    acc_tau = acc_tau + ctau[i]
                    acc_vth = acc_vth + cvth[i]
                start = stop
            part_tau[p] = acc_tau
            part_vth[p] = acc_vth
        free(gnext)
        free(ctau)
        free(cvth)
