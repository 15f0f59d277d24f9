# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: FNV-1a circular fingerprint hashing and a fused
fixed-step integrator for the rowwise MLP vector field."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.stdint cimport uint64_t, uint8_t, int64_t
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _fnv_bytes(const uint8_t* data, Py_ssize_t n, uint64_t h) nogil:
    cdef Py_ssize_t i
    for i in range(n):
        h ^= data[i]
        h *= FNV_PRIME
    return h


cdef inline uint64_t _fnv_u64(uint64_t x, uint64_t h) nogil:
    cdef int k
    for k in range(8):
        h ^= (x >> (8 * k)) & 0xFF
        h *= FNV_PRIME
    return h


def fnv1a64(bytes data):
    cdef const uint8_t* p = <const uint8_t*> data
    return int(_fnv_bytes(p, len(data), FNV_OFFSET))


cdef void _sort_pairs(uint8_t* codes, uint64_t* hashes, Py_ssize_t n) nogil:
    # insertion sort on (code, hash); neighbor lists are tiny
    cdef Py_ssize_t i, j
    cdef uint8_t c
    cdef uint64_t h
    for i in range(1, n):
        c = codes[i]
        h = hashes[i]
        j = i - 1
        while j >= 0 and (codes[j] > c or (codes[j] == c and hashes[j] > h)):
            codes[j + 1] = codes[j]
            hashes[j + 1] = hashes[j]
            j -= 1
        codes[j + 1] = c
        hashes[j + 1] = h


def fingerprint_bits(init_hashes, nbr_ptr, nbr_idx, nbr_code, int radius, int width):
    cdef uint64_t[::1] init = np.ascontiguousarray(init_hashes, dtype=np.uint64)
    cdef int64_t[::1] ptr = np.ascontiguousarray(nbr_ptr, dtype=np.int64)
    cdef int64_t[::1] idx = np.ascontiguousarray(nbr_idx, dtype=np.int64)
    cdef uint8_t[::1] code = np.ascontiguousarray(nbr_code, dtype=np.uint8)
    cdef Py_ssize_t n = init.shape[0]
    out = np.zeros(width, dtype=np.uint8)
    cdef uint8_t[::1] bits = out
    cdef uint64_t[::1] cur = np.array(init, dtype=np.uint64)
    cdef uint64_t[::1] nxt = np.zeros(n, dtype=np.uint64)
    cdef Py_ssize_t a, k, m, deg, maxdeg = 0
    cdef uint64_t h
    cdef int r
    for a in range(n):
        bits[cur[a] % <uint64_t> width] = 1
        if ptr[a + 1] - ptr[a] > maxdeg:
            maxdeg = ptr[a + 1] - ptr[a]
    cdef uint8_t* codes = <uint8_t*> malloc((maxdeg + 1) * sizeof(uint8_t))
    cdef uint64_t* hashes = <uint64_t*> malloc((maxdeg + 1) * sizeof(uint64_t))
    try:
        for r in range(radius):
            for a in range(n):
                deg = ptr[a + 1] - ptr[a]
                for m in range(deg):
                    k = ptr[a] + m
                    codes[m] = code[k]
                    hashes[m] = cur[idx[k]]
                _sort_pairs(codes, hashes, deg)
                h = _fnv_u64(cur[a], FNV_OFFSET)
                for m in range(deg):
                    h ^= codes[m]
                    h *= FNV_PRIME
                    h = _fnv_u64(hashes[m], h)
                nxt[a] = h
            for a in range(n):
                cur[a] = nxt[a]
                bits[cur[a] % <uint64_t> width] = 1
    finally:
        free(codes)
        free(hashes)
    return out


# ---------------------------------------------------------------- field kernel

cdef inline double _gelu(double x) nogil:
    # 0.5 x (1 + tanh(u)) == x * sigmoid(2u); exp is much cheaper than tanh in libm
    cdef double u = 1.5957691216057308 * (x + 0.044715 * x * x * x)
    return x / (1.0 + exp(-u))


cdef void _dense(const double* x, Py_ssize_t rows, Py_ssize_t nin, const double* w,
                 Py_ssize_t nout, const double* bias, double* out, bint act) nogil:
    # row-major out = x @ w + bias, expressed as column-major out^T = w^T x^T
    cdef Py_ssize_t r, j
    cdef int m = <int> nout, n = <int> rows, kk = <int> nin
    cdef double one = 1.0
    cdef char trans = b'N'
    for r in range(rows):
        for j in range(nout):
            out[r * nout + j] = bias[j]
    dgemm(&trans, &trans, &m, &n, &kk, &one, <double*> w, &m, <double*> x, &kk, &one, out, &m)
    if act:
        for j in range(rows * nout):
            out[j] = _gelu(out[j])


cdef struct Field:
    Py_ssize_t rows, d, hid
    const double* w0z
    const double* w1
    const double* b1
    const double* w2
    const double* b2
    const double* gamma1
    const double* beta
    double* h0
    double* h1


cdef void _eval(Field* f, const double* z, const double* tbias, double* out) nogil:
    cdef Py_ssize_t n = f.rows * f.d, k
    _dense(z, f.rows, f.d, f.w0z, f.hid, tbias, f.h0, True)
    _dense(f.h0, f.rows, f.hid, f.w1, f.hid, f.b1, f.h1, True)
    _dense(f.h1, f.rows, f.hid, f.w2, f.d, f.b2, out, False)
    for k in range(n):
        out[k] = out[k] * f.gamma1[k] + f.beta[k]


def integrate_mlp(z0, tbias, w0z, w1, b1, w2, b2, gamma1, beta, str scheme, int n_steps,
                  int record_every):
    """Fused fixed-step integration of the rowwise MLP field.

    ``tbias[k]`` is the folded first-layer bias at time ``k * dt / 2``.
    ``gamma1`` and ``beta`` are per-row arrays shaped like ``z0``.
    Returns (recorded states including t=0, final state).
    """
    dtype = np.asarray(z0).dtype
    cdef double[:, ::1] Z0 = np.ascontiguousarray(z0, dtype=np.float64)
    cdef double[:, ::1] TB = np.ascontiguousarray(tbias, dtype=np.float64)
    cdef double[:, ::1] W0 = np.ascontiguousarray(w0z, dtype=np.float64)
    cdef double[:, ::1] W1 = np.ascontiguousarray(w1, dtype=np.float64)
    cdef double[::1] B1 = np.ascontiguousarray(b1, dtype=np.float64)
    cdef double[:, ::1] W2 = np.ascontiguousarray(w2, dtype=np.float64)
    cdef double[::1] B2 = np.ascontiguousarray(b2, dtype=np.float64)
    cdef double[:, ::1] G1 = np.ascontiguousarray(gamma1, dtype=np.float64)
    cdef double[:, ::1] BE = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t rows = Z0.shape[0], d = Z0.shape[1], hid = W1.shape[0]
    cdef Py_ssize_t n = rows * d, k
    cdef int step, mode
    if scheme == "euler":
        mode = 0
    elif scheme == "heun":
        mode = 1
    elif scheme == "rk4":
        mode = 2
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if TB.shape[0] < 2 * n_steps + 1:
        raise ValueError("tbias needs 2 * n_steps + 1 rows")
    cdef double dt = 1.0 / n_steps
    work = np.zeros((8, n), dtype=np.float64)
    cdef double[:, ::1] W = work
    hbuf = np.zeros((2, rows * hid), dtype=np.float64)
    cdef double[:, ::1] H = hbuf
    cdef Field f
    f.rows = rows
    f.d = d
    f.hid = hid
    f.w0z = &W0[0, 0]
    f.w1 = &W1[0, 0]
    f.b1 = &B1[0]
    f.w2 = &W2[0, 0]
    f.b2 = &B2[0]
    f.gamma1 = &G1[0, 0]
    f.beta = &BE[0, 0]
    f.h0 = &H[0, 0]
    f.h1 = &H[1, 0]
    cdef double* z = &W[0, 0]
    cdef double* k1 = &W[1, 0]
    cdef double* k2 = &W[2, 0]
    cdef double* k3 = &W[3, 0]
    cdef double* k4 = &W[4, 0]
    cdef double* tmp = &W[5, 0]
    memcpy(z, &Z0[0, 0], n * sizeof(double))
    states = [np.asarray(Z0).astype(dtype)]
    for step in range(n_steps):
        with nogil:
            if mode == 0:
                _eval(&f, z, &TB[2 * step, 0], k1)
                for k in range(n):
                    z[k] = z[k] + dt * k1[k]
            elif mode == 1:
                _eval(&f, z, &TB[2 * step, 0], k1)
                for k in range(n):
                    tmp[k] = z[k] + dt * k1[k]
                _eval(&f, tmp, &TB[2 * step + 2, 0], k2)
                for k in range(n):
                    z[k] = z[k] + (dt / 2) * (k1[k] + k2[k])
            else:
                _eval(&f, z, &TB[2 * step, 0], k1)
                for k in range(n):
                    tmp[k] = z[k] + (dt / 2) * k1[k]
                _eval(&f, tmp, &TB[2 * step + 1, 0], k2)
                for k in range(n):
                    tmp[k] = z[k] + (dt / 2) * k2[k]
                _eval(&f, tmp, &TB[2 * step + 1, 0], k3)
                for k in range(n):
                    tmp[k] = z[k] + dt * k3[k]
                _eval(&f, tmp, &TB[2 * step + 2, 0], k4)
                for k in range(n):
                    z[k] = z[k] + (dt / 6) * (k1[k] + 2 * k2[k] + 2 * k3[k] + k4[k])
        if (step + 1) % record_every == 0:
            states.append(work[0].reshape(rows, d).astype(dtype))
    return states, work[0].reshape(rows, d).astype(dtype)
