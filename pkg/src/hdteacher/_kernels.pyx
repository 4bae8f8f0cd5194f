# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled hot loops: 3D cross-correlation (forward and both
backward passes) and the 1D squared Euclidean distance transform.

All convolution routines work on rank-5 arrays (batch, channel, d, h, w);
2D convolutions are routed through with a unit depth axis. Inputs are
pre-padded by the caller and outputs are accumulated into, never reset.
"""

from libc.stdlib cimport malloc, free

ctypedef fused real:
    float
    double


cdef enum:
    LANES = 16


# Stride-1 path: with the padded input flattened, output voxel (d, h, x) laid
# out at the input's plane/row strides sits a fixed offset away from every tap,
# so each tap is one long contiguous loop instead of D*H short rows. The
# scratch buffer holds one output channel in that layout; the columns past W
# are padding and stay zero in the gradient buffers.

cdef inline Py_ssize_t _span(Py_ssize_t D, Py_ssize_t H, Py_ssize_t W,
                             Py_ssize_t plane, Py_ssize_t row) noexcept nogil:
    return (D - 1) * plane + (H - 1) * row + W


cdef inline void _gather(const real* src, real* dst, Py_ssize_t D, Py_ssize_t H, Py_ssize_t W,
                         Py_ssize_t plane, Py_ssize_t row, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t d, h, x
    for x in range(n):
        dst[x] = 0
    for d in range(D):
        for h in range(H):
            for x in range(W):
                dst[d * plane + h * row + x] = src[(d * H + h) * W + x]


def conv_forward(const real[:, :, :, :, ::1] xp,
                 const real[:, :, :, :, ::1] w,
                 real[:, :, :, :, ::1] out,
                 Py_ssize_t stride):
    cdef Py_ssize_t B = out.shape[0], CO = out.shape[1]
    cdef Py_ssize_t D = out.shape[2], H = out.shape[3], W = out.shape[4]
    cdef Py_ssize_t CI = w.shape[1], KD = w.shape[2], KH = w.shape[3], KW = w.shape[4]
    cdef Py_ssize_t row = xp.shape[4], plane = xp.shape[3] * xp.shape[4]
    cdef Py_ssize_t b, co, ci, i, j, k, d, h, x, n
    cdef real wv
    cdef real* o
    cdef real* t
    cdef const real* s
    if stride == 1:
        n = _span(D, H, W, plane, row)
        t = <real*> malloc(n * sizeof(real))
        if t == NULL:
            raise MemoryError()
        try:
            with nogil:
                for b in range(B):
                    for co in range(CO):
                        for x in range(n):
                            t[x] = 0
                        for ci in range(CI):
                            for i in range(KD):
                                for j in range(KH):
                                    for k in range(KW):
                                        wv = w[co, ci, i, j, k]
                                        s = &xp[b, ci, i, j, k]
                                        for x in range(n):
                                            t[x] += wv * s[x]
                        for d in range(D):
                            for h in range(H):
                                o = &out[b, co, d, h, 0]
                                for x in range(W):
                                    o[x] += t[d * plane + h * row + x]
        finally:
            free(t)
        return
    with nogil:
        for b in range(B):
            for co in range(CO):
                for ci in range(CI):
                    for i in range(KD):
                        for j in range(KH):
                            for k in range(KW):
                                wv = w[co, ci, i, j, k]
                                for d in range(D):
                                    for h in range(H):
                                        o = &out[b, co, d, h, 0]
                                        s = &xp[b, ci, d * stride + i, h * stride + j, k]
                                        for x in range(W):
                                            o[x] += wv * s[x * stride]


def conv_backward_input(const real[:, :, :, :, ::1] gout,
                        const real[:, :, :, :, ::1] w,
                        real[:, :, :, :, ::1] gxp,
                        Py_ssize_t stride):
    cdef Py_ssize_t B = gout.shape[0], CO = gout.shape[1]
    cdef Py_ssize_t D = gout.shape[2], H = gout.shape[3], W = gout.shape[4]
    cdef Py_ssize_t CI = w.shape[1], KD = w.shape[2], KH = w.shape[3], KW = w.shape[4]
    cdef Py_ssize_t row = gxp.shape[4], plane = gxp.shape[3] * gxp.shape[4]
    cdef Py_ssize_t b, co, ci, i, j, k, d, h, x, n
    cdef real wv
    cdef const real* o
    cdef real* s
    cdef real* t
    if stride == 1:
        n = _span(D, H, W, plane, row)
        t = <real*> malloc(n * sizeof(real))
        if t == NULL:
            raise MemoryError()
        try:
            with nogil:
                for b in range(B):
                    for co in range(CO):
                        _gather(&gout[b, co, 0, 0, 0], t, D, H, W, plane, row, n)
                        for ci in range(CI):
                            for i in range(KD):
                                for j in range(KH):
                                    for k in range(KW):
                                        wv = w[co, ci, i, j, k]
                                        s = &gxp[b, ci, i, j, k]
                                        for x in range(n):
                                            s[x] += wv * t[x]
        finally:
            free(t)
        return
    with nogil:
        for b in range(B):
            for ci in range(CI):
                for co in range(CO):
                    for i in range(KD):
                        for j in range(KH):
                            for k in range(KW):
                                wv = w[co, ci, i, j, k]
                                for d in range(D):
                                    for h in range(H):
                                        o = &gout[b, co, d, h, 0]
                                        s = &gxp[b, ci, d * stride + i, h * stride + j, k]
                                        for x in range(W):
                                            s[x * stride] += wv * o[x]


def conv_backward_weight(const real[:, :, :, :, ::1] gout,
                         const real[:, :, :, :, ::1] xp,
                         real[:, :, :, :, ::1] gw,
                         Py_ssize_t stride):
    cdef Py_ssize_t B = gout.shape[0], CO = gout.shape[1]
    cdef Py_ssize_t D = gout.shape[2], H = gout.shape[3], W = gout.shape[4]
    cdef Py_ssize_t CI = gw.shape[1], KD = gw.shape[2], KH = gw.shape[3], KW = gw.shape[4]
    cdef Py_ssize_t row = xp.shape[4], plane = xp.shape[3] * xp.shape[4]
    cdef Py_ssize_t b, co, ci, i, j, k, d, h, x, l, n, m
    cdef const real* o
    cdef const real* s
    cdef real* t
    cdef real total
    # lane accumulator keeps the innermost loop free of a scalar reduction
    cdef real acc[LANES]
    if stride == 1:
        n = _span(D, H, W, plane, row)
        m = n // LANES
        t = <real*> malloc(n * sizeof(real))
        if t == NULL:
            raise MemoryError()
        try:
            with nogil:
                for b in range(B):
                    for co in range(CO):
                        _gather(&gout[b, co, 0, 0, 0], t, D, H, W, plane, row, n)
                        for ci in range(CI):
                            for i in range(KD):
                                for j in range(KH):
                                    for k in range(KW):
                                        s = &xp[b, ci, i, j, k]
                                        for l in range(LANES):
                                            acc[l] = 0
                                        for x in range(m):
                                            for l in range(LANES):
                                                acc[l] += t[x * LANES + l] * s[x * LANES + l]
                                        total = 0
                                        for x in range(m * LANES, n):
                                            total += t[x] * s[x]
                                        for l in range(LANES):
                                            total += acc[l]
                                        gw[co, ci, i, j, k] += total
        finally:
            free(t)
        return
    with nogil:
        for co in range(CO):
            for ci in range(CI):
                for i in range(KD):
                    for j in range(KH):
                        for k in range(KW):
                            total = 0
                            for b in range(B):
                                for d in range(D):
                                    for h in range(H):
                                        o = &gout[b, co, d, h, 0]
                                        s = &xp[b, ci, d * stride + i, h * stride + j, k]
                                        for x in range(W):
                                            total += o[x] * s[x * stride]
                            gw[co, ci, i, j, k] += total


def edt_lines(double[:, ::1] f, double spacing):
    """In-place lower envelope of parabolas along the last axis of ``f``.

    ``f`` holds squared distances (a large sentinel marks "no site"); each
    row is replaced by min_q f[q] + (spacing * (p - q))**2.
    """
    cdef Py_ssize_t nlines = f.shape[0], n = f.shape[1]
    cdef Py_ssize_t line, q, k, p
    cdef double s, sp2 = spacing * spacing
    cdef int* v = <int*> malloc(n * sizeof(int))
    cdef double* z = <double*> malloc((n + 1) * sizeof(double))
    cdef double* g = <double*> malloc(n * sizeof(double))
    if v == NULL or z == NULL or g == NULL:
        free(v); free(z); free(g)
        raise MemoryError()
    try:
        with nogil:
            for line in range(nlines):
                for q in range(n):
                    g[q] = f[line, q]
                k = 0
                v[0] = 0
                z[0] = -1e300
                z[1] = 1e300
                for q in range(1, n):
                    s = ((g[q] + sp2 * q * q) - (g[v[k]] + sp2 * v[k] * v[k])) / (2.0 * sp2 * (q - v[k]))
                    while s <= z[k]:
                        k -= 1
                        s = ((g[q] + sp2 * q * q) - (g[v[k]] + sp2 * v[k] * v[k])) / (2.0 * sp2 * (q - v[k]))
                    k += 1
                    v[k] = q
                    z[k] = s
                    z[k + 1] = 1e300
                k = 0
                for p in range(n):
                    while z[k + 1] < p:
                        k += 1
                    f[line, p] = sp2 * (p - v[k]) * (p - v[k]) + g[v[k]]
    finally:
        free(v); free(z); free(g)
