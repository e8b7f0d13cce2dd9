# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled conv2d kernels (single image, CHW layout, float64).

im2col/col2im run as tight C loops and the contractions go through BLAS
dgemm, so forward and backward each cost one patch pass plus one or two GEMM
calls. 1x1/stride-1/unpadded convs skip the patch pass entirely and feed the
input buffer straight to dgemm.
"""

import numpy as np

cimport numpy as cnp
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline Py_ssize_t _floor_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    cdef Py_ssize_t q = a / b
    if a % b != 0 and ((a < 0) != (b < 0)):
        q -= 1
    return q


cdef inline Py_ssize_t _ceil_div(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return -_floor_div(-a, b)


cdef inline Py_ssize_t _max0(Py_ssize_t a) noexcept nogil:
    return a if a > 0 else 0


cdef inline Py_ssize_t _min2(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a < b else b


cdef void _im2col(const double* x, double* cols, Py_ssize_t cin,
                  Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t oh_n, Py_ssize_t ow_n, Py_ssize_t stride,
                  Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t dil) noexcept nogil:
    """cols is (cin*kh*kw) x (oh_n*ow_n), row-major, zero-padded taps."""
    cdef Py_ssize_t ci, i, j, oh, ow, ih, iw
    cdef Py_ssize_t oh_lo, oh_hi, ow_lo, ow_hi
    cdef Py_ssize_t ncols = oh_n * ow_n
    cdef const double* xrow
    cdef double* crow
    memset(cols, 0, cin * kh * kw * ncols * sizeof(double))
    for ci in range(cin):
        for i in range(kh):
            oh_lo = _max0(_ceil_div(ph - i * dil, stride))
            oh_hi = _min2(oh_n - 1, _floor_div(ph + h - 1 - i * dil, stride))
            for j in range(kw):
                ow_lo = _max0(_ceil_div(pw - j * dil, stride))
                ow_hi = _min2(ow_n - 1, _floor_div(pw + w - 1 - j * dil, stride))
                crow = cols + ((ci * kh + i) * kw + j) * ncols
                for oh in range(oh_lo, oh_hi + 1):
                    ih = oh * stride - ph + i * dil
                    xrow = x + (ci * h + ih) * w
                    iw = ow_lo * stride - pw + j * dil
                    for ow in range(ow_lo, ow_hi + 1):
                        crow[oh * ow_n + ow] = xrow[iw]
                        iw += stride


cdef void _col2im(const double* cols, double* x, Py_ssize_t cin,
                  Py_ssize_t h, Py_ssize_t w, Py_ssize_t kh, Py_ssize_t kw,
                  Py_ssize_t oh_n, Py_ssize_t ow_n, Py_ssize_t stride,
                  Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t dil) noexcept nogil:
    cdef Py_ssize_t ci, i, j, oh, ow, ih, iw
    cdef Py_ssize_t oh_lo, oh_hi, ow_lo, ow_hi
    cdef Py_ssize_t ncols = oh_n * ow_n
    cdef double* xrow
    cdef const double* crow
    for ci in range(cin):
        for i in range(kh):
            oh_lo = _max0(_ceil_div(ph - i * dil, stride))
            oh_hi = _min2(oh_n - 1, _floor_div(ph + h - 1 - i * dil, stride))
            for j in range(kw):
                ow_lo = _max0(_ceil_div(pw - j * dil, stride))
                ow_hi = _min2(ow_n - 1, _floor_div(pw + w - 1 - j * dil, stride))
                crow = cols + ((ci * kh + i) * kw + j) * ncols
                for oh in range(oh_lo, oh_hi + 1):
                    ih = oh * stride - ph + i * dil
                    xrow = x + (ci * h + ih) * w
                    iw = ow_lo * stride - pw + j * dil
                    for ow in range(ow_lo, ow_hi + 1):
                        xrow[iw] += crow[oh * ow_n + ow]
                        iw += stride


cdef void _gemm_rowmajor(const double* a, const double* b, double* c,
                         int m, int n, int k, bint ta, bint tb) noexcept nogil:
    """Row-major C[m,n] = op(A)[m,k] @ op(B)[k,n] via column-major dgemm.

    Row-major X is the column-major transpose of X, so compute
    C^T = op(B)^T @ op(A)^T in column-major."""
    cdef char cta = b"T" if ta else b"N"
    cdef char ctb = b"T" if tb else b"N"
    cdef double one = 1.0, zero = 0.0
    cdef int lda = k if not ta else m
    cdef int ldb = n if not tb else k
    dgemm(&ctb, &cta, &n, &m, &k, &one, b, &ldb, a, &lda, &zero, c, &n)


cdef inline bint _is_identity_patch(Py_ssize_t kh, Py_ssize_t kw,
                                    Py_ssize_t stride, Py_ssize_t ph,
                                    Py_ssize_t pw) noexcept nogil:
    return kh == 1 and kw == 1 and stride == 1 and ph == 0 and pw == 0


def conv2d_forward(cnp.ndarray x_arr, cnp.ndarray w_arr, Py_ssize_t stride,
                   Py_ssize_t ph, Py_ssize_t pw, Py_ssize_t dilation):
    cdef const double[:, :, ::1] x = x_arr
    cdef const double[:, :, :, ::1] w = w_arr
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], ww = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    cdef Py_ssize_t ow = (ww + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    cdef Py_ssize_t kdim = cin * kh * kw, ncols = oh * ow

    out_arr = np.empty((cout, oh, ow), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] cols
    cdef const double* colp

    if _is_identity_patch(kh, kw, stride, ph, pw):
        colp = &x[0, 0, 0]
    else:
        cols_arr = np.empty(kdim * ncols, dtype=np.float64)
        cols = cols_arr
        colp = &cols[0]
        with nogil:
            _im2col(&x[0, 0, 0], <double*>colp, cin, h, ww, kh, kw, oh, ow,
                    stride, ph, pw, dilation)
    with nogil:
        _gemm_rowmajor(&w[0, 0, 0, 0], colp, &out[0, 0, 0],
                       <int>cout, <int>ncols, <int>kdim, False, False)
    return out_arr


def conv2d_backward(cnp.ndarray x_arr, cnp.ndarray w_arr, cnp.ndarray dout_arr,
                    Py_ssize_t stride, Py_ssize_t ph, Py_ssize_t pw,
                    Py_ssize_t dilation, bint need_dx, bint need_dw):
    cdef const double[:, :, ::1] x = x_arr
    cdef const double[:, :, :, ::1] w = w_arr
    cdef const double[:, :, ::1] dout = np.ascontiguousarray(dout_arr)
    cdef Py_ssize_t cin = x.shape[0], h = x.shape[1], ww = x.shape[2]
    cdef Py_ssize_t cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t oh = dout.shape[1], ow = dout.shape[2]
    cdef Py_ssize_t kdim = cin * kh * kw, ncols = oh * ow
    cdef bint identity = _is_identity_patch(kh, kw, stride, ph, pw)

    cdef double[::1] cols
    cdef const double* colp = NULL
    if need_dw:
        if identity:
            colp = &x[0, 0, 0]
        else:
            cols_arr = np.empty(kdim * ncols, dtype=np.float64)
            cols = cols_arr
            colp = &cols[0]
            with nogil:
                _im2col(&x[0, 0, 0], <double*>colp, cin, h, ww, kh, kw, oh, ow,
                        stride, ph, pw, dilation)

    dx_out = dw_out = None
    cdef double[:, :, :, ::1] dw_v
    cdef double[:, :, ::1] dx_v
    cdef double[::1] dcols
    cdef double* dcolp

    if need_dw:
        dw_out = np.empty_like(w_arr)
        dw_v = dw_out
        with nogil:
            # dW[cout, kdim] = dout[cout, ncols] @ cols^T
            _gemm_rowmajor(&dout[0, 0, 0], colp, &dw_v[0, 0, 0, 0],
                           <int>cout, <int>kdim, <int>ncols, False, True)
    if need_dx:
        dx_out = np.zeros_like(x_arr)
        dx_v = dx_out
        if identity:
            with nogil:
                # dX[cin, ncols] = W^T @ dout
                _gemm_rowmajor(&w[0, 0, 0, 0], &dout[0, 0, 0], &dx_v[0, 0, 0],
                               <int>cin, <int>ncols, <int>cout, True, False)
        else:
            dcols_arr = np.empty(kdim * ncols, dtype=np.float64)
            dcols = dcols_arr
            dcolp = &dcols[0]
            with nogil:
                _gemm_rowmajor(&w[0, 0, 0, 0], &dout[0, 0, 0], dcolp,
                               <int>kdim, <int>ncols, <int>cout, True, False)
                _col2im(dcolp, &dx_v[0, 0, 0], cin, h, ww, kh, kw, oh, ow,
                        stride, ph, pw, dilation)
    return dx_out, dw_out
