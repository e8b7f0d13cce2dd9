"""Hot numeric kernels with a compiled/pure-python backend switch.

conv2d forward/backward dominate training time, so they exist twice: a Cython
extension (crcseg._ckernels, built by setup.py) and a numpy im2col fallback.
The backend is selected once at import; CRCSEG_KERNELS={auto,python,cython}
overrides the default (auto = compiled when available).

Bilinear resizing is numpy-only: it runs a handful of times per step and
never shows up in profiles.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _ckernels
except ImportError:
    _ckernels = None


def conv_out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


# ---------------------------------------------------------------------------
# numpy backend


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            hi = i * dilation
            wj = j * dilation
            cols[:, i, j] = xp[:, hi:hi + (oh - 1) * stride + 1:stride,
                               wj:wj + (ow - 1) * stride + 1:stride]
    return cols.reshape(c * kh * kw, oh * ow)


def _pad_input(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw)))


def conv2d_forward_py(x: np.ndarray, w: np.ndarray, stride: int,
                      ph: int, pw: int, dilation: int) -> np.ndarray:
    cout, cin, kh, kw = w.shape
    oh = conv_out_size(x.shape[1], kh, stride, ph, dilation)
    ow = conv_out_size(x.shape[2], kw, stride, pw, dilation)
    cols = _im2col(_pad_input(x, ph, pw), kh, kw, stride, dilation, oh, ow)
    out = w.reshape(cout, -1) @ cols
    return np.ascontiguousarray(out.reshape(cout, oh, ow))


def conv2d_backward_py(x: np.ndarray, w: np.ndarray, dout: np.ndarray,
                       stride: int, ph: int, pw: int, dilation: int,
                       need_dx: bool, need_dw: bool):
    cout, cin, kh, kw = w.shape
    _, oh, ow = dout.shape
    dout_mat = dout.reshape(cout, -1)
    dx = dw = None
    if need_dw:
        cols = _im2col(_pad_input(x, ph, pw), kh, kw, stride, dilation, oh, ow)
        dw = (dout_mat @ cols.T).reshape(w.shape)
    if need_dx:
        dcols = (w.reshape(cout, -1).T @ dout_mat).reshape(cin, kh, kw, oh, ow)
        hp, wp = x.shape[1] + 2 * ph, x.shape[2] + 2 * pw
        dxp = np.zeros((cin, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                hi = i * dilation
                wj = j * dilation
                dxp[:, hi:hi + (oh - 1) * stride + 1:stride,
                    wj:wj + (ow - 1) * stride + 1:stride] += dcols[:, i, j]
        dx = np.ascontiguousarray(dxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2]])
    return dx, dw


# ---------------------------------------------------------------------------
# backend selection

_choice = os.environ.get("CRCSEG_KERNELS", "auto").lower()
if _choice not in ("auto", "python", "cython"):
    raise ValueError(f"CRCSEG_KERNELS must be auto|python|cython, got {_choice!r}")
if _choice == "cython" and _ckernels is None:
    raise ImportError("CRCSEG_KERNELS=cython but the compiled extension is not built")

_use_c = _ckernels is not None and _choice in ("auto", "cython")

BACKEND = "cython" if _use_c else "python"

if _use_c:
    def conv2d_forward(x, w, stride, ph, pw, dilation):
        return _ckernels.conv2d_forward(x, w, stride, ph, pw, dilation)

    def conv2d_backward(x, w, dout, stride, ph, pw, dilation, need_dx, need_dw):
        return _ckernels.conv2d_backward(x, w, dout, stride, ph, pw, dilation,
                                         need_dx, need_dw)
else:
    conv2d_forward = conv2d_forward_py
    conv2d_backward = conv2d_backward_py


# ---------------------------------------------------------------------------
# corner-aligned bilinear resize (forward + transpose), numpy only


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    return i0, i1, frac


def bilinear_resize_forward(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Resize C×H×W to C×h×w; corners map to corners."""
    y0, y1, fy = _axis_weights(x.shape[1], h)
    x0, x1, fx = _axis_weights(x.shape[2], w)
    rows = x[:, y0, :] * (1.0 - fy)[None, :, None] + x[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1.0 - fx) + rows[:, :, x1] * fx
    return np.ascontiguousarray(out)


def bilinear_resize_backward(dout: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    c, h, w = dout.shape
    y0, y1, fy = _axis_weights(in_h, h)
    x0, x1, fx = _axis_weights(in_w, w)
    drows = np.zeros((c, h, in_w), dtype=np.float64)
    np.add.at(drows, (slice(None), slice(None), x0), dout * (1.0 - fx))
    np.add.at(drows, (slice(None), slice(None), x1), dout * fx)
    dx = np.zeros((c, in_h, in_w), dtype=np.float64)
    np.add.at(dx, (slice(None), y0, slice(None)), drows * (1.0 - fy)[None, :, None])
    np.add.at(dx, (slice(None), y1, slice(None)), drows * fy[None, :, None])
    return dx
