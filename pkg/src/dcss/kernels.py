"""Hot convolution kernels.

Every kernel exists twice: a numba ``@njit`` loop version and a pure-numpy
version. The active set is chosen once at import time. Set the environment
variable ``DCSS_DISABLE_NUMBA=1`` (or uninstall numba) to force the numpy path.

All kernels work on an already zero-padded input ``xp`` of shape
``(N, Cin, Hp, Wp)`` and are single-threaded, so results are bit-reproducible.
"""

import os

import numpy as np

__all__ = [
    "USE_NUMBA",
    "backend_name",
    "conv_direct_forward",
    "conv_direct_backward",
    "im2col",
    "col2im",
    "output_size",
]


def _numba_requested():
    flag = os.environ.get("DCSS_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no", "off")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by DCSS_DISABLE_NUMBA")
    import numba

    njit = numba.njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def output_size(size, k, stride, padding):
    """Output length along one spatial axis; raises if the geometry does not tile."""
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"geometry error: (size {size} + 2*{padding} - kernel {k}) "
            f"is not a nonnegative multiple of stride {stride}"
        )
    return span // stride + 1


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def _np_conv_direct_forward(xp, w, stride):
    n, cin, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, i, j])
    mults = n * cout * ho * wo * cin * kh * kw
    return out, mults


def _np_conv_direct_backward(xp, w, gy, stride):
    cout, cin, kh, kw = w.shape
    ho, wo = gy.shape[2], gy.shape[3]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            hs = slice(i, i + stride * (ho - 1) + 1, stride)
            ws = slice(j, j + stride * (wo - 1) + 1, stride)
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", gy, xp[:, :, hs, ws])
            gxp[:, :, hs, ws] += np.einsum("nohw,oc->nchw", gy, w[:, :, i, j])
    return gxp, gw


def _np_im2col(xp, kh, kw, stride):
    n, cin, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, cin, ho, wo, kh, kw)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, n * ho * wo)
    return np.ascontiguousarray(cols)


def _np_col2im(cols, n, cin, hp, wp, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    c6 = cols.reshape(cin, kh, kw, n, ho, wo)
    xp = np.zeros((n, cin, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                c6[:, i, j].transpose(1, 0, 2, 3)
            )
    return xp


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_conv_direct_forward(xp, w, stride):
        n, cin, hp, wp = xp.shape
        cout, _, kh, kw = w.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        out = np.zeros((n, cout, ho, wo), dtype=xp.dtype)
        mults = 0
        for b in range(n):
            for o in range(cout):
                for y in range(ho):
                    for x in range(wo):
                        acc = 0.0
                        for c in range(cin):
                            for i in range(kh):
                                for j in range(kw):
                                    acc += xp[b, c, y * stride + i, x * stride + j] * w[o, c, i, j]
                                    mults += 1
                        out[b, o, y, x] = acc
        return out, mults

    @njit(cache=True)
    def _nb_conv_direct_backward(xp, w, gy, stride):
        n, cin, hp, wp = xp.shape
        cout, _, kh, kw = w.shape
        ho = gy.shape[2]
        wo = gy.shape[3]
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        for b in range(n):
            for o in range(cout):
                for y in range(ho):
                    for x in range(wo):
                        g = gy[b, o, y, x]
                        if g == 0.0:
                            continue
                        for c in range(cin):
                            for i in range(kh):
                                for j in range(kw):
                                    gw[o, c, i, j] += g * xp[b, c, y * stride + i, x * stride + j]
                                    gxp[b, c, y * stride + i, x * stride + j] += g * w[o, c, i, j]
        return gxp, gw

    @njit(cache=True)
    def _nb_im2col(xp, kh, kw, stride):
        n, cin, hp, wp = xp.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        cols = np.empty((cin * kh * kw, n * ho * wo), dtype=xp.dtype)
        for c in range(cin):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for b in range(n):
                        for y in range(ho):
                            base = (b * ho + y) * wo
                            for x in range(wo):
                                cols[row, base + x] = xp[b, c, y * stride + i, x * stride + j]
        return cols

    @njit(cache=True)
    def _nb_col2im(cols, n, cin, hp, wp, kh, kw, stride):
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        xp = np.zeros((n, cin, hp, wp), dtype=cols.dtype)
        for c in range(cin):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for b in range(n):
                        for y in range(ho):
                            base = (b * ho + y) * wo
                            for x in range(wo):
                                xp[b, c, y * stride + i, x * stride + j] += cols[row, base + x]
        return xp


if USE_NUMBA:
    conv_direct_forward = _nb_conv_direct_forward
    conv_direct_backward = _nb_conv_direct_backward
    im2col = _nb_im2col
    col2im = _nb_col2im
else:
    conv_direct_forward = _np_conv_direct_forward
    conv_direct_backward = _np_conv_direct_backward
    im2col = _np_im2col
    col2im = _np_col2im


def implementations():
    """Both kernel sets keyed by backend name, for benchmarks and cross-checks."""
    impls = {
        "numpy": {
            "conv_direct_forward": _np_conv_direct_forward,
            "conv_direct_backward": _np_conv_direct_backward,
            "im2col": _np_im2col,
            "col2im": _np_col2im,
        }
    }
    if HAVE_NUMBA:
        impls["numba"] = {
            "conv_direct_forward": _nb_conv_direct_forward,
            "conv_direct_backward": _nb_conv_direct_backward,
            "im2col": _nb_im2col,
            "col2im": _nb_col2im,
        }
    return impls
