"""Raw array kernels for 3D convolution and pooling.

Arrays are channel-first ``(C, nx, ny, nz)``. Every kernel has a numba loop
nest (``*_nb``) and a numpy twin (``*_np``); the unsuffixed names dispatch
on :data:`fusestrata._jit.USE_NUMBA`.

Summation order inside one output element is fixed in both paths, so each
path is bit-deterministic on its own. The two paths agree to rounding only.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._jit import USE_NUMBA, njit, prange


def pad_same(x, k):
    p = k // 2
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def pool_padding(n, window, stride):
    """TF-style "same" padding: returns (n_out, pad_before, pad_after)."""
    n_out = -(-n // stride)
    total = max((n_out - 1) * stride + window - n, 0)
    return n_out, total // 2, total - total // 2


# --------------------------------------------------------------------------
# numba loop nests

@njit(parallel=True)
def _conv3d_nb(xp, w, b, out):
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    nx, ny, nz = out.shape[1], out.shape[2], out.shape[3]
    for x in prange(nx):
        for o in range(cout):
            for y in range(ny):
                for z in range(nz):
                    out[o, x, y, z] = b[o]
            for c in range(cin):
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            wv = w[o, c, i, j, l]
                            for y in range(ny):
                                for z in range(nz):
                                    out[o, x, y, z] += wv * xp[c, x + i, y + j, z + l]
    return out


@njit(parallel=True, fastmath=True)
def _conv3d_grad_w_nb(xp, g, gw):
    # z-rows reduce in the input dtype, rows accumulate in float64
    cout, cin, k = gw.shape[0], gw.shape[1], gw.shape[2]
    nx, ny, nz = g.shape[1], g.shape[2], g.shape[3]
    for oc in prange(cout * cin):
        o = oc // cin
        c = oc % cin
        part = np.zeros((k, k, k))
        for x in range(nx):
            for y in range(ny):
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            row = xp.dtype.type(0.0)
                            for z in range(nz):
                                row += g[o, x, y, z] * xp[c, x + i, y + j, z + l]
                            part[i, j, l] += row
        gw[o, c] = part
    return gw


@njit(parallel=True)
def _dwconv3d_nb(xp, w, b, out):
    ch, k = w.shape[0], w.shape[1]
    nx, ny, nz = out.shape[1], out.shape[2], out.shape[3]
    for x in prange(nx):
        for c in range(ch):
            for y in range(ny):
                for z in range(nz):
                    out[c, x, y, z] = b[c]
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        wv = w[c, i, j, l]
                        for y in range(ny):
                            for z in range(nz):
                                out[c, x, y, z] += wv * xp[c, x + i, y + j, z + l]
    return out


@njit(parallel=True, fastmath=True)
def _dwconv3d_grad_w_nb(xp, g, gw):
    ch, k = gw.shape[0], gw.shape[1]
    nx, ny, nz = g.shape[1], g.shape[2], g.shape[3]
    for c in prange(ch):
        part = np.zeros((k, k, k))
        for x in range(nx):
            for y in range(ny):
                for i in range(k):
                    for j in range(k):
                        for l in range(k):
                            row = xp.dtype.type(0.0)
                            for z in range(nz):
                                row += g[c, x, y, z] * xp[c, x + i, y + j, z + l]
                            part[i, j, l] += row
        gw[c] = part
    return gw


@njit(parallel=True)
def _maxpool3d_nb(x, window, stride, pads, out, arg):
    ch, nx, ny, nz = x.shape
    ox, oy, oz = out.shape[1], out.shape[2], out.shape[3]
    for c in prange(ch):
        for a in range(ox):
            for b in range(oy):
                for d in range(oz):
                    best = -np.inf
                    besti = -1
                    for i in range(window):
                        u = a * stride - pads[0] + i
                        if u < 0 or u >= nx:
                            continue
                        for j in range(window):
                            v = b * stride - pads[1] + j
                            if v < 0 or v >= ny:
                                continue
                            for l in range(window):
                                s = d * stride - pads[2] + l
                                if s < 0 or s >= nz:
                                    continue
                                val = x[c, u, v, s]
                                if besti < 0 or val > best:
                                    best = val
                                    besti = ((c * nx + u) * ny + v) * nz + s
                    out[c, a, b, d] = best
                    arg[c, a, b, d] = besti
    return out, arg


@njit()
def _scatter_add_nb(flat, idx, vals):
    for n in range(idx.size):
        flat[idx[n]] += vals[n]
    return flat


# --------------------------------------------------------------------------
# numpy twins

def _taps(k):
    for i in range(k):
        for j in range(k):
            for l in range(k):
                yield i, j, l


def _conv3d_np(xp, w, b, out):
    cout, cin, k = w.shape[:3]
    nx, ny, nz = out.shape[1:]
    acc = np.zeros((cout, nx * ny * nz), dtype=out.dtype)
    for i, j, l in _taps(k):
        patch = xp[:, i:i + nx, j:j + ny, l:l + nz].reshape(cin, -1)
        acc += w[:, :, i, j, l] @ patch
    out[...] = acc.reshape(cout, nx, ny, nz) + b[:, None, None, None]
    return out


def _conv3d_grad_w_np(xp, g, gw):
    cout, cin, k = gw.shape[:3]
    nx, ny, nz = g.shape[1:]
    g2 = g.reshape(cout, -1).astype(np.float64)
    for i, j, l in _taps(k):
        patch = xp[:, i:i + nx, j:j + ny, l:l + nz].reshape(cin, -1)
        gw[:, :, i, j, l] = g2 @ patch.T
    return gw


def _dwconv3d_np(xp, w, b, out):
    ch, k = w.shape[:2]
    nx, ny, nz = out.shape[1:]
    acc = np.zeros(out.shape, dtype=out.dtype)
    for i, j, l in _taps(k):
        acc += w[:, i, j, l, None, None, None] * xp[:, i:i + nx, j:j + ny, l:l + nz]
    out[...] = acc + b[:, None, None, None]
    return out


def _dwconv3d_grad_w_np(xp, g, gw):
    k = gw.shape[1]
    nx, ny, nz = g.shape[1:]
    g64 = g.astype(np.float64)
    for i, j, l in _taps(k):
        patch = xp[:, i:i + nx, j:j + ny, l:l + nz]
        gw[:, i, j, l] = np.einsum("cxyz,cxyz->c", g64, patch)
    return gw


def _maxpool3d_np(x, window, stride, pads, out, arg):
    ch, nx, ny, nz = x.shape
    ox, oy, oz = out.shape[1:]
    widths = [(0, 0)]
    for n, o, pb in zip((nx, ny, nz), (ox, oy, oz), pads):
        need = (o - 1) * stride + window
        widths.append((pb, max(need - n - pb, 0)))
    xp = np.pad(x, widths, constant_values=-np.inf)
    win = sliding_window_view(xp, (window,) * 3, axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride][:, :ox, :oy, :oz]
    win = win.reshape(ch, ox, oy, oz, window ** 3)
    t = np.argmax(win, axis=-1)
    out[...] = np.take_along_axis(win, t[..., None], axis=-1)[..., 0]
    ti, tj, tl = np.unravel_index(t, (window,) * 3)
    u = np.arange(ox)[:, None, None] * stride - pads[0] + ti
    v = np.arange(oy)[None, :, None] * stride - pads[1] + tj
    s = np.arange(oz)[None, None, :] * stride - pads[2] + tl
    c = np.arange(ch)[:, None, None, None]
    arg[...] = ((c * nx + u) * ny + v) * nz + s
    return out, arg


def _scatter_add_np(flat, idx, vals):
    np.add.at(flat, idx, vals)
    return flat


# --------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    _conv = _conv3d_nb
    _conv_gw = _conv3d_grad_w_nb
    _dw = _dwconv3d_nb
    _dw_gw = _dwconv3d_grad_w_nb
    _pool = _maxpool3d_nb
    _scatter = _scatter_add_nb
else:
    _conv = _conv3d_np
    _conv_gw = _conv3d_grad_w_np
    _dw = _dwconv3d_np
    _dw_gw = _dwconv3d_grad_w_np
    _pool = _maxpool3d_np
    _scatter = _scatter_add_np


def conv3d_forward(x, w, b, impl=None):
    """Zero-padded "same" cross-correlation, stride 1."""
    conv = impl or _conv
    xp = np.ascontiguousarray(pad_same(x, w.shape[2]))
    out = np.empty((w.shape[0],) + x.shape[1:], dtype=x.dtype)
    return conv(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), out)


def conv3d_backward(x, w, g, impl=None, impl_gw=None):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weights and bias."""
    conv = impl or _conv
    conv_gw = impl_gw or _conv_gw
    k = w.shape[2]
    g = np.ascontiguousarray(g)
    # input grad is a correlation with the flipped, transposed kernel
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    gp = np.ascontiguousarray(pad_same(g, k))
    gx = np.empty(x.shape, dtype=x.dtype)
    conv(gp, wt, np.zeros(x.shape[0], dtype=x.dtype), gx)
    gw = np.empty(w.shape, dtype=np.float64)
    conv_gw(np.ascontiguousarray(pad_same(x, k)), g, gw)
    gb = g.reshape(g.shape[0], -1).sum(axis=1, dtype=np.float64)
    return gx, gw.astype(w.dtype), gb.astype(w.dtype)


def dwconv3d_forward(x, w, b, impl=None):
    dw = impl or _dw
    xp = np.ascontiguousarray(pad_same(x, w.shape[1]))
    out = np.empty(x.shape, dtype=x.dtype)
    return dw(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), out)


def dwconv3d_backward(x, w, g, impl=None, impl_gw=None):
    dw = impl or _dw
    dw_gw = impl_gw or _dw_gw
    k = w.shape[1]
    g = np.ascontiguousarray(g)
    wf = np.ascontiguousarray(w[:, ::-1, ::-1, ::-1])
    gx = np.empty(x.shape, dtype=x.dtype)
    dw(np.ascontiguousarray(pad_same(g, k)), wf, np.zeros(x.shape[0], dtype=x.dtype), gx)
    gw = np.empty(w.shape, dtype=np.float64)
    dw_gw(np.ascontiguousarray(pad_same(x, k)), g, gw)
    gb = g.reshape(g.shape[0], -1).sum(axis=1, dtype=np.float64)
    return gx, gw.astype(w.dtype), gb.astype(w.dtype)


def maxpool3d_forward(x, window=3, stride=2, impl=None):
    """Returns pooled array and flat argmax indices into ``x``.

    Ties resolve to the first maximum in (i, j, l) window order.
    """
    pool = impl or _pool
    shape, pads = [], []
    for n in x.shape[1:]:
        o, pb, _ = pool_padding(n, window, stride)
        shape.append(o)
        pads.append(pb)
    out = np.empty((x.shape[0],) + tuple(shape), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.int64)
    return pool(np.ascontiguousarray(x), window, stride, np.array(pads, dtype=np.int64), out, arg)


def maxpool3d_backward(x_shape, arg, g, dtype, impl=None):
    scatter = impl or _scatter
    flat = np.zeros(int(np.prod(x_shape)), dtype=dtype)
    scatter(flat, arg.ravel(), np.ascontiguousarray(g, dtype=dtype).ravel())
    return flat.reshape(x_shape)


def backend():
    return "numba" if USE_NUMBA else "numpy"
