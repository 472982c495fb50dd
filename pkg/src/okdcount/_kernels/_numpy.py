"""Pure-numpy kernel implementations.

Fallback backend used when the compiled extension is not built. Every
function mirrors the compiled signatures exactly (the trailing
``num_threads`` argument is accepted and ignored here).
"""

import numpy as np


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x, w, b, dilation, padding, num_threads=1):
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    d, p = dilation, padding
    Ho = H + 2 * p - d * (kh - 1)
    Wo = W + 2 * p - d * (kw - 1)
    xp = _pad(x, p)
    # Accumulate in (B, Ho, Wo, Co) layout so each kernel tap is one
    # strided GEMM; transpose once at the end.
    acc = np.zeros((B, Ho, Wo, Co))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i * d : i * d + Ho, j * d : j * d + Wo]
            acc += np.matmul(xs.transpose(0, 2, 3, 1), w[:, :, i, j].T)
    acc += b
    return np.ascontiguousarray(acc.transpose(0, 3, 1, 2))


def conv2d_backward_input(gout, w, dilation, padding, H, W, num_threads=1):
    B, Co, Ho, Wo = gout.shape
    _, Ci, kh, kw = w.shape
    d, p = dilation, padding
    ginp = np.zeros((B, Ci, H + 2 * p, W + 2 * p))
    g = gout.transpose(0, 2, 3, 1)
    for i in range(kh):
        for j in range(kw):
            t = np.matmul(g, w[:, :, i, j])
            ginp[:, :, i * d : i * d + Ho, j * d : j * d + Wo] += t.transpose(0, 3, 1, 2)
    if p:
        ginp = ginp[:, :, p : p + H, p : p + W]
    return np.ascontiguousarray(ginp)


def conv2d_backward_weight(gout, x, kh, kw, dilation, padding, num_threads=1):
    B, Co, Ho, Wo = gout.shape
    d, p = dilation, padding
    Ci = x.shape[1]
    xp = _pad(x, p)
    gw = np.empty((Co, Ci, kh, kw))
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i * d : i * d + Ho, j * d : j * d + Wo]
            gw[:, :, i, j] = np.tensordot(gout, xs, axes=([0, 2, 3], [0, 2, 3]))
    gb = gout.sum(axis=(0, 2, 3))
    return gw, gb


def maxpool2d_forward(x, k, stride, num_threads=1):
    # Requires k == stride and H, W divisible by stride (checked upstream).
    B, C, H, W = x.shape
    Ho, Wo = H // stride, W // stride
    xr = x.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    # argmax keeps the first maximum in row-major window order.
    idx = xr.argmax(axis=-1).astype(np.int64)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2d_backward(gout, idx, k, stride, H, W, num_threads=1):
    B, C, Ho, Wo = gout.shape
    gr = np.zeros((B, C, Ho, Wo, k * k))
    np.put_along_axis(gr, idx[..., None], gout[..., None], axis=-1)
    gin = gr.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
    return np.ascontiguousarray(gin)


def _bin_edges(n: int, out: int):
    starts = (np.arange(out) * n) // out
    stops = -((-(np.arange(out) + 1) * n) // out)  # ceil((i+1)*n/out)
    return starts, stops


def adaptive_avg_pool_forward(x, oh, ow, num_threads=1):
    B, C, H, W = x.shape
    r0, r1 = _bin_edges(H, oh)
    c0, c1 = _bin_edges(W, ow)
    out = np.empty((B, C, oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[:, :, i, j] = x[:, :, r0[i] : r1[i], c0[j] : c1[j]].mean(axis=(2, 3))
    return out


def adaptive_avg_pool_backward(gout, H, W, num_threads=1):
    B, C, oh, ow = gout.shape
    r0, r1 = _bin_edges(H, oh)
    c0, c1 = _bin_edges(W, ow)
    gin = np.zeros((B, C, H, W))
    for i in range(oh):
        for j in range(ow):
            area = (r1[i] - r0[i]) * (c1[j] - c0[j])
            gin[:, :, r0[i] : r1[i], c0[j] : c1[j]] += (gout[:, :, i, j] / area)[..., None, None]
    return gin
