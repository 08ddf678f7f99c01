"""Pure-numpy conv kernels (im2col / col2im). Fallback when the compiled
extension is unavailable; also the reference the extension is tested against."""

import numpy as np

BACKEND = "numpy"


def _im2col(x, kh, kw, stride, pad, ho, wo):
    cin, h, w = x.shape
    if pad:
        xp = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    cols = np.empty((cin, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d_forward(x, w, stride, pad):
    """x: (Cin,H,W), w: (Cout, Cin/groups, kH, kW). Returns (Cout,Ho,Wo).

    groups is implied by Cin // w.shape[1].
    """
    cin, h, wid = x.shape
    cout, cing, kh, kw = w.shape
    groups = cin // cing
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wid + 2 * pad - kw) // stride + 1
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    y = np.empty((cout, ho, wo), dtype=x.dtype)
    og = cout // groups
    for g in range(groups):
        cg = cols[g * cing:(g + 1) * cing].reshape(cing * kh * kw, ho * wo)
        wg = w[g * og:(g + 1) * og].reshape(og, cing * kh * kw)
        y[g * og:(g + 1) * og] = (wg @ cg).reshape(og, ho, wo)
    return y


def conv2d_backward(x, w, dy, stride, pad):
    """Gradients w.r.t. x and w for conv2d_forward."""
    cin, h, wid = x.shape
    cout, cing, kh, kw = w.shape
    groups = cin // cing
    og = cout // groups
    _, ho, wo = dy.shape
    cols = _im2col(x, kh, kw, stride, pad, ho, wo)
    dw = np.empty_like(w)
    dcols = np.empty_like(cols)
    for g in range(groups):
        cg = cols[g * cing:(g + 1) * cing].reshape(cing * kh * kw, ho * wo)
        dyg = dy[g * og:(g + 1) * og].reshape(og, ho * wo)
        wg = w[g * og:(g + 1) * og].reshape(og, cing * kh * kw)
        dw[g * og:(g + 1) * og] = (dyg @ cg.T).reshape(og, cing, kh, kw)
        dcols[g * cing:(g + 1) * cing] = (wg.T @ dyg).reshape(cing, kh, kw, ho, wo)
    dxp = np.zeros((cin, h + 2 * pad, wid + 2 * pad), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if pad:
        return dxp[:, pad:pad + h, pad:pad + wid], dw
    return dxp, dw
