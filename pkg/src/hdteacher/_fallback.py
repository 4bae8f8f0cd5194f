"""Pure numpy/Python versions of the compiled kernels in ``_kernels.pyx``.

Signatures and accumulate-into semantics match the compiled module exactly,
so either can back :mod:`hdteacher.kernels`.
"""

import numpy as np


def _windows(xp, kshape, out_spatial, stride):
    # one strided view per kernel tap, stacked as (B, CI, taps, D, H, W)
    KD, KH, KW = kshape
    D, H, W = out_spatial
    taps = []
    for i in range(KD):
        for j in range(KH):
            for k in range(KW):
                taps.append(xp[:, :,
                               i:i + (D - 1) * stride + 1:stride,
                               j:j + (H - 1) * stride + 1:stride,
                               k:k + (W - 1) * stride + 1:stride])
    return np.stack(taps, axis=2)


def conv_forward(xp, w, out, stride):
    B, CO, D, H, W = out.shape
    cols = _windows(xp, w.shape[2:], (D, H, W), stride)
    cols = cols.reshape(B, -1, D * H * W)
    wm = w.reshape(CO, -1)
    out += np.matmul(wm, cols).reshape(out.shape)


def conv_backward_input(gout, w, gxp, stride):
    B, CO, D, H, W = gout.shape
    CO, CI, KD, KH, KW = w.shape
    g = gout.reshape(B, CO, -1)
    # (B, CI*taps, DHW) column gradients, scattered back tap by tap
    gcols = np.matmul(w.reshape(CO, -1).T, g).reshape(B, CI, KD, KH, KW, D, H, W)
    for i in range(KD):
        for j in range(KH):
            for k in range(KW):
                gxp[:, :,
                    i:i + (D - 1) * stride + 1:stride,
                    j:j + (H - 1) * stride + 1:stride,
                    k:k + (W - 1) * stride + 1:stride] += gcols[:, :, i, j, k]


def conv_backward_weight(gout, xp, gw, stride):
    B, CO, D, H, W = gout.shape
    cols = _windows(xp, gw.shape[2:], (D, H, W), stride).reshape(B, -1, D * H * W)
    g = gout.reshape(B, CO, -1)
    gw += np.einsum("bon,bkn->ok", g, cols).reshape(gw.shape)


def edt_lines(f, spacing):
    sp2 = spacing * spacing
    nlines, n = f.shape
    v = [0] * n
    z = [0.0] * (n + 1)
    for line in range(nlines):
        g = f[line].tolist()
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
        row = f[line]
        for p in range(n):
            while z[k + 1] < p:
                k += 1
            row[p] = sp2 * (p - v[k]) * (p - v[k]) + g[v[k]]
