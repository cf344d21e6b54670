"""Slow, obviously-correct reference kernels used as oracles in tests."""

import numpy as np


def naive_conv3d(x, w, b, spec):
    n, c, t, h, wd = x.shape
    o = w.shape[0]
    kt, kh, kw = spec.kernel
    st, sh, sw = spec.stride
    pt, ph, pw = spec.padding
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    ot, oh, ow = spec.output_extents((t, h, wd))
    out = np.zeros((n, o, ot, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for ti in range(ot):
                for hi in range(oh):
                    for wi in range(ow):
                        acc = 0.0
                        for ci in range(c):
                            for a in range(kt):
                                for bb in range(kh):
                                    for d in range(kw):
                                        acc += (xp[ni, ci, ti * st + a, hi * sh + bb, wi * sw + d]
                                                * w[oi, ci, a, bb, d])
                        out[ni, oi, ti, hi, wi] = acc + (b[oi] if b is not None else 0.0)
    return out


def naive_maxpool3d(x, window, stride):
    n, c, t, h, w = x.shape
    kt, kh, kw = window
    st, sh, sw = stride
    ot, oh, ow = (t - kt) // st + 1, (h - kh) // sh + 1, (w - kw) // sw + 1
    out = np.zeros((n, c, ot, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for a in range(ot):
                for b in range(oh):
                    for d in range(ow):
                        out[ni, ci, a, b, d] = x[ni, ci, a * st : a * st + kt,
                                                 b * sh : b * sh + kh, d * sw : d * sw + kw].max()
    return out


def central_difference(f, x, eps=1e-5):
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
