"""Independent slow reference implementations used as test oracles."""

import numpy as np


def naive_conv3d(x, k, bias, stride, padding):
    """Direct nested-loop cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n, cin, t, h, w = x.shape
    cout, _, kt, kh, kw = k.shape
    (st, sh, sw), (pt, ph, pw) = stride, padding
    ot = (t + 2 * pt - kt) // st + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((n, cout, ot, oh, ow))
    for b in range(n):
        for co in range(cout):
            for i in range(ot):
                for j in range(oh):
                    for l in range(ow):
                        acc = 0.0 if bias is None else float(bias[co])
                        for ci in range(cin):
                            for a in range(kt):
                                ti = i * st + a - pt
                                if not 0 <= ti < t:
                                    continue
                                for c in range(kh):
                                    hi = j * sh + c - ph
                                    if not 0 <= hi < h:
                                        continue
                                    for d in range(kw):
                                        wi = l * sw + d - pw
                                        if 0 <= wi < w:
                                            acc += x[b, ci, ti, hi, wi] * k[co, ci, a, c, d]
                        out[b, co, i, j, l] = acc
    return out


def naive_conv3d_transpose(x, k, stride, padding, out_dims):
    """Scatter form of the transposed convolution (kernel [Cin,Cout,...])."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    n, cin, t, h, w = x.shape
    _, cout, kt, kh, kw = k.shape
    (st, sh, sw), (pt, ph, pw) = stride, padding
    out = np.zeros((n, cout, *out_dims))
    for b in range(n):
        for ci in range(cin):
            for i in range(t):
                for j in range(h):
                    for l in range(w):
                        v = x[b, ci, i, j, l]
                        for a in range(kt):
                            for c in range(kh):
                                for d in range(kw):
                                    to, ho, wo = i * st + a - pt, j * sh + c - ph, l * sw + d - pw
                                    if 0 <= to < out_dims[0] and 0 <= ho < out_dims[1] and 0 <= wo < out_dims[2]:
                                        out[b, :, to, ho, wo] += v * k[ci, :, a, c, d]
    return out
