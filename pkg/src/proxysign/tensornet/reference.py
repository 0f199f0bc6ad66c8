"""Loop-based reference kernels used as oracles for the fast operators.

Deliberately naive: nothing here shares code with ``ops``.
"""

import numpy as np


def conv3d_direct(x, k, stride=(1, 1, 1), pad=(0, 0, 0)):
    """Direct seven-loop 3-D cross-correlation."""
    n_batch, c_in, t_in, h_in, w_in = x.shape
    n_filt, _, kt, kh, kw = k.shape
    st, sh, sw = stride
    pt, ph, pw = pad
    t_out = (t_in + 2 * pt - kt) // st + 1
    h_out = (h_in + 2 * ph - kh) // sh + 1
    w_out = (w_in + 2 * pw - kw) // sw + 1
    out = np.zeros((n_batch, n_filt, t_out, h_out, w_out), dtype=np.float64)
    for n in range(n_batch):
        for f in range(n_filt):
            for t in range(t_out):
                for i in range(h_out):
                    for j in range(w_out):
                        acc = 0.0
                        for c in range(c_in):
                            for a in range(kt):
                                ti = t * st + a - pt
                                if ti < 0 or ti >= t_in:
                                    continue
                                for b in range(kh):
                                    hi = i * sh + b - ph
                                    if hi < 0 or hi >= h_in:
                                        continue
                                    for d in range(kw):
                                        wi = j * sw + d - pw
                                        if 0 <= wi < w_in:
                                            acc += float(x[n, c, ti, hi, wi]) * float(k[f, c, a, b, d])
                        out[n, f, t, i, j] = acc
    return out


def maxpool3d_direct(x, window, stride, pad):
    n_batch, c_in, t_in, h_in, w_in = x.shape
    kt, kh, kw = window
    st, sh, sw = stride
    pt, ph, pw = pad
    dims = [(d + 2 * p - k) // s + 1 for d, k, s, p in zip((t_in, h_in, w_in), window, stride, pad)]
    out = np.full((n_batch, c_in, *dims), -np.inf)
    for n in range(n_batch):
        for c in range(c_in):
            for t in range(dims[0]):
                for i in range(dims[1]):
                    for j in range(dims[2]):
                        for a in range(kt):
                            for b in range(kh):
                                for d in range(kw):
                                    ti, hi, wi = t * st + a - pt, i * sh + b - ph, j * sw + d - pw
                                    if 0 <= ti < t_in and 0 <= hi < h_in and 0 <= wi < w_in:
                                        out[n, c, t, i, j] = max(out[n, c, t, i, j], x[n, c, ti, hi, wi])
    return out
