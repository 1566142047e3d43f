"""Pure numpy versions of the kernels in ``_kernels.pyx``.

Same signatures and results; used when the extension is not built or when
``GROUPBNN_PURE_PYTHON`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def popcount_xor(a, b):
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ValueError("word arrays differ in length")
    return int(np.bitwise_count(a ^ b).sum(dtype=np.int64))


def _valid_range(size, out_size, stride, pad, tap):
    # output positions o with 0 <= o*stride - pad + tap < size
    lo = max(0, -(-(pad - tap) // stride))
    hi = min(out_size, (size - 1 + pad - tap) // stride + 1)
    return lo, hi


def xnor_conv_counts(xw, ww, channels_per_group, sh, sw, ph, pw, ho, wo):
    n_batch, groups, h, w, nw = xw.shape
    n_out, kh, kw, nw_w = ww.shape
    if nw_w != nw:
        raise ValueError("activation and weight word counts differ")
    if n_out % groups:
        raise ValueError("output channels not divisible by groups")
    og = n_out // groups
    wg = ww.reshape(groups, og, kh, kw, nw)
    pop = np.zeros((n_batch, groups, og, ho, wo), dtype=np.int32)
    taps = np.zeros((ho, wo), dtype=np.int32)
    for i in range(kh):
        y0, y1 = _valid_range(h, ho, sh, ph, i)
        if y0 >= y1:
            continue
        iy0 = y0 * sh - ph + i
        for j in range(kw):
            x0, x1 = _valid_range(w, wo, sw, pw, j)
            if x0 >= x1:
                continue
            ix0 = x0 * sw - pw + j
            xs = xw[:, :, iy0:iy0 + (y1 - y0 - 1) * sh + 1:sh, ix0:ix0 + (x1 - x0 - 1) * sw + 1:sw, :]
            # (n, g, 1, hy, wx, nw) ^ (1, g, og, 1, 1, nw)
            diff = xs[:, :, None] ^ wg[None, :, :, i, j, None, None, :]
            pop[:, :, :, y0:y1, x0:x1] += np.bitwise_count(diff).sum(axis=-1, dtype=np.int32)
            taps[y0:y1, x0:x1] += 1
    counts = taps * np.int32(channels_per_group) - 2 * pop
    return counts.reshape(n_batch, n_out, ho, wo)


def im2col(x, groups, kh, kw, sh, sw, ph, pw, ho, wo):
    n, c, h, w = x.shape
    cg = c // groups
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    # (n, c, ho, wo, kh, kw) -> (g, cg, kh, kw, n, ho, wo)
    cols = win.reshape(n, groups, cg, ho, wo, kh, kw).transpose(1, 2, 5, 6, 0, 3, 4)
    return np.ascontiguousarray(cols, dtype=np.float32).reshape(groups, cg * kh * kw, n * ho * wo)


def col2im(cols, n, c, h, w, kh, kw, sh, sw, ph, pw, ho, wo):
    groups = cols.shape[0]
    # (g, cg, kh, kw, n, ho, wo) -> (kh, kw, n, c, ho, wo), one copy up front
    taps = cols.reshape(groups, c // groups, kh, kw, n, ho, wo).transpose(2, 3, 4, 0, 1, 5, 6)
    taps = np.ascontiguousarray(taps).reshape(kh, kw, n, c, ho, wo)
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += taps[i, j]
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w])
