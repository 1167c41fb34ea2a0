"""Compiled inner loops.

Everything here is pure numeric code over numpy arrays. Reduced-precision
kernels take operands that already sit on their storage grid (float64 arrays
holding exactly representable values) and re-round after each arithmetic op
according to an integer rounding code:

    ROUND_NONE  keep float64
    ROUND_F32   round to binary32
    ROUND_F16   round to binary16 (round-to-nearest-even, overflow -> inf)

Products and sums of two binary16/binary32 values are computed exactly enough
in float64 that a single rounding afterwards equals the correctly rounded
result, so no double-rounding error is introduced.
"""

import math

import numpy as np
from numba import njit

ROUND_NONE = 0
ROUND_F32 = 1
ROUND_F16 = 2

HALF_MAX = 65504.0


HALF_MIN_NORMAL = 2.0**-14
# adding then subtracting 1.5 * 2**28 rounds |x| < 2**27 to a multiple of 2**-24
_SUBNORMAL_MAGIC = 1.5 * 2.0**28
_HALF_KEEP = np.uint64(0xFFFFFC0000000000)  # sign, exponent, top 10 mantissa bits
_HALF_BIAS = np.uint64((1 << 41) - 1)
_ONE = np.uint64(1)
_SHIFT = np.uint64(42)


@njit(cache=True, nogil=True, inline="always")
def round_half(x):
    """Round a float64 to the nearest binary16 value (ties to even)."""
    if x != x:
        return x
    a = abs(x)
    if a < HALF_MIN_NORMAL:
        return math.copysign((a + _SUBNORMAL_MAGIC) - _SUBNORMAL_MAGIC, x)
    b = np.float64(x).view(np.uint64)
    b = (b + _HALF_BIAS + ((b >> _SHIFT) & _ONE)) & _HALF_KEEP
    v = np.uint64(b).view(np.float64)
    if abs(v) > HALF_MAX:
        return math.copysign(math.inf, x)
    return v


@njit(cache=True, nogil=True)
def round_half_into(x, out):
    """Elementwise round_half over a flat float64 array."""
    for i in range(x.size):
        out[i] = round_half(x[i])
    return out


@njit(cache=True, nogil=True, inline="always")
def apply_round(x, mode):
    if mode == ROUND_F16:
        return round_half(x)
    if mode == ROUND_F32:
        return float(np.float32(x))
    return x


@njit(cache=True, nogil=True)
def _accumulate(w, x, b, pf, prod_mode, acc_mode, out_mode, out):
    # w: (T, J) rows of weights, x: (T,), b: (J,)
    # Lane j sums its T terms in index order whatever pf is; pf only sets how
    # many lanes advance together, so results never depend on it.
    T, J = w.shape
    if prod_mode == ROUND_F32 and acc_mode == ROUND_F32:
        acc32 = np.zeros(J, dtype=np.float32)
        for t in range(T):
            xv = np.float32(x[t])
            if xv == 0.0:
                continue
            for j0 in range(0, J, pf):
                for j in range(j0, min(J, j0 + pf)):
                    acc32[j] = acc32[j] + np.float32(w[t, j]) * xv
        for j in range(J):
            out[j] = apply_round(np.float64(acc32[j]) + b[j], out_mode)
        return
    acc = np.zeros(J)
    for t in range(T):
        xv = x[t]
        if xv == 0.0:
            continue
        for j0 in range(0, J, pf):
            for j in range(j0, min(J, j0 + pf)):
                p = apply_round(w[t, j] * xv, prod_mode)
                acc[j] = apply_round(acc[j] + p, acc_mode)
    for j in range(J):
        out[j] = apply_round(acc[j] + b[j], out_mode)


@njit(cache=True, nogil=True)
def dense_support(w, x, b, pf, prod_mode, acc_mode, out_mode):
    out = np.empty(w.shape[1])
    _accumulate(w, x, b, pf, prod_mode, acc_mode, out_mode, out)
    return out


@njit(cache=True, nogil=True)
def blocked_support(w, x, b, pf, prod_mode, acc_mode, out_mode):
    # w: (H, T, J), x: (H, T), b: (H, J) -> supports (H, J)
    H, T, J = w.shape
    out = np.empty((H, J))
    for h in range(H):
        _accumulate(w[h], x[h], b[h], pf, prod_mode, acc_mode, out_mode, out[h])
    return out


@njit(cache=True, nogil=True)
def reduced_dot_kernel(w, x, prod_mode, acc_mode):
    acc = 0.0
    for t in range(w.shape[0]):
        p = apply_round(w[t] * x[t], prod_mode)
        acc = apply_round(acc + p, acc_mode)
    return acc


# ---------------------------------------------------------------- training


@njit(cache=True, nogil=True)
def ema_joint_update(p_joint, xc, y, alpha):
    """p_joint[h,c,i,j] <- (1-a) p_joint + a * xc[h,c,i] * y[h,j], in place."""
    H, C, I, J = p_joint.shape
    keep = 1.0 - alpha
    for h in range(H):
        for c in range(C):
            for i in range(I):
                ax = alpha * xc[h, c, i]
                for j in range(J):
                    p_joint[h, c, i, j] = keep * p_joint[h, c, i, j] + ax * y[h, j]


@njit(cache=True, nogil=True)
def gather_joint_rows(p_joint, xc, n_act, eps, lpre, buf, row_h, row_x, row_lpre):
    """Copy p_joint+eps rows whose pre-activity is nonzero into buf.

    Only active slots (first n_act) are visited. Returns the row count.
    """
    H, C, I, J = p_joint.shape
    r = 0
    for h in range(H):
        for c in range(n_act):
            for i in range(I):
                xv = xc[h, c, i]
                if xv != 0.0:
                    for j in range(J):
                        buf[r, j] = p_joint[h, c, i, j] + eps
                    row_h[r] = h
                    row_x[r] = xv
                    row_lpre[r] = lpre[h, c, i]
                    r += 1
    return r


@njit(cache=True, nogil=True)
def support_from_log_rows(log_rows, n_rows, row_h, row_x, row_lpre, lpost, bias_gain, out):
    """s[h,j] = g*lpost + sum_rows x*(log p_ij - log p_i - log p_j)."""
    H, J = lpost.shape
    xsum = np.zeros(H)
    for h in range(H):
        for j in range(J):
            out[h, j] = 0.0
    for r in range(n_rows):
        h = row_h[r]
        xv = row_x[r]
        q = row_lpre[r]
        xsum[h] += xv
        for j in range(J):
            out[h, j] += xv * (log_rows[r, j] - q)
    for h in range(H):
        for j in range(J):
            out[h, j] += (bias_gain - xsum[h]) * lpost[h, j]
