# Compiled Philox4x32-10 kernels. A pure-numpy twin lives in rng.philox4x32
# and is used by the tests as an independent reference.
import math

import numba as nb
import numpy as np

M0 = np.uint64(0xD2511F53)
M1 = np.uint64(0xCD9E8D57)
W0 = np.uint64(0x9E3779B9)
W1 = np.uint64(0xBB67AE85)
LO = np.uint64(0xFFFFFFFF)
S32 = np.uint64(32)
S11 = np.uint64(11)
TWO_M53 = 2.0 ** -53
TWO_PI = 2.0 * math.pi

# counter word c2 separates the uniform and normal domains of one stream
UNIFORM_DOMAIN = 0
NORMAL_DOMAIN = 1


@nb.njit(cache=True, inline="always")
def _philox(c0, c1, c2, c3, k0, k1):
    for r in range(10):
        if r > 0:
            k0 = (k0 + W0) & LO
            k1 = (k1 + W1) & LO
        p0 = M0 * c0
        p1 = M1 * c2
        n0 = (p1 >> S32) ^ c1 ^ k0
        n2 = (p0 >> S32) ^ c3 ^ k1
        c0, c1, c2, c3 = n0, p1 & LO, n2, p0 & LO
    return c0, c1, c2, c3


@nb.njit(cache=True, inline="always")
def _open01(hi, lo):
    return (np.float64(((hi << S32) | lo) >> S11) + 0.5) * TWO_M53


@nb.njit(cache=True, inline="always")
def _half_open01(hi, lo):
    return np.float64(((hi << S32) | lo) >> S11) * TWO_M53


@nb.njit(cache=True)
def uniforms_flat(digests, index):
    n = digests.shape[0]
    out = np.empty(n)
    for i in range(n):
        j = index[i]
        blk = np.uint64(j >> 1)
        key = digests[i]
        x0, x1, x2, x3 = _philox(blk & LO, blk >> S32, np.uint64(UNIFORM_DOMAIN),
                                 np.uint64(0), key & LO, key >> S32)
        if j & 1:
            out[i] = _open01(x2, x3)
        else:
            out[i] = _open01(x0, x1)
    return out


@nb.njit(cache=True, inline="always")
def _normal(key, j):
    blk = np.uint64(j >> 1)
    x0, x1, x2, x3 = _philox(blk & LO, blk >> S32, np.uint64(NORMAL_DOMAIN),
                             np.uint64(0), key & LO, key >> S32)
    rad = math.sqrt(-2.0 * math.log(_open01(x0, x1)))
    ang = TWO_PI * _half_open01(x2, x3)
    if j & 1:
        return rad * math.sin(ang)
    return rad * math.cos(ang)


@nb.njit(cache=True)
def normals_flat(digests, index):
    n = digests.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _normal(digests[i], index[i])
    return out


@nb.njit(cache=True)
def normal_rows(digests, offset, count):
    """(B, count) normals; row b reads positions offset .. offset+count-1."""
    n = digests.shape[0]
    out = np.empty((n, count))
    for b in range(n):
        key = digests[b]
        j = offset
        # pairs share one block
        if j & 1 and count > 0:
            out[b, 0] = _normal(key, j)
            start = 1
        else:
            start = 0
        c = start
        while c + 1 < count:
            jj = offset + c
            blk = np.uint64(jj >> 1)
            x0, x1, x2, x3 = _philox(blk & LO, blk >> S32, np.uint64(NORMAL_DOMAIN),
                                     np.uint64(0), key & LO, key >> S32)
            rad = math.sqrt(-2.0 * math.log(_open01(x0, x1)))
            ang = TWO_PI * _half_open01(x2, x3)
            out[b, c] = rad * math.cos(ang)
            out[b, c + 1] = rad * math.sin(ang)
            c += 2
        if c < count:
            out[b, c] = _normal(key, offset + c)
    return out


@nb.njit(cache=True, error_model="numpy")
def brownian_sum(digests, sq, d):
    """W[b] = sum_o sq[b, o] * z[b, o, :] with z the canonical normals of row b.

    Same summation order as the unfused numpy loop; trailing cells with
    sq == 0 (shorter rows) are skipped.
    """
    n, cells = sq.shape
    out = np.zeros((n, d))
    for b in range(n):
        key = digests[b]
        k0 = key & LO
        k1 = key >> S32
        used = cells
        while used > 0 and sq[b, used - 1] == 0.0:
            used -= 1
        total = used * d
        o = 0
        k = 0
        blk = np.uint64(0)
        for j in range(0, total, 2):
            x0, x1, x2, x3 = _philox(blk & LO, blk >> S32, np.uint64(NORMAL_DOMAIN),
                                     np.uint64(0), k0, k1)
            blk += np.uint64(1)
            rad = math.sqrt(-2.0 * math.log(_open01(x0, x1)))
            ang = TWO_PI * _half_open01(x2, x3)
            out[b, k] += sq[b, o] * (rad * math.cos(ang))
            k += 1
            if k == d:
                k = 0
                o += 1
            if j + 1 < total:
                out[b, k] += sq[b, o] * (rad * math.sin(ang))
                k += 1
                if k == d:
                    k = 0
                    o += 1
    return out
