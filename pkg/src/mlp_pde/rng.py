"""Hierarchical counter-based random streams.

Every random object used by the solver is labelled by a key ``(seed, path)``
where ``path`` is a finite tuple of signed integers (a node of the index tree
``Z^1 u Z^2 u ...``).  The key is folded into a 64-bit digest, and the digest
is used as the key of a Philox4x32-10 counter-based generator.  The ``j``-th
uniform of a stream is a pure function of ``(digest, j)``, so streams can be
materialized lazily, in any order, and vectorized across many keys at once.

Each stream has two disjoint counter domains, uniforms and normals.  Normal
position ``j`` is the Box-Muller lane ``j % 2`` of Philox block ``j // 2`` in
the normal domain; uniform position ``j`` is built from lane ``j % 2`` of block
``j // 2`` in the uniform domain.

Canonical draw layout of a sample stream (frozen; golden tests depend on it):

* uniform position 0: the uniform behind the proxy time ``r``
  (unused by terminal samples);
* normal position ``j*d + k``: standard normal for Euler cell ``j``,
  coordinate ``k`` (time-major, coordinate-minor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

__all__ = [
    "RandomKey",
    "RandomStream",
    "derive_stream",
    "gaussian_increments",
    "sample_arcsine",
    "sample_proxy_time",
    "rho",
    "arcsine_cdf",
    "philox4x32",
    "uniforms_at",
    "normals_at",
    "normal_rows",
    "child_digests",
    "ARCSINE_EPS",
    "PROXY_SLOT",
]

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_SEED_TAG = 0x6A09E667F3BCC909

ARCSINE_EPS = 1e-12
PROXY_SLOT = 0

_PHILOX_M0 = np.uint64(0xD2511F53)
_PHILOX_M1 = np.uint64(0xCD9E8D57)
_PHILOX_W0 = np.uint64(0x9E3779B9)
_PHILOX_W1 = np.uint64(0xBB67AE85)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


# --------------------------------------------------------------------------
# key hashing
# --------------------------------------------------------------------------

def _mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_np(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _step(h: int, a: int) -> int:
    # bijective in ``a`` for fixed ``h``: siblings never share a digest
    return _mix64(h ^ _mix64((a + _GOLDEN) & MASK64))


def child_digests(digests: np.ndarray, a: int, b: np.ndarray | int) -> np.ndarray:
    """Digests of ``path ++ (a, b)`` for every parent digest.

    ``digests`` has shape ``(B,)``; ``b`` may be a scalar or an array of
    shape ``(M,)``, in which case the result has shape ``(B, M)``.
    """
    digests = np.asarray(digests, dtype=np.uint64)
    with np.errstate(over="ignore"):
        ha = _mix64_np(digests ^ np.uint64(_mix64((a + _GOLDEN) & MASK64)))
        b = np.asarray(b, dtype=np.int64).astype(np.uint64)
        tb = _mix64_np(b + np.uint64(_GOLDEN))
        if tb.ndim == 0:
            return _mix64_np(ha ^ tb)
        return _mix64_np(ha[:, None] ^ tb[None, :])


@dataclass(frozen=True)
class RandomKey:
    """A node ``path`` of the index tree under a global ``seed``."""

    seed: int = 0
    path: tuple[int, ...] = ()
    digest: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.seed <= MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        path = tuple(int(p) for p in self.path)
        object.__setattr__(self, "path", path)
        h = _mix64(self.seed ^ _SEED_TAG)
        for a in path:
            h = _step(h, a)
        object.__setattr__(self, "digest", h)

    def child(self, *indices: int) -> "RandomKey":
        return RandomKey(self.seed, self.path + tuple(indices))


# --------------------------------------------------------------------------
# Philox4x32-10
# --------------------------------------------------------------------------

def philox4x32(counter, key, rounds: int = 10):
    """Vectorized Philox4x32 block function.

    ``counter`` is a sequence of four arrays of 32-bit words and ``key`` a
    sequence of two; all broadcast together.  Returns four uint64 arrays each
    holding a 32-bit output word.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in counter)
    k0, k1 = (np.asarray(k, dtype=np.uint64) for k in key)
    for r in range(rounds):
        if r:
            k0 = (k0 + _PHILOX_W0) & _LO32
            k1 = (k1 + _PHILOX_W1) & _LO32
        p0 = _PHILOX_M0 * c0
        p1 = _PHILOX_M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _S32) ^ c1 ^ k0,
            p1 & _LO32,
            (p0 >> _S32) ^ c3 ^ k1,
            p0 & _LO32,
        )
    return c0, c1, c2, c3


def uniforms_at(digests, index) -> np.ndarray:
    """Uniforms in (0, 1) at positions ``index`` of streams ``digests`` (broadcast)."""
    digests, index = np.broadcast_arrays(np.asarray(digests, dtype=np.uint64),
                                         np.asarray(index, dtype=np.int64))
    out = _kernels.uniforms_flat(np.array(digests).ravel(), np.array(index).ravel())
    return out.reshape(digests.shape)


def normals_at(digests, index) -> np.ndarray:
    """Standard normals at positions ``index`` of streams ``digests`` (broadcast)."""
    digests, index = np.broadcast_arrays(np.asarray(digests, dtype=np.uint64),
                                         np.asarray(index, dtype=np.int64))
    out = _kernels.normals_flat(np.array(digests).ravel(), np.array(index).ravel())
    return out.reshape(digests.shape)


def normal_rows(digests, count: int, offset: int = 0) -> np.ndarray:
    """Normals at positions ``offset .. offset+count-1`` for each digest, shape (B, count)."""
    digests = np.ascontiguousarray(np.atleast_1d(np.asarray(digests, dtype=np.uint64)))
    return _kernels.normal_rows(digests, int(offset), int(count))


# --------------------------------------------------------------------------
# single-stream API
# --------------------------------------------------------------------------

class RandomStream:
    """Sequential reader over the two counter domains of one key.

    The output sequences are pure functions of the key; the only state is a
    read cursor per domain.
    """

    def __init__(self, key: RandomKey):
        self.key = key
        self.uniform_pos = 0
        self.normal_pos = 0

    @property
    def draws(self) -> int:
        return self.uniform_pos + self.normal_pos

    def uniforms(self, count: int) -> np.ndarray:
        idx = np.arange(self.uniform_pos, self.uniform_pos + count, dtype=np.int64)
        self.uniform_pos += count
        return uniforms_at(np.uint64(self.key.digest), idx)

    def normals(self, count: int) -> np.ndarray:
        out = normal_rows(np.uint64(self.key.digest), count, self.normal_pos)[0]
        self.normal_pos += count
        return out


def derive_stream(key: RandomKey) -> RandomStream:
    return RandomStream(key)


def gaussian_increments(stream: RandomStream, count: int, dt: float, d: int | None = None) -> np.ndarray:
    """Brownian increments ``N(0, dt)`` read in canonical order.

    With ``d`` given, returns ``count`` time-major rows of ``d`` coordinates.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = count if d is None else count * d
    z = math.sqrt(dt) * stream.normals(n)
    return z if d is None else z.reshape(count, d)


# --------------------------------------------------------------------------
# arcsine proxy times
# --------------------------------------------------------------------------

def _arcsine_from_uniform(u):
    r = np.sin(0.5 * np.pi * np.asarray(u)) ** 2
    return np.clip(r, ARCSINE_EPS, 1.0 - ARCSINE_EPS)


def sample_arcsine(stream: RandomStream | None = None, *, u=None):
    """Beta(1/2, 1/2) variate ``sin^2(pi u / 2)``, clamped away from {0, 1}.

    Pass ``u`` directly to apply the transform to given uniforms.
    """
    if u is None:
        u = stream.uniforms(1)[0]
    r = _arcsine_from_uniform(u)
    return float(r) if np.ndim(r) == 0 else r


def arcsine_cdf(b):
    """``P(r <= b) = (2/pi) arcsin(sqrt(b))``."""
    return 2.0 / np.pi * np.arcsin(np.sqrt(b))


def sample_proxy_time(stream: RandomStream, t: float, T: float) -> float:
    if not t < T:
        raise ValueError(f"need t < T, got t={t}, T={T}")
    s = t + (T - t) * sample_arcsine(stream)
    # on very short intervals the clamp alone can round onto an endpoint
    return min(max(s, math.nextafter(t, T)), math.nextafter(T, t))


def rho(t, s, T):
    """Arcsine density ``1 / (pi sqrt((T-s)(s-t)))`` of the proxy time on (t, T).

    The Beta function value B(1/2, 1/2) is exactly pi.
    """
    t, s = np.asarray(t, dtype=float), np.asarray(s, dtype=float)
    if np.any(s <= t) or np.any(s >= T):
        raise ValueError("rho requires t < s < T")
    out = 1.0 / (np.pi * np.sqrt((T - s) * (s - t)))
    return float(out) if out.ndim == 0 else out
