"""Counter-based Gaussian noise (Philox4x32-10).

Every draw is a pure function of ``(seed, iteration, entity, tag, index)``,
so two optimizer variants that ask for the same key get bit-identical noise
no matter in which order, or on which worker, the request is made.
"""

from __future__ import annotations

import numpy as np

__all__ = ["philox4x32", "uniforms", "normals", "rademacher", "stream_digest"]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_ROUNDS = 10

# entity tags keep independent purposes on disjoint counter ranges
TAG_FORCE = 0
TAG_DIMER_PLUS = 1
TAG_DIMER_MINUS = 2
TAG_DIMER_CENTER = 3
TAG_PROBE = 4


def philox4x32(counter, key):
    """Philox4x32 with 10 rounds.

    Parameters
    ----------
    counter : array_like of uint32, shape (..., 4)
    key : array_like of uint32, shape (..., 2)

    Returns
    -------
    ndarray of uint32, shape broadcast(counter, key)[..., 4]
    """
    ctr = np.asarray(counter, dtype=np.uint32)
    k = np.asarray(key, dtype=np.uint32)
    shape = np.broadcast_shapes(ctr.shape[:-1], k.shape[:-1])
    c0, c1, c2, c3 = (np.broadcast_to(ctr[..., j], shape).astype(np.uint32) for j in range(4))
    k0 = np.broadcast_to(k[..., 0], shape).astype(np.uint32)
    k1 = np.broadcast_to(k[..., 1], shape).astype(np.uint32)
    with np.errstate(over="ignore"):
        for r in range(_ROUNDS):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            p0 = _M0 * c0.astype(np.uint64)
            p1 = _M1 * c2.astype(np.uint64)
            hi0 = (p0 >> np.uint64(32)).astype(np.uint32)
            lo0 = (p0 & _MASK32).astype(np.uint32)
            hi1 = (p1 >> np.uint64(32)).astype(np.uint32)
            lo1 = (p1 & _MASK32).astype(np.uint32)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


def _key(seed):
    s = np.asarray(seed, dtype=np.uint64)
    return np.stack([(s & _MASK32).astype(np.uint32), (s >> np.uint64(32)).astype(np.uint32)], axis=-1)


def _blocks(seed, iteration, entity, tag, nblocks):
    """Raw words for ``nblocks`` counter blocks, shape broadcast(seed, entity) + (nblocks, 4)."""
    seed = np.asarray(seed, dtype=np.uint64)
    entity = np.asarray(entity, dtype=np.uint64)
    shape = np.broadcast_shapes(seed.shape, entity.shape)
    seed = np.broadcast_to(seed, shape)[..., None]
    entity = np.broadcast_to(entity, shape)[..., None]
    block = np.arange(nblocks, dtype=np.uint64)
    bshape = shape + (nblocks,)
    ctr = np.empty(bshape + (4,), dtype=np.uint32)
    ctr[..., 0] = np.uint32(iteration & 0xFFFFFFFF)
    ctr[..., 1] = np.broadcast_to(entity & _MASK32, bshape).astype(np.uint32)
    ctr[..., 2] = np.broadcast_to(block, bshape).astype(np.uint32)
    ctr[..., 3] = np.uint32(((tag & 0xFF) << 24) | ((iteration >> 32) & 0xFFFFFF))
    return philox4x32(ctr, _key(np.broadcast_to(seed, bshape)))


def _to_unit(hi, lo):
    # 53-bit uniform in [0, 1)
    a = (hi >> np.uint32(5)).astype(np.float64)
    b = (lo >> np.uint32(6)).astype(np.float64)
    return (a * 67108864.0 + b) / 9007199254740992.0


def uniforms(seed, iteration, entity, n, tag=TAG_FORCE):
    """Uniform draws on [0, 1), shape broadcast(seed, entity) + (n,)."""
    nb = (n + 1) // 2
    w = _blocks(seed, iteration, entity, tag, nb)
    u = np.stack([_to_unit(w[..., 0], w[..., 1]), _to_unit(w[..., 2], w[..., 3])], axis=-1)
    return u.reshape(u.shape[:-2] + (2 * nb,))[..., :n]


def normals(seed, iteration, entity, n, tag=TAG_FORCE):
    """Standard normal draws keyed by ``(seed, iteration, entity, tag)``.

    ``seed`` and ``entity`` broadcast against each other; the result has shape
    ``broadcast(seed, entity).shape + (n,)``. Box-Muller on one Philox block
    yields two normals, so draw ``j`` depends only on block ``j // 2``.
    """
    nb = (n + 1) // 2
    w = _blocks(seed, iteration, entity, tag, nb)
    u1 = 1.0 - _to_unit(w[..., 0], w[..., 1])  # (0, 1]
    u2 = _to_unit(w[..., 2], w[..., 3])
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.stack([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)], axis=-1)
    return z.reshape(z.shape[:-2] + (2 * nb,))[..., :n]


def rademacher(seed, iteration, entity, n, tag=TAG_PROBE):
    """+-1 probes built from the low bit of each Philox word."""
    nb = (n + 3) // 4
    w = _blocks(seed, iteration, entity, tag, nb)
    bits = (w & np.uint32(1)).astype(np.float64)
    return (2.0 * bits - 1.0).reshape(bits.shape[:-2] + (4 * nb,))[..., :n]


def stream_digest(values) -> str:
    """Short hex digest of a float array, for logging which draws were consumed."""
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(values, dtype=np.float64).tobytes()).hexdigest()[:16]
