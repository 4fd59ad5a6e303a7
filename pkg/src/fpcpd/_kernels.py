"""Compiled per-entry SGD kernels.

Perturbation noise comes from a counter-based generator keyed on
``(seed, epoch, entry position, component)`` so the draws do not depend on
which thread handles an entry. That is what keeps multi-threaded runs bitwise
equal to single-threaded ones.
"""

from __future__ import annotations

import math
import os

os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")
# Numba sizes its pool from this at import; allow thread counts above the core count.
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(os.cpu_count() or 1, 16)))

import numba  # noqa: E402
import numpy as np  # noqa: E402
from numba import njit, prange  # noqa: E402

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO_PI = 2.0 * math.pi
_INV53 = 1.0 / 9007199254740992.0


@njit(inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(inline="always")
def _entry_key(seed, epoch, pos):
    x = _mix(np.uint64(seed) * _GOLD + np.uint64(1))
    x = _mix(x ^ (np.uint64(epoch) * _M1))
    return _mix(x ^ (np.uint64(pos) * _M2))


@njit(inline="always")
def _fill_normals(key, buf):
    """Standard normals for one entry, generated in Box-Muller pairs."""
    n = buf.shape[0]
    for p in range((n + 1) // 2):
        c = np.uint64(p)
        h1 = _mix(key + (np.uint64(2) * c + np.uint64(1)) * _GOLD)
        h2 = _mix(key + (np.uint64(2) * c + np.uint64(2)) * _GOLD)
        u1 = (np.float64(h1 >> _S11) + 1.0) * _INV53
        u2 = np.float64(h2 >> _S11) * _INV53
        rad = math.sqrt(-2.0 * math.log(u1))
        ang = _TWO_PI * u2
        buf[2 * p] = rad * math.cos(ang)
        if 2 * p + 1 < n:
            buf[2 * p + 1] = rad * math.sin(ang)


@njit(cache=True)
def gaussian_draws(seed, epoch, pos, n):
    """The ``n`` standard normals an entry update at ``pos`` would use."""
    out = np.empty(n)
    _fill_normals(_entry_key(seed, epoch, pos), out)
    return out


@njit
def _update_entry(X, A, B, C, vA, vB, vC, i, j, k, pos,
                  eta, gamma, noise, beta, lookahead, seed, epoch, buf):
    R = A.shape[1]
    shift = gamma if lookahead else 0.0
    e = X[i, j, k]
    for r in range(R):
        e -= (A[i, r] + shift * vA[i, r]) * (B[j, r] + shift * vB[j, r]) * (C[k, r] + shift * vC[k, r])
    if noise != 0.0:
        _fill_normals(_entry_key(seed, epoch, pos), buf)
    step_noise = eta * noise
    step_l1 = eta * beta
    for r in range(R):
        la = A[i, r] + shift * vA[i, r]
        lb = B[j, r] + shift * vB[j, r]
        lc = C[k, r] + shift * vC[k, r]
        ga = e * lb * lc
        gb = e * la * lc
        gc = e * la * lb
        va = gamma * vA[i, r] + (1.0 - gamma) * ga
        vb = gamma * vB[j, r] + (1.0 - gamma) * gb
        vc = gamma * vC[k, r] + (1.0 - gamma) * gc
        vA[i, r] = va
        vB[j, r] = vb
        vC[k, r] = vc
        a = A[i, r] + eta * va
        b = B[j, r] + eta * vb
        c = C[k, r] + eta * vc
        if noise != 0.0:
            a += step_noise * buf[r]
            b += step_noise * buf[R + r]
            c += step_noise * buf[2 * R + r]
        if beta != 0.0:
            a -= step_l1 * np.sign(A[i, r])
            b -= step_l1 * np.sign(B[j, r])
            c -= step_l1 * np.sign(C[k, r])
        A[i, r] = a
        B[j, r] = b
        C[k, r] = c


@njit(nogil=True, cache=True)
def epoch_serial(X, A, B, C, vA, vB, vC, entries, offsets, order,
                 eta, gamma, noise, beta, lookahead, seed, epoch):
    buf = np.empty(3 * A.shape[1])
    for ob in range(order.shape[0]):
        blk = order[ob]
        for pos in range(offsets[blk], offsets[blk + 1]):
            _update_entry(X, A, B, C, vA, vB, vC,
                          entries[pos, 0], entries[pos, 1], entries[pos, 2], pos,
                          eta, gamma, noise, beta, lookahead, seed, epoch, buf)


@njit(parallel=True, cache=True)
def epoch_parallel(X, A, B, C, vA, vB, vC, entries, offsets, order,
                   eta, gamma, noise, beta, lookahead, seed, epoch, nchunk):
    # Entries in one block touch disjoint factor rows, so any split of a block
    # across threads gives the same result; chunking just lets each thread
    # reuse one scratch buffer.
    for ob in range(order.shape[0]):
        blk = order[ob]
        lo = offsets[blk]
        n = offsets[blk + 1] - lo
        for ch in prange(nchunk):
            buf = np.empty(3 * A.shape[1])
            for pos in range(lo + ch * n // nchunk, lo + (ch + 1) * n // nchunk):
                _update_entry(X, A, B, C, vA, vB, vC,
                              entries[pos, 0], entries[pos, 1], entries[pos, 2], pos,
                              eta, gamma, noise, beta, lookahead, seed, epoch, buf)


def max_threads() -> int:
    return numba.config.NUMBA_NUM_THREADS


def run_epoch(X, f, plan, order, eta, gamma, noise, beta, lookahead, seed, epoch, threads=1):
    """One pass over ``order`` (block ids), mutating the factor model in place."""
    args = (X, f.A, f.B, f.C, f.velA, f.velB, f.velC, plan.entries, plan.offsets, order,
            float(eta), float(gamma), float(noise), float(beta), bool(lookahead),
            np.uint64(seed), np.int64(epoch))
    if threads <= 1:
        epoch_serial(*args)
        return
    if threads > max_threads():
        raise ValueError(f"thread_count {threads} exceeds the pool size {max_threads()} (set NUMBA_NUM_THREADS)")
    prev = numba.get_num_threads()
    numba.set_num_threads(threads)
    try:
        epoch_parallel(*args, threads)
    finally:
        numba.set_num_threads(prev)
