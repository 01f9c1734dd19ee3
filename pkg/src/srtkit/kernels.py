"""Hot inner loops: counter-based substreams, arm draws, logit assembly.

Every kernel has a numba version and a numpy version with the same
signature. ``BACKEND`` names the one bound to the public names; the other
stays reachable through ``NUMBA_KERNELS`` / ``NUMPY_KERNELS`` for parity
tests and the benchmark.

Floating-point work is restricted to additions, multiplications and
comparisons performed in the same order on both paths, so results match
bit for bit. Transcendentals (the logistic link) are evaluated by callers
with numpy on both paths.
"""
import hashlib

import numpy as np

from ._accel import HAVE_NUMBA

_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_INV53 = 1.0 / 9007199254740992.0

#: stream tags; each (learner, period, tag) triple is an independent substream
STREAM_ASSIGN = 0
STREAM_ACTIVITY = 1


def mix64(z):
    """splitmix64 finalizer on a Python int."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def hash_ids(learner_ids):
    """Stable 64-bit hashes of learner id strings (blake2b, platform independent)."""
    out = np.empty(len(learner_ids), dtype=np.uint64)
    for i, lid in enumerate(learner_ids):
        digest = hashlib.blake2b(str(lid).encode("utf-8"), digest_size=8).digest()
        out[i] = int.from_bytes(digest, "little")
    return out


def seed_word(master_seed, period, stream):
    """Fold (master seed, period, stream tag) into one 64-bit word."""
    if not 0 <= int(master_seed) <= _MASK:
        raise ValueError("master_seed must be a 64-bit unsigned integer")
    counter = (int(period) * 8 + int(stream) + 1) * _GOLDEN
    return np.uint64(mix64(mix64(int(master_seed)) + counter))


# -- numpy path ---------------------------------------------------------------

def _np_mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _np_substream_uniforms(id_hashes, word):
    z = _np_mix(id_hashes ^ word)
    z = _np_mix(z + np.uint64(_GOLDEN))
    return (z >> np.uint64(11)).astype(np.float64) * _INV53


def _np_draw_arms(u, cum):
    idx = np.searchsorted(cum, u, side="right")
    return np.minimum(idx, cum.shape[0] - 1).astype(np.int64)


def _np_assemble_logits(week, country, arms, prior_active, baseline, carry,
                        arm_eff, mod_eff, delayed):
    p = week - 1
    act = prior_active.astype(np.float64)
    a = arms[:, p]
    logit = baseline[week, country]
    logit = logit + carry[p, country] * act
    logit = logit + arm_eff[p, a, country]
    logit = logit + mod_eff[p, a, country] * act
    for s in range(p):
        logit = logit + delayed[s, week, arms[:, s], country]
    return logit


def _np_bernoulli(u, prob):
    return (u < prob).astype(np.int8)


def _np_cell_counts(codes, y, n_codes):
    flat = codes.astype(np.int64) * 2 + y.astype(np.int64)
    return np.bincount(flat, minlength=2 * n_codes).reshape(n_codes, 2)


NUMPY_KERNELS = {
    "substream_uniforms": _np_substream_uniforms,
    "draw_arms": _np_draw_arms,
    "assemble_logits": _np_assemble_logits,
    "bernoulli": _np_bernoulli,
    "cell_counts": _np_cell_counts,
}


# -- numba path ---------------------------------------------------------------

NUMBA_KERNELS = {}

if HAVE_NUMBA:
    from numba import njit

    @njit(cache=True, nogil=True)
    def _nb_mix(z):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        return z ^ (z >> np.uint64(31))

    @njit(cache=True, nogil=True)
    def _nb_substream_uniforms(id_hashes, word):
        n = id_hashes.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            z = _nb_mix(id_hashes[i] ^ word)
            z = _nb_mix(z + np.uint64(_GOLDEN))
            out[i] = np.float64(z >> np.uint64(11)) * _INV53
        return out

    @njit(cache=True, nogil=True)
    def _nb_draw_arms(u, cum):
        n = u.shape[0]
        k = cum.shape[0]
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            j = 0
            while j < k - 1 and not (u[i] < cum[j]):
                j += 1
            out[i] = j
        return out

    @njit(cache=True, nogil=True)
    def _nb_assemble_logits(week, country, arms, prior_active, baseline, carry,
                            arm_eff, mod_eff, delayed):
        p = week - 1
        n = country.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            c = country[i]
            a = arms[i, p]
            act = np.float64(prior_active[i])
            x = baseline[week, c]
            x = x + carry[p, c] * act
            x = x + arm_eff[p, a, c]
            x = x + mod_eff[p, a, c] * act
            for s in range(p):
                x = x + delayed[s, week, arms[i, s], c]
            out[i] = x
        return out

    @njit(cache=True, nogil=True)
    def _nb_bernoulli(u, prob):
        n = u.shape[0]
        out = np.empty(n, dtype=np.int8)
        for i in range(n):
            out[i] = 1 if u[i] < prob[i] else 0
        return out

    @njit(cache=True, nogil=True)
    def _nb_cell_counts(codes, y, n_codes):
        out = np.zeros((n_codes, 2), dtype=np.int64)
        for i in range(codes.shape[0]):
            out[codes[i], y[i]] += 1
        return out

    NUMBA_KERNELS = {
        "substream_uniforms": _nb_substream_uniforms,
        "draw_arms": _nb_draw_arms,
        "assemble_logits": _nb_assemble_logits,
        "bernoulli": _nb_bernoulli,
        "cell_counts": _nb_cell_counts,
    }

BACKEND = "numba" if HAVE_NUMBA else "numpy"
_ACTIVE = NUMBA_KERNELS if HAVE_NUMBA else NUMPY_KERNELS

substream_uniforms = _ACTIVE["substream_uniforms"]
draw_arms = _ACTIVE["draw_arms"]
assemble_logits = _ACTIVE["assemble_logits"]
bernoulli = _ACTIVE["bernoulli"]
cell_counts = _ACTIVE["cell_counts"]


def uniforms(id_hashes, master_seed, period, stream):
    """Uniform [0, 1) draw per learner for one (period, stream) substream."""
    word = seed_word(master_seed, period, stream)
    return substream_uniforms(np.ascontiguousarray(id_hashes, dtype=np.uint64), word)
