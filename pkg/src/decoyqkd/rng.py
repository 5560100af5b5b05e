"""Counter-based random numbers keyed by (seed, gate index, draw tag).

Every draw is a pure function of its key, so any gate can be regenerated on
demand and a gate range can be split across workers without changing the
result. The mixer is the SplitMix64 finaliser; each (seed, tag) pair selects
a stream and the gate index is the counter within it.
"""

import numba as nb
import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_TAG_MUL = np.uint64(0xD1B54A32D192ED03)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# draw tags
CLASS = 1
ALICE_BASIS = 2
ALICE_BIT = 3
BOB_BASIS = 4
DET0 = 5
DET1 = 6
JITTER_A = 7
JITTER_B = 8
AFTERPULSE0 = 9
AFTERPULSE1 = 10
DOUBLE_CLICK = 11
ARRIVAL = 12
DARK_RETRY0 = 13
DARK_RETRY1 = 14


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True)
def stream_key(seed, tag):
    """Stream origin for one (seed, tag) pair."""
    return mix64(np.uint64(seed) ^ (np.uint64(tag) * _TAG_MUL))


def stream_keys(seed: int) -> np.ndarray:
    """Keys for every draw tag, indexed by tag value."""
    return np.array([stream_key(np.uint64(seed), t) for t in range(16)], dtype=np.uint64)


@nb.njit(cache=True, inline="always")
def uniform(key, gate):
    """Uniform double in [0, 1) for counter ``gate`` of stream ``key``."""
    z = mix64(key + (np.uint64(gate) + np.uint64(1)) * _GAMMA)
    return np.float64(z >> _S11) * _INV53


@nb.njit(cache=True)
def _fill_uniforms(key, gates, out):
    for i in range(gates.shape[0]):
        out[i] = uniform(key, gates[i])


def uniforms(seed: int, tag: int, gates) -> np.ndarray:
    """Vector of draws for ``gates`` from the (seed, tag) stream."""
    gates = np.ascontiguousarray(gates, dtype=np.uint64)
    out = np.empty(gates.shape[0], dtype=np.float64)
    _fill_uniforms(np.uint64(stream_key(np.uint64(seed), tag)), gates, out)
    return out


def reference_uniforms(seed: int, tag: int, gates) -> np.ndarray:
    """Pure-Python evaluation of :func:`uniforms`, for cross-checking."""
    mask = (1 << 64) - 1

    def mix(z):
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        return z ^ (z >> 31)

    key = mix((seed ^ (tag * 0xD1B54A32D192ED03)) & mask)
    return np.array([
        (mix((key + (int(g) + 1) * 0x9E3779B97F4A7C15) & mask) >> 11) / 2.0**53 for g in gates
    ])
