"""Counter-based random streams keyed by (seed, step, neuron).

Every draw is a pure function of its key, so results do not depend on the
order in which neurons are updated. The compiled kernels implement the same
hash; see ``_kernels.pyx``.
"""

from __future__ import annotations

import math

import numpy as np

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_STEP_KEY = 0xD1B54A32D192ED03

INV_2_52 = 1.0 / 4503599627370496.0


def splitmix64(z: int) -> int:
    z = (z + _GOLDEN) & _M64
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2**64, matching the C implementation
    z = z + np.uint64(_GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def step_key(seed: int, step: int) -> int:
    """Per-step key; neuron draws hash ``key + 2 * neuron (+1)``."""
    return splitmix64((splitmix64(int(seed) & _M64) ^ ((int(step) * _STEP_KEY) & _M64)) & _M64)


def raw_u64(seed: int, step: int, n: int, stream: int = 0) -> np.ndarray:
    key = np.uint64(step_key(seed, step))
    idx = np.arange(n, dtype=np.uint64) * np.uint64(2) + np.uint64(stream)
    with np.errstate(over="ignore"):
        return _mix_array(key + idx)


def _ziggurat_tables(layers: int = 128, r: float = 3.442619855899, area: float = 9.91256303526217e-3):
    x = np.zeros(layers + 1)
    x[0] = area / math.exp(-0.5 * r * r)
    x[1] = r
    for i in range(2, layers):
        x[i] = math.sqrt(-2.0 * math.log(area / x[i - 1] + math.exp(-0.5 * x[i - 1] ** 2)))
    return x, x[1:] / x[:-1]


ZIG_X, ZIG_RATIO = _ziggurat_tables()
ZIG_R = float(ZIG_X[1])
_DRAW_STRIDE = 1 << 40


def _draw(key: np.uint64, idx: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Raw 64-bit draw number ``t`` of neurons ``idx`` under a step key."""
    with np.errstate(over="ignore"):
        return _mix_array(key + idx * np.uint64(2) + t.astype(np.uint64) * np.uint64(_DRAW_STRIDE))


def _unit(h: np.ndarray) -> np.ndarray:
    """(0, 1) from the top 52 bits."""
    return ((h >> np.uint64(12)).astype(np.float64) + 0.5) * INV_2_52


def normal(seed: int, step: int, n: int) -> np.ndarray:
    """Standard normal draws, ziggurat method; draw ``t`` of neuron ``i`` hashes
    ``key + 2 i + t * 2**40``, so every value is addressable by its key."""
    key = np.uint64(step_key(seed, step))
    out = np.empty(n)
    idx = np.arange(n, dtype=np.uint64)
    t = np.zeros(n, dtype=np.int64)
    while len(idx):
        h = _draw(key, idx, t)
        t += 1
        layer = (h & np.uint64(127)).astype(np.int64)
        u = 2.0 * _unit(h) - 1.0
        z = u * ZIG_X[layer]
        fast = np.abs(u) < ZIG_RATIO[layer]
        done = fast.copy()
        out[idx[fast]] = z[fast]

        tail = ~fast & (layer == 0)
        for k in np.flatnonzero(tail):
            i, tk = idx[k : k + 1], t[k : k + 1].copy()
            while True:
                a = math.log(_unit(_draw(key, i, tk))[0]) / ZIG_R
                b = math.log(_unit(_draw(key, i, tk + 1))[0])
                tk += 2
                if -2.0 * b >= a * a:
                    break
            out[int(i[0])] = a - ZIG_R if u[k] < 0 else ZIG_R - a
            done[k] = True

        wedge = np.flatnonzero(~fast & (layer > 0))
        if len(wedge):
            lw = layer[wedge]
            zw = z[wedge]
            f0 = np.exp(-0.5 * (ZIG_X[lw] * ZIG_X[lw] - zw * zw))
            f1 = np.exp(-0.5 * (ZIG_X[lw + 1] * ZIG_X[lw + 1] - zw * zw))
            uw = _unit(_draw(key, idx[wedge], t[wedge]))
            t[wedge] += 1
            ok = f1 + uw * (f0 - f1) < 1.0
            out[idx[wedge[ok]]] = zw[ok]
            done[wedge[ok]] = True
        idx, t = idx[~done], t[~done]
    return out


def uniform_i24(seed: int, step: int, n: int) -> np.ndarray:
    """Signed integers uniform on [-2**23, 2**23 - 1]."""
    bits = raw_u64(seed, step, n, 0) >> np.uint64(40)
    return bits.astype(np.int64) - (1 << 23)
