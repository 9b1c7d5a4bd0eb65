# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the float and fixed-point engines.

Both kernels use the factored weight form: per-node spike counts, one sparse
product with the system matrix, then a per-neuron sign. Arithmetic is written
in the same order as the numpy fallback in ``_pykernels.py`` so noise-free
float runs agree bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, exp, fabs, isfinite
from libc.stdint cimport int64_t, uint64_t, uint8_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef uint64_t STEP_KEY = 0xD1B54A32D192ED03ULL
cdef double INV_2_52 = 1.0 / 4503599627370496.0

cdef uint64_t DRAW_STRIDE = 1ULL << 40

# ziggurat tables shared with the numpy implementation
from .rng import ZIG_X as _ZX, ZIG_RATIO as _ZR
cdef double ZX[129]
cdef double ZRATIO[128]
cdef int _z
for _z in range(129):
    ZX[_z] = _ZX[_z]
for _z in range(128):
    ZRATIO[_z] = _ZR[_z]
cdef double ZR = ZX[1]
cdef int64_t SMAX = (1 << 23) - 1
cdef int64_t SMIN = -(1 << 23)


cdef inline uint64_t splitmix(uint64_t z) nogil:
    z = z + GOLDEN
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


cdef inline uint64_t step_key(uint64_t seed, int64_t step) nogil:
    return splitmix(splitmix(seed) ^ (<uint64_t>step * STEP_KEY))


cdef inline double unit(uint64_t h) nogil:
    return (<double>(h >> 12) + 0.5) * INV_2_52


cdef inline double gauss(uint64_t key, int64_t i) nogil:
    cdef uint64_t base = key + 2 * <uint64_t>i
    cdef uint64_t t = 0, h
    cdef int layer
    cdef double u, z, a, b, f0, f1, uw
    while True:
        h = splitmix(base + t * DRAW_STRIDE)
        t += 1
        layer = <int>(h & 127)
        u = 2.0 * unit(h) - 1.0
        z = u * ZX[layer]
        if fabs(u) < ZRATIO[layer]:
            return z
        if layer == 0:
            while True:
                a = log(unit(splitmix(base + t * DRAW_STRIDE))) / ZR
                b = log(unit(splitmix(base + (t + 1) * DRAW_STRIDE)))
                t += 2
                if -2.0 * b >= a * a:
                    break
            return a - ZR if u < 0 else ZR - a
        f0 = exp(-0.5 * (ZX[layer] * ZX[layer] - z * z))
        f1 = exp(-0.5 * (ZX[layer + 1] * ZX[layer + 1] - z * z))
        uw = unit(splitmix(base + t * DRAW_STRIDE))
        t += 1
        if f1 + uw * (f0 - f1) < 1.0:
            return z


cdef inline int64_t uniform24(uint64_t key, int64_t i) nogil:
    return <int64_t>(splitmix(key + 2 * <uint64_t>i) >> 40) - (1 << 23)


cdef inline int64_t shift(int64_t v, int k) nogil:
    if k >= 0:
        return v << k
    return v >> (-k)


cdef inline int64_t sat(int64_t v, int64_t* count) nogil:
    if v > SMAX:
        count[0] += 1
        return SMAX
    if v < SMIN:
        count[0] += 1
        return SMIN
    return v


def normal_block(uint64_t seed, int64_t step, int64_t n):
    out = np.empty(n)
    cdef double[::1] o = out
    cdef uint64_t key = step_key(seed, step)
    cdef int64_t i
    for i in range(n):
        o[i] = gauss(key, i)
    return out


def uniform24_block(uint64_t seed, int64_t step, int64_t n):
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] o = out
    cdef uint64_t key = step_key(seed, step)
    cdef int64_t i
    for i in range(n):
        o[i] = uniform24(key, i)
    return out


def float_advance(
    const int64_t[::1] row_ptr, const int64_t[::1] col_idx, const double[::1] a_vals,
    const double[::1] b_node,
    double g, int npm, double gain, double dd, double dv, double ld, double dt,
    double kp, double ki, bint integral, double theta,
    double noise_std, int noise_kind, int noise_shift, double noise_unit, uint64_t seed,
    double[::1] u1, double[::1] u2, double[::1] uerr, double[::1] uint, double[::1] v,
    double[::1] x, uint8_t[::1] s, double[::1] x_acc, int64_t[::1] spike_counts,
    int64_t step0, int64_t nsteps,
    int64_t[:, ::1] raster, int64_t raster_pos,
    const double[:, ::1] targets, const double[::1] target_norms, double[:, ::1] res_out,
):
    """Advance ``nsteps`` steps in place.

    Returns (spikes, raster_pos, overdrive, bad_step, bad_neuron); bad_step is
    -1 unless a state value became non-finite.
    """
    cdef int64_t n = b_node.shape[0]
    cdef int64_t h = npm // 2
    cdef int64_t m = targets.shape[0]
    cdef int64_t cap = raster.shape[0]
    cdef double[::1] gs = np.empty(n)
    cdef double[::1] ags = np.empty(n)
    cdef int64_t[::1] cnt = np.zeros(n, dtype=np.int64)
    cdef int64_t i, j, q, a, al, k, t, c, fired
    cdef double acc, sg, das, daf, ue, u1o, u2o, uio, vn, eta, r, th2 = 2.0 * theta
    cdef int64_t total = 0, overdrive = 0, bad_step = -1, bad_neuron = -1
    cdef uint64_t key

    with nogil:
        for i in range(n):
            c = 0
            for a in range(npm):
                if s[i * npm + a]:
                    if a < h:
                        c += 1
                    else:
                        c -= 1
            gs[i] = (<double>c) * g
        for t in range(nsteps):
            k = step0 + t
            key = step_key(seed, k)
            for i in range(n):
                acc = 0.0
                for q in range(row_ptr[i], row_ptr[i + 1]):
                    acc = acc + a_vals[q] * gs[col_idx[q]]
                ags[i] = acc
                cnt[i] = 0
            for i in range(n):
                for a in range(npm):
                    al = i * npm + a
                    sg = g if a < h else -g
                    das = sg * ags[i]
                    daf = sg * gs[i]
                    u1o = u1[al]
                    u2o = u2[al]
                    uio = uint[al]
                    ue = gain * (sg * b_node[i] - u1o)
                    uerr[al] = ue
                    u1[al] = dd * u1o + das
                    u2[al] = dd * u2o + ld * daf
                    if integral:
                        uint[al] = uio + dt * ue
                    vn = dv * v[al] + dt * (kp * ue + ki * uio + u2o) - daf
                    if noise_kind == 1:
                        vn = vn + noise_std * gauss(key, al)
                    elif noise_kind == 2:
                        vn = vn + (<double>shift(uniform24(key, al), noise_shift)) * noise_unit
                    if not isfinite(vn) or not isfinite(u1[al]) or not isfinite(uint[al]):
                        if bad_step < 0:
                            bad_step = k
                            bad_neuron = al
                    fired = vn >= theta
                    overdrive += vn >= th2
                    vn = vn - theta * fired
                    s[al] = fired
                    total += fired
                    spike_counts[al] += fired
                    cnt[i] += fired if a < h else -fired
                    if fired and cap > 0:
                        if raster_pos < cap:
                            raster[raster_pos, 0] = k
                            raster[raster_pos, 1] = al
                        raster_pos += 1
                    v[al] = vn
            for i in range(n):
                gs[i] = (<double>cnt[i]) * g
                x[i] = dd * x[i] + gs[i]
                x_acc[i] = x_acc[i] + x[i]
            for j in range(m):
                r = 0.0
                for i in range(n):
                    acc = 0.0
                    for q in range(row_ptr[i], row_ptr[i + 1]):
                        acc = acc + a_vals[q] * x[col_idx[q]]
                    acc = targets[j, i] - acc
                    r = r + acc * acc
                res_out[t, j] = sqrt(r) / target_norms[j]
            if bad_step >= 0:
                break
    return total, raster_pos, overdrive, bad_step, bad_neuron


def fixed_advance(
    const int64_t[::1] row_ptr, const int64_t[::1] col_idx,
    const int64_t[::1] slow_pos, const int64_t[::1] slow_neg,
    int64_t fast_pos, int64_t fast_neg, const int64_t[::1] bias_node,
    int npm, int64_t theta, int64_t gamma_fixed,
    int64_t md, int kd, int64_t mv, int kv,
    int sh_u1, int sh_u2, int sh_bias, int sh_int, int sh_verr, int sh_vint, int sh_vu2, int sh_vda,
    int sh_noise, int sh_x, int noise, uint64_t seed,
    int64_t[::1] u1, int64_t[::1] u2, int64_t[::1] uerr, int64_t[::1] uint, int64_t[::1] v,
    int64_t[::1] x, uint8_t[::1] s, int64_t[::1] x_acc, int64_t[::1] spike_counts,
    int64_t step0, int64_t nsteps, int64_t[::1] sat_count,
):
    """Advance the integer network ``nsteps`` steps in place; returns the spike total.

    ``noise``: 0 off, 1 on, 2 on with the two halves of every node swapping
    their streams."""
    cdef int64_t n = bias_node.shape[0]
    cdef int64_t h = npm // 2
    cdef int64_t[::1] cp = np.zeros(n, dtype=np.int64)
    cdef int64_t[::1] cm = np.zeros(n, dtype=np.int64)
    cdef int64_t[::1] P = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] M = np.empty(n, dtype=np.int64)
    cdef int64_t i, j, q, a, al, k, t, total = 0
    cdef int64_t da_s, da_f, b, u1o, u2o, uio, ue, vn, xg, eta, p_acc, m_acc
    cdef int64_t* satp = &sat_count[0]
    cdef uint64_t key

    xg = shift(gamma_fixed, sh_x)
    with nogil:
        for i in range(n):
            cp[i] = 0
            cm[i] = 0
            for a in range(npm):
                if s[i * npm + a]:
                    if a < h:
                        cp[i] += 1
                    else:
                        cm[i] += 1
        for t in range(nsteps):
            k = step0 + t
            key = step_key(seed, k)
            for i in range(n):
                p_acc = 0
                m_acc = 0
                for q in range(row_ptr[i], row_ptr[i + 1]):
                    j = col_idx[q]
                    p_acc += slow_pos[q] * cp[j] + slow_neg[q] * cm[j]
                    m_acc += slow_neg[q] * cp[j] + slow_pos[q] * cm[j]
                P[i] = p_acc
                M[i] = m_acc
            for i in range(n):
                for a in range(npm):
                    al = i * npm + a
                    if a < h:
                        da_s = P[i]
                        da_f = fast_pos * cp[i] + fast_neg * cm[i]
                        b = bias_node[i]
                    else:
                        da_s = M[i]
                        da_f = fast_neg * cp[i] + fast_pos * cm[i]
                        b = -bias_node[i]
                    u1o = u1[al]
                    u2o = u2[al]
                    uio = uint[al]
                    u1[al] = sat(((md * u1o) >> kd) + shift(da_s, sh_u1), satp)
                    u2[al] = sat(((md * u2o) >> kd) + shift(da_f, sh_u2), satp)
                    uint[al] = sat(uio + shift(uerr[al], sh_int), satp)
                    ue = sat(u1o + shift(b, sh_bias), satp)
                    uerr[al] = ue
                    vn = ((mv * v[al]) >> kv) + shift(ue, sh_verr) + shift(uio, sh_vint) + shift(u2o, sh_vu2) - shift(da_f, sh_vda)
                    if noise == 1:
                        vn = vn + shift(uniform24(key, al), sh_noise)
                    elif noise == 2:
                        vn = vn + shift(uniform24(key, al + h if a < h else al - h), sh_noise)
                    vn = sat(vn, satp)
                    if vn >= theta:
                        vn = vn - theta
                        s[al] = 1
                        total += 1
                        spike_counts[al] += 1
                    else:
                        s[al] = 0
                    v[al] = vn
            for i in range(n):
                cp[i] = 0
                cm[i] = 0
                for a in range(npm):
                    if s[i * npm + a]:
                        if a < h:
                            cp[i] += 1
                        else:
                            cm[i] += 1
                x[i] = sat(((md * x[i]) >> kd) + (cp[i] - cm[i]) * xg, satp)
                x_acc[i] += x[i]
    return total
