"""Numpy implementation of the inner loops, used when the compiled extension
is unavailable. Mirrors ``_kernels.pyx`` operation for operation."""

from __future__ import annotations

import numpy as np

from . import rng

SMAX = (1 << 23) - 1
SMIN = -(1 << 23)


def normal_block(seed: int, step: int, n: int) -> np.ndarray:
    return rng.normal(seed, step, n)


def uniform24_block(seed: int, step: int, n: int) -> np.ndarray:
    return rng.uniform_i24(seed, step, n)


def _shift(v, k: int):
    return v << k if k >= 0 else v >> (-k)


def _node_counts(s: np.ndarray, n: int, npm: int) -> tuple[np.ndarray, np.ndarray]:
    c = s.reshape(n, npm).astype(np.int64)
    h = npm // 2
    return c[:, :h].sum(axis=1), c[:, h:].sum(axis=1)


def float_advance(
    row_ptr, col_idx, a_vals, b_node,
    g, npm, gain, dd, dv, ld, dt, kp, ki, integral, theta,
    noise_std, noise_kind, noise_shift, noise_unit, seed,
    u1, u2, uerr, uint, v, x, s, x_acc, spike_counts,
    step0, nsteps, raster, raster_pos, targets, target_norms, res_out,
):
    n = len(b_node)
    N = n * npm
    h = npm // 2
    rows = np.repeat(np.arange(n), np.diff(row_ptr))
    sg = np.tile(np.where(np.arange(npm) < h, g, -g), n)
    node = np.repeat(np.arange(n), npm)
    sign_i = np.tile(np.where(np.arange(npm) < h, 1, -1), n).astype(np.int64)
    cap = raster.shape[0]
    cp, cm = _node_counts(s, n, npm)
    gs = (cp - cm).astype(np.float64) * g
    total = overdrive = 0
    bad_step = bad_neuron = -1
    for t in range(nsteps):
        k = step0 + t
        ags = np.bincount(rows, weights=a_vals * gs[col_idx], minlength=n)
        das = sg * ags[node]
        daf = sg * gs[node]
        u1o = u1.copy()
        u2o = u2.copy()
        uio = uint.copy()
        ue = gain * (sg * b_node[node] - u1o)
        uerr[:] = ue
        u1[:] = dd * u1o + das
        u2[:] = dd * u2o + ld * daf
        if integral:
            uint[:] = uio + dt * ue
        vn = dv * v + dt * (kp * ue + ki * uio + u2o) - daf
        if noise_kind == 1:
            vn = vn + noise_std * rng.normal(seed, k, N)
        elif noise_kind == 2:
            vn = vn + _shift(rng.uniform_i24(seed, k, N), noise_shift).astype(np.float64) * noise_unit
        bad = ~(np.isfinite(vn) & np.isfinite(u1) & np.isfinite(uint))
        fired = vn >= theta
        overdrive += int(np.count_nonzero(vn >= 2.0 * theta))
        vn = np.where(fired, vn - theta, vn)
        v[:] = vn
        s[:] = fired
        nf = int(np.count_nonzero(fired))
        total += nf
        spike_counts += fired
        if nf and raster_pos < cap:
            idx = np.flatnonzero(fired)
            take = min(len(idx), cap - raster_pos)
            raster[raster_pos : raster_pos + take, 0] = k
            raster[raster_pos : raster_pos + take, 1] = idx[:take]
        if cap:
            raster_pos += nf
        cnt = np.bincount(node, weights=fired * sign_i, minlength=n).astype(np.int64)
        gs = cnt.astype(np.float64) * g
        x[:] = dd * x + gs
        x_acc += x
        if len(targets):
            ax = np.bincount(rows, weights=a_vals * x[col_idx], minlength=n)
            for j in range(len(targets)):
                d = targets[j] - ax
                res_out[t, j] = np.sqrt(np.sum(d * d)) / target_norms[j]
        if bad.any():
            bad_step, bad_neuron = k, int(np.flatnonzero(bad)[0])
            break
    return total, raster_pos, overdrive, bad_step, bad_neuron


def _sat(v: np.ndarray, count: np.ndarray) -> np.ndarray:
    over = (v > SMAX) | (v < SMIN)
    if over.any():
        count[0] += int(np.count_nonzero(over))
        return np.clip(v, SMIN, SMAX)
    return v


def fixed_advance(
    row_ptr, col_idx, slow_pos, slow_neg, fast_pos, fast_neg, bias_node,
    npm, theta, gamma_fixed, md, kd, mv, kv,
    sh_u1, sh_u2, sh_bias, sh_int, sh_verr, sh_vint, sh_vu2, sh_vda, sh_noise, sh_x, noise, seed,
    u1, u2, uerr, uint, v, x, s, x_acc, spike_counts, step0, nsteps, sat_count,
):
    n = len(bias_node)
    N = n * npm
    h = npm // 2
    rows = np.repeat(np.arange(n), np.diff(row_ptr))
    node = np.repeat(np.arange(n), npm)
    pos = np.tile(np.arange(npm) < h, n)
    xg = _shift(int(gamma_fixed), sh_x)
    b_neuron = np.where(pos, bias_node[node], -bias_node[node])
    mirror = np.arange(N) + np.where(pos, h, -h)
    cp, cm = _node_counts(s, n, npm)
    total = 0
    for t in range(nsteps):
        k = step0 + t
        # integer sparse products; np.add.at keeps int64 exact
        P = np.zeros(n, dtype=np.int64)
        M = np.zeros(n, dtype=np.int64)
        np.add.at(P, rows, slow_pos * cp[col_idx] + slow_neg * cm[col_idx])
        np.add.at(M, rows, slow_neg * cp[col_idx] + slow_pos * cm[col_idx])
        da_s = np.where(pos, P[node], M[node])
        da_f = np.where(pos, fast_pos * cp[node] + fast_neg * cm[node], fast_neg * cp[node] + fast_pos * cm[node])
        u1o, u2o, uio = u1.copy(), u2.copy(), uint.copy()
        u1[:] = _sat(((md * u1o) >> kd) + _shift(da_s, sh_u1), sat_count)
        u2[:] = _sat(((md * u2o) >> kd) + _shift(da_f, sh_u2), sat_count)
        uint[:] = _sat(uio + _shift(uerr, sh_int), sat_count)
        ue = _sat(u1o + _shift(b_neuron, sh_bias), sat_count)
        uerr[:] = ue
        vn = ((mv * v) >> kv) + _shift(ue, sh_verr) + _shift(uio, sh_vint) + _shift(u2o, sh_vu2) - _shift(da_f, sh_vda)
        if noise == 1:
            vn = vn + _shift(rng.uniform_i24(seed, k, N), sh_noise)
        elif noise == 2:
            vn = vn + _shift(rng.uniform_i24(seed, k, N)[mirror], sh_noise)
        vn = _sat(vn, sat_count)
        fired = vn >= theta
        v[:] = np.where(fired, vn - theta, vn)
        s[:] = fired
        total += int(np.count_nonzero(fired))
        spike_counts += fired
        cp, cm = _node_counts(s, n, npm)
        x[:] = _sat(((md * x) >> kd) + (cp - cm) * xg, sat_count)
        x_acc += x
    return total
