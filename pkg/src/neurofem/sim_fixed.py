"""Integer emulation of the fixed-point neuron update.

State variables are 24-bit signed integers held in int64 and saturated at
``[-2**23, 2**23 - 1]`` after every operation that can overflow; each
saturation event is counted. One step, with ``>>`` an arithmetic shift and
``sh(v, k)`` a left shift for ``k >= 0`` and a right shift otherwise::

    u1[n+1]   = (511 u1[n]) >> 9 + sh(DA_slow, u1_da)
    u2[n+1]   = (511 u2[n]) >> 9 + sh(DA_fast, u2_da)
    err[n+1]  = u1[n] + sh(bias, err_bias)
    int[n+1]  = int[n] + sh(err[n], int_err)
    v[n+1]    = (255 v[n]) >> 8 + sh(err[n+1], v_err) + sh(int[n], v_int)
                + sh(u2[n], v_u2) - sh(DA_fast, v_da) + sh(eta, v_noise)

followed by threshold/reset and the readout ``x = (511 x) >> 9 + G s``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .kernels import get_backend
from .network import STATE_MAX, STATE_MIN, FixedNetwork, SnnNetwork, quantize_network, SCALE_TABLE
from .sparse import rel_residual, spmv


@dataclass
class FixedState:
    u1: np.ndarray
    u2: np.ndarray
    u_err: np.ndarray
    u_int: np.ndarray
    v: np.ndarray
    x_fixed: np.ndarray
    s: np.ndarray
    step: int = 0
    seed: int = 0
    saturations: int = 0

    @classmethod
    def zeros(cls, fnet: FixedNetwork, seed: int = 0) -> FixedState:
        N, n = fnet.n_neurons, fnet.n_mesh
        z = lambda k: np.zeros(k, dtype=np.int64)  # noqa: E731
        return cls(z(N), z(N), z(N), z(N), z(N), z(n), np.zeros(N, dtype=np.uint8), 0, seed)

    def copy(self) -> FixedState:
        return replace(
            self, u1=self.u1.copy(), u2=self.u2.copy(), u_err=self.u_err.copy(), u_int=self.u_int.copy(),
            v=self.v.copy(), x_fixed=self.x_fixed.copy(), s=self.s.copy(),
        )

    def in_range(self) -> bool:
        return all(
            int(a.min(initial=0)) >= STATE_MIN and int(a.max(initial=0)) <= STATE_MAX
            for a in (self.u1, self.u2, self.u_err, self.u_int, self.v, self.x_fixed)
        )


def _sh(v, k: int):
    return v << k if k >= 0 else v >> (-k)


class _Sat:
    def __init__(self):
        self.count = 0

    def __call__(self, v: np.ndarray) -> np.ndarray:
        over = (v > STATE_MAX) | (v < STATE_MIN)
        self.count += int(np.count_nonzero(over))
        return np.clip(v, STATE_MIN, STATE_MAX)


def _mirror_index(n_mesh: int, npm: int) -> np.ndarray:
    h = npm // 2
    local = np.arange(npm)
    return (np.arange(n_mesh)[:, None] * npm + np.where(local < h, local + h, local - h)).ravel()


def fixed_step(state: FixedState, fnet: FixedNetwork, noise: bool = True, mirror_noise: bool = False) -> FixedState:
    """One integer step computed from the explicit 8-bit weight matrices.

    ``mirror_noise`` swaps the noise streams of the two halves of each node.
    """
    if state.v.shape != (fnet.n_neurons,):
        raise ValueError("state dimensions do not match the network")
    sp = fnet.shift_plan
    md, kd = fnet.decay_d
    mv, kv = fnet.decay_v
    sat = _Sat()
    s = state.s.astype(np.int64)
    da_slow = spmv(fnet.weights_slow, s)
    da_fast = spmv(fnet.weights_fast, s)
    u1 = sat(((md * state.u1) >> kd) + _sh(da_slow, sp["u1_da"]))
    u2 = sat(((md * state.u2) >> kd) + _sh(da_fast, sp["u2_da"]))
    u_int = sat(state.u_int + _sh(state.u_err, sp["int_err"]))
    u_err = sat(state.u1 + _sh(fnet.bias_fixed, sp["err_bias"]))
    v = (
        ((mv * state.v) >> kv)
        + _sh(u_err, sp["v_err"])
        + _sh(state.u_int, sp["v_int"])
        + _sh(state.u2, sp["v_u2"])
        - _sh(da_fast, sp["v_da"])
    )
    if noise:
        eta = rng.uniform_i24(state.seed, state.step, fnet.n_neurons)
        if mirror_noise:
            eta = eta[_mirror_index(fnet.n_mesh, fnet.npm)]
        v = v + _sh(eta, sp["v_noise"])
    v = sat(v)
    fired = v >= fnet.theta_fixed
    v = np.where(fired, v - fnet.theta_fixed, v)
    signs = fnet.source.signs.astype(np.int64)
    net_count = np.bincount(np.repeat(np.arange(fnet.n_mesh), fnet.npm), weights=fired * signs, minlength=fnet.n_mesh)
    x = sat(((md * state.x_fixed) >> kd) + net_count.astype(np.int64) * _sh(fnet.gamma_fixed, sp["x_gamma"]))
    return FixedState(u1, u2, u_err, u_int, v, x, fired.astype(np.uint8), state.step + 1, state.seed, state.saturations + sat.count)


def dequantize_readout(x_fixed: np.ndarray, scales=SCALE_TABLE) -> np.ndarray:
    return np.asarray(x_fixed, dtype=float) * 2.0 ** -scales["x"]


class FixedSimulator:
    """Kernel-backed driver. With ``mirror_noise`` the noise streams of each
    node's two halves are swapped while the bias is negated, so a flipped run
    sees the mirror image of the unflipped run's noise."""

    def __init__(self, fnet: FixedNetwork, seed: int = 0, noise: bool = True, backend: str | None = None,
                 mirror_noise: bool = False):
        self.fnet = fnet
        self.seed = int(seed)
        self.noise = noise
        self.mirror_noise = mirror_noise
        self.kernel = get_backend(backend)
        self.state = FixedState.zeros(fnet, self.seed)
        self.x_acc = np.zeros(fnet.n_mesh, dtype=np.int64)
        self.spike_counts = np.zeros(fnet.n_neurons, dtype=np.int64)
        self.total_spikes = 0
        self._sat = np.zeros(1, dtype=np.int64)
        self.bias_sign = 1

    @property
    def saturations(self) -> int:
        return int(self._sat[0])

    def flip_bias(self) -> None:
        self.bias_sign = -self.bias_sign

    def _noise_mode(self) -> int:
        if not self.noise:
            return 0
        return 2 if self.mirror_noise and self.bias_sign < 0 else 1

    def advance(self, n_steps: int) -> int:
        """Returns the number of spikes emitted."""
        f, st, sp = self.fnet, self.state, self.fnet.shift_plan
        md, kd = f.decay_d
        mv, kv = f.decay_v
        total = self.kernel.fixed_advance(
            f.row_ptr, f.col_idx, f.slow_pos, f.slow_neg, f.fast_pos, f.fast_neg,
            np.ascontiguousarray(self.bias_sign * f.bias_node),
            f.npm, f.theta_fixed, f.gamma_fixed, md, kd, mv, kv,
            sp["u1_da"], sp["u2_da"], sp["err_bias"], sp["int_err"], sp["v_err"], sp["v_int"],
            sp["v_u2"], sp["v_da"], sp["v_noise"], sp["x_gamma"], self._noise_mode(), np.uint64(self.seed),
            st.u1, st.u2, st.u_err, st.u_int, st.v, st.x_fixed, st.s, self.x_acc, self.spike_counts,
            st.step, n_steps, self._sat,
        )
        st.step += n_steps
        st.saturations = self.saturations
        self.total_spikes += total
        return total

    def window_mean(self, window: int) -> np.ndarray:
        """Advance ``window`` steps and return the mean readout over them, in float units."""
        before = self.x_acc.copy()
        self.advance(window)
        return dequantize_readout(self.x_acc - before, self.fnet.scale_table) / window


def solve_fixed(fnet: FixedNetwork, n_steps: int = 10_000, window: int = 1_000, seed: int = 0, noise: bool = True,
                backend: str | None = None):
    """Run ``n_steps`` and average the readout over the final ``window``."""
    if not 1 <= window <= n_steps:
        raise ValueError("need 1 <= window <= n_steps")
    sim = FixedSimulator(fnet, seed, noise, backend)
    if n_steps > window:
        sim.advance(n_steps - window)
    x = sim.window_mean(window)
    return x, sim


@dataclass(frozen=True)
class EpochConfig:
    epoch_len: int = 4096
    n_epochs: int = 32
    mode: str = "steady"
    readout_window: int | None = None  # defaults to min(1024, epoch_len)

    def __post_init__(self):
        if self.mode not in ("steady", "transient"):
            raise ValueError(f"mode must be 'steady' or 'transient', got {self.mode!r}")
        if self.epoch_len < 1 or self.n_epochs < 1:
            raise ValueError("epoch_len and n_epochs must be >= 1")
        if self.readout_window is None:
            object.__setattr__(self, "readout_window", min(1024, self.epoch_len))
        if not 1 <= self.readout_window <= self.epoch_len:
            raise ValueError("readout_window must lie in [1, epoch_len]")

    @property
    def total_steps(self) -> int:
        return self.epoch_len * self.n_epochs


@dataclass
class EpochResult:
    config: EpochConfig
    spike_counts: np.ndarray  # per epoch
    bias_signs: np.ndarray
    readouts: np.ndarray  # (n_epochs, n_mesh), mean over the readout window, float units
    residuals: np.ndarray  # relative residual of each epoch readout w.r.t. the signed rhs
    saturations: int
    final_state: FixedState = field(repr=False, default=None)


def run_fixed(fnet: FixedNetwork, epochs: EpochConfig | None = None, seed: int = 0, noise: bool = True,
              backend: str | None = None, mirror_noise: bool = True) -> EpochResult:
    """Bias-flip protocol: the bias is multiplied by +1 (steady) or -1
    (transient) at every epoch boundary."""
    epochs = epochs or EpochConfig()
    sim = FixedSimulator(fnet, seed, noise, backend, mirror_noise)
    A, b = fnet.source.A, fnet.source.b
    counts, signs, readouts, residuals = [], [], [], []
    for e in range(epochs.n_epochs):
        if e > 0 and epochs.mode == "transient":
            sim.flip_bias()
        signs.append(sim.bias_sign)
        n = sim.advance(epochs.epoch_len - epochs.readout_window)
        before = sim.x_acc.copy()
        n += sim.advance(epochs.readout_window)
        x = dequantize_readout(sim.x_acc - before, fnet.scale_table) / epochs.readout_window
        counts.append(n)
        readouts.append(x)
        residuals.append(rel_residual(A, x, sim.bias_sign * b) if np.any(b) else float(np.linalg.norm(spmv(A, x))))
    return EpochResult(
        epochs, np.array(counts, dtype=np.int64), np.array(signs), np.array(readouts), np.array(residuals),
        sim.saturations, sim.state,
    )


def spike_count_difference(fnet: FixedNetwork, epochs: EpochConfig | None = None, seed: int = 0,
                           skip: int = 2, backend: str | None = None, mirror_noise: bool = True) -> dict:
    """Transient minus steady spike counts per epoch, ignoring the first
    ``skip`` epochs of start-up.

    Both runs share the seed. With ``mirror_noise`` the flipped epochs see
    the mirrored noise, so once a flipped epoch has settled it reproduces the
    steady run's spikes with the populations exchanged and the difference
    measures the transition itself.
    """
    epochs = epochs or EpochConfig()
    steady = run_fixed(fnet, replace(epochs, mode="steady"), seed, backend=backend, mirror_noise=mirror_noise)
    trans = run_fixed(fnet, replace(epochs, mode="transient"), seed, backend=backend, mirror_noise=mirror_noise)
    diff = trans.spike_counts[skip:] - steady.spike_counts[skip:]
    return {
        "steady": steady,
        "transient": trans,
        "per_epoch_difference": diff,
        "mean_difference": float(diff.mean()) if len(diff) else 0.0,
    }


def epoch_csv(result: EpochResult) -> str:
    out = io.StringIO()
    out.write("epoch,mode,bias_sign,spike_count,mean_readout_residual\n")
    for e, (c, s, r) in enumerate(zip(result.spike_counts.tolist(), result.bias_signs.tolist(), result.residuals.tolist())):
        out.write(f"{e},{result.config.mode},{s},{c},{r!r}\n")
    return out.getvalue()


def fixed_vs_float_diff(net: SnnNetwork, steps: int = 1000, seed: int = 0, noise: bool = True,
                        shift_plan="derived", backend: str | None = None) -> dict:
    """Run the integer network and its float twin on matched noise and report
    the largest per-variable deviation in float units.

    The twin has the loop gain of the integer network and is fed the
    dequantized integer noise.
    """
    from .sim_float import FloatSimulator

    fnet = quantize_network(net, shift_plan=shift_plan)
    twin = replace(net, system_scale=fnet.twin_system_scale())
    fsim = FixedSimulator(fnet, seed, noise, backend)
    tsim = FloatSimulator(twin, seed, backend=backend, noise="uniform24" if noise else "none")
    sc = fnet.scale_table
    total = fnet.rescale * net.system_scale
    u1_unit = 2.0 ** -sc["u1"] / (-net.orientation * total)
    gain = fnet.state_gain
    dev = {k: 0.0 for k in ("u1", "u2", "u_err", "u_int", "v", "x")}
    dev_matched = dict(dev)
    spike_mismatch = 0
    first_mismatch = None
    for k in range(steps):
        fsim.advance(1)
        tsim.advance(1)
        fs, ts = fsim.state, tsim.state
        pairs = {
            "u1": (fs.u1 * u1_unit, ts.u1),
            "u2": (fs.u2 * 2.0 ** -sc["u2"], ts.u2),
            "u_err": (fs.u_err * 2.0 ** -sc["u_err"] / gain, ts.u_err),
            "u_int": (fs.u_int * 2.0 ** -sc["u_int"] / gain, ts.u_int),
            "v": (fs.v * 2.0 ** -sc["v"], ts.v),
            "x": (fs.x_fixed * 2.0 ** -sc["x"], ts.x),
        }
        for name, (a, b) in pairs.items():
            dev[name] = max(dev[name], float(np.max(np.abs(a - b))) if a.size else 0.0)
        mism = int(np.count_nonzero(fs.s != ts.s))
        if first_mismatch is None and not mism:
            dev_matched = dict(dev)
        spike_mismatch += mism
        if mism and first_mismatch is None:
            first_mismatch = k
    return {
        "steps": steps,
        "max_abs_deviation": dev,
        # largest deviations while the spike trains were still identical
        "max_abs_deviation_matched": dev_matched,
        "mean_readout_deviation": float(np.max(np.abs(fsim.x_acc * 2.0 ** -sc["x"] - tsim.x_acc))) / max(steps, 1),
        "spike_mismatches": spike_mismatch,
        "first_spike_mismatch_step": first_mismatch,
        "saturations": fsim.saturations,
        "shift_plan": dict(fnet.shift_plan),
        "twin_system_scale": fnet.twin_system_scale(),
    }
