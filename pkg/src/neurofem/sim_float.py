"""Forward-Euler simulation of the spiking solver in floating point.

One step, with ``s`` the spikes of the previous step::

    da_slow = omega_slow @ s            da_fast = omega_fast @ s
    u_err   = o * c * (G^T b - u1)      (o = orientation, c = system_scale)
    u1     <- (1 - ld dt) u1 + da_slow
    u2     <- (1 - ld dt) u2 + ld da_fast
    u_int  <- u_int + dt u_err
    v      <- (1 - lv dt) v + dt (kp u_err + ki u_int_old + u2_old) - da_fast + noise
    spike where v >= theta, then v -= theta
    x      <- (1 - ld dt) x + G s

Spike-driven terms are added without a factor dt. :func:`step` is a direct
transcription using the explicit weight matrices; :class:`FloatSimulator`
runs the same update through the compiled (or numpy) kernel.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from .kernels import get_backend
from .network import SnnNetwork, noise_shift, SCALE_TABLE
from .sparse import spmv

log = logging.getLogger(__name__)

NOISE_NONE, NOISE_GAUSS, NOISE_UNIFORM24 = 0, 1, 2


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, neuron: int):
        super().__init__(f"non-finite state at step {step}, neuron {neuron}")
        self.step = step
        self.neuron = neuron


@dataclass
class SimState:
    u1: np.ndarray
    u2: np.ndarray
    u_err: np.ndarray
    u_int: np.ndarray
    v: np.ndarray
    x: np.ndarray
    s: np.ndarray
    step: int = 0
    seed: int = 0

    @classmethod
    def zeros(cls, net: SnnNetwork, seed: int = 0) -> SimState:
        N, n = net.n_neurons, net.n_mesh
        return cls(
            np.zeros(N), np.zeros(N), np.zeros(N), np.zeros(N), np.zeros(N),
            np.zeros(n), np.zeros(N, dtype=np.uint8), 0, seed,
        )

    def copy(self) -> SimState:
        return SimState(
            self.u1.copy(), self.u2.copy(), self.u_err.copy(), self.u_int.copy(),
            self.v.copy(), self.x.copy(), self.s.copy(), self.step, self.seed,
        )


def _noise(net: SnnNetwork, seed: int, step: int) -> np.ndarray:
    std = net.params.noise_std
    if std == 0:
        return np.zeros(net.n_neurons)
    return std * rng.normal(seed, step, net.n_neurons)


def step(state: SimState, net: SnnNetwork, integral: bool = True) -> SimState:
    """One Euler step written against the explicit weight matrices."""
    p = net.params
    if state.v.shape != (net.n_neurons,) or state.x.shape != (net.n_mesh,):
        raise ValueError("state dimensions do not match the network")
    s = state.s.astype(float)
    da_slow = spmv(net.omega_slow, s)
    da_fast = spmv(net.omega_fast, s)
    dd = 1.0 - p.lambda_d * p.dt
    dv = 1.0 - p.lambda_v * p.dt
    gain = net.orientation * net.system_scale
    u_err = gain * (net.bias - state.u1)
    u1 = dd * state.u1 + da_slow
    u2 = dd * state.u2 + p.lambda_d * da_fast
    u_int = state.u_int + p.dt * u_err if integral else state.u_int.copy()
    v = dv * state.v + p.dt * (p.k_p * u_err + p.k_i * state.u_int + state.u2) - da_fast
    v = v + _noise(net, state.seed, state.step)
    bad = ~(np.isfinite(v) & np.isfinite(u1) & np.isfinite(u_int))
    if bad.any():
        raise DivergenceError(state.step, int(np.flatnonzero(bad)[0]))
    fired = v >= net.theta
    v = np.where(fired, v - net.theta, v)
    x = dd * state.x + net.readout(fired)
    return SimState(u1, u2, u_err, u_int, v, x, fired.astype(np.uint8), state.step + 1, state.seed)


@dataclass
class RecordOptions:
    residual_targets: dict[str, np.ndarray] = field(default_factory=dict)
    raster: bool = False
    raster_capacity: int = 5_000_000
    readout_every: int = 0
    checkpoint_every: int = 512


@dataclass
class SimTrace:
    n_steps: int
    spike_counts: np.ndarray
    total_spikes: int
    acc_checkpoints: dict[int, np.ndarray]
    readout_steps: np.ndarray
    readout_history: np.ndarray
    residual_history: dict[str, np.ndarray]
    spike_raster: np.ndarray | None
    final_state: object
    overdrive: int = 0
    switches: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def window_mean(self, start: int, stop: int) -> np.ndarray:
        """Mean readout over steps ``start < k <= stop`` (1-based step counts)."""
        if stop <= start:
            raise ValueError("empty window")
        try:
            a, b = self.acc_checkpoints[start], self.acc_checkpoints[stop]
        except KeyError as exc:
            raise ValueError(f"no accumulator checkpoint at step {exc.args[0]}; record it via windows=") from None
        return (b - a) / (stop - start)


def estimate_solution(trace: SimTrace, window: int) -> np.ndarray:
    """Mean readout over the final ``window`` steps."""
    if window < 1 or window > trace.n_steps:
        raise ValueError(f"window {window} outside [1, {trace.n_steps}]")
    return trace.window_mean(trace.n_steps - window, trace.n_steps)


class FloatSimulator:
    """Stateful driver around the kernel; supports bias changes mid-run."""

    def __init__(
        self,
        net: SnnNetwork,
        seed: int = 0,
        record: RecordOptions | None = None,
        integral: bool = True,
        backend: str | None = None,
        noise: str = "gauss",
        windows=(),
    ):
        self.net = net
        self.seed = int(seed)
        self.record = record or RecordOptions()
        self.integral = integral
        self.kernel = get_backend(backend)
        self.noise = noise
        self.state = SimState.zeros(net, self.seed)
        self.windows = set(int(w) for w in windows)
        self.x_acc = np.zeros(net.n_mesh)
        self.spike_counts = np.zeros(net.n_neurons, dtype=np.int64)
        self.total_spikes = 0
        self.overdrive = 0
        self.checkpoints: dict[int, np.ndarray] = {0: self.x_acc.copy()}
        self.readout_steps: list[int] = []
        self.readouts: list[np.ndarray] = []
        names = list(self.record.residual_targets)
        self._target_names = names
        self._targets = np.ascontiguousarray(
            np.array([self.record.residual_targets[k] for k in names], dtype=float).reshape(len(names), net.n_mesh)
        )
        norms = np.linalg.norm(self._targets, axis=1) if names else np.zeros(0)
        if np.any(norms == 0):
            raise ValueError("residual target with zero norm")
        self._norms = np.ascontiguousarray(norms)
        self.residuals: list[np.ndarray] = []
        self.raster = np.zeros((self.record.raster_capacity if self.record.raster else 0, 2), dtype=np.int64)
        self.raster_pos = 0
        self.switches: list[tuple[int, str]] = []
        self._planned_end: int | None = None

    def set_bias(self, b_new, label: str = "") -> None:
        from .network import set_bias

        self.net = set_bias(self.net, b_new)
        self.switches.append((self.state.step, label))

    def _noise_args(self):
        p = self.net.params
        if self.noise == "none" or p.noise_std == 0:
            return 0.0, NOISE_NONE, 0, 0.0
        if self.noise == "gauss":
            return p.noise_std, NOISE_GAUSS, 0, 0.0
        if self.noise == "uniform24":
            # dequantized integer noise, matched to the fixed-point engine
            return 0.0, NOISE_UNIFORM24, noise_shift(p), 2.0 ** -SCALE_TABLE["v"]
        raise ValueError(f"unknown noise kind {self.noise!r}")

    def _stops(self, start: int, end: int) -> list[int]:
        ce = self.record.checkpoint_every
        re = self.record.readout_every
        stops = {end}
        if ce:
            stops.update(range((start // ce + 1) * ce, end, ce))
        if re:
            stops.update(range((start // re + 1) * re, end, re))
        if self._planned_end is not None:
            stops.update(self._planned_end - w for w in self.windows if start < self._planned_end - w < end)
        return sorted(s for s in stops if s > start)

    def advance(self, n_steps: int) -> None:
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        st = self.state
        net = self.net
        p = net.params
        end = st.step + n_steps
        noise_std, noise_kind, nshift, nunit = self._noise_args()
        A = net.A
        for stop in self._stops(st.step, end):
            k = stop - st.step
            res = np.zeros((k, len(self._target_names)))
            total, self.raster_pos, over, bad_step, bad_neuron = self.kernel.float_advance(
                A.row_ptr, A.col_idx, np.ascontiguousarray(A.values, dtype=float), np.ascontiguousarray(net.b),
                p.gamma_mag, p.npm, float(net.orientation * net.system_scale),
                1.0 - p.lambda_d * p.dt, 1.0 - p.lambda_v * p.dt, p.lambda_d, p.dt,
                p.k_p, p.k_i if self.integral else 0.0, self.integral, net.theta,
                noise_std, noise_kind, nshift, nunit, np.uint64(self.seed),
                st.u1, st.u2, st.u_err, st.u_int, st.v, st.x, st.s, self.x_acc, self.spike_counts,
                st.step, k, self.raster, self.raster_pos, self._targets, self._norms, res,
            )
            if bad_step >= 0:
                raise DivergenceError(bad_step, bad_neuron)
            self.total_spikes += total
            self.overdrive += over
            st.step = stop
            if self._target_names:
                self.residuals.append(res)
            ce, re = self.record.checkpoint_every, self.record.readout_every
            if (ce and stop % ce == 0) or stop == end or (self._planned_end is not None and self._planned_end - stop in self.windows):
                self.checkpoints[stop] = self.x_acc.copy()
            if re and stop % re == 0:
                self.readout_steps.append(stop)
                self.readouts.append(st.x.copy())

    def run(self, n_steps: int, switch: tuple[int, np.ndarray] | None = None) -> SimTrace:
        """Advance ``n_steps`` from the current state, optionally changing the
        bias to ``switch[1]`` at absolute step ``switch[0]``."""
        self._planned_end = self.state.step + n_steps
        if switch is not None and self.state.step < switch[0] < self._planned_end:
            self.advance(switch[0] - self.state.step)
            self.set_bias(switch[1], "switch")
        self.advance(self._planned_end - self.state.step)
        return self.trace()

    def trace(self) -> SimTrace:
        if self.overdrive:
            log.info("%d threshold crossings exceeded 2*theta in one step", self.overdrive)
        raster = None
        if self.record.raster:
            if self.raster_pos > len(self.raster):
                log.warning("spike raster truncated at %d of %d events", len(self.raster), self.raster_pos)
            raster = self.raster[: min(self.raster_pos, len(self.raster))].copy()
        res = np.concatenate(self.residuals) if self.residuals else np.zeros((0, len(self._target_names)))
        return SimTrace(
            n_steps=self.state.step,
            spike_counts=self.spike_counts.copy(),
            total_spikes=self.total_spikes,
            acc_checkpoints=dict(self.checkpoints),
            readout_steps=np.array(self.readout_steps, dtype=np.int64),
            readout_history=np.array(self.readouts).reshape(len(self.readouts), self.net.n_mesh),
            residual_history={k: res[:, i] for i, k in enumerate(self._target_names)},
            spike_raster=raster,
            final_state=self.state,
            overdrive=self.overdrive,
            switches=list(self.switches),
        )


def run(
    net: SnnNetwork,
    n_steps: int,
    seed: int = 0,
    record: RecordOptions | None = None,
    windows=(10_000,),
    backend: str | None = None,
    integral: bool = True,
    noise: str = "gauss",
    switch: tuple[int, np.ndarray] | None = None,
) -> SimTrace:
    """Simulate ``n_steps`` from the zero state; ``windows`` lists the averaging
    windows that :func:`estimate_solution` will be asked for."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    windows = [w for w in windows if w <= n_steps]
    sim = FloatSimulator(net, seed, record, integral=integral, backend=backend, noise=noise, windows=windows)
    return sim.run(n_steps, switch=switch)


def run_p_only(net: SnnNetwork, n_steps: int, seed: int = 0, **kwargs) -> SimTrace:
    """Proportional control only: k_i = 0 and u_int frozen at zero."""
    return run(replace(net, params=replace(net.params, k_i=0.0)), n_steps, seed, integral=False, **kwargs)


def readout_std(trace: SimTrace) -> np.ndarray:
    """Per-node standard deviation of the recorded readout history."""
    if len(trace.readout_history) < 2:
        raise ValueError("need readout_every > 0 and at least two snapshots")
    return trace.readout_history.std(axis=0)


# ---------------------------------------------------------------------------
# exports


def raster_csv(trace: SimTrace) -> str:
    if trace.spike_raster is None:
        raise ValueError("trace has no spike raster; run with RecordOptions(raster=True)")
    out = io.StringIO()
    out.write("step,neuron_id\n")
    for k, a in trace.spike_raster.tolist():
        out.write(f"{k},{a}\n")
    return out.getvalue()


def readout_csv(trace: SimTrace) -> str:
    out = io.StringIO()
    n = trace.readout_history.shape[1] if trace.readout_history.ndim == 2 else 0
    out.write("step," + ",".join(f"x{i}" for i in range(n)) + "\n")
    for k, row in zip(trace.readout_steps.tolist(), trace.readout_history.tolist()):
        out.write(f"{k}," + ",".join(repr(v) for v in row) + "\n")
    return out.getvalue()


def residual_csv(trace: SimTrace) -> str:
    names = list(trace.residual_history)
    out = io.StringIO()
    out.write("step," + ",".join(f"residual_{k}" for k in names) + "\n")
    if names:
        cols = [trace.residual_history[k] for k in names]
        for t in range(len(cols[0])):
            out.write(f"{t + 1}," + ",".join(repr(float(c[t])) for c in cols) + "\n")
    return out.getvalue()


def run_config_json(net: SnnNetwork, n_steps: int, seed: int, **extra) -> str:
    cfg = {
        "params": net.params.to_dict(),
        "system_scale": net.system_scale,
        "orientation": net.orientation,
        "n_mesh": net.n_mesh,
        "n_steps": n_steps,
        "seed": seed,
        **extra,
    }
    return json.dumps(cfg, indent=2)
