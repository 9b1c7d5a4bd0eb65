"""Spiking network construction from a sparse linear system, and its
fixed-point quantization.

Neuron ``alpha`` belongs to mesh node ``alpha // npm``; the first half of each
node's population projects with ``+|G|``, the second half with ``-|G|``.
Recurrent weights are ``omega_slow = G^T A G`` and ``omega_fast = G^T G``,
the bias is ``G^T b`` and the threshold ``|G|^2 / 2``.

Two scalars sit on top of the literal construction:

* ``orientation`` (+1 or -1) picks the sign of the error signal so the loop is
  stable. Negative definite systems, such as the stiffness matrices built by
  :mod:`neurofem.fem`, need -1.
* ``system_scale`` multiplies ``A`` and ``b`` together. The solution does not
  change, but the loop gain does. The default is the largest power of two
  that keeps the proportional loop's fastest mode inside forward-Euler
  stability.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Mapping

import numpy as np

from .sparse import CsrMatrix, csr_from_arrays, mm_read, mm_write, spmm

log = logging.getLogger(__name__)

REFERENCE_GAMMA = 2.0**-6

# fixed-point exponents: quantity -> log2 of its scale factor
SCALE_TABLE: dict[str, int] = {
    "omega_slow": 6,
    "omega_fast": 19,
    "gamma": 13,
    "v": 28,
    "bias": 17,
    "u1": 16,
    "u2": 20,
    "u_err": 16,
    "u_int": 20,
    "x": 16,
}

# shifts as printed in the published update equations; positive = left shift
PUBLISHED_SHIFT_PLAN: dict[str, int] = {
    "u1_da": 10,
    "u2_da": -5,
    "err_bias": 7,
    "int_err": -8,
    "v_err": 2,
    "v_int": 0,
    "v_u2": -4,
    "v_da": 9,
    "v_noise": -3,
    "x_gamma": 3,
}

WEIGHT_MIN, WEIGHT_MAX = -128, 127
STATE_MAX = (1 << 23) - 1
STATE_MIN = -(1 << 23)


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class SnnParams:
    npm: int = 16
    gamma_mag: float = 2.0**-8
    lambda_d: float = 8.0
    lambda_v: float = 16.0
    k_p: float = 4.0
    k_i: float = 16.0
    sigma_v: float = 0.00225
    dt: float = 2.0**-12
    # |G| at which sigma_v is the literal per-step std; the noise keeps a
    # fixed ratio to the threshold for other |G|. None disables the scaling.
    noise_reference_gamma: float | None = REFERENCE_GAMMA

    def __post_init__(self):
        if self.npm < 2 or self.npm % 2:
            raise ValueError(f"npm must be even and >= 2, got {self.npm}")
        if not self.gamma_mag > 0:
            raise ValueError("gamma_mag must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.sigma_v < 0:
            raise ValueError("sigma_v must be non-negative")

    @property
    def theta(self) -> float:
        return 0.5 * self.gamma_mag**2

    @property
    def noise_std(self) -> float:
        """Per-step standard deviation of the membrane noise."""
        if self.noise_reference_gamma is None:
            return self.sigma_v
        return self.sigma_v * (self.gamma_mag / self.noise_reference_gamma) ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> SnnParams:
        return cls(**dict(d))


def build_readout(n_mesh: int, params: SnnParams) -> CsrMatrix:
    if n_mesh < 1:
        raise ValueError("n_mesh must be >= 1")
    npm, g = params.npm, params.gamma_mag
    if npm % 2:
        raise ValueError("npm must be even")
    row_ptr = np.arange(n_mesh + 1, dtype=np.int64) * npm
    col_idx = np.arange(n_mesh * npm, dtype=np.int64)
    vals = np.tile(neuron_signs(npm), n_mesh) * g
    return CsrMatrix(n_mesh, n_mesh * npm, row_ptr, col_idx, vals)


def neuron_signs(npm: int) -> np.ndarray:
    s = np.ones(npm)
    s[npm // 2 :] = -1.0
    return s


def gershgorin_radius(A: CsrMatrix) -> float:
    if A.nnz == 0:
        return 0.0
    return float(np.max(np.add.reduceat(np.abs(A.values), A.row_ptr[:-1][np.diff(A.row_ptr) > 0])))


def stable_system_scale(A: CsrMatrix, params: SnnParams) -> float:
    """Largest power of two ``s`` with ``k_p * s * rho(A) * dt <= 1``.

    ``rho`` is bounded above by the Gershgorin radius.
    """
    rho = gershgorin_radius(A)
    if rho == 0.0 or params.k_p == 0.0:
        return 1.0
    return 2.0 ** math.floor(math.log2(1.0 / (params.k_p * rho * params.dt)))


def infer_orientation(A: CsrMatrix) -> int:
    """-1 when the diagonal is predominantly negative, +1 otherwise."""
    d = A.diagonal()
    return -1 if float(np.sum(d)) < 0 else 1


@dataclass(frozen=True, eq=False)
class SnnNetwork:
    A: CsrMatrix
    b: np.ndarray
    params: SnnParams
    system_scale: float = 1.0
    orientation: int = -1
    system_ref: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.A.n_rows != self.A.n_cols:
            raise ValueError("system matrix must be square")
        b = np.asarray(self.b, dtype=float)
        if b.shape != (self.A.n_rows,):
            raise ValueError(f"b has shape {b.shape}, expected ({self.A.n_rows},)")
        b = b.copy()
        b.flags.writeable = False
        object.__setattr__(self, "b", b)
        if self.orientation not in (-1, 1):
            raise ValueError("orientation must be +1 or -1")

    @property
    def n_mesh(self) -> int:
        return self.A.n_rows

    @property
    def n_neurons(self) -> int:
        return self.n_mesh * self.params.npm

    @property
    def theta(self) -> float:
        return self.params.theta

    @cached_property
    def gamma(self) -> CsrMatrix:
        return build_readout(self.n_mesh, self.params)

    @cached_property
    def signs(self) -> np.ndarray:
        return np.tile(neuron_signs(self.params.npm), self.n_mesh)

    @cached_property
    def bias(self) -> np.ndarray:
        return np.repeat(self.b, self.params.npm) * self.signs * self.params.gamma_mag

    # explicit weight matrices are large (nnz(A) * npm^2); built on demand
    @cached_property
    def omega_slow(self) -> CsrMatrix:
        G = self.gamma
        return spmm(spmm(G.T, self.A), G)

    @cached_property
    def omega_fast(self) -> CsrMatrix:
        G = self.gamma
        return spmm(G.T, G)

    def readout(self, spikes: np.ndarray) -> np.ndarray:
        """``G @ s`` computed from per-node spike counts."""
        s = np.asarray(spikes, dtype=float).reshape(self.n_mesh, self.params.npm)
        h = self.params.npm // 2
        return self.params.gamma_mag * (s[:, :h].sum(axis=1) - s[:, h:].sum(axis=1))

    def with_params(self, **changes) -> SnnNetwork:
        return replace(self, params=replace(self.params, **changes))


def build_network(
    system,
    params: SnnParams | None = None,
    system_scale: float | str = "auto",
    orientation: int | str = "auto",
) -> SnnNetwork:
    """Network for ``A x = b``; ``system`` is a FemSystem or an ``(A, b)`` pair."""
    params = params or SnnParams()
    if hasattr(system, "A") and hasattr(system, "b"):
        A, b = system.A, system.b
    else:
        A, b = system
    if A.n_rows < 1:
        raise ValueError("system dimension must be >= 1")
    if orientation == "auto":
        orientation = infer_orientation(A)
    if system_scale == "auto":
        system_scale = stable_system_scale(A, params)
    return SnnNetwork(A, np.asarray(b, dtype=float), params, float(system_scale), int(orientation), system)


def set_bias(net: SnnNetwork, b_new) -> SnnNetwork:
    b_new = np.asarray(b_new, dtype=float)
    if b_new.shape != (net.n_mesh,):
        raise ValueError(f"bias vector has shape {b_new.shape}, expected ({net.n_mesh},)")
    return replace(net, b=b_new)


# ---------------------------------------------------------------------------
# fixed point


def _exact_log2(v: float, what: str) -> int:
    m, e = math.frexp(v)
    if m != 0.5:
        raise QuantizationError(f"{what} = {v!r} is not a power of two")
    return e - 1


def derive_shift_plan(
    params: SnnParams, scales: Mapping[str, int] = SCALE_TABLE, gain_exponent: int = 0
) -> dict[str, int]:
    """Shifts that convert between the scale-table exponents.

    ``gain_exponent`` is log2 of an extra factor carried by ``u_err`` and
    ``u_int`` (the quantization rescale); the shifts into ``v`` remove it so
    the loop gain stays that of the float network.
    Requires ``dt``, ``k_p*dt``, ``k_i*dt`` and ``lambda_d`` to be powers of two.
    """
    l_dt = _exact_log2(params.dt, "dt")
    l_kp = _exact_log2(params.k_p * params.dt, "k_p*dt")
    l_ki = _exact_log2(params.k_i * params.dt, "k_i*dt")
    l_ld = _exact_log2(params.lambda_d, "lambda_d")
    s = scales
    return {
        "u1_da": s["u1"] - s["omega_slow"],
        "u2_da": s["u2"] - s["omega_fast"] + l_ld,
        "err_bias": s["u_err"] - s["bias"],
        "int_err": s["u_int"] - s["u_err"] + l_dt,
        "v_err": s["v"] - s["u_err"] + l_kp - gain_exponent,
        "v_int": s["v"] - s["u_int"] + l_ki - gain_exponent,
        "v_u2": s["v"] - s["u2"] + l_dt,
        "v_da": s["v"] - s["omega_fast"],
        "v_noise": noise_shift(params, s["v"]),
        "x_gamma": s["x"] - s["gamma"],
    }


def noise_shift(params: SnnParams, v_exponent: int = SCALE_TABLE["v"]) -> int:
    """Shift that brings 24-bit uniform noise closest to the target std."""
    std = params.noise_std
    if std == 0:
        return -24
    uniform_std = (1 << 23) / math.sqrt(3.0)
    return int(round(math.log2(std * 2.0**v_exponent / uniform_std)))


def decay_multiplier(rate: float, dt: float) -> tuple[int, int]:
    """(m, k) with ``(1 - rate*dt) == m / 2**k`` exactly."""
    k = -_exact_log2(rate * dt, "decay rate * dt")
    return (1 << k) - 1, k


def _round_clamp(x: np.ndarray, what: str, q: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    q = np.rint(x) if q is None else q.copy()
    over = (q > WEIGHT_MAX + 1) | (q < WEIGHT_MIN)
    if np.any(over):
        i = int(np.flatnonzero(over)[0])
        raise QuantizationError(f"{what} entry {i} quantizes to {q.flat[i]:.0f}, outside [-128, 127]")
    clamped = q == WEIGHT_MAX + 1
    if np.any(clamped):
        log.info("%s: %d weights rounded to +128 were clamped to +127", what, int(clamped.sum()))
        q[clamped] = WEIGHT_MAX
    err = float(np.max(np.abs(q - x))) if x.size else 0.0
    return q.astype(np.int64), err


def rowsum_round(A: CsrMatrix, w: np.ndarray) -> np.ndarray:
    """Round CSR values ``w`` (pattern of ``A``) to integers so that every row
    sum is the rounded exact row sum.

    Off-diagonal entries are rounded to nearest and the diagonal absorbs the
    difference. Entry-wise rounding of a discrete Laplacian leaves nonzero
    row sums that act like a spurious reaction term; keeping them exact
    removes most of the quantization error in the solution. Symmetric input
    gives symmetric output. Rows without a stored diagonal are rounded
    entry-wise.
    """
    rows = A.row_indices()
    q = np.rint(w)
    diag = rows == A.col_idx
    has_diag = np.zeros(A.n_rows, dtype=bool)
    has_diag[rows[diag]] = True
    exact = np.rint(np.bincount(rows, weights=w, minlength=A.n_rows))
    off = np.bincount(rows, weights=np.where(diag, 0.0, q), minlength=A.n_rows)
    fix = diag & has_diag[rows]
    q[fix] = (exact - off)[rows[fix]]
    return q


@dataclass(frozen=True, eq=False)
class FixedNetwork:
    """Integer network. Weights are stored in factored form: for every entry
    of ``A`` the two 8-bit values of ``+w`` and ``-w`` (they differ when
    ``+w`` clamps), and likewise for the within-node fast weight."""

    source: SnnNetwork
    rescale: float
    slow_pos: np.ndarray
    slow_neg: np.ndarray
    fast_pos: int
    fast_neg: int
    bias_node: np.ndarray  # integer bias of the positive neuron of each node
    theta_fixed: int
    gamma_fixed: int
    scale_table: dict
    shift_plan: dict
    decay_d: tuple[int, int]
    decay_v: tuple[int, int]
    max_quant_error: dict
    weight_rounding: str = "rowsum"

    @property
    def n_mesh(self) -> int:
        return self.source.n_mesh

    @property
    def n_neurons(self) -> int:
        return self.source.n_neurons

    @property
    def npm(self) -> int:
        return self.source.params.npm

    @property
    def row_ptr(self) -> np.ndarray:
        return self.source.A.row_ptr

    @property
    def col_idx(self) -> np.ndarray:
        return self.source.A.col_idx

    @cached_property
    def bias_fixed(self) -> np.ndarray:
        signs = self.source.signs.astype(np.int64)
        pos = np.repeat(self.bias_node, self.npm)
        # -round(x) == round(-x) for rint, so the negative neurons mirror exactly
        return pos * signs

    @cached_property
    def weights_slow(self) -> CsrMatrix:
        A = self.source.A
        npm, h = self.npm, self.npm // 2
        rows = A.row_indices()
        same = np.ones((npm, npm), dtype=bool)
        same[:h, h:] = False
        same[h:, :h] = False
        r_list, c_list, v_list = [], [], []
        a_off, b_off = np.meshgrid(np.arange(npm), np.arange(npm), indexing="ij")
        for k in range(A.nnz):
            i, j = rows[k], A.col_idx[k]
            r_list.append((i * npm + a_off).ravel())
            c_list.append((j * npm + b_off).ravel())
            v_list.append(np.where(same, self.slow_pos[k], self.slow_neg[k]).ravel())
        if not r_list:
            return CsrMatrix.zeros(self.n_neurons, self.n_neurons)
        return csr_from_arrays(
            np.concatenate(r_list), np.concatenate(c_list), np.concatenate(v_list).astype(np.int64),
            self.n_neurons, self.n_neurons,
        )

    @cached_property
    def weights_fast(self) -> CsrMatrix:
        npm, h = self.npm, self.npm // 2
        block = np.full((npm, npm), self.fast_neg, dtype=np.int64)
        block[:h, :h] = self.fast_pos
        block[h:, h:] = self.fast_pos
        rows, cols, vals = [], [], []
        a_off, b_off = np.meshgrid(np.arange(npm), np.arange(npm), indexing="ij")
        for i in range(self.n_mesh):
            rows.append((i * npm + a_off).ravel())
            cols.append((i * npm + b_off).ravel())
            vals.append(block.ravel())
        return csr_from_arrays(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), self.n_neurons, self.n_neurons)

    @property
    def state_gain(self) -> float:
        """Extra factor carried by ``u_err`` and ``u_int`` relative to the
        float network :meth:`twin_system_scale` describes."""
        base = derive_shift_plan(self.source.params, self.scale_table)["v_err"]
        return 2.0 ** (base - self.shift_plan["v_err"])

    def twin_system_scale(self) -> float:
        """``system_scale`` of the float network with the same loop gain."""
        return self.rescale * self.source.system_scale / self.state_gain

    def with_bias(self, b_new) -> FixedNetwork:
        return quantize_network(
            set_bias(self.source, b_new), self.shift_plan, self.rescale, self.scale_table, self.weight_rounding
        )


def quantization_rescale(net: SnnNetwork, scales: Mapping[str, int] = SCALE_TABLE) -> float:
    """Power of two ``r`` putting ``max |r * system_scale * omega_slow|`` in (64, 128] integer units."""
    g2 = net.params.gamma_mag**2
    peak = float(np.max(np.abs(net.A.values))) if net.A.nnz else 0.0
    peak *= g2 * net.system_scale * 2.0 ** scales["omega_slow"]
    if peak == 0.0:
        return 1.0
    _, e = math.frexp(128.0 / peak)  # 128/peak = m * 2**e with m in [0.5, 1)
    return 2.0 ** (e - 1)


def quantize_network(
    net: SnnNetwork,
    shift_plan: Mapping[str, int] | str = "derived",
    rescale: float | None = None,
    scales: Mapping[str, int] = SCALE_TABLE,
    weight_rounding: str = "rowsum",
) -> FixedNetwork:
    """Integer version of ``net``.

    ``shift_plan`` is "derived" (from the scale table), "published" (as printed
    in the published update equations) or an explicit mapping.
    ``weight_rounding`` is "rowsum" (see :func:`rowsum_round`) or "nearest".
    With the automatic rescale, a rescale whose rounded weights leave the
    8-bit range is halved once.
    """
    if rescale is None:
        r = quantization_rescale(net, scales)
        try:
            return quantize_network(net, shift_plan, r, scales, weight_rounding)
        except QuantizationError as e:
            if "omega_slow" not in str(e):
                raise
            return quantize_network(net, shift_plan, r / 2, scales, weight_rounding)
    p = net.params
    gain_exp = _exact_log2(rescale, "rescale")
    if shift_plan == "derived":
        plan = derive_shift_plan(p, scales, gain_exp)
    elif shift_plan == "published":
        plan = dict(PUBLISHED_SHIFT_PLAN)
    else:
        plan = {**derive_shift_plan(p, scales, gain_exp), **dict(shift_plan)}
    total = rescale * net.system_scale
    g, g2 = p.gamma_mag, p.gamma_mag**2
    sigma = net.orientation

    # u_err must equal sigma*(G^T b - u1); the integer update adds +u1, so the
    # integer slow weights carry -sigma and the bias carries +sigma
    w = -sigma * total * g2 * net.A.values * 2.0 ** scales["omega_slow"]
    if weight_rounding == "rowsum":
        slow_pos, e1 = _round_clamp(w, "omega_slow", rowsum_round(net.A, w))
        slow_neg, e2 = _round_clamp(-w, "omega_slow", rowsum_round(net.A, -w))
    elif weight_rounding == "nearest":
        slow_pos, e1 = _round_clamp(w, "omega_slow")
        slow_neg, e2 = _round_clamp(-w, "omega_slow")
    else:
        raise ValueError(f"weight_rounding must be 'rowsum' or 'nearest', got {weight_rounding!r}")
    wf = np.array([g2 * 2.0 ** scales["omega_fast"]])
    fpos, e3 = _round_clamp(wf, "omega_fast")
    fneg, e4 = _round_clamp(-wf, "omega_fast")
    bias_node = np.rint(sigma * total * g * net.b * 2.0 ** scales["bias"]).astype(np.int64)
    if np.any(np.abs(bias_node) > STATE_MAX):
        i = int(np.argmax(np.abs(bias_node)))
        raise QuantizationError(f"bias of node {i} ({bias_node[i]}) exceeds 24-bit range")
    theta_fixed = int(round(p.theta * 2.0 ** scales["v"]))
    gamma_fixed = int(round(g * 2.0 ** scales["gamma"]))
    if theta_fixed < 1 or gamma_fixed < 1:
        raise QuantizationError("|G| too small for the scale table")
    return FixedNetwork(
        source=net,
        rescale=float(rescale),
        slow_pos=slow_pos,
        slow_neg=slow_neg,
        fast_pos=int(fpos[0]),
        fast_neg=int(fneg[0]),
        bias_node=bias_node,
        theta_fixed=theta_fixed,
        gamma_fixed=gamma_fixed,
        scale_table=dict(scales),
        shift_plan=plan,
        decay_d=decay_multiplier(p.lambda_d, p.dt),
        decay_v=decay_multiplier(p.lambda_v, p.dt),
        max_quant_error={
            "omega_slow": max(e1, e2) * 2.0 ** -scales["omega_slow"],
            "omega_fast": max(e3, e4) * 2.0 ** -scales["omega_fast"],
        },
        weight_rounding=weight_rounding,
    )


# ---------------------------------------------------------------------------
# bundles


def _write_csv_vector(path: str, header: str, values) -> None:
    with open(path, "w") as fh:
        fh.write(f"index,{header}\n")
        for i, v in enumerate(np.asarray(values).tolist()):
            fh.write(f"{i},{v!r}\n")


def _read_csv_vector(path: str, dtype=float) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=dtype)
    return data[:, 1] if len(data) else np.zeros(0, dtype=dtype)


def export_network(net: SnnNetwork, directory: str, include_omega: bool = True) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "A.mtx"), "w") as fh:
        mm_write(net.A, fh)
    with open(os.path.join(directory, "gamma.mtx"), "w") as fh:
        mm_write(net.gamma, fh)
    if include_omega:
        with open(os.path.join(directory, "omega_slow.mtx"), "w") as fh:
            mm_write(net.omega_slow, fh)
        with open(os.path.join(directory, "omega_fast.mtx"), "w") as fh:
            mm_write(net.omega_fast, fh)
    _write_csv_vector(os.path.join(directory, "b.csv"), "b", net.b)
    _write_csv_vector(os.path.join(directory, "bias.csv"), "bias", net.bias)
    meta = {
        "params": net.params.to_dict(),
        "theta": net.theta,
        "system_scale": net.system_scale,
        "orientation": net.orientation,
    }
    with open(os.path.join(directory, "params.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def import_network(directory: str) -> SnnNetwork:
    with open(os.path.join(directory, "params.json")) as fh:
        meta = json.load(fh)
    with open(os.path.join(directory, "A.mtx")) as fh:
        A = mm_read(fh)
    b = _read_csv_vector(os.path.join(directory, "b.csv"))
    net = SnnNetwork(A, b, SnnParams.from_dict(meta["params"]), meta["system_scale"], meta["orientation"])
    gpath = os.path.join(directory, "gamma.mtx")
    if os.path.exists(gpath):
        with open(gpath) as fh:
            if mm_read(fh) != net.gamma:
                raise ValueError("gamma.mtx does not match the readout implied by params.json")
    return net


def export_fixed_network(fnet: FixedNetwork, directory: str) -> None:
    export_network(fnet.source, directory, include_omega=False)
    with open(os.path.join(directory, "weights_slow.mtx"), "w") as fh:
        mm_write(fnet.weights_slow, fh)
    with open(os.path.join(directory, "weights_fast.mtx"), "w") as fh:
        mm_write(fnet.weights_fast, fh)
    _write_csv_vector(os.path.join(directory, "bias_fixed.csv"), "bias_fixed", fnet.bias_fixed)
    meta = {
        "rescale": fnet.rescale,
        "theta_fixed": fnet.theta_fixed,
        "gamma_fixed": fnet.gamma_fixed,
        "scale_table": fnet.scale_table,
        "shift_plan": fnet.shift_plan,
        "weight_rounding": fnet.weight_rounding,
    }
    with open(os.path.join(directory, "fixed.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def import_fixed_network(directory: str) -> FixedNetwork:
    net = import_network(directory)
    with open(os.path.join(directory, "fixed.json")) as fh:
        meta = json.load(fh)
    fnet = quantize_network(
        net, meta["shift_plan"], meta["rescale"], meta["scale_table"], meta.get("weight_rounding", "rowsum")
    )
    stored = _read_csv_vector(os.path.join(directory, "bias_fixed.csv"), dtype=np.int64)
    if not np.array_equal(stored, fnet.bias_fixed):
        raise ValueError("bias_fixed.csv does not match the re-quantized network")
    return fnet
