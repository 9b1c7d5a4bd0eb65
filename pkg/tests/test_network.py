import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from neurofem.fem import poisson_disk_system
from neurofem.network import (
    PUBLISHED_SHIFT_PLAN,
    SCALE_TABLE,
    QuantizationError,
    SnnParams,
    build_network,
    build_readout,
    decay_multiplier,
    derive_shift_plan,
    export_fixed_network,
    export_network,
    gershgorin_radius,
    import_fixed_network,
    import_network,
    noise_shift,
    quantize_network,
    rowsum_round,
    set_bias,
)
from neurofem.sparse import CsrMatrix, spmv

G6 = 2.0**-6


def one_by_one(a=-2.0, b=-2.0, **params):
    return build_network((CsrMatrix.from_dense([[a]]), np.array([b])), SnnParams(**params))


def test_readout_single_node():
    G = build_readout(1, SnnParams(npm=4, gamma_mag=G6))
    assert G.to_dense().tolist() == [[G6, G6, -G6, -G6]]


def test_readout_two_nodes():
    G = build_readout(2, SnnParams(npm=2, gamma_mag=G6)).to_dense()
    assert G.tolist() == [[G6, -G6, 0, 0], [0, 0, G6, -G6]]
    assert not G.sum(axis=1).any()


def test_params_validation():
    for bad in (dict(npm=3), dict(npm=0), dict(gamma_mag=0.0), dict(dt=0.0), dict(sigma_v=-1.0)):
        with pytest.raises(ValueError):
            SnnParams(**bad)
    assert SnnParams(gamma_mag=G6).theta == 2.0**-13


def test_hand_computed_weights():
    net = one_by_one(npm=2, gamma_mag=G6)
    pattern = np.array([[1, -1], [-1, 1]])
    np.testing.assert_array_equal(net.omega_slow.to_dense(), -2 * 2.0**-12 * pattern)
    np.testing.assert_array_equal(net.omega_fast.to_dense(), 2.0**-12 * pattern)
    assert net.theta == 2.0**-13
    np.testing.assert_array_equal(net.bias, [-2 * G6, 2 * G6])


def test_omega_blocks_match_nnz(small_system):
    net = build_network(small_system, SnnParams(npm=4))
    assert net.omega_slow.nnz == small_system.A.nnz * 16
    # factored readout equals the explicit product
    s = (np.random.default_rng(0).random(net.n_neurons) < 0.3).astype(float)
    np.testing.assert_allclose(net.readout(s), spmv(net.gamma, s), atol=1e-15)


def test_orientation_and_scale(small_system):
    net = build_network(small_system, SnnParams(gamma_mag=2.0**-8))
    assert net.orientation == -1
    p = net.params
    g = gershgorin_radius(small_system.A)
    s = net.system_scale
    assert math.frexp(s)[0] == 0.5
    assert p.k_p * s * g * p.dt <= 1 < p.k_p * 2 * s * g * p.dt
    pos = build_network((-small_system.A, -small_system.b))
    assert pos.orientation == 1


def test_set_bias():
    net = one_by_one()
    assert set_bias(set_bias(net, [3.0]), [3.0]).b.tolist() == [3.0]
    with pytest.raises(ValueError):
        set_bias(net, [1.0, 2.0])


def test_noise_scaling():
    assert SnnParams(gamma_mag=G6).noise_std == 0.00225
    assert SnnParams(gamma_mag=2.0**-8).noise_std == pytest.approx(0.00225 / 16)
    assert SnnParams(gamma_mag=2.0**-8, noise_reference_gamma=None).noise_std == 0.00225


def test_derived_shift_plan_values():
    plan = derive_shift_plan(SnnParams(gamma_mag=G6))
    assert plan == {"u1_da": 10, "u2_da": 4, "err_bias": -1, "int_err": -8, "v_err": 2, "v_int": 0,
                    "v_u2": -4, "v_da": 9, "v_noise": -3, "x_gamma": 3}
    # the printed shifts differ only for the fast-current and bias inputs
    diff = {k for k in plan if plan[k] != PUBLISHED_SHIFT_PLAN[k]}
    assert diff == {"u2_da", "err_bias"}
    compensated = derive_shift_plan(SnnParams(gamma_mag=G6), gain_exponent=4)
    assert (compensated["v_err"], compensated["v_int"]) == (-2, -4)


def test_noise_shift_and_decay():
    assert noise_shift(SnnParams(gamma_mag=G6)) == -3
    assert noise_shift(SnnParams(gamma_mag=2.0**-8)) == -7
    assert noise_shift(SnnParams(sigma_v=0.0)) == -24
    assert decay_multiplier(8.0, 2.0**-12) == (511, 9)
    assert decay_multiplier(16.0, 2.0**-12) == (255, 8)
    with pytest.raises(QuantizationError):
        derive_shift_plan(SnnParams(dt=1e-3))


def test_quantize_fixed_constants(small_system):
    fnet = quantize_network(build_network(small_system, SnnParams(npm=8, gamma_mag=G6)))
    assert fnet.theta_fixed == 32768
    assert fnet.gamma_fixed == 2**7
    # |G|^2 at 2^19 is 128, which clamps to 127 on the positive side
    assert (fnet.fast_pos, fnet.fast_neg) == (127, -128)
    assert fnet.max_quant_error["omega_fast"] <= 2.0**-19
    peak = np.abs(fnet.slow_pos).max()
    assert 64 < peak <= 128
    assert fnet.rescale == 16.0
    assert fnet.state_gain == fnet.rescale
    assert fnet.twin_system_scale() == fnet.source.system_scale


def test_quantize_nearest_within_half_quantum(small_system):
    net = build_network(small_system, SnnParams(npm=8, gamma_mag=G6))
    fnet = quantize_network(net, weight_rounding="nearest")
    w = -net.orientation * fnet.rescale * net.system_scale * G6**2 * net.A.values * 2.0**6
    assert np.abs(fnet.slow_pos - w).max() <= 0.5
    with pytest.raises(ValueError):
        quantize_network(net, weight_rounding="stochastic")


def test_rowsum_rounding_properties(small_system):
    A = small_system.A
    w = A.values * 7.3
    q = rowsum_round(A, w)
    rows = A.row_indices()
    assert np.array_equal(np.bincount(rows, weights=q), np.rint(np.bincount(rows, weights=w)))
    Q = CsrMatrix(A.n_rows, A.n_cols, A.row_ptr, A.col_idx, q).to_dense()
    np.testing.assert_array_equal(Q, Q.T)
    off = rows != A.col_idx
    np.testing.assert_array_equal(q[off], np.rint(w[off]))


@given(st.floats(0.5, 40.0))
def test_rowsum_rounding_any_scale(scale):
    A = poisson_disk_system(0.3).A
    q = rowsum_round(A, A.values * scale)
    rows = A.row_indices()
    assert np.array_equal(np.bincount(rows, weights=q), np.rint(np.bincount(rows, weights=A.values * scale)))


def test_quantize_bias_overflow():
    with pytest.raises(QuantizationError):
        quantize_network(one_by_one(b=-1e6, gamma_mag=G6))


def test_negative_bias_mirrors(small_system):
    fnet = quantize_network(build_network(small_system, SnnParams(npm=4, gamma_mag=G6)))
    bf = fnet.bias_fixed.reshape(-1, 4)
    np.testing.assert_array_equal(bf[:, 0], -bf[:, 3])
    np.testing.assert_array_equal(fnet.with_bias(-small_system.b).bias_node, -fnet.bias_node)


def test_weight_matrices_match_factored_form(small_system):
    s = small_system
    fnet = quantize_network(build_network(s, SnnParams(npm=4, gamma_mag=G6)))
    W = fnet.weights_slow.to_dense()
    rows = s.A.row_indices()
    for k in range(s.A.nnz):
        i, j = rows[k], s.A.col_idx[k]
        blk = W[4 * i : 4 * i + 4, 4 * j : 4 * j + 4]
        assert blk[0, 0] == fnet.slow_pos[k] and blk[0, 3] == fnet.slow_neg[k]
    F = fnet.weights_fast.to_dense()[:4, :4]
    assert F[0, 1] == 127 and F[0, 2] == -128


def test_network_bundle_round_trip(tmp_path, small_system):
    net = build_network(small_system, SnnParams(npm=4, gamma_mag=G6))
    export_network(net, str(tmp_path / "n"))
    back = import_network(str(tmp_path / "n"))
    assert back.A == net.A and np.array_equal(back.b, net.b)
    assert back.params == net.params and back.system_scale == net.system_scale
    assert back.orientation == net.orientation
    for name in ("A.mtx", "gamma.mtx", "omega_slow.mtx", "omega_fast.mtx", "b.csv", "bias.csv", "params.json"):
        assert (tmp_path / "n" / name).exists()


def test_fixed_bundle_round_trip(tmp_path, small_system):
    fnet = quantize_network(build_network(small_system, SnnParams(npm=4, gamma_mag=G6)))
    d = tmp_path / "f"
    export_fixed_network(fnet, str(d))
    back = import_fixed_network(str(d))
    assert np.array_equal(back.slow_pos, fnet.slow_pos) and back.shift_plan == fnet.shift_plan
    assert np.array_equal(back.bias_fixed, fnet.bias_fixed)
    text = (d / "bias_fixed.csv").read_text().splitlines()
    text[1] = "0,12345"
    (d / "bias_fixed.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(ValueError):
        import_fixed_network(str(d))


def test_scale_table_constants():
    assert SCALE_TABLE["v"] == 28 and SCALE_TABLE["omega_slow"] == 6 and SCALE_TABLE["omega_fast"] == 19
