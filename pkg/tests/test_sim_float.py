import numpy as np
import pytest

from neurofem.network import SnnParams, build_network
from neurofem.sim_float import (
    FloatSimulator,
    RecordOptions,
    SimState,
    estimate_solution,
    raster_csv,
    readout_csv,
    readout_std,
    residual_csv,
    run,
    run_config_json,
    run_p_only,
    step,
)
from neurofem.sparse import CsrMatrix, rel_residual

G6 = 2.0**-6


def one_by_one(a=-2.0, b=-2.0, **params):
    return build_network((CsrMatrix.from_dense([[a]]), np.array([b])), SnnParams(**params))


def scalar_oracle(a, b, p: SnnParams, scale, orient, n_steps):
    """Independent per-neuron transcription for a 1x1 system with npm=2 and no noise."""
    g = p.gamma_mag
    sign = [1.0, -1.0]
    st = {k: [0.0, 0.0] for k in ("u1", "u2", "ue", "ui", "v")}
    s = [0, 0]
    x = 0.0
    spikes = []
    for _ in range(n_steps):
        new = {k: [0.0, 0.0] for k in st}
        fired = [0, 0]
        for i in range(2):
            da_slow = sum(sign[i] * sign[j] * g * g * a * s[j] for j in range(2))
            da_fast = sum(sign[i] * sign[j] * g * g * s[j] for j in range(2))
            ue = orient * scale * (sign[i] * g * b - st["u1"][i])
            new["ue"][i] = ue
            new["u1"][i] = (1 - p.lambda_d * p.dt) * st["u1"][i] + da_slow
            new["u2"][i] = (1 - p.lambda_d * p.dt) * st["u2"][i] + p.lambda_d * da_fast
            new["ui"][i] = st["ui"][i] + p.dt * ue
            v = (1 - p.lambda_v * p.dt) * st["v"][i] + p.dt * (p.k_p * ue + p.k_i * st["ui"][i] + st["u2"][i]) - da_fast
            if v >= 0.5 * g * g:
                fired[i] = 1
                v -= 0.5 * g * g
            new["v"][i] = v
        x = (1 - p.lambda_d * p.dt) * x + g * (fired[0] - fired[1])
        st, s = new, fired
        spikes.append(tuple(fired))
    return st, x, spikes


def test_step_matches_scalar_oracle():
    net = one_by_one(npm=2, gamma_mag=G6, sigma_v=0.0)
    st = SimState.zeros(net)
    spikes = []
    for _ in range(400):
        st = step(st, net)
        spikes.append(tuple(st.s.tolist()))
    ref, x, ref_spikes = scalar_oracle(-2.0, -2.0, net.params, net.system_scale, net.orientation, 400)
    assert spikes == ref_spikes
    assert sum(map(sum, spikes)) > 0
    np.testing.assert_allclose(st.v, ref["v"], rtol=1e-12, atol=1e-18)
    np.testing.assert_allclose(st.u_int, ref["ui"], rtol=1e-12, atol=1e-18)
    assert st.x[0] == pytest.approx(x, rel=1e-12)


def test_kernel_matches_reference_step(backend, small_system):
    net = build_network(small_system, SnnParams(npm=4, gamma_mag=G6))
    sim = FloatSimulator(net, seed=3, backend=backend)
    st = SimState.zeros(net, 3)
    for _ in range(200):
        sim.advance(1)
        st = step(st, net)
        np.testing.assert_array_equal(st.s, sim.state.s)
    np.testing.assert_allclose(sim.state.v, st.v, atol=1e-14)
    np.testing.assert_allclose(sim.state.x, st.x, atol=1e-14)


@pytest.mark.parametrize("noise", ["none", "gauss", "uniform24"])
def test_backends_identical(noise, small_system):
    pytest.importorskip("neurofem._kernels")
    net = build_network(small_system, SnnParams(npm=8, gamma_mag=2.0**-8))
    a = FloatSimulator(net, seed=9, backend="python", noise=noise)
    b = FloatSimulator(net, seed=9, backend="compiled", noise=noise)
    a.advance(700)
    b.advance(700)
    np.testing.assert_array_equal(a.spike_counts, b.spike_counts)
    np.testing.assert_array_equal(a.state.v, b.state.v)
    np.testing.assert_array_equal(a.x_acc, b.x_acc)


def test_zero_network_stays_zero(backend):
    net = build_network((CsrMatrix.zeros(3, 3), np.zeros(3)), SnnParams(npm=4, sigma_v=0.0), system_scale=1.0,
                        orientation=-1)
    tr = run(net, 2000, backend=backend, windows=())
    st = tr.final_state
    assert tr.total_spikes == 0
    for arr in (st.u1, st.u2, st.u_err, st.u_int, st.v, st.x):
        assert not arr.any()


def test_scalar_solution_one(backend):
    net = one_by_one(npm=8, gamma_mag=G6)
    tr = run(net, 50_000, seed=1, backend=backend)
    assert estimate_solution(tr, 10_000)[0] == pytest.approx(1.0, abs=0.02)


def test_determinism_and_seeds(small_system):
    net = build_network(small_system, SnnParams(npm=8, gamma_mag=2.0**-8))
    rec = RecordOptions(raster=True, readout_every=50)
    a = run(net, 6000, seed=4, record=rec, windows=(3000,))
    b = run(net, 6000, seed=4, record=rec, windows=(3000,))
    np.testing.assert_array_equal(a.spike_raster, b.spike_raster)
    c = run(net, 6000, seed=5, record=rec, windows=(3000,))
    assert not np.array_equal(a.spike_raster, c.spike_raster)
    xa, xc = estimate_solution(a, 3000), estimate_solution(c, 3000)
    spread = readout_std(a)
    assert np.all(np.abs(xa - xc) <= 3 * spread + 1e-12)


def test_estimate_window_one(small_system):
    net = build_network(small_system, SnnParams(npm=4, gamma_mag=G6))
    tr = run(net, 300, windows=(1,))
    np.testing.assert_allclose(estimate_solution(tr, 1), tr.final_state.x, rtol=1e-12)
    with pytest.raises(ValueError):
        estimate_solution(tr, 301)


def test_no_bias_no_noise_no_spikes(small_system):
    net = build_network(small_system.with_rhs(np.zeros(small_system.n)), SnnParams(npm=4, sigma_v=0.0))
    assert run(net, 3000, windows=()).total_spikes == 0


def test_negated_bias_negates_solution(small_system):
    net = build_network(small_system, SnnParams(npm=16, gamma_mag=2.0**-8))
    neg = build_network(small_system.with_rhs(-small_system.b), SnnParams(npm=16, gamma_mag=2.0**-8))
    x = estimate_solution(run(net, 30_000, seed=2), 10_000)
    y = estimate_solution(run(neg, 30_000, seed=2), 10_000)
    assert np.linalg.norm(x + y) / np.linalg.norm(x) < 0.01


def test_p_only_freezes_integral(small_system):
    net = build_network(small_system, SnnParams(npm=8))
    tr = run_p_only(net, 2000, windows=())
    assert not tr.final_state.u_int.any()


def test_pi_residual_decreases(small_system):
    net = build_network(small_system, SnnParams(npm=16, gamma_mag=2.0**-8))
    tr = run(net, 20_000, seed=1, windows=(2000,), record=RecordOptions(checkpoint_every=2000))
    A, b = small_system.A, small_system.b
    early = rel_residual(A, tr.window_mean(2000, 4000), b)
    late = rel_residual(A, tr.window_mean(18_000, 20_000), b)
    assert late < early


def test_residual_tracking_and_switch(small_system):
    b2 = small_system.b * 0.5
    rec = RecordOptions(residual_targets={"f1": small_system.b, "f2": b2}, readout_every=100)
    tr = run(build_network(small_system, SnnParams(npm=8)), 4000, record=rec, switch=(2000, b2), windows=())
    assert tr.switches == [(2000, "switch")]
    assert tr.residual_history["f1"].shape == (4000,)
    # instantaneous residual equals the recorded one at a readout snapshot
    k = int(np.flatnonzero(tr.readout_steps == 1500)[0])
    assert tr.residual_history["f1"][1499] == pytest.approx(rel_residual(small_system.A, tr.readout_history[k], small_system.b))
    assert residual_csv(tr).startswith("step,")
    assert readout_csv(tr).count("\n") > 10


def test_csv_and_config_outputs(small_system):
    net = build_network(small_system, SnnParams(npm=4))
    tr = run(net, 500, record=RecordOptions(raster=True), windows=())
    lines = raster_csv(tr).splitlines()
    assert lines[0] == "step,neuron_id" and len(lines) == tr.total_spikes + 1
    cfg = run_config_json(net, 500, 0)
    assert '"npm": 4' in cfg
