import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from eventprop.errors import ConfigError, SimulationError, SpikeBufferOverflow
from eventprop.losses import LossSpec, loss_value
from eventprop.network import NetworkParams, Trial, propagator
from eventprop.simulate import (EXACT, GRID, NeuronState, crossing_vdot, run_forward_batch,
                                run_forward_trial, step_forward)

SUM = LossSpec("sum")


def single(w=1.0, tau_mem=20.0, tau_syn=5.0):
    return NetworkParams(w_ih=[[w]], w_ho=[[1.0]], tau_mem=tau_mem, tau_syn=tau_syn)


def substep_flow(v0, i0, tau_mem, tau_syn, h, step=1e-4):
    """Reference: high-order ODE solve of the free dynamics."""
    rhs = lambda t, y: [(-y[0] + y[1]) / tau_mem, -y[1] / tau_syn]
    sol = solve_ivp(rhs, (0.0, h), [v0, i0], method="DOP853", rtol=1e-13, atol=1e-15,
                    max_step=step * 100)
    return sol.y[:, -1]


def test_fixed_point_of_free_dynamics():
    p = single()
    for dt in (0.1, 1.0, 7.3):
        s, fired, _ = step_forward(NeuronState.zeros(2), p, dt)
        assert np.all(s.V == 0) and np.all(s.I == 0) and fired.size == 0


def test_one_step_closed_form():
    p = single()
    s, fired, _ = step_forward(NeuronState(np.array([0.0, 0.0]), np.array([1.0, 0.0])), p, 1.0)
    assert s.I[0] == pytest.approx(np.exp(-0.2), rel=1e-14)
    closed = 5.0 / (5.0 - 20.0) * (np.exp(-0.2) - np.exp(-0.05))
    assert s.V[0] == pytest.approx(closed, rel=1e-13)
    assert s.V[0] == pytest.approx(0.04417, abs=1e-5)
    ref_v, ref_i = substep_flow(0.0, 1.0, 20.0, 5.0, 1.0)
    assert s.V[0] == pytest.approx(ref_v, rel=1e-10)
    assert s.I[0] == pytest.approx(ref_i, rel=1e-10)
    assert fired.size == 0


@settings(max_examples=60, deadline=None)
@given(v=st.floats(-2, 0.9), i=st.floats(-3, 3), tm=st.floats(3, 60), ts=st.floats(1, 30),
       h=st.floats(1e-3, 20))
def test_propagator_matches_ode_solution(v, i, tm, ts, h):
    e_mem, e_syn, cross = propagator(h, tm, ts)
    ref_v, ref_i = substep_flow(v, i, tm, ts, h)
    assert e_mem * v + cross * i == pytest.approx(ref_v, rel=1e-8, abs=1e-11)
    assert e_syn * i == pytest.approx(ref_i, rel=1e-8, abs=1e-11)


def test_equal_time_constants_use_the_limit():
    e_mem, _, cross = propagator(2.0, 5.0, 5.0)
    assert cross == pytest.approx(2.0 / 5.0 * np.exp(-2.0 / 5.0), rel=1e-15)
    _, _, near = propagator(2.0, 5.0, 5.0 + 1e-9)
    assert near == pytest.approx(cross, rel=1e-8)


@settings(max_examples=100, deadline=None)
@given(v=st.floats(-2, 0.5), i=st.floats(-1, 0.6), tm=st.floats(3, 60), ts=st.floats(1, 30),
       dt=st.floats(1e-3, 5))
def test_two_half_steps_equal_one_step(v, i, tm, ts, dt):
    p = NetworkParams(w_ih=[[0.0]], w_ho=[[0.0]], tau_mem=tm, tau_syn=ts)
    st0 = NeuronState(np.array([v, v]), np.array([i, i]))
    one, f1, _ = step_forward(st0, p, dt)
    half, _, _ = step_forward(st0, p, dt / 2)
    two, f2, _ = step_forward(half, p, dt / 2)
    if f1.size or f2.size:
        return
    np.testing.assert_allclose(two.V, one.V, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(two.I, one.I, rtol=1e-12, atol=1e-300)


def test_single_weak_input_cannot_reach_threshold():
    # peak of the unit postsynaptic potential, from a fine sampling of its closed form
    tm, ts = 20.0, 5.0
    t = np.linspace(0, 100, 200001)
    kernel = ts / (ts - tm) * (np.exp(-t / ts) - np.exp(-t / tm))
    peak = kernel.max()
    assert 2.0 * peak == pytest.approx(0.315, abs=2e-3)
    trial = Trial([1.0], [0], 0, 60.0)
    rec, _ = run_forward_trial(single(2.0), trial, SUM, 0.1)
    assert rec.spike_counts[0] == 0
    strong = 1.02 / peak
    rec, _ = run_forward_trial(single(strong), trial, SUM, 0.1)
    assert rec.spike_counts[0] == 1
    assert rec.spike_vdot[0] > 0


def test_crossing_slope_matches_exact_crossing():
    p = single(8.0)
    trial = Trial([1.0], [0], 0, 40.0)
    grid, _ = run_forward_trial(p, trial, SUM, 0.5)
    exact, _ = run_forward_trial(p, trial, SUM, 0.5, mode=EXACT)
    assert grid.spike_counts[0] == exact.spike_counts[0] == 1
    assert grid.spike_vdot[0] == pytest.approx(exact.spike_vdot[0], rel=1e-9)
    # the grid spike sits on the boundary after the exact crossing
    assert grid.spike_times[0] == pytest.approx(np.ceil(exact.spike_times[0] / 0.5) * 0.5)


def test_crossing_vdot_is_positive_and_bounded():
    p = single()
    v = np.array([0.9]); i = np.array([3.0])
    vd = crossing_vdot(v, i, np.array([0]), p, 1.0)
    assert 0 < vd[0] < (3.0 - 1.0) / 20.0 + 1e-12


def test_empty_trial_gives_uniform_loss():
    p = NetworkParams(w_ih=np.full((3, 4), 0.5), w_ho=np.ones((5, 3)), tau_mem=20.0, tau_syn=5.0)
    rec, loss = run_forward_trial(p, Trial([], [], 2, 30.0), SUM, 1.0)
    assert rec.spike_neuron.size == 0
    np.testing.assert_array_equal(rec.output_integrals, 0.0)
    assert loss == pytest.approx(np.log(5), rel=1e-15)


def test_full_input_dropout_equals_empty_trial():
    p = NetworkParams(w_ih=np.full((3, 4), 2.0), w_ho=np.ones((2, 3)), tau_mem=20.0, tau_syn=5.0)
    trial = Trial(np.linspace(1, 20, 12), np.arange(12) % 4, 1, 30.0)
    empty = Trial([], [], 1, 30.0)
    a, = run_forward_batch(p, [trial], SUM, 1.0, rngs=[np.random.default_rng(0)], dropout=(1.0, 0.0))
    b, = run_forward_batch(p, [empty], SUM, 1.0)
    for name in ("spike_step", "spike_neuron", "output_integrals", "v_max", "spike_counts",
                 "output_final", "input_times"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def random_net(seed, recurrent=True):
    rng = np.random.default_rng(seed)
    nh, no, ni = 6, 3, 4
    p = NetworkParams(rng.normal(1.0, 0.6, (nh, ni)), rng.normal(0, 0.5, (no, nh)),
                      rng.uniform(5, 25, nh + no), rng.uniform(2, 8, nh + no),
                      w_hh=rng.normal(0, 0.4, (nh, nh)) if recurrent else None)
    trial = Trial(rng.uniform(0, 30, 25), rng.integers(0, ni, 25), int(rng.integers(no)), 40.0)
    return p, trial


@pytest.mark.parametrize("mode", [GRID, EXACT])
@pytest.mark.parametrize("seed", range(4))
def test_record_invariants(mode, seed):
    p, trial = random_net(seed)
    rec, _ = run_forward_trial(p, trial, SUM, 0.5, mode=mode)
    assert rec.spike_neuron.size > 0
    times = rec.spike_times
    key = list(zip(times.tolist(), rec.spike_neuron.tolist()))
    assert key == sorted(key)
    counts = np.bincount(rec.spike_neuron[rec.spike_neuron < p.n_hidden], minlength=p.n_hidden)
    np.testing.assert_array_equal(counts, rec.spike_counts)
    assert np.all(rec.spike_vdot > 0)
    again, _ = run_forward_trial(p, trial, SUM, 0.5, mode=mode)
    for name in ("spike_step", "spike_offset", "spike_neuron", "output_integrals", "v_max"):
        np.testing.assert_array_equal(getattr(rec, name), getattr(again, name))


def test_reset_after_every_grid_spike():
    p, trial = random_net(1, recurrent=False)
    nh = p.n_hidden
    state = NeuronState.zeros(p.n_neurons)
    dt = 0.5
    steps = int(trial.duration / dt)
    fired_prev = np.zeros(nh, bool)
    bins = np.floor(trial.times / dt).astype(int)
    n_fired = 0
    for n in range(steps):
        # events in step n arrive at its start on the grid
        state, fired, _ = step_forward(state, p, dt, trial.channels[bins == n],
                                       hidden_spikes=fired_prev, step=n)
        assert np.all(state.V[fired] == p.v_reset)
        fired_prev = np.zeros(nh, bool)
        fired_prev[fired[fired < nh]] = True
        n_fired += fired.size
    rec, _ = run_forward_trial(p, trial, SUM, dt)
    assert n_fired == rec.spike_neuron.size


def test_zero_weights_no_activity():
    p = NetworkParams(np.zeros((4, 3)), np.zeros((2, 4)), 20.0, 5.0, w_hh=np.zeros((4, 4)))
    trial = Trial(np.linspace(0, 9, 30), np.arange(30) % 3, 0, 20.0)
    for mode in (GRID, EXACT):
        rec, _ = run_forward_trial(p, trial, SUM, 0.5, mode=mode, keep_trace=True)
        assert rec.spike_neuron.size == 0
        assert np.all(rec.output_trace == 0)


def test_spike_cap_names_the_neuron():
    p = NetworkParams([[30.0]], [[1.0]], 20.0, 5.0)
    trial = Trial(np.arange(0, 50, 0.5), np.zeros(100, int), 0, 60.0)
    with pytest.raises(SpikeBufferOverflow, match="neuron 0"):
        run_forward_trial(p, trial, SUM, 0.1, spike_cap=3)


def test_non_finite_state_reports_step():
    p = NetworkParams([[np.inf]], [[1.0]], 20.0, 5.0)
    trial = Trial([2.05], [0], 0, 10.0)
    with pytest.raises(SimulationError) as err:
        run_forward_trial(p, trial, SUM, 1.0)
    assert err.value.step == 2


def test_label_and_channel_validation():
    p = single()
    with pytest.raises(ConfigError):
        run_forward_trial(p, Trial([1.0], [0], 3, 10.0), SUM, 1.0)
    with pytest.raises(ConfigError):
        run_forward_trial(p, Trial([1.0], [5], 0, 10.0), SUM, 1.0)


def test_spiking_outputs_rejected_for_voltage_loss():
    p = NetworkParams([[1.0]], [[1.0]], 20.0, 5.0, output_mode="spiking")
    with pytest.raises(ConfigError):
        run_forward_trial(p, Trial([1.0], [0], 0, 10.0), SUM, 1.0)


def test_tau_bounds_enforced():
    with pytest.raises(ConfigError):
        NetworkParams([[1.0]], [[1.0]], 2.9, 5.0)
    with pytest.raises(ConfigError):
        NetworkParams([[1.0]], [[1.0]], 20.0, 0.5)
    p = single()
    assert p.theta == 1.0 and p.v_reset == 0.0 and not p.recurrent


def test_trial_sorts_events_and_checks_range():
    t = Trial([3.0, 1.0, 1.0], [0, 2, 1], 0, 5.0)
    assert t.times.tolist() == [1.0, 1.0, 3.0]
    assert t.channels.tolist() == [1, 2, 0]
    with pytest.raises(ValueError):
        Trial([5.0], [0], 0, 5.0)


def test_grid_and_exact_losses_converge():
    p, trial = random_net(2, recurrent=False)
    exact = run_forward_trial(p, trial, SUM, 0.01, mode=EXACT)[1]
    errs = [abs(run_forward_trial(p, trial, SUM, dt)[1] - exact) for dt in (0.4, 0.1, 0.025)]
    assert errs[2] < errs[0]
    assert loss_value(SUM, run_forward_trial(p, trial, SUM, 0.01, mode=EXACT)[0], trial.label) == exact
