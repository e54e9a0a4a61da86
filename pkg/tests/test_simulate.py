import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import kernel_peak, lif_ode_first_spike, readout_direct
from conftest import random_input, random_net
from snndelay.model import NetworkSpec, NeuronParams, Population, ProjectionSpec, build_network
from snndelay.simulate import (DelayRingBuffer, DivergenceError, OutputTrace, deliver, lif_step, readout_scores,
                               run_forward, simulate_batch, write_raster, write_trace_csv)

ALPHA = math.exp(-1 / 20)
BETA = math.exp(-1 / 5)


def chain(w_in, d_in=0.0, w_out=1.0, T=100, n_hidden=1):
    pops = [Population("in", 1, "input"), Population("h", n_hidden, "hidden"), Population("out", 1, "output")]
    projs = [ProjectionSpec("in", "h", np.full((1, n_hidden), w_in), np.full((1, n_hidden), d_in)),
             ProjectionSpec("h", "out", np.full((n_hidden, 1), w_out), np.zeros((n_hidden, 1)))]
    return build_network(NetworkSpec(1.0, pops, projs, T))


def direct(w, d=0.0, T=60):
    """Input wired straight to a single output integrator."""
    pops = [Population("in", 1, "input"), Population("out", 1, "output")]
    return build_network(NetworkSpec(1.0, pops, [ProjectionSpec("in", "out", np.full((1, 1), w),
                                                                np.full((1, 1), d))], T))


def test_lif_fixed_point():
    st_ = lif_step(np.zeros(3), np.zeros(3), np.zeros(3), ALPHA, BETA, 1.0, 0.0)
    assert np.all(st_.v == 0) and np.all(st_.i == 0) and not st_.fired.any()


def test_lif_threshold_checked_after_decay():
    st_ = lif_step(np.array([1.0]), np.array([0.0]), np.array([0.0]), ALPHA, BETA, 1.0, 0.0)
    assert st_.v[0] == pytest.approx(ALPHA) and not st_.fired[0]


def test_lif_large_arrival_synapse_first_order():
    # synapse is updated before the membrane, so the arrival acts in the same step:
    # V' = (1 - alpha) * 3 theta / (1 - alpha) = 3 theta, which fires and resets
    st_ = lif_step(np.zeros(1), np.zeros(1), np.array([3.0 / (1 - ALPHA)]), ALPHA, BETA, 1.0, 0.0)
    assert st_.v_pre[0] == pytest.approx(3.0)
    assert st_.fired[0] and st_.v[0] == 0.0


def test_lif_output_never_fires():
    st_ = lif_step(np.zeros(1), np.zeros(1), np.array([100.0]), ALPHA, BETA, 1.0, 0.0, spiking=False)
    assert not st_.fired[0] and st_.v[0] > 1.0


@pytest.mark.parametrize("w", [8.0, 12.0, 20.0, 40.0, 80.0])
@pytest.mark.parametrize("d", [0.0, 7.0])
def test_single_spike_matches_fine_ode(w, d):
    # clear supra-threshold inputs; the dt/100 ODE oracle gives the crossing step
    net = chain(w, d_in=d, T=100)
    rec, _ = run_forward(net, [(5, 0)])
    hidden_steps = rec.steps[rec.pops == 1]
    expect = lif_ode_first_spike([(5 + 1 + int(d), w)], 20.0, 5.0, 1.0, 1.0, 100)
    assert expect is not None
    assert hidden_steps.size >= 1 and abs(int(hidden_steps[0]) - expect) <= 1


def test_subthreshold_input_matches_fine_ode():
    net = chain(2.0, T=100)
    rec, _ = run_forward(net, [(5, 0)])
    assert lif_ode_first_spike([(6, 2.0)], 20.0, 5.0, 1.0, 1.0, 100) is None
    assert not np.any(rec.pops == 1)


def test_deliver_minimum_latency_and_delay():
    buf = DelayRingBuffer(1, 10, 1)
    deliver(buf, 3, np.array([0]), np.array([0]), np.full((1, 1), 0.5), np.zeros((1, 1), np.int64))
    deliver(buf, 3, np.array([0]), np.array([0]), np.full((1, 1), 0.25), np.full((1, 1), 5, np.int64))
    assert buf.consume(4)[0, 0] == 0.5
    assert buf.consume(9)[0, 0] == 0.25
    assert buf.pending == 0


def test_deliver_accumulates():
    buf = DelayRingBuffer(1, 10, 1)
    w = np.array([[0.5], [0.75]])
    deliver(buf, 0, np.array([0, 0]), np.array([0, 1]), w, np.full((2, 1), 2, np.int64))
    assert buf.consume(3)[0, 0] == 1.25
    assert np.all(buf.consume(3) == 0)  # slot zeroed after consumption


def test_empty_input():
    net = random_net(seed=2)
    rec, trace = run_forward(net, np.zeros((0, 2), np.int64))
    assert len(rec) == 0 and np.all(trace.voltages == 0)


def test_trace_row_zero_is_initial_condition():
    rec, trace = run_forward(direct(1.0), [(0, 0)])
    assert np.all(trace.voltages[0] == 0)
    assert trace.voltages[1, 0] == pytest.approx(1 - ALPHA)


def test_record_ordering_and_counts():
    net = random_net(architecture="recurrent", seed=4)
    rec, _ = run_forward(net, random_input(10, 100, 40, seed=4))
    assert len(rec) > 0
    key = list(zip(rec.steps, rec.pops, rec.neurons))
    assert key == sorted(key)
    counts = rec.counts
    for i, pid in enumerate(rec.pop_ids):
        sel = rec.pops == i
        assert counts[pid].sum() == sel.sum()
    assert not np.any(rec.pops == 2)  # no output events


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_time_shift_equivariance(seed, k):
    net = random_net(architecture="recurrent", T=160, seed=seed % 7)
    inp = random_input(10, 160, 30, seed=seed, t_max=60)
    rec_a, tr_a = run_forward(net, inp)
    shifted = inp.copy()
    shifted[:, 0] += k
    rec_b, tr_b = run_forward(net, shifted)
    horizon = 160 - k
    a = rec_a.shifted(k)
    keep_a = a.steps < 160
    assert np.array_equal(a.steps[keep_a], rec_b.steps)
    assert np.array_equal(a.neurons[keep_a], rec_b.neurons) and np.array_equal(a.pops[keep_a], rec_b.pops)
    assert np.array_equal(tr_a.voltages[:horizon], tr_b.voltages[k:])
    assert np.all(tr_b.voltages[:k] == 0)


def test_determinism():
    net = random_net(architecture="recurrent", seed=5)
    inp = random_input(10, 100, 40, seed=5)
    r1, t1 = run_forward(net, inp)
    r2, t2 = run_forward(net, inp)
    assert r1.pattern() == r2.pattern() and t1.voltages.tobytes() == t2.voltages.tobytes()


def test_conservation_counters():
    net = random_net(architecture="recurrent", seed=6)
    inp = random_input(10, 100, 60, seed=6)
    counters = {}
    recs, _ = simulate_batch(net, [inp], counters=counters)
    rec = recs[0]
    expected_abs = 0.0
    for j, p in enumerate(net.projections):
        src = net.pop_index(p.source)
        n = rec.neurons[rec.pops == src]
        expected_abs += float(np.abs(p.weights[n]).sum())
    assert counters["enqueued_abs"] == pytest.approx(expected_abs, rel=1e-12)
    assert counters["enqueued"] == pytest.approx(counters["consumed"] + counters["pending"], rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("m", [1, 3, 10])
def test_delay_realization_shifts_arrival(m):
    _, base = run_forward(direct(1.0, d=4.0), [(2, 0)])
    _, moved = run_forward(direct(1.0, d=4.0 + m), [(2, 0)])
    first_base = int(np.flatnonzero(base.voltages[:, 0])[0])
    first_moved = int(np.flatnonzero(moved.voltages[:, 0])[0])
    assert first_base == 2 + 1 + 4
    assert first_moved == first_base + m
    assert np.array_equal(base.voltages[first_base:60 - m], moved.voltages[first_base + m:])


def test_zero_trace_scores_and_tie_break():
    s = readout_scores(OutputTrace(np.zeros((50, 3)), 1.0))
    assert np.all(s == 0) and int(np.argmax(s)) == 0


def test_constant_trace_scores():
    T, dt, tau = 40, 0.5, 7.0
    s = readout_scores(np.full((T, 4), 2.0), tau, dt)
    expected = 2.0 * dt * sum(math.exp(-t * dt / tau) for t in range(T))
    assert np.allclose(s, expected, rtol=1e-13) and np.ptp(s) == 0


def test_random_trace_scores_direct_sum(rng):
    v = rng.normal(size=(123, 3))
    got = readout_scores(v, 30.0, 1.0)
    want = readout_direct(v, 1.0, 30.0)
    assert np.allclose(got, want, rtol=1e-12, atol=0)


def test_divergence_raises():
    net = chain(1.0, T=20)
    net.projections[0].weights[0, 0] = np.inf
    with pytest.raises(DivergenceError) as err:
        run_forward(net, [(0, 0)])
    assert err.value.population == "h"


def test_input_outside_horizon_rejected():
    with pytest.raises(ValueError, match="input timestep"):
        run_forward(direct(1.0, T=10), [(10, 0)])


def test_raster_and_trace_dump(tmp_path):
    net = random_net(seed=3)
    rec, trace = run_forward(net, random_input(10, 100, 40, seed=3))
    write_raster(rec, tmp_path / "r.tsv")
    write_trace_csv(trace, tmp_path / "t.csv")
    lines = (tmp_path / "r.tsv").read_text().splitlines()
    assert len(lines) == len(rec)
    t, pop, n = lines[0].split("\t")
    assert int(t) == rec.steps[0] and pop == rec.pop_ids[rec.pops[0]]
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 101


def test_kernel_peak_oracle_consistent_with_simulator():
    _, tr = run_forward(direct(1.0, T=200), [(0, 0)])
    assert tr.voltages.max() == pytest.approx(kernel_peak(ALPHA, BETA), rel=1e-12)


def test_neuron_params_reset_value():
    pops = [Population("in", 1, "input"), Population("h", 1, "hidden", NeuronParams(v_reset=-0.5)),
            Population("out", 1, "output")]
    projs = [ProjectionSpec("in", "h", np.full((1, 1), 100.0), np.zeros((1, 1))),
             ProjectionSpec("h", "out", np.ones((1, 1)), np.zeros((1, 1)))]
    net = build_network(NetworkSpec(1.0, pops, projs, 5))
    rec, _ = run_forward(net, [(0, 0)])
    assert rec.steps[rec.pops == 1][0] == 1
