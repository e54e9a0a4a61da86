import math
import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import softmax_xent
from conftest import random_input, random_net
from snndelay.eventprop import (BackwardStats, LossConfig, backward, batch_loss_and_seed, gradcheck,
                                loss_and_gradients, loss_and_seed, regularization, relative_error)
from snndelay.model import NetworkSpec, Population, ProjectionSpec, build_network
from snndelay.simulate import SpikeRecord, readout_scores, run_forward, simulate_batch


def chain(w_in=8.0, d_in=3.0, w_out=1.0, T=80, d_out=0.0):
    pops = [Population("in", 1, "input"), Population("h", 1, "hidden"), Population("out", 2, "output")]
    projs = [ProjectionSpec("in", "h", np.full((1, 1), w_in), np.full((1, 1), d_in)),
             ProjectionSpec("h", "out", np.array([[w_out, -0.5]]), np.array([[d_out, 1.0]]))]
    return build_network(NetworkSpec(1.0, pops, projs, T))


def total_loss(net, inp, label, cfg, interpolate=True):
    recs, v = simulate_batch(net, [inp], interpolate=interpolate)
    losses, _, _ = batch_loss_and_seed(v, np.array([label]), cfg, net.dt)
    return float(losses[0]), recs[0]


def test_uniform_scores_loss_is_log_c():
    for c in (2, 4, 20):
        loss, seeds = loss_and_seed(np.zeros((30, c)), 1, LossConfig())
        assert loss == pytest.approx(math.log(c), rel=1e-14)


def test_dominant_score_loss_goes_to_zero():
    v = np.zeros((10, 3))
    v[:, 2] = 1e3
    loss, _ = loss_and_seed(v, 2, LossConfig())
    assert loss < 1e-12


def test_seeds_match_finite_differences(rng):
    v = rng.normal(size=(25, 4))
    cfg = LossConfig(tau_loss=12.0)
    loss, seeds = loss_and_seed(v, 3, cfg, dt=1.0)
    assert loss == pytest.approx(softmax_xent(list(readout_scores(v, 12.0, 1.0)), 3), rel=1e-12)
    eps = 1e-6
    for t, k in [(0, 0), (3, 3), (10, 1), (24, 2), (17, 3)]:
        vp, vm = v.copy(), v.copy()
        vp[t, k] += eps
        vm[t, k] -= eps
        fd = (loss_and_seed(vp, 3, cfg)[0] - loss_and_seed(vm, 3, cfg)[0]) / (2 * eps)
        assert relative_error(seeds[t, k], fd) < 1e-6 or abs(seeds[t, k] - fd) < 1e-9


def _record(counts, T=1000, dt=1.0):
    """SpikeRecord with the given number of spikes per hidden neuron (evenly spaced)."""
    steps, neurons = [], []
    for n, c in enumerate(counts):
        if c:
            s = np.linspace(0, T - 1, c).astype(np.int64)
            steps.append(s)
            neurons.append(np.full(c, n))
    steps = np.concatenate(steps) if steps else np.zeros(0, np.int64)
    neurons = np.concatenate(neurons) if neurons else np.zeros(0, np.int64)
    order = np.lexsort((neurons, steps))
    z = np.ones(steps.size)
    return SpikeRecord(steps[order], np.ones(steps.size, np.int64), neurons[order], z, z,
                       ("in", "h", "out"), ("input", "hidden", "output"), (1, len(counts), 1), T, False)


def test_reg_zero_at_target_rate():
    reg, coeffs = regularization(_record([14, 14, 14]), LossConfig(reg_strength=0.3), 1.0)
    assert reg == 0.0 and np.all(coeffs["h"] == 0)


def test_reg_silent_network_arithmetic():
    rho = 0.01
    reg, _ = regularization(_record([0] * 512), LossConfig(reg_strength=rho), 1.0)
    assert reg == pytest.approx(rho * 512 * 196, rel=1e-14)


def test_reg_gradient_sign_matches_removing_a_spike():
    # hidden neuron far above a 0 Hz target; the regularizer should push its input weight down
    cfg = LossConfig(reg_strength=1e-3, target_rate=0.0)
    net = chain(w_in=30.0, T=200)
    inp = [(5, 0), (40, 0), (80, 0)]
    rec, tr = run_forward(net, inp, interpolate=True)
    reg0, _ = regularization(rec, cfg, 1.0)
    g = backward(net, rec, np.zeros_like(tr.voltages), cfg)
    assert g.weights[0][0, 0] > 0
    # lower the weight until one hidden spike disappears: the penalty drops
    for w in np.linspace(30.0, 1.0, 300):
        r2, _ = run_forward(chain(w_in=w, T=200), inp, interpolate=True)
        if len(r2) < len(rec):
            assert regularization(r2, cfg, 1.0)[0] < reg0
            break
    else:
        pytest.fail("no spike was removed")


def test_zero_hidden_spikes_give_zero_hidden_path_gradients():
    net = random_net(w_in=(0.0, 0.01), seed=3)
    inp = random_input(10, 100, 10, seed=3)
    g, recs, _, _ = loss_and_gradients(net, [inp], np.array([1]), LossConfig())
    assert not np.any(recs[0].pops == 1)
    for gw, gd in zip(g.weights, g.delays):
        assert np.all(gd == 0)
    # hidden->output weights receive nothing without presynaptic spikes
    assert np.all(g.weights[1] == 0)


def test_empty_record_zero_delay_gradient():
    net = random_net(seed=1)
    rec, tr = run_forward(net, np.zeros((0, 2), np.int64))
    _, seeds = loss_and_seed(tr, 0, LossConfig())
    g = backward(net, rec, seeds, LossConfig(reg_strength=0.1))
    assert all(np.all(d == 0) for d in g.delays)


@pytest.mark.parametrize("which", ["w_in", "w_out", "d_in", "d_out"])
def test_single_synapse_chain_fd(which):
    cfg = LossConfig()
    base = dict(w_in=8.0, d_in=3.3, w_out=1.0, d_out=2.2)
    inp = [(4, 0)]

    def f(x):
        kw = dict(base)
        kw[which] = x
        return total_loss(chain(**kw), inp, 1, cfg)

    loss0, rec0 = f(base[which])
    net = chain(**base)
    g, _, _, _ = loss_and_gradients(net, [inp], np.array([1]), cfg)
    analytic = {"w_in": g.weights[0][0, 0], "w_out": g.weights[1][0, 0],
                "d_in": g.delays[0][0, 0], "d_out": g.delays[1][0, 0]}[which]
    eps = 1e-6
    lp, rp = f(base[which] + eps)
    lm, rm = f(base[which] - eps)
    assert rp.pattern() == rec0.pattern() == rm.pattern()
    fd = (lp - lm) / (2 * eps)
    assert relative_error(analytic, fd) < 1e-3, (analytic, fd)


def test_seed_scaling_is_linear():
    net = random_net(architecture="recurrent", seed=9)
    inp = random_input(10, 100, 40, seed=9)
    rec, tr = run_forward(net, inp, interpolate=True)
    _, seeds = loss_and_seed(tr, 2, LossConfig())
    g1 = backward(net, rec, seeds, LossConfig())
    g2 = backward(net, rec, 2.0 * seeds, LossConfig())
    g3 = backward(net, rec, 3.0 * seeds, LossConfig())
    assert np.array_equal(g2.flat(), 2.0 * g1.flat())
    scale = np.abs(g1.flat()).max()
    assert np.allclose(g3.flat(), 3.0 * g1.flat(), rtol=1e-12, atol=1e-13 * scale)


def test_frozen_delays_have_zero_gradient():
    net = random_net(seed=4)
    net.projections[0].delays_trainable = False
    g, _, _, _ = loss_and_gradients(net, [random_input(10, 100, 40, seed=4)], np.array([0]), LossConfig())
    assert np.all(g.delays[0] == 0)
    assert np.any(g.delays[1] != 0)


def test_backward_jump_ops_equal_spikes_times_fanout():
    net = random_net(architecture="recurrent", seed=2)
    inp = random_input(10, 100, 40, seed=2)
    counters = {}
    recs, v = simulate_batch(net, [inp], interpolate=True, counters=counters)
    _, seeds, _ = batch_loss_and_seed(v, np.array([0]), LossConfig(), net.dt)
    stats = BackwardStats()
    backward(net, recs, seeds, LossConfig(), stats=stats)
    rec = recs[0]
    expected = sum(int(np.sum(rec.pops == net.pop_index(p.source))) * p.weights.shape[1] for p in net.projections)
    assert stats.jump_ops == expected == counters["synaptic_events"]


def test_backward_rejects_state_history():
    net = random_net(seed=0)
    _, tr = run_forward(net, random_input(10, 100, 20))
    with pytest.raises(TypeError, match="SpikeRecord"):
        backward(net, [{"v": np.zeros((100, 20))}], tr.voltages[None], LossConfig())


def test_gradients_finite_and_shaped():
    net = random_net(architecture="recurrent", seed=8)
    g, _, _, _ = loss_and_gradients(net, [random_input(10, 100, 40, seed=8)], np.array([1]),
                                    LossConfig(reg_strength=1e-3))
    for p, gw, gd in zip(net.projections, g.weights, g.delays):
        assert gw.shape == p.weights.shape and gd.shape == p.delays.shape
        assert np.all(np.isfinite(gw)) and np.all(np.isfinite(gd))


def test_descent_direction_decreases_loss():
    net = random_net(seed=12)
    inp = random_input(10, 100, 40, seed=12)
    cfg = LossConfig()
    g, _, _, _ = loss_and_gradients(net, [inp], np.array([2]), cfg)
    l0, r0 = total_loss(net, inp, 2, cfg)
    step = 1e-5 / (np.linalg.norm(g.flat()) + 1e-300)
    moved = net.copy()
    for p, gw in zip(moved.projections, g.weights):
        p.weights = p.weights - step * gw
    l1, r1 = total_loss(moved, inp, 2, cfg)
    assert r1.pattern() == r0.pattern()
    assert l1 < l0


def test_gradcheck_linear_regime_weights_pass_tight():
    net = random_net(w_in=(0.0, 0.01), seed=5)
    rep = gradcheck(net, random_input(10, 100, 20, seed=5), 32, seed=1, label=0, tol=1e-6)
    w_rows = [r for r in rep.rows if r.kind == "weight" and r.status != "skipped"]
    assert w_rows and all(r.status == "pass" for r in w_rows)


def test_gradcheck_zero_input_all_pass():
    net = random_net(seed=6)
    rep = gradcheck(net, np.zeros((0, 2), np.int64), 32, seed=2, label=1)
    assert rep.count("fail") == 0 and rep.count("pass") > 0


@pytest.mark.parametrize("arch", ["feedforward", "recurrent"])
def test_gradcheck_random_10_20_3(arch, tmp_path):
    net = random_net(architecture=arch, seed=21)
    rep = gradcheck(net, random_input(10, 100, 40, seed=21), 64, seed=3, label=1,
                    cfg=LossConfig(reg_strength=1e-4))
    assert rep.pass_fraction >= 0.95, rep.summary()
    rep.write_csv(tmp_path / "g.csv")
    header = (tmp_path / "g.csv").read_text().splitlines()[0]
    assert header == "coordinate,analytic,numeric,rel_error,status"
    assert "pass fraction" in rep.summary()


def _peak_backward_bytes(net, rec, seeds, cfg):
    tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    stats = BackwardStats()
    backward(net, rec, seeds, cfg, stats=stats)
    peak = tracemalloc.get_traced_memory()[1] - base
    tracemalloc.stop()
    return peak, stats.aux_bytes


def test_backward_memory_independent_of_horizon():
    cfg = LossConfig()
    out = []
    for T in (400, 800):
        net = random_net(n_in=10, hidden=(200,), n_out=3, T=T, seed=1)
        rec, tr = run_forward(net, np.zeros((0, 2), np.int64))
        _, seeds = loss_and_seed(tr, 0, cfg)
        out.append(_peak_backward_bytes(net, rec, seeds, cfg))
    (p1, a1), (p2, a2) = out
    assert a1 == a2
    assert abs(p2 - p1) <= 0.05 * p1
    # an n_neurons x n_timesteps history would be 200 * 800 * 8 bytes = 1.28 MB
    assert p2 < 200 * 800 * 8 / 4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_property_gradcheck_small_nets(seed):
    net = random_net(n_in=5, hidden=(8,), n_out=2, T=60, seed=seed,
                     architecture="recurrent" if seed % 2 else "feedforward")
    rep = gradcheck(net, random_input(5, 60, 15, seed=seed), 16, seed=seed, label=seed % 2)
    assert rep.count("fail") <= max(1, int(0.05 * (rep.count("pass") + rep.count("fail"))))
