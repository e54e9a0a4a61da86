import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from snndelay.model import InitConfig, init_parameters, make_network  # noqa: E402


def random_net(n_in=10, hidden=(20,), n_out=3, *, architecture="feedforward", T=100, seed=0,
               w_in=(0.6, 0.6), w_rec=(0.0, 0.2), w_out=(0.0, 0.5), delay_high=20.0, max_delay=None):
    net = make_network(n_in, list(hidden), n_out, architecture=architecture, n_timesteps=T, max_delay=max_delay)
    cfgs = []
    for p in net.projections:
        if p.source == p.target:
            cfgs.append(InitConfig(*w_rec, 0.0, min(delay_high, p.max_delay), seed))
        elif p.target == "output":
            cfgs.append(InitConfig(*w_out, 0.0, min(delay_high, p.max_delay), seed))
        else:
            cfgs.append(InitConfig(*w_in, 0.0, min(delay_high, p.max_delay), seed))
    return init_parameters(net, cfgs)


def random_input(n_in, T, n_spikes, seed=0, t_max=None):
    rng = np.random.default_rng(seed)
    t = rng.integers(0, t_max or T // 2, n_spikes)
    c = rng.integers(0, n_in, n_spikes)
    ev = np.unique(np.stack([t, c], axis=1), axis=0)
    return ev[np.lexsort((ev[:, 1], ev[:, 0]))]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_qmodel(seed, n_in=None, n_hidden=None, n_out=None):
    """A valid QuantizedModel with random shapes, int8 weights, delays and decays."""
    from snndelay.quantize import QPopulation, QProjection, QuantizedModel
    rng = np.random.default_rng(seed)
    n_in = n_in or int(rng.integers(1, 12))
    n_hidden = n_hidden or int(rng.integers(1, 16))
    n_out = n_out or int(rng.integers(1, 6))

    def neuron(pid, kind, size):
        th = int(rng.integers(1, 8000))
        return QPopulation(pid, kind, size, float(rng.uniform(2, 40)), float(rng.uniform(1, 10)), th / 4096, 0.0,
                           int(rng.integers(0, 4096)), int(rng.integers(0, 4096)), th, 0)

    pops = [QPopulation("in", "input", n_in), neuron("h", "hidden", n_hidden), neuron("out", "output", n_out)]
    projs = []
    for src, tgt in [("in", "h"), ("h", "h"), ("h", "out")][: 2 + int(rng.integers(0, 2))]:
        shape = ({"in": n_in, "h": n_hidden}[src], {"h": n_hidden, "out": n_out}[tgt])
        projs.append(QProjection(src, tgt, rng.integers(-127, 128, shape).astype(np.int8),
                                 rng.integers(0, 63, shape).astype(np.uint8), float(rng.uniform(1e-4, 0.05))))
    if len(projs) == 2:
        projs = [projs[0], QProjection("h", "out", rng.integers(-127, 128, (n_hidden, n_out)).astype(np.int8),
                                       rng.integers(0, 63, (n_hidden, n_out)).astype(np.uint8),
                                       float(rng.uniform(1e-4, 0.05)))]
    model = QuantizedModel(float(rng.choice([0.5, 1.0, 2.0])), int(rng.integers(10, 80)), pops, projs)
    model.validate()
    return model


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
