"""Clock-driven forward simulation of delayed LIF networks.

Update order within one timestep ``t``:

1. consume the ring-buffer slot for ``t`` (summed arriving weight)
2. synaptic current ``I <- beta * I + arrivals``
3. membrane ``V <- alpha * V + (1 - alpha) * I``
4. threshold (hidden populations only), reset to ``v_reset``
5. enqueue outgoing spikes at ``t + 1 + delay_steps``

With ``interpolate=True`` the simulator runs its continuous-timing surrogate:
a hidden spike emitted at step ``t`` carries the sub-step position ``f`` of
its threshold crossing (linear interpolation of V between the two grid
points) and every arrival is placed at the real-valued time
``t + 1 + f + d / dt``, split linearly between the two neighbouring slots.
Spike times and delays then enter the loss smoothly, which is what the
event-based backward pass differentiates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .model import INPUT, OUTPUT, NetworkSpec, round_half_away


class DivergenceError(RuntimeError):
    """Non-finite neuron state; aborts the sample (or batch)."""

    def __init__(self, step: int, population: str):
        super().__init__(f"non-finite state in population {population!r} at step {step}")
        self.step = step
        self.population = population


@dataclass
class SpikeRecord:
    """Every spike emitted during one forward pass, plus state at spike times.

    ``frac`` is the sub-step threshold-crossing position in (0, 1] and
    ``slope`` the per-step voltage increase across the crossing; both are
    zero for input events. Nothing else of the hidden state survives the
    forward pass.
    """

    steps: np.ndarray
    pops: np.ndarray
    neurons: np.ndarray
    frac: np.ndarray
    slope: np.ndarray
    pop_ids: tuple[str, ...]
    pop_kinds: tuple[str, ...]
    pop_sizes: tuple[int, ...]
    n_timesteps: int
    interpolated: bool = False

    def __len__(self) -> int:
        return int(self.steps.size)

    @property
    def events(self) -> list[tuple[int, str, int]]:
        return [(int(t), self.pop_ids[p], int(n)) for t, p, n in zip(self.steps, self.pops, self.neurons)]

    @property
    def counts(self) -> dict[str, np.ndarray]:
        return {
            pid: np.bincount(self.neurons[self.pops == i], minlength=size)
            for i, (pid, size) in enumerate(zip(self.pop_ids, self.pop_sizes))
        }

    def pattern(self) -> tuple[bytes, bytes, bytes]:
        """Hashable identity of the spike pattern (which neuron fired at which step)."""
        return self.steps.tobytes(), self.pops.tobytes(), self.neurons.tobytes()

    def shifted(self, k: int) -> SpikeRecord:
        return SpikeRecord(self.steps + k, self.pops, self.neurons, self.frac, self.slope,
                           self.pop_ids, self.pop_kinds, self.pop_sizes, self.n_timesteps, self.interpolated)


@dataclass
class OutputTrace:
    voltages: np.ndarray  # [n_timesteps, n_output]
    dt: float = 1.0


@dataclass
class DelayRingBuffer:
    """Per-target circular accumulator of future synaptic input.

    Slot ``k % n_slots`` holds the summed weight arriving at step ``k``.
    The counters let tests check that nothing is lost or delivered twice.
    """

    batch: int
    n_slots: int
    n_neurons: int
    dtype: type = np.float64
    track: bool = True
    slots: np.ndarray = field(init=False)
    enqueued: float = field(init=False, default=0.0)
    enqueued_abs: float = field(init=False, default=0.0)
    consumed: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.slots = np.zeros((self.batch, self.n_slots, self.n_neurons), dtype=self.dtype)

    def add(self, flat: np.ndarray, values: np.ndarray) -> None:
        """Accumulate ``values`` at flat (sample, slot, neuron) indices; see ``index``."""
        np.add.at(self.slots.reshape(-1), flat.ravel(), values.ravel())
        if self.track:
            self.enqueued += float(values.sum())
            self.enqueued_abs += float(np.abs(values).sum())

    def index(self, sample: np.ndarray, step: np.ndarray, neuron: np.ndarray) -> np.ndarray:
        return (sample * self.n_slots + step % self.n_slots) * self.n_neurons + neuron

    def consume(self, step: int) -> np.ndarray:
        k = step % self.n_slots
        out = self.slots[:, k, :].copy()
        self.slots[:, k, :] = 0
        if self.track:
            self.consumed += float(out.sum())
        return out

    @property
    def pending(self) -> float:
        return float(self.slots.sum())


def ring_length(net: NetworkSpec) -> int:
    # latest arrival is t + 3 + D (interpolated split); one spare slot
    return net.max_delay_steps + 4


class LIFStep(NamedTuple):
    v: np.ndarray
    i: np.ndarray
    fired: np.ndarray
    v_pre: np.ndarray


def lif_step(v, i, arrivals, alpha, beta, v_threshold, v_reset, spiking=True) -> LIFStep:
    """Advance LIF state by one step; threshold is tested after the membrane update."""
    i_new = beta * i + arrivals
    v_pre = alpha * v + (1.0 - alpha) * i_new
    if spiking:
        fired = v_pre >= v_threshold
        v_new = np.where(fired, v_reset, v_pre)
    else:
        fired = np.zeros(np.shape(v_pre), dtype=bool)
        v_new = v_pre
    return LIFStep(v_new, i_new, fired, v_pre)


def delay_steps(delays_ms: np.ndarray, dt: float, max_steps: int) -> np.ndarray:
    """Integer delivery delay per synapse: round(d / dt) clamped to [0, max_steps]."""
    return np.clip(round_half_away(delays_ms / dt), 0, max_steps).astype(np.int64)


def deliver(buffer: DelayRingBuffer, step: int, sample: np.ndarray, neuron: np.ndarray,
            weights: np.ndarray, delays: np.ndarray, offset: np.ndarray | None = None) -> None:
    """Route spikes of presynaptic ``neuron`` (one entry per spike) into ``buffer``.

    ``delays`` are in steps. Integer delays land at ``step + 1 + d``. Real
    delays (or a per-spike ``offset``) are split linearly between the two
    slots around the real-valued arrival time. Parameter arrays with a
    leading batch axis hold per-sample parameters.
    """
    if sample.size == 0:
        return
    if weights.ndim == 3:
        w = weights[sample, neuron]
    else:
        w = weights[neuron]
    d = delays[sample, neuron] if delays.ndim == 3 else delays[neuron]
    tgt = np.arange(w.shape[1])[None, :]
    smp = sample[:, None]
    if offset is None and np.issubdtype(d.dtype, np.integer):
        buffer.add(buffer.index(smp, step + 1 + d, tgt), w)
        return
    arrival = step + 1 + d + (0.0 if offset is None else offset[:, None])
    k0 = np.floor(arrival)
    r = arrival - k0
    k0 = k0.astype(np.int64)
    flat = np.concatenate([buffer.index(smp, k0, tgt).ravel(), buffer.index(smp, k0 + 1, tgt).ravel()])
    buffer.add(flat, np.concatenate([(w * (1.0 - r)).ravel(), (w * r).ravel()]))


def as_events(x) -> np.ndarray:
    """(n, 2) integer array of (timestep, channel) from a sample-like object."""
    if hasattr(x, "spikes"):
        x = x.spikes
    arr = np.asarray(x, dtype=np.int64)
    return arr.reshape(-1, 2)


def simulate_batch(net: NetworkSpec, inputs, n_timesteps: int | None = None, *,
                   interpolate: bool = False, counters: dict | None = None):
    """Run ``len(inputs)`` independent samples in lock-step.

    Returns ``(records, voltages)`` with one SpikeRecord per sample and
    output voltages of shape [batch, n_timesteps, n_output].
    """
    T = int(n_timesteps or net.n_timesteps)
    B = len(inputs)
    pops = net.populations
    in_idx = next(k for k, p in enumerate(pops) if p.kind == INPUT)
    out_idx = next(k for k, p in enumerate(pops) if p.kind == OUTPUT)
    L = ring_length(net)
    D = net.max_delay_steps

    ev = [as_events(x) for x in inputs]
    for b, e in enumerate(ev):
        if e.size and (e[:, 0].min() < 0 or e[:, 0].max() >= T):
            raise ValueError(f"sample {b}: input timestep outside [0, {T})")
        if e.size and (e[:, 1].min() < 0 or e[:, 1].max() >= pops[in_idx].size):
            raise ValueError(f"sample {b}: input channel outside [0, {pops[in_idx].size})")
    in_b = np.concatenate([np.full(len(e), b) for b, e in enumerate(ev)]) if B else np.zeros(0, np.int64)
    in_all = np.concatenate(ev) if B else np.zeros((0, 2), np.int64)
    order = np.argsort(in_all[:, 0], kind="stable")
    in_b, in_t, in_n = in_b[order].astype(np.int64), in_all[order, 0], in_all[order, 1]
    bounds = np.searchsorted(in_t, np.arange(T + 1))

    dyn = [k for k, p in enumerate(pops) if p.kind != INPUT]
    rings = {k: DelayRingBuffer(B, L, pops[k].size, track=counters is not None) for k in dyn}
    V = {k: np.full((B, pops[k].size), 0.0) for k in dyn}
    I = {k: np.zeros((B, pops[k].size)) for k in dyn}
    voltages = np.zeros((B, T, pops[out_idx].size))
    src_of = [net.pop_index(p.source) for p in net.projections]
    tgt_of = [net.pop_index(p.target) for p in net.projections]
    if interpolate:
        pdelays = [p.delays / net.dt for p in net.projections]
    else:
        pdelays = [delay_steps(p.delays, net.dt, D) for p in net.projections]

    rec = []
    n_syn = 0
    for t in range(T):
        lo, hi = bounds[t], bounds[t + 1]
        fired = {in_idx: (in_b[lo:hi], in_n[lo:hi], None)}
        if hi > lo:
            z = np.zeros(hi - lo)
            rec.append((in_b[lo:hi], np.full(hi - lo, t), np.full(hi - lo, in_idx), in_n[lo:hi], z, z))
        for k in dyn:
            pop = pops[k]
            alpha, beta = net.decays[pop.id]
            v_old = V[k]
            st = lif_step(v_old, I[k], rings[k].consume(t), alpha, beta,
                          pop.neuron.v_threshold, pop.neuron.v_reset, pop.spiking)
            if not np.isfinite(st.v_pre.sum()):
                raise DivergenceError(t, pop.id)
            V[k], I[k] = st.v, st.i
            if k == out_idx:
                voltages[:, t, :] = st.v
            if pop.spiking:
                b, n = np.nonzero(st.fired)
                if b.size:
                    slope = st.v_pre[b, n] - v_old[b, n]
                    frac = (pop.neuron.v_threshold - v_old[b, n]) / slope
                    rec.append((b, np.full(b.size, t), np.full(b.size, k), n, frac, slope))
                    fired[k] = (b, n, frac if interpolate else None)
        for j, proj in enumerate(net.projections):
            spk = fired.get(src_of[j])
            if spk is None or spk[0].size == 0:
                continue
            b, n, frac = spk
            deliver(rings[tgt_of[j]], t, b, n, proj.weights, pdelays[j], frac)
            n_syn += b.size * proj.weights.shape[-1]

    if counters is not None:
        counters["synaptic_events"] = counters.get("synaptic_events", 0) + n_syn
        counters["neuron_updates"] = counters.get("neuron_updates", 0) + B * T * sum(
            pops[k].size for k in dyn if pops[k].kind == "hidden")
        counters["output_updates"] = counters.get("output_updates", 0) + B * T * sum(
            pops[k].size for k in dyn if pops[k].kind != "hidden")
        counters["enqueued"] = counters.get("enqueued", 0.0) + sum(r.enqueued for r in rings.values())
        counters["enqueued_abs"] = counters.get("enqueued_abs", 0.0) + sum(r.enqueued_abs for r in rings.values())
        counters["consumed"] = counters.get("consumed", 0.0) + sum(r.consumed for r in rings.values())
        counters["pending"] = counters.get("pending", 0.0) + sum(r.pending for r in rings.values())

    meta = (tuple(p.id for p in pops), tuple(p.kind for p in pops), tuple(p.size for p in pops))
    if rec:
        cols = [np.concatenate(c) for c in zip(*rec)]
    else:
        cols = [np.zeros(0, np.int64)] * 4 + [np.zeros(0)] * 2
    b, ts, ps, ns, fr, sl = cols
    order = np.lexsort((ns, ps, ts, b))
    b, ts, ps, ns, fr, sl = (c[order] for c in (b, ts, ps, ns, fr, sl))
    cuts = np.searchsorted(b, np.arange(B + 1))
    records = []
    for s in range(B):
        sel = slice(cuts[s], cuts[s + 1])
        records.append(SpikeRecord(ts[sel].astype(np.int64), ps[sel].astype(np.int64), ns[sel].astype(np.int64),
                                   fr[sel].astype(np.float64), sl[sel].astype(np.float64),
                                   *meta, T, interpolate))
    return records, voltages


def run_forward(net: NetworkSpec, input_spikes, n_timesteps: int | None = None, *,
                interpolate: bool = False) -> tuple[SpikeRecord, OutputTrace]:
    records, voltages = simulate_batch(net, [input_spikes], n_timesteps, interpolate=interpolate)
    return records[0], OutputTrace(voltages[0], net.dt)


def readout_weights(n_timesteps: int, dt: float, tau_loss: float | None) -> np.ndarray:
    tau = n_timesteps * dt if tau_loss is None else tau_loss
    return np.exp(-np.arange(n_timesteps) * dt / tau) * dt


def readout_scores(trace, tau_loss: float | None = None, dt: float | None = None) -> np.ndarray:
    """Exponentially weighted voltage integral per output neuron.

    Accepts an OutputTrace or a voltage array of shape [..., T, n_output].
    ``tau_loss`` defaults to the full sample duration.
    """
    if isinstance(trace, OutputTrace):
        v, dt = trace.voltages, trace.dt if dt is None else dt
    else:
        v = np.asarray(trace, dtype=np.float64)
        dt = 1.0 if dt is None else dt
    w = readout_weights(v.shape[-2], dt, tau_loss)
    return np.einsum("...tk,t->...k", v, w)


def write_raster(record: SpikeRecord, path) -> None:
    with open(path, "w") as fh:
        for t, pop, n in record.events:
            fh.write(f"{t}\t{pop}\t{n}\n")


def write_trace_csv(trace: OutputTrace, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_ms"] + [f"v{k}" for k in range(trace.voltages.shape[1])])
        for t, row in enumerate(trace.voltages):
            w.writerow([t * trace.dt] + [repr(float(x)) for x in row])
