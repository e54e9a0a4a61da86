"""Lowering to int8 weights and integer delays, the HDF5 exchange file, and a fixed-point emulator.

Exchange layout (format version 1), every tensor little-endian::

    /net                     attrs: format="snndelay-exchange", version=1, dt (float64),
                             n_timesteps, n_populations, n_projections,
                             state_frac, state_bits, decay_frac, weight_bits, scale_shift
    /net/pop<i>              attrs: id, kind, size, tau_mem, tau_syn, v_th, v_reset,
                             alpha_q, beta_q, v_th_fx, v_reset_fx
    /net/proj<j>             attrs: source, target, scale (float64)
    /net/proj<j>/weights     int8   [n_source, n_target]
    /net/proj<j>/delays      uint8  [n_source, n_target], delay in timesteps
    /net/proj<j>/scale       float64 scalar (mirror of the attribute)

Input populations carry zeros for the neuron constants.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import h5py
import numpy as np

from .model import HARDWARE_MAX_DELAY_STEPS, INPUT, OUTPUT, NetworkSpec, round_half_away
from .simulate import SpikeRecord, as_events, readout_scores, simulate_batch

EXCHANGE_FORMAT = "snndelay-exchange"
EXCHANGE_VERSION = 1

# fixed-point defaults: 24-bit signed state with 12 fractional bits,
# 12-bit decay fractions, 16-bit threshold, 32-bit synaptic accumulators
STATE_FRAC = 12
STATE_BITS = 24
DECAY_FRAC = 12
WEIGHT_BITS = 8
SCALE_SHIFT = 16
THRESHOLD_BITS = 16
ACC_BITS = 32


class QuantizationError(ValueError):
    pass


class ExchangeFormatError(ValueError):
    pass


class FixedPointOverflowError(OverflowError):
    def __init__(self, what: str, step: int, population: str):
        super().__init__(f"fixed-point overflow in {what} of population {population!r} at step {step}; "
                         "rescale the model or widen the state")
        self.step = step
        self.population = population


@dataclass
class QPopulation:
    id: str
    kind: str
    size: int
    tau_mem: float = 0.0
    tau_syn: float = 0.0
    v_th: float = 0.0
    v_reset: float = 0.0
    alpha_q: int = 0
    beta_q: int = 0
    v_th_fx: int = 0
    v_reset_fx: int = 0


@dataclass
class QProjection:
    source: str
    target: str
    weights: np.ndarray  # int8
    delays: np.ndarray  # uint8, timesteps
    scale: float


@dataclass
class QuantizedModel:
    dt: float
    n_timesteps: int
    populations: list[QPopulation]
    projections: list[QProjection]
    state_frac: int = STATE_FRAC
    state_bits: int = STATE_BITS
    decay_frac: int = DECAY_FRAC
    weight_bits: int = WEIGHT_BITS
    scale_shift: int = SCALE_SHIFT
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def weight_max(self) -> int:
        return 2 ** (self.weight_bits - 1) - 1

    def population(self, pop_id: str) -> QPopulation:
        return next(p for p in self.populations if p.id == pop_id)

    def validate(self, where: str = "") -> None:
        """Re-check every invariant; errors name the offending dataset path."""
        sizes = {p.id: p.size for p in self.populations}
        if not self.dt > 0:
            raise QuantizationError(f"{where}/net: dt must be positive")
        if self.state_bits > 62 or self.state_frac >= self.state_bits:
            raise QuantizationError(f"{where}/net: unsupported state width {self.state_bits}/{self.state_frac}")
        for i, p in enumerate(self.populations):
            path = f"{where}/net/pop{i}"
            if p.kind not in (INPUT, "hidden", OUTPUT):
                raise QuantizationError(f"{path}: unknown kind {p.kind!r}")
            if p.size < 1:
                raise QuantizationError(f"{path}: size must be >= 1")
            if p.kind == INPUT:
                continue
            top = 2**self.decay_frac - 1
            if not (0 <= p.alpha_q <= top and 0 <= p.beta_q <= top):
                raise QuantizationError(f"{path}: decay factor outside [0, {top}]")
            lim = 2 ** (THRESHOLD_BITS - 1) - 1
            if not (-lim <= p.v_th_fx <= lim and -lim <= p.v_reset_fx <= lim):
                raise QuantizationError(f"{path}: threshold/reset outside {THRESHOLD_BITS}-bit range")
            if p.v_th_fx <= p.v_reset_fx:
                raise QuantizationError(f"{path}: threshold must exceed reset")
        for j, q in enumerate(self.projections):
            path = f"{where}/net/proj{j}"
            if q.source not in sizes or q.target not in sizes:
                raise QuantizationError(f"{path}: dangling population id")
            shape = (sizes[q.source], sizes[q.target])
            if q.weights.shape != shape:
                raise QuantizationError(f"{path}/weights: shape {q.weights.shape}, expected {shape}")
            if q.delays.shape != shape:
                raise QuantizationError(f"{path}/delays: shape {q.delays.shape}, expected {shape}")
            w = q.weights.astype(np.int64)
            if w.size and (w.min() < -self.weight_max or w.max() > self.weight_max):
                raise QuantizationError(f"{path}/weights: weight out of range [-{self.weight_max}, {self.weight_max}]")
            d = q.delays.astype(np.int64)
            if d.size and (d.min() < 0 or d.max() > HARDWARE_MAX_DELAY_STEPS):
                bad = np.argwhere((d < 0) | (d > HARDWARE_MAX_DELAY_STEPS))[0]
                raise QuantizationError(
                    f"{path}/delays: delay out of range at [{bad[0]}, {bad[1]}]: "
                    f"{int(d[tuple(bad)])} not in [0, {HARDWARE_MAX_DELAY_STEPS}]")
            if not (np.isfinite(q.scale) and q.scale > 0):
                raise QuantizationError(f"{path}/scale: scale must be finite and > 0")

    def multipliers(self) -> list[int]:
        """Per-projection integer factor turning summed w_q into state units (>> scale_shift)."""
        return [int(round_half_away(q.scale * 2.0 ** (self.state_frac + self.scale_shift))) for q in self.projections]

    def dequantized_weights(self) -> list[np.ndarray]:
        return [q.scale * q.weights.astype(np.float64) for q in self.projections]

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        head = ("dt", "n_timesteps", "state_frac", "state_bits", "decay_frac", "weight_bits", "scale_shift")
        if any(getattr(self, k) != getattr(other, k) for k in head):
            return False
        if self.populations != other.populations or len(self.projections) != len(other.projections):
            return False
        for a, b in zip(self.projections, other.projections):
            if (a.source, a.target) != (b.source, b.target):
                return False
            if np.float64(a.scale).tobytes() != np.float64(b.scale).tobytes():
                return False
            for x, y in ((a.weights, b.weights), (a.delays, b.delays)):
                if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
                    return False
        return True


def quantize(net: NetworkSpec, *, weight_bits: int = WEIGHT_BITS, state_frac: int = STATE_FRAC,
             state_bits: int = STATE_BITS, decay_frac: int = DECAY_FRAC,
             scale_shift: int = SCALE_SHIFT) -> QuantizedModel:
    """Per-projection symmetric weight quantization and delay rounding.

    ``weight_bits`` other than 8 is only for precision studies; such models
    cannot be exported.
    """
    wmax = 2 ** (weight_bits - 1) - 1
    wdtype = np.int8 if weight_bits <= 8 else np.int32
    pops = []
    for p in net.populations:
        if p.kind == INPUT:
            pops.append(QPopulation(p.id, p.kind, p.size))
            continue
        alpha, beta = net.decays[p.id]
        top = 2**decay_frac - 1
        n = p.neuron
        pops.append(QPopulation(
            p.id, p.kind, p.size, float(n.tau_mem), float(n.tau_syn), float(n.v_threshold), float(n.v_reset),
            int(min(round_half_away(alpha * 2**decay_frac), top)),
            int(min(round_half_away(beta * 2**decay_frac), top)),
            int(round_half_away(n.v_threshold * 2**state_frac)),
            int(round_half_away(n.v_reset * 2**state_frac))))
    projs = []
    for proj in net.projections:
        amax = float(np.max(np.abs(proj.weights))) if proj.weights.size else 0.0
        scale = amax / wmax if amax > 0 else 1.0
        wq = np.zeros(proj.weights.shape) if amax == 0 else round_half_away(proj.weights * (wmax / amax))
        wq = np.clip(wq, -wmax, wmax).astype(wdtype)
        dq = np.clip(round_half_away(proj.delays / net.dt), 0, HARDWARE_MAX_DELAY_STEPS).astype(np.uint8)
        projs.append(QProjection(proj.source, proj.target, wq, dq, float(scale)))
    model = QuantizedModel(float(net.dt), int(net.n_timesteps), pops, projs, state_frac, state_bits,
                           decay_frac, weight_bits, scale_shift)
    model.validate()
    return model


# ---------------------------------------------------------------------------
# exchange file
# ---------------------------------------------------------------------------

def export_model(model: QuantizedModel, path, *, overwrite: bool = False) -> Path:
    path = Path(path)
    if model.weight_bits != WEIGHT_BITS:
        raise QuantizationError(f"only {WEIGHT_BITS}-bit models can be exported (got {model.weight_bits})")
    model.validate()
    if path.exists() and not overwrite:
        raise FileExistsError(f"{path} exists; refusing to overwrite (use --overwrite or overwrite=True)")
    tmp = path.with_name(path.name + ".tmp")
    with h5py.File(tmp, "w") as fh:
        net = fh.create_group("net")
        for k, v in (("format", EXCHANGE_FORMAT), ("version", EXCHANGE_VERSION), ("dt", np.float64(model.dt)),
                     ("n_timesteps", model.n_timesteps), ("n_populations", len(model.populations)),
                     ("n_projections", len(model.projections)), ("state_frac", model.state_frac),
                     ("state_bits", model.state_bits), ("decay_frac", model.decay_frac),
                     ("weight_bits", model.weight_bits), ("scale_shift", model.scale_shift)):
            net.attrs[k] = v
        for i, p in enumerate(model.populations):
            g = net.create_group(f"pop{i}")
            g.attrs["id"], g.attrs["kind"], g.attrs["size"] = p.id, p.kind, p.size
            for k in ("tau_mem", "tau_syn", "v_th", "v_reset"):
                g.attrs[k] = np.float64(getattr(p, k))
            for k in ("alpha_q", "beta_q", "v_th_fx", "v_reset_fx"):
                g.attrs[k] = np.int64(getattr(p, k))
        for j, q in enumerate(model.projections):
            g = net.create_group(f"proj{j}")
            g.attrs["source"], g.attrs["target"] = q.source, q.target
            g.attrs["scale"] = np.float64(q.scale)
            g.create_dataset("weights", data=q.weights.astype("<i1"))
            g.create_dataset("delays", data=q.delays.astype("<u1"))
            g.create_dataset("scale", data=np.float64(q.scale))
    os.replace(tmp, path)
    return path


def _attr(node, key, path):
    if key not in node.attrs:
        raise ExchangeFormatError(f"{path}: missing attribute {key!r}")
    v = node.attrs[key]
    return v.decode() if isinstance(v, bytes) else v


def import_model(path) -> QuantizedModel:
    """Read and fully re-validate an exchange file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"exchange file not found: {path}")
    try:
        fh = h5py.File(path, "r")
    except OSError as exc:
        raise ExchangeFormatError(f"{path}: not a readable exchange file ({exc})") from exc
    with fh:
        if "net" not in fh:
            raise ExchangeFormatError(f"{path}: missing group '/net'")
        net = fh["net"]
        if _attr(net, "format", "/net") != EXCHANGE_FORMAT:
            raise ExchangeFormatError(f"/net: not a {EXCHANGE_FORMAT} file")
        version = int(_attr(net, "version", "/net"))
        if version != EXCHANGE_VERSION:
            raise ExchangeFormatError(f"/net: unsupported format version {version} (supported: {EXCHANGE_VERSION})")
        try:
            pops = []
            for i in range(int(_attr(net, "n_populations", "/net"))):
                gp = f"/net/pop{i}"
                if gp not in fh:
                    raise ExchangeFormatError(f"{gp}: missing group")
                g = fh[gp]
                pops.append(QPopulation(
                    str(_attr(g, "id", gp)), str(_attr(g, "kind", gp)), int(_attr(g, "size", gp)),
                    *(float(_attr(g, k, gp)) for k in ("tau_mem", "tau_syn", "v_th", "v_reset")),
                    *(int(_attr(g, k, gp)) for k in ("alpha_q", "beta_q", "v_th_fx", "v_reset_fx"))))
            projs = []
            for j in range(int(_attr(net, "n_projections", "/net"))):
                gp = f"/net/proj{j}"
                if gp not in fh:
                    raise ExchangeFormatError(f"{gp}: missing group")
                g = fh[gp]
                arrays = {}
                for name, dtype in (("weights", np.int8), ("delays", np.uint8)):
                    if name not in g:
                        raise ExchangeFormatError(f"{gp}/{name}: missing dataset")
                    ds = g[name]
                    if ds.dtype != dtype:
                        raise ExchangeFormatError(f"{gp}/{name}: dtype {ds.dtype}, expected {np.dtype(dtype)}")
                    arrays[name] = np.ascontiguousarray(ds[()]).astype(dtype)
                if "scale" not in g:
                    raise ExchangeFormatError(f"{gp}/scale: missing dataset")
                scale = float(g["scale"][()])
                projs.append(QProjection(str(_attr(g, "source", gp)), str(_attr(g, "target", gp)),
                                         arrays["weights"], arrays["delays"], scale))
            model = QuantizedModel(float(_attr(net, "dt", "/net")), int(_attr(net, "n_timesteps", "/net")), pops, projs,
                                   *(int(_attr(net, k, "/net")) for k in
                                     ("state_frac", "state_bits", "decay_frac", "weight_bits", "scale_shift")))
        except (OSError, KeyError, TypeError) as exc:
            raise ExchangeFormatError(f"{path}: corrupt exchange file ({exc})") from exc
    if model.weight_bits != WEIGHT_BITS:
        raise ExchangeFormatError(f"/net: weight_bits {model.weight_bits} != {WEIGHT_BITS}")
    model.validate()
    model.meta["source"] = str(path)
    return model


# ---------------------------------------------------------------------------
# fixed-point emulator
# ---------------------------------------------------------------------------

def rshift_round(x: np.ndarray, n: int) -> np.ndarray:
    """Integer ``x / 2**n`` rounded half away from zero."""
    if n == 0:
        return x
    mag = (np.abs(x) + (1 << (n - 1))) >> n
    return np.where(x < 0, -mag, mag)


@dataclass
class EmulatorResult:
    records: list[SpikeRecord]
    voltages: np.ndarray  # dequantized output voltages [B, T, K]
    predictions: np.ndarray
    state_trace: np.ndarray | None = None  # integer output voltages [B, T, K]


def emulate_fixed_point(model: QuantizedModel, inputs, n_timesteps: int | None = None, *,
                        tau_loss: float | None = None, counters: dict | None = None) -> EmulatorResult:
    """Pure-integer forward pass over a batch of samples.

    Weights are summed as int32 in per-projection integer ring buffers, then
    converted to state units with one integer multiply-and-shift. Decay is a
    12-bit multiply with rounding right shift. Any accumulator or state
    leaving its width raises FixedPointOverflowError.
    """
    T = int(n_timesteps or model.n_timesteps)
    B = len(inputs)
    pops = model.populations
    idx = {p.id: k for k, p in enumerate(pops)}
    in_k = next(k for k, p in enumerate(pops) if p.kind == INPUT)
    out_k = next(k for k, p in enumerate(pops) if p.kind == OUTPUT)
    D = HARDWARE_MAX_DELAY_STEPS
    L = D + 2
    S, F = model.state_frac, model.decay_frac
    one = 1 << F
    smax = (1 << (model.state_bits - 1)) - 1
    amax = (1 << (ACC_BITS - 1)) - 1

    ev = [as_events(x) for x in inputs]
    for b, e in enumerate(ev):
        if e.size and (e[:, 0].min() < 0 or e[:, 0].max() >= T):
            raise ValueError(f"sample {b}: input timestep outside [0, {T})")
        if e.size and (e[:, 1].min() < 0 or e[:, 1].max() >= pops[in_k].size):
            raise ValueError(f"sample {b}: input channel outside [0, {pops[in_k].size})")
    in_b = np.concatenate([np.full(len(e), b, np.int64) for b, e in enumerate(ev)]) if B else np.zeros(0, np.int64)
    in_all = np.concatenate(ev) if B else np.zeros((0, 2), np.int64)
    order = np.argsort(in_all[:, 0], kind="stable")
    in_b, in_t, in_n = in_b[order], in_all[order, 0], in_all[order, 1]
    bounds = np.searchsorted(in_t, np.arange(T + 1))

    dyn = [k for k, p in enumerate(pops) if p.kind != INPUT]
    mult = model.multipliers()
    W = [q.weights.astype(np.int64) for q in model.projections]
    Dl = [q.delays.astype(np.int64) for q in model.projections]
    src_of = [idx[q.source] for q in model.projections]
    tgt_of = [idx[q.target] for q in model.projections]
    rings = [np.zeros((B, L, pops[tgt_of[j]].size), np.int64) for j in range(len(model.projections))]
    into = {k: [j for j in range(len(model.projections)) if tgt_of[j] == k] for k in dyn}
    V = {k: np.zeros((B, pops[k].size), np.int64) for k in dyn}
    I = {k: np.zeros((B, pops[k].size), np.int64) for k in dyn}
    vout = np.zeros((B, T, pops[out_k].size), np.int64)
    rec = []
    n_syn = 0
    for t in range(T):
        slot = t % L
        lo, hi = bounds[t], bounds[t + 1]
        fired = {in_k: (in_b[lo:hi], in_n[lo:hi])}
        if hi > lo:
            rec.append((in_b[lo:hi], np.full(hi - lo, t), np.full(hi - lo, in_k), in_n[lo:hi]))
        for k in dyn:
            p = pops[k]
            a = np.zeros((B, p.size), np.int64)
            for j in into[k]:
                acc = rings[j][:, slot, :]
                if np.any(np.abs(acc) > amax):
                    raise FixedPointOverflowError("synaptic accumulator", t, p.id)
                a += rshift_round(acc * mult[j], model.scale_shift)
                rings[j][:, slot, :] = 0
            i_new = rshift_round(p.beta_q * I[k], F) + a
            v_new = rshift_round(p.alpha_q * V[k] + (one - p.alpha_q) * i_new, F)
            if np.any(np.abs(i_new) > smax):
                raise FixedPointOverflowError("synaptic current", t, p.id)
            if np.any(np.abs(v_new) > smax):
                raise FixedPointOverflowError("membrane voltage", t, p.id)
            if p.kind != OUTPUT:
                spk = v_new >= p.v_th_fx
                v_new = np.where(spk, p.v_reset_fx, v_new)
                b, n = np.nonzero(spk)
                if b.size:
                    rec.append((b, np.full(b.size, t), np.full(b.size, k), n))
                    fired[k] = (b, n)
            else:
                vout[:, t, :] = v_new
            V[k], I[k] = v_new, i_new
        for j in range(len(model.projections)):
            spk = fired.get(src_of[j])
            if spk is None or spk[0].size == 0:
                continue
            b, n = spk
            arrive = (t + 1 + Dl[j][n]) % L
            tgt = np.arange(W[j].shape[1])[None, :]
            np.add.at(rings[j], (b[:, None], arrive, tgt), W[j][n])
            n_syn += b.size * W[j].shape[1]

    if counters is not None:
        counters["synaptic_events"] = counters.get("synaptic_events", 0) + n_syn
        counters["neuron_updates"] = counters.get("neuron_updates", 0) + B * T * sum(
            pops[k].size for k in dyn if pops[k].kind == "hidden")
        counters["output_updates"] = counters.get("output_updates", 0) + B * T * sum(
            pops[k].size for k in dyn if pops[k].kind != "hidden")

    meta = (tuple(p.id for p in pops), tuple(p.kind for p in pops), tuple(p.size for p in pops))
    cols = [np.concatenate(c) for c in zip(*rec)] if rec else [np.zeros(0, np.int64)] * 4
    b, ts, ps, ns = cols
    order = np.lexsort((ns, ps, ts, b))
    b, ts, ps, ns = (c[order].astype(np.int64) for c in (b, ts, ps, ns))
    cuts = np.searchsorted(b, np.arange(B + 1))
    records = []
    for s in range(B):
        sel = slice(cuts[s], cuts[s + 1])
        z = np.zeros(cuts[s + 1] - cuts[s])
        records.append(SpikeRecord(ts[sel], ps[sel], ns[sel], z, z.copy(), *meta, T, False))
    volts = vout.astype(np.float64) / 2.0**S
    preds = np.argmax(readout_scores(volts, tau_loss, model.dt), axis=-1) if B else np.zeros(0, np.int64)
    return EmulatorResult(records, volts, preds, vout)


def emulate_predict(model: QuantizedModel, samples, tau_loss=None, batch_size: int = 64) -> np.ndarray:
    out = [emulate_fixed_point(model, samples[s:s + batch_size], tau_loss=tau_loss).predictions
           for s in range(0, len(samples), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


# ---------------------------------------------------------------------------
# parity
# ---------------------------------------------------------------------------

@dataclass
class ParityReport:
    labels: np.ndarray
    pred_a: np.ndarray
    pred_b: np.ndarray
    name_a: str = "float"
    name_b: str = "quantized"

    @property
    def agreement(self) -> float:
        return float(np.mean(self.pred_a == self.pred_b)) if len(self.labels) else 1.0

    @property
    def accuracy_a(self) -> float:
        return float(np.mean(self.pred_a == self.labels)) if len(self.labels) else 0.0

    @property
    def accuracy_b(self) -> float:
        return float(np.mean(self.pred_b == self.labels)) if len(self.labels) else 0.0

    @property
    def disagreements(self) -> list[tuple[int, int, int, int]]:
        """(sample index, label, prediction a, prediction b) where the two paths differ."""
        return [(int(i), int(self.labels[i]), int(self.pred_a[i]), int(self.pred_b[i]))
                for i in np.flatnonzero(self.pred_a != self.pred_b)]

    def summary(self) -> str:
        return (f"n={len(self.labels)} accuracy_{self.name_a}={self.accuracy_a:.4f} "
                f"accuracy_{self.name_b}={self.accuracy_b:.4f} agreement={self.agreement:.4f} "
                f"disagreements={len(self.disagreements)}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "label", f"pred_{self.name_a}", f"pred_{self.name_b}", "agree"])
            for i, (y, a, b) in enumerate(zip(self.labels, self.pred_a, self.pred_b)):
                w.writerow([i, int(y), int(a), int(b), int(a == b)])


def parity_report(reference, model: QuantizedModel, samples, labels, *, tau_loss=None,
                  batch_size: int = 64) -> ParityReport:
    """Compare predictions of ``reference`` (a float NetworkSpec or another QuantizedModel) with ``model``."""
    labels = np.asarray(labels, dtype=np.int64)
    if isinstance(reference, QuantizedModel):
        pred_a, name_a = emulate_predict(reference, samples, tau_loss, batch_size), "reference"
    else:
        parts = []
        for s in range(0, len(samples), batch_size):
            _, v = simulate_batch(reference, samples[s:s + batch_size])
            parts.append(np.argmax(readout_scores(v, tau_loss, reference.dt), axis=-1))
        pred_a, name_a = (np.concatenate(parts) if parts else np.zeros(0, np.int64)), "float"
    pred_b = emulate_predict(model, samples, tau_loss, batch_size)
    return ParityReport(labels, pred_a, pred_b, name_a, "quantized")


__all__ = [
    "EmulatorResult", "ExchangeFormatError", "FixedPointOverflowError", "ParityReport",
    "QPopulation", "QProjection", "QuantizationError", "QuantizedModel", "emulate_fixed_point",
    "emulate_predict", "export_model", "import_model", "parity_report", "quantize", "rshift_round",
]
