"""Event-based exact gradients (EventProp-style backward sweep).

The backward pass is the exact reverse-mode derivative of the simulator's
continuous-timing surrogate (``simulate_batch(..., interpolate=True)``).
It walks time backwards carrying the adjoints ``lambda_V`` and
``lambda_I`` of every non-input neuron, and touches the forward pass only
through the SpikeRecord: at each recorded spike it performs one jump that
pulls postsynaptic ``lambda_I`` back through every outgoing synapse
(spikes x fan-out operations), exactly mirroring forward delivery.

Notation (per neuron, per step ``t``)::

    I(t) = beta I(t-1) + a(t)
    U(t) = alpha V(t-1) + (1 - alpha) I(t)
    V(t) = U(t)                       no spike
    V(t) = v_reset                    spike, crossing at tau = t - 1 + f
    f    = (theta - V(t-1)) / (U(t) - V(t-1))

A spike at ``tau`` deposits ``w`` at the real arrival time
``A = tau + 2 + d / dt`` split linearly over the neighbouring slots, so

    dL/dw  = (1 - r) lambda_I(k) + r lambda_I(k + 1)
    dL/dd  = w (lambda_I(k + 1) - lambda_I(k)) / dt
    dL/dtau += w (lambda_I(k + 1) - lambda_I(k))

with ``k = floor(A)``, ``r = A - k``. ``dL/dtau`` enters the neuron's own
adjoints through ``df/dU = -f / slope`` and ``df/dV(t-1) = -(1 - f) / slope``,
``slope = U(t) - V(t-1)`` being the per-step voltage rise at the crossing.

The adjoint history needed for the arrival look-ups is a ring buffer of
``max_delay_steps + 4`` slots per neuron, so backward memory does not grow
with the simulation horizon.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax

from .model import HIDDEN, NetworkSpec
from .simulate import OutputTrace, SpikeRecord, readout_scores, readout_weights, ring_length, run_forward, simulate_batch


class AdjointError(RuntimeError):
    """Non-finite adjoint or an inconsistent spike record during the backward sweep."""


@dataclass(frozen=True)
class LossConfig:
    tau_loss: float | None = None  # ms; None = full sample duration
    reg_strength: float = 0.0
    target_rate: float = 14.0  # Hz

    def __post_init__(self):
        if self.tau_loss is not None and not self.tau_loss > 0:
            raise ValueError("tau_loss must be > 0")
        if self.reg_strength < 0:
            raise ValueError("reg_strength must be >= 0")


@dataclass
class Gradients:
    weights: list[np.ndarray]
    delays: list[np.ndarray]
    loss: float = float("nan")
    reg_loss: float = 0.0

    def scaled(self, c: float) -> Gradients:
        return Gradients([c * g for g in self.weights], [c * g for g in self.delays], self.loss, self.reg_loss)

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.weights + self.delays])


@dataclass
class BackwardStats:
    jump_ops: int = 0
    spikes: int = 0
    aux_bytes: int = 0


def loss_and_seed(trace, label: int, cfg: LossConfig, dt: float | None = None):
    """Cross-entropy over readout scores and its derivative w.r.t. every output voltage.

    Returns ``(loss, seeds)`` with ``seeds`` shaped like the voltage trace.
    """
    if isinstance(trace, OutputTrace):
        v, dt = trace.voltages, trace.dt
    else:
        v = np.asarray(trace, dtype=np.float64)
        dt = 1.0 if dt is None else dt
    losses, seeds, _ = batch_loss_and_seed(v[None], np.array([label]), cfg, dt)
    return float(losses[0]), seeds[0]


def batch_loss_and_seed(voltages: np.ndarray, labels: np.ndarray, cfg: LossConfig, dt: float):
    """Vectorized loss_and_seed over a batch; returns (losses, seeds, scores)."""
    labels = np.asarray(labels, dtype=np.int64)
    B, T, K = voltages.shape
    if np.any(labels >= K) or np.any(labels < 0):
        raise ValueError(f"label outside [0, {K})")
    scores = readout_scores(voltages, cfg.tau_loss, dt)
    logp = log_softmax(scores, axis=-1)
    losses = -logp[np.arange(B), labels]
    g = softmax(scores, axis=-1)
    g[np.arange(B), labels] -= 1.0
    w = readout_weights(T, dt, cfg.tau_loss)
    seeds = g[:, None, :] * w[None, :, None]
    return losses, seeds, scores


def firing_rates(record: SpikeRecord, dt: float) -> dict[str, np.ndarray]:
    """Per-neuron rate in Hz of every hidden population."""
    duration_s = record.n_timesteps * dt * 1e-3
    counts = record.counts
    return {pid: counts[pid] / duration_s
            for pid, kind in zip(record.pop_ids, record.pop_kinds) if kind == HIDDEN}


def regularization(record: SpikeRecord, cfg: LossConfig, dt: float):
    """Firing-rate penalty ``reg_strength * sum (rate - target)^2`` over hidden neurons.

    Returns ``(reg_loss, coeffs)`` where ``coeffs[pop]`` is the derivative of
    the penalty w.r.t. each neuron's spike count. The backward pass injects
    it at every spike of that neuron.
    """
    duration_s = record.n_timesteps * dt * 1e-3
    reg = 0.0
    coeffs = {}
    for pid, rate in firing_rates(record, dt).items():
        diff = rate - cfg.target_rate
        reg += cfg.reg_strength * float(np.sum(diff**2))
        coeffs[pid] = 2.0 * cfg.reg_strength * diff / duration_s
    return reg, coeffs


def soft_spike_counts(record: SpikeRecord) -> dict[str, np.ndarray]:
    """Spike counts with each spike weighted by the fraction of the trial left after it.

    This is the smooth quantity whose gradient the regularizer jump term
    follows: pushing a spike later lowers it, as removing the spike would.
    """
    T = record.n_timesteps
    tau = record.steps - 1 + record.frac
    out = {}
    for i, (pid, kind, size) in enumerate(zip(record.pop_ids, record.pop_kinds, record.pop_sizes)):
        if kind == HIDDEN:
            sel = record.pops == i
            out[pid] = np.bincount(record.neurons[sel], weights=(T - tau[sel]) / T, minlength=size)
    return out


def backward(net: NetworkSpec, records, seeds: np.ndarray, cfg: LossConfig, *,
             stats: BackwardStats | None = None) -> Gradients:
    """Gradients of (loss + firing-rate penalty) summed over a batch.

    Only the spike records, the output seeds and the parameters are
    consumed. ``records`` is one SpikeRecord or a list of them; ``seeds``
    has shape [T, n_output] or [batch, T, n_output].
    """
    if isinstance(records, SpikeRecord):
        records = [records]
        seeds = np.asarray(seeds)[None]
    for r in records:
        if not isinstance(r, SpikeRecord):
            raise TypeError("backward consumes SpikeRecord objects only")
    seeds = np.asarray(seeds, dtype=np.float64)
    B = len(records)
    T = records[0].n_timesteps
    pops = net.populations
    out_idx = net.pop_index(net.output.id)
    if seeds.shape != (B, T, pops[out_idx].size):
        raise ValueError(f"seeds shape {seeds.shape} != {(B, T, pops[out_idx].size)}")
    dt = net.dt
    Lb = ring_length(net)
    interpolated = records[0].interpolated
    dyn = [k for k, p in enumerate(pops) if p.kind != "input"]
    hidden = {k for k, p in enumerate(pops) if p.kind == HIDDEN}
    stats = stats if stats is not None else BackwardStats()

    reg_loss = 0.0
    coeff = {k: np.zeros((B, pops[k].size)) for k in hidden}
    for b, rec in enumerate(records):
        if rec.n_timesteps != T:
            raise AdjointError("records in a batch must share n_timesteps")
        r, c = regularization(rec, cfg, dt)
        reg_loss += r
        for k in hidden:
            coeff[k][b] = c[pops[k].id]

    ev_b = np.concatenate([np.full(len(r), b, np.int64) for b, r in enumerate(records)])
    ev_t = np.concatenate([r.steps for r in records])
    ev_p = np.concatenate([r.pops for r in records])
    ev_n = np.concatenate([r.neurons for r in records])
    ev_f = np.concatenate([r.frac for r in records])
    ev_s = np.concatenate([r.slope for r in records])
    order = np.argsort(ev_t, kind="stable")
    ev_b, ev_t, ev_p, ev_n, ev_f, ev_s = (a[order] for a in (ev_b, ev_t, ev_p, ev_n, ev_f, ev_s))
    if ev_t.size and (ev_t[0] < 0 or ev_t[-1] >= T):
        raise AdjointError("spike record step outside the simulated horizon")
    stats.spikes += int(np.sum(np.isin(ev_p, list(hidden))))

    lam_ring = {k: np.zeros((B, Lb, pops[k].size)) for k in dyn}
    lam_v = {k: np.zeros((B, pops[k].size)) for k in dyn}
    lam_i_next = {k: np.zeros((B, pops[k].size)) for k in dyn}
    stats.aux_bytes = sum(a.nbytes for d in (lam_ring, lam_v, lam_i_next) for a in d.values())

    d_w = [np.zeros_like(p.weights) for p in net.projections]
    d_d = [np.zeros_like(p.delays) for p in net.projections]
    delays = [p.delays / dt for p in net.projections]
    src_of = [net.pop_index(p.source) for p in net.projections]
    tgt_of = [net.pop_index(p.target) for p in net.projections]
    out_proj = {k: [j for j in range(len(net.projections)) if src_of[j] == k] for k in range(len(pops))}

    hi = ev_t.size
    for t in range(T - 1, -1, -1):
        lo = int(np.searchsorted(ev_t, t, side="left"))
        jumps = {}
        if hi > lo:
            sb, sp, sn, sf, ss = ev_b[lo:hi], ev_p[lo:hi], ev_n[lo:hi], ev_f[lo:hi], ev_s[lo:hi]
            for q in np.unique(sp):
                sel = sp == q
                b, n, f = sb[sel], sn[sel], sf[sel]
                g_tau = np.zeros(b.size)
                offset = f if (interpolated and q in hidden) else np.zeros(b.size)
                for j in out_proj[int(q)]:
                    proj = net.projections[j]
                    p = tgt_of[j]
                    n_tgt = proj.weights.shape[1]
                    arrival = t + 1 + offset[:, None] + delays[j][n]
                    k0 = np.floor(arrival)
                    r = arrival - k0
                    k0 = k0.astype(np.int64)
                    tgt = np.arange(n_tgt)[None, :]
                    lam0 = lam_ring[p][b[:, None], k0 % Lb, tgt]
                    lam1 = lam_ring[p][b[:, None], (k0 + 1) % Lb, tgt]
                    np.add.at(d_w[j], n, (1.0 - r) * lam0 + r * lam1)
                    diff = proj.weights[n] * (lam1 - lam0)
                    if proj.delays_trainable:
                        np.add.at(d_d[j], n, diff / dt)
                    if q in hidden:
                        g_tau += diff.sum(axis=1)
                    stats.jump_ops += b.size * n_tgt
                if q in hidden:
                    g_tau -= coeff[int(q)][b, n] / T
                    jumps[int(q)] = (b, n, f, ss[sel], g_tau)
        hi = lo

        for k in dyn:
            alpha, beta = net.decays[pops[k].id]
            mu = lam_v[k]
            if k == out_idx:
                mu = mu + seeds[:, t, :]
            carry = None
            if k in jumps:
                b, n, f, slope, g_tau = jumps[k]
                if np.any(slope <= 0):
                    raise AdjointError(f"non-positive crossing slope at step {t}, population {pops[k].id!r}")
                mu = mu.copy()
                mu[b, n] = -g_tau * f / slope
                carry = -g_tau * (1.0 - f) / slope
            lam_i = beta * lam_i_next[k] + (1.0 - alpha) * mu
            lam_ring[k][:, t % Lb, :] = lam_i
            lam_i_next[k] = lam_i
            lam_v[k] = alpha * mu
            if carry is not None:
                lam_v[k][b, n] += carry
            if not np.isfinite(lam_i.sum()):
                bad = np.argwhere(~np.isfinite(lam_i))[0]
                raise AdjointError(f"non-finite adjoint at step {t}, population {pops[k].id!r}, neuron {bad[1]}")

    return Gradients(d_w, d_d, float("nan"), reg_loss)


def loss_and_gradients(net: NetworkSpec, samples, labels, cfg: LossConfig, *,
                       interpolate: bool = True, stats: BackwardStats | None = None):
    """Forward, loss and backward for one batch.

    Returns ``(gradients, records, voltages, losses)``; gradients are summed
    over the batch, ``gradients.loss`` is the summed task loss.
    """
    records, voltages = simulate_batch(net, samples, interpolate=interpolate)
    losses, seeds, _ = batch_loss_and_seed(voltages, labels, cfg, net.dt)
    grads = backward(net, records, seeds, cfg, stats=stats)
    grads.loss = float(losses.sum())
    return grads, records, voltages, losses


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckRow:
    kind: str
    projection: int
    pre: int
    post: int
    analytic: float
    numeric: float
    rel_error: float
    status: str


@dataclass
class GradcheckReport:
    rows: list[GradcheckRow] = field(default_factory=list)
    tol: float = 1e-3
    atol: float = 1e-6

    def count(self, status: str, kind: str | None = None) -> int:
        return sum(r.status == status and (kind is None or r.kind == kind) for r in self.rows)

    @property
    def pass_fraction(self) -> float:
        checked = self.count("pass") + self.count("fail")
        return 1.0 if checked == 0 else self.count("pass") / checked

    def summary(self) -> str:
        return (f"gradcheck: {self.count('pass')} pass, {self.count('fail')} fail, "
                f"{self.count('skipped')} skipped, pass fraction {self.pass_fraction:.3f} "
                f"(rtol {self.tol:g}, atol {self.atol:g})")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coordinate", "analytic", "numeric", "rel_error", "status"])
            for r in self.rows:
                w.writerow([f"{r.kind}[{r.projection}][{r.pre},{r.post}]",
                            repr(r.analytic), repr(r.numeric), repr(r.rel_error), r.status])


def _objectives(net, sample, label, cfg, coeffs, perturbations):
    """Loss + penalty + frozen-coefficient soft-count term for each perturbed parameter set.

    All perturbations run as one batched simulation whose projections carry
    a leading per-sample axis.
    """
    B = len(perturbations)
    projections = []
    for proj in net.projections:
        projections.append(type(proj)(proj.source, proj.target,
                                      np.repeat(proj.weights[None], B, axis=0),
                                      np.repeat(proj.delays[None], B, axis=0),
                                      proj.delays_trainable, proj.max_delay))
    for b, (kind, j, pre, post, value) in enumerate(perturbations):
        arr = projections[j].weights if kind == "weight" else projections[j].delays
        arr[b, pre, post] = value
    batched = NetworkSpec(net.dt, net.populations, projections, net.n_timesteps, net.decays)
    records, voltages = simulate_batch(batched, [sample] * B, interpolate=True)
    losses, _, _ = batch_loss_and_seed(voltages, np.full(B, label), cfg, net.dt)
    values = []
    for rec, loss in zip(records, losses):
        reg, _ = regularization(rec, cfg, net.dt)
        soft = soft_spike_counts(rec)
        values.append(float(loss) + reg + sum(float(np.dot(coeffs[p], soft[p])) for p in coeffs))
    return values, records


def relative_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def gradcheck(net: NetworkSpec, sample, n_coords: int = 64, seed: int = 0, *, label: int | None = None,
              cfg: LossConfig = LossConfig(), eps_weight: float = 1e-6, eps_delay: float = 1e-6,
              tol: float = 1e-3, atol: float = 1e-6, chunk_bytes: float = 64e6) -> GradcheckReport:
    """Compare backward() against central finite differences on random coordinates.

    Draws ``n_coords`` weight coordinates and ``n_coords`` trainable delay
    coordinates. A coordinate is skipped when the +-eps perturbation changes
    the spike pattern (finite differences are invalid across events) or
    would push a delay outside its allowed range.
    """
    if label is None:
        label = int(getattr(sample, "label", 0))
    rng = np.random.default_rng(seed)

    rec, trace = run_forward(net, sample, interpolate=True)
    _, seeds = loss_and_seed(trace, label, cfg)
    grads = backward(net, rec, seeds, cfg)
    _, coeffs = regularization(rec, cfg, net.dt)
    base_pattern = rec.pattern()

    def draw(kind):
        sizes = [p.weights.size if kind == "weight" or p.delays_trainable else 0 for p in net.projections]
        total = sum(sizes)
        if total == 0:
            return []
        flat = rng.choice(total, size=min(n_coords, total), replace=False)
        offsets = np.cumsum([0] + sizes)
        coords = []
        for x in np.sort(flat):
            j = int(np.searchsorted(offsets, x, side="right") - 1)
            pre, post = np.unravel_index(x - offsets[j], net.projections[j].weights.shape)
            coords.append((kind, j, int(pre), int(post)))
        return coords

    report = GradcheckReport(tol=tol, atol=atol)
    checked = []
    for kind, j, pre, post in draw("weight") + draw("delay"):
        proj = net.projections[j]
        x0 = float((proj.weights if kind == "weight" else proj.delays)[pre, post])
        eps = eps_weight if kind == "weight" else eps_delay
        analytic = float((grads.weights if kind == "weight" else grads.delays)[j][pre, post])
        if kind == "delay" and (x0 - eps < 0 or x0 + eps > proj.max_delay):
            report.rows.append(GradcheckRow(kind, j, pre, post, analytic, float("nan"), float("nan"), "skipped"))
        else:
            checked.append((kind, j, pre, post, x0, eps, analytic))

    per_chunk = max(1, int(chunk_bytes // max(1, 16 * sum(p.weights.size for p in net.projections))))
    for start in range(0, len(checked), per_chunk):
        chunk = checked[start:start + per_chunk]
        perts = []
        for kind, j, pre, post, x0, eps, _ in chunk:
            perts += [(kind, j, pre, post, x0 + eps), (kind, j, pre, post, x0 - eps)]
        values, records = _objectives(net, sample, label, cfg, coeffs, perts)
        for i, (kind, j, pre, post, x0, eps, analytic) in enumerate(chunk):
            numeric = (values[2 * i] - values[2 * i + 1]) / (2 * eps)
            err = relative_error(analytic, numeric)
            if records[2 * i].pattern() != base_pattern or records[2 * i + 1].pattern() != base_pattern:
                status = "skipped"
            elif abs(analytic - numeric) <= atol or err <= tol:
                status = "pass"
            else:
                status = "fail"
            report.rows.append(GradcheckRow(kind, j, pre, post, analytic, numeric, err, status))
    return report
