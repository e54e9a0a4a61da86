"""Mini-batch training with Adam, evaluation, cross-validation and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import h5py
import numpy as np

from .eventprop import AdjointError, BackwardStats, Gradients, LossConfig, backward, batch_loss_and_seed, firing_rates
from .model import NetworkSpec, NeuronParams, Population, ProjectionSpec, build_network
from .simulate import DivergenceError, readout_scores, simulate_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "snndelay-checkpoint"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ["epoch", "loss", "reg_loss", "train_acc", "val_acc", "mean_rate_hz", "wallclock"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, batch: int, cause: Exception):
        super().__init__(f"training diverged in batch {batch}: {cause}")
        self.batch = batch


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_weights: float = 1e-3
    lr_delays: float = 1e-1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None
    clamp_delays: bool = True
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    eval_every: int = 1
    # train on the continuous-timing surrogate forward pass (exact gradients)
    interpolate: bool = True
    threads: int = 1

    def __post_init__(self):
        if not (self.lr_weights >= 0 and self.lr_delays >= 0):
            raise ValueError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)


@dataclass
class TrainState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    epoch: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    history: list[dict] = field(default_factory=list)

    @classmethod
    def fresh(cls, net: NetworkSpec, seed: int) -> TrainState:
        params = _trainable(net)
        return cls([np.zeros_like(p) for _, p, _ in params], [np.zeros_like(p) for _, p, _ in params],
                   rng=np.random.default_rng(seed))


def _trainable(net: NetworkSpec):
    """(name, array, kind) for every trainable tensor, in a fixed order."""
    out = [(f"w{j}", p.weights, "weight") for j, p in enumerate(net.projections)]
    out += [(f"d{j}", p.delays, "delay") for j, p in enumerate(net.projections) if p.delays_trainable]
    return out


def _grad_list(net: NetworkSpec, grads: Gradients) -> list[np.ndarray]:
    out = list(grads.weights)
    out += [g for g, p in zip(grads.delays, net.projections) if p.delays_trainable]
    return out


def adam_step(params, grads, moments, cfg: TrainConfig, t: int, *, lrs=None, bounds=None):
    """One bias-corrected Adam update.

    ``moments`` is ``(m, v)``; ``t`` the 1-based step count. ``lrs`` and
    ``bounds`` optionally give a learning rate and a (lo, hi) clamp per
    tensor. Returns ``(params, (m, v))`` without mutating the inputs.
    """
    m_list, v_list = moments
    lrs = lrs or [cfg.lr_weights] * len(params)
    bounds = bounds or [None] * len(params)
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"tensor {i}: {int(np.sum(~np.isfinite(g)))} non-finite gradient entries")
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for p, g, m, v, lr, bd in zip(params, grads, m_list, v_list, lrs, bounds):
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        p = p - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if bd is not None:
            p = np.clip(p, bd[0], bd[1])
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    return new_p, (new_m, new_v)


def clip_global_norm(grads: list[np.ndarray], max_norm: float | None) -> list[np.ndarray]:
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= max_norm or norm == 0:
        return grads
    return [g * (max_norm / norm) for g in grads]


def apply_gradients(net: NetworkSpec, grads: Gradients, state: TrainState, cfg: TrainConfig) -> NetworkSpec:
    """Adam on every trainable tensor; delays are clamped to [0, max_delay]."""
    named = _trainable(net)
    params = [p for _, p, _ in named]
    g = clip_global_norm(_grad_list(net, grads), cfg.grad_clip)
    lrs, bounds = [], []
    for (name, _, kind) in named:
        if kind == "weight":
            lrs.append(cfg.lr_weights)
            bounds.append(None)
        else:
            proj = net.projections[int(name[1:])]
            lrs.append(cfg.lr_delays)
            bounds.append((0.0, proj.max_delay) if cfg.clamp_delays else (0.0, np.inf))
    state.step += 1
    new_params, (state.m, state.v) = adam_step(params, g, (state.m, state.v), cfg, state.step, lrs=lrs, bounds=bounds)
    out = NetworkSpec(net.dt, net.populations, list(net.projections), net.n_timesteps, net.decays)
    for (name, _, kind), value in zip(named, new_params):
        j = int(name[1:])
        proj = out.projections[j]
        if kind == "weight":
            out.projections[j] = ProjectionSpec(proj.source, proj.target, value, proj.delays, proj.delays_trainable, proj.max_delay)
        else:
            out.projections[j] = ProjectionSpec(proj.source, proj.target, proj.weights, value, proj.delays_trainable, proj.max_delay)
    return out


def _batch_gradients(net, samples, labels, cfg: TrainConfig):
    """Forward + backward over one mini-batch, optionally split over threads.

    Chunk results are reduced in chunk order, so the sum does not depend on
    thread scheduling.
    """
    def run(chunk):
        idx = chunk
        records, voltages = simulate_batch(net, [samples[i] for i in idx], interpolate=cfg.interpolate)
        losses, seeds, scores = batch_loss_and_seed(voltages, labels[idx], cfg.loss, net.dt)
        stats = BackwardStats()
        g = backward(net, records, seeds, cfg.loss, stats=stats)
        rates = [np.concatenate(list(firing_rates(r, net.dt).values()) or [np.zeros(0)]) for r in records]
        return g, losses, scores, rates

    idx = np.arange(len(samples))
    if cfg.threads > 1 and len(idx) > 1:
        chunks = np.array_split(idx, min(cfg.threads, len(idx)))
        with ThreadPoolExecutor(cfg.threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(idx)]
    g = parts[0][0]
    for other, *_ in parts[1:]:
        g.weights = [a + b for a, b in zip(g.weights, other.weights)]
        g.delays = [a + b for a, b in zip(g.delays, other.delays)]
        g.reg_loss += other.reg_loss
    losses = np.concatenate([p[1] for p in parts])
    scores = np.concatenate([p[2] for p in parts])
    rates = [r for p in parts for r in p[3]]
    g.loss = float(losses.sum())
    return g, losses, scores, rates


def train_epoch(net: NetworkSpec, samples, labels, cfg: TrainConfig, state: TrainState):
    """One shuffled pass over ``samples``; returns ``(net, metrics)``.

    ``train_acc`` is measured on the shard with the end-of-epoch parameters
    (same path as ``evaluate``).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(samples) == 0:
        raise ValueError("empty training shard")
    order = state.rng.permutation(len(samples))
    tot_loss = tot_reg = 0.0
    rates = []
    for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        try:
            g, losses, _, r = _batch_gradients(net, [samples[i] for i in idx], labels[idx], cfg)
            n = len(idx)
            tot_loss += g.loss
            tot_reg += g.reg_loss
            rates += r
            net = apply_gradients(net, g.scaled(1.0 / n), state, cfg)
        except (DivergenceError, AdjointError, NonFiniteGradientError) as exc:
            raise TrainingDivergedError(bi, exc) from exc
    state.epoch += 1
    ev = evaluate(net, samples, labels, cfg.loss.tau_loss, batch_size=max(cfg.batch_size, 64))
    metrics = {
        "epoch": state.epoch,
        "loss": tot_loss / len(samples),
        "reg_loss": tot_reg / len(samples),
        "train_acc": ev.accuracy,
        "mean_rate_hz": float(np.mean(np.concatenate(rates))) if rates and np.concatenate(rates).size else 0.0,
    }
    return net, metrics


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    mean_rate_hz: float
    predictions: np.ndarray


def predict(net: NetworkSpec, samples, tau_loss: float | None = None, batch_size: int = 64):
    """Grid (deployment-semantics) forward pass; returns (predictions, mean hidden rate)."""
    preds, rates = [], []
    for start in range(0, len(samples), batch_size):
        records, voltages = simulate_batch(net, samples[start:start + batch_size])
        preds.append(np.argmax(readout_scores(voltages, tau_loss, net.dt), axis=-1))
        for r in records:
            rr = list(firing_rates(r, net.dt).values())
            if rr:
                rates.append(np.concatenate(rr))
    mean_rate = float(np.mean(np.concatenate(rates))) if rates else 0.0
    return (np.concatenate(preds) if preds else np.zeros(0, np.int64)), mean_rate


def evaluate(net: NetworkSpec, samples, labels, tau_loss: float | None = None, batch_size: int = 64) -> EvalResult:
    labels = np.asarray(labels, dtype=np.int64)
    preds, rate = predict(net, samples, tau_loss, batch_size)
    n_out = net.output.size
    confusion = np.zeros((n_out, n_out), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    acc = float(np.mean(preds == labels)) if len(labels) else 0.0
    return EvalResult(acc, confusion, rate, preds)


def fit(net: NetworkSpec, train, cfg: TrainConfig, valid=None, *, state: TrainState | None = None,
        metrics_path=None, checkpoint_path=None, best_path=None, checkpoint_config: dict | None = None,
        deterministic: bool = False, log_every: bool = True):
    """Train for ``cfg.epochs`` (continuing from ``state.epoch``).

    ``train``/``valid`` are ``(samples, labels)`` pairs. The returned
    network is the best-validation one when ``valid`` is given, else the
    final one. Metrics are appended to ``metrics_path`` and a checkpoint
    is written to ``checkpoint_path`` after every epoch (resumable), and
    the best network so far to ``best_path``; both embed
    ``checkpoint_config`` (default: the TrainConfig).
    """
    samples, labels = train
    state = state or TrainState.fresh(net, cfg.seed)
    best_net, best_acc = net, -1.0
    t0 = time.perf_counter()
    while state.epoch < cfg.epochs:
        net, metrics = train_epoch(net, samples, labels, cfg, state)
        metrics["val_acc"] = float("nan")
        if valid is not None and (state.epoch % cfg.eval_every == 0 or state.epoch == cfg.epochs):
            metrics["val_acc"] = evaluate(net, valid[0], valid[1], cfg.loss.tau_loss).accuracy
        metrics["wallclock"] = "" if deterministic else round(time.perf_counter() - t0, 3)
        state.history.append(metrics)
        score = metrics["val_acc"] if valid is not None else metrics["train_acc"]
        if valid is None or (score == score and score > best_acc):
            best_net, best_acc = net, score
            if best_path is not None:
                save_checkpoint(best_path, net, state, checkpoint_config or cfg)
        if log_every:
            log.info("epoch %d loss %.4f reg %.4f train_acc %.3f val_acc %.3f rate %.1f Hz",
                     state.epoch, metrics["loss"], metrics["reg_loss"], metrics["train_acc"],
                     metrics["val_acc"], metrics["mean_rate_hz"])
        if metrics_path is not None:
            append_metrics(metrics_path, metrics)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, net, state, checkpoint_config or cfg)
    return (best_net if valid is not None else net), state


def append_metrics(path, metrics: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in metrics.items()})


def stratified_folds(labels, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic class-stratified fold assignment; returns the held-out indices of each fold."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(labels):
        raise ValueError(f"k={k} exceeds the number of samples ({len(labels)})")
    rng = np.random.default_rng(seed)
    order = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        order.extend(rng.permutation(idx))
    folds = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(i)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def cross_validate(samples, labels, k: int, cfg: TrainConfig, make_net, *, groups=None):
    """k-fold cross-validation; ``make_net(fold)`` returns a fresh initialized network.

    ``groups`` (e.g. speaker ids) switches to group-aware folds where every
    group is held out as a whole. Returns ``(fold_metrics, mean, sd)`` of
    held-out accuracy.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if groups is not None:
        uniq = np.unique(groups)
        if k > len(uniq):
            raise ValueError(f"k={k} exceeds the number of groups ({len(uniq)})")
        perm = np.random.default_rng(cfg.seed).permutation(uniq)
        folds = [np.flatnonzero(np.isin(groups, perm[i::k])) for i in range(k)]
    else:
        folds = stratified_folds(labels, k, cfg.seed)
    results = []
    for f, held in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(len(labels)), held)
        net = make_net(f)
        net, state = fit(net, ([samples[i] for i in train_idx], labels[train_idx]), cfg, log_every=False)
        ev = evaluate(net, [samples[i] for i in held], labels[held], cfg.loss.tau_loss)
        results.append({"fold": f, "n_held_out": int(len(held)), "accuracy": ev.accuracy,
                        "train_acc": state.history[-1]["train_acc"] if state.history else float("nan")})
    accs = np.array([r["accuracy"] for r in results])
    return results, float(accs.mean()), float(accs.std(ddof=1)) if len(accs) > 1 else 0.0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def network_metadata(net: NetworkSpec) -> dict:
    return {
        "dt": net.dt,
        "n_timesteps": net.n_timesteps,
        "populations": [{"id": p.id, "size": p.size, "kind": p.kind, "neuron": asdict(p.neuron)} for p in net.populations],
        "projections": [{"source": p.source, "target": p.target, "delays_trainable": p.delays_trainable,
                         "max_delay": p.max_delay} for p in net.projections],
    }


def network_from_metadata(meta: dict, weights, delays) -> NetworkSpec:
    pops = [Population(p["id"], p["size"], p["kind"], NeuronParams(**p["neuron"])) for p in meta["populations"]]
    projs = [ProjectionSpec(p["source"], p["target"], np.asarray(w), np.asarray(d), p["delays_trainable"], p["max_delay"])
             for p, w, d in zip(meta["projections"], weights, delays)]
    return build_network(NetworkSpec(meta["dt"], pops, projs, meta["n_timesteps"]))


def save_checkpoint(path, net: NetworkSpec, state: TrainState, cfg: TrainConfig | dict | None = None) -> None:
    """Write network tensors, Adam moments, RNG state and history atomically.

    Layout (HDF5): root attrs ``format``, ``version``, ``epoch``, ``step``,
    ``network`` (JSON), ``rng_state`` (JSON), ``history`` (JSON),
    ``config`` (JSON); groups ``params/w<j>``, ``params/d<j>``,
    ``adam/m<i>``, ``adam/v<i>``.
    """
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with h5py.File(tmp, "w", track_order=False) as fh:
        fh.attrs["format"] = CHECKPOINT_FORMAT
        fh.attrs["version"] = CHECKPOINT_VERSION
        fh.attrs["epoch"] = state.epoch
        fh.attrs["step"] = state.step
        fh.attrs["network"] = json.dumps(network_metadata(net), sort_keys=True)
        fh.attrs["rng_state"] = json.dumps(state.rng.bit_generator.state, sort_keys=True)
        fh.attrs["history"] = json.dumps(state.history, sort_keys=True)
        if isinstance(cfg, TrainConfig):
            cfg = config_to_dict(cfg)
        fh.attrs["config"] = json.dumps(cfg or {}, sort_keys=True)
        g = fh.create_group("params")
        for j, p in enumerate(net.projections):
            g.create_dataset(f"w{j}", data=p.weights)
            g.create_dataset(f"d{j}", data=p.delays)
        a = fh.create_group("adam")
        for i, (m, v) in enumerate(zip(state.m, state.v)):
            a.create_dataset(f"m{i}", data=m)
            a.create_dataset(f"v{i}", data=v)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[NetworkSpec, TrainState, dict]:
    """Returns ``(net, state, config_dict)``."""
    with h5py.File(path, "r") as fh:
        if fh.attrs.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        version = int(fh.attrs["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.attrs["network"])
        n = len(meta["projections"])
        weights = [fh[f"params/w{j}"][()] for j in range(n)]
        delays = [fh[f"params/d{j}"][()] for j in range(n)]
        n_adam = len(fh["adam"]) // 2
        m = [fh[f"adam/m{i}"][()] for i in range(n_adam)]
        v = [fh[f"adam/v{i}"][()] for i in range(n_adam)]
        rng = np.random.default_rng()
        rng.bit_generator.state = json.loads(fh.attrs["rng_state"])
        state = TrainState(m, v, int(fh.attrs["step"]), int(fh.attrs["epoch"]), rng, json.loads(fh.attrs["history"]))
        cfg = json.loads(fh.attrs["config"])
    return network_from_metadata(meta, weights, delays), state, cfg


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["loss"] = asdict(cfg.loss)
    return d
