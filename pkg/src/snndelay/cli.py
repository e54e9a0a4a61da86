"""Command-line entry point: ``snndelay <command> ...``.

Exit codes: 0 success, 1 internal error, 2 usage or input error. Logs go
to stderr; stdout carries one summary line per command.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_network, config_from_dict, load_config, load_data, override
from .data import DatasetError, bin_events
from .eventprop import gradcheck
from .model import NetworkValidationError, count_parameters
from .quantize import (ExchangeFormatError, FixedPointOverflowError, QuantizationError, emulate_fixed_point,
                       export_model, import_model, parity_report, quantize)
from .train import cross_validate, evaluate, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("snndelay")

THREADS_ENV = "SNNDELAY_THREADS"
INPUT_ERRORS = (FileNotFoundError, FileExistsError, ConfigError, DatasetError, NetworkValidationError,
                QuantizationError, ExchangeFormatError, FixedPointOverflowError)


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wallclock_s: float = 0.0
    argv: list = field(default_factory=list)
    python: str = platform.python_version()
    numpy: str = np.__version__

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=str) + "\n")
        return path


def sha256(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(p.rglob("*.h5")) if p.is_dir() else [p]
    for f in files:
        with open(f, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {
        "train.epochs": getattr(args, "epochs", None),
        "train.seed": getattr(args, "seed", None),
        "train.batch_size": getattr(args, "batch_size", None),
        "train.threads": getattr(args, "threads", None),
    }
    return override(cfg, over)


def _binned(cfg: RunConfig, ds, n_timesteps=None, dt=None):
    n_timesteps = n_timesteps or cfg.data.n_timesteps
    dt = dt or cfg.data.dt
    samples = [bin_events((t, u), dt, n_timesteps, cfg.data.max_duration).spikes for t, u in zip(ds.times, ds.units)]
    return samples, ds.labels


def _data(cfg: RunConfig, path):
    if path is not None and str(path) != "synthetic" and not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_data(cfg, None if path in (None, "synthetic") else path)


def _split(data: dict, name: str):
    if name not in data and len(data) == 1:
        # a single dataset file was given; use it whatever its split tag
        return next(iter(data.values()))
    if name not in data:
        raise UsageError(f"split {name!r} not available (have: {', '.join(data)})")
    return data[name]


def _checkpoint(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    net, state, cfg_dict = load_checkpoint(path)
    cfg = config_from_dict(cfg_dict) if cfg_dict.get("data") else RunConfig()
    return net, state, cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _resolve_config(args)
    data = _data(cfg, args.data)
    train = data["train"]
    net = build_network(cfg, train.n_channels, train.n_classes)
    n_w, n_d = count_parameters(net)
    if args.dry_run:
        print(f"dry-run ok: populations={[(p.id, p.size) for p in net.populations]} "
              f"weights={n_w} delays={n_d} train_samples={len(train)}")
        return 0
    out = _out_dir(args.out)
    ckpt, best_ckpt, metrics = out / "checkpoint.h5", out / "best.h5", out / "metrics.csv"
    state = None
    if args.resume:
        net, state, _ = _checkpoint(args.resume)
    elif metrics.exists():
        metrics.unlink()
    valid = data.get("valid")
    best, state = fit(net, _binned(cfg, train), cfg.train, _binned(cfg, valid) if valid is not None else None,
                      state=state, metrics_path=metrics, checkpoint_path=ckpt, best_path=best_ckpt,
                      checkpoint_config=cfg.to_dict(), deterministic=args.deterministic)
    if not best_ckpt.exists():
        save_checkpoint(best_ckpt, best, state, cfg.to_dict())
    outputs = [str(ckpt), str(best_ckpt), str(metrics)]
    summary = {"epochs": state.epoch, "train_acc": state.history[-1]["train_acc"] if state.history else None}
    if "test" in data:
        s, y = _binned(cfg, data["test"])
        summary["test_acc"] = evaluate(best, s, y, cfg.train.loss.tau_loss).accuracy
    RunManifest("train", cfg.to_dict(), cfg.train.seed, inputs=_input_hashes(args), outputs=outputs,
                wallclock_s=round(time.perf_counter() - t0, 3), argv=sys.argv[1:]).write(out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _input_hashes(args) -> dict:
    out = {}
    for key in ("config", "data", "checkpoint", "model", "compare", "resume"):
        v = getattr(args, key, None)
        if v and v != "synthetic" and Path(v).exists():
            out[key] = {"path": str(v), "sha256": sha256(v)}
    return out


def cmd_eval(args) -> int:
    net, _, cfg = _checkpoint(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
    ds = _split(_data(cfg, args.data), args.split)
    s, y = _binned(cfg, ds, net.n_timesteps, net.dt)
    res = evaluate(net, s, y, cfg.train.loss.tau_loss)
    if args.out:
        out = _out_dir(args.out)
        np.savetxt(out / "confusion.csv", res.confusion, fmt="%d", delimiter=",")
        RunManifest("eval", cfg.to_dict(), cfg.train.seed, inputs=_input_hashes(args),
                    outputs=[str(out / "confusion.csv")], argv=sys.argv[1:]).write(out)
    print(json.dumps({"split": args.split, "n": len(y), "accuracy": res.accuracy,
                      "mean_rate_hz": res.mean_rate_hz}, sort_keys=True))
    return 0


def cmd_cv(args) -> int:
    t0 = time.perf_counter()
    cfg = _resolve_config(args)
    train = _data(cfg, args.data)["train"]
    s, y = _binned(cfg, train)
    if args.k > len(y):
        raise UsageError(f"k={args.k} exceeds the number of samples ({len(y)})")
    folds, mean, sd = cross_validate(s, y, args.k, cfg.train, lambda f: build_network(cfg, train.n_channels, train.n_classes),
                                     groups=train.speakers if args.by_speaker else None)
    if args.out:
        out = _out_dir(args.out)
        with open(out / "cv.csv", "w") as fh:
            fh.write("fold,n_held_out,accuracy,train_acc\n")
            for r in folds:
                fh.write(f"{r['fold']},{r['n_held_out']},{r['accuracy']!r},{r['train_acc']!r}\n")
        RunManifest("cv", cfg.to_dict(), cfg.train.seed, inputs=_input_hashes(args), outputs=[str(out / "cv.csv")],
                    wallclock_s=round(time.perf_counter() - t0, 3), argv=sys.argv[1:]).write(out)
    print(json.dumps({"k": args.k, "mean_accuracy": mean, "sd_accuracy": sd}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    if args.checkpoint:
        net, _, cfg = _checkpoint(args.checkpoint)
    else:
        cfg = _resolve_config(args)
    ds = _data(cfg, args.data)["train"]
    if not args.checkpoint:
        net = build_network(cfg, ds.n_channels, ds.n_classes)
    s, y = _binned(cfg, ds, net.n_timesteps, net.dt)
    i = int(args.sample) % len(s)
    rep = gradcheck(net, s[i], args.n_coords, args.seed, label=int(y[i]), cfg=cfg.train.loss, tol=args.tol)
    if args.out:
        out = _out_dir(args.out)
        rep.write_csv(out / "gradcheck.csv")
        RunManifest("gradcheck", cfg.to_dict(), args.seed, inputs=_input_hashes(args),
                    outputs=[str(out / "gradcheck.csv")], argv=sys.argv[1:]).write(out)
    print(rep.summary())
    if args.min_pass is not None and rep.pass_fraction < args.min_pass:
        return 1
    return 0


def _fixed_point_kwargs(args) -> dict:
    return {k: v for k, v in (("state_frac", args.state_frac), ("state_bits", args.state_bits),
                              ("decay_frac", args.decay_frac)) if v is not None}


def cmd_export(args) -> int:
    net, _, cfg = _checkpoint(args.checkpoint)
    model = quantize(net, **_fixed_point_kwargs(args))
    path = export_model(model, args.out, overwrite=args.overwrite)
    out = path.parent
    RunManifest("export", cfg.to_dict(), cfg.train.seed, inputs=_input_hashes(args), outputs=[str(path)],
                argv=sys.argv[1:]).write(out)
    nbytes = path.stat().st_size
    print(json.dumps({"out": str(path), "bytes": nbytes, "projections": len(model.projections)}))
    return 0


def _model_data(args):
    model = import_model(args.model)
    cfg = load_config(args.config) if args.config else RunConfig()
    ds = _split(_data(cfg, args.data), args.split)
    s, y = _binned(cfg, ds, model.n_timesteps, model.dt)
    return model, cfg, s, y


def cmd_emulate(args) -> int:
    model, cfg, s, y = _model_data(args)
    out = _out_dir(args.out)
    outputs = []
    summary = {}
    if args.compare:
        net, _, _ = _checkpoint(args.compare)
        rep = parity_report(net, model, s, y, tau_loss=cfg.train.loss.tau_loss)
        rep.write_csv(out / "parity.csv")
        outputs.append(str(out / "parity.csv"))
        preds = rep.pred_b
        summary.update(accuracy_float=rep.accuracy_a, agreement=rep.agreement)
    else:
        preds = np.concatenate([emulate_fixed_point(model, s[i:i + 64], tau_loss=cfg.train.loss.tau_loss).predictions
                                for i in range(0, len(s), 64)])
    with open(out / "predictions.csv", "w") as fh:
        fh.write("sample,label,prediction\n")
        for i, (a, b) in enumerate(zip(y, preds)):
            fh.write(f"{i},{int(a)},{int(b)}\n")
    outputs.append(str(out / "predictions.csv"))
    summary["accuracy_quantized"] = float(np.mean(preds == y))
    summary["n"] = len(y)
    RunManifest("emulate", cfg.to_dict(), None, inputs=_input_hashes(args), outputs=outputs, argv=sys.argv[1:]).write(out)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_parity(args) -> int:
    model, cfg, s, y = _model_data(args)
    net, _, _ = _checkpoint(args.checkpoint)
    rep = parity_report(net, model, s, y, tau_loss=cfg.train.loss.tau_loss)
    if args.out:
        out = _out_dir(args.out)
        rep.write_csv(out / "parity.csv")
        RunManifest("parity", cfg.to_dict(), None, inputs=_input_hashes(args), outputs=[str(out / "parity.csv")],
                    argv=sys.argv[1:]).write(out)
    print(rep.summary())
    return 0


def bench(model, samples) -> dict:
    """Software cost proxies per sample; none of these are hardware energy figures."""
    counters: dict = {}
    t0 = time.perf_counter()
    for i in range(0, len(samples), 64):
        emulate_fixed_point(model, samples[i:i + 64], counters=counters)
    wall = (time.perf_counter() - t0) / max(len(samples), 1)
    n = max(len(samples), 1)
    syn = counters.get("synaptic_events", 0) / n
    upd = counters.get("neuron_updates", 0) / n
    return {
        "n_samples": len(samples),
        "synaptic_events_per_sample": syn,
        "neuron_updates_per_sample": upd,
        "output_updates_per_sample": counters.get("output_updates", 0) / n,
        "emulator_wallclock_s_per_sample": wall,
        "proxy_edp": (syn + upd) * wall,
        "note": "software proxies from the fixed-point emulator; not hardware energy or latency",
    }


def cmd_bench(args) -> int:
    model, cfg, s, y = _model_data(args)
    s = s[:args.n_samples]
    rep = bench(model, s)
    if args.out:
        out = _out_dir(args.out)
        (out / "bench.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
        RunManifest("bench", cfg.to_dict(), None, inputs=_input_hashes(args), outputs=[str(out / "bench.json")],
                    argv=sys.argv[1:]).write(out)
    print(json.dumps(rep, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snndelay", description="Delay-learning spiking networks: train, check, export, emulate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("--deterministic", action="store_true", help="fixed reduction order, no wallclock in metrics")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, config=True):
        # global flags are also accepted after the subcommand
        sp.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        sp.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
        if config:
            sp.add_argument("--config", help="TOML run config (defaults: synthetic benchmark)")
        if data:
            sp.add_argument("--data", default=None, help="dataset file or directory, or 'synthetic'")

    t = sub.add_parser("train", help="train a network")
    common(t)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--dry-run", action="store_true", help="validate config and build the network only")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cv", help="k-fold cross-validation on the training split")
    common(c)
    c.add_argument("--k", type=int, default=5)
    c.add_argument("--epochs", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--by-speaker", action="store_true")
    c.add_argument("--out")
    c.set_defaults(func=cmd_cv)

    g = sub.add_parser("gradcheck", help="compare gradients with finite differences")
    common(g)
    g.add_argument("--checkpoint")
    g.add_argument("--sample", type=int, default=0)
    g.add_argument("--n-coords", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--min-pass", type=float, default=None, help="exit 1 when the pass fraction is lower")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    def fixed_point(sp):
        sp.add_argument("--state-frac", type=int)
        sp.add_argument("--state-bits", type=int)
        sp.add_argument("--decay-frac", type=int)

    x = sub.add_parser("export", help="quantize a checkpoint and write the exchange file")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True, help="exchange file path")
    x.add_argument("--overwrite", action="store_true")
    x.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
    fixed_point(x)
    x.set_defaults(func=cmd_export)

    for name, func, helptext in (("emulate", cmd_emulate, "run the fixed-point emulator"),
                                 ("parity", cmd_parity, "float vs quantized report"),
                                 ("bench", cmd_bench, "software cost proxies")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--model", required=True, help="exchange file")
        sp.add_argument("--split", default="test")
        if name == "emulate":
            sp.add_argument("--out", required=True)
            sp.add_argument("--compare", help="float checkpoint for a parity report")
        else:
            sp.add_argument("--out")
        if name == "parity":
            sp.add_argument("--checkpoint", required=True)
        if name == "bench":
            sp.add_argument("--n-samples", type=int, default=32)
        sp.set_defaults(func=func)
    return p


def _error(kind: str, exc: BaseException) -> None:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads is None:
        args.threads = int(os.environ.get(THREADS_ENV, "1"))
    if args.threads < 1:
        _error("usage", ValueError("--threads must be >= 1"))
        return 2
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg = str(exc)
        _error("input", exc if "not found" in msg else FileNotFoundError(f"not found: {msg}"))
        return 2
    except (UsageError, *INPUT_ERRORS) as exc:
        _error("input", exc)
        return 2
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        _error("internal", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
