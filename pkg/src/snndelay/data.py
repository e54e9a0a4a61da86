"""Spiking datasets: SHD/SSC HDF5 ingestion, binning, and a synthetic delay-coded task."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import h5py
import numpy as np

SHD_CHANNELS = 700
N_CLASSES = {"shd": 20, "ssc": 35}


class DatasetError(ValueError):
    pass


@dataclass
class BinnedSample:
    spikes: np.ndarray  # (n, 2) int64 rows of (timestep, channel)
    n_timesteps: int
    label: int = 0
    dropped: int = 0


@dataclass
class SpikingDataset:
    """Raw spike-time samples; times are in seconds, as in the published files."""

    times: list[np.ndarray]
    units: list[np.ndarray]
    labels: np.ndarray
    n_channels: int
    n_classes: int
    split: str = "train"
    speakers: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def __len__(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        if len(self.times) != len(self.labels) or len(self.units) != len(self.labels):
            raise DatasetError("times, units and labels must have equal length")
        for i, (t, u) in enumerate(zip(self.times, self.units)):
            if t.shape != u.shape:
                raise DatasetError(f"sample {i}: times/units length mismatch")
            if t.size and t.min() < 0:
                raise DatasetError(f"sample {i}: negative event time")
            if u.size and (u.min() < 0 or u.max() >= self.n_channels):
                raise DatasetError(f"sample {i}: channel index {int(u.max())} >= {self.n_channels}")
            if t.size > 1 and np.any(np.diff(t) < 0):
                raise DatasetError(f"sample {i}: events not sorted by time")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"label outside [0, {self.n_classes})")

    def subset(self, idx, split: str | None = None) -> SpikingDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return SpikingDataset(
            [self.times[i] for i in idx], [self.units[i] for i in idx], self.labels[idx],
            self.n_channels, self.n_classes, split or self.split,
            None if self.speakers is None else self.speakers[idx], dict(self.meta))

    def binned(self, dt: float, n_timesteps: int, max_duration: float | None = None) -> list[BinnedSample]:
        return [bin_events((t, u, int(y)), dt, n_timesteps, max_duration)
                for t, u, y in zip(self.times, self.units, self.labels)]


def bin_events(sample, dt: float, n_timesteps: int, max_duration: float | None = None) -> BinnedSample:
    """Map spike times (s) onto the integer grid ``floor(t_ms / dt)``.

    Events at or beyond ``n_timesteps`` (or ``max_duration`` ms) are dropped.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    times, units = np.asarray(sample[0], dtype=np.float64), np.asarray(sample[1], dtype=np.int64)
    label = int(sample[2]) if len(sample) > 2 else 0
    t_ms = times * 1000.0
    steps = np.floor(t_ms / dt).astype(np.int64)
    keep = steps < n_timesteps
    if max_duration is not None:
        keep &= t_ms < max_duration
    spikes = np.stack([steps[keep], units[keep]], axis=1) if keep.any() else np.zeros((0, 2), np.int64)
    order = np.lexsort((spikes[:, 1], spikes[:, 0]))
    return BinnedSample(spikes[order], int(n_timesteps), label, int((~keep).sum()))


def _resolve_split_file(path: Path, split: str) -> Path:
    if path.is_dir():
        matches = sorted(path.glob(f"*_{split}.h5"))
        if not matches:
            raise DatasetError(f"no *_{split}.h5 file in {path}")
        return matches[0]
    return path


def load_hdf5_dataset(path, split: str = "train", n_classes: int | None = None) -> SpikingDataset:
    """Read a file in the published SHD/SSC layout.

    ``path`` may be a file or a directory holding ``*_<split>.h5``. The
    class count comes from ``n_classes``, else from ``extra/keys``, else
    from the file name (shd/ssc), else from the labels.
    """
    path = _resolve_split_file(Path(path), split)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    try:
        fh = h5py.File(path, "r")
    except OSError as exc:
        raise DatasetError(f"{path}: not a readable HDF5 file ({exc})") from exc
    with fh:
        for key in ("spikes/times", "spikes/units", "labels"):
            if key not in fh:
                raise DatasetError(f"{path}: missing dataset {key!r}")
        times = [np.asarray(t, dtype=np.float64) for t in fh["spikes/times"]]
        units = [np.asarray(u, dtype=np.int64) for u in fh["spikes/units"]]
        labels = np.asarray(fh["labels"], dtype=np.int64)
        keys = [k.decode() if isinstance(k, bytes) else str(k) for k in fh["extra/keys"]] if "extra/keys" in fh else None
        speakers = np.asarray(fh["extra/speaker"]) if "extra/speaker" in fh else None
    if not labels.size:
        raise DatasetError(f"{path}: empty split {split!r}")
    if len(times) != len(labels) or len(units) != len(labels):
        raise DatasetError(f"{path}: spikes and labels disagree in length")
    for i, u in enumerate(units):
        if u.size and u.max() >= SHD_CHANNELS:
            raise DatasetError(f"{path}: sample {i} has channel index {int(u.max())} >= {SHD_CHANNELS}")
    for i, t in enumerate(times):
        if t.size > 1 and np.any(np.diff(t) < 0):
            order = np.argsort(t, kind="stable")
            times[i], units[i] = t[order], units[i][order]

    if n_classes is None:
        if keys is not None:
            n_classes = len(keys)
        else:
            name = path.name.lower()
            n_classes = next((n for tag, n in N_CLASSES.items() if tag in name), int(labels.max()) + 1)
    if labels.max() >= n_classes:
        raise DatasetError(f"{path}: label {int(labels.max())} exceeds class count {n_classes}")
    return SpikingDataset(times, units, labels, SHD_CHANNELS, n_classes, split, speakers,
                          {"source": str(path), "keys": keys})


def save_hdf5_dataset(ds: SpikingDataset, path) -> None:
    """Write ``ds`` in the SHD/SSC layout (vlen ``spikes/times``, ``spikes/units``, ``labels``)."""
    with h5py.File(path, "w") as fh:
        g = fh.create_group("spikes")
        tt = g.create_dataset("times", (len(ds),), dtype=h5py.vlen_dtype(np.float32))
        uu = g.create_dataset("units", (len(ds),), dtype=h5py.vlen_dtype(np.uint16))
        for i, (t, u) in enumerate(zip(ds.times, ds.units)):
            tt[i] = t.astype(np.float32)
            uu[i] = u.astype(np.uint16)
        fh.create_dataset("labels", data=ds.labels.astype(np.uint16))
        extra = fh.create_group("extra")
        extra.create_dataset("keys", data=np.array([f"class{k}" for k in range(ds.n_classes)], dtype="S"))
        if ds.speakers is not None:
            extra.create_dataset("speaker", data=ds.speakers)


def _class_offsets(rng, n_classes, n_channels, group_size, spread, min_separation):
    """Per-channel offsets whose within-group differences separate the classes."""
    for _ in range(1000):
        offsets = rng.uniform(0.0, spread, size=(n_classes, n_channels))
        rel = _relative(offsets, group_size)
        ok = all(min(np.max(np.abs(rel[a] - rel[b])), np.max(np.abs(offsets[a] - offsets[b]))) >= min_separation
                 for a in range(n_classes) for b in range(a + 1, n_classes))
        if ok:
            return offsets
    raise RuntimeError("could not draw separable class offsets")


def _relative(offsets, group_size):
    if group_size <= 1:
        return offsets
    first = offsets[:, ::group_size]
    return offsets - np.repeat(first, group_size, axis=1)[:, :offsets.shape[1]]


def synthetic_delay_task(n_classes: int = 4, n_channels: int = 64, n_samples=(400, 100, 200),
                         jitter_sd: float = 0.5, seed: int = 0, *, spread: float = 50.0,
                         min_separation: float = 25.0, onset: float = 5.0,
                         group_size: int = 2, shift: float = 70.0) -> dict[str, SpikingDataset]:
    """Delay-coded classification task; returns ``{"train", "valid", "test"}``.

    Every channel fires exactly once per sample, so spike counts carry no
    class information. Class ``k`` fixes a latency offset per channel
    (uniform over ``spread`` ms). Channels come in groups of ``group_size``
    and each group gets its own random onset, uniform over ``shift`` ms, in
    every sample, so the absolute latency of a channel says little about
    the class; only the relative timing inside a group does. Gaussian
    jitter (``jitter_sd`` ms) is added per spike. Recognising a class means
    re-aligning the within-group offsets onto a coincidence, which
    per-synapse delays can do. Split sample ids are disjoint
    (``meta["sample_ids"]``).
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    if isinstance(n_samples, int):
        n_samples = (int(0.6 * n_samples), int(0.2 * n_samples), n_samples - int(0.6 * n_samples) - int(0.2 * n_samples))
    rng = np.random.default_rng(seed)
    offsets = _class_offsets(rng, n_classes, n_channels, group_size, spread, min_separation)
    n_groups = -(-n_channels // group_size)

    out = {}
    next_id = 0
    for split, n in zip(("train", "valid", "test"), n_samples):
        labels = np.arange(n) % n_classes
        rng.shuffle(labels)
        times, units = [], []
        for y in labels:
            g_shift = np.repeat(rng.uniform(0.0, shift, n_groups), group_size)[:n_channels]
            t_ms = onset + g_shift + offsets[y] + rng.normal(0.0, jitter_sd, n_channels)
            t_ms = np.clip(t_ms, 0.0, None)
            order = np.argsort(t_ms, kind="stable")
            times.append(t_ms[order] / 1000.0)
            units.append(order.astype(np.int64))
        ids = np.arange(next_id, next_id + n)
        next_id += n
        out[split] = SpikingDataset(times, units, labels, n_channels, n_classes, split,
                                    meta={"offsets_ms": offsets, "seed": seed, "sample_ids": ids})
    return out
