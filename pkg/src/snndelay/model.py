"""Network description, parameter tensors and initialization."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

INPUT, HIDDEN, OUTPUT = "input", "hidden", "output"
KINDS = (INPUT, HIDDEN, OUTPUT)

# deployment limit on synaptic delay, in timesteps
HARDWARE_MAX_DELAY_STEPS = 62


class NetworkValidationError(ValueError):
    """Raised when a network description violates one of its invariants."""


def round_half_away(x):
    """Round to nearest integer, ties away from zero (the one rounding rule used everywhere)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class NeuronParams:
    tau_mem: float = 20.0
    tau_syn: float = 5.0
    v_threshold: float = 1.0
    v_reset: float = 0.0

    def validate(self, where: str = "") -> None:
        if not (self.tau_mem > 0 and self.tau_syn > 0):
            raise NetworkValidationError(f"{where}: time constants must be positive")
        if self.tau_mem == self.tau_syn:
            raise NetworkValidationError(f"{where}: tau_mem == tau_syn is not supported")
        if not self.v_threshold > self.v_reset:
            raise NetworkValidationError(f"{where}: v_threshold must exceed v_reset")


@dataclass
class Population:
    id: str
    size: int
    kind: str
    neuron: NeuronParams = field(default_factory=NeuronParams)

    @property
    def spiking(self) -> bool:
        return self.kind == HIDDEN


@dataclass
class ProjectionSpec:
    source: str
    target: str
    weights: np.ndarray
    delays: np.ndarray
    delays_trainable: bool = True
    max_delay: float = 62.0

    @property
    def recurrent(self) -> bool:
        return self.source == self.target


@dataclass
class NetworkSpec:
    dt: float
    populations: list[Population]
    projections: list[ProjectionSpec]
    n_timesteps: int
    # (alpha, beta) per population id, attached by build_network
    decays: dict[str, tuple[float, float]] = field(default_factory=dict)

    def population(self, pop_id: str) -> Population:
        for pop in self.populations:
            if pop.id == pop_id:
                return pop
        raise KeyError(pop_id)

    def pop_index(self, pop_id: str) -> int:
        for i, pop in enumerate(self.populations):
            if pop.id == pop_id:
                return i
        raise KeyError(pop_id)

    @property
    def input(self) -> Population:
        return next(p for p in self.populations if p.kind == INPUT)

    @property
    def output(self) -> Population:
        return next(p for p in self.populations if p.kind == OUTPUT)

    @property
    def hidden(self) -> list[Population]:
        return [p for p in self.populations if p.kind == HIDDEN]

    @property
    def max_delay_steps(self) -> int:
        """Largest integer delay (in steps) any projection can realize."""
        if not self.projections:
            return 0
        return max(int(round_half_away(p.max_delay / self.dt)) for p in self.projections)

    def copy(self) -> NetworkSpec:
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        return [p.weights for p in self.projections] + [p.delays for p in self.projections]


def decay_constants(neuron: NeuronParams, dt: float) -> tuple[float, float]:
    return math.exp(-dt / neuron.tau_mem), math.exp(-dt / neuron.tau_syn)


def build_network(spec: NetworkSpec) -> NetworkSpec:
    """Validate ``spec`` and return a copy with decay constants attached.

    Raises NetworkValidationError naming the offending population or
    projection index.
    """
    if not spec.dt > 0:
        raise NetworkValidationError("dt must be positive")
    if int(spec.n_timesteps) < 1:
        raise NetworkValidationError("n_timesteps must be >= 1")

    seen: dict[str, int] = {}
    for i, pop in enumerate(spec.populations):
        if pop.id in seen:
            raise NetworkValidationError(
                f"population {i}: duplicate population-id {pop.id!r} (first at {seen[pop.id]})")
        seen[pop.id] = i
        if pop.kind not in KINDS:
            raise NetworkValidationError(f"population {i}: unknown kind {pop.kind!r}")
        if int(pop.size) < 1:
            raise NetworkValidationError(f"population {i}: size must be >= 1")
        if pop.kind != INPUT:
            pop.neuron.validate(f"population {i}")
    kinds = [p.kind for p in spec.populations]
    if kinds.count(INPUT) != 1:
        raise NetworkValidationError("exactly one input population required")
    if kinds.count(OUTPUT) != 1:
        raise NetworkValidationError("exactly one output population required")

    sizes = {p.id: int(p.size) for p in spec.populations}
    kind_of = {p.id: p.kind for p in spec.populations}
    projections = []
    for j, proj in enumerate(spec.projections):
        for end in (proj.source, proj.target):
            if end not in sizes:
                raise NetworkValidationError(f"projection {j}: dangling population-id {end!r}")
        if kind_of[proj.source] == OUTPUT:
            raise NetworkValidationError(f"projection {j}: projections out of the output population are not allowed")
        if kind_of[proj.target] == INPUT:
            raise NetworkValidationError(f"projection {j}: the input population cannot be a target")
        weights = np.asarray(proj.weights, dtype=np.float64)
        delays = np.asarray(proj.delays, dtype=np.float64)
        shape = (sizes[proj.source], sizes[proj.target])
        if weights.shape != shape or delays.shape != shape:
            raise NetworkValidationError(
                f"projection {j}: shape mismatch, expected {shape}, "
                f"got weights {weights.shape} and delays {delays.shape}")
        if not proj.max_delay >= 0:
            raise NetworkValidationError(f"projection {j}: max_delay must be >= 0")
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(delays))):
            raise NetworkValidationError(f"projection {j}: non-finite parameter")
        bad = np.argwhere((delays < 0) | (delays > proj.max_delay))
        if bad.size:
            src, tgt = bad[0]
            raise NetworkValidationError(
                f"projection {j}: delay out of range at [{src}, {tgt}]: "
                f"{delays[src, tgt]} not in [0, {proj.max_delay}]")
        projections.append(replace(proj, weights=weights, delays=delays))

    decays = {p.id: decay_constants(p.neuron, spec.dt) for p in spec.populations if p.kind != INPUT}
    return NetworkSpec(
        dt=float(spec.dt),
        populations=[replace(p, size=int(p.size)) for p in spec.populations],
        projections=projections,
        n_timesteps=int(spec.n_timesteps),
        decays=decays,
    )


@dataclass(frozen=True)
class InitConfig:
    weight_mean: float = 0.0
    weight_sd: float = 0.1
    delay_low: float = 0.0
    delay_high: float = 0.0
    seed: int = 0


def init_parameters(spec: NetworkSpec, cfg: InitConfig | list[InitConfig]) -> NetworkSpec:
    """Fill weights ~ Normal(mean, sd) and delays ~ Uniform[low, high].

    ``cfg`` is either one config for every projection or one per projection.
    A single generator seeded from the first config draws all projections in
    order, so the result is a deterministic function of the seed.
    """
    cfgs = list(cfg) if isinstance(cfg, (list, tuple)) else [cfg] * len(spec.projections)
    if len(cfgs) != len(spec.projections):
        raise NetworkValidationError(
            f"got {len(cfgs)} init configs for {len(spec.projections)} projections")
    out = spec.copy()
    rng = np.random.default_rng(cfgs[0].seed if cfgs else 0)
    for j, (proj, c) in enumerate(zip(out.projections, cfgs)):
        if c.weight_sd < 0:
            raise NetworkValidationError(f"init config {j}: weight_sd must be >= 0")
        if not 0 <= c.delay_low <= c.delay_high <= proj.max_delay:
            raise NetworkValidationError(
                f"init config {j}: need 0 <= delay_low <= delay_high <= max_delay ({proj.max_delay})")
        shape = proj.weights.shape
        proj.weights = rng.normal(c.weight_mean, c.weight_sd, size=shape)
        proj.delays = rng.uniform(c.delay_low, c.delay_high, size=shape)
    return out


def count_parameters(spec: NetworkSpec) -> tuple[int, int]:
    n_weights = sum(p.weights.size for p in spec.projections)
    n_delays = sum(p.delays.size for p in spec.projections if p.delays_trainable)
    return int(n_weights), int(n_delays)


def make_network(
    n_input: int,
    hidden: list[int],
    n_output: int,
    *,
    architecture: str = "feedforward",
    dt: float = 1.0,
    n_timesteps: int = 1000,
    max_delay: float | None = None,
    delays_trainable: bool = True,
    recurrent_delays_trainable: bool | None = None,
    neuron: NeuronParams | None = None,
    output_neuron: NeuronParams | None = None,
) -> NetworkSpec:
    """Zero-initialized feedforward (stacked hidden layers) or recurrent network.

    ``architecture="recurrent"`` adds an all-to-all projection on every hidden
    layer. ``max_delay`` defaults to the hardware limit of 62 timesteps.
    """
    if architecture not in ("feedforward", "recurrent"):
        raise NetworkValidationError(f"unknown architecture {architecture!r}")
    neuron = neuron or NeuronParams()
    output_neuron = output_neuron or neuron
    if max_delay is None:
        max_delay = HARDWARE_MAX_DELAY_STEPS * dt
    if recurrent_delays_trainable is None:
        recurrent_delays_trainable = delays_trainable

    pops = [Population("input", n_input, INPUT)]
    pops += [Population(f"hidden{i}", n, HIDDEN, neuron) for i, n in enumerate(hidden)]
    pops.append(Population("output", n_output, OUTPUT, output_neuron))

    def proj(src: Population, tgt: Population, trainable: bool) -> ProjectionSpec:
        shape = (src.size, tgt.size)
        return ProjectionSpec(src.id, tgt.id, np.zeros(shape), np.zeros(shape), trainable, float(max_delay))

    projections = []
    for src, tgt in zip(pops[:-1], pops[1:]):
        projections.append(proj(src, tgt, delays_trainable))
        if architecture == "recurrent" and tgt.kind == HIDDEN:
            projections.append(proj(tgt, tgt, recurrent_delays_trainable))
    return build_network(NetworkSpec(dt, pops, projections, n_timesteps))
