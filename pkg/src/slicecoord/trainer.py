"""SGD training loop: sample a group, score it, backpropagate the ranking
loss, update with momentum. Deterministic given the seed, resumable
bit-exactly from checkpoints.

The loss gradient is computed analytically over the (g, m) score table
and injected into the network graph as the backward seed, so the loss
math stays independently testable from the network.

Checkpoints extend the network container with ``velocity.*`` tensors and
a ``trainer`` metadata section (global iteration, optimizer knobs, and
the sampler rng state) so a resumed run consumes the identical random
stream an uninterrupted run would.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import losses, network
from .network import ModelParams, NetworkConfig
from .phantom import Dataset
from .sampler import SamplerConfig, sample_group


class TrainerError(RuntimeError):
    """Raised on divergence or on checkpoint/config mismatches."""


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 0.002
    lr_schedule: tuple[float, int] | None = None  # (decay factor, period in iterations)
    momentum: float = 0.9
    dist_weight: float = 1.0
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(g=6, m=8))
    network: NetworkConfig = field(default_factory=NetworkConfig)
    seed: int = 0
    checkpoint_period: int | None = None
    out_dir: str | None = None

    def validate(self) -> None:
        if self.iterations < 1:
            raise TrainerError(f"iterations must be >= 1, got {self.iterations}")
        if self.learning_rate <= 0:
            raise TrainerError(f"learning rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.momentum < 1.0):
            raise TrainerError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.dist_weight < 0:
            raise TrainerError(f"dist_weight must be >= 0, got {self.dist_weight}")
        if self.lr_schedule is not None:
            factor, period = self.lr_schedule
            if factor <= 0 or period < 1:
                raise TrainerError(f"lr_schedule needs factor > 0 and period >= 1, got {self.lr_schedule}")
        if self.checkpoint_period is not None and self.checkpoint_period < 1:
            raise TrainerError(f"checkpoint_period must be >= 1, got {self.checkpoint_period}")
        self.sampler.validate()


@dataclass
class TrainLog:
    """Per-iteration loss records plus run bookkeeping."""

    records: list[tuple[int, float, float, float]]  # (iteration, order, dist, total)
    wall_clock: float = 0.0
    checkpoint_path: str | None = None
    messages: list[str] = field(default_factory=list)


def write_log(log: TrainLog, path) -> None:
    """Line-oriented text: one ``iteration,order,dist,total`` record per line."""
    lines = [f"{i},{repr(o)},{repr(d)},{repr(t)}" for i, o, d, t in log.records]
    Path(path).write_text("\n".join(lines) + "\n")


def sgd_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             learning_rate: float, momentum: float,
             velocity: dict[str, np.ndarray]) -> None:
    """In-place heavy-ball update: v = momentum*v + grad; p = p - lr*v."""
    if set(tensors) != set(grads) or set(tensors) != set(velocity):
        raise TrainerError("parameter, gradient, and velocity tensors must share names")
    for name, p in tensors.items():
        g = grads[name]
        v = velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise TrainerError(
                f"shape mismatch for {name}: param {p.shape}, grad {g.shape}, velocity {v.shape}"
            )
        v *= momentum
        v += g
        p -= learning_rate * v


def learning_rate_at(config: TrainConfig, iteration: int) -> float:
    """Step-decayed rate at a 1-based global iteration."""
    if config.lr_schedule is None:
        return config.learning_rate
    factor, period = config.lr_schedule
    return config.learning_rate * factor ** ((iteration - 1) // period)


def _trainer_meta(config: TrainConfig, iteration: int, rng: np.random.Generator) -> dict:
    return {
        "iteration": iteration,
        "learning_rate": config.learning_rate,
        "lr_schedule": list(config.lr_schedule) if config.lr_schedule else None,
        "momentum": config.momentum,
        "dist_weight": config.dist_weight,
        "g": config.sampler.g,
        "m": config.sampler.m,
        "max_interval": config.sampler.max_interval,
        "seed": config.seed,
        "rng_state": rng.bit_generator.state,
    }


def save_checkpoint(path, params: ModelParams, velocity: dict[str, np.ndarray],
                    config: TrainConfig, iteration: int, rng: np.random.Generator) -> None:
    tensors = dict(params.tensors)
    for name, v in velocity.items():
        tensors[f"velocity.{name}"] = v
    meta = {"network": params.config.to_dict(), "trainer": _trainer_meta(config, iteration, rng)}
    network.write_container(path, meta, tensors)


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    """Returns (params, velocity tensors, trainer metadata)."""
    meta, tensors = network.read_container(path)
    if "trainer" not in meta or "network" not in meta:
        raise TrainerError(f"{path} is not a training checkpoint (missing metadata sections)")
    net_config = NetworkConfig.from_dict(meta["network"])
    model = {k: v for k, v in tensors.items() if not k.startswith("velocity.")}
    velocity = {k[len("velocity."):]: v for k, v in tensors.items() if k.startswith("velocity.")}
    if set(model) != set(velocity):
        raise TrainerError(f"{path}: velocity tensors do not match parameter tensors")
    return ModelParams(config=net_config, tensors=model), velocity, meta["trainer"]


def _run(dataset: Dataset, config: TrainConfig, params: ModelParams,
         velocity: dict[str, np.ndarray], rng: np.random.Generator,
         start_iteration: int, messages: list[str]) -> tuple[ModelParams, TrainLog]:
    g, m = config.sampler.g, config.sampler.m
    out_dir = Path(config.out_dir) if config.out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    records: list[tuple[int, float, float, float]] = []
    started = time.perf_counter()
    checkpoint_path = None
    for local in range(1, config.iterations + 1):
        iteration = start_iteration + local
        group = sample_group(dataset, config.sampler, rng)
        graph = network.build_graph(params, group.pixels)
        table = dc.reshape(graph.scores, (g, m))
        report = losses.total_loss(table.value, dist_weight=config.dist_weight)
        if not np.isfinite(report.total):
            raise TrainerError(
                f"training diverged at iteration {iteration}: total loss is {report.total}"
            )
        dc.backward(table, seed=report.grad)
        grads = {name: leaf.grad for name, leaf in graph.leaves.items()}
        sgd_step(params.tensors, grads, learning_rate_at(config, iteration),
                 config.momentum, velocity)
        records.append((iteration, report.order, report.dist, report.total))
        if (out_dir is not None and config.checkpoint_period is not None
                and iteration % config.checkpoint_period == 0):
            path = out_dir / f"checkpoint_{iteration:06d}.ubrc"
            save_checkpoint(path, params, velocity, config, iteration, rng)
            checkpoint_path = str(path)
    wall = time.perf_counter() - started
    if out_dir is not None:
        final = out_dir / "model.ubrc"
        save_checkpoint(final, params, velocity, config, start_iteration + config.iterations, rng)
        checkpoint_path = str(final)
    log = TrainLog(records=records, wall_clock=wall, checkpoint_path=checkpoint_path,
                   messages=messages)
    if out_dir is not None:
        write_log(log, out_dir / "train_log.txt")
    return params, log


def train(dataset: Dataset, config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Train from scratch; returns the final parameters and the loss history."""
    config.validate()
    params = network.init_network(config.network)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    rng = np.random.default_rng(config.seed)
    return _run(dataset, config, params, velocity, rng, start_iteration=0, messages=[])


def resume(checkpoint_path, dataset: Dataset, config: TrainConfig) -> tuple[ModelParams, TrainLog]:
    """Continue training for config.iterations more steps, bit-exactly.

    Structural settings (g, m, max-interval, network architecture) must
    match the checkpoint; optimizer knobs may change and are logged. The
    sampler rng state comes from the checkpoint, so config.seed is ignored.
    """
    config.validate()
    params, velocity, meta = load_checkpoint(checkpoint_path)
    mismatches = []
    for key, ours in (("g", config.sampler.g), ("m", config.sampler.m),
                      ("max_interval", config.sampler.max_interval)):
        if meta[key] != ours:
            mismatches.append(f"{key}: checkpoint has {meta[key]}, config has {ours}")
    if params.config != config.network:
        mismatches.append("network architecture differs from the checkpoint")
    if mismatches:
        raise TrainerError("cannot resume: " + "; ".join(mismatches))
    messages = []
    stored_schedule = tuple(meta["lr_schedule"]) if meta["lr_schedule"] else None
    for key, stored, ours in (
        ("learning_rate", meta["learning_rate"], config.learning_rate),
        ("momentum", meta["momentum"], config.momentum),
        ("dist_weight", meta["dist_weight"], config.dist_weight),
        ("lr_schedule", stored_schedule, config.lr_schedule),
    ):
        if stored != ours:
            messages.append(f"{key} changed from {stored} to {ours}")
    if meta["seed"] != config.seed:
        messages.append(f"seed {config.seed} ignored; continuing the checkpoint rng stream")
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return _run(dataset, config, params, velocity, rng,
                start_iteration=int(meta["iteration"]), messages=messages)
