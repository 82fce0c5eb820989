"""The slice-score regressor: conv stages, a 1x1 embedding conv, global
average pooling, and a scalar affine head.

The conv stack turns a single-channel slice into spatial feature maps;
the 1x1 ``embed`` conv mixes them into ``embed_channels`` maps, which
global average pooling collapses into a position-robust feature vector;
the ``score`` head projects that vector to one scalar per slice.

Checkpoint container (little-endian): magic ``UBRC``, u32 version,
u32-length-prefixed JSON metadata, then per tensor: u32 name length,
name bytes, u32 rank, rank u32 extents, float64 data. Records run to EOF.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Node

CHECKPOINT_MAGIC = b"UBRC"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for unreadable, truncated, or incompatible checkpoint files."""


class ConfigError(ValueError):
    """Raised for network configs that cannot produce a valid feature map."""


@dataclass(frozen=True)
class StageSpec:
    """One conv stage: conv(out_channels, kernel, stride, padding) -> relu -> pool.

    ``pool_window`` of 1 skips pooling; otherwise pool stride equals the window.
    """

    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    pool_window: int = 2


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int] = (32, 32)
    stages: tuple[StageSpec, ...] = (StageSpec(8), StageSpec(16), StageSpec(32))
    embed_channels: int = 32
    seed: int = 0

    def spatial_extents(self) -> list[tuple[int, int]]:
        """Feature-map size after each stage; raises if any extent collapses below 1."""
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ConfigError(f"input size must be at least 1x1, got {self.input_size}")
        if self.embed_channels < 1:
            raise ConfigError("embed_channels must be >= 1")
        extents = []
        for i, st in enumerate(self.stages, start=1):
            h = (h + 2 * st.padding - st.kernel_size) // st.stride + 1
            w = (w + 2 * st.padding - st.kernel_size) // st.stride + 1
            if h < 1 or w < 1:
                raise ConfigError(f"stage {i} conv collapses spatial extent to {h}x{w}")
            if st.pool_window > 1:
                if st.pool_window > h or st.pool_window > w:
                    raise ConfigError(f"stage {i} pool window {st.pool_window} exceeds extent {h}x{w}")
                h //= st.pool_window
                w //= st.pool_window
            extents.append((h, w))
        return extents

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "stages": [[s.out_channels, s.kernel_size, s.stride, s.padding, s.pool_window]
                       for s in self.stages],
            "embed_channels": self.embed_channels,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkConfig":
        return NetworkConfig(
            input_size=tuple(d["input_size"]),
            stages=tuple(StageSpec(*row) for row in d["stages"]),
            embed_channels=int(d["embed_channels"]),
            seed=int(d["seed"]),
        )


@dataclass
class ModelParams:
    """Named parameter tensors plus the architecture config that shaped them."""

    config: NetworkConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _stage_names(config: NetworkConfig) -> list[str]:
    return [f"conv{i}" for i in range(1, len(config.stages) + 1)]


def _expected_tensor_names(config: NetworkConfig) -> set[str]:
    names = set()
    for stage in _stage_names(config):
        names.add(f"{stage}.kernel")
        names.add(f"{stage}.bias")
    names.update({"embed.kernel", "embed.bias", "score.weight", "score.bias"})
    return names


def init_network(config: NetworkConfig) -> ModelParams:
    """He-style init: kernels ~ N(0, 2/fan_in), biases zero. Deterministic in seed."""
    config.spatial_extents()  # validate before allocating
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, np.ndarray] = {}
    cin = 1
    for name, st in zip(_stage_names(config), config.stages):
        fan_in = cin * st.kernel_size * st.kernel_size
        tensors[f"{name}.kernel"] = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), size=(st.out_channels, cin, st.kernel_size, st.kernel_size)
        )
        tensors[f"{name}.bias"] = np.zeros(st.out_channels)
        cin = st.out_channels
    tensors["embed.kernel"] = rng.normal(
        0.0, np.sqrt(2.0 / cin), size=(config.embed_channels, cin, 1, 1)
    )
    tensors["embed.bias"] = np.zeros(config.embed_channels)
    tensors["score.weight"] = rng.normal(
        0.0, np.sqrt(2.0 / config.embed_channels), size=(config.embed_channels, 1)
    )
    tensors["score.bias"] = np.zeros(1)
    return ModelParams(config=config, tensors=tensors)


@dataclass
class NetworkGraph:
    """A built forward graph: score/pooled outputs plus the parameter leaves."""

    scores: Node   # (B,)
    pooled: Node   # (B, embed_channels)
    leaves: dict[str, Node]
    batch: Node


def build_graph(params: ModelParams, batch, embed_hook=None) -> NetworkGraph:
    """Assemble the forward graph for a (B,1,H,W) batch.

    ``embed_hook``, if given, maps the post-embed activation array to an
    array of the same shape just before pooling. It is applied as a fresh
    leaf (gradients do not flow through it); intended for inference-time
    probes such as spatial-permutation invariance tests.
    """
    leaves = {name: dc.leaf(t) for name, t in params.tensors.items()}
    return build_graph_from_leaves(params.config, leaves, batch, embed_hook=embed_hook)


def build_graph_from_leaves(cfg: NetworkConfig, leaves: dict[str, Node], batch,
                            embed_hook=None) -> NetworkGraph:
    """Like build_graph but wires the forward pass onto caller-owned leaf nodes,
    so gradient-check drivers and the trainer can read grads off their own handles."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise dc.ShapeError(f"batch must have shape (B,1,H,W), got {batch.shape}")
    if batch.shape[2:] != tuple(cfg.input_size):
        raise dc.ShapeError(
            f"batch slices are {batch.shape[2]}x{batch.shape[3]}, config expects "
            f"{cfg.input_size[0]}x{cfg.input_size[1]}"
        )
    missing = _expected_tensor_names(cfg) - set(leaves)
    if missing:
        raise dc.ShapeError(f"missing parameter leaves: {sorted(missing)}")
    x = dc.leaf(batch)
    h = x
    for name, st in zip(_stage_names(cfg), cfg.stages):
        h = dc.relu(dc.conv2d(h, leaves[f"{name}.kernel"], leaves[f"{name}.bias"],
                              stride=st.stride, padding=st.padding))
        if st.pool_window > 1:
            h = dc.maxpool2d(h, st.pool_window, st.pool_window)
    h = dc.relu(dc.conv2d(h, leaves["embed.kernel"], leaves["embed.bias"]))
    if embed_hook is not None:
        h = dc.leaf(embed_hook(h.value))
    pooled = dc.global_avg_pool(h)
    out = dc.fully_connected(pooled, leaves["score.weight"], leaves["score.bias"])
    scores = dc.reshape(out, (batch.shape[0],))
    return NetworkGraph(scores=scores, pooled=pooled, leaves=leaves, batch=x)


def forward(params: ModelParams, batch, embed_hook=None) -> tuple[np.ndarray, np.ndarray]:
    """Score a batch of slices; returns (scores (B,), pooled features (B, C))."""
    graph = build_graph(params, batch, embed_hook=embed_hook)
    return graph.scores.value, graph.pooled.value


# ---------------------------------------------------------------------------
# checkpoint I/O


def _write_u32(f, v: int) -> None:
    f.write(struct.pack("<I", v))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}")
    return data


def _read_u32(f, what: str) -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a checkpoint container: JSON metadata plus named float64 tensors."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _write_u32(f, CHECKPOINT_VERSION)
        _write_u32(f, len(meta_bytes))
        f.write(meta_bytes)
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            name_bytes = name.encode("utf-8")
            _write_u32(f, len(name_bytes))
            f.write(name_bytes)
            _write_u32(f, arr.ndim)
            for extent in arr.shape:
                _write_u32(f, extent)
            f.write(arr.astype("<f8").tobytes(order="C"))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}, not a checkpoint file")
        version = _read_u32(f, "version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta_len = _read_u32(f, "metadata length")
        try:
            meta = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from exc
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint: partial tensor name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            rank = _read_u32(f, f"rank of {name}")
            shape = tuple(_read_u32(f, f"extent of {name}") for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            data = _read_exact(f, count * 8, f"data of {name}")
            tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return meta, tensors


def save_params(params: ModelParams, path) -> None:
    write_container(path, {"network": params.config.to_dict()}, params.tensors)


def load_params(path) -> ModelParams:
    """Load model parameters; the config always comes from the file.

    Optimizer state (names prefixed ``velocity.``) stored by the trainer
    is skipped.
    """
    meta, tensors = read_container(path)
    if "network" not in meta:
        raise CheckpointError("checkpoint metadata has no network section")
    config = NetworkConfig.from_dict(meta["network"])
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("velocity.")}
    missing = _expected_tensor_names(config) - set(model_tensors)
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return ModelParams(config=config, tensors=model_tensors)
