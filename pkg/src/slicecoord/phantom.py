"""Synthetic stack generator: smooth "body" slices with a hidden position
coordinate, plus anomaly injection for screening experiments.

Each volume covers a random subinterval [a, b] of a latent body axis [0, 1]
with a constant per-slice step. A slice at coordinate z is an analytic
composite of three structures whose geometry varies smoothly with z:

* a body disk whose radius grows with z,
* a marker disk whose brightness grows with z,
* a stack of bars whose count steps up with z.

Structures are evaluated on the continuous pixel grid (no rasterized
primitives), so any change in z changes edge pixel values at float
precision. Random per-slice shift and scale act as nuisance transforms;
they never push a structure's core out of frame and, being global
similarities, cannot merge separate structures, so the structure count
at a given z is invariant to them.

The latent coordinates are written to a separate sidecar file that the
training pipeline never reads; the volume container holds intensities only.

File formats (little-endian):
* volume container ``.ubrv``: magic ``UBRV``, u32 version, u32 n_slices,
  u32 H, u32 W, f64 spacing, then n_slices*H*W float64 intensities;
* manifest ``manifest.txt``: one ``id,path,n_slices,anomaly`` line per volume;
* latent sidecar ``latent.ubrz``: per volume u32 id length, id bytes,
  u32 n, n float64 coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import stable_sigmoid

VOLUME_MAGIC = b"UBRV"
VOLUME_VERSION = 1
MANIFEST_NAME = "manifest.txt"
SIDECAR_NAME = "latent.ubrz"

ANOMALY_KINDS = ("reversed-segment", "duplicated-slices", "shuffled", "corrupted-slices")


class PhantomError(ValueError):
    """Raised for invalid specs, anomaly parameters, or unreadable files."""


@dataclass(frozen=True)
class PhantomSpec:
    """Knobs for volume generation; defaults are the desk-scale setup."""

    image_size: tuple[int, int] = (32, 32)
    slices_range: tuple[int, int] = (40, 200)
    coordinate_span: tuple[float, float] = (0.5, 1.0)
    spacing_jitter: float = 0.1
    noise_sigma: float = 0.05
    translate_max: float = 4.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.slices_range
        if not (2 <= lo <= hi):
            raise PhantomError(f"slices_range needs 2 <= min <= max, got {self.slices_range}")
        a, b = self.coordinate_span
        if not (0.0 < a <= b <= 1.0):
            raise PhantomError(f"coordinate_span must satisfy 0 < min <= max <= 1, got {self.coordinate_span}")
        if self.noise_sigma < 0:
            raise PhantomError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.translate_max < 0:
            raise PhantomError(f"translate_max must be >= 0, got {self.translate_max}")
        s_lo, s_hi = self.scale_range
        if not (0.0 < s_lo <= s_hi):
            raise PhantomError(f"scale_range must satisfy 0 < min <= max, got {self.scale_range}")
        if not (0.0 <= self.spacing_jitter < 1.0):
            raise PhantomError(f"spacing_jitter must be in [0, 1), got {self.spacing_jitter}")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise PhantomError(f"image_size must be at least 8x8, got {self.image_size}")


@dataclass
class Volume:
    """One stack: intensities, hidden coordinates, nominal step, anomaly label."""

    volume_id: str
    slices: np.ndarray          # (n, H, W) in [0, 1]
    latent: np.ndarray          # (n,) hidden coordinates, never shown to training
    spacing: float
    anomaly: str = "none"


@dataclass(frozen=True)
class AnomalyKind:
    """An anomaly with optional explicit slice bounds [lo, hi)."""

    name: str
    lo: int | None = None
    hi: int | None = None
    amplitude: float = 1.0


@dataclass
class VolumeRecord:
    volume_id: str
    path: str
    n_slices: int
    anomaly: str


@dataclass
class Dataset:
    """An on-disk dataset loaded into memory; latent is None unless requested."""

    root: Path
    records: list[VolumeRecord]
    volumes: dict[str, np.ndarray]
    spacings: dict[str, float]
    latent: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.records)


def structure_count(z: float) -> int:
    """Expected number of distinct structures in a clean render at z."""
    return 2 + 1 + min(3, int(np.floor(4.0 * z)))


def render_structure(z: float, image_size: tuple[int, int], shift=(0.0, 0.0),
                     scale: float = 1.0) -> np.ndarray:
    """Noise-free scene at coordinate z, shifted (pixels) and scaled in-plane."""
    if not (0.0 <= z <= 1.0):
        raise PhantomError(f"latent coordinate must lie in [0, 1], got {z}")
    h, w = image_size
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    yg, xg = np.meshgrid(ys, xs, indexing="ij")
    # pixel shift -> normalized units; inverse-map the sampling grid
    yg = (yg - shift[0] * 2.0 / h) / scale
    xg = (xg - shift[1] * 2.0 / w) / scale

    # every layer below is monotone non-decreasing in z (brightness ramps,
    # growing radius, appearing bars), so each pixel is monotone in z and
    # structural distance between renders grows with the z separation.
    # sub-threshold background ramp: a frame-filling brightness carrier
    # that shift and scale cannot touch
    layers = [np.full((h, w), 0.12 + 0.15 * z)]
    # body disk: radius and brightness grow with z
    ra = 0.12 + 0.12 * z
    rho_a = np.hypot(yg + 0.40, xg + 0.40)
    bright_a = 0.45 + 0.45 * stable_sigmoid((z - 0.2) / 0.15)
    layers.append(bright_a * stable_sigmoid((ra - rho_a) / 0.05))
    # marker disk: fixed geometry, brightness ramps in later
    rho_b = np.hypot(yg + 0.36, xg - 0.40)
    bright_b = 0.45 + 0.45 * stable_sigmoid((z - 0.55) / 0.15)
    layers.append(bright_b * stable_sigmoid((0.15 - rho_b) / 0.05))
    # bar stack: count steps with z and each bar brightens over its own
    # lifetime; spacing keeps a below-threshold valley at least one pixel
    # row wide at the minimum in-plane scale
    n_bars = 1 + min(3, int(np.floor(4.0 * z)))
    bar_ends = stable_sigmoid((0.45 - np.abs(xg)) / 0.04)
    for i in range(n_bars):
        yc = 0.12 + 0.17 * i
        bright_i = 0.60 + 0.30 * stable_sigmoid((z - (0.15 + 0.22 * i)) / 0.15)
        layers.append(bright_i * np.exp(-((yg - yc) / 0.046) ** 2) * bar_ends)
    return np.max(layers, axis=0)


def render_slice(z: float, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """One observed slice: structure plus per-slice shift, scale, and noise.

    Draw order is fixed (shift y, shift x, scale, noise field) so renders
    are deterministic given the rng state.
    """
    spec.validate()
    shift = rng.uniform(-spec.translate_max, spec.translate_max, size=2)
    scale = rng.uniform(spec.scale_range[0], spec.scale_range[1])
    img = render_structure(z, spec.image_size, shift=(shift[0], shift[1]), scale=scale)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=spec.image_size)
    return np.clip(img, 0.0, 1.0)


def generate_volume(spec: PhantomSpec, rng: np.random.Generator,
                    volume_id: str = "vol") -> Volume:
    """Draw slice count, latent span, and per-slice renders for one clean stack.

    The spacing jitter perturbs the covered span once per volume, so the
    step stays constant within the volume and the endpoints are exact.
    """
    spec.validate()
    n = int(rng.integers(spec.slices_range[0], spec.slices_range[1] + 1))
    span = rng.uniform(spec.coordinate_span[0], spec.coordinate_span[1])
    span = span * rng.uniform(1.0 - spec.spacing_jitter, 1.0 + spec.spacing_jitter)
    span = min(span, 1.0)
    a = rng.uniform(0.0, 1.0 - span)
    latent = np.linspace(a, a + span, n)
    spacing = span / (n - 1)
    slices = np.stack([render_slice(z, spec, rng) for z in latent])
    return Volume(volume_id=volume_id, slices=slices, latent=latent, spacing=spacing)


# ---------------------------------------------------------------------------
# anomaly injection


def _segment_bounds(kind: AnomalyKind, n: int, rng: np.random.Generator) -> tuple[int, int]:
    if kind.lo is None or kind.hi is None:
        max_len = max(2, n // 2)
        min_len = min(max(2, n // 5), max_len)
        length = int(rng.integers(min_len, max_len + 1))
        lo = int(rng.integers(0, n - length + 1))
        return lo, lo + length
    lo, hi = int(kind.lo), int(kind.hi)
    if not (0 <= lo < hi <= n) or hi - lo < 2:
        raise PhantomError(f"anomaly segment [{lo}, {hi}) infeasible for a {n}-slice volume")
    return lo, hi


def _corruption_pattern(shape: tuple[int, int], amplitude: float,
                        rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    yg, xg = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    fy, fx = rng.uniform(2.0, 6.0, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    bands = np.sin(2.0 * np.pi * (fy * yg + fx * xg) + phase)
    img = 0.5 + 0.5 * amplitude * bands + rng.normal(0.0, 0.1, size=shape)
    return np.clip(img, 0.0, 1.0)


def inject_anomaly(volume: Volume, kind, rng: np.random.Generator) -> Volume:
    """Return a defective copy of the volume; the original is untouched.

    ``kind`` is an AnomalyKind or one of its names (random parameters then).
    Reversal and duplication carry the latent sidecar along; corruption
    leaves the latent untouched because only pixel content is damaged.
    """
    if isinstance(kind, str):
        kind = AnomalyKind(name=kind)
    if kind.name not in ANOMALY_KINDS:
        raise PhantomError(f"unknown anomaly kind {kind.name!r}, expected one of {ANOMALY_KINDS}")
    n = volume.slices.shape[0]
    slices = volume.slices.copy()
    latent = volume.latent.copy()

    if kind.name == "shuffled":
        perm = rng.permutation(n)
        slices = slices[perm]
        latent = latent[perm]
    elif kind.name == "reversed-segment":
        lo, hi = _segment_bounds(kind, n, rng)
        slices[lo:hi] = slices[lo:hi][::-1]
        latent[lo:hi] = latent[lo:hi][::-1]
    elif kind.name == "duplicated-slices":
        lo, hi = _segment_bounds(kind, n, rng)
        slices = np.concatenate([slices[:hi], slices[lo:hi], slices[hi:]])
        latent = np.concatenate([latent[:hi], latent[lo:hi], latent[hi:]])
    else:  # corrupted-slices
        lo, hi = _segment_bounds(kind, n, rng)
        for i in range(lo, hi):
            slices[i] = _corruption_pattern(slices[i].shape, kind.amplitude, rng)

    return Volume(volume_id=volume.volume_id, slices=slices, latent=latent,
                  spacing=volume.spacing, anomaly=kind.name)


# ---------------------------------------------------------------------------
# container and dataset I/O


def write_volume(path, slices: np.ndarray, spacing: float) -> None:
    slices = np.asarray(slices, dtype=np.float64)
    if slices.ndim != 3:
        raise PhantomError(f"volume array must be (n, H, W), got shape {slices.shape}")
    n, h, w = slices.shape
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<IIII", VOLUME_VERSION, n, h, w))
        f.write(struct.pack("<d", float(spacing)))
        f.write(slices.astype("<f8").tobytes(order="C"))


def read_volume(path) -> tuple[np.ndarray, float]:
    with open(path, "rb") as f:
        head = f.read(4)
        if head != VOLUME_MAGIC:
            raise PhantomError(f"{path}: bad magic {head!r}, not a volume container")
        raw = f.read(16)
        if len(raw) != 16:
            raise PhantomError(f"{path}: truncated header")
        version, n, h, w = struct.unpack("<IIII", raw)
        if version != VOLUME_VERSION:
            raise PhantomError(f"{path}: unsupported container version {version}")
        (spacing,) = struct.unpack("<d", f.read(8))
        data = f.read(n * h * w * 8)
        if len(data) != n * h * w * 8:
            raise PhantomError(f"{path}: truncated pixel data")
        slices = np.frombuffer(data, dtype="<f8").reshape(n, h, w).copy()
    return slices, spacing


def write_sidecar(path, latent_by_id: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        for volume_id, z in latent_by_id.items():
            z = np.asarray(z, dtype=np.float64)
            id_bytes = volume_id.encode("utf-8")
            f.write(struct.pack("<I", len(id_bytes)))
            f.write(id_bytes)
            f.write(struct.pack("<I", z.size))
            f.write(z.astype("<f8").tobytes())


def read_sidecar(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise PhantomError(f"{path}: truncated sidecar record")
            (id_len,) = struct.unpack("<I", head)
            volume_id = f.read(id_len).decode("utf-8")
            (n,) = struct.unpack("<I", f.read(4))
            data = f.read(n * 8)
            if len(data) != n * 8:
                raise PhantomError(f"{path}: truncated latent values for {volume_id}")
            out[volume_id] = np.frombuffer(data, dtype="<f8").copy()
    return out


def write_dataset(volumes: list[Volume], out_dir) -> Path:
    """Write containers, manifest, and the latent sidecar; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    latent_by_id: dict[str, np.ndarray] = {}
    for vol in volumes:
        fname = f"{vol.volume_id}.ubrv"
        write_volume(out_dir / fname, vol.slices, vol.spacing)
        latent_by_id[vol.volume_id] = vol.latent
        lines.append(f"{vol.volume_id},{fname},{vol.slices.shape[0]},{vol.anomaly}")
    write_sidecar(out_dir / SIDECAR_NAME, latent_by_id)
    manifest = out_dir / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def generate_dataset(n_volumes: int, spec: PhantomSpec, anomaly_fraction: float,
                     seed: int, out_dir, anomaly_kinds=ANOMALY_KINDS) -> Path:
    """Generate volumes, make a deterministic share of them anomalous, write all.

    The anomalous count is round(n_volumes * anomaly_fraction); which volumes
    are hit is a seeded draw, and kinds rotate round-robin so every requested
    kind gets a near-equal share.
    """
    if n_volumes < 1:
        raise PhantomError(f"n_volumes must be >= 1, got {n_volumes}")
    if not (0.0 <= anomaly_fraction <= 1.0):
        raise PhantomError(f"anomaly_fraction must be in [0, 1], got {anomaly_fraction}")
    spec.validate()
    root = np.random.SeedSequence(seed)
    picker = np.random.default_rng(root.spawn(1)[0])
    streams = root.spawn(n_volumes)
    volumes = []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        volumes.append(generate_volume(spec, rng, volume_id=f"vol{i:04d}"))
    n_anomalous = int(round(n_volumes * anomaly_fraction))
    hit = picker.permutation(n_volumes)[:n_anomalous]
    for slot, idx in enumerate(sorted(hit)):
        kind = anomaly_kinds[slot % len(anomaly_kinds)]
        volumes[idx] = inject_anomaly(volumes[idx], kind, picker)
    return write_dataset(volumes, out_dir)


def load_dataset(root, with_latent: bool = False) -> Dataset:
    """Read a dataset directory back; latent coordinates only on request."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise PhantomError(f"no {MANIFEST_NAME} in {root}")
    records = []
    volumes: dict[str, np.ndarray] = {}
    spacings: dict[str, float] = {}
    for line_no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise PhantomError(f"{manifest}:{line_no}: expected 4 fields, got {len(parts)}")
        volume_id, fname, n_str, anomaly = parts
        path = root / fname
        if not path.is_file():
            raise PhantomError(f"{manifest}:{line_no}: missing volume file {fname} for {volume_id}")
        slices, spacing = read_volume(path)
        if slices.shape[0] != int(n_str):
            raise PhantomError(
                f"{volume_id}: manifest says {n_str} slices, container has {slices.shape[0]}"
            )
        records.append(VolumeRecord(volume_id, fname, slices.shape[0], anomaly))
        volumes[volume_id] = slices
        spacings[volume_id] = spacing
    latent = None
    if with_latent:
        latent = read_sidecar(root / SIDECAR_NAME)
        missing = [r.volume_id for r in records if r.volume_id not in latent]
        if missing:
            raise PhantomError(f"sidecar lacks latent values for: {missing}")
    return Dataset(root=root, records=records, volumes=volumes, spacings=spacings, latent=latent)
