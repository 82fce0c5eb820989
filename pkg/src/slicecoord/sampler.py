"""Training-group sampling: g volumes, m equidistant slices each.

Per group the sampler draws g volume picks in one vectorized call
(uniform with replacement over volumes long enough to host m slices),
then per picked volume an interval k uniform over its feasible range
and a start j uniform over [0, n-1-k*(m-1)]. The fixed draw order
(volumes, then k and j per volume) makes groups reproducible from the
generator state alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import Dataset


class SamplerError(ValueError):
    """Raised for unsatisfiable sampling requests or malformed entries."""


@dataclass(frozen=True)
class SamplerConfig:
    g: int = 12
    m: int = 8
    seed: int = 0
    max_interval: int | None = None

    def validate(self) -> None:
        if self.g < 1:
            raise SamplerError(f"g must be >= 1, got {self.g}")
        if self.m < 2:
            raise SamplerError(f"m must be >= 2, got {self.m}")
        if self.max_interval is not None and self.max_interval < 1:
            raise SamplerError(f"max_interval must be >= 1, got {self.max_interval}")


@dataclass
class SampleGroup:
    """g lists of (volume-id, slice-index) pairs plus the assembled pixels.

    Pixel rows are volume-major then ascending slice index, matching the
    (g, m) score-table layout after reshape.
    """

    entries: list[list[tuple[str, int]]]
    pixels: np.ndarray  # (g*m, 1, H, W)


def sample_group(dataset: Dataset, config: SamplerConfig, rng: np.random.Generator) -> SampleGroup:
    config.validate()
    m = config.m
    eligible = [i for i, rec in enumerate(dataset.records) if rec.n_slices >= m]
    if not eligible:
        longest = max((rec.n_slices for rec in dataset.records), default=0)
        raise SamplerError(
            f"no volume has at least m={m} slices; the longest volume has {longest}"
        )
    picks = rng.integers(0, len(eligible), size=config.g)
    entries: list[list[tuple[str, int]]] = []
    for pick in picks:
        rec = dataset.records[eligible[pick]]
        n = rec.n_slices
        k_max = (n - 1) // (m - 1)
        if config.max_interval is not None:
            k_max = min(k_max, config.max_interval)
        k = int(rng.integers(1, k_max + 1))
        j = int(rng.integers(0, n - k * (m - 1)))
        entries.append([(rec.volume_id, j + k * t) for t in range(m)])
    return SampleGroup(entries=entries, pixels=assemble_pixels(dataset, entries))


def assemble_pixels(dataset: Dataset, entries: list[list[tuple[str, int]]]) -> np.ndarray:
    """Stack the referenced slices as (g*m, 1, H, W), enforcing entry invariants."""
    rows = []
    for group_idx, entry in enumerate(entries):
        if len(entry) < 2:
            raise SamplerError(f"entry {group_idx} has {len(entry)} slices, need at least 2")
        indices = np.array([idx for _, idx in entry])
        steps = np.diff(indices)
        if not (np.all(steps == steps[0]) and steps[0] >= 1):
            raise SamplerError(
                f"entry {group_idx} indices {indices.tolist()} are not ascending equidistant"
            )
        for volume_id, idx in entry:
            if volume_id not in dataset.volumes:
                raise SamplerError(f"volume {volume_id!r} not present in the dataset")
            vol = dataset.volumes[volume_id]
            if not (0 <= idx < vol.shape[0]):
                raise SamplerError(
                    f"slice index {idx} out of bounds for volume {volume_id!r} "
                    f"with {vol.shape[0]} slices"
                )
            rows.append(vol[idx])
    pixels = np.stack(rows)[:, None, :, :]
    return pixels
