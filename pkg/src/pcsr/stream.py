"""Stream assembly: ordered corrupted batches over a dataset's test split.

A manifest is an ordered list of segments, each binding a domain label, an
optional corruption, and the exact sample indices it covers. Batches never
span segments, corruption randomness is derived per (segment seed, sample
index) so a sample's corrupted pixels do not depend on batch position, and
iteration order is exactly manifest order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corruptions import CorruptionSpec, corrupt
from .data import load_split, normalize
from .errors import ConfigError

CLEAN_DOMAIN = "clean"


@dataclass(frozen=True)
class StreamSegment:
    domain: str
    corruption: CorruptionSpec | None
    indices: np.ndarray  # test-split sample indices, in streaming order


@dataclass(frozen=True)
class StreamManifest:
    segments: tuple[StreamSegment, ...]
    batch_size: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def total_samples(self) -> int:
        return sum(len(s.indices) for s in self.segments)

    def domain_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for seg in self.segments:
            counts[seg.domain] = counts.get(seg.domain, 0) + len(seg.indices)
        return counts

    def summary_lines(self) -> list[str]:
        """Key=value description for config echoes (indices come from seeds)."""
        lines = [f"stream.batch_size={self.batch_size}",
                 f"stream.total_samples={self.total_samples}",
                 f"stream.segments={len(self.segments)}"]
        for i, seg in enumerate(self.segments):
            kind = seg.corruption.kind if seg.corruption else "none"
            severity = seg.corruption.severity if seg.corruption else 0
            lines.append(
                f"stream.segment.{i}={seg.domain}:{kind}:{severity}:{len(seg.indices)}"
            )
        return lines


@dataclass(frozen=True)
class StreamBatch:
    """One streamed batch. `labels` exist for metrics only; the adaptation
    path receives just `images`."""

    images: np.ndarray   # normalized, [b,3,S,S]
    labels: np.ndarray   # int64 [b]
    domain: str
    indices: np.ndarray  # test-split indices of these samples


def single_domain_manifest(n_samples: int, corruption: CorruptionSpec | None,
                           batch_size: int, seed: int) -> StreamManifest:
    """One domain over a shuffled pass of the whole test split."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xD0])).permutation(n_samples)
    domain = corruption.domain_label if corruption else CLEAN_DOMAIN
    return StreamManifest(
        segments=(StreamSegment(domain=domain, corruption=corruption, indices=order),),
        batch_size=batch_size,
    )


def sequential_manifest(n_samples: int, corruptions: list[CorruptionSpec | None],
                        batch_size: int, seed: int) -> StreamManifest:
    """Domain after domain, each over its own shuffled pass of the test split."""
    segments = []
    for i, spec in enumerate(corruptions):
        order = np.random.default_rng(np.random.SeedSequence([seed, 0xD0, i])).permutation(n_samples)
        domain = spec.domain_label if spec else CLEAN_DOMAIN
        segments.append(StreamSegment(domain=domain, corruption=spec, indices=order))
    return StreamManifest(segments=tuple(segments), batch_size=batch_size)


def mixed_manifest(n_samples: int, corruptions: list[CorruptionSpec],
                   batch_size: int, seed: int) -> StreamManifest:
    """Interleave domains at batch granularity over one pass of the test split."""
    if len(corruptions) < 2:
        raise ConfigError("mixed streams need at least two corruption domains")
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xD0])).permutation(n_samples)
    segments = []
    for b, start in enumerate(range(0, n_samples, batch_size)):
        spec = corruptions[b % len(corruptions)]
        segments.append(StreamSegment(
            domain=spec.domain_label,
            corruption=spec,
            indices=order[start:start + batch_size],
        ))
    return StreamManifest(segments=tuple(segments), batch_size=batch_size)


def build_stream(dataset_dir: str | Path, manifest: StreamManifest):
    """Yield StreamBatch objects in manifest order from the test split."""
    images, labels = load_split(dataset_dir, "test")
    return stream_from_arrays(images, labels, manifest)


def stream_from_arrays(images: np.ndarray, labels: np.ndarray,
                       manifest: StreamManifest):
    n = len(images)
    for seg in manifest.segments:
        if len(seg.indices) and (seg.indices.min() < 0 or seg.indices.max() >= n):
            raise ConfigError(
                f"segment {seg.domain!r} references indices outside 0..{n - 1}"
            )
        for start in range(0, len(seg.indices), manifest.batch_size):
            idx = seg.indices[start:start + manifest.batch_size]
            batch = np.empty((len(idx),) + images.shape[1:], dtype=np.float32)
            for row, sample_index in enumerate(idx):
                raw = images[sample_index]
                if seg.corruption is not None:
                    per_sample = replace(seg.corruption,
                                         seed=_sample_seed(seg.corruption.seed, int(sample_index)))
                    raw = corrupt(raw, per_sample)
                batch[row] = raw
            yield StreamBatch(
                images=normalize(batch),
                labels=labels[idx],
                domain=seg.domain,
                indices=idx.copy(),
            )


def _sample_seed(base_seed: int, sample_index: int) -> int:
    # Stable per-sample corruption seed, independent of batch position.
    return int(np.random.SeedSequence([base_seed, sample_index]).generate_state(1)[0])
