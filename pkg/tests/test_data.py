"""Dataset generation, corruption ladders, normalization, and streams."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcsr.corruptions import KINDS, CorruptionSpec, corrupt
from pcsr.data import SyntheticSpec, generate_split, load_split, make_dataset, normalize, read_manifest
from pcsr.errors import ConfigError, FormatError
from pcsr.stream import (
    StreamManifest,
    StreamSegment,
    build_stream,
    mixed_manifest,
    sequential_manifest,
    single_domain_manifest,
    stream_from_arrays,
)

SMALL = SyntheticSpec(n_classes=8, n_train=64, n_test=48, image_size=32, seed=1)


# -- dataset -----------------------------------------------------------------


def test_make_dataset_layout_and_labels(tmp_path):
    out = make_dataset(SMALL, tmp_path / "data")
    images, labels = load_split(out, "train")
    assert images.shape == (64, 3, 32, 32)
    assert len(labels) == 64
    assert labels.min() == 0 and labels.max() == 7
    assert images.min() >= 0.0 and images.max() <= 1.0
    manifest = read_manifest(out)
    assert manifest["n_classes"] == "8"
    assert manifest["split.test.count"] == "48"


def test_make_dataset_is_reproducible(tmp_path):
    a = make_dataset(SMALL, tmp_path / "a")
    b = make_dataset(SMALL, tmp_path / "b")
    for rel in ("train/images.pcsr-tensor", "train/labels.csv",
                "test/images.pcsr-tensor", "manifest.txt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_splits_differ():
    train, _ = generate_split(SMALL, "train")
    test, _ = generate_split(SMALL, "test")
    assert not np.array_equal(train[:48], test)


def test_missing_files_raise(tmp_path):
    with pytest.raises(FormatError):
        load_split(tmp_path, "test")


# -- corruption ---------------------------------------------------------------


def _sample_images(n=100, seed=0):
    spec = SyntheticSpec(n_train=n, n_test=8, seed=seed)
    images, _ = generate_split(spec, "train")
    return images


def test_severity_zero_is_identity():
    img = _sample_images(1)[0]
    for kind in KINDS:
        out = corrupt(img, CorruptionSpec(kind, 0, seed=3))
        np.testing.assert_array_equal(out, img)


def test_corruption_determinism():
    img = _sample_images(1)[0]
    for kind in KINDS:
        spec = CorruptionSpec(kind, 5, seed=11)
        a = corrupt(img, spec)
        b = corrupt(img, spec)
        assert a.tobytes() == b.tobytes()


def test_corruption_bounds_and_dtype():
    img = _sample_images(4)
    for kind in KINDS:
        for severity in (1, 3, 5):
            out = corrupt(img[0], CorruptionSpec(kind, severity, seed=7))
            assert out.dtype == np.float32
            assert out.min() >= 0.0 and out.max() <= 1.0


def test_mean_abs_change_monotone_in_severity():
    images = _sample_images(100, seed=5)
    for kind in KINDS:
        changes = []
        for severity in range(1, 6):
            spec = CorruptionSpec(kind, severity, seed=13)
            delta = [np.abs(corrupt(img, spec) - img).mean() for img in images]
            changes.append(float(np.mean(delta)))
        for lo, hi in zip(changes, changes[1:]):
            assert hi >= lo - 1e-9, f"{kind}: {changes}"


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        CorruptionSpec("fog", 3)
    with pytest.raises(ConfigError):
        CorruptionSpec("gaussian_noise", 6)


# -- normalize ------------------------------------------------------------------


def test_normalize_anchor_points():
    out = normalize(np.array([0.5, 1.0, 0.0], dtype=np.float32))
    np.testing.assert_allclose(out, [0.0, 1.0, -1.0], atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_normalize_range_property(pixel):
    out = float(normalize(np.array([pixel], dtype=np.float32))[0])
    assert -1.0 <= out <= 1.0


# -- streams ---------------------------------------------------------------------


def _loaded(tmp_path):
    spec = SyntheticSpec(n_classes=8, n_train=8, n_test=1000, image_size=32, seed=2)
    out = make_dataset(spec, tmp_path / "ds")
    return out


def test_stream_batch_count_and_partial_tail(tmp_path):
    ds = _loaded(tmp_path)
    manifest = single_domain_manifest(1000, CorruptionSpec("gaussian_noise", 3, seed=1),
                                      batch_size=64, seed=0)
    batches = list(build_stream(ds, manifest))
    assert len(batches) == 16
    assert all(len(b.labels) == 64 for b in batches[:-1])
    assert len(batches[-1].labels) == 40


def test_stream_order_matches_manifest(tmp_path):
    ds = _loaded(tmp_path)
    manifest = single_domain_manifest(100, None, batch_size=32, seed=9)
    batches = list(build_stream(ds, manifest))
    streamed = np.concatenate([b.indices for b in batches])
    np.testing.assert_array_equal(streamed, manifest.segments[0].indices)


def test_mixed_manifest_alternates_domains(tmp_path):
    ds = _loaded(tmp_path)
    manifest = mixed_manifest(
        256,
        [CorruptionSpec("gaussian_noise", 3, seed=1), CorruptionSpec("contrast", 4, seed=1)],
        batch_size=64, seed=3,
    )
    batches = list(build_stream(ds, manifest))
    domains = [b.domain for b in batches]
    assert domains == ["gaussian_noise-s3", "contrast-s4"] * 2


def test_stream_single_pass_consumes_each_sample_once(tmp_path):
    ds = _loaded(tmp_path)
    manifest = single_domain_manifest(1000, CorruptionSpec("contrast", 2, seed=5),
                                      batch_size=64, seed=1)
    seen = np.concatenate([b.indices for b in build_stream(ds, manifest)])
    assert len(seen) == 1000
    assert len(np.unique(seen)) == 1000


def test_stream_corruption_independent_of_batch_size(tmp_path):
    ds = _loaded(tmp_path)
    spec = CorruptionSpec("gaussian_noise", 4, seed=21)
    indices = np.arange(48)
    seg = StreamSegment(domain=spec.domain_label, corruption=spec, indices=indices)
    small = list(stream_from_arrays(*_split(ds), StreamManifest((seg,), batch_size=16)))
    large = list(stream_from_arrays(*_split(ds), StreamManifest((seg,), batch_size=48)))
    got_small = np.concatenate([b.images for b in small])
    got_large = np.concatenate([b.images for b in large])
    assert got_small.tobytes() == got_large.tobytes()


def _split(ds):
    return load_split(ds, "test")


def test_sequential_manifest_keeps_per_domain_indices(tmp_path):
    manifest = sequential_manifest(
        100,
        [CorruptionSpec("gaussian_noise", 3, seed=1), CorruptionSpec("contrast", 3, seed=1)],
        batch_size=32, seed=4,
    )
    swapped = sequential_manifest(
        100,
        [CorruptionSpec("contrast", 3, seed=1), CorruptionSpec("gaussian_noise", 3, seed=1)],
        batch_size=32, seed=4,
    )
    # Each domain segment gets its own per-position shuffle; position 0 across
    # both manifests uses the same seed stream.
    np.testing.assert_array_equal(manifest.segments[0].indices, swapped.segments[0].indices)


def test_stream_normalized_range(tmp_path):
    ds = _loaded(tmp_path)
    manifest = single_domain_manifest(64, CorruptionSpec("brightness", 5, seed=2),
                                      batch_size=64, seed=0)
    batch = next(iter(build_stream(ds, manifest)))
    assert batch.images.min() >= -1.0 and batch.images.max() <= 1.0
