"""Tests for the synthetic volume generator and anomaly injection."""

import numpy as np
import pytest

from slicecoord import phantom as ph


def census(img, thresh=0.3):
    """Count 8-connected components above the threshold (independent oracle)."""
    mask = img > thresh
    seen = np.zeros_like(mask)
    count = 0
    h, w = mask.shape
    for si in range(h):
        for sj in range(w):
            if mask[si, sj] and not seen[si, sj]:
                count += 1
                stack = [(si, sj)]
                seen[si, sj] = True
                while stack:
                    i, j = stack.pop()
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            ni, nj = i + di, j + dj
                            if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not seen[ni, nj]:
                                seen[ni, nj] = True
                                stack.append((ni, nj))
    return count


def clean_spec(**overrides):
    base = dict(noise_sigma=0.0, translate_max=0.0, scale_range=(1.0, 1.0), spacing_jitter=0.0)
    base.update(overrides)
    return ph.PhantomSpec(**base)


# ---------------------------------------------------------------------------
# spec validation


def test_spec_validation_rejects_bad_fields():
    with pytest.raises(ph.PhantomError):
        ph.PhantomSpec(slices_range=(1, 10)).validate()
    with pytest.raises(ph.PhantomError):
        ph.PhantomSpec(slices_range=(50, 40)).validate()
    with pytest.raises(ph.PhantomError):
        ph.PhantomSpec(coordinate_span=(0.0, 0.5)).validate()
    with pytest.raises(ph.PhantomError):
        ph.PhantomSpec(coordinate_span=(0.5, 1.5)).validate()
    with pytest.raises(ph.PhantomError):
        ph.PhantomSpec(noise_sigma=-0.1).validate()
    with pytest.raises(ph.PhantomError):
        ph.PhantomSpec(scale_range=(0.0, 1.0)).validate()
    ph.PhantomSpec().validate()


# ---------------------------------------------------------------------------
# rendering


def test_render_structure_deterministic_in_z():
    a = ph.render_structure(0.37, (32, 32))
    b = ph.render_structure(0.37, (32, 32))
    assert np.array_equal(a, b)


def test_render_structure_rejects_out_of_range_z():
    with pytest.raises(ph.PhantomError):
        ph.render_structure(-0.01, (32, 32))
    with pytest.raises(ph.PhantomError):
        ph.render_structure(1.01, (32, 32))


def test_render_slice_deterministic_given_rng_state():
    spec = ph.PhantomSpec()
    a = ph.render_slice(0.5, spec, np.random.default_rng(42))
    b = ph.render_slice(0.5, spec, np.random.default_rng(42))
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_render_noise_free_is_bit_deterministic():
    spec = clean_spec()
    a = ph.render_slice(0.31, spec, np.random.default_rng(1))
    b = ph.render_slice(0.31, spec, np.random.default_rng(2))
    assert np.array_equal(a, b)


def test_structural_distance_monotone_in_coordinate_offset():
    deltas = np.arange(1, 13) * 0.025
    for z0 in (0.0, 0.2, 0.35, 0.5, 0.7):
        base = ph.render_structure(z0, (32, 32))
        dist = [float(np.mean(np.abs(ph.render_structure(z0 + d, (32, 32)) - base)))
                for d in deltas]
        assert all(a < b for a, b in zip(dist, dist[1:])), f"not monotone at z0={z0}"


def test_rendering_injective_in_z_at_fine_resolution():
    zs = np.linspace(0.0, 1.0, 257)  # adjacent pairs are 1/256 apart
    prev = ph.render_structure(float(zs[0]), (32, 32))
    for z in zs[1:]:
        cur = ph.render_structure(float(z), (32, 32))
        assert np.abs(cur - prev).max() > 0.0
        prev = cur


def test_structure_count_steps_with_z():
    assert ph.structure_count(0.0) == 3
    assert ph.structure_count(0.24) == 3
    assert ph.structure_count(0.25) == 4
    assert ph.structure_count(0.5) == 5
    assert ph.structure_count(0.75) == 6
    assert ph.structure_count(1.0) == 6


def test_census_matches_structure_count_on_clean_renders():
    for z in np.linspace(0.0, 1.0, 21):
        assert census(ph.render_structure(float(z), (32, 32))) == ph.structure_count(float(z))


def test_census_invariant_to_shift_and_scale():
    """Different nuisance transforms at the same z keep the structure count."""
    for z in (0.0, 0.26, 0.5, 0.76, 1.0):
        expect = ph.structure_count(z)
        for shift in ((-4.0, -4.0), (4.0, 4.0), (-4.0, 4.0), (0.0, 0.0)):
            for scale in (0.9, 1.0, 1.1):
                img = ph.render_structure(z, (32, 32), shift=shift, scale=scale)
                assert census(img) == expect, (z, shift, scale)


def test_shifted_renders_differ_in_pixels():
    a = ph.render_structure(0.4, (32, 32), shift=(0.0, 0.0))
    b = ph.render_structure(0.4, (32, 32), shift=(2.0, -3.0))
    assert not np.array_equal(a, b)


# ---------------------------------------------------------------------------
# volume generation


def test_generate_volume_endpoints_and_constant_step():
    spec = ph.PhantomSpec()
    for seed in range(5):
        vol = ph.generate_volume(spec, np.random.default_rng(seed))
        z = vol.latent
        n = z.size
        assert spec.slices_range[0] <= n <= spec.slices_range[1]
        assert 0.0 <= z[0] < z[-1] <= 1.0
        steps = np.diff(z)
        assert np.all(steps > 0)
        assert steps.max() - steps.min() < 1e-12
        assert abs(steps.mean() - vol.spacing) < 1e-12
        assert vol.slices.shape == (n, *spec.image_size)
        assert vol.slices.min() >= 0.0 and vol.slices.max() <= 1.0


def test_generate_volume_latent_perfectly_linear_in_index():
    vol = ph.generate_volume(ph.PhantomSpec(), np.random.default_rng(3))
    r = np.corrcoef(np.arange(vol.latent.size, dtype=float), vol.latent)[0, 1]
    assert r == 1.0


def test_generate_volume_same_seed_identical():
    spec = ph.PhantomSpec()
    a = ph.generate_volume(spec, np.random.default_rng(7))
    b = ph.generate_volume(spec, np.random.default_rng(7))
    assert np.array_equal(a.slices, b.slices)
    assert np.array_equal(a.latent, b.latent)
    assert a.spacing == b.spacing


def test_volume_spans_cover_latent_axis():
    spans = []
    root = np.random.SeedSequence(11)
    spec = ph.PhantomSpec(slices_range=(5, 10))  # short volumes keep this fast
    for stream in root.spawn(100):
        vol = ph.generate_volume(spec, np.random.default_rng(stream))
        spans.append((vol.latent[0], vol.latent[-1]))
    grid = np.linspace(0.0, 1.0, 2001)
    covered = np.zeros(grid.size, dtype=bool)
    for a, b in spans:
        covered |= (grid >= a) & (grid <= b)
    assert covered.mean() >= 0.99


# ---------------------------------------------------------------------------
# anomaly injection


def small_volume(n=40, seed=0):
    spec = clean_spec(slices_range=(n, n), image_size=(16, 16))
    return ph.generate_volume(spec, np.random.default_rng(seed), volume_id="t")


def test_reversed_whole_volume_latent_strictly_decreasing():
    vol = small_volume()
    out = ph.inject_anomaly(vol, ph.AnomalyKind("reversed-segment", lo=0, hi=40),
                            np.random.default_rng(0))
    assert np.all(np.diff(out.latent) < 0)
    assert np.array_equal(out.slices, vol.slices[::-1])
    assert out.anomaly == "reversed-segment"
    assert np.all(np.diff(vol.latent) > 0)  # original untouched


def test_reversed_segment_touches_only_the_segment():
    vol = small_volume()
    out = ph.inject_anomaly(vol, ph.AnomalyKind("reversed-segment", lo=10, hi=20),
                            np.random.default_rng(0))
    assert np.array_equal(out.latent[:10], vol.latent[:10])
    assert np.array_equal(out.latent[20:], vol.latent[20:])
    assert np.array_equal(out.latent[10:20], vol.latent[10:20][::-1])
    assert np.array_equal(out.slices[10:20], vol.slices[10:20][::-1])


def test_duplicated_block_repeats_latent_verbatim():
    vol = small_volume()
    out = ph.inject_anomaly(vol, ph.AnomalyKind("duplicated-slices", lo=5, hi=10),
                            np.random.default_rng(0))
    assert out.slices.shape[0] == 45
    assert np.array_equal(out.latent[5:10], out.latent[10:15])
    assert np.array_equal(out.slices[5:10], out.slices[10:15])
    assert np.array_equal(out.latent[15:], vol.latent[10:])


def test_shuffled_decorrelates_position_from_latent():
    flips = 0
    trials = 300
    vol = small_volume(n=40)
    idx = np.arange(40, dtype=float)
    rng = np.random.default_rng(5)
    for _ in range(trials):
        out = ph.inject_anomaly(vol, "shuffled", rng)
        r = np.corrcoef(idx, out.latent)[0, 1]
        if abs(r) >= 0.5:
            flips += 1
    assert flips / trials < 0.01


def test_shuffled_keeps_slice_latent_pairing():
    vol = small_volume(n=30)
    out = ph.inject_anomaly(vol, "shuffled", np.random.default_rng(1))
    order = np.argsort(out.latent)
    assert np.array_equal(out.latent[order], vol.latent)
    assert np.array_equal(out.slices[order], vol.slices)


def test_corrupted_slices_overwrite_block_latent_untouched():
    vol = small_volume()
    out = ph.inject_anomaly(vol, ph.AnomalyKind("corrupted-slices", lo=8, hi=14),
                            np.random.default_rng(2))
    assert np.array_equal(out.latent, vol.latent)
    assert np.array_equal(out.slices[:8], vol.slices[:8])
    assert np.array_equal(out.slices[14:], vol.slices[14:])
    for i in range(8, 14):
        assert not np.array_equal(out.slices[i], vol.slices[i])
        assert out.slices[i].min() >= 0.0 and out.slices[i].max() <= 1.0


def test_inject_anomaly_rejects_bad_parameters():
    vol = small_volume()
    rng = np.random.default_rng(0)
    with pytest.raises(ph.PhantomError):
        ph.inject_anomaly(vol, ph.AnomalyKind("reversed-segment", lo=30, hi=50), rng)
    with pytest.raises(ph.PhantomError):
        ph.inject_anomaly(vol, ph.AnomalyKind("duplicated-slices", lo=5, hi=6), rng)
    with pytest.raises(ph.PhantomError):
        ph.inject_anomaly(vol, "melted", rng)


# ---------------------------------------------------------------------------
# container and dataset I/O


def test_volume_container_round_trip(tmp_path):
    vol = small_volume(n=12)
    path = tmp_path / "v.ubrv"
    ph.write_volume(path, vol.slices, vol.spacing)
    slices, spacing = ph.read_volume(path)
    assert np.array_equal(slices, vol.slices)
    assert spacing == vol.spacing


def test_volume_container_rejects_corruption(tmp_path):
    vol = small_volume(n=6)
    path = tmp_path / "v.ubrv"
    ph.write_volume(path, vol.slices, vol.spacing)
    raw = path.read_bytes()
    (tmp_path / "bad_magic.ubrv").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ph.PhantomError):
        ph.read_volume(tmp_path / "bad_magic.ubrv")
    (tmp_path / "short.ubrv").write_bytes(raw[:-8])
    with pytest.raises(ph.PhantomError):
        ph.read_volume(tmp_path / "short.ubrv")


def test_sidecar_round_trip(tmp_path):
    latent = {"a": np.linspace(0, 1, 7), "b": np.array([0.5])}
    path = tmp_path / "latent.ubrz"
    ph.write_sidecar(path, latent)
    back = ph.read_sidecar(path)
    assert set(back) == {"a", "b"}
    assert np.array_equal(back["a"], latent["a"])
    assert np.array_equal(back["b"], latent["b"])


def test_generate_dataset_layout_and_manifest(tmp_path):
    spec = clean_spec(slices_range=(8, 12), image_size=(16, 16))
    manifest = ph.generate_dataset(10, spec, 0.0, seed=3, out_dir=tmp_path / "d")
    lines = [ln for ln in manifest.read_text().splitlines() if ln.strip()]
    assert len(lines) == 10
    for line in lines:
        vid, fname, n, anomaly = line.split(",")
        assert anomaly == "none"
        assert (tmp_path / "d" / fname).is_file()
        assert int(n) >= 8


def test_generate_dataset_anomaly_count_and_kind_rotation(tmp_path):
    spec = clean_spec(slices_range=(10, 14), image_size=(16, 16))
    kinds = ("shuffled", "reversed-segment", "duplicated-slices")
    manifest = ph.generate_dataset(20, spec, 0.25, seed=9, out_dir=tmp_path / "d",
                                   anomaly_kinds=kinds)
    labels = [ln.split(",")[3] for ln in manifest.read_text().splitlines() if ln.strip()]
    marked = [a for a in labels if a != "none"]
    assert len(marked) == 5  # round(20 * 0.25)
    assert set(marked) <= set(kinds)
    # round-robin: counts differ by at most one
    counts = [marked.count(k) for k in kinds]
    assert max(counts) - min(counts) <= 1


def test_generate_dataset_deterministic(tmp_path):
    spec = clean_spec(slices_range=(6, 9), image_size=(16, 16))
    ph.generate_dataset(6, spec, 0.5, seed=4, out_dir=tmp_path / "a")
    ph.generate_dataset(6, spec, 0.5, seed=4, out_dir=tmp_path / "b")
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_load_dataset_round_trip_and_latent_opt_in(tmp_path):
    spec = clean_spec(slices_range=(8, 10), image_size=(16, 16))
    ph.generate_dataset(5, spec, 0.2, seed=8, out_dir=tmp_path / "d")
    ds = ph.load_dataset(tmp_path / "d")
    assert len(ds) == 5
    assert ds.latent is None
    assert set(ds.volumes) == {r.volume_id for r in ds.records}
    with_z = ph.load_dataset(tmp_path / "d", with_latent=True)
    for rec in with_z.records:
        assert with_z.latent[rec.volume_id].size == rec.n_slices


def test_load_dataset_errors(tmp_path):
    with pytest.raises(ph.PhantomError):
        ph.load_dataset(tmp_path)  # no manifest
    spec = clean_spec(slices_range=(5, 6), image_size=(16, 16))
    ph.generate_dataset(2, spec, 0.0, seed=1, out_dir=tmp_path / "d")
    (tmp_path / "d" / "vol0001.ubrv").unlink()
    with pytest.raises(ph.PhantomError):
        ph.load_dataset(tmp_path / "d")


def test_training_visible_files_hold_no_latent_values(tmp_path):
    """The volume container must not embed the sidecar's coordinate bytes."""
    spec = clean_spec(slices_range=(10, 10), image_size=(16, 16))
    ph.generate_dataset(3, spec, 0.0, seed=6, out_dir=tmp_path / "d")
    latent = ph.read_sidecar(tmp_path / "d" / ph.SIDECAR_NAME)
    for vid, z in latent.items():
        raw = (tmp_path / "d" / f"{vid}.ubrv").read_bytes()
        assert z.astype("<f8").tobytes() not in raw
        # even a short prefix of the coordinate array must be absent
        assert z[:3].astype("<f8").tobytes() not in raw
