import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_link, random_scene_grids
from recipnet.profile import (IDENTITY, REFLECTED, PathProfileTensor, ProfileConfig,
                              assemble_profile, build_profile, extract_patch, profile_from_bytes,
                              profile_to_bytes)
from recipnet.raster_io import LinkRecord
from recipnet.transforms import (PER_BAND, AugmentationPlan, augment_dataset, reflect,
                                 reflect_patch)

CFG = ProfileConfig(length_samples=32, transverse_samples=8, transverse_halfwidth=14.0)


def sample_profiles(seed, count):
    dtm, dsm = random_scene_grids(seed)
    rng = np.random.default_rng(seed)
    freqs = [449.0, 915.0, 1802.0, 2695.0, 3602.0, 5850.0]
    return [build_profile(dsm, dtm, random_link(rng, freq=float(rng.choice(freqs))), CFG)
            for _ in range(count)]


def test_involution():
    for p in sample_profiles(1, 30):
        q = reflect(reflect(p))
        assert np.max(np.abs(q.channels - p.channels)) <= 1e-6
        assert q.link == p.link and q.orientation_tag == p.orientation_tag and q.config == p.config


def test_direct_path_endpoints_swap():
    cfg = ProfileConfig(length_samples=256, transverse_samples=8, transverse_halfwidth=14.0)
    from conftest import flat_grid
    g = flat_grid(100.0)
    link = LinkRecord(40.0, 120.0, 200.0, 120.0, 17.0, 1.5, 900.0, 110.0)
    p = build_profile(g, g, link, cfg)
    r = reflect(p)
    # heights relative to the minimum terrain (100 m)
    assert r.channels[0, 0, 0] * cfg.h_max == pytest.approx(1.5, abs=1e-5)
    assert p.channels[0, -1, 0] * cfg.h_max == pytest.approx(1.5, abs=1e-5)
    assert r.channels[0, -1, 0] * cfg.h_max == pytest.approx(17.0, abs=1e-5)
    assert r.channels[0, 0, 0] == p.channels[0, -1, -1]


def test_distance_channel_unchanged():
    for p in sample_profiles(2, 30):
        assert np.max(np.abs(reflect(p).channels[1].astype(np.float64) - p.channels[1])) <= 1e-9


def test_rotation_of_surface_and_metadata_swap():
    p = sample_profiles(3, 1)[0]
    r = reflect(p)
    np.testing.assert_array_equal(r.channels[2], p.channels[2][::-1, ::-1])
    np.testing.assert_array_equal(np.sort(r.channels[2].ravel()), np.sort(p.channels[2].ravel()))
    assert r.link == p.link.swapped()
    assert (p.orientation_tag, r.orientation_tag) == (IDENTITY, REFLECTED)


def test_reflection_commutes_with_normalization():
    dtm, dsm = random_scene_grids(4)
    rng = np.random.default_rng(4)
    for _ in range(20):
        link = random_link(rng)
        patch = extract_patch(dsm, dtm, link, CFG)
        a = reflect(assemble_profile(patch, link, CFG)).channels
        b = assemble_profile(reflect_patch(patch), link.swapped(), CFG).channels
        assert np.max(np.abs(a - b)) <= 1e-6


def test_reflect_equals_profile_of_swapped_link():
    # rotating the patch is the same as re-sampling the map for the swapped link
    dtm, dsm = random_scene_grids(6)
    rng = np.random.default_rng(6)
    for _ in range(10):
        link = random_link(rng)
        a = reflect(build_profile(dsm, dtm, link, CFG)).channels
        b = build_profile(dsm, dtm, link.swapped(), CFG).channels
        assert np.max(np.abs(a - b)) <= 1e-5


def test_reflected_round_trips_through_file():
    r = reflect(sample_profiles(5, 1)[0])
    back = profile_from_bytes(profile_to_bytes(r))
    assert back.orientation_tag == REFLECTED and back.channels.tobytes() == r.channels.tobytes()


# --------------------------------------------------------------------------
# augmentation

TINY = ProfileConfig(length_samples=2, transverse_samples=1, transverse_halfwidth=0.0)


def tiny_profiles(region, count, bands=("449", "915")):
    out = []
    for k in range(count):
        link = LinkRecord(0.0, 0.0, 100.0 + k, 0.0, 17.0, 1.5, 900.0, 100.0, region, bands[k % len(bands)])
        out.append(PathProfileTensor(np.full((4, 2, 1), k / max(count, 1), np.float32), link, IDENTITY, TINY))
    return out


def test_n_zero_is_identity():
    data = {"A": tiny_profiles("A", 10), "B": tiny_profiles("B", 5)}
    out = augment_dataset(data, AugmentationPlan(0, 1))
    assert out == data["A"] + data["B"]


def test_full_scale_counts():
    data = {r: tiny_profiles(r, 12000) for r in "ABCDE"}
    out = augment_dataset(data, AugmentationPlan(500, 7))
    assert len(out) == 62500
    extra = out[60000:]
    assert all(p.orientation_tag == REFLECTED for p in extra)
    assert all(p.orientation_tag == IDENTITY for p in out[:60000])
    for r in "ABCDE":
        assert sum(p.link.region_id == r for p in extra) == 500


def test_selection_deterministic_per_seed():
    data = {r: tiny_profiles(r, 200) for r in "AB"}
    key = lambda out: [(p.link.region_id, p.link.tx_x) for p in out[400:]]
    a = key(augment_dataset(data, AugmentationPlan(20, 3)))
    b = key(augment_dataset(data, AugmentationPlan(20, 3)))
    c = key(augment_dataset(data, AugmentationPlan(20, 4)))
    assert a == b and a != c


def test_input_not_mutated():
    data = {"A": tiny_profiles("A", 30)}
    before = [p.channels.copy() for p in data["A"]]
    ids = [id(p) for p in data["A"]]
    augment_dataset(data, AugmentationPlan(10, 0))
    assert [id(p) for p in data["A"]] == ids and len(data["A"]) == 30
    assert all(np.array_equal(a, p.channels) for a, p in zip(before, data["A"]))
    assert all(p.orientation_tag == IDENTITY for p in data["A"])


def test_n_exceeding_region_raises():
    with pytest.raises(ValueError):
        augment_dataset({"A": tiny_profiles("A", 3)}, AugmentationPlan(4, 0))


def test_per_band_stratified_counts():
    data = {"A": tiny_profiles("A", 300, bands=("449", "915", "1802"))}
    out = augment_dataset(data, AugmentationPlan(30, 0, PER_BAND))
    bands = [p.link.band_id for p in out[300:]]
    assert sorted(bands.count(b) for b in ("449", "915", "1802")) == [10, 10, 10]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 50), st.integers(0, 2**31 - 1))
def test_augment_sizes_property(n, seed):
    data = {"A": tiny_profiles("A", 50), "B": tiny_profiles("B", 60)}
    out = augment_dataset(data, AugmentationPlan(n, seed))
    assert len(out) == 110 + 2 * n
    assert len({(p.link.region_id, p.link.tx_x) for p in out[110:]}) == 2 * n
