"""Identity/reflection transforms and reflection-based dataset augmentation."""
import zlib
from dataclasses import dataclass

import numpy as np

from .profile import (IDENTITY, REFLECTED, PathProfileTensor, RawPatch,
                      build_distance_channel, normalize_distance)

UNIFORM, PER_BAND = "uniform-random", "per-band-stratified"


def _toggle(tag):
    return REFLECTED if tag == IDENTITY else IDENTITY


def reflect(profile: PathProfileTensor) -> PathProfileTensor:
    """Swap Tx and Rx: rotate the map channels by 180 degrees.

    The distance channel is rebuilt for the new Tx rather than rotated, which
    keeps its "distance from Tx" meaning. Because the distance formula is
    symmetric in the along-axis position, the rebuilt channel equals the
    original one.
    """
    link = profile.link.swapped()
    ch = profile.channels
    out = np.empty_like(ch)
    out[0] = ch[0, ::-1, ::-1]
    out[1] = normalize_distance(build_distance_channel(link, profile.config), profile.config)
    out[2] = ch[2, ::-1, ::-1]
    out[3] = ch[3, ::-1, ::-1]
    return PathProfileTensor(out, link, _toggle(profile.orientation_tag), profile.config)


def reflect_patch(patch: RawPatch) -> RawPatch:
    """Raw-patch counterpart of :func:`reflect` (pair with ``link.swapped()``)."""
    return RawPatch(np.ascontiguousarray(patch.surface[::-1, ::-1]),
                    np.ascontiguousarray(patch.terrain[::-1]))


@dataclass(frozen=True)
class AugmentationPlan:
    n_per_region: int
    selection_seed: int = 0
    selection_scope: str = UNIFORM

    def __post_init__(self):
        if self.n_per_region < 0:
            raise ValueError("n_per_region must be >= 0")
        if self.selection_scope not in (UNIFORM, PER_BAND):
            raise ValueError(f"unknown selection_scope {self.selection_scope!r}")


def _region_rng(seed, region):
    # keyed on the region name so selection does not depend on dict order
    return np.random.default_rng([int(seed), zlib.crc32(str(region).encode("utf-8"))])


def _stratified_counts(sizes, n):
    """Split ``n`` across strata proportionally to ``sizes`` (largest remainder)."""
    sizes = np.asarray(sizes, dtype=float)
    exact = n * sizes / sizes.sum()
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    for k in order[: n - counts.sum()]:
        counts[k] += 1
    return np.minimum(counts, sizes.astype(int))


def select_indices(samples, plan, region):
    n = plan.n_per_region
    if n > len(samples):
        raise ValueError(f"region {region!r}: n={n} exceeds {len(samples)} available samples")
    rng = _region_rng(plan.selection_seed, region)
    if plan.selection_scope == UNIFORM:
        return np.sort(rng.choice(len(samples), size=n, replace=False))
    bands = sorted({s.link.band_id for s in samples})
    groups = [[k for k, s in enumerate(samples) if s.link.band_id == b] for b in bands]
    counts = _stratified_counts([len(g) for g in groups], n)
    picked = [np.asarray(g)[rng.choice(len(g), size=c, replace=False)] for g, c in zip(groups, counts) if c]
    return np.sort(np.concatenate(picked)) if picked else np.empty(0, dtype=int)


def augment_dataset(samples_by_region, plan: AugmentationPlan):
    """Originals (region order, then sample order) followed by reflected copies.

    ``plan.n_per_region`` samples of every region are picked with a seeded RNG,
    reflected, and appended. The input collection is not modified.
    """
    originals = [s for region in samples_by_region for s in samples_by_region[region]]
    if plan.n_per_region == 0:
        return originals
    extra = []
    for region, samples in samples_by_region.items():
        samples = list(samples)
        for k in select_indices(samples, plan, region):
            extra.append(reflect(samples[k]))
    return originals + extra
