"""Procedural scenes and a reciprocal path loss oracle.

The oracle is free-space loss over the 3-D antenna separation plus the
Epstein-Peterson sum of knife-edge losses. Endpoints are put into a canonical
order before any sampling, so a link and its Tx/Rx swap evaluate the very same
floating point expression: reciprocity holds bit-for-bit, not just to rounding.
"""
import math
import zlib
from dataclasses import asdict, dataclass, field
from typing import Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .raster_io import LinkRecord, RasterGrid

SPEED_OF_LIGHT = 299_792_458.0

BS_TO_UE, UE_TO_BS, BS_TO_BS = "BS-to-UE", "UE-to-BS", "BS-to-BS"
SCENARIOS = (BS_TO_UE, UE_TO_BS, BS_TO_BS)

DRIVE_TEST_BANDS = (449.0, 915.0, 1802.0, 2695.0, 3602.0, 5850.0)
BACKHAUL_BAND = 3455.0


@dataclass(frozen=True)
class SceneParams:
    extent: float = 2048.0
    cell_size: float = 4.0
    roughness_amplitude: float = 3.0
    correlation_length: float = 250.0
    base_elevation: float = 20.0
    building_density: float = 150.0  # per km^2
    building_height: Tuple[float, float] = (6.0, 24.0)
    building_size: Tuple[float, float] = (10.0, 30.0)
    tree_density: float = 150.0  # per km^2
    tree_height: Tuple[float, float] = (4.0, 14.0)
    tree_radius: Tuple[float, float] = (2.0, 6.0)
    x_origin: float = 0.0
    y_origin: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.extent / self.cell_size < 64:
            raise ValueError("extent / cell_size must give at least 64x64 cells")
        lows = (self.base_elevation, self.roughness_amplitude, self.building_density,
                self.tree_density, self.building_height[0], self.tree_height[0])
        if min(lows) < 0:
            raise ValueError("heights, amplitudes and densities must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("building_height", "building_size", "tree_height", "tree_radius"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(frozen=True)
class ScenarioParams:
    scenario: str = BS_TO_UE
    tx_height_agl: float = 17.0
    rx_height_agl: float = 1.5
    bands: Tuple[float, ...] = DRIVE_TEST_BANDS
    links_per_region: int = 2000
    min_length: float = 150.0
    max_length: float = 1200.0
    noise_sigma: float = 3.0
    # max clutter (DSM - DTM, m) tolerated under either antenna
    endpoint_clearance: float = 0.5
    # Tx sites: no clutter above endpoint_clearance within this radius (m); 0 disables
    tx_open_radius: float = 0.0
    # Rx sites: some clutter at least rx_clutter_min (m) tall within rx_clutter_radius (m)
    rx_clutter_radius: float = 0.0
    rx_clutter_min: float = 0.0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.tx_height_agl <= 0 or self.rx_height_agl <= 0:
            raise ValueError("antenna heights must be positive")
        if not 0 < self.min_length < self.max_length:
            raise ValueError("need 0 < min_length < max_length")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if min(self.tx_open_radius, self.rx_clutter_radius, self.rx_clutter_min) < 0:
            raise ValueError("endpoint radii and clutter heights must be >= 0")

    @classmethod
    def downlink(cls, **kw):
        """Base station in the open, handset near buildings or trees, as in a street drive test."""
        kw.setdefault("tx_open_radius", 20.0)
        kw.setdefault("rx_clutter_radius", 20.0)
        kw.setdefault("rx_clutter_min", 3.0)
        return cls(scenario=BS_TO_UE, tx_height_agl=17.0, rx_height_agl=1.5, **kw)

    @classmethod
    def backhaul(cls, **kw):
        kw.setdefault("bands", (BACKHAUL_BAND,))
        return cls(scenario=BS_TO_BS, tx_height_agl=11.0, rx_height_agl=11.0, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "bands" in d:
            d["bands"] = tuple(float(b) for b in d["bands"])
        return cls(**d)


@dataclass(eq=False)
class Scene:
    name: str
    params: SceneParams
    dtm: RasterGrid
    dsm: RasterGrid = field(repr=False)


def generate_scene(params: SceneParams):
    """Return ``(dtm, dsm)``; a pure function of ``params`` (seed included)."""
    rng = np.random.default_rng(params.seed)
    n = int(round(params.extent / params.cell_size))
    noise = rng.standard_normal((n, n))
    if params.roughness_amplitude > 0:
        sigma = params.correlation_length / params.cell_size
        smooth = gaussian_filter(noise, sigma=sigma, mode="wrap")
        smooth = smooth / (smooth.std() or 1.0)
        dtm = params.base_elevation + params.roughness_amplitude * (smooth - smooth.min())
    else:
        dtm = np.full((n, n), float(params.base_elevation))
    dsm = dtm.copy()

    area_km2 = (params.extent / 1000.0) ** 2
    n_build = rng.poisson(params.building_density * area_km2)
    cs = params.cell_size
    for _ in range(n_build):
        r, c = rng.integers(0, n, size=2)
        h_cells = max(1, int(round(rng.uniform(*params.building_size) / cs)))
        w_cells = max(1, int(round(rng.uniform(*params.building_size) / cs)))
        height = rng.uniform(*params.building_height)
        r0, c0 = max(0, r - h_cells // 2), max(0, c - w_cells // 2)
        block = (slice(r0, r0 + h_cells), slice(c0, c0 + w_cells))
        dsm[block] = np.maximum(dsm[block], dtm[block] + height)

    n_tree = rng.poisson(params.tree_density * area_km2)
    for _ in range(n_tree):
        r, c = rng.integers(0, n, size=2)
        rad = rng.uniform(*params.tree_radius) / cs
        height = rng.uniform(*params.tree_height)
        k = int(math.ceil(rad))
        rr, cc = np.mgrid[max(0, r - k):min(n, r + k + 1), max(0, c - k):min(n, c + k + 1)]
        disc = (rr - r) ** 2 + (cc - c) ** 2 <= rad ** 2
        rr, cc = rr[disc], cc[disc]
        dsm[rr, cc] = np.maximum(dsm[rr, cc], dtm[rr, cc] + height)

    mk = lambda h: RasterGrid(n, n, params.x_origin, params.y_origin, cs, h)
    return mk(dtm), mk(dsm)


def make_scene(name, params):
    dtm, dsm = generate_scene(params)
    return Scene(name, params, dtm, dsm)


# --------------------------------------------------------------------------
# oracle


def fspl_db(distance_m, freq_mhz):
    return 32.44 + 20.0 * np.log10(np.asarray(distance_m) / 1000.0) + 20.0 * np.log10(freq_mhz)


def _canonical(link):
    a = (link.tx_x, link.tx_y, link.tx_height_agl)
    b = (link.rx_x, link.rx_y, link.rx_height_agl)
    return (a, b) if a <= b else (b, a)


def oracle_path_loss_many(dsm, dtm, links, n_samples=256):
    """Vectorized :func:`oracle_path_loss` over a sequence of links."""
    m = len(links)
    if m == 0:
        return np.empty(0)
    ends = np.array([_canonical(l) for l in links], dtype=np.float64)  # (m, 2, 3)
    a, b = ends[:, 0], ends[:, 1]
    dist = np.hypot(b[:, 0] - a[:, 0], b[:, 1] - a[:, 1])
    if np.any(dist == 0):
        raise ValueError("zero-length link")
    f = np.arange(n_samples) / (n_samples - 1)
    xs = a[:, 0:1] + f[None, :] * (b[:, 0:1] - a[:, 0:1])
    ys = a[:, 1:2] + f[None, :] * (b[:, 1:2] - a[:, 1:2])
    surface = dsm.sample(xs, ys).reshape(m, n_samples)
    ground = dtm.sample(np.concatenate([a[:, 0], b[:, 0]]), np.concatenate([a[:, 1], b[:, 1]]))
    za = ground[:m] + a[:, 2]
    zb = ground[m:] + b[:, 2]
    freq = np.array([l.frequency for l in links], dtype=np.float64)
    d3 = np.sqrt(dist ** 2 + (zb - za) ** 2)
    wavelength = SPEED_OF_LIGHT / (freq * 1e6)
    diffraction = kernels.ep_loss(np.ascontiguousarray(surface), dist, za, zb, wavelength)
    return fspl_db(d3, freq) + diffraction


def oracle_path_loss(dsm: RasterGrid, dtm: RasterGrid, link: LinkRecord, n_samples=256) -> float:
    """Free-space loss plus Epstein-Peterson knife-edge loss, in dB.

    Obstruction edges are the highest sample of each run of axis samples whose
    DSM height reaches the antenna-to-antenna line of sight.
    """
    return float(oracle_path_loss_many(dsm, dtm, [link], n_samples)[0])


# --------------------------------------------------------------------------
# link sets


def _sub_seed(seed, *keys):
    return np.random.default_rng([int(seed)] + [zlib.crc32(str(k).encode("utf-8")) for k in keys])


_RING_ANGLES = np.linspace(0.0, 2 * math.pi, 12, endpoint=False)
_RING_FRACTIONS = (0.3, 0.6, 1.0)


def _clutter(scene, x, y):
    return scene.dsm.sample(x, y) - scene.dtm.sample(x, y)


def _ring_clutter(scene, x, y, radius):
    """Max clutter height on three rings (0.3, 0.6 and 1.0 x radius, 12 points each) around each point."""
    offs = [(f * radius * math.cos(a), f * radius * math.sin(a)) for f in _RING_FRACTIONS for a in _RING_ANGLES]
    xs = np.concatenate([x + dx for dx, _ in offs])
    ys = np.concatenate([y + dy for _, dy in offs])
    return _clutter(scene, xs, ys).reshape(len(offs), -1).max(axis=0)


def _endpoint_ok(scene, scenario, tx, rx):
    ok = (_clutter(scene, tx[:, 0], tx[:, 1]) <= scenario.endpoint_clearance) & \
         (_clutter(scene, rx[:, 0], rx[:, 1]) <= scenario.endpoint_clearance)
    if scenario.tx_open_radius > 0:
        ok &= _ring_clutter(scene, tx[:, 0], tx[:, 1], scenario.tx_open_radius) <= scenario.endpoint_clearance
    if scenario.rx_clutter_radius > 0:
        ok &= _ring_clutter(scene, rx[:, 0], rx[:, 1], scenario.rx_clutter_radius) >= scenario.rx_clutter_min
    return ok


def place_links(scene, scenario, count, margin, rng, max_tries=200):
    """Rejection-sample ``count`` (tx, rx) placements inside ``scene``."""
    xmin, ymin, xmax, ymax = scene.dsm.extent
    lo_x, hi_x, lo_y, hi_y = xmin + margin, xmax - margin, ymin + margin, ymax - margin
    if hi_x <= lo_x or hi_y <= lo_y:
        raise ValueError(f"scene {scene.name!r} too small for margin {margin}")
    if margin < max(scenario.tx_open_radius, scenario.rx_clutter_radius):
        raise ValueError("margin must be at least the endpoint search radius")
    found = []
    need = count
    for _ in range(max_tries):
        k = max(64, 2 * need)
        tx = np.column_stack([rng.uniform(lo_x, hi_x, k), rng.uniform(lo_y, hi_y, k)])
        ang = rng.uniform(0.0, 2 * math.pi, k)
        length = rng.uniform(scenario.min_length, scenario.max_length, k)
        rx = tx + length[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
        ok = (rx[:, 0] >= lo_x) & (rx[:, 0] <= hi_x) & (rx[:, 1] >= lo_y) & (rx[:, 1] <= hi_y)
        tx, rx = tx[ok], rx[ok]
        if len(tx):
            keep = _endpoint_ok(scene, scenario, tx, rx)
            tx, rx = tx[keep], rx[keep]
        found.append(np.column_stack([tx, rx])[:need])
        need -= len(found[-1])
        if need == 0:
            return np.concatenate(found)
    raise ValueError(f"could only place {count - need} of {count} links in scene {scene.name!r}")


def generate_dataset(scenes, scenario: ScenarioParams, seed=0, n_samples=256, margin=None):
    """Random links per scene labelled by the oracle plus per-link Gaussian noise.

    Noise is drawn once per link geometry, so a reflected copy of a record
    carries the same label. ``margin`` defaults to 40 cells.
    """
    records = []
    for scene in scenes:
        rng = _sub_seed(seed, "links", scene.name, scenario.scenario)
        m = margin if margin is not None else 40 * scene.dsm.cell_size
        geo = place_links(scene, scenario, scenario.links_per_region, m, rng)
        bands = np.asarray(scenario.bands, dtype=float)[rng.integers(0, len(scenario.bands), len(geo))]
        noise = rng.normal(0.0, scenario.noise_sigma, len(geo)) if scenario.noise_sigma > 0 \
            else np.zeros(len(geo))
        proto = [LinkRecord(float(g[0]), float(g[1]), float(g[2]), float(g[3]),
                            scenario.tx_height_agl, scenario.rx_height_agl, float(f), 0.0,
                            scene.name, _band_label(f))
                 for g, f in zip(geo, bands)]
        pl = oracle_path_loss_many(scene.dsm, scene.dtm, proto, n_samples) + noise
        records.extend(LinkRecord(**{**p.to_dict(), "path_loss": float(v)}) for p, v in zip(proto, pl))
    return records


def _band_label(f):
    return str(int(f)) if float(f).is_integer() else repr(float(f))
