"""Path-profile tensors: the four normalized input channels along a link.

Patch geometry: sample ``i`` lies at fraction ``i / (L - 1)`` from Tx to Rx and
column ``j`` is offset ``t_j = (j - (W-1)/2) / ((W-1)/2) * halfwidth`` along the
left-hand normal of the Tx->Rx direction. For odd ``W`` the middle column lies
on the link axis; for even ``W`` the axis falls between the two middle columns.
Swapping Tx and Rx flips both the axis and the normal, so the patch of the
swapped link is the original patch rotated by 180 degrees.
"""
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .raster_io import LinkRecord, RasterGrid

log = logging.getLogger(__name__)

CHANNELS = ("direct_path", "distance", "surface", "frequency")
IDENTITY, REFLECTED = "identity", "reflected"


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileConfig:
    length_samples: int = 256
    transverse_samples: int = 64
    # None: W/2 * DSM cell size, resolved at extraction time
    transverse_halfwidth: Optional[float] = None
    h_max: float = 200.0
    d_max: float = 2000.0
    f_min: float = 449.0
    f_max: float = 5850.0

    def __post_init__(self):
        if self.length_samples < 2 or self.transverse_samples < 1:
            raise ProfileError("need length_samples >= 2 and transverse_samples >= 1")
        if self.h_max <= 0 or self.d_max <= 0:
            raise ProfileError("h_max and d_max must be positive")
        if not 0 < self.f_min < self.f_max:
            raise ProfileError("need 0 < f_min < f_max")
        if self.transverse_halfwidth is not None and self.transverse_halfwidth < 0:
            raise ProfileError("transverse_halfwidth must be >= 0")

    def resolved(self, cell_size):
        if self.transverse_halfwidth is not None:
            return self
        return replace(self, transverse_halfwidth=0.5 * self.transverse_samples * cell_size)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _halfwidth(cfg):
    if cfg.transverse_halfwidth is None:
        raise ProfileError("transverse_halfwidth unresolved; call cfg.resolved(cell_size)")
    return cfg.transverse_halfwidth


def transverse_offsets(cfg):
    w = cfg.transverse_samples
    if w == 1:
        return np.zeros(1)
    half = (w - 1) / 2
    return (np.arange(w) - half) / half * _halfwidth(cfg)


def along_fractions(cfg):
    return np.arange(cfg.length_samples) / (cfg.length_samples - 1)


class RawPatch(NamedTuple):
    """Un-normalized patch: DSM surface (L, W) and on-axis DTM terrain (L,), meters."""
    surface: np.ndarray
    terrain: np.ndarray


def patch_points(link, cfg):
    """Ground coordinates (xs, ys), each (L, W), of every patch pixel."""
    dx, dy = link.rx_x - link.tx_x, link.rx_y - link.tx_y
    length = math.hypot(dx, dy)
    if length == 0:
        raise ProfileError("link has zero horizontal length")
    nx, ny = -dy / length, dx / length
    f = along_fractions(cfg)[:, None]
    t = transverse_offsets(cfg)[None, :]
    xs = link.tx_x + f * dx + t * nx
    ys = link.tx_y + f * dy + t * ny
    return xs, ys


def extract_patch(dsm: RasterGrid, dtm: RasterGrid, link: LinkRecord, cfg: ProfileConfig) -> RawPatch:
    """Bilinearly sample the DSM over the swept rectangle and the DTM on the axis."""
    cfg = cfg.resolved(dsm.cell_size)
    xs, ys = patch_points(link, cfg)
    surface = dsm.sample(xs, ys).reshape(xs.shape)
    f = along_fractions(cfg)
    terrain = dtm.sample(link.tx_x + f * (link.rx_x - link.tx_x),
                         link.tx_y + f * (link.rx_y - link.tx_y))
    return RawPatch(surface, terrain)


def build_direct_path(terrain, link, cfg):
    terrain = np.asarray(terrain, dtype=np.float64)
    if not np.all(np.isfinite(terrain)):
        raise ProfileError("terrain must be finite")
    a = terrain[0] + link.tx_height_agl
    b = terrain[-1] + link.rx_height_agl
    line = a + (b - a) * along_fractions(cfg)
    return np.repeat(line[:, None], cfg.transverse_samples, axis=1)


def build_distance_channel(link, cfg):
    """Horizontal distance (m) from the Tx ground point to every pixel."""
    along = along_fractions(cfg) * link.length_2d
    t = transverse_offsets(cfg)
    return np.sqrt(along[:, None] ** 2 + t[None, :] ** 2)


def frequency_value(freq, cfg):
    if not cfg.f_min <= freq <= cfg.f_max:
        raise ProfileError(f"frequency {freq} MHz outside [{cfg.f_min}, {cfg.f_max}]")
    lo, hi = math.log10(cfg.f_min), math.log10(cfg.f_max)
    return (math.log10(freq) - lo) / (hi - lo)


def build_frequency_channel(link, cfg):
    return np.full((cfg.length_samples, cfg.transverse_samples), frequency_value(link.frequency, cfg))


def normalize_height(h, ref, cfg):
    return np.clip((h - ref) / cfg.h_max, 0.0, 1.0)


def normalize_distance(d, cfg):
    return np.clip(d / cfg.d_max, 0.0, 1.0)


@dataclass(eq=False)
class PathProfileTensor:
    channels: np.ndarray  # float32 (4, L, W), order = CHANNELS
    link: LinkRecord
    orientation_tag: str
    config: ProfileConfig

    @property
    def shape(self):
        return self.channels.shape


def assemble_profile(patch: RawPatch, link: LinkRecord, cfg: ProfileConfig,
                     orientation_tag=IDENTITY) -> PathProfileTensor:
    """Normalize and stack the channels (direct path, distance, surface, frequency).

    Heights are taken relative to the lowest on-axis terrain sample and divided
    by ``h_max``; over-range values are clamped, not rejected.
    """
    ref = float(np.min(patch.terrain))
    direct = build_direct_path(patch.terrain, link, cfg)
    raw_surface = np.asarray(patch.surface, dtype=np.float64)
    raw_dist = build_distance_channel(link, cfg)
    clamped = (int(np.sum((direct - ref) > cfg.h_max)) + int(np.sum((raw_surface - ref) > cfg.h_max))
               + int(np.sum(raw_dist > cfg.d_max)))
    if clamped:
        log.debug("clamped %d over-range values for link %s", clamped, link)
    out = np.empty((4, cfg.length_samples, cfg.transverse_samples), dtype=np.float32)
    out[0] = normalize_height(direct, ref, cfg)
    out[1] = normalize_distance(raw_dist, cfg)
    out[2] = normalize_height(raw_surface, ref, cfg)
    out[3] = build_frequency_channel(link, cfg)
    return PathProfileTensor(out, link, orientation_tag, cfg)


def build_profile(dsm, dtm, link, cfg) -> PathProfileTensor:
    cfg = cfg.resolved(dsm.cell_size)
    return assemble_profile(extract_patch(dsm, dtm, link, cfg), link, cfg)


def extract_profiles(dsm, dtm, links, cfg, strict=True):
    """Profiles for many links on one scene.

    With ``strict=False`` failing links are skipped and returned as
    ``(index, reason)`` pairs alongside the profiles.
    """
    cfg = cfg.resolved(dsm.cell_size)
    out, failures = [], []
    for k, link in enumerate(links):
        try:
            out.append(assemble_profile(extract_patch(dsm, dtm, link, cfg), link, cfg))
        except (ValueError, ArithmeticError) as exc:
            if strict:
                raise
            failures.append((k, str(exc)))
    return (out, failures) if not strict else out


def stack_channels(profiles):
    return np.stack([p.channels for p in profiles]) if profiles else np.empty((0, 4, 0, 0), np.float32)


# --------------------------------------------------------------------------
# RPPL binary file: little-endian
#   b"RPPL" | u16 version | u32 C, L, W | f32[C*L*W] row-major | u32 n | n bytes JSON

MAGIC = b"RPPL"
VERSION = 1


def profile_to_bytes(p: PathProfileTensor) -> bytes:
    c, l, w = p.channels.shape
    meta = json.dumps({"link": p.link.to_dict(), "orientation_tag": p.orientation_tag,
                       "profile_config": p.config.to_dict()}, sort_keys=True).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<HIII", VERSION, c, l, w),
                     np.ascontiguousarray(p.channels, dtype="<f4").tobytes(),
                     struct.pack("<I", len(meta)), meta])


def profile_from_bytes(data: bytes) -> PathProfileTensor:
    if data[:4] != MAGIC:
        raise ProfileError("not an RPPL file")
    version, c, l, w = struct.unpack_from("<HIII", data, 4)
    if version != VERSION:
        raise ProfileError(f"unsupported RPPL version {version}")
    off = 4 + struct.calcsize("<HIII")
    n = c * l * w
    arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(c, l, w)
    off += 4 * n
    (mlen,) = struct.unpack_from("<I", data, off)
    meta = json.loads(data[off + 4:off + 4 + mlen].decode("utf-8"))
    return PathProfileTensor(arr, LinkRecord.from_dict(meta["link"]), meta["orientation_tag"],
                             ProfileConfig.from_dict(meta["profile_config"]))


def save_profile(p, path):
    with open(path, "wb") as fh:
        fh.write(profile_to_bytes(p))


def load_profile(path) -> PathProfileTensor:
    with open(path, "rb") as fh:
        return profile_from_bytes(fh.read())
