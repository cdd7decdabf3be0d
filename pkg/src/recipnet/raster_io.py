"""Elevation rasters (ESRI ASCII grid) and link measurement tables (CSV).

Raster conventions
------------------
``heights`` is stored exactly as the file lays it out: row 0 is the
northernmost row. Values are cell centres and ``(x_origin, y_origin)`` is the
lower-left corner of the lower-left cell, so the centre of column ``c`` and
row ``r`` counted from the *bottom* is::

    (x_origin + (c + 0.5) * cell_size, y_origin + (r + 0.5) * cell_size)

Storage row for bottom-row ``r`` is ``n_rows - 1 - r``.
"""
import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import kernels


class RasterError(ValueError):
    pass


class AsciiGridError(RasterError):
    """Malformed ASCII grid; ``line`` is 1-based (0 when not line-specific)."""

    def __init__(self, message, line=0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class OutOfExtentError(RasterError):
    pass


class NodataError(RasterError):
    pass


@dataclass(frozen=True, eq=False)
class RasterGrid:
    n_cols: int
    n_rows: int
    x_origin: float
    y_origin: float
    cell_size: float
    heights: np.ndarray
    nodata_value: Optional[float] = None
    _filled: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h = np.array(self.heights, dtype=np.float64)
        if self.n_cols < 1 or self.n_rows < 1:
            raise RasterError("grid needs at least one row and column")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise RasterError(f"cell_size must be positive, got {self.cell_size}")
        if h.shape != (self.n_rows, self.n_cols):
            raise RasterError(f"heights shape {h.shape} != ({self.n_rows}, {self.n_cols})")
        mask = self._nodata_mask(h)
        if not np.all(np.isfinite(h[~mask])):
            raise RasterError("non-finite height outside nodata cells")
        h.setflags(write=False)
        filled = np.where(mask, np.nan, h)
        filled.setflags(write=False)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "_filled", filled)

    def _nodata_mask(self, h):
        if self.nodata_value is None:
            return np.zeros(h.shape, dtype=bool)
        return h == self.nodata_value

    @property
    def nodata_mask(self):
        return np.isnan(self._filled)

    @property
    def extent(self):
        """(xmin, ymin, xmax, ymax) of the cell-centre hull that can be sampled."""
        half = 0.5 * self.cell_size
        return (self.x_origin + half, self.y_origin + half,
                self.x_origin + (self.n_cols - 0.5) * self.cell_size,
                self.y_origin + (self.n_rows - 0.5) * self.cell_size)

    def cell_center(self, col, row_from_bottom):
        return (self.x_origin + (col + 0.5) * self.cell_size,
                self.y_origin + (row_from_bottom + 0.5) * self.cell_size)

    def equals(self, other):
        """Exact equality of header fields and height values."""
        return (isinstance(other, RasterGrid)
                and self.n_cols == other.n_cols and self.n_rows == other.n_rows
                and self.x_origin == other.x_origin and self.y_origin == other.y_origin
                and self.cell_size == other.cell_size
                and self.nodata_value == other.nodata_value
                and np.array_equal(self.heights, other.heights))

    def sample(self, xs, ys):
        """Vectorized bilinear sampling; raises on any out-of-extent or nodata point."""
        xs = np.ascontiguousarray(xs, dtype=np.float64).ravel()
        ys = np.ascontiguousarray(ys, dtype=np.float64).ravel()
        if self.n_cols < 2 or self.n_rows < 2:
            raise RasterError("bilinear sampling needs at least a 2x2 grid")
        vals, status = kernels.bilinear(self._filled, float(self.x_origin),
                                        float(self.y_origin), float(self.cell_size), xs, ys)
        if status.any():
            k = int(np.flatnonzero(status)[0])
            if status[k] == kernels.OUT_OF_EXTENT:
                raise OutOfExtentError(f"point ({xs[k]:.3f}, {ys[k]:.3f}) outside {self.extent}")
            raise NodataError(f"nodata neighbour at ({xs[k]:.3f}, {ys[k]:.3f})")
        return vals


def sample_bilinear(grid: RasterGrid, x: float, y: float) -> float:
    """Height at ``(x, y)`` interpolated from the four surrounding cell centres."""
    return float(grid.sample(np.array([x]), np.array([y]))[0])


# --------------------------------------------------------------------------
# ESRI ASCII grid

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
_CENTER_KEYS = {"xllcenter": "xllcorner", "yllcenter": "yllcorner"}


def _read_text(source):
    if isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    elif isinstance(source, str):
        return source
    else:
        data = source.read()
        if isinstance(data, str):
            return data
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise AsciiGridError(f"not UTF-8 text: {exc}") from None


def _number(token, lineno, what):
    try:
        v = float(token)
    except ValueError:
        raise AsciiGridError(f"non-numeric {what} {token!r}", lineno) from None
    return v


def parse_ascii_grid(source) -> RasterGrid:
    """Parse an ESRI ASCII grid from text, bytes, or a file-like object.

    Header keys are case-insensitive; ``xllcenter``/``yllcenter`` are accepted
    and converted to corner registration. Every error carries its line number.
    """
    text = _read_text(source)
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    header = {}
    center = set()
    i = 0
    while i < len(lines):
        stripped = lines[i].strip()
        if not stripped:
            i += 1
            continue
        parts = stripped.split()
        key = parts[0].lower()
        if key[0].isdigit() or key[0] in "+-.":
            break
        lineno = i + 1
        if key in _CENTER_KEYS:
            center.add(_CENTER_KEYS[key])
            key = _CENTER_KEYS[key]
        if key not in _HEADER_KEYS:
            raise AsciiGridError(f"unknown header key {parts[0]!r}", lineno)
        if key in header:
            raise AsciiGridError(f"duplicate header key {key!r}", lineno)
        if len(parts) != 2:
            raise AsciiGridError(f"header {key!r} needs exactly one value", lineno)
        header[key] = (_number(parts[1], lineno, key), lineno)
        i += 1
    for key in _HEADER_KEYS[:5]:
        if key not in header:
            raise AsciiGridError(f"missing header key {key!r}", i + 1 if i < len(lines) else 0)

    def as_count(key):
        v, ln = header[key]
        if not (v.is_integer() and v >= 1):
            raise AsciiGridError(f"{key} must be a positive integer, got {v}", ln)
        return int(v)

    ncols, nrows = as_count("ncols"), as_count("nrows")
    cell, ln = header["cellsize"]
    if not (cell > 0 and math.isfinite(cell)):
        raise AsciiGridError(f"cellsize must be positive and finite, got {cell}", ln)
    x0 = header["xllcorner"][0]
    y0 = header["yllcorner"][0]
    if "xllcorner" in center:
        x0 -= 0.5 * cell
    if "yllcorner" in center:
        y0 -= 0.5 * cell
    for key, (v, ln) in header.items():
        if not math.isfinite(v) and key != "nodata_value":
            raise AsciiGridError(f"{key} must be finite", ln)
    nodata = header["nodata_value"][0] if "nodata_value" in header else None

    heights = np.empty((nrows, ncols))
    r = 0
    for j in range(i, len(lines)):
        tokens = lines[j].split()
        if not tokens:
            continue
        lineno = j + 1
        if r >= nrows:
            raise AsciiGridError(f"more than {nrows} data rows", lineno)
        if len(tokens) != ncols:
            raise AsciiGridError(f"expected {ncols} values, found {len(tokens)}", lineno)
        for c, tok in enumerate(tokens):
            v = _number(tok, lineno, "height")
            if not math.isfinite(v) and v != nodata:
                raise AsciiGridError(f"non-finite height {tok!r}", lineno)
            heights[r, c] = v
        r += 1
    if r != nrows:
        raise AsciiGridError(f"expected {nrows} data rows, found {r}", len(lines))
    return RasterGrid(ncols, nrows, x0, y0, cell, heights, nodata)


def _fmt(v):
    return repr(float(v))


def write_ascii_grid(grid: RasterGrid, stream=None):
    """Serialize ``grid``; returns the text when ``stream`` is None."""
    out = io.StringIO() if stream is None else stream
    out.write(f"ncols {grid.n_cols}\n")
    out.write(f"nrows {grid.n_rows}\n")
    out.write(f"xllcorner {_fmt(grid.x_origin)}\n")
    out.write(f"yllcorner {_fmt(grid.y_origin)}\n")
    out.write(f"cellsize {_fmt(grid.cell_size)}\n")
    if grid.nodata_value is not None:
        out.write(f"nodata_value {_fmt(grid.nodata_value)}\n")
    for row in grid.heights:
        out.write(" ".join(map(_fmt, row)))
        out.write("\n")
    if stream is None:
        return out.getvalue()
    return None


def read_ascii_grid(path) -> RasterGrid:
    with open(path, "rb") as fh:
        return parse_ascii_grid(fh)


def save_ascii_grid(grid, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_ascii_grid(grid, fh)


# --------------------------------------------------------------------------
# link records

LINK_COLUMNS = ("tx_x", "tx_y", "tx_h", "rx_x", "rx_y", "rx_h",
                "freq_mhz", "path_loss_db", "region", "band")


@dataclass(frozen=True)
class LinkRecord:
    tx_x: float
    tx_y: float
    rx_x: float
    rx_y: float
    tx_height_agl: float
    rx_height_agl: float
    frequency: float  # MHz
    path_loss: float  # dB
    region_id: str = ""
    band_id: str = ""

    def __post_init__(self):
        nums = (self.tx_x, self.tx_y, self.rx_x, self.rx_y,
                self.tx_height_agl, self.rx_height_agl, self.frequency, self.path_loss)
        if not all(math.isfinite(v) for v in nums):
            raise ValueError("link fields must be finite")
        if self.tx_height_agl <= 0 or self.rx_height_agl <= 0:
            raise ValueError("antenna heights above ground must be positive")
        if self.frequency <= 0:
            raise ValueError(f"frequency must be positive, got {self.frequency}")
        if self.distance_3d <= 0:
            raise ValueError("link has zero length")

    @property
    def length_2d(self):
        return math.hypot(self.rx_x - self.tx_x, self.rx_y - self.tx_y)

    @property
    def distance_3d(self):
        return math.sqrt(self.length_2d ** 2 + (self.tx_height_agl - self.rx_height_agl) ** 2)

    def swapped(self):
        """The same link with Tx and Rx roles exchanged."""
        return LinkRecord(self.rx_x, self.rx_y, self.tx_x, self.tx_y,
                          self.rx_height_agl, self.tx_height_agl,
                          self.frequency, self.path_loss, self.region_id, self.band_id)

    def to_row(self):
        return {"tx_x": self.tx_x, "tx_y": self.tx_y, "tx_h": self.tx_height_agl,
                "rx_x": self.rx_x, "rx_y": self.rx_y, "rx_h": self.rx_height_agl,
                "freq_mhz": self.frequency, "path_loss_db": self.path_loss,
                "region": self.region_id, "band": self.band_id}

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class LinkCsvError(ValueError):
    pass


class RowError(NamedTuple):
    line: int
    message: str


class ParsedLinks(NamedTuple):
    records: list
    errors: list


def parse_link_csv(source) -> ParsedLinks:
    """Read link rows; bad rows are reported in ``errors``, never dropped silently.

    A missing required column is a file-level :class:`LinkCsvError`.
    """
    text = _read_text(source) if not isinstance(source, io.TextIOBase) else source.read()
    reader = csv.DictReader(io.StringIO(text))
    cols = [c.strip() for c in (reader.fieldnames or [])]
    missing = [c for c in LINK_COLUMNS if c not in cols]
    if missing:
        raise LinkCsvError(f"missing column(s): {', '.join(missing)}")
    reader.fieldnames = cols
    records, errors = [], []
    for row in reader:
        line = reader.line_num
        try:
            vals = {}
            for c in LINK_COLUMNS[:8]:
                raw = (row.get(c) or "").strip()
                try:
                    vals[c] = float(raw)
                except ValueError:
                    raise ValueError(f"{c}: non-numeric value {raw!r}") from None
            rec = LinkRecord(vals["tx_x"], vals["tx_y"], vals["rx_x"], vals["rx_y"],
                             vals["tx_h"], vals["rx_h"], vals["freq_mhz"],
                             vals["path_loss_db"], (row.get("region") or "").strip(),
                             (row.get("band") or "").strip())
        except ValueError as exc:
            errors.append(RowError(line, str(exc)))
            continue
        records.append(rec)
    return ParsedLinks(records, errors)


def write_link_csv(records, stream=None):
    out = io.StringIO() if stream is None else stream
    w = csv.DictWriter(out, fieldnames=LINK_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rec in records:
        row = rec.to_row()
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return out.getvalue() if stream is None else None


def read_link_csv(path) -> ParsedLinks:
    with open(path, "rb") as fh:
        return parse_link_csv(fh)
