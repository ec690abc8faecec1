"""Georeferenced grid containers, the RBIN binary raster format, and resampling.

Grid convention used everywhere in this package: ``origin_x/origin_y`` are the
map coordinates of the top-left corner of pixel (0, 0), pixels are square, and
row index increases southward.  The center of pixel (r, c) is therefore at

    x = origin_x + (c + 0.5) * pixel_size
    y = origin_y - (r + 0.5) * pixel_size

RBIN container (little-endian, 64-byte header, single band):

    bytes 0-3    magic "RBN1"
    byte  4      dtype code (0=u8, 1=u16, 2=i16, 3=f32)
    byte  5      nodata-present flag (0/1)
    bytes 6-7    reserved, zero
    bytes 8-11   width  (u32)
    bytes 12-15  height (u32)
    bytes 16-23  origin_x (f64)
    bytes 24-31  origin_y (f64)
    bytes 32-39  pixel_size (f64)
    bytes 40-47  nodata value as f64 (ignored when flag is 0)
    bytes 48-63  reserved, zero
    bytes 64-    payload, row-major, native dtype
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ManifestError, RasterFormatError

MAGIC = b"RBN1"
HEADER_SIZE = 64

DTYPE_CODES = {
    np.dtype("uint8"): 0,
    np.dtype("uint16"): 1,
    np.dtype("int16"): 2,
    np.dtype("float32"): 3,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}

BANDS_10M = ("B02", "B03", "B04", "B08")
BANDS_20M = ("B05", "B06", "B07", "B8A", "B11", "B12")
FEATURE_BANDS = BANDS_10M + BANDS_20M


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a pixel grid: size, top-left corner, square pixel size."""

    width: int
    height: int
    origin_x: float
    origin_y: float
    pixel_size: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")

    def center_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Map coordinates of every pixel center as (x of shape (w,), y of shape (h,))."""
        cols = np.arange(self.width, dtype=np.float64)
        rows = np.arange(self.height, dtype=np.float64)
        x = self.origin_x + (cols + 0.5) * self.pixel_size
        y = self.origin_y - (rows + 0.5) * self.pixel_size
        return x, y

    def scaled(self, factor: int) -> "GridSpec":
        """Same extent at ``pixel_size * factor``; dimensions must divide evenly."""
        if self.width % factor or self.height % factor:
            raise ValueError(f"{self.width}x{self.height} not divisible by {factor}")
        return GridSpec(
            self.width // factor,
            self.height // factor,
            self.origin_x,
            self.origin_y,
            self.pixel_size * factor,
        )


class RasterGrid:
    """Single-band raster: a GridSpec plus a row-major value array.

    Immutable by convention; operations return new grids.  ``nodata`` is an
    optional sentinel within the dtype's range (never NaN).
    """

    __slots__ = ("spec", "dtype", "nodata", "values")

    def __init__(self, spec: GridSpec, values: np.ndarray, nodata=None):
        values = np.asarray(values)
        dtype = np.dtype(values.dtype)
        if dtype not in DTYPE_CODES:
            raise ValueError(f"unsupported raster dtype {dtype}")
        if values.shape != (spec.height, spec.width):
            raise ValueError(
                f"values shape {values.shape} != grid {spec.height}x{spec.width}"
            )
        if dtype == np.dtype("float32"):
            if nodata is not None and not np.isfinite(nodata):
                raise ValueError("nodata must be finite")
            if not np.all(np.isfinite(values)):
                raise ValueError("raster holds non-finite values")
        if nodata is not None:
            try:
                cast = dtype.type(nodata)
            except (OverflowError, ValueError) as exc:
                raise ValueError(f"nodata {nodata} not representable in {dtype}") from exc
            if float(cast) != float(nodata):
                raise ValueError(f"nodata {nodata} not representable in {dtype}")
            nodata = cast
        self.spec = spec
        self.dtype = dtype
        self.nodata = nodata
        self.values = values

    @property
    def width(self) -> int:
        return self.spec.width

    @property
    def height(self) -> int:
        return self.spec.height

    def valid_mask(self) -> np.ndarray:
        """Boolean plane, True where the pixel is not nodata."""
        if self.nodata is None:
            return np.ones(self.values.shape, dtype=bool)
        return self.values != self.nodata

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.dtype == other.dtype
            and (self.nodata is None) == (other.nodata is None)
            and (self.nodata is None or self.nodata == other.nodata)
            and bool(np.array_equal(self.values, other.values))
        )

    def __repr__(self) -> str:
        return (
            f"RasterGrid({self.width}x{self.height} {self.dtype.name}"
            f" px={self.spec.pixel_size} nodata={self.nodata})"
        )


def encode_rbin(grid: RasterGrid) -> bytes:
    """Serialize a grid to RBIN bytes."""
    header = struct.pack(
        "<4sBBHIIdddd16x",
        MAGIC,
        DTYPE_CODES[grid.dtype],
        0 if grid.nodata is None else 1,
        0,
        grid.width,
        grid.height,
        grid.spec.origin_x,
        grid.spec.origin_y,
        grid.spec.pixel_size,
        0.0 if grid.nodata is None else float(grid.nodata),
    )
    payload = np.ascontiguousarray(grid.values, dtype=grid.dtype.newbyteorder("<"))
    return header + payload.tobytes()


def decode_rbin(blob: bytes) -> RasterGrid:
    """Parse RBIN bytes back into a grid, bit-exactly."""
    if len(blob) < HEADER_SIZE:
        raise RasterFormatError(f"file too short for header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise RasterFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (dtype_code, nodata_flag, _reserved, width, height, ox, oy, px, nodata_f64) = (
        struct.unpack_from("<BBHIIdddd", blob, 4)
    )
    if dtype_code not in CODE_DTYPES:
        raise RasterFormatError(f"unknown dtype code {dtype_code}")
    dtype = CODE_DTYPES[dtype_code]
    expected = HEADER_SIZE + width * height * dtype.itemsize
    if len(blob) != expected:
        raise RasterFormatError(
            f"payload length mismatch: file is {len(blob)} bytes, expected {expected}"
        )
    values = np.frombuffer(blob, dtype=dtype.newbyteorder("<"), offset=HEADER_SIZE)
    values = values.astype(dtype, copy=True).reshape(height, width)
    spec = GridSpec(width, height, ox, oy, px)
    nodata = dtype.type(nodata_f64) if nodata_flag else None
    return RasterGrid(spec, values, nodata=nodata)


def write_rbin(grid: RasterGrid, path) -> int:
    """Write a grid to ``path``; returns bytes written (64 + w*h*itemsize)."""
    blob = encode_rbin(grid)
    Path(path).write_bytes(blob)
    return len(blob)


def read_rbin(path) -> RasterGrid:
    return decode_rbin(Path(path).read_bytes())


def _src_indices(src: GridSpec, target: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Row/col of the source cell containing each target pixel center, clamped."""
    tx, ty = target.center_coords()
    cols = np.floor((tx - src.origin_x) / src.pixel_size).astype(np.int64)
    rows = np.floor((src.origin_y - ty) / src.pixel_size).astype(np.int64)
    np.clip(cols, 0, src.width - 1, out=cols)
    np.clip(rows, 0, src.height - 1, out=rows)
    return rows, cols


def resample_nearest(src: RasterGrid, target: GridSpec) -> RasterGrid:
    """Nearest-neighbor regrid: each target pixel copies the source cell that
    contains its center.  Dtype is preserved and nodata propagates as-is."""
    rows, cols = _src_indices(src.spec, target)
    values = src.values[np.ix_(rows, cols)]
    return RasterGrid(target, values, nodata=src.nodata)


def resample_bilinear(src: RasterGrid, target: GridSpec) -> RasterGrid:
    """Bilinear regrid on the source pixel-center lattice.

    Target centers outside the lattice clamp to the boundary centers.  Output
    is float32; a pixel becomes nodata when any source pixel contributing to
    its blend with nonzero weight is nodata (strict propagation).
    """
    tx, ty = target.center_coords()
    fx = (tx - src.spec.origin_x) / src.spec.pixel_size - 0.5
    fy = (src.spec.origin_y - ty) / src.spec.pixel_size - 0.5
    np.clip(fx, 0.0, src.width - 1, out=fx)
    np.clip(fy, 0.0, src.height - 1, out=fy)

    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    np.clip(x0, 0, max(src.width - 2, 0), out=x0)
    np.clip(y0, 0, max(src.height - 2, 0), out=y0)
    x1 = np.minimum(x0 + 1, src.width - 1)
    y1 = np.minimum(y0 + 1, src.height - 1)
    wx = fx - x0
    wy = fy - y0

    vals = src.values.astype(np.float64)
    v00 = vals[np.ix_(y0, x0)]
    v01 = vals[np.ix_(y0, x1)]
    v10 = vals[np.ix_(y1, x0)]
    v11 = vals[np.ix_(y1, x1)]
    wxg = wx[np.newaxis, :]
    wyg = wy[:, np.newaxis]
    w00 = (1.0 - wyg) * (1.0 - wxg)
    w01 = (1.0 - wyg) * wxg
    w10 = wyg * (1.0 - wxg)
    w11 = wyg * wxg
    blend = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11
    out = blend.astype(np.float32)

    nodata_out = None
    if src.nodata is not None:
        # A neighbor contributes only with nonzero weight; zero-weight pixels
        # (exact lattice alignment, clamped borders) cannot poison the blend.
        bad = src.values == src.nodata
        poison = (
            (bad[np.ix_(y0, x0)] & (w00 > 0))
            | (bad[np.ix_(y0, x1)] & (w01 > 0))
            | (bad[np.ix_(y1, x0)] & (w10 > 0))
            | (bad[np.ix_(y1, x1)] & (w11 > 0))
        )
        nodata_out = np.float32(src.nodata)
        out[poison] = nodata_out
    return RasterGrid(target, out, nodata=nodata_out)


class Scene:
    """One acquisition with everything on the common 10 m grid.

    ``bands`` follows the fixed feature order (four native 10 m bands, then
    the six 20 m bands already resampled); ``scl`` and ``cloud_conf`` are the
    nearest-neighbor regrids of the 20 m masks.
    """

    __slots__ = ("scene_id", "datetime", "bands", "scl", "cloud_conf")

    def __init__(
        self,
        scene_id: str,
        datetime: str,
        bands: tuple[RasterGrid, ...],
        scl: RasterGrid,
        cloud_conf: RasterGrid,
    ):
        if len(bands) != len(FEATURE_BANDS):
            raise ManifestError(f"scene needs {len(FEATURE_BANDS)} bands, got {len(bands)}")
        spec = bands[0].spec
        for grid in (*bands[1:], scl, cloud_conf):
            if grid.spec != spec:
                raise AlignmentError("scene rasters do not share one grid")
        self.scene_id = scene_id
        self.datetime = datetime
        self.bands = tuple(bands)
        self.scl = scl
        self.cloud_conf = cloud_conf

    @property
    def spec(self) -> GridSpec:
        return self.bands[0].spec

    def feature_stack(self) -> np.ndarray:
        """(height, width, 10) float32 view of the band values."""
        return np.stack([b.values.astype(np.float32, copy=False) for b in self.bands], axis=-1)

    def bands_valid(self) -> np.ndarray:
        """True where every band holds a real (non-nodata) measurement."""
        mask = self.bands[0].valid_mask()
        for band in self.bands[1:]:
            mask = mask & band.valid_mask()
        return mask


@dataclass(frozen=True)
class BandRef:
    path: str
    resolution: int


@dataclass(frozen=True)
class SceneManifest:
    """One acquisition: ten feature bands plus SCL and cloud-confidence rasters.

    Band order is fixed: the four native 10 m bands then the six 20 m bands.
    Paths are stored as given; ``resolve`` joins them to the manifest's dir.
    """

    scene_id: str
    tile_id: str
    datetime: str
    bands: dict[str, BandRef]
    scl_path: str
    cloud_conf_path: str
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        missing = [b for b in FEATURE_BANDS if b not in self.bands]
        extra = [b for b in self.bands if b not in FEATURE_BANDS]
        if missing or extra:
            raise ManifestError(
                f"manifest must carry exactly bands {list(FEATURE_BANDS)}; "
                f"missing {missing}, unexpected {extra}"
            )
        for name, ref in self.bands.items():
            want = 10 if name in BANDS_10M else 20
            if ref.resolution != want:
                raise ManifestError(f"band {name} must be {want} m, got {ref.resolution}")

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel

    @classmethod
    def from_json(cls, path) -> "SceneManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        try:
            bands = {
                name: BandRef(ref["path"], int(ref["resolution"]))
                for name, ref in doc["bands"].items()
            }
            return cls(
                scene_id=doc["scene_id"],
                tile_id=doc["tile_id"],
                datetime=doc["datetime"],
                bands=bands,
                scl_path=doc["scl_path"],
                cloud_conf_path=doc["cloud_conf_path"],
                base_dir=path.parent,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"manifest {path} missing field: {exc}") from exc

    def to_json_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "tile_id": self.tile_id,
            "datetime": self.datetime,
            "bands": {
                name: {"path": ref.path, "resolution": ref.resolution}
                for name, ref in self.bands.items()
            },
            "scl_path": self.scl_path,
            "cloud_conf_path": self.cloud_conf_path,
        }
