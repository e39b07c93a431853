"""Event stream loading, window slicing, and voxel-grid conversion.

Raw event cameras emit asynchronous (x, y, t, polarity) tuples. Models
consume a dense B x H x W spatiotemporal grid built with a triangular
temporal kernel: with t* = (B-1) * (t - t0) / dT, an event deposits
p * max(1 - |t* - b|, 0) into bin b at its pixel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from seal import kernels

EVT_MAGIC = b"EVT1"
VOX_MAGIC = b"VOX1"

# Default windows: 25 ms for DSEC-resolution recordings, 15 ms for DDD17.
DEFAULT_BINS = 3
DEFAULT_WINDOW_US = {"dsec": 25_000, "ddd17": 15_000}


class EventFormatError(ValueError):
    """Malformed event container (bad magic, truncation, unparsable rows)."""


class EventValidationError(ValueError):
    """Structurally valid file with out-of-contract record values."""


@dataclass(frozen=True)
class EventStream:
    """Column-oriented event stream with sensor geometry.

    Invariants: equal-length arrays, non-decreasing timestamps,
    coordinates inside the sensor, polarity in {-1, +1}.
    """

    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        n = len(self.xs)
        if not (len(self.ys) == len(self.ts) == len(self.ps) == n):
            raise EventValidationError("event arrays must have equal length")
        if n:
            if np.any(np.diff(self.ts) < 0):
                raise EventValidationError("timestamps must be non-decreasing")
            bad = np.flatnonzero(
                (self.xs < 0) | (self.xs >= self.width)
                | (self.ys < 0) | (self.ys >= self.height)
            )
            if bad.size:
                raise EventValidationError(
                    f"record {bad[0]}: coordinate outside {self.width}x{self.height} sensor"
                )
            badp = np.flatnonzero(np.abs(self.ps) != 1)
            if badp.size:
                raise EventValidationError(f"record {badp[0]}: polarity must be -1 or +1")

    def __len__(self) -> int:
        return len(self.xs)

    @staticmethod
    def from_arrays(xs, ys, ts, ps, width: int, height: int) -> "EventStream":
        return EventStream(
            xs=np.asarray(xs, dtype=np.int64),
            ys=np.asarray(ys, dtype=np.int64),
            ts=np.asarray(ts, dtype=np.int64),
            ps=np.asarray(ps, dtype=np.int64),
            width=int(width),
            height=int(height),
        )

    @staticmethod
    def empty(width: int, height: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return EventStream(z, z, z, z, int(width), int(height))


@dataclass(frozen=True)
class VoxelConfig:
    """Temporal bins B, window length dT (microseconds), output geometry."""

    bins: int = DEFAULT_BINS
    window_us: int = DEFAULT_WINDOW_US["dsec"]
    height: int = 512
    width: int = 512

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("bins must be >= 1")
        if self.window_us <= 0:
            raise ValueError("window must be positive")


@dataclass(frozen=True)
class VoxelGrid:
    """Dense B x H x W grid over one time window starting at t0."""

    data: np.ndarray
    config: VoxelConfig
    t0: int = 0

    def __post_init__(self):
        expected = (self.config.bins, self.config.height, self.config.width)
        if self.data.shape != expected:
            raise ValueError(f"grid shape {self.data.shape} != config {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("grid contains non-finite values")


# --------------------------------------------------------------------------
# container IO
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHHQ")
_RECORD_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "i1")])


def save_events(stream: EventStream, path) -> None:
    """Write the little-endian EVT1 container."""
    rec = np.empty(len(stream), dtype=_RECORD_DTYPE)
    rec["x"] = stream.xs
    rec["y"] = stream.ys
    rec["t"] = stream.ts
    rec["p"] = stream.ps
    with open(path, "wb") as f:
        f.write(_HEADER.pack(EVT_MAGIC, stream.width, stream.height, len(stream)))
        f.write(rec.tobytes())


def _load_binary(path) -> EventStream:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise EventFormatError(f"{path}: truncated header")
        magic, width, height, count = _HEADER.unpack(head)
        if magic != EVT_MAGIC:
            raise EventFormatError(f"{path}: bad magic {magic!r}")
        payload = f.read(count * _RECORD_DTYPE.itemsize)
    if len(payload) < count * _RECORD_DTYPE.itemsize:
        raise EventFormatError(f"{path}: truncated payload ({count} records declared)")
    rec = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    return EventStream.from_arrays(rec["x"], rec["y"], rec["t"], rec["p"], width, height)


def _load_csv(path, width: int, height: int) -> EventStream:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if [c.strip() for c in header.split(",")] != ["x", "y", "t", "p"]:
            raise EventFormatError(f"{path}: expected header 'x,y,t,p', got {header!r}")
        rows = []
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise EventFormatError(f"{path}: row {i}: expected 4 columns")
            try:
                rows.append(tuple(int(v) for v in parts))
            except ValueError as e:
                raise EventFormatError(f"{path}: row {i}: {e}") from e
    if not rows:
        return EventStream.empty(width, height)
    arr = np.asarray(rows, dtype=np.int64)
    # Re-validate here so the error names the offending row, not just the record.
    for col, bound, name in ((0, width, "x"), (1, height, "y")):
        bad = np.flatnonzero((arr[:, col] < 0) | (arr[:, col] >= bound))
        if bad.size:
            raise EventValidationError(
                f"{path}: row {bad[0]}: {name}={arr[bad[0], col]} outside sensor {width}x{height}"
            )
    return EventStream.from_arrays(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height)


def load_events(path, format: str = "binary", width: int | None = None,
                height: int | None = None) -> EventStream:
    """Load an event stream from the EVT1 binary container or a CSV file.

    CSV files carry no geometry, so ``width``/``height`` are required there.
    """
    if format == "binary":
        return _load_binary(path)
    if format == "csv":
        if width is None or height is None:
            raise ValueError("csv format requires explicit width/height")
        return _load_csv(path, width, height)
    raise ValueError(f"unknown event format {format!r}")


def save_voxel(grid: VoxelGrid, path) -> None:
    cfg = grid.config
    with open(path, "wb") as f:
        f.write(VOX_MAGIC)
        f.write(struct.pack("<HHHQQ", cfg.bins, cfg.height, cfg.width,
                            grid.t0, cfg.window_us))
        f.write(grid.data.astype("<f4").tobytes())


def load_voxel(path) -> VoxelGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != VOX_MAGIC:
            raise EventFormatError(f"{path}: bad voxel magic {magic!r}")
        bins, height, width, t0, window_us = struct.unpack("<HHHQQ", f.read(22))
        data = np.frombuffer(f.read(bins * height * width * 4), dtype="<f4")
    if data.size != bins * height * width:
        raise EventFormatError(f"{path}: truncated voxel payload")
    cfg = VoxelConfig(bins=bins, window_us=window_us, height=height, width=width)
    return VoxelGrid(data.astype(np.float64).reshape(bins, height, width), cfg, t0=t0)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def slice_window(stream: EventStream, t_start: int, window_us: int) -> EventStream:
    """Events with t_start <= t < t_start + window_us, order preserved.

    The window is half-open so consecutive windows never double count.
    """
    if window_us <= 0:
        raise ValueError("window must be positive")
    lo = int(np.searchsorted(stream.ts, t_start, side="left"))
    hi = int(np.searchsorted(stream.ts, t_start + window_us, side="left"))
    return replace(
        stream,
        xs=stream.xs[lo:hi], ys=stream.ys[lo:hi],
        ts=stream.ts[lo:hi], ps=stream.ps[lo:hi],
    )


def _rescale_coords(coords: np.ndarray, n_in: int, n_out: int) -> np.ndarray:
    """Nearest-integer coordinate mapping onto a different raster size."""
    if n_in == n_out:
        return coords
    scaled = np.floor(coords * (n_out / n_in) + 0.5).astype(np.int64)
    return np.clip(scaled, 0, n_out - 1)


def voxelize(stream: EventStream, cfg: VoxelConfig, t0: int | None = None) -> VoxelGrid:
    """Accumulate one already-sliced window into a B x H x W grid.

    grid[b, y, x] = sum_j p_j * [x_j = x] * [y_j = y] * max(1 - |t*_j - b|, 0)
    with t*_j = (B - 1) * (t_j - t0) / dT, clamped to [0, B-1].
    """
    if t0 is None:
        t0 = int(stream.ts[0]) if len(stream) else 0
    grid = np.zeros((cfg.bins, cfg.height, cfg.width), dtype=np.float64)
    if len(stream):
        xs = _rescale_coords(stream.xs, stream.width, cfg.width)
        ys = _rescale_coords(stream.ys, stream.height, cfg.height)
        tstar = (cfg.bins - 1) * (stream.ts - t0) / cfg.window_us
        tstar = np.clip(tstar, 0.0, cfg.bins - 1)
        kernels.voxel_accumulate(grid, xs, ys, tstar, stream.ps.astype(np.float64))
    return VoxelGrid(grid, cfg, t0=t0)


def normalize_voxel(grid: VoxelGrid) -> VoxelGrid:
    """Max-absolute normalization into [-1, 1]; all-zero grids pass through."""
    peak = np.max(np.abs(grid.data))
    if peak == 0.0:
        return grid
    return VoxelGrid(grid.data / peak, grid.config, t0=grid.t0)
