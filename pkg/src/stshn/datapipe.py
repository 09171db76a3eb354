"""Event ingestion, grid partitioning, the count tensor and its windows."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

KM_PER_DEG_LAT = 111.32
CACHE_MAGIC = "stshn-tensor v1"


class DataError(ValueError):
    """Input data cannot be turned into a usable tensor."""


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class EventRecord:
    category: str
    timestamp: float
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise DataError(f"coordinates out of range: ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class GridSpec:
    """Bounding box, cell size and slot length.

    ``t_start``/``t_end`` pin the time axis; when omitted they are taken from
    the data, aligned to slot boundaries since the epoch.
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_km: float = 3.0
    slot_hours: float = 24.0
    t_start: float | None = None
    t_end: float | None = None

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise DataError("bounding box must have lat_min < lat_max and lon_min < lon_max")
        if self.cell_km <= 0 or self.slot_hours <= 0:
            raise DataError("cell_km and slot_hours must be positive")
        if self.t_start is not None and self.t_end is not None and self.t_end <= self.t_start:
            raise DataError("t_end must be after t_start")

    @property
    def cell_lat_deg(self) -> float:
        return self.cell_km / KM_PER_DEG_LAT

    @property
    def cell_lon_deg(self) -> float:
        mid = math.radians(0.5 * (self.lat_min + self.lat_max))
        return self.cell_km / (KM_PER_DEG_LAT * math.cos(mid))

    @property
    def slot_seconds(self) -> float:
        return self.slot_hours * 3600.0

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) of the lattice; rows run south to north."""
        rows = math.ceil((self.lat_max - self.lat_min) / self.cell_lat_deg - 1e-9)
        cols = math.ceil((self.lon_max - self.lon_min) / self.cell_lon_deg - 1e-9)
        return max(rows, 1), max(cols, 1)

    def cell_of(self, lat: float, lon: float) -> tuple[int, int] | None:
        if not (self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max):
            return None
        rows, cols = self.shape
        row = min(int((lat - self.lat_min) / self.cell_lat_deg), rows - 1)
        col = min(int((lon - self.lon_min) / self.cell_lon_deg), cols - 1)
        return row, col

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        lat = self.lat_min + (row + 0.5) * self.cell_lat_deg
        lon = self.lon_min + (col + 0.5) * self.cell_lon_deg
        return min(lat, self.lat_max), min(lon, self.lon_max)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("lat_min", "lat_max", "lon_min", "lon_max", "cell_km", "slot_hours", "t_start", "t_end")}


@dataclass(eq=False)
class CrimeTensor:
    """Counts indexed [region, slot, category] with per-category statistics."""

    counts: np.ndarray
    categories: list[str]
    grid_shape: tuple[int, int]
    grid: GridSpec | None = None
    dropped: dict[str, int] = field(default_factory=dict, compare=False)
    mu: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 3:
            raise DataError(f"counts must be rank 3, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise DataError("counts must be non-negative")
        if self.counts.shape[0] != self.grid_shape[0] * self.grid_shape[1]:
            raise DataError(f"{self.counts.shape[0]} regions do not fill grid {self.grid_shape}")
        if self.counts.shape[2] != len(self.categories):
            raise DataError("category labels do not match the category axis")
        self.counts = self.counts.astype(np.uint32)
        self.mu, self.sigma = category_stats(self.counts, self.categories)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape

    def region_id(self, row: int, col: int) -> int:
        return row * self.grid_shape[1] + col

    def region_cell(self, region: int) -> tuple[int, int]:
        return divmod(region, self.grid_shape[1])

    def normalized(self) -> np.ndarray:
        return normalize(self)

    def same_as(self, other: "CrimeTensor") -> bool:
        return (self.categories == other.categories
                and tuple(self.grid_shape) == tuple(other.grid_shape)
                and self.counts.shape == other.counts.shape
                and bool(np.array_equal(self.counts, other.counts)))


def category_stats(counts: np.ndarray, categories=None) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(counts, dtype=np.float64)
    mu = x.mean(axis=(0, 1))
    sigma = x.std(axis=(0, 1))
    for c in np.flatnonzero(sigma == 0):
        label = categories[c] if categories is not None else c
        log.warning("category %s is constant; clamping its std to 1", label)
        sigma[c] = 1.0
    return mu, sigma


def normalize(ct: CrimeTensor) -> np.ndarray:
    """Per-category z-score of the counts."""
    return (ct.counts.astype(np.float64) - ct.mu) / ct.sigma


def denormalize(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    return np.asarray(x) * sigma + mu


def binarize(counts) -> np.ndarray:
    return (np.asarray(counts) > 0).astype(np.int8)


def parse_timestamp(text: str) -> float:
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def read_events(path) -> list[EventRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or (lineno == 1 and row[0].strip().lower() == "category"):
                continue
            try:
                cat, ts, lat, lon = row
                records.append(EventRecord(cat.strip(), parse_timestamp(ts), float(lat), float(lon)))
            except (ValueError, DataError) as exc:
                raise DataError(f"{path}: line {lineno}: cannot parse {row!r} ({exc})") from None
    return records


def tensor_from_events(records, grid: GridSpec, categories) -> CrimeTensor:
    categories = list(categories)
    if not categories:
        raise DataError("category list is empty")
    cat_index = {c: i for i, c in enumerate(categories)}
    rows, cols = grid.shape
    slot = grid.slot_seconds
    dropped = {"outside_box": 0, "unknown_category": 0, "outside_time": 0}

    kept = []
    for rec in records:
        if rec.category not in cat_index:
            dropped["unknown_category"] += 1
            continue
        cell = grid.cell_of(rec.lat, rec.lon)
        if cell is None:
            dropped["outside_box"] += 1
            continue
        kept.append((cell[0] * cols + cell[1], rec.timestamp, cat_index[rec.category]))

    t_start = grid.t_start
    t_end = grid.t_end
    if kept:
        stamps = [k[1] for k in kept]
        if t_start is None:
            t_start = math.floor(min(stamps) / slot) * slot
        if t_end is None:
            t_end = (math.floor(max(stamps) / slot) + 1) * slot
    if not kept or t_end <= t_start:
        raise EmptyDatasetError("no events fall inside the grid, category list and time range")
    T = math.ceil((t_end - t_start) / slot - 1e-9)

    counts = np.zeros((rows * cols, T, len(categories)), dtype=np.uint32)
    n_kept = 0
    for region, ts, c in kept:
        if not t_start <= ts < t_end:
            dropped["outside_time"] += 1
            continue
        counts[region, int((ts - t_start) // slot), c] += 1
        n_kept += 1
    if n_kept == 0:
        raise EmptyDatasetError("no events fall inside the grid, category list and time range")
    if any(dropped.values()):
        log.warning("ingestion skipped records: %s", dropped)
    pinned = GridSpec(grid.lat_min, grid.lat_max, grid.lon_min, grid.lon_max,
                      grid.cell_km, grid.slot_hours, float(t_start), float(t_end))
    return CrimeTensor(counts, categories, (rows, cols), pinned, dropped)


def ingest_csv(path, grid: GridSpec, categories) -> CrimeTensor:
    """Read ``category,timestamp,lat,lon`` rows into a count tensor."""
    return tensor_from_events(read_events(path), grid, categories)


def write_events_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "timestamp", "lat", "lon"])
        for r in records:
            w.writerow([r.category, int(r.timestamp), repr(r.lat), repr(r.lon)])


# tensor cache: text header lines, a blank line, then raw little-endian uint32 counts

def save_tensor(ct: CrimeTensor, path) -> None:
    header = {
        "shape": list(ct.shape),
        "categories": ct.categories,
        "grid_shape": list(ct.grid_shape),
        "grid": ct.grid.to_dict() if ct.grid is not None else None,
        "mu": ["%.17g" % v for v in ct.mu],
        "sigma": ["%.17g" % v for v in ct.sigma],
    }
    with open(path, "wb") as fh:
        fh.write((CACHE_MAGIC + "\n" + json.dumps(header) + "\n\n").encode())
        fh.write(np.ascontiguousarray(ct.counts, dtype="<u4").tobytes())


def load_tensor(path) -> CrimeTensor:
    raw = Path(path).read_bytes()
    try:
        magic, header_line, rest = raw.split(b"\n", 2)
        if magic.decode() != CACHE_MAGIC or not rest.startswith(b"\n"):
            raise DataError(f"{path}: not a tensor cache")
        header = json.loads(header_line)
        shape = tuple(header["shape"])
        body = rest[1:]
        if len(body) != 4 * int(np.prod(shape)):
            raise DataError(f"{path}: expected {4 * int(np.prod(shape))} count bytes, found {len(body)}")
        counts = np.frombuffer(body, dtype="<u4").reshape(shape)
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed tensor cache ({exc})") from None
    grid = GridSpec(**header["grid"]) if header.get("grid") else None
    ct = CrimeTensor(counts.copy(), header["categories"], tuple(header["grid_shape"]), grid)
    ct.mu = np.array([float(v) for v in header["mu"]])
    ct.sigma = np.array([float(v) for v in header["sigma"]])
    return ct


@dataclass(frozen=True)
class Windows:
    """Target slots per split; window for target t reads slots [t-W, t)."""

    window: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def inputs(self, t: int) -> slice:
        return slice(t - self.window, t)


def make_windows(T: int, window: int = 30, split_ratio: tuple[int, int] = (7, 1),
                 val_slots: int = 30) -> Windows:
    """Chronological train/validation/test split of the eligible targets.

    Targets are W..T-1. The test share is ``ceil(n * b / (a + b))`` of them for
    ratio a:b; validation is the last ``min(val_slots, ceil(10%))`` of the rest.
    """
    if window < 1:
        raise DataError("window length must be at least 1")
    if T < window + 1:
        raise DataError(f"series of {T} slots is too short: need at least {window + 1} for window {window}")
    a, b = split_ratio
    if a <= 0 or b <= 0:
        raise DataError(f"invalid split ratio {split_ratio}")
    targets = np.arange(window, T)
    n = targets.size
    n_test = math.ceil(n * b / (a + b))
    n_trainval = n - n_test
    n_val = min(val_slots, math.ceil(0.1 * n_trainval))
    n_train = n_trainval - n_val
    if n_train < 1:
        raise DataError(f"series of {T} slots leaves no training windows for window {window}")
    return Windows(window, targets[:n_train], targets[n_train:n_trainval], targets[n_trainval:])
