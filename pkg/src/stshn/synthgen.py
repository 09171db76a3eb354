"""Seeded synthetic event counts with planted spatial, temporal and cross-category structure.

Randomness comes from a counter-based SplitMix64 stream: the uniform for cell
(t, r, c) is ``mix(mix(seed) + (index + 1) * GOLDEN)`` with
``index = (t * R + r) * C + c``, so any implementation reproduces the same
counts. Counts are Poisson draws by inverse CDF on that single uniform.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datapipe import CrimeTensor, EventRecord, GridSpec, KM_PER_DEG_LAT, write_events_csv

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(z):
    """SplitMix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
        return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, counters) -> np.ndarray:
    """Uniforms in (0, 1) keyed by (seed, counter); 53-bit resolution."""
    key = splitmix64(np.uint64(seed % 2**64))
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = splitmix64(key + (c + np.uint64(1)) * GOLDEN)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def poisson_inverse_cdf(u: np.ndarray, rate: np.ndarray) -> np.ndarray:
    """Smallest k with P(N <= k) >= u for N ~ Poisson(rate)."""
    u = np.asarray(u, dtype=np.float64)
    rate = np.broadcast_to(np.asarray(rate, dtype=np.float64), u.shape)
    k = np.zeros(u.shape, dtype=np.int64)
    p = np.exp(-rate)
    cdf = p.copy()
    active = (u > cdf) & (rate > 0)
    cap = int(np.max(rate, initial=0.0) + 20.0 * math.sqrt(np.max(rate, initial=0.0)) + 50)
    step = 0
    while active.any() and step < cap:
        step += 1
        k[active] += 1
        p[active] *= rate[active] / k[active]
        cdf[active] += p[active]
        active &= u > cdf
    return k


@dataclass
class Hotspot:
    row: int
    col: int
    category: int
    multiplier: float
    start: int = 0
    end: int | None = None  # exclusive slot; None = until the end


@dataclass
class CrossLag:
    """Events of ``source`` in a cell multiply the next slot's ``target`` rate there."""

    source: int
    target: int
    multiplier: float


@dataclass
class CellLink:
    """Events of ``category`` at the source cell multiply the next slot's rate at the target cell."""

    src_row: int
    src_col: int
    dst_row: int
    dst_col: int
    category: int
    multiplier: float


@dataclass
class SynthSpec:
    rows: int = 6
    cols: int = 6
    T: int = 400
    C: int = 2
    seed: int = 0
    base_rate: float | list[float] = 0.3
    hotspots: list[Hotspot] = field(default_factory=list)
    weekly_amplitude: float = 0.0
    cross_lags: list[CrossLag] = field(default_factory=list)
    cell_links: list[CellLink] = field(default_factory=list)
    categories: list[str] | None = None
    lat_min: float = 40.70
    lon_min: float = -74.02
    cell_km: float = 3.0
    slot_hours: float = 24.0
    t_start: int = 1388534400  # 2014-01-01T00:00:00Z

    def __post_init__(self):
        self.hotspots = [h if isinstance(h, Hotspot) else Hotspot(**h) for h in self.hotspots]
        self.cross_lags = [x if isinstance(x, CrossLag) else CrossLag(**x) for x in self.cross_lags]
        self.cell_links = [x if isinstance(x, CellLink) else CellLink(**x) for x in self.cell_links]
        if self.categories is None:
            self.categories = [f"type{c}" for c in range(self.C)]
        if len(self.categories) != self.C:
            raise ValueError("need one category label per category")
        if min(self.rows, self.cols, self.T, self.C) < 1:
            raise ValueError("rows, cols, T and C must be positive")
        if np.any(np.asarray(self.base_rate) < 0):
            raise ValueError("base rates must be non-negative")
        if not 0.0 <= self.weekly_amplitude <= 1.0:
            raise ValueError("weekly amplitude must lie in [0, 1] to keep rates non-negative")
        mults = [h.multiplier for h in self.hotspots] + [x.multiplier for x in self.cross_lags] \
            + [x.multiplier for x in self.cell_links]
        if any(m < 0 for m in mults):
            raise ValueError("multipliers must be non-negative")

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @property
    def grid(self) -> GridSpec:
        lat_max = self.lat_min + self.rows * self.cell_km / KM_PER_DEG_LAT
        mid = math.radians(0.5 * (self.lat_min + lat_max))
        lon_max = self.lon_min + self.cols * self.cell_km / (KM_PER_DEG_LAT * math.cos(mid))
        return GridSpec(self.lat_min, lat_max, self.lon_min, lon_max, self.cell_km, self.slot_hours,
                        float(self.t_start), float(self.t_start + self.T * self.slot_hours * 3600))

    def static_rate(self) -> np.ndarray:
        """Rate before the cross-lag and link boosts, shape (R, T, C)."""
        R = self.rows * self.cols
        base = np.broadcast_to(np.asarray(self.base_rate, dtype=np.float64), (self.C,))
        rate = np.broadcast_to(base, (R, self.T, self.C)).copy()
        for h in self.hotspots:
            end = self.T if h.end is None else h.end
            rate[h.row * self.cols + h.col, h.start:end, h.category] *= h.multiplier
        week = 1.0 + self.weekly_amplitude * np.sin(2.0 * np.pi * np.arange(self.T) / 7.0)
        return rate * week[None, :, None]


def generate(spec: SynthSpec) -> CrimeTensor:
    R, T, C = spec.rows * spec.cols, spec.T, spec.C
    rate = spec.static_rate()
    counts = np.zeros((R, T, C), dtype=np.int64)
    cell_index = np.arange(R * C).reshape(R, C)
    for t in range(T):
        r_t = rate[:, t, :].copy()
        if t > 0:
            prev = counts[:, t - 1, :] > 0
            for rule in spec.cross_lags:
                r_t[:, rule.target] *= np.where(prev[:, rule.source], rule.multiplier, 1.0)
            for link in spec.cell_links:
                if prev[link.src_row * spec.cols + link.src_col, link.category]:
                    r_t[link.dst_row * spec.cols + link.dst_col, link.category] *= link.multiplier
        u = counter_uniform(spec.seed, t * R * C + cell_index)
        counts[:, t, :] = poisson_inverse_cdf(u, r_t)
    return CrimeTensor(counts, list(spec.categories), (spec.rows, spec.cols), spec.grid)


def events_from_tensor(ct: CrimeTensor) -> list[EventRecord]:
    """One record per counted event, at its cell center and slot midpoint."""
    grid = ct.grid
    records = []
    for r, t, c in zip(*np.nonzero(ct.counts)):
        lat, lon = grid.cell_center(*ct.region_cell(int(r)))
        ts = grid.t_start + (int(t) + 0.5) * grid.slot_seconds
        records.extend([EventRecord(ct.categories[c], float(int(ts)), lat, lon)] * int(ct.counts[r, t, c]))
    return records


def write_synthetic(spec: SynthSpec, csv_path) -> CrimeTensor:
    """Generate, write the event CSV and a ``.spec.json`` sidecar next to it."""
    ct = generate(spec)
    write_events_csv(csv_path, events_from_tensor(ct))
    Path(str(csv_path) + ".spec.json").write_text(spec.to_json())
    return ct


def _episodes(rng: np.random.Generator, T: int, shortest: int, longest: int, offset: int = 0):
    """Alternating on/off episodes covering [0, T); yields the (start, end) of each on-episode."""
    t, on = offset, bool(rng.random() < 0.5)
    while t < T:
        dur = int(rng.integers(shortest, longest))
        if on:
            yield t, min(T, t + dur)
        on, t = not on, t + dur


def planted_spec(seed: int = 7, rows: int = 6, cols: int = 6, T: int = 400) -> SynthSpec:
    """Benchmark with switching hotspots that a recency-aware model can exploit.

    About half of the (cell, category) pairs alternate between a quiet rate of
    0.05 and a hot rate of 2.0 in episodes of 10 to 39 slots. A long-run
    average cannot follow the switches; the last few slots can. A mild weekly
    cycle and a category 0 to category 1 lag add structure.
    """
    rng = np.random.default_rng(seed)
    hotspots = []
    for r in range(rows):
        for c in range(cols):
            for k in range(2):
                if rng.random() < 0.5:
                    offset = int(rng.integers(0, 40))
                    hotspots += [Hotspot(r, c, k, 40.0, s, e) for s, e in _episodes(rng, T, 10, 40, offset)]
    return SynthSpec(rows=rows, cols=cols, T=T, C=2, seed=seed, base_rate=0.05, hotspots=hotspots,
                     weekly_amplitude=0.3, cross_lags=[CrossLag(0, 1, 2.0)])


def lagged_spec(seed: int = 11, rows: int = 6, cols: int = 6, T: int = 400) -> SynthSpec:
    """Signal carried by the previous slot only: an event suppresses the next one.

    A single category with rate 3.0 that drops a hundredfold right after a busy
    slot, so each cell roughly alternates. With a short window, the order of
    the slots decides the forecast.
    """
    return SynthSpec(rows=rows, cols=cols, T=T, C=1, seed=seed, base_rate=3.0,
                     cross_lags=[CrossLag(0, 0, 0.01)])


def long_range_spec(seed: int = 13, T: int = 400) -> SynthSpec:
    """Signal shared by distant cells of a 6x6 grid, invisible to direct neighbors.

    Cells with the same (row % 2, col % 2) parity form one of four groups that
    switch between rates 0.05 and 2.0 together, in episodes of 4 to 14 slots.
    No two members of a group are adjacent, so only a path that pools
    non-neighboring regions can read a group's current state.
    """
    rng = np.random.default_rng(seed)
    hotspots = []
    for group in range(4):
        cells = [(r, c) for r in range(6) for c in range(6) if 2 * (r % 2) + c % 2 == group]
        for s, e in _episodes(rng, T, 4, 15):
            hotspots += [Hotspot(r, c, 0, 40.0, s, e) for r, c in cells]
    return SynthSpec(rows=6, cols=6, T=T, C=1, seed=seed, base_rate=0.05, hotspots=hotspots)
