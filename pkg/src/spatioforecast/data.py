"""Panel ingestion, imputation, per-capita normalization, windowing, splits.

Raw inputs are per-channel CSVs (`date,region,value`) plus a region table
(`region,lat,lon,population`). Panels are aligned on a gap-free daily axis;
missing cells are NaN until imputation. All operations are pure; panels are
never mutated after construction.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CHANNEL_ORDER = "IMHB"          # incidence first: it is the evaluation target
PER_CAPITA_CHANNELS = "IMH"     # mobility (B) is already a relative index
MISSING_TOKENS = {"", "NA"}


class PanelError(ValueError):
    """Base class for data-layer contract violations."""


class UnknownRegionError(PanelError):
    pass


class DuplicateRowError(PanelError):
    pass


class NonMonotoneDatesError(PanelError):
    pass


class ShortSeriesError(PanelError):
    pass


class PanelTooShortError(PanelError):
    pass


@dataclass(frozen=True)
class Region:
    region_id: str
    latitude: float
    longitude: float
    population: int


@dataclass(frozen=True)
class RegionTable:
    regions: tuple[Region, ...]

    def __post_init__(self):
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise PanelError("region ids are not unique")
        for r in self.regions:
            if abs(r.latitude) > 90 or abs(r.longitude) > 180:
                raise PanelError(f"{r.region_id}: coordinates out of range")
            if r.population <= 0:
                raise PanelError(f"{r.region_id}: population must be positive")

    @property
    def ids(self) -> list[str]:
        return [r.region_id for r in self.regions]

    @property
    def populations(self) -> np.ndarray:
        return np.array([r.population for r in self.regions], dtype=np.float64)

    @property
    def latitudes(self) -> np.ndarray:
        return np.array([r.latitude for r in self.regions], dtype=np.float64)

    @property
    def longitudes(self) -> np.ndarray:
        return np.array([r.longitude for r in self.regions], dtype=np.float64)

    def index_of(self, region_id: str) -> int:
        try:
            return self.ids.index(region_id)
        except ValueError:
            raise UnknownRegionError(f"unknown region {region_id!r}") from None


@dataclass(frozen=True)
class RawPanel:
    """Daily values per (region, day, channel); NaN marks a missing cell."""
    dates: tuple[date, ...]
    values: np.ndarray                # N x days x C
    region_ids: tuple[str, ...]
    channels: str                     # subset of CHANNEL_ORDER, includes I

    def __post_init__(self):
        n, d, c = self.values.shape
        if n != len(self.region_ids) or d != len(self.dates) or c != len(self.channels):
            raise PanelError(f"panel axes {self.values.shape} disagree with labels")
        if "I" not in self.channels:
            raise PanelError("channel set must include incidence (I)")
        for a, b in zip(self.dates, self.dates[1:]):
            if (b - a).days != 1:
                raise PanelError(f"date axis not daily around {a}..{b}")

    @property
    def n_regions(self) -> int:
        return self.values.shape[0]

    @property
    def n_days(self) -> int:
        return self.values.shape[1]

    def missing_count(self) -> int:
        return int(np.isnan(self.values).sum())


class NormalizedPanel(RawPanel):
    """Rates per 10,000 persons (mobility passes through unscaled), no gaps."""


@dataclass(frozen=True)
class WindowSample:
    """One training instance: T input steps and the F steps right after."""
    X: np.ndarray            # N x T x C
    Y: np.ndarray            # N x F x C
    start_date: date


@dataclass(frozen=True)
class FoldSplit:
    """Disjoint chronological index ranges over the sample list."""
    fold: int | str          # 1..K or "final"
    train: range
    val: range
    test: range

    def __post_init__(self):
        if len(self.train) == 0 or len(self.val) == 0 or len(self.test) == 0:
            raise PanelError(f"fold {self.fold}: empty split {self.train}/{self.val}/{self.test}")
        if not (self.train.stop <= self.val.start and self.val.stop <= self.test.start):
            raise PanelError(f"fold {self.fold}: ranges out of order")


@dataclass(frozen=True)
class ImputationEvent:
    region_id: str
    channel: str
    day: date
    kind: str                # "interpolated", "edge_filled", "clamped_negative"


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_region_table(path: str | Path) -> RegionTable:
    regions = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"region", "lat", "lon", "population"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise PanelError(f"{path}: expected header region,lat,lon,population")
        for row in reader:
            regions.append(Region(
                region_id=row["region"],
                latitude=float(row["lat"]),
                longitude=float(row["lon"]),
                population=int(row["population"]),
            ))
    return RegionTable(tuple(regions))


def _read_channel_csv(path: str | Path, region_table: RegionTable) -> dict[tuple[str, date], float]:
    cells: dict[tuple[str, date], float] = {}
    last_seen: dict[str, date] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"date", "region", "value"}.issubset(reader.fieldnames):
            raise PanelError(f"{path}: expected header date,region,value")
        for lineno, row in enumerate(reader, start=2):
            region = row["region"]
            if region not in region_table.ids:
                raise UnknownRegionError(f"{path}:{lineno}: unknown region {region!r}")
            day = date.fromisoformat(row["date"])
            key = (region, day)
            if key in cells:
                raise DuplicateRowError(f"{path}:{lineno}: duplicate row for {region} on {day}")
            prev = last_seen.get(region)
            if prev is not None and day <= prev:
                raise NonMonotoneDatesError(f"{path}:{lineno}: dates for {region} not increasing ({prev} -> {day})")
            last_seen[region] = day
            raw = row["value"].strip()
            if raw not in MISSING_TOKENS:
                cells[key] = float(raw)
    return cells


def load_panel(csv_paths: Mapping[str, str | Path], region_table: RegionTable) -> RawPanel:
    """Align per-channel CSVs on the union daily date axis; absent cells are NaN."""
    channels = "".join(c for c in CHANNEL_ORDER if c in csv_paths)
    if set(csv_paths) - set(CHANNEL_ORDER):
        raise PanelError(f"unknown channels {sorted(set(csv_paths) - set(CHANNEL_ORDER))}")
    if "I" not in channels:
        raise PanelError("channel set must include incidence (I)")
    per_channel = {c: _read_channel_csv(csv_paths[c], region_table) for c in channels}
    all_days = sorted({day for cells in per_channel.values() for (_, day) in cells})
    if not all_days:
        raise PanelError("no data rows found")
    first, last = all_days[0], all_days[-1]
    dates = tuple(first + timedelta(days=i) for i in range((last - first).days + 1))
    day_index = {d: i for i, d in enumerate(dates)}
    ids = region_table.ids
    values = np.full((len(ids), len(dates), len(channels)), np.nan)
    for ci, c in enumerate(channels):
        for (region, day), v in per_channel[c].items():
            values[ids.index(region), day_index[day], ci] = v
    return RawPanel(dates=dates, values=values, region_ids=tuple(ids), channels=channels)


# ---------------------------------------------------------------------------
# imputation and normalization
# ---------------------------------------------------------------------------

def impute(panel: RawPanel) -> tuple[RawPanel, list[ImputationEvent]]:
    """Fill gaps: linear interpolation inside, nearest value at the edges.

    Negative raw values are clamped to zero and logged as mislabeled.
    Each (region, channel) series needs at least two observed points.
    """
    values = panel.values.copy()
    events: list[ImputationEvent] = []
    for ri, region in enumerate(panel.region_ids):
        for ci, channel in enumerate(panel.channels):
            series = values[ri, :, ci]
            neg = np.where(series < 0)[0]
            for di in neg:
                events.append(ImputationEvent(region, channel, panel.dates[di], "clamped_negative"))
            series[neg] = 0.0
            observed = np.where(~np.isnan(series))[0]
            if observed.size < 2:
                raise ShortSeriesError(f"{region}/{channel}: needs >= 2 observed points, has {observed.size}")
            missing = np.where(np.isnan(series))[0]
            if missing.size:
                series[missing] = np.interp(missing, observed, series[observed])
                lo, hi = observed[0], observed[-1]
                for di in missing:
                    kind = "interpolated" if lo < di < hi else "edge_filled"
                    events.append(ImputationEvent(region, channel, panel.dates[di], kind))
    out = RawPanel(dates=panel.dates, values=values,
                   region_ids=panel.region_ids, channels=panel.channels)
    return out, events


def normalize_per_capita(panel: RawPanel, region_table: RegionTable) -> NormalizedPanel:
    """Counts -> rate per 10,000 persons for I/M/H; mobility unchanged."""
    if panel.missing_count():
        raise PanelError("normalize_per_capita needs a complete panel; run impute first")
    pops = np.array([region_table.populations[region_table.index_of(r)] for r in panel.region_ids])
    values = panel.values.copy()
    for ci, c in enumerate(panel.channels):
        if c in PER_CAPITA_CHANNELS:
            values[:, :, ci] = values[:, :, ci] / pops[:, None] * 10000.0
    return NormalizedPanel(dates=panel.dates, values=values,
                           region_ids=panel.region_ids, channels=panel.channels)


# ---------------------------------------------------------------------------
# windows and folds
# ---------------------------------------------------------------------------

def make_windows(panel: RawPanel, T: int, F: int) -> list[WindowSample]:
    """Sliding (X, Y) pairs: Y starts the day after X ends; stride one day.

    A panel of D days yields D - T - F + 1 samples in chronological order;
    a test segment of S samples therefore spans S + F - 1 forecast days.
    """
    days = panel.n_days
    if days < T + F:
        raise PanelTooShortError(f"panel has {days} days, needs at least T+F={T + F}")
    samples = []
    for s in range(days - T - F + 1):
        samples.append(WindowSample(
            X=panel.values[:, s:s + T, :].copy(),
            Y=panel.values[:, s + T:s + T + F, :].copy(),
            start_date=panel.dates[s],
        ))
    return samples


def _round_half_even(num: int, den: int) -> int:
    return round(Fraction(num, den))


def split_712(n: int, offset: int = 0) -> tuple[range, range, range]:
    """Chronological 7:1:2 split of n samples via half-even boundary rounding."""
    t_end = _round_half_even(7 * n, 10)
    v_end = _round_half_even(8 * n, 10)
    train = range(offset, offset + t_end)
    val = range(offset + t_end, offset + v_end)
    test = range(offset + v_end, offset + n)
    return train, val, test


def progressive_folds(samples: Sequence | int, K: int = 5,
                      final_frac: float = 0.1) -> list[FoldSplit]:
    """Expanding-prefix folds plus a held-out chronological tail.

    The last floor(final_frac * S) samples form the "final" test set. Fold k
    (1..K) uses the first k/K of the remaining pool, split 7:1:2 internally,
    so fold test windows advance in calendar time with k. The "final" split
    reuses fold K's train/val ranges against the tail.
    """
    n = samples if isinstance(samples, int) else len(samples)
    if n < 50:
        raise PanelError(f"progressive_folds needs >= 50 samples, got {n}")
    n_final = int(math.floor(n * final_frac + 1e-12))
    pool = n - n_final
    folds: list[FoldSplit] = []
    for k in range(1, K + 1):
        pool_k = (pool * k) // K
        train, val, test = split_712(pool_k)
        folds.append(FoldSplit(fold=k, train=train, val=val, test=test))
    last = folds[-1]
    folds.append(FoldSplit(fold="final", train=last.train, val=last.val,
                           test=range(n - n_final, n)))
    return folds


def stack_windows(samples: Sequence[WindowSample], indices: Iterable[int]) -> tuple[np.ndarray, np.ndarray]:
    """Stack selected samples into (B,N,T,C) inputs and (B,N,F,C) targets."""
    idx = list(indices)
    X = np.stack([samples[i].X for i in idx], axis=0)
    Y = np.stack([samples[i].Y for i in idx], axis=0)
    return X, Y


# ---------------------------------------------------------------------------
# panel files (long CSV: date,region,channel,value)
# ---------------------------------------------------------------------------

def write_panel_csv(panel: RawPanel, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "region", "channel", "value"])
        for ri, region in enumerate(panel.region_ids):
            for ci, channel in enumerate(panel.channels):
                for di, day in enumerate(panel.dates):
                    v = panel.values[ri, di, ci]
                    writer.writerow([day.isoformat(), region, channel,
                                     "" if np.isnan(v) else repr(float(v))])


def read_panel_csv(path: str | Path) -> NormalizedPanel:
    cells: dict[tuple[str, str, date], float] = {}
    regions: list[str] = []
    channels: list[str] = []
    days: set[date] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            day = date.fromisoformat(row["date"])
            region, channel = row["region"], row["channel"]
            if region not in regions:
                regions.append(region)
            if channel not in channels:
                channels.append(channel)
            days.add(day)
            if row["value"] != "":
                cells[(region, channel, day)] = float(row["value"])
    ordered_days = sorted(days)
    dates = tuple(ordered_days)
    values = np.full((len(regions), len(dates), len(channels)), np.nan)
    day_index = {d: i for i, d in enumerate(dates)}
    for (region, channel, day), v in cells.items():
        values[regions.index(region), day_index[day], channels.index(channel)] = v
    return NormalizedPanel(dates=dates, values=values,
                           region_ids=tuple(regions), channels="".join(channels))
