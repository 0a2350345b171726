"""Post-hoc analysis of saved adjacency snapshots.

Connectivity votes and average non-zero weights summarize batches of
generated maps; the lockdown table relates the mobility indicator of maps
around known lockdown windows; heatmap export renders a single map as a
deterministic SVG (blue = weak, red = strong).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import mobility_indicator


@dataclass(frozen=True)
class LockdownWindow:
    region_id: str
    start: date
    end: date
    post_days: int | None = None     # per-region override of the post span

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError(f"{self.region_id}: lockdown start {self.start} after end {self.end}")


@dataclass(frozen=True)
class IndicatorTableRow:
    region_id: str
    start: date
    end: date
    during: float
    pre_average: float
    pre_first: float
    post_average: float
    post_last: float
    partial: bool = False            # window not fully covered by snapshots


def _is_identity(m: np.ndarray) -> bool:
    return np.array_equal(m, np.eye(m.shape[0]))


def connectivity_votes(snapshots: Sequence[np.ndarray],
                       include_columns: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-region (min_votes, max_votes) over a batch of square maps.

    Connectivity of region i in one map counts non-zero off-diagonal entries
    of row i plus column i (row-only with ``include_columns=False``). Every
    region attaining the map's minimum gets a min vote, every region at the
    maximum a max vote; maps equal to the identity are skipped.
    """
    snaps = [np.asarray(s, dtype=np.float64) for s in snapshots]
    if not snaps:
        raise ValueError("connectivity_votes: no snapshots")
    n = snaps[0].shape[0]
    for s in snaps:
        if s.shape != (n, n):
            raise ValueError(f"inconsistent snapshot shapes: {s.shape} vs {(n, n)}")
    min_votes = np.zeros(n, dtype=np.int64)
    max_votes = np.zeros(n, dtype=np.int64)
    off = ~np.eye(n, dtype=bool)
    for s in snaps:
        if _is_identity(s):
            continue
        nz = (s != 0) & off
        conn = nz.sum(axis=1)
        if include_columns:
            conn = conn + nz.sum(axis=0)
        min_votes[conn == conn.min()] += 1
        max_votes[conn == conn.max()] += 1
    return min_votes, max_votes


def avg_nonzero_weight(snapshots: Sequence[np.ndarray]) -> float:
    """Mean of strictly positive entries pooled across all snapshots."""
    pooled = []
    for s in snapshots:
        s = np.asarray(s, dtype=np.float64)
        pooled.append(s[s > 0])
    if not pooled or sum(p.size for p in pooled) == 0:
        raise ValueError("avg_nonzero_weight: no positive entries")
    return float(np.concatenate(pooled).mean())


def lockdown_indicator_table(snapshots_by_start: Mapping[date, np.ndarray],
                             windows: Iterable[LockdownWindow],
                             pre_days: int = 24, post_days: int = 24) -> list[IndicatorTableRow]:
    """Mobility-indicator summary around each lockdown window.

    A sample belongs to the lockdown period when its start date falls inside
    [start, end]; the pre block is the ``pre_days`` sample dates immediately
    before the start (pre-first = the earliest of them), the post block the
    ``post_days`` dates after the end (post-last = the latest). Rows whose
    window is not fully covered are flagged partial rather than dropped.
    """
    days = sorted(snapshots_by_start)
    pis = {d: mobility_indicator(snapshots_by_start[d]) for d in days}
    rows = []
    for w in windows:
        during_days = [d for d in days if w.start <= d <= w.end]
        pre_block = [d for d in days if d < w.start][-pre_days:]
        span = w.post_days if w.post_days is not None else post_days
        post_block = [d for d in days if d > w.end][:span]
        expected_during = (w.end - w.start).days + 1
        partial = (len(during_days) < expected_during
                   or len(pre_block) < pre_days or len(post_block) < span)
        if not during_days or not pre_block or not post_block:
            rows.append(IndicatorTableRow(w.region_id, w.start, w.end,
                                          during=float("nan"), pre_average=float("nan"),
                                          pre_first=float("nan"), post_average=float("nan"),
                                          post_last=float("nan"), partial=True))
            continue
        rows.append(IndicatorTableRow(
            region_id=w.region_id, start=w.start, end=w.end,
            during=float(np.mean([pis[d] for d in during_days])),
            pre_average=float(np.mean([pis[d] for d in pre_block])),
            pre_first=pis[pre_block[0]],
            post_average=float(np.mean([pis[d] for d in post_block])),
            post_last=pis[post_block[-1]],
            partial=partial,
        ))
    return rows


def load_lockdown_windows(path: str | Path) -> list[LockdownWindow]:
    """CSV `region,start,end[,post_days]` with ISO dates."""
    windows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"region", "start", "end"}.issubset(reader.fieldnames):
            raise ValueError(f"{path}: expected header region,start,end[,post_days]")
        for row in reader:
            post = row.get("post_days")
            windows.append(LockdownWindow(
                region_id=row["region"],
                start=date.fromisoformat(row["start"]),
                end=date.fromisoformat(row["end"]),
                post_days=int(post) if post else None,
            ))
    return windows


# ---------------------------------------------------------------------------
# heatmap export
# ---------------------------------------------------------------------------

_BLUE = (59, 76, 192)
_WHITE = (247, 247, 247)
_RED = (180, 4, 38)
_CELL = 24
_MARGIN = 72


def _ramp(t: float) -> str:
    """Diverging blue -> white -> red over t in [0, 1]."""
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        lo, hi, u = _BLUE, _WHITE, t * 2.0
    else:
        lo, hi, u = _WHITE, _RED, (t - 0.5) * 2.0
    rgb = tuple(int(round(a + (b - a) * u)) for a, b in zip(lo, hi))
    return "#%02x%02x%02x" % rgb


def heatmap_export(matrix: np.ndarray, path: str | Path,
                   labels: Sequence[str] | None = None) -> None:
    """Write an N x N cell grid as SVG; byte output is deterministic."""
    m = np.asarray(matrix, dtype=np.float64)
    n = m.shape[0]
    if m.shape != (n, n):
        raise ValueError(f"heatmap_export needs a square matrix, got {m.shape}")
    if labels is None:
        labels = [str(i) for i in range(n)]
    vmax = float(m.max())
    width = _MARGIN + n * _CELL + 8
    height = _MARGIN + n * _CELL + 8
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    for i in range(n):
        for j in range(n):
            t = 0.0 if vmax == 0 else float(m[i, j]) / vmax
            x = _MARGIN + j * _CELL
            y = _MARGIN + i * _CELL
            parts.append(f'<rect class="cell" x="{x}" y="{y}" width="{_CELL}" '
                         f'height="{_CELL}" fill="{_ramp(t)}"/>')
    for i, lab in enumerate(labels):
        y = _MARGIN + i * _CELL + _CELL // 2 + 4
        parts.append(f'<text class="rlab" x="{_MARGIN - 6}" y="{y}" '
                     f'text-anchor="end" font-size="11">{lab}</text>')
    for j, lab in enumerate(labels):
        x = _MARGIN + j * _CELL + _CELL // 2
        parts.append(f'<text class="clab" x="{x}" y="{_MARGIN - 8}" '
                     f'text-anchor="middle" font-size="11">{lab}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
