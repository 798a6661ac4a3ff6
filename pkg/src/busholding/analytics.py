"""Bunching detection, bunching statistics, reward smoothing and CSV exports.

Everything here is a pure function of episode logs or reward series, so the
same code serves single runs and pooled evaluation episodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corridor import N_HOURS, N_STOPS, UP, DOWN, ScenarioConfig, hour_index
from .sim import ARRIVE, COMPLETE, DEPART, DISPATCH, KIND_NAMES, TERMINAL, EpisodeLog

BUNCHING_THRESHOLD = 90.0
TOP_K = 7

BUNCHING_HEADER = ["time_s", "stop", "direction", "leading_bus", "trailing_bus", "gap_s"]
BY_STOP_HEADER = ["direction", "stop", "count"]
BY_HOUR_HEADER = ["direction", "hour", "count"]
TRAJECTORY_HEADER = ["bus_id", "time_s", "position_m", "stop", "direction", "kind"]
REWARD_CURVE_HEADER = ["episode", "raw", "rolling10", "ewm03"]


@dataclass(frozen=True)
class BunchingEvent:
    time: float          # trailing bus's completion time
    stop: int
    direction: int
    leading_bus: int
    trailing_bus: int
    gap: float


def detect_bunching(log: EpisodeLog, threshold: float = BUNCHING_THRESHOLD) -> list[BunchingEvent]:
    """One event per consecutive pair of completions at a (direction, stop) closer than ``threshold``."""
    last: dict[tuple[int, int], tuple[float, int]] = {}
    events = []
    for rec in log.completions():
        t, bus, d, stop = rec[0], rec[1], rec[2], rec[3]
        key = (d, stop)
        prev = last.get(key)
        if prev is not None:
            gap = t - prev[0]
            if gap < threshold and prev[1] != bus:
                events.append(BunchingEvent(t, stop, d, prev[1], bus, gap))
        last[key] = (t, bus)
    return events


@dataclass
class BunchingStats:
    by_stop: dict[int, np.ndarray]      # direction -> counts per stop index
    by_hour: dict[int, np.ndarray]      # direction -> counts per hour bin
    top: dict[int, list[tuple[int, int]]]   # direction -> [(stop, count)] most bunching-prone first

    def total(self, direction: int) -> int:
        return int(self.by_stop[direction].sum())

    def hour_totals(self) -> np.ndarray:
        return self.by_hour[UP] + self.by_hour[DOWN]


def bunching_stats(events, top_k: int = TOP_K) -> BunchingStats:
    by_stop = {d: np.zeros(N_STOPS, np.int64) for d in (DOWN, UP)}
    by_hour = {d: np.zeros(N_HOURS, np.int64) for d in (DOWN, UP)}
    for e in events:
        by_stop[e.direction][e.stop] += 1
        by_hour[e.direction][hour_index(e.time)] += 1
    top = {}
    for d, counts in by_stop.items():
        order = sorted(range(N_STOPS), key=lambda s: (-counts[s], s))
        top[d] = [(s, int(counts[s])) for s in order[:top_k]]
    return BunchingStats(by_stop, by_hour, top)


def peak_hours(events, n: int = 2) -> list[int]:
    """Hour bins holding the ``n`` largest bunching counts (both directions pooled)."""
    totals = bunching_stats(events).hour_totals()
    return sorted(range(N_HOURS), key=lambda h: (-totals[h], h))[:n]


def smooth(series, kind: str = "rolling10") -> np.ndarray:
    """``rolling10``: trailing mean over up to 10 points; ``ewm03``: EWM with weight 0.3 on the newest."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("smooth needs a non-empty 1-d series")
    if kind == "rolling10":
        c = np.cumsum(x)
        out = np.empty_like(x)
        out[:10] = c[:10] / np.arange(1, min(10, x.size) + 1)
        out[10:] = (c[10:] - c[:-10]) / 10.0
        return out
    if kind == "ewm03":
        out = np.empty_like(x)
        out[0] = x[0]
        for i in range(1, x.size):
            out[i] = 0.3 * x[i] + 0.7 * out[i - 1]
        return out
    raise ValueError(f"unknown smoothing kind {kind!r}")


# --- exports ----------------------------------------------------------------

def _write(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def trajectory_rows(log: EpisodeLog, scenario: ScenarioConfig):
    """Time-space points per bus; positions are measured from the up-direction origin."""
    pos = [s.position for s in scenario.stops]
    keep = {DISPATCH, ARRIVE, COMPLETE, DEPART, TERMINAL}
    rows = [(r[1], r[0], pos[r[3]], r[3], r[2], KIND_NAMES[r[4]]) for r in log.records if r[4] in keep]
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def export_trajectories(log: EpisodeLog, scenario: ScenarioConfig, path) -> Path:
    return _write(path, TRAJECTORY_HEADER,
                  ([b, repr(float(t)), repr(float(p)), s, d, k] for b, t, p, s, d, k in
                   trajectory_rows(log, scenario)))


def export_bunching(events, path) -> Path:
    return _write(path, BUNCHING_HEADER,
                  ([repr(float(e.time)), e.stop, e.direction, e.leading_bus, e.trailing_bus, repr(float(e.gap))]
                   for e in events))


def export_bunching_by_stop(stats: BunchingStats, path) -> Path:
    return _write(path, BY_STOP_HEADER,
                  ([d, s, int(stats.by_stop[d][s])] for d in (DOWN, UP) for s in range(N_STOPS)))


def export_bunching_by_hour(stats: BunchingStats, path) -> Path:
    return _write(path, BY_HOUR_HEADER,
                  ([d, h, int(stats.by_hour[d][h])] for d in (DOWN, UP) for h in range(N_HOURS)))


def export_reward_curve(rewards, path) -> Path:
    raw = np.asarray(rewards, dtype=np.float64)
    if raw.size == 0:
        return _write(path, REWARD_CURVE_HEADER, [])
    r10, ewm = smooth(raw, "rolling10"), smooth(raw, "ewm03")
    return _write(path, REWARD_CURVE_HEADER,
                  ([i, repr(float(a)), repr(float(b)), repr(float(c))] for i, (a, b, c) in
                   enumerate(zip(raw, r10, ewm))))
