"""Corridor description: stops, hourly OD demand, segment speeds and timetables.

Scenarios live on disk as a directory of small CSV files plus a ``scenario.cfg``
holding the scalar parameters.  Everything is validated on construction and
kept immutable afterwards so one scenario can be shared by many episode runs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_STOPS = 22
N_SEGMENTS = N_STOPS - 1
N_HOURS = 13
HORIZON_SECS = N_HOURS * 3600
UP = 1
DOWN = 0
TERMINAL_UP = 0
TERMINAL_DOWN = N_STOPS - 1
KINDS = ("terminal_up", "intermediate", "terminal_down")

STOPS_FILE = "stops.csv"
OD_FILE = "od.csv"
SPEEDS_FILE = "speeds.csv"
TIMETABLE_FILE = "timetable.csv"
CONFIG_FILE = "scenario.cfg"


class ScenarioError(ValueError):
    """Base class for scenario problems."""


class ScenarioLoadError(ScenarioError):
    """A scenario file is missing or unreadable."""


class ScenarioValidationError(ScenarioError):
    """Scenario content violates an invariant."""


def hour_index(t: float) -> int:
    """Hour bucket of a simulation time (0 = 06:00), clamped to the last hour."""
    return min(max(int(math.floor(t / 3600.0)), 0), N_HOURS - 1)


def is_intermediate(stop: int) -> bool:
    return 0 < stop < N_STOPS - 1


@dataclass(frozen=True)
class StopSpec:
    stop_index: int
    kind: str
    position: float

    @property
    def name(self) -> str:
        if self.kind == "intermediate":
            return f"X{self.stop_index:02d}"
        return self.kind


@dataclass(frozen=True)
class Timetable:
    direction: int
    departures: tuple[int, ...]
    interval_secs: int

    def __post_init__(self) -> None:
        if self.direction not in (UP, DOWN):
            raise ScenarioValidationError(f"timetable direction must be 0 or 1, got {self.direction}")
        if self.interval_secs <= 0:
            raise ScenarioValidationError("dispatch interval must be positive")
        deps = self.departures
        for k, t in enumerate(deps):
            if not 0 <= t < HORIZON_SECS:
                raise ScenarioValidationError(
                    f"timetable direction {self.direction} row {k}: departure {t} outside [0, {HORIZON_SECS})"
                )
        for k in range(1, len(deps)):
            gap = deps[k] - deps[k - 1]
            if gap != self.interval_secs:
                raise ScenarioValidationError(
                    f"timetable direction {self.direction} row {k}: gap {gap} != interval {self.interval_secs}"
                )

    def __len__(self) -> int:
        return len(self.departures)


def generate_timetable(interval_secs: int, offset_secs: int, horizon_secs: int = HORIZON_SECS,
                       direction: int = UP) -> Timetable:
    """Evenly spaced departures ``offset, offset + interval, ...`` strictly below ``horizon``."""
    if interval_secs <= 0:
        raise ValueError(f"interval_secs must be positive, got {interval_secs}")
    if not 0 <= offset_secs < interval_secs:
        raise ValueError(f"offset_secs must lie in [0, {interval_secs}), got {offset_secs}")
    return Timetable(direction, tuple(range(offset_secs, horizon_secs, interval_secs)), interval_secs)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """Full corridor description.

    ``od_matrices`` has shape (13, 22, 22) in pax/hour, ``speed_means`` has
    shape (21, 13) in m/s (segment i joins stop i and stop i + 1).
    """

    stops: tuple[StopSpec, ...]
    od_matrices: np.ndarray
    speed_means: np.ndarray
    timetables: tuple[Timetable, Timetable]  # indexed by direction
    speed_sigma: float = 1.5
    dwell_board_secs: float = 2.0
    dwell_alight_secs: float = 1.0
    bus_capacity: int = 80
    max_hold_secs: float = 60.0
    target_headway_secs: float = 360.0
    rng_seed: int = 0
    max_fleet: int = 40
    segment_lengths: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "stops", tuple(self.stops))
        object.__setattr__(self, "od_matrices", _readonly(self.od_matrices))
        object.__setattr__(self, "speed_means", _readonly(self.speed_means))
        object.__setattr__(self, "timetables", tuple(self.timetables))
        self._validate()
        pos = np.array([s.position for s in self.stops])
        object.__setattr__(self, "segment_lengths", _readonly(np.diff(pos)))

    def _validate(self) -> None:
        stops = self.stops
        if len(stops) != N_STOPS:
            raise ScenarioValidationError(f"expected {N_STOPS} stops, got {len(stops)}")
        for i, s in enumerate(stops):
            expected = KINDS[0] if i == 0 else KINDS[2] if i == N_STOPS - 1 else KINDS[1]
            if s.stop_index != i:
                raise ScenarioValidationError(f"stops row {i}: index {s.stop_index} out of order")
            if s.kind != expected:
                raise ScenarioValidationError(f"stops row {i}: kind {s.kind!r}, expected {expected!r}")
            if i and s.position <= stops[i - 1].position:
                raise ScenarioValidationError(f"stops row {i}: position must be strictly increasing")
        od = self.od_matrices
        if od.shape != (N_HOURS, N_STOPS, N_STOPS):
            raise ScenarioValidationError(f"od matrices must have shape {(N_HOURS, N_STOPS, N_STOPS)}, got {od.shape}")
        if not np.all(np.isfinite(od)) or np.any(od < 0):
            h, i, j = np.argwhere(~(od >= 0))[0]
            raise ScenarioValidationError(f"od hour {h} from {i} to {j}: rate must be finite and non-negative")
        for h in range(N_HOURS):
            if np.any(np.diag(od[h]) != 0):
                i = int(np.flatnonzero(np.diag(od[h]))[0])
                raise ScenarioValidationError(f"od hour {h} from {i} to {i}: diagonal must be 0")
            for t in (TERMINAL_UP, TERMINAL_DOWN):
                if np.any(od[h, t, :] != 0):
                    raise ScenarioValidationError(f"od hour {h} from {t}: terminal row must be 0")
                if np.any(od[h, :, t] != 0):
                    raise ScenarioValidationError(f"od hour {h} to {t}: terminal column must be 0")
        sp = self.speed_means
        if sp.shape != (N_SEGMENTS, N_HOURS):
            raise ScenarioValidationError(f"speeds must have shape {(N_SEGMENTS, N_HOURS)}, got {sp.shape}")
        if not np.all(sp > 0):
            seg, h = np.argwhere(~(sp > 0))[0]
            raise ScenarioValidationError(f"speeds segment {seg} hour {h}: mean must be > 0")
        if len(self.timetables) != 2 or any(tt.direction != d for d, tt in enumerate(self.timetables)):
            raise ScenarioValidationError("timetables must be ordered (down=0, up=1)")
        if not self.speed_sigma >= 0:
            raise ScenarioValidationError("speed_sigma must be >= 0")
        if not self.max_hold_secs > 0:
            raise ScenarioValidationError("max_hold_secs must be > 0")
        if not self.target_headway_secs > 0:
            raise ScenarioValidationError("target_headway_secs must be > 0")
        if self.dwell_board_secs < 0 or self.dwell_alight_secs < 0:
            raise ScenarioValidationError("dwell times must be >= 0")
        if self.bus_capacity < 1 or self.max_fleet < 1:
            raise ScenarioValidationError("bus_capacity and max_fleet must be >= 1")

    @property
    def dispatch_interval_secs(self) -> int:
        return self.timetables[UP].interval_secs

    def segment_time(self, segment: int, hour: int) -> float:
        """Travel time over a segment at the hourly mean speed."""
        return float(self.segment_lengths[segment] / self.speed_means[segment, hour])

    def scalar_fields(self) -> dict[str, float | int]:
        return {
            "speed_sigma": self.speed_sigma,
            "dwell_board_secs": self.dwell_board_secs,
            "dwell_alight_secs": self.dwell_alight_secs,
            "bus_capacity": self.bus_capacity,
            "max_hold_secs": self.max_hold_secs,
            "target_headway_secs": self.target_headway_secs,
            "rng_seed": self.rng_seed,
            "max_fleet": self.max_fleet,
        }

    def replace(self, **changes) -> "ScenarioConfig":
        kw = dict(stops=self.stops, od_matrices=self.od_matrices, speed_means=self.speed_means,
                  timetables=self.timetables, **self.scalar_fields())
        kw.update(changes)
        return ScenarioConfig(**kw)


def default_stops(segment_length_m: float = 800.0) -> tuple[StopSpec, ...]:
    out = []
    for i in range(N_STOPS):
        kind = KINDS[0] if i == 0 else KINDS[2] if i == N_STOPS - 1 else KINDS[1]
        out.append(StopSpec(i, kind, i * segment_length_m))
    return tuple(out)


def default_timetables(interval_secs: int = 360) -> tuple[Timetable, Timetable]:
    down = generate_timetable(interval_secs, interval_secs // 2, HORIZON_SECS, direction=DOWN)
    up = generate_timetable(interval_secs, 0, HORIZON_SECS, direction=UP)
    return down, up


# --- synthetic scenario -----------------------------------------------------

PEAK_HOURS = (3, 11)
BASE_PAIR_RATE = 10.0
PEAK_DEMAND_FACTOR = 4.0
BASE_SPEED = 12.0
PEAK_SPEED = 6.0
PEAK_WIDTH_HOURS = 1.0
ACTIVE_PAIR_FRACTION = 0.2


def peak_profile(hours: np.ndarray | None = None) -> np.ndarray:
    """Two Gaussian bumps with height 1 at the peak hours."""
    h = np.arange(N_HOURS, dtype=np.float64) if hours is None else np.asarray(hours, dtype=np.float64)
    return sum(np.exp(-0.5 * ((h - p) / PEAK_WIDTH_HOURS) ** 2) for p in PEAK_HOURS)


def generate_synthetic_scenario(seed: int, active_fraction: float = ACTIVE_PAIR_FRACTION,
                                segment_length_m: float = 800.0) -> ScenarioConfig:
    """Two-peak demand and speed profile with a seeded set of active OD pairs."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(99,))))
    bump = peak_profile()
    demand_factor = 1.0 + (PEAK_DEMAND_FACTOR - 1.0) * bump
    speed = BASE_SPEED - (BASE_SPEED - PEAK_SPEED) * bump

    inner = slice(1, N_STOPS - 1)
    active = rng.random((N_STOPS - 2, N_STOPS - 2)) < active_fraction
    np.fill_diagonal(active, False)
    od = np.zeros((N_HOURS, N_STOPS, N_STOPS))
    od[:, inner, inner] = BASE_PAIR_RATE * demand_factor[:, None, None] * active[None]
    speeds = np.tile(speed, (N_SEGMENTS, 1))
    return ScenarioConfig(
        stops=default_stops(segment_length_m),
        od_matrices=od,
        speed_means=speeds,
        timetables=default_timetables(360),
        rng_seed=seed,
    )


# --- CSV round trip ---------------------------------------------------------

def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def save_scenario(cfg: ScenarioConfig, dir_path: str | Path) -> list[Path]:
    """Write the scenario as CSV + cfg files; returns the written paths."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / STOPS_FILE, d / OD_FILE, d / SPEEDS_FILE, d / TIMETABLE_FILE, d / CONFIG_FILE]
    with open(paths[0], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "kind", "position_m"])
        for s in cfg.stops:
            w.writerow([s.stop_index, s.kind, _fmt(s.position)])
    with open(paths[1], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["hour", "from", "to", "rate_per_hour"])
        for h, i, j in zip(*np.nonzero(cfg.od_matrices)):
            w.writerow([h, i, j, _fmt(cfg.od_matrices[h, i, j])])
    with open(paths[2], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["segment", "hour", "mean_mps"])
        for seg in range(N_SEGMENTS):
            for h in range(N_HOURS):
                w.writerow([seg, h, _fmt(cfg.speed_means[seg, h])])
    with open(paths[3], "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["direction", "departure_s"])
        for tt in (cfg.timetables[UP], cfg.timetables[DOWN]):
            for t in tt.departures:
                w.writerow([tt.direction, t])
    with open(paths[4], "w") as f:
        for key, value in cfg.scalar_fields().items():
            f.write(f"{key} = {_fmt(value)}\n")
        f.write(f"dispatch_interval_secs = {cfg.dispatch_interval_secs}\n")
    return paths


def _read_csv(path: Path, header: list[str]) -> list[dict[str, str]]:
    if not path.is_file():
        raise ScenarioLoadError(f"missing scenario file: {path.name}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != header:
            raise ScenarioValidationError(f"{path.name}: header must be {','.join(header)}")
        return list(reader)


def _num(row: dict[str, str], col: str, fname: str, lineno: int, cast=float):
    try:
        return cast(row[col].strip())
    except (TypeError, ValueError):
        raise ScenarioValidationError(f"{fname} row {lineno} column {col}: bad value {row[col]!r}") from None


def _read_cfg(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise ScenarioLoadError(f"missing scenario file: {path.name}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioValidationError(f"{path.name} line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


_CFG_TYPES = {
    "speed_sigma": float, "dwell_board_secs": float, "dwell_alight_secs": float,
    "bus_capacity": int, "max_hold_secs": float, "target_headway_secs": float,
    "rng_seed": int, "max_fleet": int, "dispatch_interval_secs": int,
}
_CFG_REQUIRED = ("speed_sigma", "dwell_board_secs", "dwell_alight_secs", "bus_capacity",
                 "max_hold_secs", "target_headway_secs", "rng_seed")


def load_scenario(dir_path: str | Path) -> ScenarioConfig:
    """Load and validate a scenario directory."""
    d = Path(dir_path)
    if not d.is_dir():
        raise ScenarioLoadError(f"scenario directory not found: {d}")

    raw_cfg = _read_cfg(d / CONFIG_FILE)
    scalars: dict[str, float | int] = {}
    for key, value in raw_cfg.items():
        if key not in _CFG_TYPES:
            raise ScenarioValidationError(f"{CONFIG_FILE}: unknown key {key!r}")
        try:
            scalars[key] = _CFG_TYPES[key](value)
        except ValueError:
            raise ScenarioValidationError(f"{CONFIG_FILE}: bad value for {key}: {value!r}") from None
    for key in _CFG_REQUIRED:
        if key not in scalars:
            raise ScenarioValidationError(f"{CONFIG_FILE}: missing key {key}")

    rows = _read_csv(d / STOPS_FILE, ["index", "kind", "position_m"])
    stops = []
    for n, r in enumerate(rows, 2):
        stops.append(StopSpec(_num(r, "index", STOPS_FILE, n, int), r["kind"].strip(),
                              _num(r, "position_m", STOPS_FILE, n)))
    stops.sort(key=lambda s: s.stop_index)

    od = np.zeros((N_HOURS, N_STOPS, N_STOPS))
    for n, r in enumerate(_read_csv(d / OD_FILE, ["hour", "from", "to", "rate_per_hour"]), 2):
        h, i, j = (_num(r, c, OD_FILE, n, int) for c in ("hour", "from", "to"))
        if not (0 <= h < N_HOURS and 0 <= i < N_STOPS and 0 <= j < N_STOPS):
            raise ScenarioValidationError(f"{OD_FILE} row {n}: index out of range")
        rate = _num(r, "rate_per_hour", OD_FILE, n)
        if rate < 0:
            raise ScenarioValidationError(f"{OD_FILE} row {n} column rate_per_hour: negative rate")
        if rate and (i in (TERMINAL_UP, TERMINAL_DOWN) or j in (TERMINAL_UP, TERMINAL_DOWN)):
            col = "from" if i in (TERMINAL_UP, TERMINAL_DOWN) else "to"
            raise ScenarioValidationError(f"{OD_FILE} row {n} column {col}: terminal stops carry no demand")
        if rate and i == j:
            raise ScenarioValidationError(f"{OD_FILE} row {n}: origin equals destination")
        od[h, i, j] = rate

    speeds = np.full((N_SEGMENTS, N_HOURS), np.nan)
    for n, r in enumerate(_read_csv(d / SPEEDS_FILE, ["segment", "hour", "mean_mps"]), 2):
        seg, h = _num(r, "segment", SPEEDS_FILE, n, int), _num(r, "hour", SPEEDS_FILE, n, int)
        if not (0 <= seg < N_SEGMENTS and 0 <= h < N_HOURS):
            raise ScenarioValidationError(f"{SPEEDS_FILE} row {n}: index out of range")
        v = _num(r, "mean_mps", SPEEDS_FILE, n)
        if not v > 0:
            raise ScenarioValidationError(f"{SPEEDS_FILE} row {n} column mean_mps: speed must be > 0")
        speeds[seg, h] = v
    if np.isnan(speeds).any():
        seg, h = np.argwhere(np.isnan(speeds))[0]
        raise ScenarioValidationError(f"{SPEEDS_FILE}: missing row for segment {seg} hour {h}")

    deps: dict[int, list[int]] = {UP: [], DOWN: []}
    for n, r in enumerate(_read_csv(d / TIMETABLE_FILE, ["direction", "departure_s"]), 2):
        direction = _num(r, "direction", TIMETABLE_FILE, n, int)
        if direction not in deps:
            raise ScenarioValidationError(f"{TIMETABLE_FILE} row {n} column direction: must be 0 or 1")
        deps[direction].append(_num(r, "departure_s", TIMETABLE_FILE, n, int))
    interval = int(scalars.pop("dispatch_interval_secs", 360))
    timetables = []
    for direction in (DOWN, UP):
        seq = deps[direction]
        if seq != sorted(seq):
            raise ScenarioValidationError(f"{TIMETABLE_FILE}: direction {direction} departures not sorted")
        timetables.append(Timetable(direction, tuple(seq), interval))

    return ScenarioConfig(stops=stops, od_matrices=od, speed_means=speeds,
                          timetables=tuple(timetables), **scalars)


def scenario_equal(a: ScenarioConfig, b: ScenarioConfig) -> bool:
    return (a.stops == b.stops
            and np.array_equal(a.od_matrices, b.od_matrices)
            and np.array_equal(a.speed_means, b.speed_means)
            and a.timetables == b.timetables
            and a.scalar_fields() == b.scalar_fields())
