"""Discrete-event simulation of one operating day on the corridor.

Event flow for a trip::

    dispatch -> arrive(stop) -> complete(stop) -> depart(stop) -> ... -> terminal

``complete`` is the instant boarding and alighting finish.  It is where the
headway ledger is updated and where the controller picks a holding time; the
bus departs ``hold`` seconds later.  Terminals only start and end trips.

Events are ordered by ``(time, seq)`` where ``seq`` is assigned when an event
is scheduled, so a run is fully determined by the scenario, the controller and
the seed.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import heapq
import io
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .corridor import (DOWN, N_STOPS, TERMINAL_DOWN, TERMINAL_UP, UP, ScenarioConfig, ScenarioError,
                       hour_index)
from .env import TransitionAssembler, assemble_state, next_segment, progress
from .stochastic import DEMAND, TRAFFIC, RngStream, sample_arrivals, sample_segment_speed

log = logging.getLogger(__name__)

DISPATCH, ARRIVE, COMPLETE, DEPART, TERMINAL, WARNING = range(6)
KIND_NAMES = ("dispatch", "arrive", "complete", "depart", "terminal", "warning")

IDLE, DRIVING, DWELLING, HOLDING = "idle_at_terminal", "driving", "dwelling", "holding"
LOG_HEADER = ["time_s", "bus_id", "direction", "stop", "kind", "h_f", "h_b", "hold_s", "board", "alight"]


class FleetExhausted(ScenarioError):
    pass


def compute_dwell(board_count: int, alight_count: int, board_secs: float = 2.0,
                  alight_secs: float = 1.0) -> float:
    """Dwell is governed by whichever door stream takes longer."""
    if board_count < 0 or alight_count < 0:
        raise ValueError("passenger counts must be non-negative")
    return max(board_secs * board_count, alight_secs * alight_count)


def origin_terminal(direction: int) -> int:
    return TERMINAL_UP if direction == UP else TERMINAL_DOWN


def final_terminal(direction: int) -> int:
    return TERMINAL_DOWN if direction == UP else TERMINAL_UP


def last_intermediate(direction: int) -> int:
    return N_STOPS - 2 if direction == UP else 1


@dataclass(eq=False)
class Bus:
    bus_id: int
    direction: int
    status: str = IDLE
    stop: int = 0                 # current stop, or the stop just left while driving
    last_stop: int = 0            # last stop served (or the origin terminal)
    depart_time: float = 0.0      # departure from ``last_stop`` (committed at the decision)
    onboard: np.ndarray = field(default_factory=lambda: np.zeros(N_STOPS, np.int64))
    trip_count: int = 0
    idle_since: float = 0.0

    @property
    def active(self) -> bool:
        return self.status != IDLE

    @property
    def load(self) -> int:
        return int(self.onboard.sum())


class HeadwayLedger:
    """Service-completion times per (direction, stop), in completion order."""

    def __init__(self):
        self._entries: dict[tuple[int, int], list[tuple[int, float, int]]] = {}

    def record(self, direction: int, stop: int, bus_id: int, time: float, record_idx: int = -1) -> None:
        seq = self._entries.setdefault((direction, stop), [])
        if seq and not time > seq[-1][1]:
            # simultaneous completions are separated by a negligible epsilon
            time = math.nextafter(seq[-1][1], math.inf)
        seq.append((bus_id, time, record_idx))

    def entries(self, direction: int, stop: int) -> list[tuple[int, float, int]]:
        return self._entries.get((direction, stop), [])

    def keys(self):
        return self._entries.keys()


def forward_headway(ledger: HeadwayLedger, direction: int, stop: int, bus_id: int, y_time: float,
                    target: float = 360.0) -> float:
    """Gap to the previous completion at the same stop, or ``target`` for the first bus."""
    seq = ledger.entries(direction, stop)
    # the bus's own completion is the latest entry
    if len(seq) < 2:
        return target
    assert seq[-1][0] == bus_id
    return y_time - seq[-2][1]


@dataclass
class EpisodeLog:
    records: list[list] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    transitions: list = field(default_factory=list)
    passengers_generated: int = 0
    passengers_delivered: int = 0
    passengers_waiting: int = 0
    passengers_onboard: int = 0
    trips: int = 0
    departures: dict[int, list[float]] = field(default_factory=lambda: {UP: [], DOWN: []})
    fleet_size: int = 0
    end_time: float = 0.0
    buses_idle_at_end: bool = False
    n_decisions: int = 0

    @property
    def cum_reward(self) -> float:
        return float(sum(t.reward for t in self.transitions))

    def completions(self):
        """(time, bus_id, direction, stop, record) for every service completion."""
        for r in self.records:
            if r[4] == COMPLETE:
                yield r

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for t, bus, d, stop, kind, hf, hb, hold, board, alight in self.records:
            w.writerow([repr(float(t)), bus, d, stop, KIND_NAMES[kind], _opt(hf), _opt(hb), _opt(hold),
                        board, alight])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def trace_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


def _opt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


class Simulation:
    def __init__(self, scenario: ScenarioConfig, controller, rng_seed: int,
                 assembler: TransitionAssembler | None = None):
        self.sc = scenario
        self.controller = controller
        self.seed = rng_seed
        self.traffic = RngStream(rng_seed, TRAFFIC)
        self.assembler = assembler if assembler is not None else TransitionAssembler.for_scenario(scenario)
        self.ledger = HeadwayLedger()
        self.fleet: list[Bus] = []
        self.idle: dict[int, deque[Bus]] = {TERMINAL_UP: deque(), TERMINAL_DOWN: deque()}
        self.log = EpisodeLog()
        self._events: list[tuple[float, int, int, int, int]] = []
        self._seq = 0
        self._remaining_dispatch = {d: len(scenario.timetables[d]) for d in (UP, DOWN)}
        self._build_demand()

    # --- demand -------------------------------------------------------------
    def _build_demand(self) -> None:
        rng = RngStream(self.seed, DEMAND)
        od = self.sc.od_matrices
        queues: dict[tuple[int, int], list[tuple[float, int]]] = {}
        n = 0
        for h in range(od.shape[0]):
            for i, j in zip(*np.nonzero(od[h])):
                times = sample_arrivals(float(od[h, i, j]), h * 3600.0, (h + 1) * 3600.0, rng)
                if times:
                    q = queues.setdefault((int(i), UP if j > i else DOWN), [])
                    q.extend((t, int(j)) for t in times)
                    n += len(times)
        self._queue_times: dict[tuple[int, int], list[float]] = {}
        self._queue_dest: dict[tuple[int, int], list[int]] = {}
        self._queue_head: dict[tuple[int, int], int] = {}
        for key, q in queues.items():
            q.sort()
            self._queue_times[key] = [t for t, _ in q]
            self._queue_dest[key] = [d for _, d in q]
            self._queue_head[key] = 0
        self.log.passengers_generated = n

    # --- event queue --------------------------------------------------------
    def schedule(self, time: float, kind: int, bus_id: int = -1, stop: int = -1, arg: int = 0) -> None:
        heapq.heappush(self._events, (time, self._seq, kind, bus_id, stop, arg))
        self._seq += 1

    def _record(self, time, bus, stop, kind, h_f=None, h_b=None, hold=None, board=0, alight=0) -> int:
        self.log.records.append([time, bus.bus_id, bus.direction, stop, kind, h_f, h_b, hold, board, alight])
        return len(self.log.records) - 1

    # --- operations ---------------------------------------------------------
    def dispatch(self, time: float, direction: int) -> Bus:
        """Reuse the longest-idle bus at the origin terminal, else bring in a new one."""
        pool = self.idle[origin_terminal(direction)]
        if pool:
            bus = pool.popleft()
        else:
            if len(self.fleet) >= self.sc.max_fleet:
                raise FleetExhausted(f"dispatch at t={time} needs more than max_fleet={self.sc.max_fleet} buses")
            bus = Bus(len(self.fleet), direction)
            self.fleet.append(bus)
        bus.direction = direction
        bus.status = DRIVING
        bus.stop = bus.last_stop = origin_terminal(direction)
        bus.depart_time = time
        bus.trip_count += 1
        self._remaining_dispatch[direction] -= 1
        self.log.departures[direction].append(time)
        self._record(time, bus, bus.stop, DISPATCH)
        self._drive(bus, time)
        return bus

    def _drive(self, bus: Bus, time: float) -> None:
        seg = next_segment(bus.direction, bus.stop)
        mean = self.sc.speed_means[seg, hour_index(time)]
        speed = sample_segment_speed(float(mean), self.sc.speed_sigma, self.traffic)
        nxt = bus.stop + (1 if bus.direction == UP else -1)
        kind = TERMINAL if nxt == final_terminal(bus.direction) else ARRIVE
        self.schedule(time + self.sc.segment_lengths[seg] / speed, kind, bus.bus_id, nxt)

    def _arrive(self, bus: Bus, stop: int, time: float) -> None:
        bus.status = DWELLING
        bus.stop = stop
        alight = int(bus.onboard[stop])
        bus.onboard[stop] = 0
        self.log.passengers_delivered += alight
        key = (stop, bus.direction)
        board = 0
        if key in self._queue_times:
            head = self._queue_head[key]
            avail = bisect.bisect_right(self._queue_times[key], time) - head
            board = max(0, min(avail, self.sc.bus_capacity - bus.load))
            for dest in self._queue_dest[key][head:head + board]:
                bus.onboard[dest] += 1
            self._queue_head[key] = head + board
        dwell = compute_dwell(board, alight, self.sc.dwell_board_secs, self.sc.dwell_alight_secs)
        self._record(time, bus, stop, ARRIVE, board=board, alight=alight)
        self.schedule(time + dwell, COMPLETE, bus.bus_id, stop)

    def _complete(self, bus: Bus, stop: int, time: float) -> None:
        sc = self.sc
        d = bus.direction
        idx = self._record(time, bus, stop, COMPLETE)
        self.ledger.record(d, stop, bus.bus_id, time, idx)
        entries = self.ledger.entries(d, stop)
        y = entries[-1][1]
        h_f = forward_headway(self.ledger, d, stop, bus.bus_id, y, sc.target_headway_secs)
        if len(entries) >= 2:
            self.log.records[entries[-2][2]][6] = h_f   # leader's backward headway
        self.log.records[idx][5] = h_f
        bus.last_stop = stop
        self.assembler.completion(d, stop, bus.bus_id, y, h_f)

        state = assemble_state(sc, bus, stop, time, h_f, self.fleet)
        raw = self.controller.observe(state)
        hold = float(raw)
        if not math.isfinite(hold) or hold < 0.0 or hold > sc.max_hold_secs:
            hold = 0.0 if not math.isfinite(hold) else min(max(hold, 0.0), sc.max_hold_secs)
            msg = f"t={time:.1f} bus {bus.bus_id} stop {stop}: action {raw!r} clamped to {hold}"
            self.log.warnings.append(msg)
            self._record(time, bus, stop, WARNING, hold=hold)
        bus.status = HOLDING
        bus.depart_time = time + hold
        self.log.records[idx][7] = hold
        self.assembler.decision(bus.bus_id, d, stop, state, hold, time, stop == last_intermediate(d))
        if not self._more_to_serve(d, stop):
            self.assembler.no_follower(d, stop)
        self.schedule(time + hold, DEPART, bus.bus_id, stop)

    def _more_to_serve(self, direction: int, stop: int) -> bool:
        """Will any bus still complete ``stop`` in ``direction``?"""
        if self._remaining_dispatch[direction] > 0:
            return True
        p = progress(direction, stop)
        return any(b.active and b.direction == direction and progress(direction, b.last_stop) < p
                   for b in self.fleet)

    def _depart(self, bus: Bus, stop: int, time: float) -> None:
        bus.status = DRIVING
        self._record(time, bus, stop, DEPART)
        self._drive(bus, time)

    def _terminal(self, bus: Bus, stop: int, time: float) -> None:
        bus.status = IDLE
        bus.stop = bus.last_stop = stop
        bus.idle_since = time
        alight = int(bus.onboard.sum())
        if alight:
            # cannot happen with valid OD data; kept for conservation accounting
            bus.onboard[:] = 0
            self.log.passengers_delivered += alight
        self.log.trips += 1
        self._record(time, bus, stop, TERMINAL)
        self.idle[stop].append(bus)
        self.assembler.retire(bus.bus_id, time)

    def run(self) -> EpisodeLog:
        for d in (UP, DOWN):
            for t in self.sc.timetables[d].departures:
                self.schedule(float(t), DISPATCH, -1, origin_terminal(d), d)
        handlers = {ARRIVE: self._arrive, COMPLETE: self._complete, DEPART: self._depart,
                    TERMINAL: self._terminal}
        time = 0.0
        while self._events:
            time, _, kind, bus_id, stop, arg = heapq.heappop(self._events)
            if kind == DISPATCH:
                self.dispatch(time, arg)
            else:
                handlers[kind](self.fleet[bus_id], stop, time)
        self.assembler.finish(time)
        lg = self.log
        lg.end_time = time
        lg.fleet_size = len(self.fleet)
        lg.buses_idle_at_end = all(b.status == IDLE for b in self.fleet)
        lg.passengers_onboard = int(sum(b.load for b in self.fleet))
        lg.passengers_waiting = int(sum(len(self._queue_times[k]) - self._queue_head[k]
                                        for k in self._queue_times))
        lg.transitions = self.assembler.transitions
        lg.warnings.extend(self.assembler.warnings)
        lg.n_decisions = self.assembler.n_decisions
        return lg


def run_episode(scenario: ScenarioConfig, controller, rng_seed: int,
                assembler: TransitionAssembler | None = None) -> EpisodeLog:
    """Simulate one full day and return its event log."""
    return Simulation(scenario, controller, rng_seed, assembler).run()
