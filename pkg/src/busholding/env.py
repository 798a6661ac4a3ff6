"""RL-facing side of the simulator.

The simulator calls into this module at every service-completion instant
(the moment a bus finishes boarding and alighting).  Here we build the
observation, ask a controller for a holding time, and assemble the
asynchronous ``(s, a, r, s', done)`` tuples once the headways they depend on
have actually been realised.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Protocol, TYPE_CHECKING

import numpy as np

from .corridor import N_HOURS, N_STOPS, hour_index

if TYPE_CHECKING:
    from .stochastic import RngStream

log = logging.getLogger(__name__)

TARGET_HEADWAY = 360.0
SPEED_NORM = 15.0
OUTLIER_DEVIATION = 180.0
OUTLIER_PENALTY = 20.0
ASYMMETRY_WEIGHT = 0.5


def reward(h_f: float, h_b: float, target: float = TARGET_HEADWAY) -> float:
    """Ridge-shaped headway reward; maximal (0) at ``h_f == h_b == target``.

    The deviation-weighted term ``w*df + (1-w)*db`` with ``w = df/(df+db)``
    equals ``(df^2 + db^2)/(df + db)``; that form is used because it is
    exactly symmetric in floating point.  At the apex both deviations are 0
    and so is the term.
    """
    df = abs(h_f - target)
    db = abs(h_b - target)
    s = df + db
    weighted = (df * df + db * db) / s if s > 0.0 else 0.0
    r = -weighted - ASYMMETRY_WEIGHT * abs(h_f - h_b)
    if df > OUTLIER_DEVIATION or db > OUTLIER_DEVIATION:
        r -= OUTLIER_PENALTY
    return r


def reward_array(h_f: np.ndarray, h_b: np.ndarray, target: float = TARGET_HEADWAY) -> np.ndarray:
    """Vectorised :func:`reward` with identical arithmetic."""
    h_f = np.asarray(h_f, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    df = np.abs(h_f - target)
    db = np.abs(h_b - target)
    s = df + db
    live = s > 0.0
    weighted = np.divide(df * df + db * db, s, out=np.zeros_like(s), where=live)
    r = -weighted - ASYMMETRY_WEIGHT * np.abs(h_f - h_b)
    return r - OUTLIER_PENALTY * ((df > OUTLIER_DEVIATION) | (db > OUTLIER_DEVIATION))


@dataclass(frozen=True)
class StateVector:
    bus_id: int
    stop_id: int
    time_period: int
    direction: int
    h_f_norm: float
    h_b_norm: float
    seg_speed_norm: float

    def __post_init__(self) -> None:
        if not 0 <= self.stop_id < N_STOPS:
            raise ValueError(f"stop_id {self.stop_id} out of range")
        if not 0 <= self.time_period < N_HOURS:
            raise ValueError(f"time_period {self.time_period} out of range")
        if self.direction not in (0, 1):
            raise ValueError(f"direction {self.direction} out of range")
        if self.bus_id < 0:
            raise ValueError(f"bus_id {self.bus_id} out of range")
        if not all(math.isfinite(x) for x in self.numeric):
            raise ValueError(f"non-finite numerical feature in {self}")

    @property
    def categorical(self) -> tuple[int, int, int, int]:
        return (self.bus_id, self.stop_id, self.time_period, self.direction)

    @property
    def numeric(self) -> tuple[float, float, float]:
        return (self.h_f_norm, self.h_b_norm, self.seg_speed_norm)


def terminal_sentinel(last: StateVector) -> StateVector:
    """Stand-in next state after a trip's final decision; its value is masked out by ``done``."""
    terminal = N_STOPS - 1 if last.direction == 1 else 0
    return replace(last, stop_id=terminal, h_f_norm=1.0, h_b_norm=1.0, seg_speed_norm=0.0)


# --- state assembly ---------------------------------------------------------

def progress(direction: int, stop: int) -> int:
    """Number of stops from the origin terminal along the direction of travel."""
    return stop if direction == 1 else N_STOPS - 1 - stop


def next_segment(direction: int, stop: int) -> int:
    return stop if direction == 1 else stop - 1


def projected_arrival(scenario, from_stop: int, depart_time: float, to_stop: int, direction: int) -> float:
    """Time a bus leaving ``from_stop`` at ``depart_time`` would reach ``to_stop`` at hourly mean
    speeds with no dwell on the way."""
    t = depart_time
    s = from_stop
    step = 1 if direction == 1 else -1
    while s != to_stop:
        t += scenario.segment_time(next_segment(direction, s), hour_index(t))
        s += step
    return t


def estimate_backward_headway(scenario, bus, stop: int, now: float, fleet) -> float:
    """Projected gap until the next same-direction bus completes ``stop``.

    Candidates are active buses that have not yet served ``stop``; each is
    projected from its last departure reference using hourly mean speeds.
    Returns the target headway when no such bus is on the road.
    """
    target_p = progress(bus.direction, stop)
    best = None
    for other in fleet:
        if other is bus or not other.active or other.direction != bus.direction:
            continue
        if progress(other.direction, other.last_stop) >= target_p:
            continue
        t = projected_arrival(scenario, other.last_stop, other.depart_time, stop, other.direction)
        if best is None or t < best:
            best = t
    if best is None:
        return scenario.target_headway_secs
    return max(best - now, 0.0)


def trip_duration_bound(scenario) -> float:
    """Driving time of one full trip when every segment runs at its slowest hourly mean."""
    slowest = np.asarray(scenario.speed_means).min(axis=1)
    return float(np.sum(np.asarray(scenario.segment_lengths) / slowest))


def assemble_state(scenario, bus, stop: int, now: float, h_f: float, fleet) -> StateVector:
    """Observation for ``bus`` at its service completion on ``stop``.

    ``h_f`` comes straight from the headway ledger; the backward headway is an
    estimate because the follower has not reached the stop yet.
    """
    h_star = scenario.target_headway_secs
    h_b = estimate_backward_headway(scenario, bus, stop, now, fleet)
    hour = hour_index(now)
    seg_speed = scenario.speed_means[next_segment(bus.direction, stop), hour]
    return StateVector(bus.bus_id, stop, hour, bus.direction,
                       h_f / h_star, h_b / h_star, float(seg_speed) / SPEED_NORM)


# --- controllers ------------------------------------------------------------

class HoldingController(Protocol):
    def observe(self, state: StateVector) -> float: ...


class NoControl:
    name = "none"

    def observe(self, state: StateVector) -> float:
        return 0.0


class RuleHolder:
    """Hold until the forward headway reaches the target, capped at ``max_hold``."""

    name = "rule"

    def __init__(self, max_hold: float = 60.0, target: float = TARGET_HEADWAY):
        self.max_hold = max_hold
        self.target = target

    def observe(self, state: StateVector) -> float:
        h_f = state.h_f_norm * self.target
        return min(self.max_hold, max(0.0, self.target - h_f))


class ConstantHold:
    def __init__(self, seconds: float):
        self.seconds = seconds

    def observe(self, state: StateVector) -> float:
        return self.seconds


# --- replay buffer ----------------------------------------------------------

@dataclass
class Batch:
    cat: np.ndarray        # (B, 4) int
    num: np.ndarray        # (B, 3)
    action: np.ndarray     # (B,)
    reward: np.ndarray     # (B,)
    next_cat: np.ndarray
    next_num: np.ndarray
    done: np.ndarray       # (B,) float 0/1
    design: np.ndarray | None = None        # cached design matrices of (cat, num) / (next_cat, next_num)
    next_design: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.reward)


class NotReady(Exception):
    """Raised when the buffer holds fewer tuples than the requested batch."""


class ReplayBuffer:
    """Ring buffer of resolved transitions; storage grows lazily up to ``capacity``.

    ``append`` and ``sample`` take a lock so a producer thread and a trainer
    thread may share one buffer.
    """

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._alloc = 0
        self._size = 0
        self._next = 0
        self._lock = threading.Lock()
        self._cat = np.zeros((0, 4), np.int64)
        self._num = np.zeros((0, 3))
        self._act = np.zeros(0)
        self._rew = np.zeros(0)
        self._ncat = np.zeros((0, 4), np.int64)
        self._nnum = np.zeros((0, 3))
        self._done = np.zeros(0)

    def __len__(self) -> int:
        return self._size

    def _grow(self) -> None:
        new = min(self.capacity, max(1024, 2 * self._alloc))
        for name in ("_cat", "_num", "_act", "_rew", "_ncat", "_nnum", "_done"):
            old = getattr(self, name)
            arr = np.zeros((new,) + old.shape[1:], old.dtype)
            arr[: len(old)] = old
            setattr(self, name, arr)
        self._alloc = new

    def append(self, state: StateVector, action: float, reward: float, next_state: StateVector,
               done: bool) -> None:
        with self._lock:
            if self._next >= self._alloc and self._alloc < self.capacity:
                self._grow()
            i = self._next
            self._cat[i] = state.categorical
            self._num[i] = state.numeric
            self._act[i] = action
            self._rew[i] = reward
            self._ncat[i] = next_state.categorical
            self._nnum[i] = next_state.numeric
            self._done[i] = float(done)
            self._next = (i + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def take(self, idx: np.ndarray) -> Batch:
        return Batch(self._cat[idx], self._num[idx], self._act[idx], self._rew[idx],
                     self._ncat[idx], self._nnum[idx], self._done[idx])

    def sample(self, batch_size: int, rng: "RngStream") -> Batch:
        with self._lock:
            if batch_size > self._size:
                raise NotReady(f"buffer holds {self._size} < {batch_size} tuples")
            idx = rng.gen.choice(self._size, size=batch_size, replace=False)
            return self.take(idx)


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng: "RngStream") -> Batch | None:
    """Uniform minibatch without replacement, or ``None`` while the buffer is too small."""
    try:
        return buffer.sample(batch_size, rng)
    except NotReady:
        return None


# --- deferred transition assembly -------------------------------------------

@dataclass
class PendingTransition:
    bus_id: int
    state: StateVector
    action: float
    decision_stop: int
    decision_time: float
    direction: int
    next_state: StateVector | None = None
    reward_stop: int | None = None
    realized_h_f: float | None = None
    realized_h_b: float | None = None
    done: bool = False

    @property
    def resolved(self) -> bool:
        return (self.next_state is not None and self.realized_h_f is not None
                and self.realized_h_b is not None)


@dataclass
class Transition:
    state: StateVector
    action: float
    reward: float
    next_state: StateVector
    done: bool
    bus_id: int
    decision_stop: int
    reward_stop: int
    h_f: float
    h_b: float


@dataclass
class TransitionAssembler:
    """Turns the asynchronous decision/completion stream into replay tuples.

    Feed it, in simulation order:

    * ``completion(direction, stop, bus_id, time, h_f)`` at every service
      completion on an intermediate stop, before the decision taken there;
    * ``decision(...)`` right after the controller picked an action;
    * ``no_follower(direction, stop)`` once no further bus will serve a stop;
    * ``finish(now)`` at the end of the episode.

    An action at stop j is rewarded with the headways realised at the bus's
    next stop; its forward headway is known on arrival there, the backward one
    only once the follower completes the same stop.
    """

    target_headway: float = TARGET_HEADWAY
    buffer: ReplayBuffer | None = None
    max_age: float = math.inf
    transitions: list[Transition] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    n_decisions: int = 0
    _open: dict[int, PendingTransition] = field(default_factory=dict)
    # (direction, stop) -> transitions waiting for the next completion there
    _awaiting_hb: dict[tuple[int, int], list[PendingTransition]] = field(default_factory=dict)
    _last_hf: dict[int, tuple[int, float]] = field(default_factory=dict)

    def completion(self, direction: int, stop: int, bus_id: int, time: float, h_f: float) -> None:
        key = (direction, stop)
        for p in self._awaiting_hb.pop(key, ()):
            p.realized_h_b = h_f
            self._emit(p)
        self._last_hf[bus_id] = (stop, h_f)

    def decision(self, bus_id: int, direction: int, stop: int, state: StateVector, action: float,
                 time: float, last_stop: bool) -> None:
        self.n_decisions += 1
        key = (direction, stop)
        prev = self._open.pop(bus_id, None)
        seen = self._last_hf.get(bus_id)
        if seen is None or seen[0] != stop:
            raise RuntimeError(f"decision for bus {bus_id} at stop {stop} without a recorded completion")
        h_f_here = seen[1]
        if prev is not None:
            prev.next_state = state
            prev.reward_stop = stop
            prev.realized_h_f = h_f_here
            self._awaiting_hb.setdefault(key, []).append(prev)
        p = PendingTransition(bus_id, state, action, stop, time, direction)
        if last_stop:
            p.next_state = terminal_sentinel(state)
            p.reward_stop = stop
            p.realized_h_f = h_f_here
            p.done = True
            self._awaiting_hb.setdefault(key, []).append(p)
        else:
            self._open[bus_id] = p

    def no_follower(self, direction: int, stop: int) -> None:
        for p in self._awaiting_hb.pop((direction, stop), ()):
            p.realized_h_b = self.target_headway
            self._emit(p)

    def retire(self, bus_id: int, now: float) -> None:
        """Bus reached its terminal: flush stale waits older than ``max_age``."""
        for key, waiting in list(self._awaiting_hb.items()):
            stale = [p for p in waiting if now - p.decision_time > self.max_age]
            for p in stale:
                msg = (f"bus {p.bus_id} transition from stop {p.decision_stop} unresolved for "
                       f"{now - p.decision_time:.0f}s; using target backward headway")
                self.warnings.append(msg)
                log.warning(msg)
                waiting.remove(p)
                p.realized_h_b = self.target_headway
                self._emit(p)
            if not waiting:
                del self._awaiting_hb[key]

    def finish(self, now: float) -> None:
        for key in sorted(self._awaiting_hb):
            for p in self._awaiting_hb[key]:
                msg = f"bus {p.bus_id} transition from stop {p.decision_stop} unresolved at episode end"
                self.warnings.append(msg)
                log.warning(msg)
                p.realized_h_b = self.target_headway
                self._emit(p)
        self._awaiting_hb.clear()
        if self._open:
            raise RuntimeError(f"trips ended without a final decision: buses {sorted(self._open)}")

    @classmethod
    def for_scenario(cls, scenario, buffer: ReplayBuffer | None = None) -> "TransitionAssembler":
        """Assembler whose stale-wait limit is one full trip at the slowest hourly speeds."""
        return cls(target_headway=scenario.target_headway_secs, buffer=buffer,
                   max_age=trip_duration_bound(scenario))

    @property
    def pending_count(self) -> int:
        return len(self._open) + sum(len(v) for v in self._awaiting_hb.values())

    def _emit(self, p: PendingTransition) -> None:
        assert p.resolved
        r = reward(p.realized_h_f, p.realized_h_b, self.target_headway)
        t = Transition(p.state, p.action, r, p.next_state, p.done, p.bus_id, p.decision_stop,
                       p.reward_stop, p.realized_h_f, p.realized_h_b)
        self.transitions.append(t)
        if self.buffer is not None:
            self.buffer.append(t.state, t.action, t.reward, t.next_state, t.done)

    @property
    def total_reward(self) -> float:
        return float(sum(t.reward for t in self.transitions))
