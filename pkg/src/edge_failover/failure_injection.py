"""Seeded timelines of temporary server failures."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

import numpy as np

FORMAT_VERSION = 1
DEFAULT_REPAIR_RANGE = (5, 50)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class FailureEvent:
    slot: int
    # repairs sort before failures within a slot
    kind_order: int
    server: int

    @property
    def kind(self) -> str:
        return "repair" if self.kind_order == 0 else "fail"

    @classmethod
    def fail(cls, slot: int, server: int) -> FailureEvent:
        return cls(slot, 1, server)

    @classmethod
    def repair(cls, slot: int, server: int) -> FailureEvent:
        return cls(slot, 0, server)


@dataclass(frozen=True)
class FailureSchedule:
    rho: float
    horizon: int
    events: tuple[FailureEvent, ...]
    repair_range: tuple[int, int] = DEFAULT_REPAIR_RANGE
    servers: tuple[int, ...] = ()

    def events_at(self, slot: int) -> list[FailureEvent]:
        return [e for e in self.events if e.slot == slot]

    def by_slot(self) -> dict[int, list[FailureEvent]]:
        out: dict[int, list[FailureEvent]] = {}
        for e in self.events:
            out.setdefault(e.slot, []).append(e)
        return out

    def failed_fraction(self) -> float:
        """Fraction of server-slots spent failed over the horizon."""
        if not self.servers or self.horizon == 0:
            return 0.0
        down = 0
        start: dict[int, int] = {}
        for e in self.events:
            if e.kind == "fail":
                start[e.server] = e.slot
            else:
                down += e.slot - start.pop(e.server)
        down += sum(self.horizon - s for s in start.values())
        return down / (len(self.servers) * self.horizon)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "rho": self.rho,
            "horizon": self.horizon,
            "repair_range": list(self.repair_range),
            "servers": list(self.servers),
            "events": [[e.slot, e.kind, e.server] for e in self.events],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> FailureSchedule:
        if doc.get("format_version") != FORMAT_VERSION:
            raise ScheduleError(f"unsupported schedule format_version {doc.get('format_version')!r}")
        events = []
        for slot, kind, server in doc["events"]:
            if kind not in ("fail", "repair"):
                raise ScheduleError(f"unknown event kind {kind!r}")
            events.append(FailureEvent.fail(slot, server) if kind == "fail" else FailureEvent.repair(slot, server))
        schedule = cls(
            rho=doc["rho"],
            horizon=doc["horizon"],
            events=tuple(sorted(events)),
            repair_range=tuple(doc["repair_range"]),
            servers=tuple(doc["servers"]),
        )
        check_alternation(schedule)
        return schedule

    @classmethod
    def from_json(cls, text: str) -> FailureSchedule:
        return cls.from_dict(json.loads(text))


def failure_hazard(rho: float, repair_range: tuple[int, int] = DEFAULT_REPAIR_RANGE) -> float:
    """Per-slot failure probability of an up server giving a stationary failed fraction ``rho``."""
    if not 0.0 <= rho <= 1.0:
        raise ScheduleError(f"rho must be in [0, 1], got {rho}")
    if rho == 1.0:
        return 1.0
    mean_repair = (repair_range[0] + repair_range[1]) / 2
    return min(1.0, rho / ((1.0 - rho) * mean_repair))


def sample_schedule(
    seed: int,
    servers: Iterable[int],
    rho: float,
    horizon: int,
    repair_range: tuple[int, int] = DEFAULT_REPAIR_RANGE,
) -> FailureSchedule:
    """Alternating up/down periods per server, started in the stationary regime.

    Each server starts failed with probability ``rho``. Up periods are
    geometric with the calibrated hazard; repair times are uniform integers
    over ``repair_range``. At ``rho == 1`` every server fails at slot 0 and
    is never repaired.
    """
    hazard = failure_hazard(rho, repair_range)
    if horizon < 1:
        raise ScheduleError("horizon must be at least 1 slot")
    lo, hi = repair_range
    if not 1 <= lo <= hi:
        raise ScheduleError(f"invalid repair range {repair_range}")
    servers = tuple(sorted(servers))
    rng = np.random.default_rng(seed)
    events: list[FailureEvent] = []
    for sid in servers:
        if rho == 0.0:
            continue
        if rho == 1.0:
            events.append(FailureEvent.fail(0, sid))
            continue
        t = 0
        failed = rng.random() < rho
        while t < horizon:
            if failed:
                events.append(FailureEvent.fail(t, sid))
                t += int(rng.integers(lo, hi + 1))
                if t < horizon:
                    events.append(FailureEvent.repair(t, sid))
            else:
                t += int(rng.geometric(hazard))
            failed = not failed
    return FailureSchedule(rho, horizon, tuple(sorted(events)), (lo, hi), servers)


def scripted_schedule(
    failures: Iterable[tuple[int, int, int | None]], horizon: int, servers: Iterable[int] = ()
) -> FailureSchedule:
    """Schedule from explicit (server, fail slot, repair slot or None) triples."""
    events = []
    for sid, fail_at, repair_at in failures:
        events.append(FailureEvent.fail(fail_at, sid))
        if repair_at is not None:
            if repair_at <= fail_at:
                raise ScheduleError(f"server {sid} repaired at {repair_at} before failing at {fail_at}")
            events.append(FailureEvent.repair(repair_at, sid))
    schedule = FailureSchedule(float("nan"), horizon, tuple(sorted(events)), DEFAULT_REPAIR_RANGE, tuple(servers))
    check_alternation(schedule)
    return schedule


def check_alternation(schedule: FailureSchedule) -> None:
    down: set[int] = set()
    for e in schedule.events:
        if e.kind == "fail":
            if e.server in down:
                raise ScheduleError(f"server {e.server} fails twice by slot {e.slot}")
            down.add(e.server)
        else:
            if e.server not in down:
                raise ScheduleError(f"server {e.server} repaired while up at slot {e.slot}")
            down.remove(e.server)


def failed_set(schedule: FailureSchedule, slot: int) -> set[int]:
    """Servers that are down during ``slot`` (events at ``slot`` included)."""
    down: set[int] = set()
    for e in schedule.events:
        if e.slot > slot:
            break
        if e.kind == "fail":
            down.add(e.server)
        else:
            down.discard(e.server)
    return down
