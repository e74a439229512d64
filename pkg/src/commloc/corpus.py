"""Check-in corpus ingestion: TSV parsing, city scoping, social graph, activity filters."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence
from zoneinfo import ZoneInfo

from .geo import bbox_contains

DEFAULT_MIN_CHECKINS = 100
DEFAULT_MAX_CHECKINS = 2000

# a parse run aborts when more than this fraction of non-empty lines is bad
MALFORMED_ABORT_FRACTION = 0.5


class CorpusError(Exception):
    pass


class CorpusFormatError(CorpusError):
    """Raised when a check-in stream is mostly garbage rather than noisy."""


class UnknownUserError(CorpusError):
    pass


@dataclass(frozen=True)
class CityScope:
    """A named city bounding box with the timezone used for local clock fields."""

    name: str
    bbox: tuple[float, float, float, float]  # lat_min, lat_max, lon_min, lon_max
    timezone: str = "UTC"

    def contains(self, lat: float, lon: float) -> bool:
        return bbox_contains(self.bbox, lat, lon)

    def tzinfo(self) -> ZoneInfo:
        return ZoneInfo(self.timezone)


@dataclass
class CheckIn:
    """One check-in record.  hour/weekday are in the city's local clock
    (weekday 0 = Monday), precomputed at parse time."""

    user_id: str
    time: datetime
    lat: float
    lon: float
    hour: int
    weekday: int

    def epoch(self) -> float:
        return self.time.timestamp()


class SocialGraph:
    """Undirected friendship graph over user ids."""

    def __init__(self) -> None:
        self._adj: dict[str, set[str]] = {}

    @classmethod
    def from_edges(cls, pairs: Iterable[tuple[str, str]]) -> "SocialGraph":
        g = cls()
        for a, b in pairs:
            g.add_edge(a, b)
        return g

    def add_node(self, a: str) -> None:
        self._adj.setdefault(a, set())

    def add_edge(self, a: str, b: str) -> None:
        if a == b:
            return
        self._adj.setdefault(a, set()).add(b)
        self._adj.setdefault(b, set()).add(a)

    @property
    def nodes(self) -> set[str]:
        return set(self._adj)

    def has_node(self, a: str) -> bool:
        return a in self._adj

    def friends(self, a: str) -> list[str]:
        if a not in self._adj:
            raise UnknownUserError(a)
        return sorted(self._adj[a])

    def neighbors(self, a: str) -> set[str]:
        return self._adj.get(a, set())

    def degree(self, a: str) -> int:
        return len(self._adj.get(a, ()))

    def edges(self) -> list[tuple[str, str]]:
        out = []
        for a, nbrs in self._adj.items():
            for b in nbrs:
                if a < b:
                    out.append((a, b))
        return sorted(out)

    def num_edges(self) -> int:
        return sum(len(v) for v in self._adj.values()) // 2


@dataclass
class TimeHistograms:
    """Corpus-wide check-in counts by local hour (24 bins) and weekday (7 bins)."""

    by_hour: list[int] = field(default_factory=lambda: [0] * 24)
    by_day: list[int] = field(default_factory=lambda: [0] * 7)

    def as_dict(self) -> dict:
        return {"by_hour": list(self.by_hour), "by_day": list(self.by_day)}


def _parse_time_utc(raw: str) -> datetime:
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    t = datetime.fromisoformat(text)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def parse_checkins(
    lines: Iterable[str], scope: CityScope
) -> tuple[list[CheckIn], int]:
    """Parse a TSV check-in stream (user_id, ISO-8601 time, lat, lon).

    Malformed lines are skipped and counted; rows outside the scope bbox are
    valid but dropped silently.  Returns check-ins sorted by (user, time) plus
    the malformed-line count.  Raises CorpusFormatError when malformed lines
    exceed half of the non-empty input.
    """
    tz = scope.tzinfo()
    out: list[CheckIn] = []
    malformed = 0
    total = 0
    for line in lines:
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            continue
        total += 1
        parts = line.split("\t")
        if len(parts) != 4:
            malformed += 1
            continue
        uid, raw_time, raw_lat, raw_lon = (p.strip() for p in parts)
        if not uid:
            malformed += 1
            continue
        try:
            t = _parse_time_utc(raw_time)
            lat = float(raw_lat)
            lon = float(raw_lon)
        except ValueError:
            malformed += 1
            continue
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            malformed += 1
            continue
        if not scope.contains(lat, lon):
            continue
        local = t.astimezone(tz)
        out.append(CheckIn(uid, t, lat, lon, local.hour, local.weekday()))
    if total and malformed > MALFORMED_ABORT_FRACTION * total:
        raise CorpusFormatError(
            f"{malformed} of {total} lines malformed; refusing to treat this as a check-in file"
        )
    out.sort(key=lambda c: (c.user_id, c.time))
    return out, malformed


def parse_edges(lines: Iterable[str], mode: str = "undirected") -> SocialGraph:
    """Build the friendship graph from an edge list (two ids per line).

    mode="directed" treats lines as follow relations and keeps only mutual
    pairs; mode="undirected" keeps every pair.  Self-loops are dropped either
    way.
    """
    if mode not in ("directed", "undirected"):
        raise ValueError(f"unknown edge mode: {mode!r}")
    g = SocialGraph()
    if mode == "undirected":
        for line in lines:
            parts = line.split()
            if len(parts) != 2:
                continue
            g.add_edge(parts[0], parts[1])
        return g
    follows: set[tuple[str, str]] = set()
    for line in lines:
        parts = line.split()
        if len(parts) != 2:
            continue
        a, b = parts
        if a == b:
            continue
        follows.add((a, b))
        if (b, a) in follows:
            g.add_edge(a, b)
    return g


def select_active_users(
    by_user: Mapping[str, Sequence[CheckIn]],
    min_checkins: int = DEFAULT_MIN_CHECKINS,
    max_checkins: int | None = DEFAULT_MAX_CHECKINS,
) -> set[str]:
    """Users whose in-scope check-in count lies in [min, max] (max=None: unbounded)."""
    out = set()
    for uid, cks in by_user.items():
        n = len(cks)
        if n >= min_checkins and (max_checkins is None or n <= max_checkins):
            out.add(uid)
    return out


def time_histograms(checkins: Iterable[CheckIn]) -> TimeHistograms:
    h = TimeHistograms()
    for c in checkins:
        h.by_hour[c.hour] += 1
        h.by_day[c.weekday] += 1
    return h


class Corpus:
    """A parsed city corpus: per-user check-ins, social graph, time histograms."""

    def __init__(
        self,
        scope: CityScope,
        checkins: Sequence[CheckIn],
        graph: SocialGraph,
        malformed: int = 0,
    ) -> None:
        self.scope = scope
        self.graph = graph
        self.malformed = malformed
        by_user: dict[str, list[CheckIn]] = defaultdict(list)
        for c in checkins:
            by_user[c.user_id].append(c)
        # parse_checkins already sorts, but accept arbitrary input order
        for cks in by_user.values():
            cks.sort(key=lambda c: c.time)
        self.by_user: dict[str, list[CheckIn]] = dict(by_user)
        self.histograms = time_histograms(checkins)

    @classmethod
    def load(
        cls,
        checkins_path: str,
        edges_path: str,
        scope: CityScope,
        edges_mode: str = "undirected",
    ) -> "Corpus":
        with open(checkins_path, "r", encoding="utf-8") as fh:
            checkins, malformed = parse_checkins(fh, scope)
        with open(edges_path, "r", encoding="utf-8") as fh:
            graph = parse_edges(fh, edges_mode)
        return cls(scope, checkins, graph, malformed)

    @property
    def n_checkins(self) -> int:
        return sum(len(v) for v in self.by_user.values())

    def users(self) -> list[str]:
        return sorted(self.by_user)

    def checkins_of(self, user_id: str) -> list[CheckIn]:
        try:
            return self.by_user[user_id]
        except KeyError:
            raise UnknownUserError(user_id) from None

    def checkin_count(self, user_id: str) -> int:
        return len(self.by_user.get(user_id, ()))

    def active_users(
        self,
        min_checkins: int = DEFAULT_MIN_CHECKINS,
        max_checkins: int | None = DEFAULT_MAX_CHECKINS,
    ) -> list[str]:
        return sorted(select_active_users(self.by_user, min_checkins, max_checkins))
