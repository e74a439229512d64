"""Attribution of check-ins to the communities that plausibly drove them.

A check-in's influential community is the community whose frequent movement
areas come closest to the check-in location.  Windowed attribution (lunch
hours, a sub-region, ...) and baseline distance comparisons (all friends,
size-matched virtual communities, random users) build on that primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import CheckIn
from .diversity import InfluenceProfile, influence_entropy, influence_similarity
from .geo import (
    GeoPoint,
    MovementProfile,
    bbox_contains,
    haversine_many,
    haversine_matrix,
)

DEFAULT_CDF_RESOLUTION_M = 100.0
DEFAULT_CDF_MAX_M = 20_000.0
DEFAULT_RANDOM_USERS_PER_LOCATION = 20

BASELINE_COMMUNITIES = "communities"
BASELINE_FRIENDS = "all-friends"
BASELINE_VIRTUAL = "virtual-communities"
BASELINE_RANDOM = "random-users"
ALL_BASELINES = (BASELINE_COMMUNITIES, BASELINE_FRIENDS, BASELINE_VIRTUAL, BASELINE_RANDOM)


class NoInfluencerError(Exception):
    """Raised when every candidate community has an empty movement profile."""


@dataclass(frozen=True)
class InfluenceAssignment:
    user_id: str
    checkin_index: int
    influential_index: int
    influential_distance: float
    distances: tuple[float, ...]


@dataclass(frozen=True)
class ContextWindow:
    """A temporal or spatial slice of a user's check-ins.

    Temporal windows select by local weekday set (None = any) and half-open
    local hour range [hour_start, hour_end); ranges may wrap past midnight.
    Spatial windows select by a sub-bounding-box.
    """

    name: str
    kind: str = "temporal"  # "temporal" | "spatial"
    weekdays: frozenset[int] | None = None
    hour_start: int = 0
    hour_end: int = 24
    bbox: tuple[float, float, float, float] | None = None

    def contains(self, c: CheckIn) -> bool:
        if self.kind == "spatial":
            if self.bbox is None:
                raise ValueError("spatial window needs a bbox")
            return bbox_contains(self.bbox, c.lat, c.lon)
        if self.weekdays is not None and c.weekday not in self.weekdays:
            return False
        if self.hour_start <= self.hour_end:
            return self.hour_start <= c.hour < self.hour_end
        return c.hour >= self.hour_start or c.hour < self.hour_end


def location_community_distance(loc: GeoPoint, profile: MovementProfile) -> float:
    """Distance in meters from a location to the nearest movement area of a
    profile; +inf for an empty profile."""
    if profile.is_empty():
        return math.inf
    lats, lons = profile.centroid_arrays()
    return float(np.min(haversine_many(loc[0], loc[1], lats, lons)))


def min_distances(
    lats: np.ndarray, lons: np.ndarray, profile: MovementProfile
) -> np.ndarray:
    """Bulk location_community_distance for many locations at once."""
    n = len(lats)
    if profile.is_empty():
        return np.full(n, np.inf)
    clats, clons = profile.centroid_arrays()
    return np.min(haversine_matrix(lats, lons, clats, clons), axis=1)


def influential_community(
    user_id: str,
    loc: GeoPoint,
    profiles: Sequence[MovementProfile],
    checkin_index: int = -1,
) -> InfluenceAssignment:
    """Assign one location to the community with the nearest movement area.

    Communities with empty profiles are skipped; distance ties resolve to the
    lowest community index.  Raises NoInfluencerError if every profile is
    empty.
    """
    dists = tuple(location_community_distance(loc, p) for p in profiles)
    best = None
    for idx, d in enumerate(dists):
        if math.isfinite(d) and (best is None or d < dists[best]):
            best = idx
    if best is None:
        raise NoInfluencerError(f"user {user_id}: no community has a usable profile")
    return InfluenceAssignment(user_id, checkin_index, best, dists[best], dists)


def assign_influential(
    user_id: str,
    checkins: Sequence[CheckIn],
    profiles: Sequence[MovementProfile],
) -> list[InfluenceAssignment]:
    """influential_community for every check-in of a user, vectorized.

    The winning distance is recomputed through the scalar kernel so it agrees
    exactly with location_community_distance on the chosen community.
    """
    if not checkins:
        return []
    if not any(not p.is_empty() for p in profiles):
        raise NoInfluencerError(f"user {user_id}: no community has a usable profile")
    lats = np.array([c.lat for c in checkins])
    lons = np.array([c.lon for c in checkins])
    mat = np.stack([min_distances(lats, lons, p) for p in profiles], axis=1)
    out = []
    for k in range(len(checkins)):
        row = mat[k]
        best = int(np.argmin(row))  # argmin takes the lowest index on ties
        exact = location_community_distance(GeoPoint(lats[k], lons[k]), profiles[best])
        out.append(
            InfluenceAssignment(user_id, k, best, exact, tuple(float(x) for x in row))
        )
    return out


def influence_profile(
    user_id: str,
    checkins: Sequence[CheckIn],
    assignments: Sequence[InfluenceAssignment],
    n_communities: int,
    window: ContextWindow | None = None,
) -> InfluenceProfile:
    """Count influential-community attributions, optionally within a window.

    A profile with all-zero counts (no check-in fell inside the window) is
    returned as-is; entropy/similarity callers must treat it as excluded.
    """
    counts = [0] * n_communities
    for asg in assignments:
        if window is not None and not window.contains(checkins[asg.checkin_index]):
            continue
        counts[asg.influential_index] += 1
    return InfluenceProfile(user_id, counts)


@dataclass
class UserGeoData:
    """Per-user bundle used by the distance comparisons."""

    user_id: str
    checkins: Sequence[CheckIn]
    community_profiles: Sequence[MovementProfile]
    friend_profile: MovementProfile
    virtual_profiles: Sequence[MovementProfile]
    assignments: Sequence[InfluenceAssignment] = field(default_factory=list)


def _cdf_from_distances(
    dists: np.ndarray, resolution_m: float, max_m: float
) -> list[tuple[float, float]]:
    n = len(dists)
    edges = np.arange(resolution_m, max_m + resolution_m / 2, resolution_m)
    if n == 0:
        return [(float(e), 0.0) for e in edges]
    finite = np.sort(dists[np.isfinite(dists)])
    return [(float(e), float(np.searchsorted(finite, e, side="right")) / n) for e in edges]


@dataclass
class DistanceComparison:
    """Gridded CDFs plus order-statistic percentiles per baseline."""

    cdf: dict[str, list[tuple[float, float]]]
    percentiles: dict[str, dict[int, float]]
    n_locations: int


def distance_cdf_compare(
    users: Sequence[UserGeoData],
    own_profiles: Mapping[str, MovementProfile],
    seed: int = 0,
    resolution_m: float = DEFAULT_CDF_RESOLUTION_M,
    max_m: float = DEFAULT_CDF_MAX_M,
    random_users_per_location: int = DEFAULT_RANDOM_USERS_PER_LOCATION,
    percentile_qs: Sequence[int] = (25, 50, 75),
) -> DistanceComparison:
    """Empirical CDFs of per-check-in distances for the four baselines.

    For each (user, check-in) pair the distance is measured against:

    * communities: the user's influential (nearest) community;
    * all-friends: the pooled profile of every friend's check-ins;
    * virtual-communities: the size-matched random counterpart of the
      influential community (one counterpart per real community, fixed per
      run);
    * random-users: the nearest of ``random_users_per_location`` users sampled
      per location from ``own_profiles`` (the user excluded).

    Each CDF is reported at ``resolution_m`` steps up to ``max_m``; the
    percentiles come from the raw ungridded distances (lower order statistic,
    so +inf entries at the tail stay harmless).
    """
    rng = np.random.default_rng(seed)
    per_baseline: dict[str, list[float]] = {b: [] for b in ALL_BASELINES}
    all_ids = sorted(own_profiles)
    prof_arrays = {uid: own_profiles[uid].centroid_arrays() for uid in all_ids}
    for ud in users:
        if not ud.checkins:
            continue
        lats = np.array([c.lat for c in ud.checkins])
        lons = np.array([c.lon for c in ud.checkins])
        assignments = ud.assignments or assign_influential(
            ud.user_id, ud.checkins, ud.community_profiles
        )
        comm = np.array([a.influential_distance for a in assignments])
        per_baseline[BASELINE_COMMUNITIES].extend(comm.tolist())
        per_baseline[BASELINE_FRIENDS].extend(
            min_distances(lats, lons, ud.friend_profile).tolist()
        )
        # only the counterpart of each location's influential community is read
        needed = sorted({a.influential_index for a in assignments})
        virt_cols = {
            idx: min_distances(lats, lons, ud.virtual_profiles[idx]) for idx in needed
        }
        virt = [
            float(virt_cols[assignments[k].influential_index][k])
            for k in range(len(ud.checkins))
        ]
        per_baseline[BASELINE_VIRTUAL].extend(virt)
        candidates = [uid for uid in all_ids if uid != ud.user_id]
        k_users = min(random_users_per_location, len(candidates))
        for k in range(len(ud.checkins)):
            picked = rng.choice(len(candidates), size=k_users, replace=False)
            clats = np.concatenate([prof_arrays[candidates[int(ci)]][0] for ci in picked])
            clons = np.concatenate([prof_arrays[candidates[int(ci)]][1] for ci in picked])
            if clats.size == 0:
                per_baseline[BASELINE_RANDOM].append(math.inf)
                continue
            d = haversine_many(float(lats[k]), float(lons[k]), clats, clons)
            per_baseline[BASELINE_RANDOM].append(float(np.min(d)))
    cdf = {}
    pct: dict[str, dict[int, float]] = {}
    n_loc = 0
    for b, v in per_baseline.items():
        arr = np.array(v, dtype=float)
        n_loc = len(arr)
        cdf[b] = _cdf_from_distances(arr, resolution_m, max_m)
        if len(arr):
            pct[b] = {q: float(np.quantile(arr, q / 100.0, method="lower")) for q in percentile_qs}
        else:
            pct[b] = {q: math.inf for q in percentile_qs}
    return DistanceComparison(cdf, pct, n_loc)


@dataclass
class ContextReportRow:
    user_id: str
    similarity: float | None
    entropy_a: float | None
    entropy_b: float | None


@dataclass
class ContextReport:
    window_a: str
    window_b: str
    rows: list[ContextReportRow]
    mean_similarity: float | None
    mean_entropy_a: float | None
    mean_entropy_b: float | None
    mean_entropy_all: float | None
    n_users: int
    n_excluded: int


def context_report(
    users: Sequence[UserGeoData],
    window_a: ContextWindow,
    window_b: ContextWindow,
) -> ContextReport:
    """Compare influence profiles between two context windows.

    Per user: cosine similarity of the window-a and window-b influence count
    vectors, plus the windowed influence entropies.  Users with a zero vector
    in either window are excluded from the similarity mean; each entropy mean
    uses the users with a non-zero profile in that window.
    """
    rows: list[ContextReportRow] = []
    sims: list[float] = []
    ents_a: list[float] = []
    ents_b: list[float] = []
    ents_all: list[float] = []
    excluded = 0
    for ud in users:
        assignments = ud.assignments or assign_influential(
            ud.user_id, ud.checkins, ud.community_profiles
        )
        n_comm = len(ud.community_profiles)
        prof_a = influence_profile(ud.user_id, ud.checkins, assignments, n_comm, window_a)
        prof_b = influence_profile(ud.user_id, ud.checkins, assignments, n_comm, window_b)
        prof_all = influence_profile(ud.user_id, ud.checkins, assignments, n_comm)
        if not prof_all.is_zero():
            ents_all.append(influence_entropy(prof_all))
        ent_a = None if prof_a.is_zero() else influence_entropy(prof_a)
        ent_b = None if prof_b.is_zero() else influence_entropy(prof_b)
        if ent_a is not None:
            ents_a.append(ent_a)
        if ent_b is not None:
            ents_b.append(ent_b)
        if prof_a.is_zero() or prof_b.is_zero():
            excluded += 1
            rows.append(ContextReportRow(ud.user_id, None, ent_a, ent_b))
            continue
        sim = influence_similarity(prof_a.counts, prof_b.counts)
        sims.append(sim)
        rows.append(ContextReportRow(ud.user_id, sim, ent_a, ent_b))

    def _mean(vals: list[float]) -> float | None:
        return float(np.mean(vals)) if vals else None

    return ContextReport(
        window_a.name,
        window_b.name,
        rows,
        _mean(sims),
        _mean(ents_a),
        _mean(ents_b),
        _mean(ents_all),
        len(rows),
        excluded,
    )
