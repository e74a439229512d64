"""Geographic primitives: great-circle distance, grid cells, movement-area clustering.

All distances are meters on a spherical Earth.  Clustering is plain
centroid-linkage agglomeration with a hard distance cutoff, which is what the
rest of the toolkit means by "frequent movement areas": every cluster centroid
is one area, weighted by how many raw check-in points fell into it.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0

DEFAULT_CLUSTER_CUTOFF_M = 500.0
DEFAULT_CELL_DEG = 0.001

# owner kinds a MovementProfile can describe
KIND_COMMUNITY = "community"
KIND_USER = "user"
KIND_FRIEND_SET = "friend-set"
KIND_VIRTUAL = "virtual-community"
KIND_RANDOM_SET = "random-user-set"
OWNER_KINDS = (KIND_COMMUNITY, KIND_USER, KIND_FRIEND_SET, KIND_VIRTUAL, KIND_RANDOM_SET)


class GeoPoint(NamedTuple):
    lat: float
    lon: float


class GridCell(NamedTuple):
    i: int
    j: int


def haversine_many(lat: float, lon: float, lats, lons) -> np.ndarray:
    """Great-circle distances in meters from one point to arrays of points.

    This is the single distance kernel used everywhere in the package so that
    scalar and vectorized call sites agree bit-for-bit.
    """
    phi1 = math.radians(lat)
    phi2 = np.radians(np.asarray(lats, dtype=float))
    dphi = phi2 - phi1
    dlmb = np.radians(np.asarray(lons, dtype=float)) - math.radians(lon)
    a = np.sin(dphi / 2.0) ** 2 + math.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2.0) ** 2
    # clamp: rounding can push a fractionally above 1 for antipodal points
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters between two (lat, lon) points."""
    return float(haversine_many(a[0], a[1], np.array([b[0]]), np.array([b[1]]))[0])


def haversine_matrix(lats1, lons1, lats2, lons2) -> np.ndarray:
    """Pairwise distances, shape (len(lats1), len(lats2)).

    Bulk variant for scoring loops; may differ from haversine_many by float
    rounding in the last bits, so exact-equality call sites use the kernel.
    """
    phi1 = np.radians(np.asarray(lats1, dtype=float))[:, None]
    phi2 = np.radians(np.asarray(lats2, dtype=float))[None, :]
    dphi = phi2 - phi1
    dlmb = (
        np.radians(np.asarray(lons2, dtype=float))[None, :]
        - np.radians(np.asarray(lons1, dtype=float))[:, None]
    )
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def grid_cell(p: GeoPoint, cell_deg: float = DEFAULT_CELL_DEG) -> GridCell:
    """Half-open grid cell containing a point: cell (i, j) covers
    [i*cell_deg, (i+1)*cell_deg) x [j*cell_deg, (j+1)*cell_deg)."""
    return GridCell(math.floor(p[0] / cell_deg), math.floor(p[1] / cell_deg))


def cell_center(cell: GridCell, cell_deg: float = DEFAULT_CELL_DEG) -> GeoPoint:
    return GeoPoint((cell.i + 0.5) * cell_deg, (cell.j + 0.5) * cell_deg)


def bbox_contains(bbox: Sequence[float], lat: float, lon: float) -> bool:
    """bbox is (lat_min, lat_max, lon_min, lon_max); edges are inclusive."""
    lat_min, lat_max, lon_min, lon_max = bbox
    return lat_min <= lat <= lat_max and lon_min <= lon <= lon_max


def bbox_diagonal_m(bbox: Sequence[float]) -> float:
    lat_min, lat_max, lon_min, lon_max = bbox
    return haversine(GeoPoint(lat_min, lon_min), GeoPoint(lat_max, lon_max))


@dataclass
class MovementProfile:
    """Clustered summary of a point set.

    centroids[k] is the arithmetic mean of the member coordinates of cluster k,
    member_counts[k] how many input points it absorbed, and labels[i] the final
    cluster index of input point i.  Clusters are numbered by their smallest
    member point index, so the numbering is stable for a fixed input order.
    """

    owner_kind: str
    centroids: list[GeoPoint] = field(default_factory=list)
    member_counts: list[int] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)

    @property
    def n_areas(self) -> int:
        return len(self.centroids)

    def is_empty(self) -> bool:
        return not self.centroids

    def centroid_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lats = np.array([c.lat for c in self.centroids], dtype=float)
        lons = np.array([c.lon for c in self.centroids], dtype=float)
        return lats, lons


def agglomerative_cluster(
    points: Sequence[GeoPoint],
    cutoff_m: float = DEFAULT_CLUSTER_CUTOFF_M,
    owner_kind: str = KIND_COMMUNITY,
) -> MovementProfile:
    """Centroid-linkage agglomerative clustering with a merge cutoff.

    Every point starts as its own cluster (cluster id = point index).  The pair
    of clusters with the smallest centroid distance is merged while that
    distance is strictly below ``cutoff_m``; the merged cluster receives the
    next unused id and the count-weighted mean centroid.  Ties on distance are
    broken by the smaller (first id, second id) pair.

    Raises ValueError on an empty input; use frequent_movement_areas when an
    empty point set should yield an empty profile instead.
    """
    n = len(points)
    if n == 0:
        raise ValueError("agglomerative_cluster requires at least one point")

    # cluster state, indexed by stable id; a cluster never changes once
    # created, and at most n - 1 merges can happen, so 2n - 1 slots suffice
    cap = 2 * n - 1
    cl_lat = np.empty(cap, dtype=float)
    cl_lon = np.empty(cap, dtype=float)
    cl_count = np.empty(cap, dtype=np.int64)
    cl_lat[:n] = [p[0] for p in points]
    cl_lon[:n] = [p[1] for p in points]
    cl_count[:n] = 1
    alive = np.zeros(cap, dtype=bool)
    alive[:n] = True
    cl_members: list[list[int]] = [[i] for i in range(n)]

    heap: list[tuple[float, int, int]] = []
    for ai in range(1, n):
        d = haversine_many(cl_lat[ai], cl_lon[ai], cl_lat[:ai], cl_lon[:ai])
        for bi in np.nonzero(d < cutoff_m)[0]:
            heap.append((float(d[bi]), int(bi), ai))
    heapq.heapify(heap)

    next_id = n
    while heap:
        dist, a, b = heapq.heappop(heap)
        if not (alive[a] and alive[b]):
            continue
        na, nb = int(cl_count[a]), int(cl_count[b])
        new_lat = (cl_lat[a] * na + cl_lat[b] * nb) / (na + nb)
        new_lon = (cl_lon[a] * na + cl_lon[b] * nb) / (na + nb)
        alive[a] = False
        alive[b] = False
        z = next_id
        next_id += 1
        cl_lat[z] = new_lat
        cl_lon[z] = new_lon
        cl_count[z] = na + nb
        cl_members.append(cl_members[a] + cl_members[b])
        cl_members[a] = []
        cl_members[b] = []
        ids = np.flatnonzero(alive[:z])
        if ids.size:
            d = haversine_many(new_lat, new_lon, cl_lat[ids], cl_lon[ids])
            for k in np.nonzero(d < cutoff_m)[0]:
                heapq.heappush(heap, (float(d[k]), int(ids[k]), z))
        alive[z] = True

    final = sorted(np.flatnonzero(alive), key=lambda cid: min(cl_members[cid]))
    labels = [0] * n
    centroids = []
    counts = []
    for idx, cid in enumerate(final):
        centroids.append(GeoPoint(float(cl_lat[cid]), float(cl_lon[cid])))
        counts.append(int(cl_count[cid]))
        for pt in cl_members[cid]:
            labels[pt] = idx
    return MovementProfile(owner_kind, centroids, counts, labels)


def frequent_movement_areas(
    points: Sequence[GeoPoint],
    cutoff_m: float = DEFAULT_CLUSTER_CUTOFF_M,
    owner_kind: str = KIND_COMMUNITY,
) -> MovementProfile:
    """Movement profile of a point set; empty input gives an empty profile."""
    if not points:
        return MovementProfile(owner_kind)
    return agglomerative_cluster(points, cutoff_m, owner_kind)
