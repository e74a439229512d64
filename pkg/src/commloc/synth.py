"""Synthetic check-in corpus with planted social and spatial structure.

The generated world gives every focal user a friend circle made of a few
dense cores (planted-partition edges) plus isolated extras.  Each core
owns exclusive hotspots; its members check in tightly around them.  The
isolated friends come in two flavors: strangers camp in offset crowds
right next to the hotspots, while loners have an edge to the focal user
but no check-ins at all.  The focal user's own check-ins follow the
cores' hotspots, optionally keyed to time-of-day slots, with a per-user
noise rate tied to how skewed the core sizes are; skew itself cycles
through a few fixed tiers so user cohorts are directly comparable.
Ground truth (memberships, hotspot centers, per-user rates) is written
alongside the corpus so tests can verify recovery instead of eyeballing
it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .corpus import CityScope

SYNTH_CITY_NAME = "synthville"
SYNTH_BBOX = (40.55, 40.85, -74.05, -73.75)
SYNTH_TIMEZONE = "UTC"
SYNTH_START = datetime(2015, 1, 1)

_DEG_PER_M_LAT = 1.0 / 111_194.9
_SITE_MIN_SEP_M = 2_200.0
_SITE_MARGIN_DEG = 0.015
_SLOT_WINDOWS = ((11, 12), (19, 20), (15, 16), (7, 8), (22, 23))
_SLOT_PROB = 0.33
_SKEW_TIERS = (0.25, 0.5, 0.75, 1.0)


class SpecError(ValueError):
    """Raised when a synthetic spec cannot produce a corpus."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the generated world; defaults fit a <60 s end-to-end run."""

    n_users: int = 200
    n_communities: int = 3
    p_in: float = 0.75
    p_out: float = 0.02
    hotspots_per_community: int = 2
    jitter_m: float = 45.0
    checkins_per_user: int = 170
    context_dependent: bool = True
    seed: int = 7
    # world shape beyond the headline knobs
    core_friends: int = 21
    n_strangers: int = 12
    n_loners: int = 18
    member_points_per_hotspot: int = 6
    member_bias_m: float = 150.0
    ego_bias_m: float = 60.0
    stranger_offset_m: float = 350.0
    stranger_points: int = 12
    noise_base: float = 0.05
    noise_slope: float = 0.30
    period_days: int = 112

    def validate(self) -> None:
        if self.n_users < 2:
            raise SpecError("n_users must be at least 2")
        if self.n_communities < 1:
            raise SpecError("n_communities must be at least 1")
        if not self.p_in > self.p_out:
            raise SpecError("p_in must exceed p_out")
        if not (0.0 <= self.p_out and self.p_in <= 1.0):
            raise SpecError("edge probabilities must lie in [0, 1]")
        if self.jitter_m <= 0.0:
            raise SpecError("jitter_m must be positive")
        if self.hotspots_per_community < 1:
            raise SpecError("hotspots_per_community must be at least 1")
        if self.core_friends < 3 * self.n_communities:
            raise SpecError("core_friends must allow 3 members per community")
        if self.n_strangers < 0 or self.n_loners < 0:
            raise SpecError("n_strangers and n_loners must be non-negative")
        if self.checkins_per_user < 10:
            raise SpecError("checkins_per_user must be at least 10")
        if self.period_days < 1:
            raise SpecError("period_days must be at least 1")

    def city(self) -> CityScope:
        return CityScope(SYNTH_CITY_NAME, SYNTH_BBOX, SYNTH_TIMEZONE)


def planted_partition_graph(
    block_sizes: list[int], p_in: float, p_out: float, rng: np.random.Generator
) -> tuple[int, list[tuple[int, int]]]:
    """Random graph on 0..n-1 with dense blocks and sparse cross edges."""
    n = sum(block_sizes)
    block = np.repeat(np.arange(len(block_sizes)), block_sizes)
    edges = []
    for a in range(n):
        for b in range(a + 1, n):
            p = p_in if block[a] == block[b] else p_out
            if rng.random() < p:
                edges.append((a, b))
    return n, edges


def _meters_to_deg(lat: float, dn_m: float, de_m: float) -> tuple[float, float]:
    return dn_m * _DEG_PER_M_LAT, de_m * _DEG_PER_M_LAT / math.cos(math.radians(lat))


def _gauss_offset(
    rng: np.random.Generator, lat: float, lon: float, sigma_m: float
) -> tuple[float, float]:
    dlat, dlon = _meters_to_deg(lat, rng.normal(0.0, sigma_m), rng.normal(0.0, sigma_m))
    return lat + dlat, lon + dlon


def _place_sites(
    rng: np.random.Generator, n: int, min_sep_m: float
) -> list[tuple[float, float]]:
    lat_min, lat_max, lon_min, lon_max = SYNTH_BBOX
    lat_lo, lat_hi = lat_min + _SITE_MARGIN_DEG, lat_max - _SITE_MARGIN_DEG
    lon_lo, lon_hi = lon_min + _SITE_MARGIN_DEG, lon_max - _SITE_MARGIN_DEG
    mid = 0.5 * (lat_lo + lat_hi)
    sep = min_sep_m
    sites: list[tuple[float, float]] = []
    attempts = 0
    while len(sites) < n:
        lat = float(rng.uniform(lat_lo, lat_hi))
        lon = float(rng.uniform(lon_lo, lon_hi))
        ok = True
        for slat, slon in sites:
            dn = (lat - slat) / _DEG_PER_M_LAT
            de = (lon - slon) / _DEG_PER_M_LAT * math.cos(math.radians(mid))
            if math.hypot(dn, de) < sep:
                ok = False
                break
        if ok:
            sites.append((lat, lon))
        attempts += 1
        if attempts > 1000 * n:  # infeasible separation, relax and keep going
            sep *= 0.9
            attempts = 0
    return sites


def _core_sizes(total: int, n_comm: int, skew: float) -> list[int]:
    """Sizes summing to total: one community grows with skew, rest stay even."""
    if n_comm == 1:
        return [total]
    base = total // n_comm
    min_size = 3
    big = round(base + skew * (total - min_size * (n_comm - 1) - base))
    big = min(max(big, base), total - min_size * (n_comm - 1))
    rest = total - big
    sizes = [big]
    left = n_comm - 1
    for i in range(left):
        share = rest // left + (1 if i < rest % left else 0)
        sizes.append(share)
    return sizes


def _slot_table(n_comm: int, n_windows: int) -> list[tuple[float, tuple[int, ...]]]:
    """(probability, hour set) per community; community 0 takes leftover hours."""
    windowed = min(n_comm - 1, n_windows)
    p_each = min(_SLOT_PROB, 0.8 / windowed) if windowed else 0.0
    used: set[int] = set()
    table: list[tuple[float, tuple[int, ...]]] = []
    for k in range(n_comm):
        if 1 <= k <= windowed:
            hours = _SLOT_WINDOWS[k - 1]
            used.update(hours)
            table.append((p_each, hours))
        elif k == 0:
            table.append((0.0, ()))  # filled below
        else:
            table.append((0.0, _SLOT_WINDOWS[(k - 1) % n_windows]))
    free = tuple(h for h in range(24) if h not in used)
    p0 = 1.0 - sum(p for p, _ in table)
    table[0] = (p0, free)
    return table


def _fmt_time(day: int, hour: int, minute: int, second: int) -> str:
    t = SYNTH_START + timedelta(days=day, hours=hour, minutes=minute, seconds=second)
    return t.strftime("%Y-%m-%dT%H:%M:%S") + "Z"


def synth_generate(spec: SyntheticSpec, out_dir: str | Path) -> dict[str, Path]:
    """Write checkins.tsv, edges.tsv, and ground_truth.json under out_dir.

    All draws come from one seeded generator in a fixed loop order, so a
    given spec always produces byte-identical files.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    lat_min, lat_max, lon_min, lon_max = SYNTH_BBOX
    n_sites = spec.n_communities * spec.hotspots_per_community
    slots = _slot_table(spec.n_communities, len(_SLOT_WINDOWS))
    slot_probs = np.array([p for p, _ in slots])
    lo = int(round(0.82 * spec.checkins_per_user))
    hi = int(round(1.18 * spec.checkins_per_user)) + 1

    checkin_lines: list[str] = []
    edge_lines: list[str] = []
    truth_users: dict[str, dict] = {}

    for ui in range(spec.n_users):
        ego = f"u{ui:04d}"
        skew = _SKEW_TIERS[ui % len(_SKEW_TIERS)]
        noise_rate = spec.noise_base + spec.noise_slope * skew
        sizes = _core_sizes(spec.core_friends, spec.n_communities, skew)
        n_friends = spec.core_friends + spec.n_strangers + spec.n_loners
        friends = [f"{ego}_f{j:02d}" for j in range(n_friends)]
        cores: list[list[str]] = []
        at = 0
        for s in sizes:
            cores.append(friends[at : at + s])
            at += s
        strangers = friends[spec.core_friends : spec.core_friends + spec.n_strangers]
        loners = friends[spec.core_friends + spec.n_strangers :]

        sites = _place_sites(rng, n_sites, _SITE_MIN_SEP_M)
        core_sites = [
            sites[k * spec.hotspots_per_community : (k + 1) * spec.hotspots_per_community]
            for k in range(spec.n_communities)
        ]

        for f in friends:
            edge_lines.append(f"{min(ego, f)}\t{max(ego, f)}")
        core_of = {}
        for k, members in enumerate(cores):
            for m in members:
                core_of[m] = k
        core_members = friends[: spec.core_friends]
        for a in range(len(core_members)):
            for b in range(a + 1, len(core_members)):
                p = spec.p_in if core_of[core_members[a]] == core_of[core_members[b]] else spec.p_out
                if rng.random() < p:
                    fa, fb = core_members[a], core_members[b]
                    edge_lines.append(f"{min(fa, fb)}\t{max(fa, fb)}")

        # members go to their core's hotspots; one personal bias per hotspot
        for k, members in enumerate(cores):
            for m in members:
                for s, (slat, slon) in enumerate(core_sites[k]):
                    blat, blon = _gauss_offset(rng, slat, slon, spec.member_bias_m)
                    for _ in range(spec.member_points_per_hotspot):
                        plat, plon = _gauss_offset(rng, blat, blon, spec.jitter_m)
                        checkin_lines.append(
                            f"{m}\t"
                            f"{_fmt_time(int(rng.integers(spec.period_days)), int(rng.integers(24)), int(rng.integers(60)), int(rng.integers(60)))}\t"
                            f"{plat:.6f}\t{plon:.6f}"
                        )
        # strangers crowd next to one hotspot, offset enough to stay distinct
        stranger_centers: dict[str, tuple[float, float]] = {}
        for j, st in enumerate(strangers):
            slat, slon = sites[j % n_sites]
            ang = float(rng.uniform(0.0, 2.0 * math.pi))
            dlat, dlon = _meters_to_deg(
                slat,
                spec.stranger_offset_m * math.cos(ang),
                spec.stranger_offset_m * math.sin(ang),
            )
            clat, clon = slat + dlat, slon + dlon
            stranger_centers[st] = (clat, clon)
            for _ in range(spec.stranger_points):
                plat, plon = _gauss_offset(rng, clat, clon, spec.jitter_m)
                checkin_lines.append(
                    f"{st}\t"
                    f"{_fmt_time(int(rng.integers(spec.period_days)), int(rng.integers(24)), int(rng.integers(60)), int(rng.integers(60)))}\t"
                    f"{plat:.6f}\t{plon:.6f}"
                )
        # loners contribute an edge and nothing else

        ego_bias = {
            (k, s): _gauss_offset(rng, slat, slon, spec.ego_bias_m)
            for k, csites in enumerate(core_sites)
            for s, (slat, slon) in enumerate(csites)
        }
        n_ck = int(rng.integers(lo, hi))
        for _ in range(n_ck):
            core = int(rng.choice(spec.n_communities, p=slot_probs))
            hours = slots[core][1]
            if spec.context_dependent and hours:
                hour = int(hours[rng.integers(len(hours))])
            else:
                hour = int(rng.integers(24))
            day = int(rng.integers(spec.period_days))
            minute, second = int(rng.integers(60)), int(rng.integers(60))
            if rng.random() < noise_rate:
                plat = float(rng.uniform(lat_min, lat_max))
                plon = float(rng.uniform(lon_min, lon_max))
            else:
                site = int(rng.integers(spec.hotspots_per_community))
                blat, blon = ego_bias[(core, site)]
                plat, plon = _gauss_offset(rng, blat, blon, spec.jitter_m)
            checkin_lines.append(
                f"{ego}\t{_fmt_time(day, hour, minute, second)}\t{plat:.6f}\t{plon:.6f}"
            )

        truth_users[ego] = {
            "skew": skew,
            "noise_rate": noise_rate,
            "core_sizes": sizes,
            "cores": cores,
            "strangers": strangers,
            "loners": loners,
            "core_sites": core_sites,
            "stranger_centers": stranger_centers,
            "slot_hours": {str(k): list(h) for k, (_, h) in enumerate(slots)},
            "slot_probs": [p for p, _ in slots],
            "n_checkins": n_ck,
        }

    checkins_path = out / "checkins.tsv"
    edges_path = out / "edges.tsv"
    truth_path = out / "ground_truth.json"
    checkins_path.write_text("\n".join(checkin_lines) + "\n", encoding="utf-8")
    edges_path.write_text("\n".join(edge_lines) + "\n", encoding="utf-8")
    truth = {
        "spec": asdict(spec),
        "city": {
            "name": SYNTH_CITY_NAME,
            "bbox": list(SYNTH_BBOX),
            "timezone": SYNTH_TIMEZONE,
        },
        "users": truth_users,
    }
    truth_path.write_text(
        json.dumps(truth, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return {"checkins": checkins_path, "edges": edges_path, "ground_truth": truth_path}
