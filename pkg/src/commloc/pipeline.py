"""Staged analysis pipeline with on-disk artifacts between stages.

Stages: synth -> ingest -> communities -> influence -> diversity -> train ->
evaluate.  Each stage reads the previous stage's artifacts from the output
directory, writes its own, and refreshes manifest.json (sha256 per artifact
plus the config snapshot).  Community detection and clustering dominate the
cost, so caching their outputs lets the predictor iterate alone.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .communities import (
    CommunityPartition,
    CommunityStats,
    EgoNetwork,
    community_stats,
    detect_communities,
    dump_partitions,
    ego_network,
    load_partitions,
)
from .corpus import (
    CheckIn,
    CityScope,
    Corpus,
    CorpusError,
    TimeHistograms,
    parse_edges,
)
from .diversity import community_entropy, influence_entropy
from .evaluation import (
    PURPOSE_NEGATIVES,
    PURPOSE_PSMM,
    PURPOSE_VIRTUAL,
    ExperimentUser,
    ModelSpec,
    bulk_feature_matrix,
    run_experiment,
    stable_digest,
    user_rng,
)
from .geo import (
    KIND_COMMUNITY,
    KIND_FRIEND_SET,
    KIND_USER,
    KIND_VIRTUAL,
    GeoPoint,
    MovementProfile,
    bbox_diagonal_m,
    frequent_movement_areas,
)
from .influence import (
    ContextWindow,
    NoInfluencerError,
    UserGeoData,
    assign_influential,
    context_report,
    distance_cdf_compare,
)
from .predict import (
    MODEL_PSMM,
    InsufficientDataError,
    UserFeatureContext,
    build_instances,
    feature_names,
    psmm_fit,
    train_logistic,
)
from .synth import SyntheticSpec, synth_generate

STAGE_SYNTH = "synth"
STAGE_INGEST = "ingest"
STAGE_COMMUNITIES = "communities"
STAGE_INFLUENCE = "influence"
STAGE_DIVERSITY = "diversity"
STAGE_TRAIN = "train"
STAGE_EVALUATE = "evaluate"
STAGE_ALL = "all"
STAGE_ORDER = (
    STAGE_SYNTH,
    STAGE_INGEST,
    STAGE_COMMUNITIES,
    STAGE_INFLUENCE,
    STAGE_DIVERSITY,
    STAGE_TRAIN,
    STAGE_EVALUATE,
)

SKIP_NO_COMMUNITIES = "no-communities"
SKIP_NO_PROFILES = "no-community-profile"


class PipelineError(Exception):
    exit_code = 1


class DependencyError(PipelineError):
    """A required prior-stage artifact is missing."""

    exit_code = 3


class DataError(PipelineError):
    """Input data is missing or unusable."""

    exit_code = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def update_manifest(out: Path, cfg: dict, paths: Sequence[Path]) -> Path:
    """Record sha256 of the given artifacts plus the config snapshot."""
    manifest_path = out / "manifest.json"
    data: dict = {"artifacts": {}}
    if manifest_path.exists():
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
        data.setdefault("artifacts", {})
    data["config"] = cfg
    for p in paths:
        data["artifacts"][p.relative_to(out).as_posix()] = _sha256(p)
    manifest_path.write_text(
        json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest_path


def _city(cfg: dict) -> CityScope:
    c = cfg["city"]
    return CityScope(c["name"], tuple(c["bbox"]), c["timezone"])


def _require_artifact(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DependencyError(
            f"missing artifact {path}; run the '{produced_by}' stage first"
        )
    return path


def _resolve_input(out: Path, p: str) -> Path:
    path = Path(p)
    if path.is_absolute():
        return path
    if (out / path).exists():
        return out / path
    return path


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# stages


def stage_synth(cfg: dict, out: Path) -> list[Path]:
    s = cfg["synth"]
    spec = SyntheticSpec(
        n_users=s["n_users"],
        n_communities=s["n_communities"],
        p_in=s["p_in"],
        p_out=s["p_out"],
        hotspots_per_community=s["hotspots_per_community"],
        jitter_m=s["jitter_m"],
        checkins_per_user=s["checkins_per_user"],
        context_dependent=s["context_dependent"],
        seed=cfg["seed"],
    )
    paths = synth_generate(spec, out / "corpus")
    return [paths["checkins"], paths["edges"], paths["ground_truth"]]


def stage_ingest(cfg: dict, out: Path) -> list[Path]:
    if cfg["corpus"]["source"] == "synthetic":
        checkins_path = out / "corpus" / "checkins.tsv"
        edges_path = out / "corpus" / "edges.tsv"
        _require_artifact(checkins_path, STAGE_SYNTH)
        _require_artifact(edges_path, STAGE_SYNTH)
    else:
        checkins_path = _resolve_input(out, cfg["corpus"]["checkins"])
        edges_path = _resolve_input(out, cfg["corpus"]["edges"])
        for p in (checkins_path, edges_path):
            if not p.exists():
                raise DataError(f"corpus file not found: {p}")
    try:
        corpus = Corpus.load(
            str(checkins_path), str(edges_path), _city(cfg), cfg["edges"]["mode"]
        )
    except CorpusError as exc:
        raise DataError(str(exc)) from exc
    active = corpus.active_users(
        cfg["filters"]["min_checkins"], cfg["filters"]["max_checkins"]
    )
    users = corpus.users()
    offsets = [0]
    lat, lon, epoch, hour, weekday = [], [], [], [], []
    for uid in users:
        for c in corpus.by_user[uid]:
            lat.append(c.lat)
            lon.append(c.lon)
            epoch.append(c.epoch())
            hour.append(c.hour)
            weekday.append(c.weekday)
        offsets.append(len(lat))
    ingest_dir = out / "ingest"
    ingest_dir.mkdir(parents=True, exist_ok=True)
    arrays = {
        "lat": np.array(lat, dtype=np.float64),
        "lon": np.array(lon, dtype=np.float64),
        "epoch": np.array(epoch, dtype=np.float64),
        "hour": np.array(hour, dtype=np.int8),
        "weekday": np.array(weekday, dtype=np.int8),
    }
    paths = []
    for name, arr in arrays.items():
        p = ingest_dir / f"{name}.npy"
        np.save(p, arr)
        paths.append(p)
    users_json = ingest_dir / "users.json"
    users_json.write_text(
        json.dumps(
            {
                "user_ids": users,
                "offsets": offsets,
                "active_users": active,
                "malformed": corpus.malformed,
                "n_checkins": corpus.n_checkins,
                "histograms": corpus.histograms.as_dict(),
            },
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    paths.append(users_json)
    edges_out = ingest_dir / "edges.tsv"
    lines = [f"{a}\t{b}" for a, b in corpus.graph.edges()]
    edges_out.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    paths.append(edges_out)
    return paths


class _IngestView:
    """Reloaded ingest artifacts: per-user check-ins, graph, histograms."""

    def __init__(self, out: Path) -> None:
        ingest = out / "ingest"
        meta = json.loads(
            _require_artifact(ingest / "users.json", STAGE_INGEST).read_text(
                encoding="utf-8"
            )
        )
        self.user_ids: list[str] = meta["user_ids"]
        self.active_users: list[str] = meta["active_users"]
        self.histograms = TimeHistograms(
            meta["histograms"]["by_hour"], meta["histograms"]["by_day"]
        )
        self.malformed: int = meta["malformed"]
        offsets = meta["offsets"]
        lat = np.load(ingest / "lat.npy")
        lon = np.load(ingest / "lon.npy")
        epoch = np.load(ingest / "epoch.npy")
        hour = np.load(ingest / "hour.npy")
        weekday = np.load(ingest / "weekday.npy")
        self.by_user: dict[str, list[CheckIn]] = {}
        for i, uid in enumerate(self.user_ids):
            lo, hi = offsets[i], offsets[i + 1]
            self.by_user[uid] = [
                CheckIn(
                    uid,
                    datetime.fromtimestamp(epoch[k], tz=timezone.utc),
                    float(lat[k]),
                    float(lon[k]),
                    int(hour[k]),
                    int(weekday[k]),
                )
                for k in range(lo, hi)
            ]
        with open(
            _require_artifact(ingest / "edges.tsv", STAGE_INGEST), encoding="utf-8"
        ) as fh:
            self.graph = parse_edges(fh, "undirected")

    def counts(self) -> dict[str, int]:
        return {uid: len(cks) for uid, cks in self.by_user.items()}


def stage_communities(
    cfg: dict, out: Path, communities_file: str | None = None
) -> list[Path]:
    view = _IngestView(out)
    partitions: list[CommunityPartition] = []
    if communities_file is not None:
        src = Path(communities_file)
        if not src.exists():
            raise DataError(f"communities file not found: {src}")
        with open(src, encoding="utf-8") as fh:
            loaded = load_partitions(fh)
        for uid in view.active_users:
            partitions.append(loaded.get(uid, CommunityPartition(uid, ())))
    else:
        for uid in view.active_users:
            if view.graph.has_node(uid):
                net = ego_network(view.graph, uid)
            else:
                net = EgoNetwork(uid, (), ())
            partitions.append(detect_communities(net))
    comm_dir = out / "communities"
    comm_dir.mkdir(parents=True, exist_ok=True)
    parts_path = comm_dir / "partitions.tsv"
    with open(parts_path, "w", encoding="utf-8") as fh:
        dump_partitions(partitions, fh)
    summary = {
        "n_users": len(partitions),
        "source": "file" if communities_file else "detected",
        "communities_per_user": {p.owner: p.n_communities for p in partitions},
        "sizes_per_user": {p.owner: p.sizes() for p in partitions},
    }
    summary_path = comm_dir / "summary.json"
    summary_path.write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return [parts_path, summary_path]


def _profile_to_dict(p: MovementProfile) -> dict:
    return {
        "centroids": [[c.lat, c.lon] for c in p.centroids],
        "member_counts": list(p.member_counts),
    }


def _profile_from_dict(d: dict, kind: str) -> MovementProfile:
    return MovementProfile(
        kind,
        [GeoPoint(lat, lon) for lat, lon in d["centroids"]],
        list(d["member_counts"]),
    )


def _stats_to_dict(s: CommunityStats) -> dict:
    return {
        "size": s.size,
        "internal_edges": s.internal_edges,
        "connectivity": s.connectivity,
        "total_checkins": s.total_checkins,
        "n_fma": s.n_fma,
    }


def _stats_from_dict(d: dict) -> CommunityStats:
    return CommunityStats(
        d["size"], d["internal_edges"], d["connectivity"], d["total_checkins"], d["n_fma"]
    )


def _points_of(members: Sequence[str], by_user: dict[str, list[CheckIn]]) -> list[GeoPoint]:
    return [
        GeoPoint(c.lat, c.lon) for m in members for c in by_user.get(m, ())
    ]


def _windows_from_cfg(cfg: dict) -> list[ContextWindow]:
    out = []
    for w in cfg["influence"]["windows"]:
        out.append(
            ContextWindow(
                w["name"],
                w["kind"],
                frozenset(w["weekdays"]) if w.get("weekdays") is not None else None,
                w.get("hour_start", 0),
                w.get("hour_end", 24),
                tuple(w["bbox"]) if w.get("bbox") is not None else None,
            )
        )
    return out


def stage_influence(cfg: dict, out: Path) -> list[Path]:
    view = _IngestView(out)
    parts_path = _require_artifact(out / "communities" / "partitions.tsv", STAGE_COMMUNITIES)
    with open(parts_path, encoding="utf-8") as fh:
        partitions = load_partitions(fh)
    cutoff = cfg["clustering"]["cutoff_m"]
    seed = cfg["seed"]
    counts = view.counts()
    per_user: dict[str, dict] = {}
    skipped: dict[str, str] = {}
    users_geo: list[UserGeoData] = []
    own_profiles: dict[str, MovementProfile] = {}
    for uid in view.active_users:
        part = partitions.get(uid, CommunityPartition(uid, ()))
        if part.n_communities == 0:
            skipped[uid] = SKIP_NO_COMMUNITIES
            continue
        net = (
            ego_network(view.graph, uid)
            if view.graph.has_node(uid)
            else EgoNetwork(uid, (), ())
        )
        groups = part.communities
        profiles = [
            frequent_movement_areas(_points_of(g, view.by_user), cutoff, KIND_COMMUNITY)
            for g in groups
        ]
        stats = [
            community_stats(g, net, counts, p.n_areas) for g, p in zip(groups, profiles)
        ]
        rng = user_rng(seed, uid, PURPOSE_VIRTUAL)
        nodes = list(net.nodes)
        virtual_members: list[list[str]] = []
        for g in groups:
            pick = rng.choice(len(nodes), size=len(g), replace=False)
            virtual_members.append([nodes[int(j)] for j in sorted(pick)])
        virtual_profiles = [
            frequent_movement_areas(_points_of(vm, view.by_user), cutoff, KIND_VIRTUAL)
            for vm in virtual_members
        ]
        virtual_stats = [
            community_stats(vm, net, counts, p.n_areas)
            for vm, p in zip(virtual_members, virtual_profiles)
        ]
        friend_profile = frequent_movement_areas(
            _points_of(nodes, view.by_user), cutoff, KIND_FRIEND_SET
        )
        cks = view.by_user[uid]
        half = math.ceil(len(cks) / 2)
        h1 = cks[:half]
        own_profile = frequent_movement_areas(
            [GeoPoint(c.lat, c.lon) for c in h1], cutoff, KIND_USER
        )
        own_hours = [0] * 24
        own_days = [0] * 7
        for c in h1:
            own_hours[c.hour] += 1
            own_days[c.weekday] += 1
        try:
            assignments = assign_influential(uid, cks, profiles)
        except NoInfluencerError:
            skipped[uid] = SKIP_NO_PROFILES
            continue
        users_geo.append(
            UserGeoData(uid, cks, profiles, friend_profile, virtual_profiles, assignments)
        )
        own_profiles[uid] = own_profile
        per_user[uid] = {
            "communities": [_profile_to_dict(p) for p in profiles],
            "stats": [_stats_to_dict(s) for s in stats],
            "virtual": [_profile_to_dict(p) for p in virtual_profiles],
            "virtual_stats": [_stats_to_dict(s) for s in virtual_stats],
            "virtual_members": virtual_members,
            "friends": _profile_to_dict(friend_profile),
            "own": _profile_to_dict(own_profile),
            "own_hour_counts": own_hours,
            "own_day_counts": own_days,
            "prior_half": half,
            "assignments": [
                [a.influential_index, a.influential_distance] for a in assignments
            ],
        }
    infl_dir = out / "influence"
    infl_dir.mkdir(parents=True, exist_ok=True)
    profiles_path = infl_dir / "profiles.json"
    profiles_path.write_text(
        json.dumps({"users": per_user, "skipped": skipped}, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    paths = [profiles_path]
    comparison = distance_cdf_compare(
        users_geo,
        own_profiles,
        seed=seed,
        resolution_m=cfg["influence"]["cdf_resolution_m"],
        max_m=cfg["influence"]["cdf_max_m"],
        random_users_per_location=cfg["influence"]["random_users_per_location"],
    )
    cdfs = comparison.cdf
    baselines = sorted(cdfs)
    rows = []
    for b in baselines:
        for d, v in cdfs[b]:
            rows.append([b, d, v])
    cdf_path = infl_dir / "cdf.csv"
    _write_csv(cdf_path, ["baseline", "distance_m", "cdf"], rows)
    paths.append(cdf_path)
    prof_rows = []
    for uid in sorted(per_user):
        rec = per_user[uid]
        labeled = [
            (KIND_COMMUNITY, f"{uid}:{i}", p) for i, p in enumerate(rec["communities"])
        ]
        labeled += [
            (KIND_VIRTUAL, f"{uid}:{i}", p) for i, p in enumerate(rec["virtual"])
        ]
        labeled.append((KIND_FRIEND_SET, uid, rec["friends"]))
        labeled.append((KIND_USER, uid, rec["own"]))
        for kind, owner_id, p in labeled:
            for (clat, clon), cnt in zip(p["centroids"], p["member_counts"]):
                prof_rows.append([kind, owner_id, clat, clon, cnt])
    prof_csv = infl_dir / "profiles.csv"
    _write_csv(
        prof_csv,
        ["owner_kind", "owner_id", "centroid_lat", "centroid_lon", "member_count"],
        prof_rows,
    )
    paths.append(prof_csv)
    pct_path = infl_dir / "cdf_percentiles.json"
    pct_path.write_text(
        json.dumps(
            {
                "n_locations": comparison.n_locations,
                "percentiles": {
                    b: {str(q): v for q, v in comparison.percentiles[b].items()}
                    for b in baselines
                },
            },
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    paths.append(pct_path)
    windows = _windows_from_cfg(cfg)
    if len(windows) >= 2:
        report = context_report(users_geo, windows[0], windows[1])
        ctx_rows = [
            [r.user_id, r.similarity, r.entropy_a, r.entropy_b] for r in report.rows
        ]
        ctx_csv = infl_dir / "context_report.csv"
        _write_csv(ctx_csv, ["user_id", "sim", "entropy_a", "entropy_b"], ctx_rows)
        ctx_json = infl_dir / "context_report.json"
        ctx_json.write_text(
            json.dumps(
                {
                    "window_a": report.window_a,
                    "window_b": report.window_b,
                    "mean_similarity": report.mean_similarity,
                    "mean_entropy_a": report.mean_entropy_a,
                    "mean_entropy_b": report.mean_entropy_b,
                    "mean_entropy_all": report.mean_entropy_all,
                    "n_users": report.n_users,
                    "n_excluded": report.n_excluded,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
        paths.extend([ctx_csv, ctx_json])
    return paths


def stage_diversity(cfg: dict, out: Path) -> list[Path]:
    parts_path = _require_artifact(out / "communities" / "partitions.tsv", STAGE_COMMUNITIES)
    profiles_path = _require_artifact(out / "influence" / "profiles.json", STAGE_INFLUENCE)
    with open(parts_path, encoding="utf-8") as fh:
        partitions = load_partitions(fh)
    data = json.loads(profiles_path.read_text(encoding="utf-8"))
    alpha = cfg["diversity"]["alpha"]
    rows = []
    for uid in sorted(data["users"]):
        u = data["users"][uid]
        sizes = partitions[uid].sizes()
        n_comm = len(u["communities"])
        counts = [0] * n_comm
        for idx, _dist in u["assignments"]:
            counts[idx] += 1
        n_influential = sum(1 for c in counts if c > 0)
        rows.append(
            [
                uid,
                n_comm,
                community_entropy(sizes, alpha),
                n_influential,
                influence_entropy(counts),
            ]
        )
    div_dir = out / "diversity"
    div_dir.mkdir(parents=True, exist_ok=True)
    csv_path = div_dir / "diversity.csv"
    _write_csv(
        csv_path,
        ["user_id", "n_communities", "community_entropy", "n_influential", "influence_entropy"],
        rows,
    )
    width = cfg["evaluation"]["bucket_width"]
    hist: dict[int, int] = {}
    for r in rows:
        b = int(math.floor(r[2] / width + 1e-9))
        hist[b] = hist.get(b, 0) + 1
    summary = {
        "alpha": alpha,
        "n_users": len(rows),
        "mean_community_entropy": float(np.mean([r[2] for r in rows])) if rows else None,
        "mean_influence_entropy": float(np.mean([r[4] for r in rows])) if rows else None,
        "community_entropy_histogram": [
            {"lo": b * width, "hi": (b + 1) * width, "n_users": hist[b]}
            for b in sorted(hist)
        ],
    }
    summary_path = div_dir / "summary.json"
    summary_path.write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return [csv_path, summary_path]


def load_experiment_users(cfg: dict, out: Path) -> tuple[list[ExperimentUser], CityScope]:
    """Rebuild per-user feature contexts from ingest + influence artifacts."""
    view = _IngestView(out)
    profiles_path = _require_artifact(out / "influence" / "profiles.json", STAGE_INFLUENCE)
    data = json.loads(profiles_path.read_text(encoding="utf-8"))
    city = _city(cfg)
    cap = bbox_diagonal_m(city.bbox)
    users: list[ExperimentUser] = []
    for uid in sorted(data["users"]):
        u = data["users"][uid]
        cks = view.by_user[uid]
        half = u["prior_half"]
        ctx = UserFeatureContext(
            user_id=uid,
            community_profiles=[_profile_from_dict(d, KIND_COMMUNITY) for d in u["communities"]],
            community_stats=[_stats_from_dict(d) for d in u["stats"]],
            virtual_profiles=[_profile_from_dict(d, KIND_VIRTUAL) for d in u["virtual"]],
            virtual_stats=[_stats_from_dict(d) for d in u["virtual_stats"]],
            friend_profile=_profile_from_dict(u["friends"], KIND_FRIEND_SET),
            own_profile=_profile_from_dict(u["own"], KIND_USER),
            own_hour_counts=u["own_hour_counts"],
            own_day_counts=u["own_day_counts"],
            global_histograms=view.histograms,
            distance_cap_m=cap,
        )
        users.append(ExperimentUser(uid, ctx, cks[half:], cks[:half]))
    return users, city


def _model_specs(cfg: dict) -> list[ModelSpec]:
    primary = cfg["predict"]["strategy"]
    specs = [ModelSpec(kind, primary) for kind in cfg["predict"]["models"]]
    for s in cfg["predict"]["compare_strategies"]:
        if s != primary and "community" in cfg["predict"]["models"]:
            specs.append(ModelSpec("community", s))
    return specs


def stage_train(cfg: dict, out: Path) -> list[Path]:
    users, city = load_experiment_users(cfg, out)
    seed = cfg["seed"]
    pcfg = cfg["predict"]
    specs = [ModelSpec(kind, pcfg["strategy"]) for kind in pcfg["models"]]
    dump: dict[str, dict] = {s.model_id: {} for s in specs}
    for eu in users:
        base = eu.instance_checkins
        if not base:
            continue
        rng_neg = user_rng(seed, eu.user_id, PURPOSE_NEGATIVES)
        instances = build_instances(eu.user_id, base, city, rng_neg, cfg["grid"]["cell_deg"])
        labels = np.array([it.label for it in instances])
        for spec in specs:
            if spec.kind == MODEL_PSMM:
                try:
                    model = psmm_fit(
                        list(eu.prior_checkins) + base,
                        seed=[seed, stable_digest(eu.user_id), PURPOSE_PSMM],
                    )
                except InsufficientDataError as exc:
                    dump[spec.model_id][eu.user_id] = {"error": str(exc)}
                    continue
                dump[spec.model_id][eu.user_id] = model.to_dict()
            else:
                feats = bulk_feature_matrix(spec.kind, spec.strategy, eu.ctx, instances)
                model = train_logistic(
                    feats,
                    labels,
                    feature_names(spec.kind),
                    learning_rate=pcfg["learning_rate"],
                    l2=pcfg["l2"],
                    epochs=pcfg["epochs"],
                    grad_tol=pcfg["grad_tol"],
                    track_loss=False,
                )
                dump[spec.model_id][eu.user_id] = model.to_dict()
    train_dir = out / "train"
    train_dir.mkdir(parents=True, exist_ok=True)
    models_path = train_dir / "models.json"
    models_path.write_text(
        json.dumps(dump, sort_keys=True) + "\n", encoding="utf-8"
    )
    return [models_path]


def stage_evaluate(cfg: dict, out: Path) -> list[Path]:
    users, city = load_experiment_users(cfg, out)
    div_path = _require_artifact(out / "diversity" / "diversity.csv", STAGE_DIVERSITY)
    entropy_by_user: dict[str, float] = {}
    with open(div_path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            entropy_by_user[row["user_id"]] = float(row["community_entropy"])
    ecfg = cfg["evaluation"]
    report = run_experiment(
        users,
        _model_specs(cfg),
        city,
        cfg["seed"],
        entropy_by_user,
        ratio=ecfg["ratio"],
        min_checkins=ecfg["min_checkins"],
        protocol=ecfg["protocol"],
        n_folds=ecfg["kfolds"],
        psmm_radius_m=cfg["predict"]["psmm_radius_m"],
        cell_deg=cfg["grid"]["cell_deg"],
        bucket_width=ecfg["bucket_width"],
    )
    eval_dir = out / "evaluate"
    eval_dir.mkdir(parents=True, exist_ok=True)
    report_json = eval_dir / "report.json"
    payload = {"config": cfg}
    payload.update(report.to_json_dict())
    report_json.write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    report_csv = eval_dir / "report.csv"
    _write_csv(
        report_csv,
        ["model", "metric", "mean", "stddev", "n_users"],
        report.summary_csv_rows(),
    )
    buckets_csv = eval_dir / "entropy_buckets.csv"
    _write_csv(
        buckets_csv,
        ["bucket_lo", "bucket_hi", "n_users", "mean_auc"],
        report.bucket_csv_rows(),
    )
    return [report_json, report_csv, buckets_csv]


def run_stage(
    stage: str, cfg: dict, out: Path, communities_file: str | None = None
) -> list[Path]:
    """Run one stage (or 'all') and refresh the manifest; returns artifacts."""
    out.mkdir(parents=True, exist_ok=True)
    if stage == STAGE_ALL:
        stages = [
            s
            for s in STAGE_ORDER
            if s != STAGE_SYNTH or cfg["corpus"]["source"] == "synthetic"
        ]
    else:
        stages = [stage]
    written: list[Path] = []
    for s in stages:
        if s == STAGE_SYNTH:
            paths = stage_synth(cfg, out)  # SpecError maps to a config error
        elif s == STAGE_INGEST:
            paths = stage_ingest(cfg, out)
        elif s == STAGE_COMMUNITIES:
            paths = stage_communities(cfg, out, communities_file)
        elif s == STAGE_INFLUENCE:
            paths = stage_influence(cfg, out)
        elif s == STAGE_DIVERSITY:
            paths = stage_diversity(cfg, out)
        elif s == STAGE_TRAIN:
            paths = stage_train(cfg, out)
        elif s == STAGE_EVALUATE:
            paths = stage_evaluate(cfg, out)
        else:
            raise PipelineError(f"unknown stage: {s!r}")
        update_manifest(out, cfg, paths)
        written.extend(paths)
    return written
