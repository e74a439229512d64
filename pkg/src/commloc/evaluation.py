"""Splits, classification metrics, and aggregated experiment reports.

The experiment runner trains one model per (user, model spec) on the user's
chronologically earlier check-ins and scores the later ones against sampled
negatives.  Per-user metrics are macro-averaged into the report; users that
cannot be evaluated are counted with a reason instead of failing the run.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import CheckIn, CityScope
from .diversity import pearson_correlation
from .geo import DEFAULT_CELL_DEG, MovementProfile, haversine
from .influence import min_distances
from .predict import (
    MODEL_COMMUNITY,
    MODEL_FRIENDS,
    MODEL_PSMM,
    MODEL_SAMPLE_FRIENDS,
    MODEL_USER,
    MODEL_USER_COMMUNITY,
    STRATEGY_MAX_CON,
    STRATEGY_MAX_SIZE,
    STRATEGY_NEAREST,
    STRATEGY_RANDOM,
    DegenerateTrainingError,
    InsufficientDataError,
    PredictionInstance,
    UserFeatureContext,
    build_instances,
    feature_names,
    psmm_fit,
    psmm_predict,
    train_logistic,
)

DEFAULT_SPLIT_RATIO = 0.8
DEFAULT_MIN_EVAL_CHECKINS = 5
DEFAULT_BUCKET_WIDTH = 0.2
DEFAULT_PSMM_RADIUS_M = 1000.0

PROTOCOL_CHRONOLOGICAL = "chronological"
PROTOCOL_KFOLD = "kfold"
DEFAULT_KFOLDS = 10

# rng stream tags so per-user draws stay independent of each other
PURPOSE_NEGATIVES = 1
PURPOSE_STRATEGY = 2
PURPOSE_PSMM = 3
PURPOSE_KFOLD = 4
PURPOSE_VIRTUAL = 5

SKIP_TOO_FEW = "too-few-checkins"
SKIP_NO_COMMUNITY = "no-influential-community"
SKIP_DEGENERATE = "degenerate-training"
SKIP_UNDEFINED_AUC = "undefined-auc"
SKIP_PSMM_TOO_FEW = "psmm-too-few-checkins"


class UndefinedAucError(Exception):
    """Raised when a score set has only one class."""


def stable_digest(text: str) -> int:
    """Platform-stable 64-bit integer digest (hash() is salted per process)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def user_rng(seed: int, user_id: str, purpose: int) -> np.random.Generator:
    """Independent, order-insensitive random stream for one (user, purpose)."""
    return np.random.default_rng([seed, stable_digest(user_id), purpose])


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_predictions(cls, predicted: Sequence[int], labels: Sequence[int]) -> "ConfusionCounts":
        tp = fp = fn = tn = 0
        for p, y in zip(predicted, labels, strict=True):
            if y == 1:
                if p == 1:
                    tp += 1
                else:
                    fn += 1
            else:
                if p == 1:
                    fp += 1
                else:
                    tn += 1
        return cls(tp, fp, fn, tn)


def confusion_metrics(counts: ConfusionCounts) -> dict[str, float]:
    """Accuracy, precision, recall, f1; zero-denominator ratios are 0."""
    if counts.total <= 0:
        raise ValueError("no scored instances")
    accuracy = (counts.tp + counts.tn) / counts.total
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if precision + recall > 0.0
        else 0.0
    )
    return {"accuracy": accuracy, "precision": precision, "recall": recall, "f1": f1}


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based AUC: P(score_pos > score_neg) with ties counting half.

    Computed from average ranks (Mann-Whitney U), identical to enumerating
    all positive-negative pairs.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("need at least one positive and one negative score")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=float)
    sorted_s = s[order]
    i = 0
    while i < len(sorted_s):
        j = i
        while j + 1 < len(sorted_s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[np.asarray(y) == 1]))
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def chronological_split(
    checkins: Sequence[CheckIn],
    ratio: float = DEFAULT_SPLIT_RATIO,
    min_checkins: int = DEFAULT_MIN_EVAL_CHECKINS,
) -> tuple[list[CheckIn], list[CheckIn]]:
    """Time-ordered split: first ceil(ratio * n) train, rest test.

    Timestamp ties keep input order (stable sort).  Users below the minimum
    are skipped by the caller via InsufficientDataError.
    """
    n = len(checkins)
    if n < min_checkins:
        raise InsufficientDataError(f"need {min_checkins} check-ins, got {n}")
    ordered = sorted(checkins, key=lambda c: c.epoch())
    # the epsilon keeps exact multiples (0.8 * 5) from ceiling one too high
    k = math.ceil(ratio * n - 1e-9)
    k = min(max(k, 1), n - 1)
    return ordered[:k], ordered[k:]


def kfold_indices(
    n: int, k: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled k-fold index pairs (train, test) over range(n)."""
    perm = rng.permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i in range(k):
        test = np.sort(folds[i])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != i]))
        if test.size and train.size:
            out.append((train, test))
    return out


@dataclass(frozen=True)
class ModelSpec:
    """A model kind plus the community-choosing strategy it runs under."""

    kind: str
    strategy: str = STRATEGY_NEAREST

    @property
    def model_id(self) -> str:
        if self.kind in (MODEL_FRIENDS, MODEL_USER, MODEL_PSMM):
            return self.kind
        return f"{self.kind}:{self.strategy}"


@dataclass
class ExperimentUser:
    """Everything needed to train and score one user.

    instance_checkins is the chronological window instances are built from;
    prior_checkins is the earlier history reserved for the user's own
    movement profile, which the mobility baseline may also train on.
    """

    user_id: str
    ctx: UserFeatureContext
    instance_checkins: list[CheckIn]
    prior_checkins: list[CheckIn] = field(default_factory=list)


@dataclass(frozen=True)
class UserModelResult:
    user_id: str
    model_id: str
    auc: float
    accuracy: float
    f1: float
    n_test: int


@dataclass
class EvaluationReport:
    results: list[UserModelResult]
    skipped_users: dict[str, int]
    instances_skipped: int
    n_users_total: int
    entropy_buckets: list[tuple[float, float, int, float]]
    entropy_auc_pearson: float | None
    bucket_model_id: str | None

    def model_ids(self) -> list[str]:
        return sorted({r.model_id for r in self.results})

    def results_for(self, model_id: str) -> list[UserModelResult]:
        return sorted(
            (r for r in self.results if r.model_id == model_id),
            key=lambda r: r.user_id,
        )

    def mean_metrics(self, model_id: str) -> dict[str, float]:
        rows = self.results_for(model_id)
        if not rows:
            return {}
        return {
            "auc": float(np.mean([r.auc for r in rows])),
            "accuracy": float(np.mean([r.accuracy for r in rows])),
            "f1": float(np.mean([r.f1 for r in rows])),
        }

    def stddev_metrics(self, model_id: str) -> dict[str, float]:
        rows = self.results_for(model_id)
        if not rows:
            return {}
        return {
            "auc": float(np.std([r.auc for r in rows])),
            "accuracy": float(np.std([r.accuracy for r in rows])),
            "f1": float(np.std([r.f1 for r in rows])),
        }

    def to_json_dict(self) -> dict:
        models = {}
        for mid in self.model_ids():
            rows = self.results_for(mid)
            models[mid] = {
                "mean": self.mean_metrics(mid),
                "stddev": self.stddev_metrics(mid),
                "n_users": len(rows),
            }
        return {
            "coverage": {
                "n_users_total": self.n_users_total,
                "n_users_evaluated": len({r.user_id for r in self.results}),
                "skipped_users": dict(sorted(self.skipped_users.items())),
                "instances_skipped": self.instances_skipped,
            },
            "models": models,
            "entropy_correlation": {
                "model": self.bucket_model_id,
                "pearson": self.entropy_auc_pearson,
                "buckets": [
                    {"lo": lo, "hi": hi, "n_users": n, "mean_auc": mean}
                    for lo, hi, n, mean in self.entropy_buckets
                ],
            },
            "per_user": [
                {
                    "user_id": r.user_id,
                    "model": r.model_id,
                    "auc": r.auc,
                    "accuracy": r.accuracy,
                    "f1": r.f1,
                    "n_test": r.n_test,
                }
                for r in sorted(self.results, key=lambda r: (r.model_id, r.user_id))
            ],
        }

    def summary_csv_rows(self) -> list[tuple[str, str, float, float, int]]:
        rows = []
        for mid in self.model_ids():
            mean = self.mean_metrics(mid)
            std = self.stddev_metrics(mid)
            n = len(self.results_for(mid))
            for metric in ("auc", "accuracy", "f1"):
                rows.append((mid, metric, mean[metric], std[metric], n))
        return rows

    def bucket_csv_rows(self) -> list[tuple[float, float, int, float]]:
        return list(self.entropy_buckets)


def _pair_indices(pair_ids: np.ndarray) -> np.ndarray:
    """Instance indices for check-in pair ids (each pair is pos, neg)."""
    return np.sort(np.concatenate([2 * pair_ids, 2 * pair_ids + 1]))


def bulk_feature_matrix(
    kind: str,
    strategy: str,
    ctx: UserFeatureContext,
    instances: Sequence[PredictionInstance],
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Vectorized twin of predict.feature_vector over a whole instance list.

    Produces the same rows as calling feature_vector per instance, except that
    community choice under the nearest strategy uses the bulk distance path,
    which can disagree with the scalar kernel only on exact metric ties, and
    the random strategy draws its choices as one batch.
    """
    n = len(instances)
    lats = np.array([it.point.lat for it in instances])
    lons = np.array([it.point.lon for it in instances])
    hours = np.array([it.hour for it in instances])
    wdays = np.array([it.weekday for it in instances])
    gh = np.asarray(ctx.global_histograms.by_hour, dtype=float)[hours]
    gd = np.asarray(ctx.global_histograms.by_day, dtype=float)[wdays]
    cap = ctx.distance_cap_m

    def prof_dist(profile: MovementProfile) -> np.ndarray:
        if profile.is_empty():
            return np.full(n, np.inf)
        return min_distances(lats, lons, profile)

    def user_block() -> np.ndarray:
        d = np.minimum(prof_dist(ctx.own_profile), cap)
        od = np.asarray(ctx.own_day_counts, dtype=float)[wdays]
        oh = np.asarray(ctx.own_hour_counts, dtype=float)[hours]
        return np.stack([d, od, oh], axis=1)

    if kind == MODEL_FRIENDS:
        d = np.minimum(prof_dist(ctx.friend_profile), cap)
        return np.stack([d, gh, gd], axis=1)
    if kind == MODEL_USER:
        return user_block()

    ncomm = len(ctx.community_profiles)
    dmat: np.ndarray | None = None
    if strategy == STRATEGY_NEAREST:
        dmat = np.stack([prof_dist(p) for p in ctx.community_profiles], axis=1)
        idx = np.argmin(dmat, axis=1)  # first index wins ties, like the scalar path
    elif strategy == STRATEGY_MAX_SIZE:
        best = max(range(ncomm), key=lambda i: (ctx.community_stats[i].size, -i))
        idx = np.full(n, best)
    elif strategy == STRATEGY_MAX_CON:
        best = max(range(ncomm), key=lambda i: (ctx.community_stats[i].connectivity, -i))
        idx = np.full(n, best)
    elif strategy == STRATEGY_RANDOM:
        if rng is None:
            raise ValueError("random strategy needs an rng")
        idx = rng.integers(0, ncomm, size=n)
    else:
        raise ValueError(f"unknown strategy: {strategy!r}")

    virtual = kind == MODEL_SAMPLE_FRIENDS
    profiles = ctx.virtual_profiles if virtual else ctx.community_profiles
    stats = ctx.virtual_stats if virtual else ctx.community_stats
    d = np.empty(n)
    if dmat is not None and not virtual:
        d = dmat[np.arange(n), idx]
    else:
        for i in sorted({int(v) for v in idx}):
            sel = idx == i
            col = prof_dist(profiles[i])
            d[sel] = col[sel]
    d = np.minimum(d, cap)
    sizes = np.array([s.size for s in stats], dtype=float)
    nfmas = np.array([s.n_fma for s in stats], dtype=float)
    totals = np.array([s.total_checkins for s in stats], dtype=float)
    cons = np.array([s.connectivity for s in stats], dtype=float)
    comm = np.stack([d, sizes[idx], nfmas[idx], totals[idx], cons[idx], gh, gd], axis=1)
    if kind in (MODEL_COMMUNITY, MODEL_SAMPLE_FRIENDS):
        return comm
    if kind == MODEL_USER_COMMUNITY:
        return np.concatenate([user_block(), comm], axis=1)
    raise ValueError(f"unknown model kind: {kind!r}")


def _entropy_buckets(
    points: list[tuple[float, float]], width: float
) -> tuple[list[tuple[float, float, int, float]], float | None]:
    by_bucket: dict[int, list[float]] = {}
    for h, a in points:
        by_bucket.setdefault(int(math.floor(h / width + 1e-9)), []).append(a)
    buckets = [
        (round(b * width, 10), round((b + 1) * width, 10), len(vals), float(np.mean(vals)))
        for b, vals in sorted(by_bucket.items())
    ]
    if len(buckets) < 2:
        return buckets, None
    mids = [0.5 * (lo + hi) for lo, hi, _, _ in buckets]
    means = [m for _, _, _, m in buckets]
    try:
        corr = pearson_correlation(mids, means)
    except ValueError:
        corr = None
    return buckets, corr


def run_experiment(
    users: Sequence[ExperimentUser],
    models: Sequence[ModelSpec],
    city: CityScope,
    seed: int,
    entropy_by_user: Mapping[str, float] | None = None,
    ratio: float = DEFAULT_SPLIT_RATIO,
    min_checkins: int = DEFAULT_MIN_EVAL_CHECKINS,
    protocol: str = PROTOCOL_CHRONOLOGICAL,
    n_folds: int = DEFAULT_KFOLDS,
    psmm_radius_m: float = DEFAULT_PSMM_RADIUS_M,
    cell_deg: float = DEFAULT_CELL_DEG,
    bucket_width: float = DEFAULT_BUCKET_WIDTH,
    bucket_model_id: str | None = None,
) -> EvaluationReport:
    """Train and score every requested model for every usable user.

    The negative sample, fold assignment, and any random strategy draws come
    from per-user seeded streams, so the report is identical for identical
    (seed, config) regardless of user ordering or model list composition.
    """
    if protocol not in (PROTOCOL_CHRONOLOGICAL, PROTOCOL_KFOLD):
        raise ValueError(f"unknown protocol: {protocol!r}")
    results: list[UserModelResult] = []
    skipped: dict[str, int] = {}
    instances_skipped = 0

    def skip(reason: str) -> None:
        skipped[reason] = skipped.get(reason, 0) + 1

    for eu in users:
        try:
            train_c, test_c = chronological_split(eu.instance_checkins, ratio, min_checkins)
        except InsufficientDataError:
            skip(SKIP_TOO_FEW)
            continue
        if not eu.ctx.community_profiles or all(
            p.is_empty() for p in eu.ctx.community_profiles
        ):
            skip(SKIP_NO_COMMUNITY)
            continue
        base = train_c + test_c
        rng_neg = user_rng(seed, eu.user_id, PURPOSE_NEGATIVES)
        instances = build_instances(eu.user_id, base, city, rng_neg, cell_deg)
        labels_all = np.array([it.label for it in instances])
        if protocol == PROTOCOL_KFOLD:
            rng_fold = user_rng(seed, eu.user_id, PURPOSE_KFOLD)
            folds = kfold_indices(len(base), n_folds, rng_fold)
        else:
            folds = [
                (np.arange(len(train_c)), np.arange(len(train_c), len(base)))
            ]
        for spec in models:
            fold_metrics: list[tuple[float, float, float, int]] = []
            failed_reason: str | None = None
            if spec.kind == MODEL_PSMM:
                for fi, (tr, te) in enumerate(folds):
                    train_ck = list(eu.prior_checkins) + [base[i] for i in tr]
                    try:
                        model = psmm_fit(
                            train_ck, seed=[seed, stable_digest(eu.user_id), PURPOSE_PSMM, fi]
                        )
                    except InsufficientDataError:
                        failed_reason = SKIP_PSMM_TOO_FEW
                        break
                    te_inst = _pair_indices(te)
                    scores = []
                    preds = []
                    for i in te_inst:
                        it = instances[i]
                        pred = psmm_predict(model, it.weekday, it.hour)
                        d = haversine(pred, it.point)
                        scores.append(-d)
                        preds.append(1 if d <= psmm_radius_m else 0)
                    y_te = labels_all[te_inst]
                    try:
                        fold_auc = auc(scores, y_te)
                    except UndefinedAucError:
                        failed_reason = SKIP_UNDEFINED_AUC
                        break
                    m = confusion_metrics(ConfusionCounts.from_predictions(preds, y_te))
                    fold_metrics.append((fold_auc, m["accuracy"], m["f1"], len(te_inst)))
            else:
                rng_strat = (
                    user_rng(seed, eu.user_id, PURPOSE_STRATEGY)
                    if spec.strategy == STRATEGY_RANDOM
                    else None
                )
                feats = bulk_feature_matrix(spec.kind, spec.strategy, eu.ctx, instances, rng_strat)
                names = feature_names(spec.kind)
                for tr, te in folds:
                    tr_inst = _pair_indices(tr)
                    te_inst = _pair_indices(te)
                    try:
                        model = train_logistic(
                            feats[tr_inst], labels_all[tr_inst], names, track_loss=False
                        )
                    except DegenerateTrainingError:
                        failed_reason = SKIP_DEGENERATE
                        break
                    scores = model.predict_proba(feats[te_inst])
                    preds = (scores >= 0.5).astype(int)
                    y_te = labels_all[te_inst]
                    try:
                        fold_auc = auc(scores, y_te)
                    except UndefinedAucError:
                        failed_reason = SKIP_UNDEFINED_AUC
                        break
                    m = confusion_metrics(ConfusionCounts.from_predictions(preds, y_te))
                    fold_metrics.append((fold_auc, m["accuracy"], m["f1"], len(te_inst)))
            if failed_reason is not None or not fold_metrics:
                skip(failed_reason or SKIP_TOO_FEW)
                continue
            results.append(
                UserModelResult(
                    eu.user_id,
                    spec.model_id,
                    float(np.mean([f[0] for f in fold_metrics])),
                    float(np.mean([f[1] for f in fold_metrics])),
                    float(np.mean([f[2] for f in fold_metrics])),
                    int(sum(f[3] for f in fold_metrics)),
                )
            )

    if bucket_model_id is None:
        community_like = [s.model_id for s in models if s.kind == MODEL_COMMUNITY]
        nearest = [
            s.model_id
            for s in models
            if s.kind == MODEL_COMMUNITY and s.strategy == STRATEGY_NEAREST
        ]
        if nearest:
            bucket_model_id = nearest[0]
        elif community_like:
            bucket_model_id = community_like[0]
        elif models:
            bucket_model_id = models[0].model_id
    buckets: list[tuple[float, float, int, float]] = []
    corr: float | None = None
    if bucket_model_id is not None and entropy_by_user:
        points = [
            (entropy_by_user[r.user_id], r.auc)
            for r in results
            if r.model_id == bucket_model_id and r.user_id in entropy_by_user
        ]
        buckets, corr = _entropy_buckets(points, bucket_width)
    return EvaluationReport(
        results,
        skipped,
        instances_skipped,
        len(users),
        buckets,
        corr,
        bucket_model_id,
    )
