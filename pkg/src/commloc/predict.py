"""Per-user location prediction: feature builders, logistic models, mobility baseline.

The task is balanced binary classification: for each check-in (a visited grid
cell) one negative cell is sampled uniformly from the city, and a per-user
model scores cells by visit probability.  Feature families differ by what
social context they see: the user's own history, all friends pooled, one
community (chosen by a pluggable strategy), or a size-matched random sample of
friends standing in for the community.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .communities import CommunityStats
from .corpus import CheckIn, CityScope, TimeHistograms
from .geo import (
    DEFAULT_CELL_DEG,
    GeoPoint,
    GridCell,
    MovementProfile,
    bbox_diagonal_m,
    cell_center,
    grid_cell,
    haversine,
)
from .influence import influential_community, location_community_distance

MODEL_COMMUNITY = "community"
MODEL_SAMPLE_FRIENDS = "sample-friends"
MODEL_FRIENDS = "friends"
MODEL_USER = "user"
MODEL_USER_COMMUNITY = "user-community"
MODEL_PSMM = "psmm"
LOGISTIC_MODELS = (
    MODEL_COMMUNITY,
    MODEL_SAMPLE_FRIENDS,
    MODEL_FRIENDS,
    MODEL_USER,
    MODEL_USER_COMMUNITY,
)

STRATEGY_NEAREST = "nearest"
STRATEGY_MAX_SIZE = "max-size"
STRATEGY_MAX_CON = "max-con"
STRATEGY_RANDOM = "random"
STRATEGIES = (STRATEGY_NEAREST, STRATEGY_MAX_SIZE, STRATEGY_MAX_CON, STRATEGY_RANDOM)

COMMUNITY_FEATURES = (
    "community_distance_m",
    "community_size",
    "community_n_fma",
    "community_checkins",
    "community_connectivity",
    "global_hour_checkins",
    "global_day_checkins",
)
FRIENDS_FEATURES = ("friends_distance_m", "global_hour_checkins", "global_day_checkins")
USER_FEATURES = ("user_distance_m", "user_day_checkins", "user_hour_checkins")

DEFAULT_LEARNING_RATE = 0.1
DEFAULT_L2 = 1e-4
DEFAULT_EPOCHS = 500
DEFAULT_GRAD_TOL = 1e-6

PSMM_STATES = 2
PSMM_MIN_CHECKINS = 20
PSMM_COV_REG = 1e-6
PSMM_MAX_ITER = 200
PSMM_LL_TOL = 1e-6
HOURS_PER_WEEK = 168


class DegenerateTrainingError(Exception):
    """Raised when a training set has only one class."""


class InsufficientDataError(Exception):
    pass


@dataclass(frozen=True)
class PredictionInstance:
    """One candidate (user, cell, time) with its ground-truth visit label."""

    user_id: str
    cell: GridCell
    point: GeoPoint  # representative location: the check-in, or the cell center
    hour: int
    weekday: int
    label: int


def sample_negative(
    positive: PredictionInstance,
    city: CityScope,
    rng: np.random.Generator,
    cell_deg: float = DEFAULT_CELL_DEG,
) -> PredictionInstance:
    """A non-visited instance: a uniform random city cell at the same time.

    The sampled cell always differs from the positive's cell; the instance's
    representative point is the cell center.
    """
    lat_min, lat_max, lon_min, lon_max = city.bbox
    i_min = math.floor(lat_min / cell_deg)
    i_max = math.floor((lat_max - 1e-12) / cell_deg)
    j_min = math.floor(lon_min / cell_deg)
    j_max = math.floor((lon_max - 1e-12) / cell_deg)
    while True:
        cell = GridCell(int(rng.integers(i_min, i_max + 1)), int(rng.integers(j_min, j_max + 1)))
        if cell != positive.cell:
            break
    return PredictionInstance(
        positive.user_id,
        cell,
        cell_center(cell, cell_deg),
        positive.hour,
        positive.weekday,
        0,
    )


def build_instances(
    user_id: str,
    checkins: Sequence[CheckIn],
    city: CityScope,
    rng: np.random.Generator,
    cell_deg: float = DEFAULT_CELL_DEG,
) -> list[PredictionInstance]:
    """Positive instances from check-ins, each followed by one sampled negative."""
    out: list[PredictionInstance] = []
    for c in checkins:
        pos = PredictionInstance(
            user_id,
            grid_cell(GeoPoint(c.lat, c.lon), cell_deg),
            GeoPoint(c.lat, c.lon),
            c.hour,
            c.weekday,
            1,
        )
        out.append(pos)
        out.append(sample_negative(pos, city, rng, cell_deg))
    return out


@dataclass
class UserFeatureContext:
    """Everything the feature builders may look at for one user.

    Distances to empty profiles are capped at ``distance_cap_m`` (the city
    bbox diagonal) so the feature stays finite.
    """

    user_id: str
    community_profiles: Sequence[MovementProfile]
    community_stats: Sequence[CommunityStats]
    virtual_profiles: Sequence[MovementProfile]
    virtual_stats: Sequence[CommunityStats]
    friend_profile: MovementProfile
    own_profile: MovementProfile
    own_hour_counts: Sequence[int]
    own_day_counts: Sequence[int]
    global_histograms: TimeHistograms
    distance_cap_m: float

    @classmethod
    def empty_cap(cls, city: CityScope) -> float:
        return bbox_diagonal_m(city.bbox)


def _capped_distance(loc: GeoPoint, profile: MovementProfile, cap: float) -> float:
    d = location_community_distance(loc, profile)
    return min(d, cap)


def choose_community(
    strategy: str,
    ctx: UserFeatureContext,
    point: GeoPoint,
    rng: np.random.Generator | None = None,
) -> int:
    """Pick the community whose features describe a candidate location.

    nearest: smallest distance from the location to the community's areas
    (communities with empty profiles skipped; ties to the lowest index).
    max-size / max-con: largest community / highest internal connectivity.
    random: uniform over all communities (needs ``rng``).
    """
    n = len(ctx.community_profiles)
    if n == 0:
        raise ValueError("user has no communities")
    if strategy == STRATEGY_NEAREST:
        # same assignment rule as the influence stage, by construction
        return influential_community(ctx.user_id, point, ctx.community_profiles).influential_index
    if strategy == STRATEGY_MAX_SIZE:
        return max(range(n), key=lambda i: (ctx.community_stats[i].size, -i))
    if strategy == STRATEGY_MAX_CON:
        return max(range(n), key=lambda i: (ctx.community_stats[i].connectivity, -i))
    if strategy == STRATEGY_RANDOM:
        if rng is None:
            raise ValueError("random strategy needs an rng")
        return int(rng.integers(0, n))
    raise ValueError(f"unknown strategy: {strategy!r}")


def community_features(
    ctx: UserFeatureContext,
    inst: PredictionInstance,
    community_idx: int,
    virtual: bool = False,
) -> np.ndarray:
    """Feature vector describing a candidate location through one community."""
    profiles = ctx.virtual_profiles if virtual else ctx.community_profiles
    stats = ctx.virtual_stats if virtual else ctx.community_stats
    prof = profiles[community_idx]
    st = stats[community_idx]
    return np.array(
        [
            _capped_distance(inst.point, prof, ctx.distance_cap_m),
            float(st.size),
            float(st.n_fma),
            float(st.total_checkins),
            float(st.connectivity),
            float(ctx.global_histograms.by_hour[inst.hour]),
            float(ctx.global_histograms.by_day[inst.weekday]),
        ]
    )


def friends_features(ctx: UserFeatureContext, inst: PredictionInstance) -> np.ndarray:
    return np.array(
        [
            _capped_distance(inst.point, ctx.friend_profile, ctx.distance_cap_m),
            float(ctx.global_histograms.by_hour[inst.hour]),
            float(ctx.global_histograms.by_day[inst.weekday]),
        ]
    )


def user_features(ctx: UserFeatureContext, inst: PredictionInstance) -> np.ndarray:
    return np.array(
        [
            _capped_distance(inst.point, ctx.own_profile, ctx.distance_cap_m),
            float(ctx.own_day_counts[inst.weekday]),
            float(ctx.own_hour_counts[inst.hour]),
        ]
    )


def feature_names(kind: str) -> tuple[str, ...]:
    if kind in (MODEL_COMMUNITY, MODEL_SAMPLE_FRIENDS):
        return COMMUNITY_FEATURES
    if kind == MODEL_FRIENDS:
        return FRIENDS_FEATURES
    if kind == MODEL_USER:
        return USER_FEATURES
    if kind == MODEL_USER_COMMUNITY:
        return USER_FEATURES + COMMUNITY_FEATURES
    raise ValueError(f"unknown model kind: {kind!r}")


def feature_vector(
    kind: str,
    ctx: UserFeatureContext,
    inst: PredictionInstance,
    strategy: str = STRATEGY_NEAREST,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Features of one instance under one model kind.

    Community-schema kinds first choose a community per the strategy; the
    sample-friends kind swaps in the size-matched virtual counterpart of the
    chosen community.
    """
    if kind == MODEL_FRIENDS:
        return friends_features(ctx, inst)
    if kind == MODEL_USER:
        return user_features(ctx, inst)
    idx = choose_community(strategy, ctx, inst.point, rng)
    if kind == MODEL_COMMUNITY:
        return community_features(ctx, inst, idx)
    if kind == MODEL_SAMPLE_FRIENDS:
        return community_features(ctx, inst, idx, virtual=True)
    if kind == MODEL_USER_COMMUNITY:
        return np.concatenate([user_features(ctx, inst), community_features(ctx, inst, idx)])
    raise ValueError(f"unknown model kind: {kind!r}")


# ---------------------------------------------------------------------------
# logistic regression


def _nll_loss(x1: np.ndarray, y: np.ndarray, w: np.ndarray, l2: float) -> float:
    """Mean negative log-likelihood + L2 on the non-bias weights.

    x1 carries a leading all-ones bias column; w[0] is the bias.
    """
    z = x1 @ w
    nll = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return nll + 0.5 * l2 * float(w[1:] @ w[1:])


def _nll_grad(x1: np.ndarray, y: np.ndarray, w: np.ndarray, l2: float) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(-(x1 @ w)))
    grad = x1.T @ (p - y) / len(y)
    grad[1:] += l2 * w[1:]
    return grad


@dataclass
class LogisticModel:
    feature_names: tuple[str, ...]
    weights: np.ndarray  # per-feature weights in standardized space
    bias: float
    means: np.ndarray
    stds: np.ndarray
    loss_history: list[float] = field(default_factory=list, repr=False)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.means) / self.stds

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        z = self.bias + self.standardize(x) @ self.weights
        return 1.0 / (1.0 + np.exp(-z))

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "standardization": {
                "means": [float(v) for v in self.means],
                "stds": [float(v) for v in self.stds],
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(
            tuple(d["feature_names"]),
            np.array(d["weights"], dtype=float),
            float(d["bias"]),
            np.array(d["standardization"]["means"], dtype=float),
            np.array(d["standardization"]["stds"], dtype=float),
        )


def train_logistic(
    x: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    learning_rate: float = DEFAULT_LEARNING_RATE,
    l2: float = DEFAULT_L2,
    epochs: int = DEFAULT_EPOCHS,
    grad_tol: float = DEFAULT_GRAD_TOL,
    track_loss: bool = True,
) -> LogisticModel:
    """Full-batch gradient descent on L2-regularized logistic loss.

    Features are standardized with training statistics (constant columns get
    unit scale), weights start at zero, and training stops after ``epochs``
    steps or when the gradient norm drops below ``grad_tol``.  The recorded
    loss history is non-increasing for the default step size; tracking it
    costs about a third of the run time, so batch callers turn it off.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError("x must be (n, d) with matching y")
    if len(np.unique(y)) < 2:
        raise DegenerateTrainingError("training labels are all one class")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds = np.where(stds < 1e-12, 1.0, stds)
    xs = (x - means) / stds
    x1 = np.concatenate([np.ones((len(xs), 1)), xs], axis=1)
    w = np.zeros(x1.shape[1])
    history = [_nll_loss(x1, y, w, l2)] if track_loss else []
    for _ in range(epochs):
        grad = _nll_grad(x1, y, w, l2)
        if float(np.linalg.norm(grad)) < grad_tol:
            break
        w = w - learning_rate * grad
        if track_loss:
            history.append(_nll_loss(x1, y, w, l2))
    return LogisticModel(tuple(names), w[1:].copy(), float(w[0]), means, stds, history)


# ---------------------------------------------------------------------------
# mobility-state mixture baseline


@dataclass
class PsmmModel:
    """Two-state spatial Gaussian mixture with hour-of-week state weights.

    means[k] is the (lat, lon) center of state k, covs[k] its 2x2 covariance
    in degrees^2, and hour_weights[h] the smoothed probability of each state
    in hour-of-week bin h (0 = Monday 00:00 local).
    """

    means: np.ndarray  # (2, 2)
    covs: np.ndarray  # (2, 2, 2)
    hour_weights: np.ndarray  # (168, 2)
    loglik_history: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "means": [[float(v) for v in m] for m in self.means],
            "covariances": [[[float(v) for v in row] for row in c] for c in self.covs],
            "hour_weights": [[float(v) for v in w] for w in self.hour_weights],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PsmmModel":
        return cls(
            np.array(d["means"], dtype=float),
            np.array(d["covariances"], dtype=float),
            np.array(d["hour_weights"], dtype=float),
        )


def hour_of_week(weekday: int, hour: int) -> int:
    return weekday * 24 + hour


def _log_gauss2(pts: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
    d = pts - mean
    quad = inv[0, 0] * d[:, 0] ** 2 + 2.0 * inv[0, 1] * d[:, 0] * d[:, 1] + inv[1, 1] * d[:, 1] ** 2
    return -math.log(2.0 * math.pi) - 0.5 * math.log(det) - 0.5 * quad


def _kmeans2(pts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    idx = rng.choice(len(pts), size=2, replace=False)
    centers = pts[idx].copy()
    for _ in range(25):
        d0 = np.sum((pts - centers[0]) ** 2, axis=1)
        d1 = np.sum((pts - centers[1]) ** 2, axis=1)
        lab = (d1 < d0).astype(int)
        moved = 0.0
        for k in (0, 1):
            sel = pts[lab == k]
            if len(sel):
                new = sel.mean(axis=0)
                moved += float(np.sum(np.abs(new - centers[k])))
                centers[k] = new
        if moved == 0.0:
            break
    return centers


def psmm_fit(
    checkins: Sequence[CheckIn],
    seed: int | Sequence[int] = 0,
    min_checkins: int = PSMM_MIN_CHECKINS,
    cov_reg: float = PSMM_COV_REG,
    max_iter: int = PSMM_MAX_ITER,
    ll_tol: float = PSMM_LL_TOL,
) -> PsmmModel:
    """Fit the two-state mobility mixture by EM.

    Means are seeded by a 2-means pass, covariances are regularized by
    ``cov_reg`` * I every iteration, and EM stops when the mean log-likelihood
    improves by less than ``ll_tol`` or after ``max_iter`` iterations.  The
    per-hour state weights are responsibility averages with add-one smoothing,
    so they sum to one in every hour bin.
    """
    if len(checkins) < min_checkins:
        raise InsufficientDataError(
            f"need at least {min_checkins} check-ins, got {len(checkins)}"
        )
    pts = np.array([[c.lat, c.lon] for c in checkins], dtype=float)
    hows = np.array([hour_of_week(c.weekday, c.hour) for c in checkins])
    rng = np.random.default_rng(seed)
    means = _kmeans2(pts, rng)
    covs = np.stack([np.cov(pts.T) if len(pts) > 1 else np.zeros((2, 2))] * 2)
    covs = covs + cov_reg * np.eye(2)
    pis = np.array([0.5, 0.5])
    history: list[float] = []
    resp = np.full((len(pts), 2), 0.5)
    for _ in range(max_iter):
        logp = np.stack(
            [np.log(pis[k]) + _log_gauss2(pts, means[k], covs[k]) for k in (0, 1)],
            axis=1,
        )
        norm = np.logaddexp(logp[:, 0], logp[:, 1])
        ll = float(np.mean(norm))
        resp = np.exp(logp - norm[:, None])
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < ll_tol:
            break
        for k in (0, 1):
            r = resp[:, k]
            tot = float(r.sum())
            if tot <= 0.0:
                continue
            means[k] = (r[:, None] * pts).sum(axis=0) / tot
            d = pts - means[k]
            covs[k] = (r[:, None, None] * (d[:, :, None] * d[:, None, :])).sum(axis=0) / tot
            covs[k] += cov_reg * np.eye(2)
        pis = resp.mean(axis=0)
        pis = np.clip(pis, 1e-12, None)
        pis = pis / pis.sum()
    weights = np.empty((HOURS_PER_WEEK, 2))
    for h in range(HOURS_PER_WEEK):
        sel = hows == h
        cnt = int(sel.sum())
        weights[h, 0] = (resp[sel, 0].sum() + 1.0) / (cnt + 2.0)
        weights[h, 1] = (resp[sel, 1].sum() + 1.0) / (cnt + 2.0)
    return PsmmModel(means, covs, weights, history)


def psmm_predict(model: PsmmModel, weekday: int, hour: int) -> GeoPoint:
    """Predicted location: the mean of the likelier state for that hour bin
    (ties go to state 0)."""
    h = hour_of_week(weekday, hour)
    state = 1 if model.hour_weights[h, 1] > model.hour_weights[h, 0] else 0
    return GeoPoint(float(model.means[state, 0]), float(model.means[state, 1]))


def psmm_correct(model: PsmmModel, inst: PredictionInstance, radius_m: float = 1000.0) -> bool:
    """Whether the model's prediction marks this instance as visited."""
    pred = psmm_predict(model, inst.weekday, inst.hour)
    return haversine(pred, inst.point) <= radius_m
