"""Instance sampling, feature builders, logistic training, and mixture baseline tests."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from commloc.communities import CommunityStats
from commloc.corpus import CityScope, TimeHistograms
from commloc.evaluation import bulk_feature_matrix
from commloc.geo import GeoPoint, MovementProfile, bbox_diagonal_m, grid_cell, haversine
from commloc.influence import influential_community
from commloc.predict import (
    COMMUNITY_FEATURES,
    DegenerateTrainingError,
    FRIENDS_FEATURES,
    InsufficientDataError,
    LOGISTIC_MODELS,
    LogisticModel,
    MODEL_COMMUNITY,
    MODEL_FRIENDS,
    MODEL_SAMPLE_FRIENDS,
    MODEL_USER,
    MODEL_USER_COMMUNITY,
    PredictionInstance,
    PsmmModel,
    STRATEGY_MAX_CON,
    STRATEGY_MAX_SIZE,
    STRATEGY_NEAREST,
    STRATEGY_RANDOM,
    USER_FEATURES,
    build_instances,
    choose_community,
    community_features,
    feature_names,
    feature_vector,
    friends_features,
    hour_of_week,
    psmm_correct,
    psmm_fit,
    psmm_predict,
    sample_negative,
    train_logistic,
    user_features,
)
from conftest import mk_checkin
from oracles import finite_diff_grad, logistic_loss_reference

DEG_PER_M_LAT = 1.0 / 111_194.9
NYC = CityScope("nyc", (40.55, 40.85, -74.05, -73.75), "America/New_York")
SITE_A = GeoPoint(40.70, -74.00)
SITE_B = GeoPoint(40.70 + 5000.0 * DEG_PER_M_LAT, -74.00)


def prof(*points) -> MovementProfile:
    return MovementProfile("community", list(points), [1] * len(points), list(range(len(points))))


def make_ctx(**overrides):
    from commloc.predict import UserFeatureContext

    base = dict(
        user_id="u",
        community_profiles=[prof(SITE_A), prof(SITE_B)],
        community_stats=[
            CommunityStats(4, 5, 0.83, 120, 2),
            CommunityStats(9, 10, 0.27, 300, 3),
        ],
        virtual_profiles=[prof(SITE_B), prof(SITE_A)],
        virtual_stats=[
            CommunityStats(4, 0, 0.0, 80, 1),
            CommunityStats(9, 0, 0.0, 210, 4),
        ],
        friend_profile=prof(SITE_A, SITE_B),
        own_profile=prof(SITE_A),
        own_hour_counts=[0] * 24,
        own_day_counts=[0] * 7,
        global_histograms=TimeHistograms(),
        distance_cap_m=bbox_diagonal_m(NYC.bbox),
    )
    base["own_hour_counts"][12] = 11
    base["own_day_counts"][0] = 5
    base["global_histograms"].by_hour[12] = 7
    base["global_histograms"].by_day[0] = 3
    base.update(overrides)
    return UserFeatureContext(**base)


def inst_at(point: GeoPoint, hour=12, weekday=0, label=1) -> PredictionInstance:
    return PredictionInstance("u", grid_cell(point), point, hour, weekday, label)


class TestSampleNegative:
    def test_never_the_positive_cell(self):
        # two-cell city: the only legal negative is the other cell
        tiny = CityScope("tiny", (0.0, 0.002, 0.0, 0.001), "UTC")
        pos = inst_at(GeoPoint(0.0005, 0.0005))
        rng = np.random.default_rng(0)
        for _ in range(50):
            neg = sample_negative(pos, tiny, rng)
            assert neg.cell != pos.cell
            assert neg.cell == grid_cell(GeoPoint(0.0015, 0.0005))

    def test_negative_inside_city_bbox(self):
        rng = np.random.default_rng(1)
        pos = inst_at(SITE_A)
        lat_min, lat_max, lon_min, lon_max = NYC.bbox
        for _ in range(300):
            neg = sample_negative(pos, NYC, rng)
            assert lat_min <= neg.point.lat <= lat_max
            assert lon_min <= neg.point.lon <= lon_max

    def test_negative_copies_time_and_user(self):
        neg = sample_negative(inst_at(SITE_A, hour=9, weekday=4), NYC, np.random.default_rng(2))
        assert (neg.user_id, neg.hour, neg.weekday, neg.label) == ("u", 9, 4, 0)

    def test_deterministic_for_fixed_seed(self):
        pos = inst_at(SITE_A)
        a = [sample_negative(pos, NYC, np.random.default_rng(7)) for _ in range(10)]
        b = [sample_negative(pos, NYC, np.random.default_rng(7)) for _ in range(10)]
        assert a == b


class TestBuildInstances:
    def test_alternating_balanced(self):
        cks = [mk_checkin("u", 40.70 + 0.001 * i, -74.0, minutes=i) for i in range(6)]
        out = build_instances("u", cks, NYC, np.random.default_rng(3))
        assert len(out) == 12
        assert [it.label for it in out] == [1, 0] * 6

    def test_positive_matches_checkin(self):
        cks = [mk_checkin("u", 40.71, -73.99, hour=15, weekday=2)]
        out = build_instances("u", cks, NYC, np.random.default_rng(3))
        pos = out[0]
        assert pos.point == GeoPoint(40.71, -73.99)
        assert (pos.hour, pos.weekday) == (15, 2)
        assert pos.cell == grid_cell(pos.point)


class TestFeatureBuilders:
    def test_community_vector_exact(self):
        ctx = make_ctx()
        got = community_features(ctx, inst_at(SITE_A), 0)
        np.testing.assert_array_equal(got, [0.0, 4.0, 2.0, 120.0, 0.83, 7.0, 3.0])

    def test_virtual_flag_switches_profile_and_stats(self):
        ctx = make_ctx()
        got = community_features(ctx, inst_at(SITE_A), 0, virtual=True)
        # virtual counterpart of community 0 sits at SITE_B
        assert got[0] == pytest.approx(haversine(SITE_A, SITE_B), rel=1e-12)
        np.testing.assert_array_equal(got[1:], [4.0, 1.0, 80.0, 0.0, 7.0, 3.0])

    def test_friends_vector(self):
        got = friends_features(make_ctx(), inst_at(SITE_A))
        np.testing.assert_array_equal(got, [0.0, 7.0, 3.0])

    def test_user_vector_day_then_hour(self):
        got = user_features(make_ctx(), inst_at(SITE_A))
        np.testing.assert_array_equal(got, [0.0, 5.0, 11.0])

    def test_empty_profile_distance_capped_at_bbox_diagonal(self):
        ctx = make_ctx(own_profile=MovementProfile("user"))
        got = user_features(ctx, inst_at(SITE_A))
        assert got[0] == bbox_diagonal_m(NYC.bbox)

    def test_feature_name_lengths(self):
        assert len(COMMUNITY_FEATURES) == 7
        assert len(FRIENDS_FEATURES) == 3
        assert len(USER_FEATURES) == 3
        assert feature_names("community") == COMMUNITY_FEATURES
        assert feature_names("sample-friends") == COMMUNITY_FEATURES
        assert feature_names("user-community") == USER_FEATURES + COMMUNITY_FEATURES
        with pytest.raises(ValueError):
            feature_names("psmm")

    def test_vector_lengths_match_names(self):
        ctx = make_ctx()
        it = inst_at(SITE_A)
        for kind in LOGISTIC_MODELS:
            vec = feature_vector(kind, ctx, it)
            assert len(vec) == len(feature_names(kind))

    def test_user_community_is_concatenation(self):
        ctx = make_ctx()
        it = inst_at(SITE_A)
        got = feature_vector(MODEL_USER_COMMUNITY, ctx, it)
        want = np.concatenate(
            [user_features(ctx, it), community_features(ctx, it, 0)]
        )
        np.testing.assert_array_equal(got, want)

    def test_community_beats_pooled_friends_on_distance(self):
        # the friend profile pools both sites, so its nearest area is still
        # SITE_A; make it a single midpoint area to expose the mechanism
        mid = GeoPoint((SITE_A.lat + SITE_B.lat) / 2.0, -74.00)
        ctx = make_ctx(friend_profile=prof(mid))
        comm = community_features(ctx, inst_at(SITE_A), 0)[0]
        frnd = friends_features(ctx, inst_at(SITE_A))[0]
        assert comm == 0.0
        assert frnd == pytest.approx(2500.0, rel=1e-3)
        assert comm < frnd


class TestChooseCommunity:
    def test_single_community_all_strategies(self):
        ctx = make_ctx(
            community_profiles=[prof(SITE_A)],
            community_stats=[CommunityStats(4, 5, 0.83, 120, 2)],
        )
        rng = np.random.default_rng(0)
        for strategy in (STRATEGY_NEAREST, STRATEGY_MAX_SIZE, STRATEGY_MAX_CON, STRATEGY_RANDOM):
            assert choose_community(strategy, ctx, SITE_B, rng) == 0

    def test_nearest_tracks_location(self):
        ctx = make_ctx()
        assert choose_community(STRATEGY_NEAREST, ctx, SITE_A) == 0
        assert choose_community(STRATEGY_NEAREST, ctx, SITE_B) == 1

    def test_nearest_matches_influence_stage(self):
        ctx = make_ctx()
        rng = np.random.default_rng(4)
        for _ in range(20):
            p = GeoPoint(40.70 + float(rng.normal(0, 0.02)), -74.0 + float(rng.normal(0, 0.02)))
            got = choose_community(STRATEGY_NEAREST, ctx, p)
            assert got == influential_community("u", p, ctx.community_profiles).influential_index

    def test_max_size_picks_largest(self):
        assert choose_community(STRATEGY_MAX_SIZE, make_ctx(), SITE_A) == 1

    def test_max_con_picks_densest(self):
        assert choose_community(STRATEGY_MAX_CON, make_ctx(), SITE_B) == 0

    def test_random_requires_rng(self):
        with pytest.raises(ValueError):
            choose_community(STRATEGY_RANDOM, make_ctx(), SITE_A)

    def test_random_is_uniform_over_communities(self):
        rng = np.random.default_rng(5)
        picks = {choose_community(STRATEGY_RANDOM, make_ctx(), SITE_A, rng) for _ in range(60)}
        assert picks == {0, 1}

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            choose_community("best", make_ctx(), SITE_A)

    def test_no_communities(self):
        ctx = make_ctx(community_profiles=[], community_stats=[])
        with pytest.raises(ValueError):
            choose_community(STRATEGY_NEAREST, ctx, SITE_A)


def _toy_training_set(rng, n=80, d=3):
    x = rng.normal(size=(n, d))
    w_true = rng.normal(size=d)
    y = (x @ w_true + 0.3 * rng.normal(size=n) > 0).astype(float)
    if y.min() == y.max():  # keep both classes present
        y[0] = 1.0 - y[0]
    return x, y


class TestTrainLogistic:
    def test_gradient_matches_finite_differences(self):
        from commloc.predict import _nll_grad

        rng = np.random.default_rng(11)
        x, y = _toy_training_set(rng)
        x1 = np.concatenate([np.ones((len(x), 1)), x], axis=1)
        l2 = 1e-3
        for _ in range(5):
            w = rng.normal(scale=0.5, size=x1.shape[1])
            got = _nll_grad(x1, y, w, l2)
            want = finite_diff_grad(lambda v: logistic_loss_reference(x1, y, v, l2), w)
            rel = np.linalg.norm(got - want) / (np.linalg.norm(want) + 1e-12)
            assert rel < 1e-5

    def test_loss_history_non_increasing(self):
        rng = np.random.default_rng(12)
        x, y = _toy_training_set(rng)
        model = train_logistic(x, y, [f"f{i}" for i in range(x.shape[1])])
        h = model.loss_history
        assert len(h) > 2
        assert all(h[i + 1] <= h[i] + 1e-9 for i in range(len(h) - 1))

    def test_separable_data_reaches_full_accuracy(self):
        x = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])
        y = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        model = train_logistic(x, y, ["f0"])
        pred = (model.predict_proba(x) > 0.5).astype(float)
        np.testing.assert_array_equal(pred, y)

    def test_zero_weight_model_predicts_half(self):
        model = LogisticModel(("f0",), np.zeros(1), 0.0, np.zeros(1), np.ones(1))
        np.testing.assert_array_equal(model.predict_proba(np.array([[3.0], [-9.0]])), [0.5, 0.5])

    def test_single_class_labels_raise(self):
        x = np.ones((10, 2))
        with pytest.raises(DegenerateTrainingError):
            train_logistic(x, np.ones(10), ["a", "b"])

    def test_retraining_is_bit_identical(self):
        rng = np.random.default_rng(13)
        x, y = _toy_training_set(rng)
        m1 = train_logistic(x, y, ["a", "b", "c"])
        m2 = train_logistic(x, y, ["a", "b", "c"])
        assert np.array_equal(m1.weights, m2.weights)
        assert m1.bias == m2.bias

    def test_standardization_from_training_stats(self):
        rng = np.random.default_rng(14)
        x, y = _toy_training_set(rng, d=2)
        x = np.concatenate([x, np.full((len(x), 1), 4.2)], axis=1)  # constant column
        model = train_logistic(x, y, ["a", "b", "c"])
        np.testing.assert_allclose(model.means, x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(model.stds[:2], x.std(axis=0)[:2], rtol=1e-12)
        assert model.stds[2] == 1.0

    def test_serialization_roundtrip(self):
        rng = np.random.default_rng(15)
        x, y = _toy_training_set(rng)
        model = train_logistic(x, y, ["a", "b", "c"])
        clone = LogisticModel.from_dict(json.loads(json.dumps(model.to_dict())))
        np.testing.assert_array_equal(clone.predict_proba(x), model.predict_proba(x))

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            train_logistic(np.ones((4, 2)), np.array([0.0, 1.0]), ["a", "b"])


def _two_state_checkins(rng, n_per=150, sigma_m=200.0):
    """Morning check-ins at SITE_A, evening check-ins at SITE_B."""
    cks = []
    for i in range(n_per):
        cks.append(
            mk_checkin(
                "u",
                SITE_A.lat + float(rng.normal(0, sigma_m)) * DEG_PER_M_LAT,
                SITE_A.lon + float(rng.normal(0, sigma_m)) * DEG_PER_M_LAT,
                minutes=i,
                hour=8,
            )
        )
        cks.append(
            mk_checkin(
                "u",
                SITE_B.lat + float(rng.normal(0, sigma_m)) * DEG_PER_M_LAT,
                SITE_B.lon + float(rng.normal(0, sigma_m)) * DEG_PER_M_LAT,
                minutes=i,
                hour=20,
            )
        )
    return cks


class TestPsmm:
    def test_recovers_planted_states(self):
        rng = np.random.default_rng(21)
        cks = _two_state_checkins(rng)
        model = psmm_fit(cks, seed=0)
        recovered = [GeoPoint(float(m[0]), float(m[1])) for m in model.means]
        for site in (SITE_A, SITE_B):
            assert min(haversine(site, r) for r in recovered) < 300.0

    def test_hourly_predictions_track_states(self):
        rng = np.random.default_rng(22)
        train = _two_state_checkins(rng)
        model = psmm_fit(train, seed=0)
        held_out = _two_state_checkins(np.random.default_rng(23), n_per=40)
        correct = 0
        for c in held_out:
            pred = psmm_predict(model, c.weekday, c.hour)
            correct += haversine(pred, GeoPoint(c.lat, c.lon)) <= 1000.0
        assert correct / len(held_out) >= 0.8

    def test_loglik_non_decreasing(self):
        rng = np.random.default_rng(24)
        model = psmm_fit(_two_state_checkins(rng, n_per=60), seed=1)
        h = model.loglik_history
        assert len(h) >= 2
        assert all(h[i + 1] >= h[i] - 1e-8 for i in range(len(h) - 1))

    def test_prediction_uses_likelier_state(self):
        means = np.array([[40.70, -74.00], [40.75, -73.90]])
        covs = np.stack([np.eye(2) * 1e-6] * 2)
        w = np.full((168, 2), 0.5)
        w[hour_of_week(0, 8)] = [0.9, 0.1]
        w[hour_of_week(0, 20)] = [0.1, 0.9]
        model = PsmmModel(means, covs, w)
        assert psmm_predict(model, 0, 8) == GeoPoint(40.70, -74.00)
        assert psmm_predict(model, 0, 20) == GeoPoint(40.75, -73.90)

    def test_tie_goes_to_state_zero(self):
        means = np.array([[40.70, -74.00], [40.75, -73.90]])
        model = PsmmModel(means, np.stack([np.eye(2) * 1e-6] * 2), np.full((168, 2), 0.5))
        assert psmm_predict(model, 3, 3) == GeoPoint(40.70, -74.00)

    def test_identical_points_degenerate_but_finite(self):
        cks = [mk_checkin("u", 40.70, -74.00, minutes=i) for i in range(25)]
        model = psmm_fit(cks, seed=0)
        assert np.isfinite(model.means).all()
        for m in model.means:
            assert haversine(GeoPoint(float(m[0]), float(m[1])), GeoPoint(40.70, -74.00)) < 1.0

    def test_too_few_checkins_raise(self):
        cks = [mk_checkin("u", 40.7 + 0.001 * i, -74.0, minutes=i) for i in range(19)]
        with pytest.raises(InsufficientDataError):
            psmm_fit(cks, seed=0)
        psmm_fit(cks + [mk_checkin("u", 40.73, -74.0, minutes=99)], seed=0)  # 20 is enough

    def test_fixed_seed_reproducible(self):
        rng = np.random.default_rng(25)
        cks = _two_state_checkins(rng, n_per=40)
        a = psmm_fit(cks, seed=9)
        b = psmm_fit(cks, seed=9)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.covs, b.covs)
        assert np.array_equal(a.hour_weights, b.hour_weights)

    def test_hour_weights_normalized(self):
        rng = np.random.default_rng(26)
        model = psmm_fit(_two_state_checkins(rng, n_per=30), seed=0)
        np.testing.assert_allclose(model.hour_weights.sum(axis=1), 1.0, atol=1e-12)

    def test_correctness_radius_boundary(self):
        means = np.array([[SITE_A.lat, SITE_A.lon], [SITE_B.lat, SITE_B.lon]])
        w = np.zeros((168, 2))
        w[:, 0] = 1.0
        model = PsmmModel(means, np.stack([np.eye(2) * 1e-6] * 2), w)
        near = inst_at(GeoPoint(SITE_A.lat + 999.0 * DEG_PER_M_LAT, SITE_A.lon))
        far = inst_at(GeoPoint(SITE_A.lat + 1001.0 * DEG_PER_M_LAT, SITE_A.lon))
        assert psmm_correct(model, near)
        assert not psmm_correct(model, far)

    def test_serialization_roundtrip(self):
        rng = np.random.default_rng(27)
        model = psmm_fit(_two_state_checkins(rng, n_per=30), seed=0)
        clone = PsmmModel.from_dict(json.loads(json.dumps(model.to_dict())))
        np.testing.assert_array_equal(clone.means, model.means)
        np.testing.assert_array_equal(clone.hour_weights, model.hour_weights)


class TestBulkFeatureParity:
    def _instances(self, rng, n=40):
        out = []
        for i in range(n):
            p = GeoPoint(40.70 + float(rng.normal(0, 0.02)), -74.0 + float(rng.normal(0, 0.02)))
            out.append(PredictionInstance("u", grid_cell(p), p, int(rng.integers(24)), int(rng.integers(7)), i % 2))
        return out

    @pytest.mark.parametrize("kind", LOGISTIC_MODELS)
    @pytest.mark.parametrize("strategy", [STRATEGY_NEAREST, STRATEGY_MAX_SIZE, STRATEGY_MAX_CON])
    def test_matches_scalar_path(self, kind, strategy):
        rng = np.random.default_rng(31)
        ctx = make_ctx()
        instances = self._instances(rng)
        bulk = bulk_feature_matrix(kind, strategy, ctx, instances)
        rows = np.stack([feature_vector(kind, ctx, it, strategy) for it in instances])
        np.testing.assert_allclose(bulk, rows, rtol=1e-12, atol=1e-9)

    def test_empty_profiles_capped_in_bulk(self):
        ctx = make_ctx(own_profile=MovementProfile("user"))
        instances = self._instances(np.random.default_rng(32), n=5)
        bulk = bulk_feature_matrix(MODEL_USER, STRATEGY_NEAREST, ctx, instances)
        assert (bulk[:, 0] == ctx.distance_cap_m).all()


class TestVirtualCounterparts:
    def test_size_matched_in_pipeline_output(self, small_run):
        _, out = small_run
        data = json.loads((out / "influence" / "profiles.json").read_text())
        checked = 0
        for rec in data["users"].values():
            stats = rec["stats"]
            vstats = rec["virtual_stats"]
            assert len(vstats) == len(stats)
            for s, v in zip(stats, vstats):
                assert v["size"] == s["size"]
            for members, s in zip(rec["virtual_members"], stats):
                assert len(members) == s["size"]
                checked += 1
        assert checked > 0
