"""Synthetic corpus generator tests: validation, determinism, world shape."""

from __future__ import annotations

import json

import pytest

from commloc.corpus import parse_checkins, parse_edges
from commloc.synth import SpecError, SyntheticSpec, planted_partition_graph, synth_generate

SMALL = dict(
    n_users=2,
    n_communities=3,
    checkins_per_user=30,
    core_friends=9,
    n_strangers=2,
    n_loners=2,
    member_points_per_hotspot=2,
    stranger_points=4,
    seed=11,
)


def small_spec(**overrides) -> SyntheticSpec:
    kw = dict(SMALL)
    kw.update(overrides)
    return SyntheticSpec(**kw)


class TestSpecValidation:
    def test_defaults_validate(self):
        SyntheticSpec().validate()

    @pytest.mark.parametrize(
        "overrides",
        [
            {"n_users": 1},
            {"n_communities": 0},
            {"p_in": 0.02, "p_out": 0.02},
            {"p_in": 0.01, "p_out": 0.02},
            {"p_in": 1.5},
            {"p_out": -0.1, "p_in": 0.5},
            {"jitter_m": 0.0},
            {"jitter_m": -5.0},
            {"hotspots_per_community": 0},
            {"checkins_per_user": 9},
            {"core_friends": 8},  # needs 3 per community
            {"n_strangers": -1},
            {"n_loners": -1},
            {"period_days": 0},
        ],
    )
    def test_bad_specs_raise(self, overrides):
        with pytest.raises(SpecError):
            small_spec(**overrides).validate()

    def test_minimum_checkins_accepted(self):
        small_spec(checkins_per_user=10).validate()


class TestDeterminism:
    def test_fixed_seed_byte_identical(self, tmp_path):
        spec = small_spec()
        a = synth_generate(spec, tmp_path / "a")
        b = synth_generate(spec, tmp_path / "b")
        for key in ("checkins", "edges", "ground_truth"):
            assert a[key].read_bytes() == b[key].read_bytes()

    def test_different_seed_differs(self, tmp_path):
        a = synth_generate(small_spec(seed=11), tmp_path / "a")
        b = synth_generate(small_spec(seed=12), tmp_path / "b")
        assert a["checkins"].read_bytes() != b["checkins"].read_bytes()


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    spec = small_spec()
    paths = synth_generate(spec, out)
    truth = json.loads(paths["ground_truth"].read_text())
    return spec, paths, truth


class TestWorldShape:
    def test_checkins_parse_cleanly_in_scope(self, world):
        spec, paths, _ = world
        lines = paths["checkins"].read_text().splitlines()
        cks, malformed = parse_checkins(lines, spec.city())
        assert malformed == 0
        assert len(cks) == len(lines)
        lat_min, lat_max, lon_min, lon_max = spec.city().bbox
        assert all(lat_min <= c.lat <= lat_max and lon_min <= c.lon <= lon_max for c in cks)

    def test_edges_parse_and_ego_degree(self, world):
        spec, paths, truth = world
        graph = parse_edges(paths["edges"].read_text().splitlines(), "undirected")
        want = spec.core_friends + spec.n_strangers + spec.n_loners
        for ego in truth["users"]:
            assert len(graph.friends(ego)) == want

    def test_core_sizes_sum_and_minimum(self, world):
        spec, _, truth = world
        for rec in truth["users"].values():
            assert sum(rec["core_sizes"]) == spec.core_friends
            assert all(s >= 3 for s in rec["core_sizes"])
            assert [len(c) for c in rec["cores"]] == rec["core_sizes"]

    def test_loners_have_edges_but_no_checkins(self, world):
        _, paths, truth = world
        uids_with_checkins = {ln.split("\t", 1)[0] for ln in paths["checkins"].read_text().splitlines()}
        graph = parse_edges(paths["edges"].read_text().splitlines(), "undirected")
        for ego, rec in truth["users"].items():
            for loner in rec["loners"]:
                assert ego in graph.friends(loner)
                assert loner not in uids_with_checkins

    def test_slot_probabilities_normalized(self, world):
        spec, _, truth = world
        for rec in truth["users"].values():
            probs = rec["slot_probs"]
            assert len(probs) == spec.n_communities
            assert sum(probs) == pytest.approx(1.0, abs=1e-12)
            assert all(p >= 0.0 for p in probs)

    def test_checkin_volume_within_band(self, world):
        spec, paths, truth = world
        by_user: dict[str, int] = {}
        for ln in paths["checkins"].read_text().splitlines():
            uid = ln.split("\t", 1)[0]
            by_user[uid] = by_user.get(uid, 0) + 1
        lo = int(round(0.82 * spec.checkins_per_user))
        hi = int(round(1.18 * spec.checkins_per_user))
        for ego, rec in truth["users"].items():
            assert rec["n_checkins"] == by_user[ego]
            assert lo <= rec["n_checkins"] <= hi

    def test_ground_truth_embeds_spec_and_city(self, world):
        spec, _, truth = world
        assert truth["spec"]["seed"] == spec.seed
        assert truth["spec"]["n_users"] == spec.n_users
        assert tuple(truth["city"]["bbox"]) == spec.city().bbox


class TestSingleCommunity:
    def test_one_hot_slot_table(self, tmp_path):
        spec = small_spec(n_communities=1, core_friends=3)
        paths = synth_generate(spec, tmp_path)
        truth = json.loads(paths["ground_truth"].read_text())
        for rec in truth["users"].values():
            assert rec["slot_probs"] == [1.0]
            assert rec["core_sizes"] == [spec.core_friends]
            assert sorted(rec["slot_hours"]["0"]) == list(range(24))


class TestPlantedPartitionGraph:
    def test_shapes_and_density(self):
        import numpy as np

        n, edges = planted_partition_graph([8, 8], 1.0, 0.0, np.random.default_rng(0))
        assert n == 16
        # p_in 1, p_out 0: exactly the two cliques
        assert len(edges) == 2 * (8 * 7 // 2)
        assert all((a < 8) == (b < 8) for a, b in edges)

    def test_deterministic(self):
        import numpy as np

        a = planted_partition_graph([5, 5], 0.6, 0.1, np.random.default_rng(3))
        b = planted_partition_graph([5, 5], 0.6, 0.1, np.random.default_rng(3))
        assert a == b
