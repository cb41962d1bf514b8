import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topnav.rng import derive_rng
from topnav.worldgen import (
    NUM_CLASSES, NavPair, Room, RoomGraph, WorldParams, candidate_pairs, enumerate_simple_paths,
    generate_environment, generate_environments, is_simple_path, make_cggn_sample,
    sample_cggn_example, sample_nav_pairs, split_environments,
)


def _graph(n, edges, classes=None):
    classes = classes or [0] * n
    return RoomGraph("t", [Room(i, classes[i], (float(i), 0.0, 0.0)) for i in range(n)], edges)


def _all_simple_paths_bruteforce(g, s, e, max_len):
    # enumerate every permutation of intermediates; independent of the DFS
    others = [v for v in range(g.n) if v not in (s, e)]
    out = []
    for k in range(0, min(len(others), max_len - 1) + 1):
        for mid in itertools.permutations(others, k):
            p = [s, *mid, e]
            if is_simple_path(g, p):
                out.append(p)
    return sorted(out, key=lambda p: (len(p), p))


def test_two_rooms_single_edge():
    g = generate_environment(0, WorldParams(n_rooms_range=(2, 2)))
    assert g.n == 2 and g.edges == [(0, 1)]


@pytest.mark.parametrize("seed", range(10))
def test_zero_extra_edges_is_tree(seed):
    g = generate_environment(seed, WorldParams(extra_edge_fraction=0.0))
    assert len(g.edges) == g.n - 1


def test_thousand_envs_validate():
    for k in range(1000):
        g = generate_environment(derive_rng(5, k))
        g.validate()
        assert len(set(g.edges)) == len(g.edges)
        assert all(a != b for a, b in g.edges)


def test_average_degree_and_class_skew():
    envs = generate_environments(200, 3)
    deg = np.mean([2 * len(g.edges) / g.n for g in envs])
    assert 2.1 < deg < 2.6
    counts = np.bincount([r.cls for g in envs for r in g.rooms], minlength=NUM_CLASSES)
    assert counts.max() > 5 * np.median(counts)


def test_degenerate_params():
    with pytest.raises(ValueError):
        generate_environment(0, WorldParams(n_rooms_range=(1, 3)))
    with pytest.raises(ValueError):
        generate_environment(0, WorldParams(extra_edge_fraction=-1))


def test_environment_json_round_trip(tmp_path):
    g = generate_environment(4)
    doc = json.loads(g.dumps())
    assert set(doc) == {"id", "rooms", "edges"}
    assert set(doc["rooms"][0]) == {"id", "class", "pos"}
    assert RoomGraph.from_json(doc).to_json() == g.to_json()


def test_split_default_counts():
    envs = generate_environments(90, 0)
    parts = split_environments(envs, (61 / 90, 11 / 90, 18 / 90), seed=1)
    assert [len(parts[k]) for k in ("train", "val", "test")] == [61, 11, 18]
    ids = [g.env_id for p in parts.values() for g in p]
    assert sorted(ids) == sorted(g.env_id for g in envs)
    again = split_environments(envs, (61 / 90, 11 / 90, 18 / 90), seed=1)
    assert {k: [g.env_id for g in v] for k, v in parts.items()} == {k: [g.env_id for g in v] for k, v in again.items()}
    with pytest.raises(ValueError):
        split_environments(envs, (0.5, 0.2, 0.2), seed=1)
    with pytest.raises(ValueError):
        split_environments(envs[:2], (0.5, 0.5, 0.0), seed=1)


def test_paths_examples():
    line = _graph(3, [(0, 1), (1, 2)])
    assert enumerate_simple_paths(line, 0, 2) == [[0, 1, 2]]
    tri = _graph(3, [(0, 1), (1, 2), (0, 2)])
    assert enumerate_simple_paths(tri, 0, 2) == [[0, 2], [0, 1, 2]]
    assert enumerate_simple_paths(tri, 1, 1) == [[1]]
    split = RoomGraph("t", [Room(i, 0, (0.0, 0.0, 0.0)) for i in range(3)], [(0, 1)])
    assert enumerate_simple_paths(split, 0, 2) == []


@pytest.mark.parametrize("seed", range(15))
def test_paths_match_bruteforce(seed):
    g = generate_environment(seed, WorldParams(n_rooms_range=(4, 7), extra_edge_fraction=1.5))
    rng = np.random.default_rng(seed)
    s, e = (int(v) for v in rng.choice(g.n, 2, replace=False))
    assert enumerate_simple_paths(g, s, e, max_len=4) == _all_simple_paths_bruteforce(g, s, e, 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_path_count_reversal_symmetry(seed):
    g = generate_environment(seed, WorldParams(n_rooms_range=(3, 12)))
    a, b = 0, g.n - 1
    assert len(enumerate_simple_paths(g, a, b)) == len(enumerate_simple_paths(g, b, a))


def test_cggn_sample_two_rooms():
    g = _graph(2, [(0, 1)], [3, 7])
    s = sample_cggn_example(g, np.random.default_rng(0))
    assert s.n_obs == 1 and s.valid_count == 1
    assert len(s.target_rows) == 1 and s.target_rows[0].tolist() == [1]
    assert s.dest_class == g.cls(s.path[-1])


def test_cggn_sample_hand_case():
    g = _graph(4, [(0, 1), (1, 2), (2, 3)], [1, 2, 3, 4])
    s = make_cggn_sample(g, [0, 1, 2, 3], n_obs=2)
    assert s.valid_count == 2
    assert s.target_rows[0].tolist() == [0, 1]        # target1 -> observation tail
    assert s.target_rows[1].tolist() == [0, 0, 1]     # target2 -> target1
    assert s.obs_classes == [1, 2] and s.target_classes == [3, 4] and s.dest_class == 4
    assert s.padded_targets().tolist() == [3, 4, -1, -1, -1]


@pytest.mark.parametrize("seed", range(30))
def test_cggn_samples_are_valid(seed):
    g = generate_environment(seed)
    s = sample_cggn_example(g, np.random.default_rng(seed))
    obs = s.observation
    assert obs.is_connected()
    assert np.all(np.triu(obs.adj) == 0)
    assert 1 <= s.valid_count <= s.B
    assert is_simple_path(g, s.path)  # observation + targets reconstruct a simple path
    assert s.target_classes == [g.cls(r) for r in s.path[s.n_obs:]]


def _splits():
    envs = generate_environments(90, 0)
    return split_environments(envs, (61 / 90, 11 / 90, 18 / 90), seed=0)


def test_nav_pairs_counts_and_determinism():
    sp = _splits()
    counts = (4000, 200, 200, 1000)
    a = sample_nav_pairs(sp, counts, seed=3)
    b = sample_nav_pairs(sp, counts, seed=3)
    assert a == b
    assert [len(a[k]) for k in ("train", "val_seen", "val_unseen", "test_unseen")] == list(counts)
    assert not set(a["train"]) & set(a["val_seen"])
    by_id = {g.env_id: g for part in sp.values() for g in part}
    for p in a["test_unseen"]:
        g = by_id[p.env_id]
        assert g.rooms_of_class(p.goal_class)
        assert g.cls(p.start_room) != p.goal_class
    train_ids = {g.env_id for g in sp["train"]}
    assert {p.env_id for p in a["val_seen"]} <= train_ids
    assert not {p.env_id for p in a["test_unseen"]} & train_ids


def test_nav_pairs_insufficient():
    sp = _splits()
    with pytest.raises(ValueError):
        sample_nav_pairs(sp, (10 ** 6, 0, 0, 0), seed=0)


def test_goal_absent_never_emitted():
    g = _graph(3, [(0, 1), (1, 2)], [0, 0, 5])
    pairs = candidate_pairs([g])
    assert NavPair("t", 0, 5) in pairs
    assert all(p.goal_class in (0, 5) for p in pairs)
