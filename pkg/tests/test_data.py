import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitfedrec.data import (
    ClientPartition,
    InteractionLog,
    chronological_split,
    generate_synthetic,
    group_distribution,
    kmeans,
    partition_clustered,
    partition_dirichlet,
    read_tsv,
    split_sizes,
    svd_user_embeddings,
    write_tsv,
)
from splitfedrec.errors import ContractViolation


def test_generation_is_deterministic():
    a = generate_synthetic(20, 15, 3, 8, seed=2)
    b = generate_synthetic(20, 15, 3, 8, seed=2)
    assert a.log.events == b.log.events
    assert np.array_equal(a.latents, b.latents)
    assert a.log.events != generate_synthetic(20, 15, 3, 8, seed=3).log.events


def test_generation_counts_and_ordering():
    syn = generate_synthetic(10, 30, 2, 12, seed=0, with_replacement=False)
    seqs = syn.log.by_user()
    assert sorted(seqs) == list(range(10))
    assert all(len(s) == 12 and len(set(s)) == 12 for s in seqs.values())
    by_user_ts = {}
    for u, _, ts in syn.log.events:
        by_user_ts.setdefault(u, []).append(ts)
    assert all(np.all(np.diff(v) > 0) for v in by_user_ts.values())
    with pytest.raises(ContractViolation):
        generate_synthetic(5, 4, 2, 10, seed=0, with_replacement=False)


def test_users_prefer_their_cluster():
    syn = generate_synthetic(60, 50, 3, 30, seed=1, temperature=0.5)
    same = np.mean([syn.item_clusters[i] == syn.clusters[u] for u, i, _ in syn.log.events])
    assert same > 0.6


def test_tsv_round_trip_and_header(tmp_path):
    syn = generate_synthetic(7, 9, 2, 5, seed=4)
    path = tmp_path / "log.tsv"
    write_tsv(syn.log, path)
    back = read_tsv(path)
    assert back == syn.log
    assert path.read_text().splitlines()[0] == "# num_users=7\tnum_items=9"


def test_tsv_without_counts_is_remapped(tmp_path):
    path = tmp_path / "raw.tsv"
    path.write_text("user_id\titem_id\ttimestamp\n10\t100\t5\n3\t100\t6\n10\t7\t7\n")
    log_ = read_tsv(path)
    assert (log_.num_users, log_.num_items) == (2, 2)
    assert log_.events == [(1, 1, 5), (0, 1, 6), (1, 0, 7)]


def test_tsv_bad_header(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("a\tb\tc\n1\t2\t3\n")
    with pytest.raises(ContractViolation):
        read_tsv(path)


def test_events_out_of_range_rejected():
    with pytest.raises(ContractViolation):
        InteractionLog([(0, 5, 1)], 1, 5)


def test_by_user_is_stable_on_timestamp_ties():
    log_ = InteractionLog([(0, 3, 1), (0, 1, 1), (0, 2, 0)], 1, 4)
    assert log_.by_user() == {0: [2, 3, 1]}


@given(n=st.integers(3, 500))
def test_split_sizes(n):
    tr, va, te = split_sizes(n)
    assert tr + va + te == n
    assert va == te == max(1, -(-n // 10))
    assert tr >= 1


def test_chronological_split_targets_are_disjoint_and_ordered():
    syn = generate_synthetic(12, 20, 2, 10, seed=0)
    sd = chronological_split(syn.log)
    seqs = syn.log.by_user()
    for u in sd.users:
        items = seqs[u]
        for split in ("train", "valid", "test"):
            for ex in getattr(sd, split)[u]:
                j = len(ex.history.item_ids)
                assert ex.history.item_ids == tuple(items[:j])
                assert ex.target == items[j]
        lengths = {s: [len(e.history.item_ids) for e in getattr(sd, s)[u]] for s in ("train", "valid", "test")}
        assert max(lengths["train"]) < min(lengths["valid"]) <= max(lengths["valid"]) < min(lengths["test"])
        assert len(lengths["test"]) == 1 and len(lengths["valid"]) == 1


def test_short_users_dropped_with_warning(caplog):
    log_ = InteractionLog([(0, 1, 1), (0, 2, 2), (1, 0, 1), (1, 1, 2), (1, 2, 3)], 2, 3)
    with caplog.at_level(logging.WARNING):
        sd = chronological_split(log_)
    assert sd.users == [1]
    assert "excluded 1 users" in caplog.text


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(0)
    centres = np.array([[0, 0], [10, 0], [0, 10]], dtype=float)
    x = np.vstack([c + rng.normal(0, 0.3, size=(20, 2)) for c in centres])
    labels = kmeans(x, 3, seed=1)
    for block in range(3):
        assert len(set(labels[block * 20:(block + 1) * 20])) == 1
    assert len(set(labels)) == 3
    assert np.array_equal(labels, kmeans(x, 3, seed=1))


def test_kmeans_no_empty_clusters_on_duplicates():
    x = np.vstack([np.zeros((5, 2)), np.ones((1, 2))])
    labels = kmeans(x, 4, seed=0)
    assert sorted(set(labels)) == [0, 1, 2, 3]


def test_partition_clustered_and_json(tmp_path):
    syn = generate_synthetic(30, 10, 3, 5, seed=0)
    part = partition_clustered(syn.latents, 3, seed=0)
    assert sorted(set(part.assignment.values())) == [0, 1, 2]
    path = tmp_path / "p.json"
    part.to_json(path)
    assert ClientPartition.from_json(path) == part
    assert json.loads(path.read_text())["0"] == part.assignment[0]


def test_partition_rejects_empty_client():
    with pytest.raises(ContractViolation):
        ClientPartition({0: 0, 1: 0}, 2)


@settings(max_examples=30, deadline=None)
@given(
    c=st.floats(0.05, 20.0),
    seed=st.integers(0, 1000),
    clients=st.integers(2, 6),
)
def test_dirichlet_partition_covers_all_users_and_clients(c, seed, clients):
    groups = np.random.default_rng(seed).integers(0, 4, size=40)
    part = partition_dirichlet(groups, clients, c, seed)
    assert sorted(part.assignment) == list(range(40))
    assert all(part.users_of(k) for k in range(clients))


def test_dirichlet_concentration_controls_heterogeneity():
    groups = np.repeat(np.arange(5), 200)

    def spread(c):
        vals = []
        for seed in range(5):
            part = partition_dirichlet(groups, 5, c, seed)
            dist = group_distribution(part, groups, 5)
            vals.append(np.mean(dist.max(axis=1)))
        return np.mean(vals)

    assert spread(0.1) > spread(1.0) > spread(100.0)


def test_svd_embeddings_shape():
    syn = generate_synthetic(10, 8, 2, 4, seed=0)
    emb = svd_user_embeddings(syn.log, dim=3)
    assert emb.shape == (10, 3)
