"""Descriptor database, exact top-K retrieval, and recall@K evaluation."""

import numpy as np
import pytest

from cloudloc.errors import BadK, DuplicateId
from cloudloc.retrieval import (
    DbEntry,
    EvalReport,
    build_database,
    evaluate,
    load_database,
    one_percent_k,
    query_topk,
    save_database,
)


def random_db(rng, n, dim=8):
    entries = [
        DbEntry(f"e{i:04d}", rng.normal(size=dim), rng.uniform(0, 500, size=3))
        for i in range(n)
    ]
    return build_database(entries), entries


class TestBuild:
    def test_single_entry(self):
        db, _ = random_db(np.random.default_rng(0), 1)
        assert len(db) == 1

    def test_duplicate_id_error_names_the_id(self):
        e = DbEntry("dup", np.zeros(4), np.zeros(3))
        with pytest.raises(DuplicateId, match="dup"):
            build_database([e, e])

    def test_thousand_entries_round_trip_ids(self):
        db, entries = random_db(np.random.default_rng(1), 1000)
        assert len(db) == 1000
        assert db.ids == [e.id for e in entries]

    def test_mixed_dims_rejected(self):
        with pytest.raises(ValueError):
            build_database([
                DbEntry("a", np.zeros(4), np.zeros(3)),
                DbEntry("b", np.zeros(5), np.zeros(3)),
            ])


class TestQueryTopk:
    def test_stored_descriptor_ranks_first_with_zero_distance(self):
        db, entries = random_db(np.random.default_rng(2), 50)
        got = query_topk(db, entries[17].descriptor, 3)
        assert got[0] == ("e0017", 0.0)

    def test_full_k_is_a_permutation_of_all_ids(self):
        db, _ = random_db(np.random.default_rng(3), 40)
        got = query_topk(db, np.random.default_rng(4).normal(size=8), 40)
        assert sorted(i for i, _ in got) == sorted(db.ids)
        dists = [d for _, d in got]
        assert dists == sorted(dists)

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(5)
        db, entries = random_db(rng, 500)
        for _ in range(50):
            q = rng.normal(size=8)
            got = query_topk(db, q, 10)
            d = np.linalg.norm(np.stack([e.descriptor for e in entries]) - q,
                               axis=1)
            order = sorted(range(500), key=lambda i: (d[i], i))[:10]
            assert [i for i, _ in got] == [entries[i].id for i in order]
            np.testing.assert_allclose([x for _, x in got], d[order], atol=1e-12)

    def test_ties_broken_by_insertion_order(self):
        entries = [DbEntry(s, [1.0, 0.0], np.zeros(3)) for s in "abc"]
        db = build_database(entries)
        assert [i for i, _ in query_topk(db, [0.0, 0.0], 3)] == ["a", "b", "c"]

    def test_bad_k_rejected(self):
        db, _ = random_db(np.random.default_rng(6), 5)
        for k in (0, 6):
            with pytest.raises(BadK):
                query_topk(db, np.zeros(8), k)


class TestEvaluate:
    def db_at(self, positions, dim=4):
        rng = np.random.default_rng(7)
        return build_database([
            DbEntry(f"p{i}", rng.normal(size=dim), p)
            for i, p in enumerate(positions)
        ])

    def test_rank1_within_radius_counts(self):
        db = self.db_at([(0, 0, 0)])
        q = (db.descriptors[0], np.array([10.0, 0, 0]))
        report = evaluate(db, [q], ks=(1,))
        assert report.recall_at[1] == 1.0

    def test_threshold_rule_rank1_miss_rank2_hit(self):
        descs = np.array([[0.0, 0], [1.0, 0]])
        db = build_database([
            DbEntry("near_desc_far_pos", descs[0], (30.0, 0, 0)),
            DbEntry("far_desc_near_pos", descs[1], (10.0, 0, 0)),
        ])
        report = evaluate(db, [(descs[0], np.zeros(3))], ks=(1, 5))
        assert report.recall_at[1] == 0.0
        assert report.recall_at[5] == 1.0

    def test_one_percent_k_examples(self):
        assert one_percent_k(120) == 2
        assert one_percent_k(100) == 1
        assert one_percent_k(250) == 3
        assert one_percent_k(50) == 1

    def test_recall_monotone_in_k(self):
        rng = np.random.default_rng(8)
        db, _ = random_db(rng, 200)
        queries = [(rng.normal(size=8), rng.uniform(0, 500, size=3))
                   for _ in range(40)]
        report = evaluate(db, queries, ks=(1, 5, 20, 50))
        ks = sorted(report.recall_at)
        vals = [report.recall_at[k] for k in ks]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_matches_recount_oracle_over_saved_topk(self):
        rng = np.random.default_rng(9)
        positions = rng.uniform(0, 300, size=(200, 3))
        db = self.db_at(positions, dim=6)
        queries = [(rng.normal(size=6), rng.uniform(0, 300, size=3))
                   for _ in range(60)]
        report = evaluate(db, queries, ks=(1, 5))
        for k in report.recall_at:
            hits = 0
            for (desc, pos), ids in zip(queries, report.per_query_topk):
                top = ids[:k]
                idx = [db.ids.index(i) for i in top]
                if np.any(np.linalg.norm(db.centroids[idx] - pos, axis=1) <= 25.0):
                    hits += 1
            assert report.recall_at[k] == pytest.approx(hits / 60)

    def test_report_text_is_stable(self):
        db = self.db_at([(0, 0, 0), (100, 0, 0)])
        q = (db.descriptors[0], np.zeros(3))
        a = evaluate(db, [q]).to_text()
        b = evaluate(db, [q]).to_text()
        assert a == b
        assert "recall@1\t1.000000" in a


class TestDatabaseFile:
    def test_round_trip(self, tmp_path):
        db, _ = random_db(np.random.default_rng(10), 30)
        path = tmp_path / "db.vdb"
        save_database(db, path)
        out = load_database(path)
        assert out.ids == db.ids
        np.testing.assert_array_equal(
            out.descriptors, db.descriptors.astype("<f4").astype(np.float64)
        )
        np.testing.assert_array_equal(out.centroids, db.centroids)
        assert path.read_bytes()[:4] == b"VDB1"

    def test_rewrite_is_byte_identical(self, tmp_path):
        db, _ = random_db(np.random.default_rng(11), 10)
        p1, p2 = tmp_path / "a.vdb", tmp_path / "b.vdb"
        save_database(db, p1)
        save_database(load_database(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
