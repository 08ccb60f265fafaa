"""HNSW index: build invariants, recall against brute force, persistence."""

import numpy as np
import pytest

from coverseek.errors import DataIntegrityError, FormatError
from coverseek.index import HnswIndex
from coverseek.store import EmbeddingStore

from helpers import unit_rows


def build_index(rng, n, dim=16, seed=0, **kwargs):
    vecs = unit_rows(rng, n, dim)
    index = HnswIndex(dim, seed=seed, **kwargs)
    for i, v in enumerate(vecs):
        index.insert(v, f"rec{i:05d}", i)
    return index, vecs


def brute_force_top(vecs, query, k):
    sims = vecs @ query
    order = np.argsort(-sims)[:k]
    return {int(i) for i in order}


class TestInsert:
    def test_first_insert_becomes_entry_point(self):
        index = HnswIndex(4, seed=0)
        node = index.insert(np.array([1.0, 0, 0, 0]), "a")
        assert node == 0
        assert index.entry_point == 0
        assert index._neighbors[0] == [[] for _ in range(index._levels[0] + 1)]

    def test_layer0_connected_after_100_inserts(self):
        rng = np.random.default_rng(1)
        index, _ = build_index(rng, 100)
        assert index.layer0_connected()

    def test_duplicate_vectors_both_retrievable(self):
        rng = np.random.default_rng(2)
        index, vecs = build_index(rng, 20)
        index.insert(vecs[3], "dup", 99)
        hits = index.search(vecs[3], 2, ef_search=40)
        ids = {h.recording_id for h in hits}
        assert ids == {"rec00003", "dup"}
        assert all(h.score == pytest.approx(1.0, abs=1e-5) for h in hits)

    def test_dimension_mismatch_rejected(self):
        index = HnswIndex(8)
        with pytest.raises(ValueError):
            index.insert(np.ones(4), "x")

    def test_insert_after_freeze_rejected(self):
        rng = np.random.default_rng(3)
        index, vecs = build_index(rng, 5)
        index.freeze()
        with pytest.raises(RuntimeError):
            index.insert(vecs[0], "late")

    def test_degree_bounds_hold(self):
        rng = np.random.default_rng(4)
        index, _ = build_index(rng, 400, m_conn=8, m_conn_layer0=16)
        for node in range(len(index)):
            for layer, links in enumerate(index._neighbors[node]):
                limit = 16 if layer == 0 else 8
                assert len(links) <= limit

    def test_node_exists_on_all_lower_layers(self):
        rng = np.random.default_rng(5)
        index, _ = build_index(rng, 200)
        for node in range(len(index)):
            assert len(index._neighbors[node]) == index._levels[node] + 1

    def test_build_determinism_given_seed(self):
        rng = np.random.default_rng(6)
        vecs = unit_rows(rng, 150, 8)
        snapshots = []
        for _ in range(2):
            index = HnswIndex(8, seed=42)
            for i, v in enumerate(vecs):
                index.insert(v, f"r{i}", i)
            snapshots.append(index.serialize())
        assert snapshots[0] == snapshots[1]


class TestSearch:
    def test_exact_member_found_first(self):
        rng = np.random.default_rng(7)
        index, vecs = build_index(rng, 10)
        hits = index.search(vecs[4], 3, ef_search=10)
        assert hits[0].recording_id == "rec00004"
        assert hits[0].score == pytest.approx(1.0, abs=1e-6)

    def test_k_larger_than_size_saturates(self):
        rng = np.random.default_rng(8)
        index, _ = build_index(rng, 7)
        hits = index.search(unit_rows(rng, 1, 16)[0], 50, ef_search=50)
        assert len(hits) == 7

    def test_results_sorted_descending(self):
        rng = np.random.default_rng(9)
        index, _ = build_index(rng, 300)
        hits = index.search(unit_rows(rng, 1, 16)[0], 20, ef_search=64)
        scores = [h.score for h in hits]
        assert scores == sorted(scores, reverse=True)

    def test_empty_index_rejected(self):
        with pytest.raises(ValueError):
            HnswIndex(4).search(np.ones(4), 1)

    def test_exact_when_ef_equals_size(self):
        rng = np.random.default_rng(10)
        index, vecs = build_index(rng, 500)
        for q in unit_rows(rng, 10, 16):
            got = {int(h.recording_id[3:]) for h in index.search(q, 20, ef_search=500)}
            assert got == brute_force_top(vecs, q, 20)

    def test_recall_monotone_in_ef(self):
        rng = np.random.default_rng(11)
        index, vecs = build_index(rng, 1200, dim=24)
        queries = unit_rows(rng, 25, 24)
        means = []
        for ef in (16, 32, 64, 128, 256):
            recalls = []
            for q in queries:
                got = {int(h.recording_id[3:]) for h in index.search(q, 20, ef_search=ef)}
                recalls.append(len(got & brute_force_top(vecs, q, 20)) / 20)
            means.append(np.mean(recalls))
        for lo, hi in zip(means, means[1:]):
            assert hi >= lo - 1e-9


class TestPersistence:
    def test_round_trip_identical_search_results(self):
        rng = np.random.default_rng(12)
        index, _ = build_index(rng, 250)
        index.freeze()
        clone = HnswIndex.deserialize(index.serialize())
        assert clone.frozen
        for q in unit_rows(rng, 100, 16):
            a = [(h.recording_id, h.score) for h in index.search(q, 10, ef_search=64)]
            b = [(h.recording_id, h.score) for h in clone.search(q, 10, ef_search=64)]
            assert a == b

    def test_round_trip_byte_stable(self):
        rng = np.random.default_rng(13)
        index, _ = build_index(rng, 60)
        data = index.serialize()
        assert HnswIndex.deserialize(data).serialize() == data

    def test_corrupted_magic_rejected(self):
        rng = np.random.default_rng(14)
        index, _ = build_index(rng, 10)
        data = bytearray(index.serialize())
        data[:4] = b"EVIL"
        with pytest.raises(FormatError, match="magic"):
            HnswIndex.deserialize(bytes(data))

    def test_truncation_rejected(self):
        rng = np.random.default_rng(15)
        index, _ = build_index(rng, 10)
        data = index.serialize()
        with pytest.raises(FormatError):
            HnswIndex.deserialize(data[: len(data) // 2])

    def test_bit_flip_rejected(self):
        rng = np.random.default_rng(16)
        index, _ = build_index(rng, 10)
        data = bytearray(index.serialize())
        data[30] ^= 0x10
        with pytest.raises(FormatError):
            HnswIndex.deserialize(bytes(data))

    def test_empty_index_round_trips(self):
        index = HnswIndex(12, seed=5)
        clone = HnswIndex.deserialize(index.serialize())
        assert len(clone) == 0 and clone.dim == 12

    def test_save_load_files(self, tmp_path):
        rng = np.random.default_rng(17)
        index, vecs = build_index(rng, 40)
        path = tmp_path / "g.hnsw"
        index.save(path)
        loaded = HnswIndex.load(path)
        assert loaded.search(vecs[0], 1)[0].recording_id == "rec00000"


class TestFreezeIntegrity:
    def test_freeze_validates_against_store(self):
        rng = np.random.default_rng(18)
        store = EmbeddingStore(16)
        store.put("known", unit_rows(rng, 2, 16), 30.0)
        index = HnswIndex(16)
        index.insert(unit_rows(rng, 1, 16)[0], "known", 0)
        index.insert(unit_rows(rng, 1, 16)[0], "phantom", 0)
        with pytest.raises(DataIntegrityError, match="phantom"):
            index.freeze(store)

    def test_freeze_passes_when_consistent(self):
        rng = np.random.default_rng(19)
        store = EmbeddingStore(16)
        vecs = unit_rows(rng, 3, 16)
        store.put("a", vecs, 30.0)
        index = HnswIndex(16)
        for i, v in enumerate(vecs):
            index.insert(v, "a", i)
        index.freeze(store)
        assert index.frozen
