import threading

import numpy as np
import pytest

from agloc.place_index import (
    DESCRIPTOR_DIM,
    DuplicateId,
    EmptyIndex,
    GlobalDescriptor,
    HnswIndex,
    SnapshotError,
    brute_force_search,
)


def unit_vectors(n, rng):
    v = rng.normal(size=(n, DESCRIPTOR_DIM)).astype(np.float32)
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def build(vectors, seed=0, **kw):
    idx = HnswIndex(seed=seed, **kw)
    for i, v in enumerate(vectors):
        idx.insert(i, v)
    return idx


class TestDescriptor:
    def test_validates_norm(self):
        v = np.zeros(DESCRIPTOR_DIM, dtype=np.float32)
        v[0] = 0.5
        with pytest.raises(ValueError):
            GlobalDescriptor(v)

    def test_validates_dim(self):
        with pytest.raises(ValueError):
            GlobalDescriptor(np.ones(100))

    def test_accepts_unit(self):
        v = np.zeros(DESCRIPTOR_DIM)
        v[3] = 1.0
        d = GlobalDescriptor(v)
        assert d.values.dtype == np.float32


class TestInsertSearch:
    def test_first_insert_becomes_entry(self):
        rng = np.random.default_rng(0)
        v = unit_vectors(1, rng)[0]
        idx = HnswIndex(seed=1)
        idx.insert(7, v)
        assert idx.entry_point == 7
        got = idx.search(v, top_k=1)
        assert got[0][0] == 7
        assert got[0][1] == 0.0

    def test_duplicate_id(self):
        rng = np.random.default_rng(1)
        v = unit_vectors(2, rng)
        idx = HnswIndex()
        idx.insert(1, v[0])
        with pytest.raises(DuplicateId):
            idx.insert(1, v[1])

    def test_empty_search_raises(self):
        rng = np.random.default_rng(2)
        with pytest.raises(EmptyIndex):
            HnswIndex().search(unit_vectors(1, rng)[0], top_k=1)

    def test_self_retrieval_100(self):
        rng = np.random.default_rng(3)
        vs = unit_vectors(100, rng)
        idx = build(vs, seed=3)
        for i, v in enumerate(vs):
            got = idx.search(v, top_k=1)
            assert got[0][0] == i
            assert got[0][1] < 1e-6

    def test_recall_vs_brute_force(self):
        rng = np.random.default_rng(0)
        vs = unit_vectors(1000, rng)
        idx = build(vs, seed=0)
        vectors = {i: v for i, v in enumerate(vs)}
        queries = unit_vectors(100, rng)
        hits = 0
        for q in queries:
            want = brute_force_search(vectors, q, top_k=1)[0][0]
            got = idx.search(q, top_k=1)[0][0]
            hits += int(got == want)
        assert hits >= 95

    def test_top5_set_overlap(self):
        rng = np.random.default_rng(5)
        vs = unit_vectors(1000, rng)
        idx = build(vs, seed=5)
        vectors = {i: v for i, v in enumerate(vs)}
        queries = unit_vectors(100, rng)
        exact = 0
        for q in queries:
            want = {i for i, _ in brute_force_search(vectors, q, top_k=5)}
            got = {i for i, _ in idx.search(q, top_k=5)}
            exact += int(want == got)
        assert exact >= 90

    def test_exact_when_ef_equals_size(self):
        rng = np.random.default_rng(6)
        vs = unit_vectors(300, rng)
        idx = build(vs, seed=6)
        vectors = {i: v for i, v in enumerate(vs)}
        for q in unit_vectors(50, rng):
            want = brute_force_search(vectors, q, top_k=10)
            got = idx.search(q, top_k=10, ef=len(idx))
            assert [i for i, _ in got] == [i for i, _ in want]

    def test_distances_ascending(self):
        rng = np.random.default_rng(7)
        vs = unit_vectors(200, rng)
        idx = build(vs, seed=7)
        got = idx.search(unit_vectors(1, rng)[0], top_k=20)
        d = [x[1] for x in got]
        assert d == sorted(d)
        assert all(i in idx for i, _ in got)

    def test_stored_query_is_first_with_zero_distance(self):
        rng = np.random.default_rng(8)
        vs = unit_vectors(50, rng)
        idx = build(vs, seed=8)
        got = idx.search(vs[17], top_k=3)
        assert got[0] == (17, 0.0)


class TestStructure:
    def test_invariants_after_every_prefix(self):
        rng = np.random.default_rng(9)
        vs = unit_vectors(120, rng)
        idx = HnswIndex(seed=9)
        for i, v in enumerate(vs):
            idx.insert(i, v)
            idx.validate()

    def test_deterministic_builds(self):
        rng = np.random.default_rng(10)
        vs = unit_vectors(150, rng)
        a = build(vs, seed=42)
        b = build(vs, seed=42)
        assert a._levels == b._levels
        assert a._layers == b._layers
        assert a.entry_point == b.entry_point

    def test_seed_changes_levels(self):
        rng = np.random.default_rng(11)
        vs = unit_vectors(150, rng)
        a = build(vs, seed=1)
        b = build(vs, seed=2)
        assert a._levels != b._levels


class TestRetrieveCovisible:
    def test_exact_duplicate_at_zero_threshold(self):
        rng = np.random.default_rng(12)
        vs = unit_vectors(20, rng)
        idx = build(vs, seed=12)
        assert 11 in idx.retrieve_covisible(vs[11], sim_threshold=0.0)

    def test_far_descriptors_empty(self):
        rng = np.random.default_rng(13)
        vs = unit_vectors(20, rng)
        idx = build(vs, seed=13)
        q = unit_vectors(1, np.random.default_rng(999))[0]
        # random unit 512-vectors concentrate near distance sqrt(2)
        assert idx.retrieve_covisible(q, sim_threshold=0.5) == []

    def test_empty_index_returns_empty(self):
        rng = np.random.default_rng(14)
        assert HnswIndex().retrieve_covisible(unit_vectors(1, rng)[0], 0.5) == []


class TestSnapshot:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        vs = unit_vectors(200, rng)
        idx = build(vs, seed=15)
        path = tmp_path / "index.hnsw"
        idx.save(path)
        back = HnswIndex.load(path)
        assert back._levels == idx._levels
        assert back._layers == idx._layers
        assert back.entry_point == idx.entry_point
        for q in unit_vectors(20, rng):
            assert idx.search(q, top_k=5) == back.search(q, top_k=5)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "x.hnsw"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(SnapshotError):
            HnswIndex.load(path)

    def test_rejects_bad_version(self, tmp_path):
        rng = np.random.default_rng(16)
        idx = build(unit_vectors(3, rng), seed=16)
        path = tmp_path / "x.hnsw"
        idx.save(path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(SnapshotError):
            HnswIndex.load(path)

    def test_rejects_bad_dimension(self, tmp_path):
        rng = np.random.default_rng(17)
        idx = build(unit_vectors(3, rng), seed=17)
        path = tmp_path / "x.hnsw"
        idx.save(path)
        raw = bytearray(path.read_bytes())
        raw[16:20] = (256).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(SnapshotError):
            HnswIndex.load(path)

    def test_rejects_truncation(self, tmp_path):
        rng = np.random.default_rng(18)
        idx = build(unit_vectors(5, rng), seed=18)
        path = tmp_path / "x.hnsw"
        idx.save(path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 7])
        with pytest.raises(SnapshotError):
            HnswIndex.load(path)


def test_concurrent_search_during_insert():
    rng = np.random.default_rng(19)
    vs = unit_vectors(300, rng)
    idx = HnswIndex(seed=19)
    idx.insert(0, vs[0])
    errors = []
    stop = threading.Event()

    def writer():
        for i in range(1, len(vs)):
            idx.insert(i, vs[i])
        stop.set()

    def reader():
        r = np.random.default_rng(77)
        qs = unit_vectors(50, r)
        while not stop.is_set():
            q = qs[int(r.integers(0, len(qs)))]
            try:
                got = idx.search(q, top_k=3)
            except Exception as e:  # pragma: no cover
                errors.append(e)
                return
            if not got:
                errors.append(AssertionError("empty result"))
                return

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
