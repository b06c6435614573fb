"""Incremental keyframe database over 512-D global descriptors.

A hierarchical small-world graph: each inserted keyframe gets a random
level; higher layers hold exponentially fewer nodes and provide long-range
hops, layer 0 holds everything. Insertion descends greedily from the entry
point to the node's level, then runs a beam search per layer to pick its
neighbors; retrieval descends the same way and finishes with a beam search
on layer 0. Distances are L2 on unit vectors (ordering-equivalent to
cosine similarity).

The database only grows: keyframes are never removed during a mission.
Insertions must come from a single writer; searches running concurrently
with an insert observe atomic whole-list neighbor updates and an entry
point that is republished last, so they always traverse a complete graph.
"""

from __future__ import annotations

import heapq
import math
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import AglocError

DESCRIPTOR_DIM = 512

_SNAPSHOT_MAGIC = b"HNSW"
_SNAPSHOT_VERSION = 1


class DuplicateId(AglocError):
    """Keyframe id already present in the index."""


class EmptyIndex(AglocError):
    """Search on an index with no entries."""


class SnapshotError(AglocError):
    """Snapshot file is malformed or incompatible."""


@dataclass(frozen=True)
class GlobalDescriptor:
    """L2-normalized 512-vector used for place recognition."""

    values: np.ndarray = field(default_factory=lambda: np.zeros(DESCRIPTOR_DIM))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if v.shape[0] != DESCRIPTOR_DIM:
            raise ValueError(f"descriptor must have dimension {DESCRIPTOR_DIM}")
        if not np.all(np.isfinite(v)):
            raise ValueError("descriptor has non-finite entries")
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"descriptor norm {n:.3g} is not 1 within 1e-6")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def _as_vector(d) -> np.ndarray:
    if isinstance(d, GlobalDescriptor):
        return d.values
    return GlobalDescriptor(np.asarray(d)).values


class HnswIndex:
    """Hierarchical navigable small-world index over keyframe descriptors."""

    def __init__(self, m: int = 16, ef_construction: int = 200,
                 ef_search: int = 64, seed: int = 0):
        if m < 2:
            raise ValueError("m must be at least 2")
        self.m = int(m)
        self.ef_construction = int(ef_construction)
        self.ef_search = int(ef_search)
        self.level_multiplier = 1.0 / math.log(self.m)
        self._seed = int(seed)
        self._rng = np.random.default_rng(seed)
        self._layers: list[dict[int, list[int]]] = []    # layer -> id -> neighbor ids
        self._levels: dict[int, int] = {}
        self._row: dict[int, int] = {}                   # id -> row in the matrix
        self._matrix = np.zeros((64, DESCRIPTOR_DIM), dtype=np.float32)
        self._size = 0
        self._entry: int | None = None
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._levels)

    def __contains__(self, keyframe_id: int) -> bool:
        return keyframe_id in self._levels

    @property
    def entry_point(self) -> int | None:
        return self._entry

    @property
    def layer_count(self) -> int:
        return len(self._layers)

    def vector_of(self, keyframe_id: int) -> np.ndarray:
        return self._matrix[self._row[keyframe_id]]

    def _store_vector(self, keyframe_id: int, vec: np.ndarray) -> None:
        if self._size == len(self._matrix):
            grown = np.zeros((2 * len(self._matrix), DESCRIPTOR_DIM), dtype=np.float32)
            grown[:self._size] = self._matrix[:self._size]
            self._matrix = grown
        self._matrix[self._size] = vec
        self._row[keyframe_id] = self._size
        self._size += 1

    def _distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.linalg.norm(a - b))

    def _all_dists(self, q: np.ndarray) -> np.ndarray:
        """Distances from q to every stored vector; one BLAS pass makes the
        graph walk O(1) per distance lookup at the scales this index serves."""
        return np.linalg.norm(self._matrix[:self._size] - q, axis=1)

    def _dist_to(self, q: np.ndarray, keyframe_id: int) -> float:
        return float(np.linalg.norm(self._matrix[self._row[keyframe_id]] - q))

    def _dist_many(self, q: np.ndarray, ids: list[int]) -> np.ndarray:
        rows = [self._row[i] for i in ids]
        return np.linalg.norm(self._matrix[rows] - q, axis=1)

    def insert(self, keyframe_id: int, descriptor) -> None:
        """Add a keyframe, drawing its level from the seeded generator."""
        vec = _as_vector(descriptor)
        with self._write_lock:
            if keyframe_id in self._levels:
                raise DuplicateId(f"keyframe {keyframe_id} already indexed")
            u = 1.0 - self._rng.random()       # uniform in (0, 1]
            level = int(math.floor(-math.log(u) * self.level_multiplier))
            self._store_vector(keyframe_id, vec)
            self._levels[keyframe_id] = level

            if self._entry is None:
                for _ in range(level + 1):
                    self._layers.append({})
                for lvl in range(level + 1):
                    self._layers[lvl][keyframe_id] = []
                self._entry = keyframe_id
                return

            dists = self._all_dists(vec)
            cur = self._entry
            cur_dist = float(dists[self._row[cur]])
            top = len(self._layers) - 1
            for lvl in range(top, level, -1):
                cur, cur_dist = self._greedy_descend(vec, dists, cur, cur_dist, lvl)

            beam = [(cur_dist, cur)]
            for lvl in range(min(level, top), -1, -1):
                beam = self._search_layer(vec, dists, beam, lvl, self.ef_construction)
                cap = self.m if lvl > 0 else 2 * self.m
                # extend by one graph hop before pruning; materially better
                # links on near-equidistant high-dimensional data
                pool = {i for _, i in beam}
                for _, i in beam:
                    pool.update(self._layers[lvl][i])
                pool.discard(keyframe_id)
                chosen = self._prune_neighbors(keyframe_id, sorted(pool), cap,
                                               dists=dists)
                self._layers[lvl][keyframe_id] = list(chosen)
                for nb in chosen:
                    self._link_back(lvl, nb, keyframe_id, cap)

            # grow layers above the old top; entry point republished last
            if level > top:
                for _ in range(top + 1, level + 1):
                    self._layers.append({keyframe_id: []})
                self._entry = keyframe_id

    def _link_back(self, lvl: int, node: int, new_id: int, cap: int) -> None:
        lst = self._layers[lvl][node]
        if new_id in lst:
            return
        lst = lst + [new_id]
        if len(lst) > cap:
            lst = self._prune_neighbors(node, lst, cap)
        self._layers[lvl][node] = lst   # atomic whole-list replacement

    def _prune_neighbors(self, node: int, candidates: list[int], cap: int,
                         dists: np.ndarray | None = None) -> list[int]:
        """Cap an overflowing list, preferring diverse links: a candidate is
        kept only while it is closer to the node than to every kept one, the
        remainder is filled with the nearest pruned candidates."""
        base = self._matrix[self._row[node]]
        rows = [self._row[c] for c in candidates]
        vecs = self._matrix[rows]
        if dists is not None:
            d = dists[rows]
        else:
            d = np.linalg.norm(vecs - base, axis=1)
        order = np.lexsort((np.array(candidates), d))[:4 * cap]
        sub = vecs[order].astype(np.float64)
        sq = np.einsum("ij,ij->i", sub, sub)
        pair2 = (sq[:, None] + sq[None, :] - 2.0 * (sub @ sub.T)).tolist()
        d2 = (d[order] ** 2).tolist()
        kept: list[int] = []
        spare: list[int] = []
        for i in range(len(order)):
            if len(kept) >= cap:
                break
            row_i = pair2[i]
            ti = d2[i]
            diverse = True
            for j in kept:
                if row_i[j] <= ti:
                    diverse = False
                    break
            if diverse:
                kept.append(i)
            else:
                spare.append(i)
        for i in spare:
            if len(kept) >= cap:
                break
            kept.append(i)
        return [candidates[order[i]] for i in kept]

    def _dist_lookup(self, q: np.ndarray, dists: np.ndarray):
        """Cache reader tolerant of nodes appended by a concurrent insert."""
        row = self._row
        limit = len(dists)

        def dist(keyframe_id: int) -> float:
            r = row[keyframe_id]
            if r < limit:
                return float(dists[r])
            return float(np.linalg.norm(self._matrix[r] - q))

        return dist

    def _greedy_descend(self, q: np.ndarray, dists: np.ndarray,
                        cur: int, cur_dist: float, lvl: int):
        improved = True
        layer = self._layers[lvl]
        dist = self._dist_lookup(q, dists)
        while improved:
            improved = False
            for nb in layer.get(cur, []):
                d = dist(nb)
                if d < cur_dist:
                    cur, cur_dist = nb, d
                    improved = True
        return cur, cur_dist

    def _search_layer(self, q: np.ndarray, dists: np.ndarray,
                      entries, lvl: int, ef: int):
        """Beam search; entries and result are lists of (distance, id)."""
        layer = self._layers[lvl]
        dist = self._dist_lookup(q, dists)
        visited = {i for _, i in entries}
        candidates = list(entries)           # min-heap by distance
        heapq.heapify(candidates)
        result = [(-d, i) for d, i in entries]  # max-heap via negation
        heapq.heapify(result)
        while candidates:
            d, node = heapq.heappop(candidates)
            if len(result) >= ef and d > -result[0][0]:
                break
            for nb in layer.get(node, []):
                if nb in visited:
                    continue
                visited.add(nb)
                dn = dist(nb)
                if len(result) < ef or dn < -result[0][0]:
                    heapq.heappush(candidates, (dn, nb))
                    heapq.heappush(result, (-dn, nb))
                    if len(result) > ef:
                        heapq.heappop(result)
        return [(-nd, i) for nd, i in result]

    def search(self, descriptor, top_k: int, ef: int | None = None):
        """k nearest keyframes as (keyframe_id, distance), ascending."""
        if top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self._entry is None:
            raise EmptyIndex("search on empty index")
        q = _as_vector(descriptor)
        if ef is None:
            # deep result lists get a proportionally wider beam; the base
            # beam width only has to place the single nearest neighbor well
            ef = max(self.ef_search, 20 * top_k)
        ef = max(int(ef), top_k)
        dists = self._all_dists(q)
        cur = self._entry
        cur_dist = self._dist_lookup(q, dists)(cur)
        # descend with a narrow beam; upper layers are tiny, and a single
        # greedy walker is noticeably lossier on near-equidistant data
        beam = [(cur_dist, cur)]
        upper_ef = min(32, ef)
        for lvl in range(len(self._layers) - 1, 0, -1):
            beam = self._search_layer(q, dists, beam, lvl, upper_ef)
        found = self._search_layer(q, dists, beam, 0, ef)
        found.sort(key=lambda e: (e[0], e[1]))
        return [(i, d) for d, i in found[:top_k]]

    def retrieve_covisible(self, descriptor, sim_threshold: float):
        """Keyframe ids whose descriptor distance is within the threshold."""
        if not (0 <= sim_threshold < 2):
            raise ValueError("sim_threshold must lie in [0, 2)")
        if self._entry is None:
            return []
        hits = self.search(descriptor, top_k=max(self.ef_search, 1),
                           ef=self.ef_search)
        return [i for i, d in hits if d <= sim_threshold]

    def validate(self) -> None:
        """Walk all layers and check the structural invariants."""
        for lvl, layer in enumerate(self._layers):
            cap = self.m if lvl > 0 else 2 * self.m
            for node, nbrs in layer.items():
                level = self._levels.get(node)
                if level is None or level < lvl:
                    raise AssertionError(f"node {node} present above its level")
                if len(nbrs) > cap:
                    raise AssertionError(f"node {node} exceeds degree cap at layer {lvl}")
                if len(set(nbrs)) != len(nbrs):
                    raise AssertionError(f"node {node} has duplicate neighbors")
                for nb in nbrs:
                    if nb not in layer:
                        raise AssertionError(f"dangling neighbor {nb} at layer {lvl}")
        for node, level in self._levels.items():
            for lvl in range(level + 1):
                if node not in self._layers[lvl]:
                    raise AssertionError(f"node {node} missing from layer {lvl}")
        if self._levels:
            top = len(self._layers) - 1
            if self._entry not in self._layers[top]:
                raise AssertionError("entry point is not on the topmost layer")

    # --- snapshot persistence ---

    def save(self, path) -> None:
        """Versioned little-endian snapshot of the whole graph."""
        with open(path, "wb") as f:
            f.write(_SNAPSHOT_MAGIC)
            f.write(struct.pack("<IIIII", _SNAPSHOT_VERSION, self.m,
                                self.ef_construction, DESCRIPTOR_DIM,
                                len(self._levels)))
            for node in self._levels:   # insertion order
                level = self._levels[node]
                f.write(struct.pack("<QI", node, level))
                f.write(self._matrix[self._row[node]].astype("<f4").tobytes())
                for lvl in range(level + 1):
                    nbrs = self._layers[lvl][node]
                    f.write(struct.pack("<I", len(nbrs)))
                    f.write(struct.pack(f"<{len(nbrs)}Q", *nbrs))

    @classmethod
    def load(cls, path, ef_search: int = 64, seed: int = 0) -> "HnswIndex":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != _SNAPSHOT_MAGIC:
            raise SnapshotError("bad snapshot magic")
        if len(data) < 24:
            raise SnapshotError("snapshot header truncated")
        version, m, efc, dim, count = struct.unpack_from("<IIIII", data, 4)
        if version != _SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        if dim != DESCRIPTOR_DIM:
            raise SnapshotError(f"descriptor dimension {dim} does not match {DESCRIPTOR_DIM}")
        index = cls(m=m, ef_construction=efc, ef_search=ef_search, seed=seed)
        off = 24
        max_level = -1
        for _ in range(count):
            if off + 12 + 4 * dim > len(data):
                raise SnapshotError("snapshot node truncated")
            node, level = struct.unpack_from("<QI", data, off)
            off += 12
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off).copy()
            off += 4 * dim
            index._store_vector(node, vec)
            index._levels[node] = level
            while len(index._layers) <= level:
                index._layers.append({})
            for lvl in range(level + 1):
                if off + 4 > len(data):
                    raise SnapshotError("snapshot neighbor list truncated")
                (n,) = struct.unpack_from("<I", data, off)
                off += 4
                if off + 8 * n > len(data):
                    raise SnapshotError("snapshot neighbor list truncated")
                nbrs = list(struct.unpack_from(f"<{n}Q", data, off))
                off += 8 * n
                index._layers[lvl][node] = nbrs
            if level > max_level:
                max_level = level
                index._entry = node
        if off != len(data):
            raise SnapshotError("trailing bytes after snapshot")
        return index


def brute_force_search(vectors: dict[int, np.ndarray], q, top_k: int):
    """Exhaustive scan used as the retrieval oracle in tests and benchmarks."""
    q = _as_vector(q)
    ids = list(vectors.keys())
    d = np.linalg.norm(np.stack([vectors[i] for i in ids]) - q, axis=1)
    order = np.lexsort((np.array(ids), d))
    return [(ids[i], float(d[i])) for i in order[:top_k]]
