"""From-scratch HNSW graph index over gallery local embeddings.

Layered navigable small-world graph with geometric level assignment,
greedy descent through the upper layers and beam search (``ef``-bounded)
at each level.  Vectors are stored unit-normalized and compared by
``1 - cosine``, so smaller distance means more similar.  Neighbor
selection uses the simple closest-M heuristic; deletions are unsupported
(galleries are rebuilt, not edited).

After an explicit :meth:`HnswIndex.freeze` the structure is read-only and
safe for concurrent searches.  Snapshots are a little-endian binary format
(magic ``HNSW``) ending in a CRC32; see ``docs/formats.md``.
"""

import heapq
import io
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DataIntegrityError, FormatError

INDEX_MAGIC = b"HNSW"
INDEX_VERSION = 1


@dataclass
class SearchHit:
    """One nearest-neighbor result: gallery entry plus cosine score."""

    recording_id: str
    chunk_index: int
    score: float


class HnswIndex:
    """Approximate nearest-neighbor index for unit-norm vectors.

    Args:
        dim: vector dimensionality.
        m_conn: max links per node on layers above 0.
        m_conn_layer0: max links per node on the base layer.
        ef_construction: beam width while inserting.
        ef_search: default beam width while searching.
        seed: seed for the geometric level draws (build determinism).
    """

    def __init__(
        self,
        dim: int,
        m_conn: int = 16,
        m_conn_layer0: int = 32,
        ef_construction: int = 200,
        ef_search: int = 128,
        seed: int = 0,
    ):
        if dim < 1:
            raise ValueError("dim must be positive")
        if m_conn < 2 or m_conn_layer0 < 2:
            raise ValueError("connection limits must be >= 2")
        self.dim = int(dim)
        self.m_conn = int(m_conn)
        self.m_conn_layer0 = int(m_conn_layer0)
        self.ef_construction = int(ef_construction)
        self.ef_search = int(ef_search)
        self.seed = int(seed)
        self.level_lambda = 1.0 / math.log(m_conn)
        self.frozen = False
        self._rng = np.random.default_rng(seed)
        self._vectors = np.zeros((0, dim), dtype=np.float32)
        self._count = 0
        self._ids: list = []
        self._chunk_idx: list = []
        self._levels: list = []
        self._neighbors: list = []  # per node: list over layers of neighbor id lists
        self._entry = -1
        self._max_level = -1

    def __len__(self) -> int:
        return self._count

    @property
    def entry_point(self) -> int:
        return self._entry

    def recording_ids(self):
        return set(self._ids)

    # -- internals ---------------------------------------------------------

    def _grow(self, need: int) -> None:
        cap = self._vectors.shape[0]
        if need <= cap:
            return
        new_cap = max(64, need, int(cap * 1.5))
        grown = np.zeros((new_cap, self.dim), dtype=np.float32)
        grown[: self._count] = self._vectors[: self._count]
        self._vectors = grown

    def _draw_level(self) -> int:
        u = self._rng.random()
        while u <= 0.0:
            u = self._rng.random()
        return int(-math.log(u) * self.level_lambda)

    def _distances(self, query: np.ndarray, nodes) -> np.ndarray:
        return 1.0 - self._vectors[nodes] @ query

    def _search_layer(self, query, entries, layer, ef):
        """Beam search one layer; returns [(dist, node)] ascending."""
        visited = {node for _, node in entries}
        candidates = list(entries)
        heapq.heapify(candidates)
        best = [(-d, n) for d, n in entries]
        heapq.heapify(best)
        while candidates:
            dist, node = heapq.heappop(candidates)
            if len(best) >= ef and dist > -best[0][0]:
                break
            fresh = [n for n in self._neighbors[node][layer] if n not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            dists = self._distances(query, fresh)
            for d, n in zip(dists.tolist(), fresh):
                if len(best) < ef:
                    heapq.heappush(candidates, (d, n))
                    heapq.heappush(best, (-d, n))
                elif d < -best[0][0]:
                    heapq.heappush(candidates, (d, n))
                    heapq.heappushpop(best, (-d, n))
        out = [(-d, n) for d, n in best]
        out.sort()
        return out

    # -- build -------------------------------------------------------------

    def insert(self, vector, recording_id: str, chunk_index: int = 0) -> int:
        """Insert one gallery vector; returns its internal node id."""
        if self.frozen:
            raise RuntimeError("cannot insert into a frozen index")
        vec = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: index {self.dim}, vector {vec.shape[0]}")
        node = self._count
        self._grow(node + 1)
        self._vectors[node] = vec
        self._count += 1
        self._ids.append(str(recording_id))
        self._chunk_idx.append(int(chunk_index))
        level = self._draw_level()
        self._levels.append(level)
        self._neighbors.append([[] for _ in range(level + 1)])
        if node == 0:
            self._entry = 0
            self._max_level = level
            return node

        query = vec.astype(np.float32)
        d_entry = float(self._distances(query, [self._entry])[0])
        current = [(d_entry, self._entry)]
        for layer in range(self._max_level, level, -1):
            current = self._search_layer(query, current, layer, 1)
        for layer in range(min(level, self._max_level), -1, -1):
            candidates = self._search_layer(query, current, layer, self.ef_construction)
            limit = self.m_conn_layer0 if layer == 0 else self.m_conn
            selected = [n for _, n in candidates[:limit]]
            self._neighbors[node][layer] = list(selected)
            for nb in selected:
                links = self._neighbors[nb][layer]
                links.append(node)
                if len(links) > limit:
                    dists = self._distances(self._vectors[nb], links)
                    ranked = sorted(zip(dists.tolist(), links))
                    self._neighbors[nb][layer] = [n for _, n in ranked[:limit]]
            current = candidates
        if level > self._max_level:
            self._entry = node
            self._max_level = level
        return node

    def freeze(self, store=None) -> None:
        """Mark the index read-only; optionally verify referential integrity
        of every entry against an embedding store."""
        if store is not None:
            missing = sorted({rid for rid in self._ids if rid not in store})
            if missing:
                raise DataIntegrityError(
                    f"index references recordings absent from store: {missing[:5]}"
                )
        self.frozen = True

    # -- query -------------------------------------------------------------

    def search(self, query, k: int, ef_search: int = None):
        """Top-k entries by descending cosine similarity (approximate)."""
        if self._count == 0:
            raise ValueError("cannot search an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        vec = np.asarray(query, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.dim:
            raise ValueError(f"dimension mismatch: index {self.dim}, query {vec.shape[0]}")
        ef = max(self.ef_search if ef_search is None else int(ef_search), k)
        d_entry = float(self._distances(vec, [self._entry])[0])
        current = [(d_entry, self._entry)]
        for layer in range(self._max_level, 0, -1):
            current = self._search_layer(vec, current, layer, 1)
        found = self._search_layer(vec, current, 0, ef)
        hits = []
        for dist, node in found[: min(k, self._count)]:
            hits.append(
                SearchHit(
                    recording_id=self._ids[node],
                    chunk_index=self._chunk_idx[node],
                    score=1.0 - dist,
                )
            )
        return hits

    def layer0_connected(self) -> bool:
        """BFS reachability of every node on the base layer."""
        if self._count == 0:
            return True
        seen = {0}
        queue = [0]
        while queue:
            node = queue.pop()
            for nb in self._neighbors[node][0]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        return len(seen) == self._count

    # -- persistence -------------------------------------------------------

    def serialize(self) -> bytes:
        out = io.BytesIO()
        out.write(INDEX_MAGIC)
        out.write(struct.pack("<I", INDEX_VERSION))
        out.write(
            struct.pack(
                "<IIIIIq",
                self.dim,
                self.m_conn,
                self.m_conn_layer0,
                self.ef_construction,
                self.ef_search,
                self.seed,
            )
        )
        out.write(struct.pack("<QqI", self._count, self._entry, self._max_level + 1))
        for node in range(self._count):
            rid = self._ids[node].encode("utf-8")
            out.write(struct.pack("<H", len(rid)))
            out.write(rid)
            out.write(struct.pack("<IH", self._chunk_idx[node], self._levels[node]))
            for layer_links in self._neighbors[node]:
                out.write(struct.pack("<I", len(layer_links)))
                out.write(np.asarray(layer_links, dtype="<u4").tobytes())
        out.write(self._vectors[: self._count].astype("<f4").tobytes())
        payload = out.getvalue()
        return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

    @classmethod
    def deserialize(cls, data: bytes) -> "HnswIndex":
        if len(data) < 8:
            raise FormatError("file too short for an index snapshot")
        payload, crc_bytes = data[:-4], data[-4:]
        if payload[:4] != INDEX_MAGIC:
            raise FormatError("bad magic: not an index snapshot")
        (expected,) = struct.unpack("<I", crc_bytes)
        if zlib.crc32(payload) & 0xFFFFFFFF != expected:
            raise FormatError("checksum mismatch: index snapshot is corrupt")
        buf = io.BytesIO(payload)
        buf.read(4)
        (version,) = struct.unpack("<I", _take(buf, 4))
        if version != INDEX_VERSION:
            raise FormatError(f"unsupported index version {version}")
        dim, m, m0, efc, efs, seed = struct.unpack("<IIIIIq", _take(buf, 28))
        count, entry, n_levels = struct.unpack("<QqI", _take(buf, 20))
        index = cls(
            dim, m_conn=m, m_conn_layer0=m0, ef_construction=efc, ef_search=efs, seed=seed
        )
        for _ in range(count):
            (rid_len,) = struct.unpack("<H", _take(buf, 2))
            rid = _take(buf, rid_len).decode("utf-8")
            chunk_idx, level = struct.unpack("<IH", _take(buf, 6))
            layers = []
            for _ in range(level + 1):
                (n_links,) = struct.unpack("<I", _take(buf, 4))
                links = np.frombuffer(_take(buf, 4 * n_links), dtype="<u4")
                layers.append([int(v) for v in links])
            index._ids.append(rid)
            index._chunk_idx.append(chunk_idx)
            index._levels.append(level)
            index._neighbors.append(layers)
        raw = _take(buf, count * dim * 4)
        if buf.read(1):
            raise FormatError("trailing bytes after index payload")
        index._vectors = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
        index._count = int(count)
        index._entry = int(entry)
        index._max_level = int(n_levels) - 1
        index.frozen = True
        return index

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.serialize())

    @classmethod
    def load(cls, path) -> "HnswIndex":
        with open(path, "rb") as fh:
            return cls.deserialize(fh.read())


def _take(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("truncated index snapshot")
    return data
