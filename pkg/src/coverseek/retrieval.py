"""Two-stage retrieval: ANN candidate elimination, then MaxMean re-ranking.

Stage 1 searches the HNSW gallery once per query row and unions the hits
by recording, eliminating recordings none of whose local embeddings come
close to the query.  Stage 2 scores each surviving recording with the
ordered MaxMean measure against its full stored embedding set; only these
stage-2 scores rank the output.  Recordings blocked in stage 1 are absent
from the result list and are treated as similarity 0 downstream.
"""

from dataclasses import dataclass, field
from pathlib import Path

from .encoder import LocalEmbeddingSet, forward
from .errors import DataIntegrityError
from .signal import extract_features
from .similarity import maxmean_ordered

DEFAULT_TOP_K = 50


@dataclass
class CandidateSet:
    """Stage-1 survivors: recording id -> chunk indices that matched."""

    matches: dict
    total_matches: int

    @property
    def n_recordings(self) -> int:
        return len(self.matches)


@dataclass
class RankedResultList:
    """Final ranking: (recording_id, score) by descending score, ties by id.

    ``stage1_candidates`` is the number of distinct recordings that survived
    stage 1 and ``maxmean_evals`` counts stage-2 score evaluations; the two
    are equal by construction and never exceed rows x k.
    """

    results: list
    stage1_candidates: int
    maxmean_evals: int
    query_id: str = ""

    def ids(self):
        return [rid for rid, _ in self.results]

    def truncated(self, top_n: int) -> "RankedResultList":
        return RankedResultList(
            results=self.results[:top_n],
            stage1_candidates=self.stage1_candidates,
            maxmean_evals=self.maxmean_evals,
            query_id=self.query_id,
        )


def stage1_candidates(query, index, k: int = DEFAULT_TOP_K, ef_search: int = None) -> CandidateSet:
    """Union of per-row Top-k ANN matches, grouped by source recording."""
    if not index.frozen:
        raise DataIntegrityError("stage 1 requires a frozen index")
    rows = query.vectors if isinstance(query, LocalEmbeddingSet) else query
    matches: dict = {}
    total = 0
    for row in rows:
        for hit in index.search(row, k, ef_search=ef_search):
            matches.setdefault(hit.recording_id, set()).add(hit.chunk_index)
            total += 1
    return CandidateSet(matches=matches, total_matches=total)


def stage2_rerank(query, candidates: CandidateSet, store) -> RankedResultList:
    """Score every candidate recording with ordered MaxMean and sort."""
    rows = query.vectors if isinstance(query, LocalEmbeddingSet) else query
    query_id = getattr(query, "recording_id", "")
    evals = 0
    scored = []
    for rid in candidates.matches:
        if rid not in store:
            raise DataIntegrityError(
                f"candidate {rid!r} missing from store: index and store out of sync"
            )
        gallery_rows = store.get(rid).astype(float)
        scored.append((rid, maxmean_ordered(rows, gallery_rows)))
        evals += 1
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RankedResultList(
        results=scored,
        stage1_candidates=candidates.n_recordings,
        maxmean_evals=evals,
        query_id=query_id,
    )


def query_pipeline(
    query,
    index,
    store,
    top_n: int = None,
    k: int = DEFAULT_TOP_K,
    ef_search: int = None,
    params=None,
    cqt_config=None,
) -> RankedResultList:
    """Full retrieval for one query: features -> stage 1 -> stage 2.

    ``query`` is either a :class:`LocalEmbeddingSet` or an audio file path,
    in which case ``params`` and ``cqt_config`` drive feature extraction.
    """
    if isinstance(query, (str, Path)):
        if params is None or cqt_config is None:
            raise ValueError("audio-path queries need encoder params and a CQT config")
        query = forward(extract_features(query, cqt_config), params)
    candidates = stage1_candidates(query, index, k=k, ef_search=ef_search)
    ranked = stage2_rerank(query, candidates, store)
    if top_n is not None:
        ranked = ranked.truncated(top_n)
    return ranked
