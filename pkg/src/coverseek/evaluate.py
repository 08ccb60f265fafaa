"""Query-set construction and retrieval metrics (mAP, MR1).

Each selected gallery recording spawns a query set: the full track plus
fixed-duration crops at seeded random offsets.  A query's own source
recording is removed from the ranking before metrics are computed (no
leakage); relevance is sharing a clique id in the manifest.  Recordings
blocked in retrieval stage 1 are unranked and contribute zero precision;
a query whose covers are all blocked gets the documented MR1 sentinel
``gallery_size + 1``.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .encoder import LocalEmbeddingSet, forward, mean_pooled_embedding
from .errors import DataIntegrityError
from .retrieval import query_pipeline
from .signal import AudioBuffer, extract_features_from_audio, load_audio

logger = logging.getLogger(__name__)

DEFAULT_DURATIONS = (6, 10, 15, 20, 25, 30, 40, 50, 60)


def worker_count() -> int:
    """Worker cap from the COVERSEEK_THREADS environment variable (default 1)."""
    raw = os.environ.get("COVERSEEK_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class QuerySpec:
    """One source recording and the crop durations to query it at."""

    source_id: str
    durations: tuple = DEFAULT_DURATIONS
    include_full: bool = True
    seed: int = 0


@dataclass
class QueryVariant:
    source_id: str
    duration_s: float  # None marks the full-length variant
    offset_s: float
    audio: AudioBuffer


@dataclass
class DurationRow:
    duration: str
    map_score: float
    mr1: float
    n_queries: int


@dataclass
class EvalReport:
    rows: list
    per_query: list
    n_flagged: int
    gallery_size: int
    config: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "gallery_size": self.gallery_size,
            "n_flagged_queries": self.n_flagged,
            "rows": [
                {
                    "duration_s": r.duration,
                    "mAP": r.map_score,
                    "MR1": r.mr1,
                    "n_queries": r.n_queries,
                }
                for r in self.rows
            ],
            "per_query": self.per_query,
            "config": self.config,
        }

    def to_csv(self) -> str:
        lines = ["duration_s,mAP,MR1,n_queries"]
        for r in self.rows:
            lines.append(f"{r.duration},{r.map_score:.6f},{r.mr1:.4f},{r.n_queries}")
        return "\n".join(lines) + "\n"


def build_query_set(source_audio: AudioBuffer, spec: QuerySpec) -> "list[QueryVariant]":
    """Render the query variants of one source recording.

    Crops longer than the source are skipped with a warning.  Offsets are
    reproducible from the spec seed.
    """
    rng = np.random.default_rng(spec.seed)
    variants = []
    if spec.include_full:
        variants.append(
            QueryVariant(spec.source_id, None, 0.0, source_audio)
        )
    total = source_audio.duration_seconds
    sr = source_audio.sample_rate
    for dur in spec.durations:
        # draw the offset before the skip check so seeded offsets stay
        # aligned across sources of different lengths
        u = rng.random()
        if dur > total:
            logger.warning(
                "skipping %ss crop of %s: source is only %.1fs",
                dur,
                spec.source_id,
                total,
            )
            continue
        offset = u * (total - dur)
        start = int(round(offset * sr))
        seg = source_audio.samples[start : start + int(round(dur * sr))]
        variants.append(
            QueryVariant(
                spec.source_id,
                float(dur),
                offset,
                AudioBuffer(samples=seg, sample_rate=sr),
            )
        )
    return variants


def average_precision(ranked_ids, relevant_ids) -> float:
    """AP over a deduplicated ranking; unranked relevant items score zero."""
    relevant = set(relevant_ids)
    if not relevant:
        raise ValueError("empty relevant set")
    if len(set(ranked_ids)) != len(ranked_ids):
        raise ValueError("ranked list contains duplicates")
    hits = 0
    total = 0.0
    for rank, rid in enumerate(ranked_ids, start=1):
        if rid in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def mean_rank_first(ranked_ids, relevant_ids, gallery_size: int) -> int:
    """1-based rank of the first relevant item; ``gallery_size + 1`` when
    every relevant item was blocked out of the ranking."""
    relevant = set(relevant_ids)
    if not relevant:
        raise ValueError("empty relevant set")
    for rank, rid in enumerate(ranked_ids, start=1):
        if rid in relevant:
            return rank
    return gallery_size + 1


def _embed_query(audio: AudioBuffer, params, cqt_config, source_id, global_pool):
    feats = extract_features_from_audio(audio, cqt_config, source_id)
    embedded = forward(feats, params)
    if global_pool:
        pooled = mean_pooled_embedding(embedded.vectors)
        return LocalEmbeddingSet(vectors=pooled[None, :], recording_id=source_id)
    return embedded


def evaluate(
    index,
    store,
    manifest,
    specs,
    params,
    cqt_config,
    k: int = 50,
    ef_search: int = None,
    global_pool: bool = False,
    audio_loader=None,
    embed_fn=None,
    config_echo: dict = None,
) -> EvalReport:
    """Run every query variant through retrieval and aggregate mAP and MR1.

    ``manifest`` is a sequence of entries with ``recording_id``, ``path``
    and ``clique_id`` attributes; the gallery in ``store``/``index`` must
    have been built from the same full-length recordings.  ``audio_loader``
    can override how source audio is located (defaults to reading the
    manifest path); ``embed_fn(audio, source_id)`` overrides the default
    feature-extract-and-encode query embedding.
    """
    by_id = {entry.recording_id: entry for entry in manifest}
    cliques: dict = {}
    for entry in manifest:
        cliques.setdefault(entry.clique_id, set()).add(entry.recording_id)
    gallery_size = len(store)

    variants = []
    for spec in specs:
        if spec.source_id not in by_id:
            raise DataIntegrityError(f"query source {spec.source_id!r} not in manifest")
        entry = by_id[spec.source_id]
        audio = (
            audio_loader(entry) if audio_loader is not None else load_audio(entry.path)
        )
        variants.extend(build_query_set(audio, spec))

    def run_one(variant: QueryVariant):
        if embed_fn is not None:
            query = embed_fn(variant.audio, variant.source_id)
        else:
            query = _embed_query(
                variant.audio, params, cqt_config, variant.source_id, global_pool
            )
        ranked = query_pipeline(query, index, store, k=k, ef_search=ef_search)
        return variant, ranked

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, variants))
    else:
        outcomes = [run_one(v) for v in variants]

    per_duration: dict = {}
    per_query = []
    n_flagged = 0
    for variant, ranked in outcomes:
        source = variant.source_id
        ranked_ids = [rid for rid in ranked.ids() if rid != source]
        clique = cliques[by_id[source].clique_id]
        relevant = {rid for rid in clique if rid != source and rid in store}
        if not relevant:
            n_flagged += 1
            logger.warning("query %s has no relevant gallery items; excluded", source)
            continue
        ap = average_precision(ranked_ids, relevant)
        mr1 = mean_rank_first(ranked_ids, relevant, gallery_size)
        key = "full" if variant.duration_s is None else f"{variant.duration_s:g}"
        per_duration.setdefault(key, []).append((ap, mr1))
        per_query.append(
            {
                "source_id": source,
                "duration_s": key,
                "offset_s": round(variant.offset_s, 3),
                "ap": ap,
                "first_rank": mr1,
                "n_relevant": len(relevant),
                "stage1_candidates": ranked.stage1_candidates,
            }
        )

    def sort_key(item):
        return (item[0] == "full", float("inf") if item[0] == "full" else float(item[0]))

    rows = []
    for key, values in sorted(per_duration.items(), key=sort_key):
        aps = [ap for ap, _ in values]
        ranks = [mr for _, mr in values]
        rows.append(
            DurationRow(
                duration=key,
                map_score=float(np.mean(aps)),
                mr1=float(np.mean(ranks)),
                n_queries=len(values),
            )
        )
    return EvalReport(
        rows=rows,
        per_query=per_query,
        n_flagged=n_flagged,
        gallery_size=gallery_size,
        config=config_echo or {},
    )
