"""Command-line operator surface.

Subcommands cover the whole pipeline: ``synth`` (synthetic dataset),
``train``, ``ingest`` (embed a gallery into a store), ``index-build``,
``query``, ``eval`` and ``features`` (debug dump of the feature tensor).
Every command prints a machine-readable JSON summary (or writes it to
``--out``) that echoes the effective configuration; diagnostics go to
stderr.  Exit codes: 0 success, 2 configuration, 3 I/O, 4 data integrity.

Configuration is a JSON file with sections ``cqt``, ``encoder``, ``synth``,
``train``, ``index`` and ``retrieval``; unknown sections or keys are
rejected.  Command-line flags override file values.  The environment
variable ``COVERSEEK_THREADS`` caps worker concurrency during evaluation.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import store as store_mod
from .encoder import (
    EncoderConfig,
    LocalEmbeddingSet,
    forward,
    init_params,
    load_params,
    mean_pooled_embedding,
    save_params,
)
from .errors import (
    AudioReadError,
    ConfigError,
    CoverseekError,
    DataIntegrityError,
    FormatError,
    UnsupportedEncodingError,
)
from .evaluate import QuerySpec, evaluate
from .index import HnswIndex
from .retrieval import query_pipeline
from .signal import CqtConfig, extract_features
from .store import EmbeddingStore
from .train import (
    Dataset,
    SyntheticCliqueConfig,
    TrainConfig,
    generate_synthetic_dataset,
    load_manifest,
    train,
    write_loss_curve,
)

logger = logging.getLogger("coverseek")

_INDEX_KEYS = {"m_conn", "m_conn_layer0", "ef_construction", "ef_search", "seed"}
_RETRIEVAL_KEYS = {"k", "ef_search", "top_n"}
_SECTIONS = {"cqt", "encoder", "synth", "train", "index", "retrieval"}


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(cfg) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build_dataclass(cls, section: dict, overrides: dict = None):
    allowed = {f.name for f in dataclasses.fields(cls)}
    merged = dict(section or {})
    unknown = set(merged) - allowed
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__}: {exc}") from exc


def _plain_section(section: dict, allowed: set, name: str) -> dict:
    section = dict(section or {})
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys for {name}: {sorted(unknown)}")
    return section


def _config_echo(**parts) -> dict:
    echo = {}
    for name, value in parts.items():
        if value is None:
            continue
        if dataclasses.is_dataclass(value):
            value = dataclasses.asdict(value)
            for key, item in list(value.items()):
                if isinstance(item, frozenset):
                    value[key] = sorted(item)
                elif isinstance(item, tuple):
                    value[key] = list(item)
        echo[name] = value
    return echo


def _emit(summary: dict, out_path) -> None:
    text = json.dumps(summary, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text + "\n")
        print(json.dumps({"written": str(out_path)}))
    else:
        print(text)


def _build_store(manifest, params, cqt_cfg, global_pool: bool) -> EmbeddingStore:
    store = EmbeddingStore(params.config.out_dim)
    for entry in manifest:
        feats = extract_features(entry.path, cqt_cfg, entry.recording_id)
        embedded = forward(feats, params)
        rows = embedded.vectors
        if global_pool:
            rows = mean_pooled_embedding(rows)[None, :]
        duration = feats.chunk_offsets_seconds[-1] + cqt_cfg.chunk_seconds
        store.put(entry.recording_id, rows.astype(np.float32), float(duration))
    return store


def _cmd_synth(args, cfg):
    overrides = {"seed": args.seed, "n_cliques": args.cliques, "versions_per_clique": args.versions}
    synth_cfg = _build_dataclass(SyntheticCliqueConfig, cfg.get("synth"), overrides)
    if args.out is None:
        raise ConfigError("synth requires --out DIRECTORY")
    entries = generate_synthetic_dataset(synth_cfg, args.out)
    summary = {
        "out_dir": str(args.out),
        "manifest": str(Path(args.out) / "manifest.csv"),
        "n_recordings": len(entries),
        "n_cliques": synth_cfg.n_cliques,
        "config": _config_echo(synth=synth_cfg),
    }
    _emit(summary, None)
    return 0


def _cmd_train(args, cfg):
    cqt_cfg = _build_dataclass(CqtConfig, cfg.get("cqt"))
    enc_cfg = _build_dataclass(EncoderConfig, cfg.get("encoder"))
    overrides = {"seed": args.seed, "objective": args.objective, "epochs": args.epochs}
    train_cfg = _build_dataclass(TrainConfig, cfg.get("train"), overrides)
    manifest = load_manifest(_manifest_path(args.data))
    dataset = Dataset(manifest, cqt_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(enc_cfg, rng)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(params, dataset, train_cfg, cqt_cfg, snapshot_dir=out_dir)
    model_path = out_dir / "model.cvst"
    save_params(result.params, model_path)
    curve_path = out_dir / "loss_curve.csv"
    write_loss_curve(result.loss_curve, curve_path)
    summary = {
        "model": str(model_path),
        "loss_curve": str(curve_path),
        "steps": len(result.loss_curve),
        "final_total_loss": result.loss_curve[-1][3] if result.loss_curve else None,
        "config": _config_echo(cqt=cqt_cfg, encoder=enc_cfg, train=train_cfg),
    }
    _emit(summary, None)
    return 0


def _cmd_ingest(args, cfg):
    cqt_cfg = _build_dataclass(CqtConfig, cfg.get("cqt"))
    params = load_params(args.model)
    manifest = load_manifest(_manifest_path(args.data))
    store = _build_store(manifest, params, cqt_cfg, args.global_pool)
    store.write_file(args.out)
    summary = {
        "store": str(args.out),
        "n_recordings": len(store),
        "dim": store.dim,
        "global_pool": bool(args.global_pool),
        "config": _config_echo(cqt=cqt_cfg, encoder=params.config),
    }
    _emit(summary, None)
    return 0


def _cmd_index_build(args, cfg):
    index_cfg = _plain_section(cfg.get("index"), _INDEX_KEYS, "index")
    if args.seed is not None:
        index_cfg["seed"] = args.seed
    store = EmbeddingStore.read_file(args.store)
    index = HnswIndex(store.dim, **index_cfg)
    for rid, vecs, _dur in store.iterate():
        for chunk_i, vec in enumerate(vecs):
            index.insert(vec, rid, chunk_i)
    index.freeze(store)
    index.save(args.out)
    summary = {
        "index": str(args.out),
        "n_vectors": len(index),
        "n_recordings": len(store),
        "layer0_connected": index.layer0_connected(),
        "config": _config_echo(index=index_cfg),
    }
    _emit(summary, None)
    return 0


def _cmd_query(args, cfg):
    cqt_cfg = _build_dataclass(CqtConfig, cfg.get("cqt"))
    retrieval_cfg = _plain_section(cfg.get("retrieval"), _RETRIEVAL_KEYS, "retrieval")
    k = args.topk or retrieval_cfg.get("k", 50)
    ef_search = args.ef_search or retrieval_cfg.get("ef_search")
    top_n = retrieval_cfg.get("top_n")
    params = load_params(args.model)
    store = EmbeddingStore.read_file(args.store)
    index = HnswIndex.load(args.index)
    if args.audio:
        feats = extract_features(args.audio, cqt_cfg)
        query = forward(feats, params)
        if args.global_pool:
            query = LocalEmbeddingSet(
                mean_pooled_embedding(query.vectors)[None, :], query.recording_id
            )
    elif args.recording_id:
        query = LocalEmbeddingSet(
            store.get(args.recording_id).astype(np.float64), args.recording_id
        )
    else:
        raise ConfigError("query requires --audio FILE or --recording-id ID")
    ranked = query_pipeline(query, index, store, top_n=top_n, k=k, ef_search=ef_search)
    summary = {
        "query_id": query.recording_id,
        "results": [
            {"recording_id": rid, "score": score, "rank": rank}
            for rank, (rid, score) in enumerate(ranked.results, start=1)
        ],
        "stage1_candidates": ranked.stage1_candidates,
        "maxmean_evals": ranked.maxmean_evals,
        "config": _config_echo(cqt=cqt_cfg, retrieval={"k": k, "ef_search": ef_search, "top_n": top_n}),
    }
    _emit(summary, args.out)
    return 0


def _cmd_eval(args, cfg):
    cqt_cfg = _build_dataclass(CqtConfig, cfg.get("cqt"))
    retrieval_cfg = _plain_section(cfg.get("retrieval"), _RETRIEVAL_KEYS, "retrieval")
    k = args.topk or retrieval_cfg.get("k", 50)
    ef_search = args.ef_search or retrieval_cfg.get("ef_search")
    params = load_params(args.model)
    store = EmbeddingStore.read_file(args.store)
    index = HnswIndex.load(args.index)
    manifest = load_manifest(_manifest_path(args.data))
    durations = _parse_durations(args.durations)
    seed = args.seed if args.seed is not None else 0
    sources = [e.recording_id for e in manifest if e.recording_id in store]
    if args.max_sources:
        sources = sources[: args.max_sources]
    specs = [
        QuerySpec(
            source_id=rid,
            durations=durations,
            include_full=not args.skip_full,
            seed=seed + i,
        )
        for i, rid in enumerate(sources)
    ]
    report = evaluate(
        index,
        store,
        manifest,
        specs,
        params,
        cqt_cfg,
        k=k,
        ef_search=ef_search,
        global_pool=args.global_pool,
        config_echo=_config_echo(
            cqt=cqt_cfg,
            retrieval={"k": k, "ef_search": ef_search},
            eval={"durations": list(durations), "seed": seed},
        ),
    )
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(
            json.dumps(report.to_json_dict(), indent=2) + "\n"
        )
        (out_dir / "report.csv").write_text(report.to_csv())
        print(json.dumps({"written": str(out_dir)}))
    else:
        print(json.dumps(report.to_json_dict(), indent=2))
    return 0


def _cmd_features(args, cfg):
    cqt_cfg = _build_dataclass(CqtConfig, cfg.get("cqt"))
    if args.out is None:
        raise ConfigError("features requires --out FILE")
    feats = extract_features(args.audio, cqt_cfg)
    store_mod.write_tensors(
        args.out,
        {
            "data": feats.data,
            "chunk_offsets_seconds": feats.chunk_offsets_seconds,
            "recording_id": np.frombuffer(
                feats.recording_id.encode("utf-8"), dtype=np.uint8
            ),
        },
    )
    summary = {
        "features": str(args.out),
        "shape": list(feats.data.shape),
        "config": _config_echo(cqt=cqt_cfg),
    }
    _emit(summary, None)
    return 0


def _manifest_path(data_arg) -> Path:
    path = Path(data_arg)
    if path.is_dir():
        path = path / "manifest.csv"
    return path


def _parse_durations(raw) -> tuple:
    if not raw:
        return (6, 10, 15, 20, 25, 30, 40, 50, 60)
    try:
        return tuple(float(part) if "." in part else int(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --durations value {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coverseek",
        description="Cover-song identification for short queries: local "
        "embeddings, HNSW candidate search and MaxMean re-ranking.",
    )
    parser.add_argument("--config", help="JSON config file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override seeds")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cover-clique dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--cliques", type=int, default=None)
    p.add_argument("--versions", type=int, default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest dataset")
    p.add_argument("--data", required=True, help="manifest.csv or its directory")
    p.add_argument("--out", default=".", help="output directory for model artifacts")
    p.add_argument("--objective", choices=["lal", "baseline"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ingest", help="embed gallery recordings into a store")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="store file to write")
    p.add_argument("--global-pool", action="store_true", help="one mean-pooled vector per recording")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("index-build", help="build an HNSW index from a store")
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_index_build)

    p = sub.add_parser("query", help="retrieve covers for one query")
    p.add_argument("--audio", default=None)
    p.add_argument("--recording-id", default=None, help="query by stored embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--topk", type=int, default=None, help="stage-1 neighbors per query row")
    p.add_argument("--ef-search", type=int, default=None)
    p.add_argument("--global-pool", action="store_true")
    p.add_argument("--out", default=None, help="write the JSON result here")
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("eval", help="mAP/MR1 evaluation over a query set")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--durations", default=None, help="comma list, e.g. 6,30,60")
    p.add_argument("--max-sources", type=int, default=None)
    p.add_argument("--skip-full", action="store_true")
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--ef-search", type=int, default=None)
    p.add_argument("--global-pool", action="store_true")
    p.add_argument("--out", default=None, help="directory for report.json/report.csv")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("features", help="dump the feature tensor of one file")
    p.add_argument("--audio", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_features)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config_file(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AudioReadError, UnsupportedEncodingError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except (FormatError, DataIntegrityError) as exc:
        print(f"data integrity error: {exc}", file=sys.stderr)
        return 4
    except CoverseekError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
