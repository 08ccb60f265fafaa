"""Scratch calibration for the directional ablation (not part of the package)."""
import sys, time, tempfile
from pathlib import Path
import numpy as np

from coverseek.signal import CqtConfig
from coverseek.encoder import EncoderConfig, init_params, forward, mean_pooled_embedding
from coverseek.train import (SyntheticCliqueConfig, TrainConfig, Dataset,
                             generate_synthetic_dataset, train)
from coverseek.store import EmbeddingStore
from coverseek.index import HnswIndex
from coverseek.evaluate import QuerySpec, evaluate

N_CLIQUES = int(sys.argv[1]) if len(sys.argv) > 1 else 60
PHASES = int(sys.argv[2]) if len(sys.argv) > 2 else 3
STEPS = int(sys.argv[3]) if len(sys.argv) > 3 else 80
LR = float(sys.argv[4]) if len(sys.argv) > 4 else 0.002
N_SRC = int(sys.argv[5]) if len(sys.argv) > 5 else 30

T0 = time.perf_counter()
def log(msg):
    print('[%7.1fs] %s' % (time.perf_counter() - T0, msg), flush=True)

tmp = Path(tempfile.mkdtemp())
synth = SyntheticCliqueConfig(n_cliques=N_CLIQUES, versions_per_clique=4, base_duration_s=60.0, seed=2024)
entries = generate_synthetic_dataset(synth, tmp / "data")
log(f'synth {len(entries)} recordings')
cqt_cfg = CqtConfig(); enc_cfg = EncoderConfig()
dataset = Dataset(entries, cqt_cfg)
for e in entries:
    dataset.features_full(e.recording_id)
log('feature cache ready')

def build_and_eval(params, global_pool):
    store = EmbeddingStore(enc_cfg.out_dim)
    for e in entries:
        emb = forward(dataset.features_full(e.recording_id), params)
        rows = emb.vectors if not global_pool else mean_pooled_embedding(emb.vectors)[None, :]
        store.put(e.recording_id, rows.astype(np.float32), 60.0)
    index = HnswIndex(enc_cfg.out_dim, seed=7)
    for rid, vecs, dur in store.iterate():
        for ci, v in enumerate(vecs):
            index.insert(v, rid, ci)
    index.freeze(store)
    sources = [f"clique{c:04d}_v0" for c in range(N_SRC)]
    specs = [QuerySpec(s, durations=(6, 30), include_full=False, seed=100 + i)
             for i, s in enumerate(sources)]
    rep = evaluate(index, store, entries, specs, params, cqt_cfg, k=50, global_pool=global_pool)
    return {r.duration: r.map_score for r in rep.rows}

summary = {}
for objective in ("lal", "baseline"):
    params = init_params(enc_cfg, np.random.default_rng(3))
    total = 0
    for phase in range(PHASES):
        tcfg = TrainConfig(batch_size=32, epochs=1, steps_per_epoch=STEPS, seed=7 + phase,
                           learning_rate=LR, objective=objective,
                           pca_warmup_chunks=512 if phase == 0 else 0)
        res = train(params, dataset, tcfg, cqt_cfg)
        total += STEPS
        lac = float(np.mean([r[1] for r in res.loss_curve[-20:]]))
        lat = float(np.mean([r[2] for r in res.loss_curve[-20:]]))
        m = build_and_eval(params, objective == "baseline")
        log('%-9s steps=%3d lac=%.3f lat=%.3f mAP6=%.3f mAP30=%.3f'
            % (objective, total, lac, lat, m["6"], m["30"]))
        summary[objective] = m
log('gap30=%.3f gap6=%.3f' % (summary["lal"]["30"] - summary["baseline"]["30"],
                              summary["lal"]["6"] - summary["baseline"]["6"]))
