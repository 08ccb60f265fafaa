"""Toy-scale trainer and synthetic cover-clique dataset generator.

Each synthetic clique is grown from one base "song": a melody of notes
rendered as a sum of 3..8 harmonics whose weights and register change
across three sections (so a short crop genuinely differs from the global
average of a recording).  Versions are independently transformed copies:
pitch shift within two semitones, tempo scaling, additive noise at a
bounded SNR and a random leading crop.

Training follows the usual recipe: batches mix full recordings and short
random crops 1:1, every batch carries same-clique pairs so triplets can be
formed in-batch (hardest different-clique negative under the current
model), and Adam updates hand-derived gradients.  The whole run is
deterministic for a fixed seed.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import store as store_mod
from .encoder import (
    ModelParams,
    backbone_outputs,
    backward_rows,
    forward_rows,
    pca_init_projection,
)
from .errors import ConfigError, TrainingDivergedError
from .loss import (
    ProxyBank,
    TripletBatch,
    cls_loss_baseline,
    euclidean_triplet_loss,
    lac_loss,
    lat_loss,
)
from .signal import (
    AudioBuffer,
    ChunkedCqt,
    CqtConfig,
    extract_features_from_audio,
    load_audio,
)

logger = logging.getLogger(__name__)

TRANSFORM_NAMES = frozenset({"pitch_shift", "tempo_scale", "noise", "time_crop"})


@dataclass(frozen=True)
class SyntheticCliqueConfig:
    n_cliques: int = 200
    versions_per_clique: int = 4
    base_duration_s: float = 60.0
    transforms: frozenset = TRANSFORM_NAMES
    seed: int = 0
    sample_rate: int = 22050

    def __post_init__(self):
        object.__setattr__(self, "transforms", frozenset(self.transforms))
        if self.n_cliques < 2:
            raise ConfigError("need at least 2 cliques")
        if self.versions_per_clique < 2:
            raise ConfigError("need at least 2 versions per clique")
        if self.base_duration_s <= 2.0:
            raise ConfigError("base_duration_s too short to be musical")
        unknown = self.transforms - TRANSFORM_NAMES
        if unknown:
            raise ConfigError(f"unknown transforms: {sorted(unknown)}")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 2
    steps_per_epoch: int = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    short_clip_min_s: float = 6.0
    short_clip_max_s: float = 60.0
    mix_ratio: str = "1:1"
    temperature: float = 16.0
    triplet_margin: float = 0.0
    proxies_per_class: int = 4
    pca_warmup_chunks: int = 512
    objective: str = "lal"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("batch_size must be even (short/full items mix 1:1)")
        if self.mix_ratio != "1:1":
            raise ConfigError("only a 1:1 short:full mix is supported")
        if not 0 < self.short_clip_min_s <= self.short_clip_max_s:
            raise ConfigError("need 0 < short_clip_min_s <= short_clip_max_s")
        if self.objective not in ("lal", "baseline"):
            raise ConfigError("objective must be 'lal' or 'baseline'")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.proxies_per_class < 1:
            raise ConfigError("proxies_per_class must be >= 1")


# ---------------------------------------------------------------------------
# synthetic cliques

_N_HARMONICS_MAX = 8


@dataclass
class _NotePattern:
    """One musical segment: a melody over a fixed harmonic timbre."""

    f0: float
    harm_weights: np.ndarray
    note_offsets: np.ndarray   # semitones relative to f0
    note_durations: np.ndarray
    note_amps: np.ndarray

    def sliced(self, duration_s: float) -> "_NotePattern":
        ends = np.cumsum(self.note_durations)
        n = int(np.searchsorted(ends, duration_s)) + 1
        n = min(max(n, 1), len(self.note_durations))
        return _NotePattern(
            f0=self.f0,
            harm_weights=self.harm_weights,
            note_offsets=self.note_offsets[:n],
            note_durations=self.note_durations[:n],
            note_amps=self.note_amps[:n],
        )


def _draw_pattern(rng, target_duration_s: float) -> _NotePattern:
    f0 = rng.uniform(110.0, 320.0)
    n_harm = int(rng.integers(3, _N_HARMONICS_MAX + 1))
    decay = rng.uniform(0.45, 0.85)
    weights = decay ** np.arange(n_harm) * rng.uniform(0.5, 1.0, size=n_harm)
    weights = np.concatenate([weights, np.zeros(_N_HARMONICS_MAX - n_harm)])
    weights /= weights.sum()
    offsets, durations, amps = [], [], []
    current, total = 0.0, 0.0
    scale_steps = np.array([-5, -4, -2, 2, 3, 4, 5], dtype=np.float64)
    while total < target_duration_s + 2.0:
        durations.append(rng.uniform(0.8, 2.2))
        offsets.append(current)
        amps.append(rng.uniform(0.6, 1.0))
        current = float(np.clip(current + scale_steps[rng.integers(0, len(scale_steps))], -7.0, 7.0))
        total += durations[-1]
    return _NotePattern(
        f0=f0,
        harm_weights=weights,
        note_offsets=np.asarray(offsets),
        note_durations=np.asarray(durations),
        note_amps=np.asarray(amps),
    )


@dataclass
class _CliqueParams:
    """Clique identity: one long base song of three contrasting sections.

    The base runs 1.5x the recorded duration; every version is rendered
    from it and then windowed by the time_crop transform, so two covers
    share only part of their content.  Sections move register and timbre,
    which makes a short excerpt genuinely different from the recording's
    global average: the regime where local matching matters.
    """

    sections: list  # three _NotePattern segments


def _draw_clique(rng, cfg: SyntheticCliqueConfig) -> _CliqueParams:
    f0 = rng.uniform(110.0, 320.0)
    section_len = cfg.base_duration_s / 2.0  # 3 sections, 1.5x duration total
    registers = [0.0, rng.choice([-12.0, 12.0]), rng.choice([-12.0, 12.0])]
    sections = []
    for reg in registers:
        pattern = _draw_pattern(rng, section_len)
        pattern.f0 = f0 * 2.0 ** (reg / 12.0)
        sections.append(pattern)
    return _CliqueParams(sections=sections)


def _render_version(clique: _CliqueParams, cfg: SyntheticCliqueConfig, rng):
    """Render the base song, then window and transform one version of it."""
    sr = cfg.sample_rate
    shift = rng.uniform(-2.0, 2.0) if "pitch_shift" in cfg.transforms else 0.0
    tempo = rng.uniform(0.8, 1.25) if "tempo_scale" in cfg.transforms else 1.0
    snr_db = rng.uniform(10.0, 30.0) if "noise" in cfg.transforms else None

    base = cfg.base_duration_s
    segments = clique.sections

    durations = np.concatenate([seg.note_durations for seg in segments]) / tempo
    offsets = np.concatenate([seg.note_offsets for seg in segments])
    amps = np.concatenate([seg.note_amps for seg in segments])
    f0s = np.concatenate(
        [np.full(len(seg.note_durations), seg.f0) for seg in segments]
    )
    seg_idx = np.concatenate(
        [np.full(len(seg.note_durations), i, dtype=np.int64) for i, seg in enumerate(segments)]
    )
    weights = np.stack([seg.harm_weights for seg in segments])  # (3, H_max)

    n_total = int(round(durations.sum() * sr))
    freq = np.empty(n_total)
    env = np.zeros(n_total)
    segment_of = np.zeros(n_total, dtype=np.int64)
    boundaries = np.concatenate([[0.0], np.cumsum(durations)])
    for i, (start, dur) in enumerate(zip(boundaries[:-1], durations)):
        a = int(round(start * sr))
        b = min(int(round((start + dur) * sr)), n_total)
        if b <= a:
            continue
        freq[a:b] = f0s[i] * 2.0 ** ((offsets[i] + shift) / 12.0)
        segment_of[a:b] = seg_idx[i]
        n = b - a
        ramp = max(2, int(0.12 * n))
        note_env = np.full(n, amps[i])
        note_env[:ramp] *= np.linspace(0.0, 1.0, ramp)
        note_env[-ramp:] *= np.linspace(1.0, 0.0, ramp)
        env[a:b] = note_env
    phase = np.cumsum(2.0 * np.pi * freq / sr)
    # wrapped float32 phase keeps the sin evaluations cheap without losing
    # anything audible; harmonics are summed per contiguous section so the
    # zero-weight ones cost nothing
    wrapped = np.remainder(phase, 2.0 * np.pi).astype(np.float32)
    rendered = np.zeros(n_total, dtype=np.float32)
    bounds = np.concatenate(
        [[0], np.flatnonzero(np.diff(segment_of)) + 1, [n_total]]
    )
    for a, b in zip(bounds[:-1], bounds[1:]):
        section = segment_of[a]
        for h in np.flatnonzero(weights[section] > 0.0):
            rendered[a:b] += np.float32(weights[section, h]) * np.sin(
                np.float32(h + 1) * wrapped[a:b]
            )
    signal = rendered.astype(np.float64) * env
    window = int(round(base * sr))
    max_start = max(n_total - window, 0)
    if "time_crop" in cfg.transforms:
        start = int(round(rng.uniform(0.0, max_start / sr) * sr)) if max_start else 0
    else:
        start = 0
    signal = signal[start : start + window]
    if snr_db is not None:
        power = float(np.mean(signal**2))
        noise_power = power / (10.0 ** (snr_db / 10.0))
        signal = signal + rng.standard_normal(signal.size) * math.sqrt(noise_power)
    peak = float(np.abs(signal).max())
    if peak > 0:
        signal = signal * (0.9 / peak)
    return signal


@dataclass
class ManifestEntry:
    recording_id: str
    path: str
    clique_id: str


def write_manifest(entries, path) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "clique_id"])
        for entry in entries:
            rel = Path(entry.path)
            try:
                rel = rel.relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow([str(rel), entry.clique_id])


def load_manifest(path) -> "list[ManifestEntry]":
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["path", "clique_id"]:
            raise ConfigError(f"unexpected manifest header: {header}")
        for row in reader:
            if len(row) != 2:
                raise ConfigError(f"malformed manifest row: {row}")
            rec_path = Path(row[0])
            if not rec_path.is_absolute():
                rec_path = path.parent / rec_path
            entries.append(
                ManifestEntry(
                    recording_id=rec_path.stem, path=str(rec_path), clique_id=row[1]
                )
            )
    return entries


def generate_synthetic_dataset(cfg: SyntheticCliqueConfig, out_dir) -> "list[ManifestEntry]":
    """Render every clique version to WAV and write ``manifest.csv``.

    Deterministic for a fixed config: per-clique and per-version generators
    are spawned from one seed sequence in a fixed order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_cliques)
    plain = SyntheticCliqueConfig(
        n_cliques=cfg.n_cliques,
        versions_per_clique=cfg.versions_per_clique,
        base_duration_s=cfg.base_duration_s,
        transforms=frozenset(),
        seed=cfg.seed,
        sample_rate=cfg.sample_rate,
    )
    entries = []
    for c in range(cfg.n_cliques):
        child = seeds[c].spawn(cfg.versions_per_clique + 1)
        clique = _draw_clique(np.random.default_rng(child[0]), cfg)
        clique_id = f"clique{c:04d}"
        for v in range(cfg.versions_per_clique):
            rng = np.random.default_rng(child[v + 1])
            # version 0 is an untransformed rendition of the clique
            version_cfg = plain if v == 0 else cfg
            signal = _render_version(clique, version_cfg, rng)
            rid = f"{clique_id}_v{v}"
            path = out_dir / f"{rid}.wav"
            wavfile.write(str(path), cfg.sample_rate, (signal * 32767.0).astype(np.int16))
            entries.append(ManifestEntry(recording_id=rid, path=str(path), clique_id=clique_id))
    write_manifest(entries, out_dir / "manifest.csv")
    return entries


# ---------------------------------------------------------------------------
# dataset handle and batching

class Dataset:
    """Manifest-backed training set with a cache of full-length features."""

    def __init__(self, entries, cqt_config: CqtConfig = None):
        if not entries:
            raise ValueError("empty dataset")
        self.entries = list(entries)
        self.cqt_config = cqt_config or CqtConfig()
        self.by_id = {e.recording_id: e for e in self.entries}
        clique_ids = sorted({e.clique_id for e in self.entries})
        self.class_of_clique = {cid: i for i, cid in enumerate(clique_ids)}
        self.labels = {
            e.recording_id: self.class_of_clique[e.clique_id] for e in self.entries
        }
        self.members = {}
        for e in self.entries:
            self.members.setdefault(e.clique_id, []).append(e.recording_id)
        self._features: dict = {}
        self._audio_cache: dict = {}

    @property
    def n_classes(self) -> int:
        return len(self.class_of_clique)

    def cliques_with_pairs(self):
        return sorted(cid for cid, m in self.members.items() if len(m) >= 2)

    def audio(self, recording_id: str) -> AudioBuffer:
        return load_audio(self.by_id[recording_id].path)

    def features_full(self, recording_id: str) -> ChunkedCqt:
        cached = self._features.get(recording_id)
        if cached is None:
            cached = extract_features_from_audio(
                self.audio(recording_id), self.cqt_config, recording_id
            )
            self._features[recording_id] = cached
        return cached


@dataclass
class BatchItem:
    features: ChunkedCqt
    label: int
    recording_id: str
    is_short: bool
    crop_duration_s: float = None


def draw_crop(rng, cfg: TrainConfig, total_s: float):
    """Sample a crop window: duration ~ U(short_clip_min, short_clip_max)
    clipped to the recording length, offset uniform over what remains."""
    dur = min(float(rng.uniform(cfg.short_clip_min_s, cfg.short_clip_max_s)), total_s)
    offset = float(rng.uniform(0.0, max(total_s - dur, 0.0)))
    return dur, offset


def make_batch(dataset: Dataset, cfg: TrainConfig, rng, cqt_config: CqtConfig = None):
    """Sample one training batch: per clique pair, one full and one short item.

    Half the items are full recordings (features cached), half are freshly
    cropped segments with duration ~ U(short_clip_min, short_clip_max),
    clipped to the recording length.  Anchor/positive pairs therefore
    always exist in-batch.
    """
    cqt_config = cqt_config or dataset.cqt_config
    pool = dataset.cliques_with_pairs()
    if len(pool) < 2:
        raise ValueError("need at least 2 cliques with >= 2 versions each")
    n_pairs = cfg.batch_size // 2
    replace = len(pool) < n_pairs
    chosen = rng.choice(len(pool), size=n_pairs, replace=replace)
    items = []
    for pick in chosen:
        clique_id = pool[int(pick)]
        members = dataset.members[clique_id]
        pair = rng.choice(len(members), size=2, replace=False)
        rids = [members[int(i)] for i in pair]
        short_slot = int(rng.integers(0, 2))
        for slot, rid in enumerate(rids):
            label = dataset.labels[rid]
            if slot == short_slot:
                audio = dataset.audio(rid)
                dur, offset = draw_crop(rng, cfg, audio.duration_seconds)
                start = int(round(offset * audio.sample_rate))
                seg = audio.samples[start : start + int(round(dur * audio.sample_rate))]
                feats = extract_features_from_audio(
                    AudioBuffer(samples=seg, sample_rate=audio.sample_rate),
                    cqt_config,
                    f"{rid}#crop",
                )
                items.append(BatchItem(feats, label, rid, True, dur))
            else:
                items.append(
                    BatchItem(dataset.features_full(rid), label, rid, False)
                )
    return items


def _pairwise_ordered_maxmean(gram: np.ndarray, slices) -> np.ndarray:
    """Ordered MaxMean between all item pairs from one batch Gram matrix."""
    n = len(slices)
    out = np.full((n, n), -np.inf)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            block = gram[slices[i], slices[j]]
            if block.shape[0] > block.shape[1]:
                block = block.T
            out[i, j] = block.max(axis=1).mean()
    return out


def form_triplets(labels, scores: np.ndarray, pair_partner):
    """Per anchor: its clique partner as positive, the hardest (highest
    scoring) different-label item as negative.  Returns (a, p, n) index
    triples; anchors with no valid negative are skipped."""
    triplets = []
    n = len(labels)
    for a in range(n):
        p = pair_partner[a]
        best_n, best_s = -1, -np.inf
        for j in range(n):
            if labels[j] == labels[a]:
                continue
            if scores[a, j] > best_s:
                best_n, best_s = j, scores[a, j]
        if best_n >= 0:
            triplets.append((a, p, best_n))
    return triplets


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Standard Adam with bias correction, updating arrays in place."""

    def __init__(self, named_arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named_arrays = list(named_arrays)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in self.named_arrays}
        self.v = {name: np.zeros_like(arr) for name, arr in self.named_arrays}

    def step(self, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, arr in self.named_arrays:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    params: ModelParams
    loss_curve: list  # rows of (step, lac, lat, total)


def write_loss_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lac", "lat", "total"])
        for step, lac, lat, total in rows:
            writer.writerow([step, f"{lac:.6f}", f"{lat:.6f}", f"{total:.6f}"])


def _global_with_grad(rows: np.ndarray):
    """Mean-pool rows and renormalize; returns f and a closure mapping
    grad_f back to grad_rows."""
    mean = rows.mean(axis=0)
    norm = max(float(np.linalg.norm(mean)), 1e-12)
    f = mean / norm

    def backprop(grad_f):
        tangent = (grad_f - np.dot(grad_f, f) * f) / norm
        return np.broadcast_to(tangent / rows.shape[0], rows.shape).copy()

    return f, backprop


def train(
    params: ModelParams,
    dataset: Dataset,
    cfg: TrainConfig,
    cqt_config: CqtConfig = None,
    snapshot_dir=None,
) -> TrainResult:
    """Optimize the encoder (and proxy bank or baseline head) on a dataset.

    Per step: sample a batch, one shared forward in training mode, exact
    gradients for the configured objective, one Adam step, then proxy
    renormalization.  Deterministic for fixed seed and config; a non-finite
    loss aborts with a diagnostic snapshot.
    """
    cqt_config = cqt_config or dataset.cqt_config
    rng = np.random.default_rng(cfg.seed)
    n_classes = dataset.n_classes

    if cfg.objective == "lal" and params.proxies is None:
        bank = ProxyBank.create(
            n_classes, cfg.proxies_per_class, params.config.out_dim, rng
        )
        params.proxies = bank.weights
    if cfg.objective == "baseline" and params.head_global is None:
        params.head_global = rng.standard_normal((n_classes, params.config.out_dim)) * 0.05

    _pca_warmup(params, dataset, cfg, rng)

    steps_per_epoch = cfg.steps_per_epoch
    if steps_per_epoch is None:
        steps_per_epoch = max(1, len(dataset.entries) // cfg.batch_size)
    optimizer = Adam(
        params.trainable_arrays(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps
    )
    proxy_bank = ProxyBank(params.proxies) if cfg.objective == "lal" else None

    curve = []
    step = 0
    for _epoch in range(cfg.epochs):
        for _ in range(steps_per_epoch):
            items = make_batch(dataset, cfg, rng, cqt_config)
            slices = []
            start = 0
            for item in items:
                n = item.features.n_chunks
                slices.append(slice(start, start + n))
                start += n
            x = np.concatenate([item.features.data for item in items], axis=0)
            rows, cache = forward_rows(
                x, params, training=True, update_running=True, want_cache=True
            )
            labels = [item.label for item in items]
            pair_partner = [i + 1 if i % 2 == 0 else i - 1 for i in range(len(items))]

            grad_rows = np.zeros_like(rows)
            extra_grads = {}
            batch_n = len(items)
            if cfg.objective == "lal":
                lac_sum = lat_sum = 0.0
                grad_proxies = np.zeros_like(params.proxies)
                gram = rows @ rows.T
                scores = _pairwise_ordered_maxmean(gram, slices)
                triplets = form_triplets(labels, scores, pair_partner)
                for i, item in enumerate(items):
                    res = lac_loss(rows[slices[i]], params.proxies, item.label, cfg.temperature)
                    lac_sum += res.value
                    grad_rows[slices[i]] += res.grad_x / batch_n
                    grad_proxies += res.grad_proxies / batch_n
                for a, p, neg in triplets:
                    batch_t = TripletBatch(
                        anchor=rows[slices[a]],
                        positive=rows[slices[p]],
                        negative=rows[slices[neg]],
                        labels=(labels[a], labels[p], labels[neg]),
                    )
                    res = lat_loss(batch_t, cfg.triplet_margin)
                    lat_sum += res.value
                    grad_rows[slices[a]] += res.grad_anchor / batch_n
                    grad_rows[slices[p]] += res.grad_positive / batch_n
                    grad_rows[slices[neg]] += res.grad_negative / batch_n
                extra_grads["proxies"] = grad_proxies
                lac_mean = lac_sum / batch_n
                lat_mean = lat_sum / batch_n
            else:
                lac_sum = lat_sum = 0.0
                grad_head = np.zeros_like(params.head_global)
                globals_f = []
                backprops = []
                for i in range(batch_n):
                    f, back = _global_with_grad(rows[slices[i]])
                    globals_f.append(f)
                    backprops.append(back)
                fmat = np.asarray(globals_f)
                dmat = np.linalg.norm(fmat[:, None, :] - fmat[None, :, :], axis=2)
                scores = -dmat  # hardest negative = smallest distance
                triplets = form_triplets(labels, scores, pair_partner)
                grad_f_acc = np.zeros_like(fmat)
                for i, item in enumerate(items):
                    res = cls_loss_baseline(fmat[i], params.head_global, item.label)
                    lac_sum += res.value
                    grad_f_acc[i] += res.grad_f / batch_n
                    grad_head += res.grad_weights / batch_n
                for a, p, neg in triplets:
                    value, ga, gp, gn = euclidean_triplet_loss(
                        fmat[a], fmat[p], fmat[neg], cfg.triplet_margin
                    )
                    lat_sum += value
                    grad_f_acc[a] += ga / batch_n
                    grad_f_acc[p] += gp / batch_n
                    grad_f_acc[neg] += gn / batch_n
                for i in range(batch_n):
                    grad_rows[slices[i]] += backprops[i](grad_f_acc[i])
                extra_grads["head_global"] = grad_head
                lac_mean = lac_sum / batch_n
                lat_mean = lat_sum / batch_n

            total = lac_mean + lat_mean
            if not math.isfinite(total):
                _snapshot_divergence(params, step, items, snapshot_dir)
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}",
                    diagnostics={"step": step, "lac": lac_mean, "lat": lat_mean},
                )
            grads = backward_rows(cache, grad_rows)
            grads.update(extra_grads)
            optimizer.step(grads)
            if proxy_bank is not None:
                proxy_bank.renormalize()
            curve.append((step, lac_mean, lat_mean, total))
            step += 1
            if step % 25 == 0:
                logger.info(
                    "step %d: lac %.4f lat %.4f total %.4f", step, lac_mean, lat_mean, total
                )
    return TrainResult(params=params, loss_curve=curve)


def _pca_warmup(params: ModelParams, dataset: Dataset, cfg: TrainConfig, rng) -> None:
    """Initialize the projection from PCA of backbone outputs on random chunks.

    A non-positive ``pca_warmup_chunks`` disables the warm-up and keeps the
    current projection."""
    if cfg.pca_warmup_chunks <= 0:
        return
    ids = [e.recording_id for e in dataset.entries]
    chunks = []
    while len(chunks) < cfg.pca_warmup_chunks:
        rid = ids[int(rng.integers(0, len(ids)))]
        feats = dataset.features_full(rid)
        chunks.append(feats.data[int(rng.integers(0, feats.n_chunks))])
    x = np.stack(chunks, axis=0)
    pooled = backbone_outputs(x, params, training=True)
    out_dim = params.config.out_dim
    w, b = pca_init_projection(pooled, out_dim)
    params.proj_w[...] = w
    params.proj_b[...] = b


def _snapshot_divergence(params, step, items, snapshot_dir):
    if snapshot_dir is None:
        return
    snapshot_dir = Path(snapshot_dir)
    snapshot_dir.mkdir(parents=True, exist_ok=True)
    store_mod.write_tensors(snapshot_dir / "diverged_params.cvst", params.to_tensors())
    diag = {
        "step": step,
        "batch_recordings": [item.recording_id for item in items],
    }
    (snapshot_dir / "diverged_diag.json").write_text(json.dumps(diag, indent=2))
