"""Audio front end: WAV loading, resampling, chunking and compressed CQT.

A recording is resampled to the working rate, split into overlapping
chunks, and each chunk is turned into a constant-Q magnitude spectrogram
that is then downsampled along time by block averaging.  The stacked
per-chunk matrices form the feature tensor consumed by the encoder.

The constant-Q transform is realized as a bank of Hann-windowed complex
exponential kernels, one per log-spaced bin, applied by frequency-domain
convolution: one long FFT of the zero-padded chunk, a sparse product with
each kernel's spectrum, and a small inverse FFT that directly yields the
hop-subsampled frame sequence.  Kernel spectra are computed once per
configuration (chirp-z transform on the kernel's support) and trimmed at a
relative magnitude floor, so per-chunk cost is dominated by one real FFT.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy.io import wavfile
from scipy.signal import czt

from .errors import AudioReadError, ConfigError, UnsupportedEncodingError

# Relative magnitude below which kernel spectrum coefficients are dropped.
KERNEL_TRIM = 1e-3
# Half-width of the chirp-z evaluation window, in kernel mainlobe units.
_CZT_HALFWIDTH_LOBES = 16
# Variance floor used by per-chunk standardization.
VARIANCE_FLOOR = 1e-8

_RESAMPLE_TAPS = 64
_RESAMPLE_BETA = 8.6


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio: float64 samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class CqtConfig:
    """Parameters of the chunked, compressed constant-Q front end."""

    sample_rate: int = 22050
    bins_per_octave: int = 12
    n_bins: int = 84
    hop: int = 512
    window: str = "hann"
    f_min: float = 32.70
    chunk_seconds: float = 20.0
    overlap_seconds: float = 10.0
    avg_factor: int = 100
    min_tail_seconds: float = 5.0

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.bins_per_octave < 1 or self.n_bins < 1:
            raise ConfigError("bins_per_octave and n_bins must be >= 1")
        if self.n_bins % self.bins_per_octave != 0:
            raise ConfigError("n_bins must be a multiple of bins_per_octave")
        if self.hop < 1:
            raise ConfigError("hop must be >= 1")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")
        if self.f_min <= 0:
            raise ConfigError("f_min must be positive")
        if not 0 < self.overlap_seconds < self.chunk_seconds:
            raise ConfigError("need 0 < overlap_seconds < chunk_seconds")
        if self.avg_factor < 1:
            raise ConfigError("avg_factor must be >= 1")
        if self.min_tail_seconds < 0:
            raise ConfigError("min_tail_seconds must be >= 0")
        f_max = self.f_min * 2.0 ** ((self.n_bins - 1) / self.bins_per_octave)
        if f_max >= self.sample_rate / 2:
            raise ConfigError(
                f"top bin at {f_max:.1f} Hz reaches Nyquist for rate {self.sample_rate}"
            )

    @property
    def chunk_samples(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))

    @property
    def stride_samples(self) -> int:
        return int(round((self.chunk_seconds - self.overlap_seconds) * self.sample_rate))

    @property
    def min_tail_samples(self) -> int:
        return int(round(self.min_tail_seconds * self.sample_rate))

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    @property
    def frames_per_chunk(self) -> int:
        """Raw frame count of one chunk before compression."""
        return self.chunk_samples // self.hop + 1

    def bin_frequency(self, k: int) -> float:
        return self.f_min * 2.0 ** (k / self.bins_per_octave)


@dataclass
class ChunkedCqt:
    """Per-chunk compressed CQT tensor of one recording, shape N x F x T."""

    data: np.ndarray
    recording_id: str
    chunk_offsets_seconds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] < 1:
            raise ValueError("data must have shape (N, F, T) with N >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature tensor contains non-finite values")
        self.chunk_offsets_seconds = np.asarray(
            self.chunk_offsets_seconds, dtype=np.float64
        )

    @property
    def n_chunks(self) -> int:
        return self.data.shape[0]


def load_audio(path) -> AudioBuffer:
    """Read a PCM WAV file (16-bit int or 32/64-bit float) as mono.

    Multichannel input is averaged to mono; integer samples are scaled to
    [-1, 1].  Missing or unreadable files raise :class:`AudioReadError`;
    decodable-but-unsupported encodings raise
    :class:`UnsupportedEncodingError`.
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(str(path))
    except OSError as exc:
        raise AudioReadError(f"cannot read audio file {path}: {exc}") from exc
    except ValueError as exc:
        raise UnsupportedEncodingError(f"cannot decode {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(
            f"{path}: unsupported sample format {data.dtype}; "
            "expected 16-bit PCM or 32-bit float"
        )
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    elif samples.ndim != 1:
        raise UnsupportedEncodingError(f"{path}: unsupported channel layout")
    if samples.size == 0:
        raise UnsupportedEncodingError(f"{path}: file contains no samples")
    np.clip(samples, -1.0, 1.0, out=samples)
    return AudioBuffer(samples=samples, sample_rate=int(rate))


def _kaiser_sinc(t: np.ndarray, cutoff: float) -> np.ndarray:
    """Continuous Kaiser-windowed sinc, support |t| <= taps/2."""
    half = _RESAMPLE_TAPS / 2.0
    inside = np.abs(t) <= half
    x = np.where(inside, t / half, 1.0)
    win = np.i0(_RESAMPLE_BETA * np.sqrt(np.clip(1.0 - x * x, 0.0, 1.0)))
    win /= np.i0(_RESAMPLE_BETA)
    return np.where(inside, cutoff * np.sinc(cutoff * t) * win, 0.0)


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling by windowed-sinc interpolation.

    Output length is ``round(len * target_rate / source_rate)``.  Equal
    rates return the input unchanged.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == audio.sample_rate:
        return audio
    src = audio.samples
    ratio = target_rate / audio.sample_rate
    out_len = int(math.floor(src.size * ratio + 0.5))
    cutoff = min(1.0, ratio)
    half = _RESAMPLE_TAPS // 2
    padded = np.concatenate(
        [np.zeros(half + 1), src, np.zeros(half + 1)]
    )
    out = np.empty(out_len, dtype=np.float64)
    offsets = np.arange(-half + 1, half + 1)  # 64 taps
    block = 65536
    for start in range(0, out_len, block):
        n = np.arange(start, min(start + block, out_len))
        pos = n / ratio
        base = np.floor(pos).astype(np.int64)
        frac = pos - base
        t = offsets[None, :] - frac[:, None]
        weights = _kaiser_sinc(t, cutoff)
        idx = base[:, None] + offsets[None, :] + half + 1
        out[n] = np.sum(padded[idx] * weights, axis=1)
    np.clip(out, -1.0, 1.0, out=out)
    return AudioBuffer(samples=out, sample_rate=int(target_rate))


def chunk_offsets(n_samples: int, cfg: CqtConfig) -> np.ndarray:
    """Chunk start positions (in samples) for a recording of given length.

    Full chunks start every ``stride_samples``; one trailing partial chunk
    is added when it covers audio past the last full chunk and its
    unpadded length is at least ``min_tail_samples``.  A recording shorter
    than one chunk yields a single offset at zero.
    """
    if n_samples <= 0:
        raise ValueError("empty audio cannot be chunked")
    cs = cfg.chunk_samples
    stride = cfg.stride_samples
    if n_samples <= cs:
        return np.array([0], dtype=np.int64)
    n_full = (n_samples - cs) // stride + 1
    offsets = [i * stride for i in range(n_full)]
    last_end = offsets[-1] + cs
    tail_off = n_full * stride
    if n_samples > last_end and n_samples - tail_off >= cfg.min_tail_samples:
        offsets.append(tail_off)
    return np.asarray(offsets, dtype=np.int64)


def chunk(audio: AudioBuffer, cfg: CqtConfig) -> "list[AudioBuffer]":
    """Split audio into zero-padded chunks of ``chunk_seconds`` each."""
    if audio.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"audio rate {audio.sample_rate} != configured rate {cfg.sample_rate}"
        )
    cs = cfg.chunk_samples
    chunks = []
    for off in chunk_offsets(len(audio), cfg):
        seg = audio.samples[off : off + cs]
        if seg.size < cs:
            seg = np.concatenate([seg, np.zeros(cs - seg.size)])
        chunks.append(AudioBuffer(samples=seg, sample_rate=cfg.sample_rate))
    return chunks


class _KernelBank:
    """Precomputed sparse kernel spectra for one CQT configuration."""

    def __init__(self, cfg: CqtConfig):
        self.cfg = cfg
        sr = cfg.sample_rate
        q_factor = cfg.q_factor
        lengths = []
        for k in range(cfg.n_bins):
            n_k = int(round(q_factor * sr / cfg.bin_frequency(k)))
            lengths.append(max(n_k, 4))
        self.kernel_lengths = lengths
        n_max = max(lengths)
        min_len = cfg.chunk_samples + n_max + 1
        self.n_frames_out = sfft.next_fast_len(-(-min_len // cfg.hop), real=False)
        self.fft_len = self.n_frames_out * cfg.hop
        self.slices = [self._kernel_spectrum(k) for k in range(cfg.n_bins)]

    def _kernel_spectrum(self, k: int):
        """Conjugated, trimmed spectrum slice of bin k's kernel."""
        cfg = self.cfg
        length = self.fft_len
        n_k = self.kernel_lengths[k]
        f_k = cfg.bin_frequency(k)
        centered = np.arange(n_k) - n_k // 2
        window = np.hanning(n_k)
        kernel = window * np.exp(2j * np.pi * f_k * centered / cfg.sample_rate)
        kernel /= window.sum()
        center_bin = f_k * length / cfg.sample_rate
        halfw = int(math.ceil(_CZT_HALFWIDTH_LOBES * length / n_k)) + 2
        lo = max(0, int(math.floor(center_bin)) - halfw)
        hi = min(length // 2 + 1, int(math.ceil(center_bin)) + halfw)
        spectrum = czt(
            kernel,
            m=hi - lo,
            w=np.exp(-2j * np.pi / length),
            a=np.exp(2j * np.pi * lo / length),
        )
        # undo the kernel's centered time origin
        freqs = np.arange(lo, hi)
        spectrum *= np.exp(2j * np.pi * freqs * (n_k // 2) / length)
        mags = np.abs(spectrum)
        keep = np.nonzero(mags >= KERNEL_TRIM * mags.max())[0]
        first, last = int(keep[0]), int(keep[-1]) + 1
        trimmed = np.conj(spectrum[first:last]).astype(np.complex64)
        return lo + first, trimmed


@lru_cache(maxsize=8)
def _kernel_bank(cfg: CqtConfig) -> _KernelBank:
    return _KernelBank(cfg)


def cqt(chunk_audio: AudioBuffer, cfg: CqtConfig) -> np.ndarray:
    """Constant-Q magnitude spectrogram of one full-length chunk.

    Returns a float32 matrix of shape (n_bins, frames_per_chunk); bin k is
    centered at ``f_min * 2**(k / bins_per_octave)`` and frames are spaced
    ``hop`` samples apart starting at sample 0.
    """
    if chunk_audio.sample_rate != cfg.sample_rate:
        raise ValueError("chunk sample rate does not match configuration")
    if len(chunk_audio) != cfg.chunk_samples:
        raise ValueError(
            f"chunk length {len(chunk_audio)} != expected {cfg.chunk_samples}"
        )
    bank = _kernel_bank(cfg)
    length, q = bank.fft_len, bank.n_frames_out
    hop = cfg.hop
    n_frames = cfg.frames_per_chunk
    padded = np.zeros(length, dtype=np.float32)
    padded[: cfg.chunk_samples] = chunk_audio.samples
    spectrum = sfft.rfft(padded)
    folded = np.zeros((cfg.n_bins, q), dtype=np.complex64)
    for k, (lo, g) in enumerate(bank.slices):
        prod = spectrum[lo : lo + g.size] * g
        o = lo % q
        s0 = min(prod.size, q - o)
        folded[k, o : o + s0] += prod[:s0]
        rest = prod[s0:]
        nq = rest.size // q
        if nq:
            folded[k] += rest[: nq * q].reshape(nq, q).sum(axis=0)
        tail = rest[nq * q :]
        if tail.size:
            folded[k, : tail.size] += tail
    frames = sfft.ifft(folded, axis=1)
    out = np.abs(frames[:, :n_frames]).astype(np.float32)
    out /= hop
    return out


def compress(cqt_frames: np.ndarray, avg_factor: int) -> np.ndarray:
    """Downsample frames along time by averaging blocks of ``avg_factor``.

    Trailing frames that do not fill a block are dropped; a factor of 1
    returns the input unchanged.
    """
    if avg_factor < 1:
        raise ValueError("avg_factor must be >= 1")
    if avg_factor == 1:
        return cqt_frames
    n_raw = cqt_frames.shape[1]
    if n_raw < avg_factor:
        raise ValueError(
            f"chunk too short to compress: {n_raw} frames < factor {avg_factor}"
        )
    n_out = n_raw // avg_factor
    trimmed = cqt_frames[:, : n_out * avg_factor]
    return trimmed.reshape(cqt_frames.shape[0], n_out, avg_factor).mean(axis=2)


def extract_features_from_audio(
    audio: AudioBuffer, cfg: CqtConfig, recording_id: str
) -> ChunkedCqt:
    """Chunk, CQT, compress, then log-scale and standardize per chunk."""
    audio = resample(audio, cfg.sample_rate)
    offsets = chunk_offsets(len(audio), cfg)
    mats = []
    for piece in chunk(audio, cfg):
        frames = compress(cqt(piece, cfg), cfg.avg_factor)
        feats = np.log1p(frames.astype(np.float64))
        mean = feats.mean()
        std = math.sqrt(max(float(feats.var()), VARIANCE_FLOOR))
        mats.append((feats - mean) / std)
    data = np.stack(mats, axis=0)
    return ChunkedCqt(
        data=data,
        recording_id=recording_id,
        chunk_offsets_seconds=offsets / cfg.sample_rate,
    )


def extract_features(path, cfg: CqtConfig, recording_id: str = None) -> ChunkedCqt:
    """End-to-end feature extraction for one audio file."""
    audio = load_audio(path)
    if recording_id is None:
        recording_id = Path(path).stem
    return extract_features_from_audio(audio, cfg, recording_id)
