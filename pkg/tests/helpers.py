"""Shared test utilities: finite differences, unit vectors, tiny WAVs."""

import numpy as np
from scipy.io import wavfile


def central_diff_grad(fn, array, h=1e-6):
    """Per-element central finite differences of a scalar function."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = array[idx]
        array[idx] = orig + h
        plus = fn()
        array[idx] = orig - h
        minus = fn()
        array[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
        it.iternext()
    return grad


def relative_error(a, b, floor=1e-12):
    na = np.linalg.norm(np.asarray(a).ravel())
    nb = np.linalg.norm(np.asarray(b).ravel())
    return np.linalg.norm((np.asarray(a) - np.asarray(b)).ravel()) / max(na, nb, floor)


def unit_rows(rng, n, dim):
    rows = rng.standard_normal((n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def naive_maxmean(x_set, y_set):
    """Independent double-loop oracle: per-pair cosines, row-order sum."""
    total = 0.0
    for i in range(x_set.shape[0]):
        best = -np.inf
        for j in range(y_set.shape[0]):
            c = np.dot(x_set[i], y_set[j]) / (
                np.linalg.norm(x_set[i]) * np.linalg.norm(y_set[j])
            )
            if c > best:
                best = c
        total += best
    return total / x_set.shape[0]


def write_wav(path, samples, rate=22050, dtype=np.int16):
    samples = np.asarray(samples)
    if dtype == np.int16:
        data = (np.clip(samples, -1, 1) * 32767).astype(np.int16)
    else:
        data = samples.astype(dtype)
    wavfile.write(str(path), rate, data)
    return path


def sine(duration_s, freq, rate=22050, amp=0.5):
    t = np.arange(int(round(duration_s * rate))) / rate
    return amp * np.sin(2 * np.pi * freq * t)
