"""Training objectives over sets of local embeddings, with exact gradients.

The classification head scores a recording against per-class proxy sets
with the MaxMean measure; the triplet term applies a hinge to MaxMean
scores of a positive and a negative recording against the anchor.  The
single-vector baseline (softmax over plain dot-product logits plus a
Euclidean triplet) is kept for ablations.

All gradients are hand-derived.  The max over proxies/rows uses a
winner-take-all subgradient (lowest index on exact ties), and the cosine
in every score differentiates through the row norms.
"""

from dataclasses import dataclass

import numpy as np

DEFAULT_TEMPERATURE = 16.0


def _rows(x) -> np.ndarray:
    vectors = getattr(x, "vectors", x)
    rows = np.asarray(vectors, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ValueError("expected a non-empty 2-D row matrix")
    return rows


@dataclass
class ProxyBank:
    """Trainable per-class proxy vectors, shape (n_classes, L, dim).

    Rows are kept unit-norm by renormalizing after each optimizer step.
    """

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError("proxy weights must have shape (K, L, C)")
        if self.weights.shape[0] < 2:
            raise ValueError("need at least 2 classes")
        if self.weights.shape[1] < 1:
            raise ValueError("need at least 1 proxy per class")

    @classmethod
    def create(cls, n_classes: int, proxies_per_class: int, dim: int, rng) -> "ProxyBank":
        w = rng.standard_normal((n_classes, proxies_per_class, dim))
        w /= np.linalg.norm(w, axis=2, keepdims=True)
        return cls(weights=w)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def renormalize(self) -> None:
        """Project every proxy row back to unit norm, in place.

        Rows already unit-norm within 1e-12 are left untouched so a
        zero-learning-rate step keeps parameters bit-identical.
        """
        norms = np.linalg.norm(self.weights, axis=2, keepdims=True)
        needs = np.abs(norms - 1.0) > 1e-12
        if np.any(needs):
            np.divide(self.weights, norms, out=self.weights, where=needs)


@dataclass
class TripletBatch:
    """Anchor, positive and negative embedding sets with their class ids."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    labels: tuple

    def __post_init__(self):
        self.anchor = _rows(self.anchor)
        self.positive = _rows(self.positive)
        self.negative = _rows(self.negative)
        if len(self.labels) != 3:
            raise ValueError("labels must be (anchor, positive, negative) class ids")
        la, lp, ln = self.labels
        if la != lp or la == ln:
            raise ValueError("need label(anchor) == label(positive) != label(negative)")


@dataclass
class LacResult:
    value: float
    logits: np.ndarray
    grad_x: np.ndarray
    grad_proxies: np.ndarray


@dataclass
class LatResult:
    value: float
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negative: np.ndarray


@dataclass
class LalResult:
    value: float
    lac: LacResult
    lat: LatResult
    grad_x: np.ndarray
    grad_proxies: np.ndarray


@dataclass
class ClsResult:
    value: float
    logits: np.ndarray
    grad_f: np.ndarray
    grad_weights: np.ndarray


def _softmax_ce(logits: np.ndarray, y: int):
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    total = exp.sum()
    loss = float(np.log(total) - shifted[y])
    grad = exp / total
    grad[y] -= 1.0
    return loss, grad


def _maxmean_with_grads(first: np.ndarray, second: np.ndarray):
    """MaxMean(first, second) plus gradients w.r.t. both row matrices."""
    na = np.linalg.norm(first, axis=1)
    nb = np.linalg.norm(second, axis=1)
    cosm = (first @ second.T) / np.outer(na, nb)
    jstar = np.argmax(cosm, axis=1)
    m = first.shape[0]
    s = cosm[np.arange(m), jstar]
    value = float(s.mean())
    winners = second[jstar]
    nb_star = nb[jstar]
    grad_first = (winners / (na * nb_star)[:, None] - (s / na**2)[:, None] * first) / m
    grad_second = np.zeros_like(second)
    contrib = (first / (na * nb_star)[:, None] - (s / nb_star**2)[:, None] * winners) / m
    np.add.at(grad_second, jstar, contrib)
    return value, grad_first, grad_second


def lac_loss(x, proxies, y: int, temperature: float = DEFAULT_TEMPERATURE) -> LacResult:
    """Classification loss: softmax cross-entropy over per-class MaxMean logits.

    ``logit_k = MaxMean(X, W_k)`` with the embedding set always first.
    Logits are multiplied by ``temperature`` before the softmax (cosine
    logits live in [-1, 1], which trains poorly unscaled).  Gradients flow
    to the rows of ``x`` and, per class, only to the argmax proxy rows.
    """
    rows = _rows(x)
    weights = proxies.weights if isinstance(proxies, ProxyBank) else np.asarray(proxies)
    if weights.ndim != 3:
        raise ValueError("proxies must have shape (K, L, C)")
    n_classes = weights.shape[0]
    if not 0 <= y < n_classes:
        raise ValueError(f"label {y} outside [0, {n_classes})")
    n = rows.shape[0]
    nx = np.linalg.norm(rows, axis=1)
    nw = np.linalg.norm(weights, axis=2)
    cos = np.einsum("nc,klc->nkl", rows, weights) / (
        nx[:, None, None] * nw[None, :, :]
    )
    jstar = np.argmax(cos, axis=2)
    s = np.take_along_axis(cos, jstar[:, :, None], axis=2)[:, :, 0]
    logits = s.mean(axis=0)
    loss, dz = _softmax_ce(temperature * logits, y)
    dsk = (temperature / n) * dz  # d loss / d s[i, k], identical across rows i

    class_idx = np.arange(n_classes)
    win = weights[class_idx[None, :], jstar]          # (N, K, C)
    nw_win = nw[class_idx[None, :], jstar]            # (N, K)
    grad_x = np.einsum("nk,nkc->nc", dsk[None, :] / (nx[:, None] * nw_win), win)
    grad_x -= ((dsk[None, :] * s).sum(axis=1) / nx**2)[:, None] * rows
    grad_w = np.zeros_like(weights)
    for i in range(n):
        idx = jstar[i]
        coeff = dsk / (nx[i] * nw[class_idx, idx])
        shrink = dsk * s[i] / nw[class_idx, idx] ** 2
        contrib = coeff[:, None] * rows[i][None, :] - shrink[:, None] * weights[
            class_idx, idx
        ]
        np.add.at(grad_w, (class_idx, idx), contrib)
    return LacResult(value=loss, logits=logits, grad_x=grad_x, grad_proxies=grad_w)


def lat_loss(batch: TripletBatch, margin: float = 0.0) -> LatResult:
    """Triplet hinge on MaxMean scores against the anchor set.

    ``[MaxMean(X_n, X) - MaxMean(X_p, X) + margin]_+``; gradients vanish
    when the hinge is inactive (including exactly at the boundary).
    """
    mm_n, grad_n_first, grad_anchor_n = _maxmean_with_grads(batch.negative, batch.anchor)
    mm_p, grad_p_first, grad_anchor_p = _maxmean_with_grads(batch.positive, batch.anchor)
    t = mm_n - mm_p + margin
    if t > 0.0:
        return LatResult(
            value=float(t),
            grad_anchor=grad_anchor_n - grad_anchor_p,
            grad_positive=-grad_p_first,
            grad_negative=grad_n_first,
        )
    return LatResult(
        value=0.0,
        grad_anchor=np.zeros_like(batch.anchor),
        grad_positive=np.zeros_like(batch.positive),
        grad_negative=np.zeros_like(batch.negative),
    )


def lal_loss(
    x,
    proxies,
    y: int,
    batch: TripletBatch,
    temperature: float = DEFAULT_TEMPERATURE,
    margin: float = 0.0,
) -> LalResult:
    """Combined objective: classification plus triplet, unweighted sum.

    ``batch.anchor`` must be the same embedding set as ``x``; the returned
    ``grad_x`` sums both contributions.
    """
    lac = lac_loss(x, proxies, y, temperature)
    lat = lat_loss(batch, margin)
    return LalResult(
        value=lac.value + lat.value,
        lac=lac,
        lat=lat,
        grad_x=lac.grad_x + lat.grad_anchor,
        grad_proxies=lac.grad_proxies,
    )


def cls_loss_baseline(f, weights, y: int) -> ClsResult:
    """Softmax cross-entropy on plain dot-product logits of a global vector."""
    f = np.asarray(f, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if f.ndim != 1 or weights.ndim != 2 or weights.shape[1] != f.shape[0]:
        raise ValueError("expected f (C,) and weights (K, C)")
    n_classes = weights.shape[0]
    if not 0 <= y < n_classes:
        raise ValueError(f"label {y} outside [0, {n_classes})")
    logits = weights @ f
    loss, dz = _softmax_ce(logits, y)
    return ClsResult(
        value=loss,
        logits=logits,
        grad_f=weights.T @ dz,
        grad_weights=np.outer(dz, f),
    )


def euclidean_triplet_loss(anchor, positive, negative, margin: float = 0.0):
    """Hinge on Euclidean distances of single global vectors.

    Returns (value, grad_anchor, grad_positive, grad_negative).
    """
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    d_ap = float(np.linalg.norm(a - p))
    d_an = float(np.linalg.norm(a - n))
    t = d_ap - d_an + margin
    if t <= 0.0:
        z = np.zeros_like(a)
        return 0.0, z, z.copy(), z.copy()
    u_ap = (a - p) / max(d_ap, 1e-12)
    u_an = (a - n) / max(d_an, 1e-12)
    return float(t), u_ap - u_an, -u_ap, u_an
