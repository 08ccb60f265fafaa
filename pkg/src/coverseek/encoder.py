"""Local-embedding encoder: small CNN, GeM pooling, PCA-initialized projection.

Each chunk of the feature tensor is processed independently by a stack of
stride-2 convolution blocks (instance-batch or plain batch normalization,
ReLU), pooled over its frequency-time grid with generalized-mean pooling,
projected to the output dimension and L2-normalized.  One recording thus
maps to a matrix of unit-norm local embeddings, one row per chunk.

Gradients are hand-derived reverse-mode: every forward helper returns the
cache its paired backward needs, and ``backward_rows`` walks the fixed
graph in reverse.  Finite-difference tests pin the derivations down.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .signal import ChunkedCqt

GEM_EPS = 1e-6
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    conv_blocks: int = 3
    channels: tuple = (16, 32, 64)
    use_ibn: bool = True
    gem_p: float = 3.0
    backbone_dim: int = 64
    out_dim: int = 32
    seed: int = 0
    # stride along the (already compressed) time axis, per block.  Frequency
    # is always stride 2.  Keeping time resolution into the pooling stage
    # lets GeM favor content columns over the zero-padding of short chunks.
    time_strides: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.time_strides is None:
            strides = (2,) + (1,) * (self.conv_blocks - 1)
        else:
            strides = tuple(int(s) for s in self.time_strides)
        object.__setattr__(self, "time_strides", strides)
        if len(self.channels) != self.conv_blocks:
            raise ConfigError("channels must list one width per conv block")
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel widths must be positive")
        if self.use_ibn and any(c % 2 for c in self.channels):
            raise ConfigError("instance-batch normalization needs even channel counts")
        if self.gem_p < 1:
            raise ConfigError("gem_p must be >= 1")
        if self.backbone_dim != self.channels[-1]:
            raise ConfigError("backbone_dim must equal the last channel width")
        if not 1 <= self.out_dim <= self.backbone_dim:
            raise ConfigError("need 1 <= out_dim <= backbone_dim")
        if len(self.time_strides) != self.conv_blocks or any(
            s not in (1, 2) for s in self.time_strides
        ):
            raise ConfigError("time_strides needs one value in {1, 2} per block")


@dataclass
class LocalEmbeddingSet:
    """Unit-norm local embeddings of one recording, one row per chunk."""

    vectors: np.ndarray
    recording_id: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError("vectors must be a non-empty 2-D matrix")

    @property
    def n_rows(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ModelParams:
    """All trainable arrays plus normalization running statistics.

    The proxy bank and the baseline's global classifier head belong to the
    loss side of training but are serialized together with the encoder.
    """

    config: EncoderConfig
    conv_w: list
    gamma: list
    beta: list
    run_mean: list
    run_var: list
    proj_w: np.ndarray
    proj_b: np.ndarray
    proxies: np.ndarray = None
    head_global: np.ndarray = None

    def trainable_arrays(self):
        """Ordered (name, array) pairs updated by the optimizer."""
        pairs = []
        for i, w in enumerate(self.conv_w):
            pairs.append((f"conv{i}_w", w))
        for i in range(len(self.gamma)):
            pairs.append((f"block{i}_gamma", self.gamma[i]))
            pairs.append((f"block{i}_beta", self.beta[i]))
        pairs.append(("proj_w", self.proj_w))
        pairs.append(("proj_b", self.proj_b))
        if self.proxies is not None:
            pairs.append(("proxies", self.proxies))
        if self.head_global is not None:
            pairs.append(("head_global", self.head_global))
        return pairs

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            conv_w=[w.copy() for w in self.conv_w],
            gamma=[g.copy() for g in self.gamma],
            beta=[b.copy() for b in self.beta],
            run_mean=[m.copy() for m in self.run_mean],
            run_var=[v.copy() for v in self.run_var],
            proj_w=self.proj_w.copy(),
            proj_b=self.proj_b.copy(),
            proxies=None if self.proxies is None else self.proxies.copy(),
            head_global=None if self.head_global is None else self.head_global.copy(),
        )

    def to_tensors(self) -> dict:
        cfg_json = json.dumps(
            {
                "conv_blocks": self.config.conv_blocks,
                "channels": list(self.config.channels),
                "use_ibn": self.config.use_ibn,
                "gem_p": self.config.gem_p,
                "backbone_dim": self.config.backbone_dim,
                "out_dim": self.config.out_dim,
                "seed": self.config.seed,
                "time_strides": list(self.config.time_strides),
            }
        )
        out = {"config_json": np.frombuffer(cfg_json.encode("utf-8"), dtype=np.uint8)}
        for i, w in enumerate(self.conv_w):
            out[f"conv{i}_w"] = w
        for i in range(len(self.gamma)):
            out[f"block{i}_gamma"] = self.gamma[i]
            out[f"block{i}_beta"] = self.beta[i]
            out[f"block{i}_run_mean"] = self.run_mean[i]
            out[f"block{i}_run_var"] = self.run_var[i]
        out["proj_w"] = self.proj_w
        out["proj_b"] = self.proj_b
        if self.proxies is not None:
            out["proxies"] = self.proxies
        if self.head_global is not None:
            out["head_global"] = self.head_global
        return out

    @classmethod
    def from_tensors(cls, tensors: dict) -> "ModelParams":
        cfg = EncoderConfig(**json.loads(bytes(tensors["config_json"]).decode("utf-8")))
        n = cfg.conv_blocks
        return cls(
            config=cfg,
            conv_w=[tensors[f"conv{i}_w"] for i in range(n)],
            gamma=[tensors[f"block{i}_gamma"] for i in range(n)],
            beta=[tensors[f"block{i}_beta"] for i in range(n)],
            run_mean=[tensors[f"block{i}_run_mean"] for i in range(n)],
            run_var=[tensors[f"block{i}_run_var"] for i in range(n)],
            proj_w=tensors["proj_w"],
            proj_b=tensors["proj_b"],
            proxies=tensors.get("proxies"),
            head_global=tensors.get("head_global"),
        )


def init_params(
    cfg: EncoderConfig,
    rng=None,
    n_classes: int = None,
    proxies_per_class: int = 4,
    with_global_head: bool = False,
) -> ModelParams:
    """He-initialized parameters; projection starts random (see PCA init)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    conv_w, gamma, beta, run_mean, run_var = [], [], [], [], []
    c_in = 1
    for c_out in cfg.channels:
        fan_in = c_in * 9
        conv_w.append(rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / fan_in))
        gamma.append(np.ones(c_out))
        beta.append(np.zeros(c_out))
        n_bn = c_out // 2 if cfg.use_ibn else c_out
        run_mean.append(np.zeros(n_bn))
        run_var.append(np.ones(n_bn))
        c_in = c_out
    proj_w = rng.standard_normal((cfg.out_dim, cfg.backbone_dim)) / np.sqrt(
        cfg.backbone_dim
    )
    proj_b = np.zeros(cfg.out_dim)
    proxies = None
    if n_classes is not None:
        proxies = rng.standard_normal((n_classes, proxies_per_class, cfg.out_dim))
        proxies /= np.linalg.norm(proxies, axis=2, keepdims=True)
    head = None
    if with_global_head:
        if n_classes is None:
            raise ValueError("global head requires n_classes")
        head = rng.standard_normal((n_classes, cfg.out_dim)) * 0.05
    return ModelParams(
        config=cfg,
        conv_w=conv_w,
        gamma=gamma,
        beta=beta,
        run_mean=run_mean,
        run_var=run_var,
        proj_w=proj_w,
        proj_b=proj_b,
        proxies=proxies,
        head_global=head,
    )


# ---------------------------------------------------------------------------
# layer primitives (forward returns the cache its backward consumes)

def _conv_forward(x, w, stride=(2, 2)):
    # 3x3 kernels, zero padding 1, configurable stride per axis
    b, c_in, h, wd = x.shape
    c_out = w.shape[0]
    sh, sw = stride
    h2 = (h - 1) // sh + 1
    w2 = (wd - 1) // sw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c_in, 9, h2, w2))
    for ki in range(3):
        for kj in range(3):
            cols[:, :, ki * 3 + kj] = xp[
                :, :, ki : ki + sh * h2 : sh, kj : kj + sw * w2 : sw
            ]
    y = np.einsum("bckhw,ock->bohw", cols, w.reshape(c_out, c_in, 9))
    return y, (cols, w, x.shape, stride)


def _conv_backward(grad_y, cache):
    cols, w, x_shape, stride = cache
    b, c_in, h, wd = x_shape
    c_out = w.shape[0]
    sh, sw = stride
    h2, w2 = grad_y.shape[2], grad_y.shape[3]
    w9 = w.reshape(c_out, c_in, 9)
    grad_w = np.einsum("bohw,bckhw->ock", grad_y, cols).reshape(w.shape)
    grad_cols = np.einsum("bohw,ock->bckhw", grad_y, w9)
    grad_xp = np.zeros((b, c_in, h + 2, wd + 2))
    for ki in range(3):
        for kj in range(3):
            grad_xp[:, :, ki : ki + sh * h2 : sh, kj : kj + sw * w2 : sw] += grad_cols[
                :, :, ki * 3 + kj
            ]
    return grad_w, grad_xp[:, :, 1 : h + 1, 1 : wd + 1]


def _ibn_forward(
    x, gamma, beta, run_mean, run_var, use_ibn, training, update_running
):
    split = x.shape[1] // 2 if use_ibn else 0
    eps = NORM_EPS
    xhat = np.empty_like(x)
    inv_std_in = None
    if split:
        xin = x[:, :split]
        mu = xin.mean(axis=(2, 3), keepdims=True)
        var = xin.var(axis=(2, 3), keepdims=True)
        inv_std_in = 1.0 / np.sqrt(var + eps)
        xhat[:, :split] = (xin - mu) * inv_std_in
    xbn = x[:, split:]
    if training:
        mu_b = xbn.mean(axis=(0, 2, 3))
        var_b = xbn.var(axis=(0, 2, 3))
        if update_running:
            run_mean *= 1.0 - BN_MOMENTUM
            run_mean += BN_MOMENTUM * mu_b
            run_var *= 1.0 - BN_MOMENTUM
            run_var += BN_MOMENTUM * var_b
    else:
        mu_b, var_b = run_mean, run_var
    inv_std_bn = 1.0 / np.sqrt(var_b + eps)
    xhat[:, split:] = (xbn - mu_b[None, :, None, None]) * inv_std_bn[
        None, :, None, None
    ]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std_in, inv_std_bn, gamma, split, training)
    return y, cache


def _ibn_backward(grad_y, cache):
    xhat, inv_std_in, inv_std_bn, gamma, split, training = cache
    grad_gamma = (grad_y * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_y.sum(axis=(0, 2, 3))
    g = grad_y * gamma[None, :, None, None]
    grad_x = np.empty_like(grad_y)
    if split:
        gh = g[:, :split]
        xh = xhat[:, :split]
        mean_g = gh.mean(axis=(2, 3), keepdims=True)
        mean_gx = (gh * xh).mean(axis=(2, 3), keepdims=True)
        grad_x[:, :split] = inv_std_in * (gh - mean_g - xh * mean_gx)
    gb = g[:, split:]
    xb = xhat[:, split:]
    if training:
        mean_g = gb.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gb * xb).mean(axis=(0, 2, 3), keepdims=True)
        grad_x[:, split:] = inv_std_bn[None, :, None, None] * (
            gb - mean_g - xb * mean_gx
        )
    else:
        grad_x[:, split:] = gb * inv_std_bn[None, :, None, None]
    return grad_x, grad_gamma, grad_beta


def ibn_block(x, gamma, beta, run_mean, run_var, use_ibn=True, training=False):
    """Instance-batch normalization: first half of the channels normalized
    per sample over its grid, second half over batch and grid, then one
    per-channel affine transform.  ``use_ibn=False`` batch-normalizes all
    channels."""
    y, _ = _ibn_forward(
        np.asarray(x, dtype=np.float64),
        np.asarray(gamma, dtype=np.float64),
        np.asarray(beta, dtype=np.float64),
        np.asarray(run_mean, dtype=np.float64),
        np.asarray(run_var, dtype=np.float64),
        use_ibn,
        training,
        update_running=False,
    )
    return y


def _gem_forward(x, p):
    z = np.clip(x, GEM_EPS, None)
    m = (z**p).mean(axis=(2, 3))
    y = m ** (1.0 / p)
    return y, (x, z, y, p)


def _gem_backward(grad_y, cache):
    x, z, y, p = cache
    grid = x.shape[2] * x.shape[3]
    ratio = z / y[:, :, None, None]
    grad_z = grad_y[:, :, None, None] * ratio ** (p - 1.0) / grid
    return grad_z * (x > GEM_EPS)


def gem_pool(z, p: float) -> np.ndarray:
    """Generalized-mean pool one C x H x W tensor to a length-C vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError("gem_pool expects a C x H x W tensor")
    y, _ = _gem_forward(z[None], float(p))
    return y[0]


def _l2norm_forward(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    y = x / norms
    return y, (y, norms)


def _l2norm_backward(grad_y, cache):
    y, norms = cache
    dot = (grad_y * y).sum(axis=1, keepdims=True)
    return (grad_y - dot * y) / norms


# ---------------------------------------------------------------------------
# full encoder

def forward_rows(
    x,
    params: ModelParams,
    training: bool = False,
    update_running: bool = False,
    want_cache: bool = False,
):
    """Map a stack of chunk matrices (N, F, T) to unit-norm rows (N, out_dim).

    In training mode batch statistics couple the rows through the
    batch-normalized channels; at inference running averages are used and
    every chunk is processed independently.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("expected a (N, F, T) feature tensor")
    cfg = params.config
    h = x[:, None, :, :]
    caches = []
    for i in range(cfg.conv_blocks):
        h, conv_cache = _conv_forward(
            h, params.conv_w[i], stride=(2, cfg.time_strides[i])
        )
        h, ibn_cache = _ibn_forward(
            h,
            params.gamma[i],
            params.beta[i],
            params.run_mean[i],
            params.run_var[i],
            cfg.use_ibn,
            training,
            update_running,
        )
        relu_mask = h > 0
        h = h * relu_mask
        caches.append((conv_cache, ibn_cache, relu_mask))
    pooled, gem_cache = _gem_forward(h, cfg.gem_p)
    feats = pooled @ params.proj_w.T + params.proj_b
    rows, norm_cache = _l2norm_forward(feats)
    if not want_cache:
        return rows, None
    cache = {
        "blocks": caches,
        "gem": gem_cache,
        "pooled": pooled,
        "norm": norm_cache,
        "proj_w": params.proj_w,
    }
    return rows, cache


def backward_rows(cache, grad_rows):
    """Gradients of a scalar loss w.r.t. all trainable encoder arrays.

    ``grad_rows`` is the loss gradient at the unit-norm output rows.
    Returns a dict keyed like ``ModelParams.trainable_arrays``.
    """
    grads = {}
    g = _l2norm_backward(np.asarray(grad_rows, dtype=np.float64), cache["norm"])
    grads["proj_w"] = g.T @ cache["pooled"]
    grads["proj_b"] = g.sum(axis=0)
    g = g @ cache["proj_w"]
    g = _gem_backward(g, cache["gem"])
    for i in range(len(cache["blocks"]) - 1, -1, -1):
        conv_cache, ibn_cache, relu_mask = cache["blocks"][i]
        g = g * relu_mask
        g, grad_gamma, grad_beta = _ibn_backward(g, ibn_cache)
        grads[f"block{i}_gamma"] = grad_gamma
        grads[f"block{i}_beta"] = grad_beta
        grad_w, g = _conv_backward(g, conv_cache)
        grads[f"conv{i}_w"] = grad_w
    return grads


def forward(cqt: ChunkedCqt, params: ModelParams) -> LocalEmbeddingSet:
    """Inference-mode encoding of one recording's feature tensor."""
    rows, _ = forward_rows(cqt.data, params, training=False)
    return LocalEmbeddingSet(vectors=rows, recording_id=cqt.recording_id)


def backbone_feature_map(x, params: ModelParams, training: bool = False) -> np.ndarray:
    """4-D activations (N, C, H, W') right before the pooling stage."""
    x = np.asarray(x, dtype=np.float64)
    cfg = params.config
    h = x[:, None, :, :]
    for i in range(cfg.conv_blocks):
        h, _ = _conv_forward(h, params.conv_w[i], stride=(2, cfg.time_strides[i]))
        h, _ = _ibn_forward(
            h,
            params.gamma[i],
            params.beta[i],
            params.run_mean[i],
            params.run_var[i],
            cfg.use_ibn,
            training,
            update_running=training,
        )
        h = np.maximum(h, 0.0)
    return h


def backbone_outputs(x, params: ModelParams, training: bool = False) -> np.ndarray:
    """GeM-pooled backbone features (N, backbone_dim) before projection."""
    feature_map = backbone_feature_map(x, params, training)
    pooled, _ = _gem_forward(feature_map, params.config.gem_p)
    return pooled


def save_params(params: ModelParams, path) -> None:
    """Serialize model parameters into the named-tensor container."""
    from . import store as store_mod

    store_mod.write_tensors(path, params.to_tensors())


def load_params(path) -> ModelParams:
    """Load model parameters saved by :func:`save_params` (bit-exact)."""
    from . import store as store_mod

    return ModelParams.from_tensors(store_mod.read_tensors(path))


def mean_pooled_embedding(rows) -> np.ndarray:
    """Single global vector: mean of local embeddings, re-normalized."""
    rows = np.asarray(rows, dtype=np.float64)
    mean = rows.mean(axis=0)
    return mean / max(np.linalg.norm(mean), 1e-12)


def pca_init_projection(sample_embeddings, out_dim: int):
    """Whitening PCA initialization of the projection layer.

    Rows are the top principal directions scaled by ``1/sqrt(eig + 1e-8)``;
    directions with (near) zero variance keep unit scale.  The bias centers
    the projected data: ``y = W x + b`` with ``b = -W mean``.
    """
    samples = np.asarray(sample_embeddings, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError("sample_embeddings must be 2-D")
    n, dim = samples.shape
    if out_dim < 1 or out_dim > dim:
        raise ValueError("out_dim must be in [1, sample dimension]")
    if n < out_dim:
        raise ValueError(f"need at least {out_dim} samples, got {n}")
    mu = samples.mean(axis=0)
    centered = samples - mu
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:out_dim]
    top_vals = eigvals[order]
    top_dirs = eigvecs[:, order]
    scale = np.where(top_vals > 1e-10, 1.0 / np.sqrt(np.abs(top_vals) + 1e-8), 1.0)
    w = (top_dirs * scale).T
    b = -w @ mu
    return w, b
