"""Permutation-invariant patch encoder (shared point MLP, max-pool, head MLP) and the
pair/triplet metric-learning losses, all with analytic gradients in float64.

Weights are stored as (fan_in, fan_out) matrices so a layer is ``x @ W + b``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ArchMismatch, InvalidCache, InvalidConfig, InvalidParams
from .geometry import Patch

VARIANTS = ("patch_siamese", "aggregated")
LOSS_KINDS = ("hinge", "contrastive", "triplet", "mmcl")


@dataclass(frozen=True)
class EncoderArch:
    point_mlp_dims: tuple[int, ...] = (3, 32, 64, 128)
    head_dims: tuple[int, ...] = (128, 128, 128)
    variant: str = "patch_siamese"

    def __post_init__(self):
        object.__setattr__(self, "point_mlp_dims", tuple(int(d) for d in self.point_mlp_dims))
        object.__setattr__(self, "head_dims", tuple(int(d) for d in self.head_dims))
        if len(self.point_mlp_dims) < 2 or self.point_mlp_dims[0] != 3:
            raise ArchMismatch("point_mlp_dims must start at 3 and have at least one layer")
        if len(self.head_dims) < 2 or self.head_dims[0] != self.point_mlp_dims[-1]:
            raise ArchMismatch("head_dims must start at the last point-MLP width")
        if self.descriptor_dim < 8:
            raise ArchMismatch("descriptor dimension must be >= 8")
        if min(self.point_mlp_dims + self.head_dims) < 1:
            raise ArchMismatch("layer widths must be positive")
        if self.variant not in VARIANTS:
            raise ArchMismatch(f"unknown variant {self.variant!r}")

    @classmethod
    def with_dim(cls, D: int, point_mlp_dims=(3, 32, 64, 128), hidden: int = 128, variant="patch_siamese"):
        return cls(tuple(point_mlp_dims), (point_mlp_dims[-1], hidden, D), variant)

    @property
    def descriptor_dim(self) -> int:
        return self.head_dims[-1]

    @property
    def n_point_layers(self) -> int:
        return len(self.point_mlp_dims) - 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.point_mlp_dims, self.head_dims]
        return [(d[i], d[i + 1]) for d in dims for i in range(len(d) - 1)]


@dataclass
class EncoderParams:
    """Weights and biases in layer order: point-MLP layers first, then head layers.

    Also used as the container for parameter gradients.
    """

    arch: EncoderArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def validate(self):
        shapes = self.arch.layer_shapes()
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ArchMismatch(f"expected {len(shapes)} layers, got {len(self.weights)}")
        for l, (fi, fo) in enumerate(shapes):
            if self.weights[l].shape != (fi, fo) or self.biases[l].shape != (fo,):
                raise ArchMismatch(
                    f"layer {l}: expected W{(fi, fo)} b({fo},), got "
                    f"W{self.weights[l].shape} b{self.biases[l].shape}"
                )
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise InvalidParams("parameters contain NaN or Inf")

    def arrays(self) -> list[np.ndarray]:
        """Interleaved [W0, b0, W1, b1, ...]; the checkpoint blob order."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "EncoderParams":
        return EncoderParams(self.arch, [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "EncoderParams":
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[pos : pos + a.size], dtype=np.float64).reshape(a.shape).copy())
            pos += a.size
        return EncoderParams(self.arch, arrays[0::2], arrays[1::2])

    def checksum(self) -> int:
        crc = 0
        for a in self.arrays():
            crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
        return crc

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class ForwardCache:
    token: int
    inputs: np.ndarray  # (B, N, 3) as given, before canonical ordering
    order: np.ndarray  # (B, N) canonical point order per patch
    point_acts: list[np.ndarray] = field(default_factory=list)  # inputs to each point layer, (B*N, C)
    point_pre: list[np.ndarray] = field(default_factory=list)
    pool_idx: np.ndarray | None = None  # (B, C) argmax in canonical order
    head_acts: list[np.ndarray] = field(default_factory=list)
    head_pre: list[np.ndarray] = field(default_factory=list)


def _canonical_order(X: np.ndarray) -> np.ndarray:
    """Lexicographic point order per patch; stable, so duplicates keep their index order.

    Sorting makes the forward pass see the same array for any permutation of a
    patch, which gives bitwise (not just mathematical) permutation invariance.
    """
    B, N, _ = X.shape
    batch = np.repeat(np.arange(B), N)
    flat = X.reshape(-1, 3)
    order = np.lexsort((flat[:, 2], flat[:, 1], flat[:, 0], batch))
    return order.reshape(B, N) - (np.arange(B) * N)[:, None]


def _as_batch(patches) -> np.ndarray:
    if isinstance(patches, Patch):
        return patches.points[None]
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    return X


def forward_batch(params: EncoderParams, X: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Descriptors for a (B, N, 3) batch of patches."""
    params.validate()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != 3 or X.shape[1] < 1:
        raise ArchMismatch(f"expected a (B, N, 3) batch, got {X.shape}")
    B, N, _ = X.shape
    order = _canonical_order(X)
    Xs = X[np.arange(B)[:, None], order]
    cache = ForwardCache(token=params.checksum(), inputs=X.copy(), order=order)

    npl = params.arch.n_point_layers
    h = Xs.reshape(B * N, 3)
    for l in range(npl):
        cache.point_acts.append(h)
        z = h @ params.weights[l] + params.biases[l]
        cache.point_pre.append(z)
        h = np.maximum(z, 0.0) if l < npl - 1 else z

    feats = h.reshape(B, N, -1)
    idx = feats.argmax(axis=1)  # first occurrence wins ties
    cache.pool_idx = idx
    h = feats[np.arange(B)[:, None], idx, np.arange(feats.shape[2])]

    nl = len(params.weights)
    for l in range(npl, nl):
        cache.head_acts.append(h)
        z = h @ params.weights[l] + params.biases[l]
        cache.head_pre.append(z)
        h = np.maximum(z, 0.0) if l < nl - 1 else z
    return h, cache


def backward_batch(params: EncoderParams, upstream: np.ndarray, cache: ForwardCache) -> EncoderParams:
    """Gradient of sum_b upstream[b] . descriptor[b] with respect to all parameters."""
    if cache.token != params.checksum():
        raise InvalidCache("forward cache was produced with different parameters")
    G = np.asarray(upstream, dtype=np.float64)
    B, N, _ = cache.inputs.shape
    D = params.arch.descriptor_dim
    if G.shape != (B, D):
        raise ArchMismatch(f"upstream gradient shape {G.shape}, expected {(B, D)}")
    grads = params.zeros_like()
    npl = params.arch.n_point_layers
    nl = len(params.weights)

    g = G
    for l in range(nl - 1, npl - 1, -1):
        k = l - npl
        if l < nl - 1:
            g = g * (cache.head_pre[k] > 0)
        grads.weights[l] = cache.head_acts[k].T @ g
        grads.biases[l] = g.sum(axis=0)
        g = g @ params.weights[l].T

    C = g.shape[1]
    gf = np.zeros((B, N, C))
    np.put_along_axis(gf, cache.pool_idx[:, None, :], g[:, None, :], axis=1)
    g = gf.reshape(B * N, C)
    for l in range(npl - 1, -1, -1):
        if l < npl - 1:
            g = g * (cache.point_pre[l] > 0)
        grads.weights[l] = cache.point_acts[l].T @ g
        grads.biases[l] = g.sum(axis=0)
        if l > 0:
            g = g @ params.weights[l].T
    return grads


def encoder_forward(params: EncoderParams, patch) -> tuple[np.ndarray, ForwardCache]:
    """Descriptor of a single patch (a Patch or an (N, 3) array)."""
    X = _as_batch(patch)
    if X.shape[0] != 1:
        raise ArchMismatch("encoder_forward takes one patch; use forward_batch for batches")
    desc, cache = forward_batch(params, X)
    return desc[0], cache


def encoder_backward(params: EncoderParams, patch, upstream: np.ndarray, cache: ForwardCache) -> EncoderParams:
    X = _as_batch(patch)
    if X.shape != cache.inputs.shape or not np.array_equal(X, cache.inputs):
        raise InvalidCache("forward cache belongs to a different patch")
    return backward_batch(params, np.asarray(upstream, dtype=np.float64)[None], cache)


# --------------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mmcl"
    m: float = 1.0
    m1: float = 2.0
    m2: float = 1.0
    b: float = 0.0
    lam: float = 1e-4

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidConfig(f"unknown loss kind {self.kind!r}")
        if not self.m > 0:
            raise InvalidConfig("margin m must be positive")
        if not self.m1 >= self.m2 > 0:
            raise InvalidConfig("margins must satisfy m1 >= m2 > 0")
        if self.lam < 0:
            raise InvalidConfig("lambda must be non-negative")


def _out(loss):
    return float(loss) if np.ndim(loss) == 0 else loss


def hinge_loss(desc_i, desc_j, y, cfg: LossConfig):
    """max(0, b - y (m - d^2)) with y in {+1, -1}; returns (loss, grad_i, grad_j)."""
    diff = np.asarray(desc_i, dtype=np.float64) - np.asarray(desc_j, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d2 = np.sum(diff * diff, axis=-1)
    arg = cfg.b - y * (cfg.m - d2)
    loss = np.maximum(0.0, arg)
    dl_dd2 = np.where(arg > 0, y, 0.0)
    gi = 2.0 * dl_dd2[..., None] * diff
    return _out(loss), gi, -gi


def contrastive_loss(desc_i, desc_j, y, cfg: LossConfig):
    """y d^2 + (1 - y) max(0, m^2 - d^2) with y in {1, 0}."""
    diff = np.asarray(desc_i, dtype=np.float64) - np.asarray(desc_j, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d2 = np.sum(diff * diff, axis=-1)
    neg = cfg.m * cfg.m - d2
    loss = y * d2 + (1.0 - y) * np.maximum(0.0, neg)
    dl_dd2 = y - (1.0 - y) * (neg > 0)
    gi = 2.0 * dl_dd2[..., None] * diff
    return _out(loss), gi, -gi


def mmcl_loss(desc_i, desc_j, y, gamma, cfg: LossConfig):
    """Multi-margin contrastive loss.

    y d^2 + (1 - y) max(0, gamma (m1^2 - d^2), (1 - gamma) (m2^2 - d^2)); hard
    negatives (gamma = 1) are pushed out to m1, soft ones (gamma = 0) to m2.
    """
    diff = np.asarray(desc_i, dtype=np.float64) - np.asarray(desc_j, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    d2 = np.sum(diff * diff, axis=-1)
    hard = gamma * (cfg.m1 * cfg.m1 - d2)
    soft = (1.0 - gamma) * (cfg.m2 * cfg.m2 - d2)
    neg = np.maximum(0.0, np.maximum(hard, soft))
    loss = y * d2 + (1.0 - y) * neg
    # exactly one of the branches can be positive since gamma is 0 or 1
    active = -(gamma * (hard > 0) + (1.0 - gamma) * (soft > 0))
    dl_dd2 = y + (1.0 - y) * active
    gi = 2.0 * dl_dd2[..., None] * diff
    return _out(loss), gi, -gi


def triplet_loss(anchor, positive, negative, cfg: LossConfig):
    """max(0, 1 - |a - n|^2 / (|a - p|^2 + m)); returns (loss, grad_a, grad_p, grad_n)."""
    a = np.asarray(anchor, dtype=np.float64)
    dp_vec = a - np.asarray(positive, dtype=np.float64)
    dn_vec = a - np.asarray(negative, dtype=np.float64)
    dp = np.sum(dp_vec * dp_vec, axis=-1)
    dn = np.sum(dn_vec * dn_vec, axis=-1)
    den = dp + cfg.m
    arg = 1.0 - dn / den
    loss = np.maximum(0.0, arg)
    on = arg > 0
    dl_ddn = np.where(on, -1.0 / den, 0.0)[..., None]
    dl_ddp = np.where(on, dn / (den * den), 0.0)[..., None]
    gp_vec = 2.0 * dl_ddp * dp_vec
    gn_vec = 2.0 * dl_ddn * dn_vec
    return _out(loss), gp_vec + gn_vec, -gp_vec, -gn_vec


def weight_norm_sq(params: EncoderParams) -> float:
    return float(sum(np.sum(W * W) for W in params.weights))


def regularized_loss(base: float, params: EncoderParams, lam: float) -> float:
    """base + lam * sum of squared weights; biases are not penalised."""
    return base + lam * weight_norm_sq(params)


def pair_loss(cfg: LossConfig, desc_i, desc_j, y, gamma=None):
    """Dispatch a pair loss. ``y`` uses the {1 positive, 0 negative} convention for every kind."""
    if cfg.kind == "hinge":
        return hinge_loss(desc_i, desc_j, 2.0 * np.asarray(y, dtype=np.float64) - 1.0, cfg)
    if cfg.kind == "contrastive":
        return contrastive_loss(desc_i, desc_j, y, cfg)
    if cfg.kind == "mmcl":
        if gamma is None:
            # gamma only matters on negatives
            if not np.all(np.asarray(y) == 1):
                raise InvalidConfig("mmcl needs gamma for every negative pair")
            gamma = np.zeros(np.shape(y))
        return mmcl_loss(desc_i, desc_j, y, gamma, cfg)
    raise InvalidConfig(f"{cfg.kind} is not a pair loss")
