"""SGD-with-momentum training of the tied-weight encoder on mined pairs or triplets."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DivergenceError, InvalidConfig
from .mining import TrainingPair, TrainingTriplet
from .model import (
    EncoderArch,
    EncoderParams,
    LossConfig,
    backward_batch,
    forward_batch,
    pair_loss,
    triplet_loss,
    weight_norm_sq,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    arch: EncoderArch = field(default_factory=EncoderArch)
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True
    decay_every: int | None = None  # default: ceil(epochs / 3)
    decay_factor: float = 0.5
    init_gain: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise InvalidConfig("learning rate must be >= 0")
        if not (0 <= self.momentum < 1):
            raise InvalidConfig("momentum must lie in [0, 1)")
        if not self.init_gain > 0:
            raise InvalidConfig("init gain must be positive")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    params: EncoderParams
    seconds: float
    batch_losses: list[float] = field(default_factory=list)


HE_GAIN = math.sqrt(6.0)


def init_params(arch: EncoderArch, seed: int, gain: float = 1.0) -> EncoderParams:
    """Weights from U(-gain / sqrt(fan_in), gain / sqrt(fan_in)); zero biases.

    With gain 1 activations shrink layer by layer, so the initial descriptors nearly
    coincide and margin losses can sit on a long plateau. ``HE_GAIN`` (He-uniform)
    keeps the activation scale and is what the toy experiments use.
    """
    if not gain > 0:
        raise InvalidConfig("init gain must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fi, fo in arch.layer_shapes():
        bound = gain / math.sqrt(fi)
        weights.append(rng.uniform(-bound, bound, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return EncoderParams(arch, weights, biases)


def _stratified_order(strata: Sequence[np.ndarray], rng: np.random.Generator | None) -> np.ndarray:
    """Interleave index groups so every stretch of the order keeps their global ratio."""
    keys, idx = [], []
    for s, members in enumerate(strata):
        n = len(members)
        if n == 0:
            continue
        members = rng.permutation(members) if rng is not None else np.asarray(members)
        keys.append(np.column_stack([(np.arange(n) + 0.5) / n, np.full(n, s)]))
        idx.append(members)
    keys = np.concatenate(keys)
    idx = np.concatenate(idx)
    return idx[np.lexsort((keys[:, 1], keys[:, 0]))]


class _Objective:
    """Batch-mean loss plus weight decay, and its gradient, for one dataset."""

    def __init__(self, dataset, cfg: LossConfig):
        self.cfg = cfg
        self.triplets = isinstance(dataset[0], TrainingTriplet)
        if self.triplets:
            self.X = np.stack([np.stack([t.anchor.points, t.positive.points, t.negative.points]) for t in dataset])
            self.y = self.gamma = None
        else:
            self.X = np.stack([np.stack([p.patch_a.points, p.patch_b.points]) for p in dataset])
            self.y = np.array([1.0 if p.positive else 0.0 for p in dataset])
            self.gamma = np.array([float(p.gamma) if p.gamma is not None else 0.0 for p in dataset])

    def strata(self) -> list[np.ndarray]:
        n = len(self.X)
        if self.triplets:
            return [np.arange(n)]
        pos = np.flatnonzero(self.y == 1)
        if self.cfg.kind == "mmcl":
            neg = self.y == 0
            return [pos, np.flatnonzero(neg & (self.gamma == 0)), np.flatnonzero(neg & (self.gamma == 1))]
        return [pos, np.flatnonzero(self.y == 0)]

    def __call__(self, params: EncoderParams, batch: np.ndarray, need_grad: bool = True):
        Xb = self.X[batch]
        nb, branches = Xb.shape[:2]
        flat = Xb.transpose(1, 0, 2, 3).reshape(branches * nb, *Xb.shape[2:])
        desc, cache = forward_batch(params, flat)
        parts = desc.reshape(branches, nb, -1)
        if self.triplets:
            losses, ga, gp, gn = triplet_loss(parts[0], parts[1], parts[2], self.cfg)
            up = np.concatenate([ga, gp, gn])
        else:
            losses, gi, gj = pair_loss(self.cfg, parts[0], parts[1], self.y[batch], self.gamma[batch])
            up = np.concatenate([gi, gj])
        value = float(np.mean(losses)) + self.cfg.lam * weight_norm_sq(params)
        if not need_grad:
            return value, None
        grads = backward_batch(params, up / nb, cache)
        for W, gW in zip(params.weights, grads.weights):
            gW += 2.0 * self.cfg.lam * W
        return value, grads


def check_dataset(dataset, cfg: LossConfig):
    if len(dataset) == 0:
        raise InvalidConfig("training dataset is empty")
    is_triplet = isinstance(dataset[0], TrainingTriplet)
    if any(isinstance(d, TrainingTriplet) != is_triplet for d in dataset):
        raise InvalidConfig("dataset mixes pairs and triplets")
    if is_triplet != (cfg.kind == "triplet"):
        kind = "triplets" if is_triplet else "pairs"
        raise InvalidConfig(f"{cfg.kind} loss cannot train on {kind}")
    if cfg.kind == "mmcl" and not is_triplet:
        if any((not p.positive) and p.gamma is None for p in dataset):
            raise InvalidConfig("mmcl needs gamma on every negative pair")


def batch_objective(dataset, cfg: LossConfig):
    """Callable ``f(params, batch_indices, need_grad)`` evaluating the training objective."""
    check_dataset(dataset, cfg)
    return _Objective(dataset, cfg)


def train(
    dataset: Sequence[TrainingPair] | Sequence[TrainingTriplet],
    cfg: TrainConfig,
    init: EncoderParams | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainReport:
    """Minimise the regularised batch-mean loss with SGD + momentum and step decay."""
    objective = batch_objective(dataset, cfg.loss)
    params = init.copy() if init is not None else init_params(cfg.arch, cfg.seed, cfg.init_gain)
    params.validate()
    rng = np.random.default_rng([cfg.seed, 1])
    velocity = params.zeros_like()
    decay_every = cfg.decay_every or math.ceil(cfg.epochs / 3)
    strata = objective.strata()

    start = time.perf_counter()
    epoch_losses, batch_losses = [], []
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        if epoch > 0 and epoch % decay_every == 0:
            lr *= cfg.decay_factor
        order = _stratified_order(strata, rng if cfg.shuffle else None)
        total = 0.0
        for bi, s in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[s : s + cfg.batch_size]
            value, grads = objective(params, batch)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            for p, v, g in zip(params.arrays(), velocity.arrays(), grads.arrays()):
                v *= cfg.momentum
                v += g
                p -= lr * v
            total += value * len(batch)
            batch_losses.append(value)
        epoch_losses.append(total / len(order))
        log.info("epoch %d loss %.6f", epoch, epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])
    return TrainReport(epoch_losses, params, time.perf_counter() - start, batch_losses)
