"""Iterative Quantization: PCA to B dimensions, then a learned rotation that minimises
the distance between the rotated data and its sign pattern. Codes are packed
little-endian (bit i of the code is bit i % 8 of byte i // 8)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientRank, InvalidInput


@dataclass
class ItqModel:
    mean: np.ndarray  # (D,)
    projection: np.ndarray  # (D, B)
    rotation: np.ndarray  # (B, B)
    losses: list[float] = field(default_factory=list)

    @property
    def bits(self) -> int:
        return self.projection.shape[1]

    @property
    def dim(self) -> int:
        return self.projection.shape[0]


@dataclass(frozen=True)
class BinaryCode:
    packed: bytes
    bits: int

    def unpack(self) -> np.ndarray:
        raw = np.frombuffer(self.packed, dtype=np.uint8)
        return np.unpackbits(raw, bitorder="little")[: self.bits].astype(bool)

    @classmethod
    def from_bits(cls, bits) -> "BinaryCode":
        bits = np.asarray(bits, dtype=bool).reshape(-1)
        return cls(np.packbits(bits, bitorder="little").tobytes(), len(bits))


def random_rotation(b: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with the sign fix)."""
    q, r = np.linalg.qr(rng.normal(size=(b, b)))
    return q * np.sign(np.diag(r))


def _pca(X: np.ndarray, bits: int) -> np.ndarray:
    cov = X.T @ X / (len(X) - 1)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    tol = max(vals[0], 0.0) * len(vals) * np.finfo(np.float64).eps
    positive = int(np.count_nonzero(vals > tol))
    if positive < bits:
        raise InsufficientRank(f"covariance has {positive} positive eigenvalues, need {bits}")
    proj = vecs[:, :bits].copy()
    lead = proj[np.abs(proj).argmax(axis=0), np.arange(bits)]
    return proj * np.where(lead < 0, -1.0, 1.0)


def quantization_loss(V: np.ndarray, R: np.ndarray) -> float:
    VR = V @ R
    B = np.where(VR > 0, 1.0, -1.0)
    return float(np.sum((B - VR) ** 2))


def itq_train(descriptors, bits: int = 128, iterations: int = 50, seed: int = 0) -> ItqModel:
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInput("descriptors must form an (n, D) matrix")
    n, D = X.shape
    if not (1 <= bits <= D):
        raise InvalidInput(f"bits must lie in [1, {D}]")
    if n <= bits:
        raise InvalidInput(f"ITQ needs more than {bits} descriptors, got {n}")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("descriptors contain NaN or Inf")
    mean = X.mean(axis=0)
    proj = _pca(X - mean, bits)
    V = (X - mean) @ proj
    R = random_rotation(bits, np.random.default_rng(seed))
    losses = []
    for _ in range(iterations):
        B = np.where(V @ R > 0, 1.0, -1.0)
        # orthogonal Procrustes: argmin_R |B - V R| over orthogonal R
        U, _, Wt = np.linalg.svd(V.T @ B)
        R = U @ Wt
        losses.append(float(np.sum((B - V @ R) ** 2)))
    return ItqModel(mean, proj, R, losses)


def itq_project(model: ItqModel, descriptors) -> np.ndarray:
    X = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    if X.shape[1] != model.dim:
        raise InvalidInput(f"descriptor dimension {X.shape[1]} != model dimension {model.dim}")
    return (X - model.mean) @ model.projection @ model.rotation


def itq_encode(model: ItqModel, descriptor) -> BinaryCode:
    """Bit i is set iff the i-th rotated component is strictly positive."""
    x = np.asarray(descriptor, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInput("itq_encode takes a single descriptor; use itq_encode_many")
    return BinaryCode.from_bits(itq_project(model, x)[0] > 0)


def itq_encode_many(model: ItqModel, descriptors) -> list[BinaryCode]:
    return [BinaryCode.from_bits(row > 0) for row in itq_project(model, descriptors)]


def _popcount8() -> np.ndarray:
    return np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


_POP = _popcount8()


def hamming_distances(query: BinaryCode, targets: list[BinaryCode]) -> np.ndarray:
    for t in targets:
        if t.bits != query.bits:
            raise InvalidInput(f"code length {t.bits} != query length {query.bits}")
    if not targets:
        return np.zeros(0, dtype=np.int64)
    q = np.frombuffer(query.packed, dtype=np.uint8)
    T = np.stack([np.frombuffer(t.packed, dtype=np.uint8) for t in targets])
    return _POP[np.bitwise_xor(T, q)].sum(axis=1)


def hamming_rank(query: BinaryCode, targets: list[BinaryCode]) -> np.ndarray:
    """Target indices by ascending Hamming distance, ties to the lower index."""
    return np.argsort(hamming_distances(query, targets), kind="stable")
