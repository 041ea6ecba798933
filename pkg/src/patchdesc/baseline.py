"""Hard-binned local histogram descriptor and NNDR matching.

The histogram is a simplified SHOT-like signature: every support point of a
keypoint votes into one bin indexed by its LRF azimuth, elevation, radial shell
and the cosine between its normal and the keypoint normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSupport, InvalidInput
from .geometry import PointCloud, _support, compute_lrf

DEFAULT_BINS = (8, 2, 2, 8)


@dataclass(frozen=True)
class NndrMatch:
    query_index: int
    target_index: int
    ratio: float


def _bin(values: np.ndarray, lo: float, hi: float, count: int) -> np.ndarray:
    # edge values land in the higher bin; the top edge is clamped into the last bin
    b = np.floor((values - lo) / (hi - lo) * count).astype(np.int64)
    return np.clip(b, 0, count - 1)


def histogram_bins(local: np.ndarray, dists: np.ndarray, cosines: np.ndarray, R: float, bins) -> np.ndarray:
    """Flat bin index for each support point."""
    na, ne, nr, nc = bins
    az = np.arctan2(local[:, 1], local[:, 0])
    el = np.arctan2(local[:, 2], np.hypot(local[:, 0], local[:, 1]))
    a = _bin(az, -np.pi, np.pi, na)
    e = _bin(el, -np.pi / 2, np.pi / 2, ne)
    r = _bin(dists / R, 0.0, 1.0, nr)
    c = _bin(np.clip(cosines, -1.0, 1.0), -1.0, 1.0, nc)
    return ((a * ne + e) * nr + r) * nc + c


def compute_histogram_descriptor(
    cloud: PointCloud, keypoint_index: int, R: float, bins=DEFAULT_BINS
) -> np.ndarray:
    if cloud.normals is None:
        raise InvalidInput("histogram descriptor needs a cloud with normals")
    bins = tuple(int(b) for b in bins)
    if len(bins) != 4 or min(bins) < 1:
        raise InvalidInput(f"bins must be four positive integers, got {bins}")
    lrf = compute_lrf(cloud, keypoint_index, R)
    idx, offsets, d = _support(cloud, keypoint_index, R)
    if len(idx) == 0:
        raise InsufficientSupport(f"keypoint {keypoint_index}: empty support")
    local = offsets @ lrf.axes.T
    cos = cloud.normals[idx] @ cloud.normals[keypoint_index]
    flat = histogram_bins(local, d, cos, R, bins)
    hist = np.bincount(flat, minlength=int(np.prod(bins))).astype(np.float64)
    return hist / np.linalg.norm(hist)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances computed by explicit differences (no Gram-matrix cancellation)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    out = np.empty((len(a), len(b)))
    step = max(1, 2_000_000 // max(1, len(b) * a.shape[1]))
    for s in range(0, len(a), step):
        diff = a[s : s + step, None, :] - b[None, :, :]
        out[s : s + step] = np.sqrt(np.einsum("qtd,qtd->qt", diff, diff))
    return out


def nndr_match(queries, targets, max_ratio: float = 0.8) -> list[NndrMatch]:
    """Nearest/second-nearest distance ratio test for every query."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if len(targets) < 2:
        raise InvalidInput("NNDR needs at least 2 targets")
    if not (0 < max_ratio <= 1):
        raise InvalidInput("max_ratio must lie in (0, 1]")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.size == 0:
        return []
    dist = pairwise_distances(queries, targets)
    order = np.argsort(dist, axis=1, kind="stable")
    out = []
    for q in range(len(dist)):
        j1, j2 = order[q, 0], order[q, 1]
        d1, d2 = dist[q, j1], dist[q, j2]
        ratio = 1.0 if d2 == 0 else d1 / d2
        if ratio <= max_ratio:
            out.append(NndrMatch(q, int(j1), float(ratio)))
    return out
