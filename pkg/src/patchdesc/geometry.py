"""Point-cloud primitives: resolution, normals, ISS keypoints, LRFs and patches."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry, InsufficientSupport, InvalidInput


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise InvalidInput(
                    f"cloud {self.id!r}: {len(self.normals)} normals for {len(self.points)} points"
                )

    def __len__(self):
        return len(self.points)

    def with_normals(self, normals: np.ndarray) -> "PointCloud":
        return replace(self, normals=normals)


@dataclass(frozen=True)
class Lrf:
    origin: np.ndarray
    axes: np.ndarray  # rows are the x, y, z axes
    support_radius: float

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.origin) @ self.axes.T


@dataclass(frozen=True)
class Patch:
    keypoint_index: int
    points: np.ndarray  # (N, 3), LRF coordinates divided by R
    valid_count: int
    lrf: Lrf


@dataclass(frozen=True)
class IssParams:
    salient_radius: float
    nms_radius: float
    gamma_21: float = 0.975
    gamma_32: float = 0.975
    min_neighbors: int = 5

    def __post_init__(self):
        if self.salient_radius <= 0 or self.nms_radius <= 0:
            raise InvalidInput("ISS radii must be positive")
        if not (0 < self.gamma_21 < 1 and 0 < self.gamma_32 < 1):
            raise InvalidInput("ISS ratio thresholds must lie in (0, 1)")
        if self.min_neighbors < 5:
            raise InvalidInput("min_neighbors must be >= 5")

    @classmethod
    def from_resolution(cls, mr: float, **kw) -> "IssParams":
        return cls(salient_radius=6.0 * mr, nms_radius=4.0 * mr, **kw)


@dataclass(frozen=True)
class PatchConfig:
    """How a keypoint neighbourhood is turned into a network input."""

    radius: float
    n_points: int = 64
    theta_min: float = 0.2

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidInput("patch radius must be positive")
        if self.n_points < 8:
            raise InvalidInput("n_points must be >= 8")
        if not (0 <= self.theta_min < math.pi / 2):
            raise InvalidInput("theta_min must lie in [0, pi/2)")


def compute_resolution(cloud: PointCloud) -> float:
    """Mean distance from each point to its nearest point at a different location."""
    pts = cloud.points
    if len(pts) < 2:
        raise InvalidInput("resolution needs at least 2 points")
    uniq = np.unique(pts, axis=0)
    if len(uniq) < 2:
        raise InvalidInput("resolution needs at least 2 distinct points")
    dist, _ = cKDTree(uniq).query(pts, k=2)
    # column 0 is the point's own location (distance 0)
    return float(dist[:, 1].mean())


def subsample_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    if not (0 < fraction <= 1):
        raise InvalidInput(f"fraction must lie in (0, 1], got {fraction}")
    count = math.ceil(round(fraction * n, 9))
    if count < 2:
        raise InvalidInput(f"subsampling {n} points by {fraction} leaves {count} < 2")
    if count >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def subsample(cloud: PointCloud, fraction: float, seed: int) -> PointCloud:
    """Keep ceil(fraction * n) points chosen uniformly without replacement.

    Retained points keep their original relative order.
    """
    idx = subsample_indices(len(cloud), fraction, seed)
    normals = None if cloud.normals is None else cloud.normals[idx]
    return PointCloud(cloud.points[idx], normals, cloud.id)


def estimate_normals(cloud: PointCloud, k: int = 10) -> PointCloud:
    """PCA normals from k nearest neighbours, oriented away from the centroid."""
    pts = cloud.points
    if k < 3:
        raise InvalidInput("k must be >= 3")
    if len(pts) <= k:
        raise InvalidInput(f"need more than k={k} points, got {len(pts)}")
    _, nbr = cKDTree(pts).query(pts, k=k)
    nb = pts[nbr]
    centered = nb - nb.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered)
    scale = np.abs(nb - pts[:, None, :]).max(axis=(1, 2))
    if np.any(scale == 0):
        bad = int(np.flatnonzero(scale == 0)[0])
        raise DegenerateGeometry(f"point {bad}: all {k} neighbours coincide")
    _, vecs = np.linalg.eigh(scatter)
    normals = vecs[:, :, 0]

    outward = pts - pts.mean(axis=0)
    dots = np.einsum("ni,ni->n", normals, outward)
    tie = np.abs(dots) <= 1e-9 * np.linalg.norm(outward, axis=1)
    # on a tie (e.g. a plane through the centroid) make the dominant component positive
    dom = normals[np.arange(len(normals)), np.abs(normals).argmax(axis=1)]
    flip = np.where(tie, dom < 0, dots < 0)
    normals = np.where(flip[:, None], -normals, normals)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return cloud.with_normals(normals)


def detect_iss_keypoints(cloud: PointCloud, params: IssParams) -> list[int]:
    """Intrinsic Shape Signature keypoints, sorted by descending smallest eigenvalue."""
    pts = cloud.points
    n = len(pts)
    if n < params.min_neighbors:
        return []
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, params.salient_radius)
    lam3 = np.full(n, -1.0)
    for i, nbr in enumerate(neighborhoods):
        if len(nbr) < params.min_neighbors:
            continue
        q = pts[nbr]
        q = q - q.mean(axis=0)
        ev = np.linalg.eigvalsh(q.T @ q / len(nbr))  # ascending
        l3, l2, l1 = ev
        if l1 <= 0 or l2 <= 0:
            continue
        # exact zero (up to rounding) third eigenvalue means a flat patch
        if l3 <= 1e-10 * l1:
            continue
        if l2 / l1 < params.gamma_21 and l3 / l2 < params.gamma_32:
            lam3[i] = l3

    cand = np.flatnonzero(lam3 > 0)
    if len(cand) == 0:
        return []
    ctree = cKDTree(pts[cand])
    keep = []
    for pos, i in enumerate(cand):
        rivals = cand[ctree.query_ball_point(pts[i], params.nms_radius)]
        # strict local maximum; equal responses resolved toward the lower index
        beaten = (lam3[rivals] > lam3[i]) | ((lam3[rivals] == lam3[i]) & (rivals < i))
        if not beaten.any():
            keep.append(int(i))
    keep.sort(key=lambda i: (-lam3[i], i))
    return keep


def _support(cloud: PointCloud, keypoint_index: int, radius: float):
    """Indices, offsets and distances of points with 0 < d <= radius."""
    if not (0 <= keypoint_index < len(cloud)):
        raise InvalidInput(f"keypoint index {keypoint_index} out of range")
    if radius <= 0:
        raise InvalidInput("support radius must be positive")
    p = cloud.points[keypoint_index]
    diff = cloud.points - p
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    idx = np.flatnonzero((d <= radius) & (d > 0))
    return idx, diff[idx], d[idx]


def _disambiguate(axis: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    proj = offsets @ axis
    pos = int(np.count_nonzero(proj > 0))
    neg = int(np.count_nonzero(proj < 0))
    if neg > pos or (neg == pos and proj[np.abs(proj).argmax()] < 0):
        return -axis
    return axis


def lrf_matrix(offsets: np.ndarray, dists: np.ndarray, radius: float) -> np.ndarray:
    """Distance-weighted scatter of support offsets about the keypoint."""
    w = radius - dists
    total = w.sum()
    if total <= 0:
        raise DegenerateGeometry("all support points lie on the sphere of radius R")
    return (offsets * w[:, None]).T @ offsets / total


def compute_lrf(cloud: PointCloud, keypoint_index: int, R: float) -> Lrf:
    idx, offsets, d = _support(cloud, keypoint_index, R)
    if len(idx) < 3:
        raise InsufficientSupport(
            f"keypoint {keypoint_index}: {len(idx)} support points within R={R}, need 3"
        )
    M = lrf_matrix(offsets, d, R)
    vals, vecs = np.linalg.eigh(M)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vals[0] <= 0 or vals[1] <= 1e-12 * vals[0]:
        raise DegenerateGeometry(f"keypoint {keypoint_index}: support is collinear (rank < 2)")
    x = _disambiguate(vecs[:, 0], offsets)
    y = _disambiguate(vecs[:, 1], offsets)
    z = np.cross(x, y)
    return Lrf(origin=cloud.points[keypoint_index].copy(), axes=np.stack([x, y, z]), support_radius=float(R))


def _angular_select(offsets: np.ndarray, theta_min: float, limit: int) -> list[int]:
    """Greedy nearest-first selection keeping pairwise angles >= theta_min."""
    units = offsets / np.linalg.norm(offsets, axis=1, keepdims=True)
    if theta_min == 0:
        return list(range(min(limit, len(offsets))))
    accepted: list[int] = []
    acc_units = np.empty((limit, 3))
    for c in range(len(units)):
        if accepted:
            cosines = np.clip(acc_units[: len(accepted)] @ units[c], -1.0, 1.0)
            if np.any(np.arccos(cosines) < theta_min):
                continue
        acc_units[len(accepted)] = units[c]
        accepted.append(c)
        if len(accepted) == limit:
            break
    return accepted


def extract_patch(
    cloud: PointCloud, keypoint_index: int, R: float, N: int = 64, theta_min: float = 0.2
) -> Patch:
    """Angular-constraint neighbourhood of a keypoint, expressed in its LRF and scaled by 1/R.

    Fewer than N accepted points are padded by cycling through the accepted ones.
    """
    if N < 8:
        raise InvalidInput("N must be >= 8")
    if not (0 <= theta_min < math.pi / 2):
        raise InvalidInput("theta_min must lie in [0, pi/2)")
    lrf = compute_lrf(cloud, keypoint_index, R)
    _, offsets, d = _support(cloud, keypoint_index, R)
    order = np.argsort(d, kind="stable")
    offsets = offsets[order]
    chosen = _angular_select(offsets, theta_min, N)
    local = (offsets[chosen] @ lrf.axes.T) / R
    valid = len(chosen)
    pts = local[np.arange(N) % valid]
    return Patch(keypoint_index=int(keypoint_index), points=pts, valid_count=valid, lrf=lrf)


def extract_patch_cfg(cloud: PointCloud, keypoint_index: int, cfg: PatchConfig) -> Patch:
    return extract_patch(cloud, keypoint_index, cfg.radius, cfg.n_points, cfg.theta_min)
