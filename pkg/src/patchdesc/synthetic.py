"""Seeded synthetic corpora with exact correspondences.

Each archetype is a parametric surface (box, cylinder, ellipsoid, or a union of
randomly placed primitives). Its instances share a fixed set of anchor samples
(the keypoints) and differ by a random rigid motion, Gaussian jitter, and freshly
drawn surface samples everywhere else, so keypoint correspondences are exact by
construction while local sampling varies between instances.

Archetypes are scaled to a unit bounding-box diagonal; ``noise`` is the jitter
standard deviation in those units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .corpus import Corpus, CorrespondenceSet, ModelEntry
from .errors import InvalidInput
from .geometry import IssParams, PointCloud, compute_resolution, detect_iss_keypoints

KINDS = ("box", "cylinder", "ellipsoid", "composite")
MIRRORS = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], dtype=np.float64)


@dataclass(frozen=True)
class SynthConfig:
    kinds: tuple[str, ...] = ("composite",)  # one archetype per entry
    instances: int = 2  # models per archetype
    points: int = 2000
    keypoints: int = 40
    noise: float = 0.0
    seed: int = 0
    resample: bool = True  # draw fresh non-keypoint samples per instance

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        for k in self.kinds:
            if k not in KINDS:
                raise InvalidInput(f"unknown shape kind {k!r}; choose from {KINDS}")
        if len(self.kinds) * self.instances < 2:
            raise InvalidInput("a corpus needs at least 2 models")
        if self.keypoints < 1 or self.points < self.keypoints + 10:
            raise InvalidInput("need keypoints >= 1 and points well above the keypoint count")
        if self.noise < 0:
            raise InvalidInput("noise must be non-negative")


# ----------------------------------------------------------------- primitives


@dataclass
class Primitive:
    kind: str  # box | cylinder | ellipsoid
    size: np.ndarray  # half extents | (radius, radius, half height) | semi-axes
    rotation: np.ndarray
    center: np.ndarray
    name: str

    def area(self) -> float:
        a, b, c = self.size
        if self.kind == "box":
            return 8.0 * (a * b + b * c + a * c)
        if self.kind == "cylinder":
            return 2 * math.pi * a * (2 * c) + 2 * math.pi * a * a
        p = 1.6075
        return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)

    def sample_local(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
        a, b, c = self.size
        if self.kind == "box":
            faces = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
            f = rng.choice(6, size=n, p=faces / faces.sum())
            u = rng.uniform(-1, 1, size=(n, 3)) * self.size
            axis, sign = f // 2, np.where(f % 2 == 0, 1.0, -1.0)
            u[np.arange(n), axis] = sign * self.size[axis]
            labels = [f"{self.name}:{'+-'[i % 2]}{'xyz'[i // 2]}" for i in f]
            return u, labels
        if self.kind == "cylinder":
            r, h = a, c
            side, cap = 2 * math.pi * r * 2 * h, math.pi * r * r
            part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
            phi = rng.uniform(0, 2 * math.pi, n)
            rho = np.where(part == 0, r, r * np.sqrt(rng.uniform(0, 1, n)))
            z = np.select([part == 0, part == 1], [rng.uniform(-h, h, n), np.full(n, h)], np.full(n, -h))
            pts = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
            labels = [f"{self.name}:{('side', 'top', 'bottom')[p]}" for p in part]
            return pts, labels
        out = []
        gmax = max(b * c, a * c, a * b)
        while sum(len(o) for o in out) < n:
            u = rng.normal(size=(2 * n, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            g = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
            out.append(u[rng.uniform(0, gmax, len(u)) < g] * self.size)
        pts = np.concatenate(out)[:n]
        labels = [f"{self.name}:{'upper' if z >= 0 else 'lower'}" for z in pts[:, 2]]
        return pts, labels

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return local @ self.rotation.T + self.center

    def inside(self, world: np.ndarray, margin: float = 1e-9) -> np.ndarray:
        """Strictly interior points (surface points of this primitive are not inside)."""
        q = (world - self.center) @ self.rotation
        a, b, c = self.size
        if self.kind == "box":
            return np.all(np.abs(q) < self.size - margin, axis=1)
        if self.kind == "cylinder":
            return (np.hypot(q[:, 0], q[:, 1]) < a - margin) & (np.abs(q[:, 2]) < c - margin)
        return np.sum((q / self.size) ** 2, axis=1) < 1 - margin

    def label_of(self, local: np.ndarray) -> str:
        a, b, c = self.size
        if self.kind == "box":
            i = int(np.argmax(np.abs(local) / self.size))
            return f"{self.name}:{'+' if local[i] >= 0 else '-'}{'xyz'[i]}"
        if self.kind == "cylinder":
            if abs(abs(local[2]) - c) < 1e-12 and np.hypot(local[0], local[1]) < a - 1e-12:
                return f"{self.name}:{'top' if local[2] > 0 else 'bottom'}"
            return f"{self.name}:side"
        return f"{self.name}:{'upper' if local[2] >= 0 else 'lower'}"


@dataclass
class Archetype:
    name: str
    kind: str
    primitives: list[Primitive]
    anchors: np.ndarray  # (K, 3) canonical keypoint positions
    anchor_labels: list[str]
    anchor_groups: list[str | None]

    def sample_surface(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
        areas = np.array([p.area() for p in self.primitives])
        pts, labels = [], []
        while sum(len(p) for p in pts) < n:
            counts = rng.multinomial(int(1.3 * n) + 16, areas / areas.sum())
            for i, (prim, cnt) in enumerate(zip(self.primitives, counts)):
                if cnt == 0:
                    continue
                local, lab = prim.sample_local(int(cnt), rng)
                world = prim.to_world(local)
                keep = np.ones(len(world), dtype=bool)
                for j, other in enumerate(self.primitives):
                    if j != i:
                        keep &= ~other.inside(world)
                pts.append(world[keep])
                labels += [l for l, k in zip(lab, keep) if k]
        allpts = np.concatenate(pts)
        pick = np.sort(rng.choice(len(allpts), size=n, replace=False))
        return allpts[pick], [labels[i] for i in pick]


def _box_orbits(size, k, rng):
    a, b, c = size
    bases = [np.array([a, b, c])]
    while len(bases) * 8 < k:
        u, v = rng.uniform(0.25, 0.85, 2)
        kind = rng.integers(6)
        axis = kind % 3
        if kind < 3:  # point on an edge parallel to `axis`
            p = size.copy()
            p[axis] *= u
        else:  # point on the face normal to `axis`
            p = size.copy()
            others = [i for i in range(3) if i != axis]
            p[others[0]] *= u
            p[others[1]] *= v
        bases.append(p)
    return bases


def _cylinder_orbits(size, k, rng):
    r, _, h = size
    phi = rng.uniform(0.2, math.pi / 2 - 0.2)
    bases = [np.array([r * math.cos(phi), r * math.sin(phi), h])]
    n_more = math.ceil(k / 8) - 1
    side_z = np.linspace(0.2, 0.8, max(1, (n_more + 1) // 2)) * h
    cap_rho = np.linspace(0.3, 0.8, max(1, n_more // 2)) * r
    for i in range(n_more):
        phi = rng.uniform(0.2, math.pi / 2 - 0.2)
        if i % 2 == 0:
            z = side_z[i // 2]
            bases.append(np.array([r * math.cos(phi), r * math.sin(phi), z]))
        else:
            rho = cap_rho[i // 2]
            bases.append(np.array([rho * math.cos(phi), rho * math.sin(phi), h]))
    return bases


def _ellipsoid_orbits(size, k, rng):
    bases = []
    while len(bases) * 8 < k:
        u = np.abs(rng.normal(size=3)) + 0.3
        u /= np.linalg.norm(u)
        bases.append(u * size)
    return bases


def _symmetric_archetype(kind: str, name: str, k: int, rng) -> Archetype:
    if kind == "box":
        size = np.sort(rng.uniform(0.3, 0.7, 3))[::-1].copy()
        bases = _box_orbits(size, k, rng)
    elif kind == "cylinder":
        r, h = rng.uniform(0.3, 0.5), rng.uniform(0.4, 0.8)
        size = np.array([r, r, h])
        bases = _cylinder_orbits(size, k, rng)
    else:
        size = np.sort(rng.uniform(0.3, 0.8, 3))[::-1].copy()
        bases = _ellipsoid_orbits(size, k, rng)
    prim = Primitive(kind, size, np.eye(3), np.zeros(3), kind)
    anchors, labels, groups = [], [], []
    for o, base in enumerate(bases):
        images = np.unique(base * MIRRORS, axis=0)
        for img in images:
            anchors.append(img)
            labels.append(prim.label_of(img))
            groups.append(f"{name}:orbit{o}")
    arch = Archetype(name, kind, [prim], np.array(anchors), labels, groups)
    _normalize(arch)
    return arch


def _random_primitive(rng, name: str) -> Primitive:
    kind = ("box", "cylinder", "ellipsoid")[rng.integers(3)]
    if kind == "cylinder":
        r = rng.uniform(0.15, 0.35)
        size = np.array([r, r, rng.uniform(0.2, 0.6)])
    else:
        size = rng.uniform(0.12, 0.5, 3)
    rot = Rotation.random(random_state=rng).as_matrix()
    return Primitive(kind, size, rot, rng.uniform(-0.45, 0.45, 3), name)


def _composite_archetype(name: str, k: int, points: int, rng) -> Archetype:
    prims = [_random_primitive(rng, f"p{i}") for i in range(int(rng.integers(2, 5)))]
    arch = Archetype(name, "composite", prims, np.zeros((0, 3)), [], [])
    _normalize(arch)
    # keypoints: ISS on a dense noiseless sample, topped up by farthest-point sampling
    dense, labels = arch.sample_surface(2 * points, rng)
    cloud = PointCloud(dense)
    mr = compute_resolution(cloud)
    chosen = detect_iss_keypoints(cloud, IssParams.from_resolution(mr, min_neighbors=5))
    chosen = _thin(dense, chosen, 2.5 * mr)[:k]
    chosen = _farthest_fill(dense, chosen, k)
    arch.anchors = dense[chosen]
    arch.anchor_labels = [labels[i] for i in chosen]
    arch.anchor_groups = [None] * len(chosen)
    return arch


def _thin(pts, order, min_dist):
    kept = []
    for i in order:
        if all(np.linalg.norm(pts[i] - pts[j]) >= min_dist for j in kept):
            kept.append(i)
    return kept


def _farthest_fill(pts, chosen, k):
    chosen = list(chosen)
    if not chosen:
        chosen = [0]
    d = np.min(np.linalg.norm(pts[:, None, :] - pts[chosen][None], axis=2), axis=1)
    while len(chosen) < k:
        i = int(np.argmax(d))
        chosen.append(i)
        d = np.minimum(d, np.linalg.norm(pts - pts[i], axis=1))
    return chosen


def _normalize(arch: Archetype):
    """Scale every primitive (and the anchors) so the union spans a unit bbox diagonal."""
    rng = np.random.default_rng(0)
    probe, _ = arch.sample_surface(4000, rng)
    lo, hi = probe.min(axis=0), probe.max(axis=0)
    mid, s = (lo + hi) / 2, 1.0 / np.linalg.norm(hi - lo)
    for p in arch.primitives:
        p.center = (p.center - mid) * s
        p.size = p.size * s
    arch.anchors = (arch.anchors - mid) * s if len(arch.anchors) else arch.anchors


def make_archetype(kind: str, name: str, cfg: SynthConfig, rng) -> Archetype:
    if kind == "composite":
        return _composite_archetype(name, cfg.keypoints, cfg.points, rng)
    return _symmetric_archetype(kind, name, cfg.keypoints, rng)


def _instance(arch: Archetype, model_id: str, cfg: SynthConfig, rng, shared) -> ModelEntry:
    K = len(arch.anchors)
    if cfg.resample:
        surf, _ = arch.sample_surface(cfg.points - K, rng)
    else:
        surf = shared
    canon = np.concatenate([arch.anchors, surf])
    rot = Rotation.random(random_state=rng).as_matrix()
    trans = rng.normal(size=3)
    pts = canon @ rot.T + trans
    if cfg.noise > 0:
        pts = pts + rng.normal(scale=cfg.noise, size=pts.shape)
    perm = rng.permutation(len(pts))
    pts = pts[perm]
    where = np.empty_like(perm)
    where[perm] = np.arange(len(perm))
    kps = where[:K]  # new position of each anchor
    return ModelEntry(PointCloud(pts, None, model_id), kps, list(arch.anchor_labels), (rot, trans))


def generate_synthetic_corpus(cfg: SynthConfig) -> tuple[Corpus, list[Archetype]]:
    """Build ``len(kinds) * instances`` models and all intra-archetype correspondences."""
    rng = np.random.default_rng(cfg.seed)
    models, corrs, archetypes = [], [], []
    for ai, kind in enumerate(cfg.kinds):
        arch = make_archetype(kind, f"{kind}{ai}", cfg, rng)
        archetypes.append(arch)
        shared = None if cfg.resample else arch.sample_surface(cfg.points - len(arch.anchors), rng)[0]
        group = [_instance(arch, f"{arch.name}_{i}", cfg, rng, shared) for i in range(cfg.instances)]
        models += group
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                a, b = group[i], group[j]
                pairs = np.column_stack([a.keypoints, b.keypoints])
                sym = {}
                if any(g is not None for g in arch.anchor_groups):
                    for m in (a, b):
                        sym[m.id] = {int(k): g for k, g in zip(m.keypoints, arch.anchor_groups) if g is not None}
                corrs.append(CorrespondenceSet(a.id, b.id, pairs, sym))
    return Corpus(models, corrs), archetypes
