"""Shared fixtures-by-function and brute-force oracles."""

import math
from fractions import Fraction

import numpy as np

from patchdesc.corpus import CorrespondenceSet
from patchdesc.evaluation import DescriptorSet
from patchdesc.geometry import PointCloud
from patchdesc.model import LossConfig, forward_batch, pair_loss, triplet_loss


def grid_cube(n):
    t = np.arange(n, dtype=float)
    return np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)


def sphere_points(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_blob(n, seed=0):
    """Anisotropic Gaussian blob; point 0 sits at the origin and serves as keypoint."""
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3)) * np.array([0.8, 0.5, 0.25])
    pts[0] = 0.0
    return pts


def naive_lrf_matrix(offsets, dists, R):
    M = np.zeros((3, 3))
    total = 0.0
    for o, d in zip(offsets, dists):
        if 0 < d <= R:
            w = R - d
            total += w
            for a in range(3):
                for b in range(3):
                    M[a, b] += w * o[a] * o[b]
    return M / total


def naive_order(q, targets):
    d = [math.dist(q, t) for t in targets]
    return sorted(range(len(targets)), key=lambda j: (d[j], j))


def correct(cs, symmetric, truth, cand):
    if cand == truth:
        return True
    if not symmetric:
        return False
    groups = cs.sym_groups.get(cs.model_b, {})
    return truth in groups and groups.get(cand) == groups[truth]


def oracle(descs, gt, clouds, k, tau, symmetric):
    """Loop-and-count versions of all four metrics, as exact fractions."""
    cmc_pairs, acc_pairs = [], []
    for cs in gt:
        da, db = descs[cs.model_a], descs[cs.model_b]
        qrow = {int(i): n for n, i in enumerate(da.indices)}
        tgt = [int(i) for i in db.indices]
        pts = clouds[cs.model_b].points
        diag = math.dist(pts.min(axis=0), pts.max(axis=0))
        hits = [0] * k
        good = 0
        for ia, ib in cs.pairs.tolist():
            if ia not in qrow:
                continue
            ranked = [tgt[j] for j in naive_order(da.values[qrow[ia]], db.values)]
            first = next((n + 1 for n, c in enumerate(ranked) if correct(cs, symmetric, ib, c)), None)
            for r in range(1, k + 1):
                hits[r - 1] += first is not None and first <= r
            top = ranked[0]
            d = 0.0 if correct(cs, symmetric, ib, top) else math.dist(pts[top], pts[ib]) / diag
            good += d <= tau
        cmc_pairs.append([Fraction(h, len(cs)) for h in hits])
        acc_pairs.append(Fraction(good, len(cs)))
    cmc = [sum(c[r] for c in cmc_pairs) / len(cmc_pairs) for r in range(k)]
    return cmc, sum(acc_pairs) / len(acc_pairs)


def oracle_mutual_nn(da, db):
    out = []
    for q in range(len(da)):
        t = naive_order(da.values[q], db.values)[0]
        if naive_order(db.values[t], da.values)[0] == q:
            out.append((int(da.indices[q]), int(db.indices[t])))
    return out


def oracle_pr(matches, gt, symmetric):
    by = {(c.model_a, c.model_b): c for c in gt}
    ok = 0
    for m in matches:
        cs = by.get((m.model_a, m.model_b))
        if cs is None:
            continue
        if any(a == m.idx_a and correct(cs, symmetric, b, m.idx_b) for a, b in cs.pairs.tolist()):
            ok += 1
    total = sum(len(c) for c in gt)
    if not matches:
        return 0.0, 0.0
    return Fraction(ok, len(matches)), Fraction(ok, total)


def random_instance(seed, n_pairs=3, n_kp=12, dim=4, sym=True):
    """Random descriptors and GT over ``n_pairs`` shape pairs, <= 30 keypoints per model.

    Descriptors are rounded to a coarse grid so distance ties actually happen.
    """
    rng = np.random.default_rng(seed)
    descs, clouds, gt = {}, {}, []
    for p in range(n_pairs):
        a, b = f"a{p}", f"b{p}"
        for mid in (a, b):
            pts = rng.normal(size=(40, 3))
            clouds[mid] = PointCloud(pts, None, mid)
            idx = np.sort(rng.choice(40, size=n_kp, replace=False))
            descs[mid] = DescriptorSet(mid, idx, np.round(rng.normal(size=(n_kp, dim)) * 2) / 2)
        qa = rng.choice(descs[a].indices, size=n_kp - 2, replace=False)
        tb = rng.choice(descs[b].indices, size=n_kp - 2)
        groups = {}
        if sym:
            groups[b] = {int(i): f"g{rng.integers(4)}" for i in descs[b].indices[: n_kp // 2]}
        gt.append(CorrespondenceSet(a, b, np.column_stack([qa, tb]), groups))
    return descs, gt, clouds


def central_diff(f, x, eps=1e-4):
    g = np.zeros_like(x)
    probe = x.copy()
    for i in range(x.size):
        v = x.flat[i]
        probe.flat[i] = v + eps
        up = f(probe)
        probe.flat[i] = v - eps
        g.flat[i] = (up - f(probe)) / (2 * eps)
        probe.flat[i] = v
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def composed(params, kind, X, y=None, gamma=None, cfg=None):
    """Loss of the encoder output for one pair (X: 2 patches) or triplet (X: 3 patches)."""
    cfg = cfg or LossConfig(kind=kind)
    desc, cache = forward_batch(params, X)
    if kind == "triplet":
        loss, *g = triplet_loss(desc[0], desc[1], desc[2], cfg)
        margin_arg = 1.0 - np.sum((desc[0] - desc[2]) ** 2) / (np.sum((desc[0] - desc[1]) ** 2) + cfg.m)
        kinks = [margin_arg]
    else:
        loss, *g = pair_loss(cfg, desc[0], desc[1], y, gamma)
        d2 = np.sum((desc[0] - desc[1]) ** 2)
        kinks = [cfg.m - d2, cfg.m**2 - d2, cfg.m1**2 - d2, cfg.m2**2 - d2]
    return loss, np.stack(g), cache, kinks


def composed_loss(params, kind, X, y=None, gamma=None, cfg=None):
    """Just the loss value of ``composed``; the finite-difference objective."""
    cfg = cfg or LossConfig(kind=kind)
    desc = forward_batch(params, X)[0]
    if kind == "triplet":
        return triplet_loss(desc[0], desc[1], desc[2], cfg)[0]
    return pair_loss(cfg, desc[0], desc[1], y, gamma)[0]


def point_kinks(params, X):
    """Smallest distance of any ReLU input or max-pool gap from a kink."""
    _, cache = forward_batch(params, X)
    gaps = [np.abs(z).min() for z in cache.point_pre[:-1] + cache.head_pre[:-1]]
    feats = np.sort(cache.point_pre[-1].reshape(X.shape[0], X.shape[1], -1), axis=1)
    gaps.append(np.min(feats[:, -1] - feats[:, -2]))
    return min(gaps)
