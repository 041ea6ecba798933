"""Training-set construction: positives from ground truth, soft negatives by histogram
distance, hard negatives by NNDR between parts, and multi-resolution augmentation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .baseline import DEFAULT_BINS, compute_histogram_descriptor, nndr_match, pairwise_distances
from .corpus import Corpus, CorrespondenceSet, GroundTruthIndex, Key, ModelEntry
from .errors import EmptyDataset, InvalidInput, PatchDescError
from .geometry import Patch, PatchConfig, PointCloud, compute_resolution, estimate_normals, extract_patch_cfg, subsample_indices

log = logging.getLogger(__name__)


@dataclass
class TrainingPair:
    patch_a: Patch
    patch_b: Patch
    label: str  # "positive" | "negative"
    gamma: int | None = None  # 1 hard, 0 soft; None for positives
    key_a: Key = ("", -1)
    key_b: Key = ("", -1)

    @property
    def positive(self) -> bool:
        return self.label == "positive"

    def sort_key(self):
        return (self.key_a, self.key_b)


@dataclass
class TrainingTriplet:
    anchor: Patch
    positive: Patch
    negative: Patch
    keys: tuple[Key, Key, Key] = (("", -1), ("", -1), ("", -1))


@dataclass
class MiningConfig:
    patch: PatchConfig
    soft_threshold: float = 0.7
    nndr_max_ratio: float = 0.8
    soft_budget: int | None = None  # None: half the positives (2:1:1 balance)
    hard_budget: int | None = None
    cross_model_pairs: int | None = None  # None: one sampled pair per model
    bins: tuple[int, int, int, int] = DEFAULT_BINS
    normal_k: int = 10
    seed: int = 0


@dataclass
class TrainingSet:
    positives: list[TrainingPair]
    soft: list[TrainingPair] = field(default_factory=list)
    hard: list[TrainingPair] = field(default_factory=list)

    def pairs(self) -> list[TrainingPair]:
        return self.positives + self.soft + self.hard

    def merged_negatives(self) -> list[TrainingPair]:
        """Hard and soft negatives as one set, for losses without a hard/soft distinction."""
        return self.soft + self.hard


class PatchBank:
    """Lazily extracted patches and histogram descriptors for every corpus keypoint."""

    def __init__(self, corpus: Corpus, patch: PatchConfig, bins=DEFAULT_BINS, normal_k: int = 10):
        if patch is None:
            raise InvalidInput("a patch configuration is required")
        self.corpus = corpus
        self.cfg = patch
        self.bins = tuple(bins)
        self.normal_k = normal_k
        self._models = corpus.by_id
        self._patches: dict[Key, Patch | None] = {}
        self._hist: dict[Key, np.ndarray | None] = {}
        self._normals: dict[str, PointCloud] = {}

    def patch(self, key: Key) -> Patch | None:
        if key not in self._patches:
            try:
                self._patches[key] = extract_patch_cfg(self._models[key[0]].cloud, key[1], self.cfg)
            except PatchDescError as exc:
                log.debug("patch %s skipped: %s", key, exc)
                self._patches[key] = None
        return self._patches[key]

    def _cloud_with_normals(self, model_id: str) -> PointCloud:
        if model_id not in self._normals:
            cloud = self._models[model_id].cloud
            if cloud.normals is None:
                cloud = estimate_normals(cloud, self.normal_k)
            self._normals[model_id] = cloud
        return self._normals[model_id]

    def histogram(self, key: Key) -> np.ndarray | None:
        if key not in self._hist:
            try:
                cloud = self._cloud_with_normals(key[0])
                self._hist[key] = compute_histogram_descriptor(cloud, key[1], self.cfg.radius, self.bins)
            except PatchDescError as exc:
                log.debug("histogram %s skipped: %s", key, exc)
                self._hist[key] = None
        return self._hist[key]

    def usable_keypoints(self) -> list[tuple[Key, str]]:
        """(key, part label) for keypoints with both a patch and a histogram, in corpus order."""
        out = []
        for m in self.corpus.models:
            for idx, label in zip(m.keypoints.tolist(), m.labels):
                key = (m.id, idx)
                if self.patch(key) is not None and self.histogram(key) is not None:
                    out.append((key, label))
        return out


def _canonical(ka: Key, kb: Key) -> tuple[Key, Key]:
    return (ka, kb) if ka <= kb else (kb, ka)


def _negative(bank: PatchBank, ka: Key, kb: Key, gamma: int) -> TrainingPair:
    return TrainingPair(bank.patch(ka), bank.patch(kb), "negative", gamma, ka, kb)


def _select(cands: list[tuple[Key, Key]], budget: int, rng: np.random.Generator) -> list[tuple[Key, Key]]:
    cands = sorted(set(cands))
    if len(cands) > budget:
        pick = rng.permutation(len(cands))[:budget]
        cands = sorted(cands[i] for i in pick)
    return cands


def build_positive_pairs(corpus: Corpus, patch: PatchConfig | PatchBank) -> list[TrainingPair]:
    """One positive pair per ground-truth correspondence whose two patches are extractable."""
    bank = patch if isinstance(patch, PatchBank) else PatchBank(corpus, patch)
    if not corpus.correspondences:
        raise EmptyDataset("corpus has no correspondences")
    out, skipped = [], 0
    for cs in corpus.correspondences:
        for ia, ib in cs.pairs.tolist():
            ka, kb = (cs.model_a, ia), (cs.model_b, ib)
            pa, pb = bank.patch(ka), bank.patch(kb)
            if pa is None or pb is None:
                skipped += 1
                continue
            out.append(TrainingPair(pa, pb, "positive", None, ka, kb))
    if skipped:
        log.info("skipped %d correspondences with unextractable patches", skipped)
    if not out:
        raise EmptyDataset("no correspondence produced a valid pair of patches")
    return out


def soft_negative_candidates(bank: PatchBank, distance_threshold: float) -> list[tuple[Key, Key]]:
    """All distinct-part keypoint pairs with histogram distance above the threshold."""
    gt = GroundTruthIndex(bank.corpus.correspondences)
    usable = bank.usable_keypoints()
    if len(usable) < 2:
        return []
    keys = [k for k, _ in usable]
    labels = np.array([l for _, l in usable])
    desc = np.stack([bank.histogram(k) for k in keys])
    out = []
    step = 256
    for s in range(0, len(keys), step):
        dist = pairwise_distances(desc[s : s + step], desc)
        for r in range(dist.shape[0]):
            i = s + r
            js = np.flatnonzero((dist[r] > distance_threshold) & (labels != labels[i]))
            for j in js[js > i].tolist():
                if not gt.equivalent(keys[i], keys[j]):
                    out.append(_canonical(keys[i], keys[j]))
    return out


def mine_soft_negatives(
    corpus: Corpus, distance_threshold: float, budget: int, seed: int, patch: PatchConfig | PatchBank | None = None
) -> list[TrainingPair]:
    """Up to ``budget`` easy negatives (gamma = 0): distinct parts, descriptor-distant."""
    if budget < 1:
        raise InvalidInput("budget must be >= 1")
    bank = patch if isinstance(patch, PatchBank) else PatchBank(corpus, patch)
    cands = soft_negative_candidates(bank, distance_threshold)
    if not cands:
        raise EmptyDataset(f"no distinct-part pair has histogram distance > {distance_threshold}")
    rng = np.random.default_rng([seed, 11])
    return [_negative(bank, a, b, 0) for a, b in _select(cands, budget, rng)]


def _parts(bank: PatchBank) -> dict[str, dict[str, list[Key]]]:
    parts: dict[str, dict[str, list[Key]]] = {}
    for key, label in bank.usable_keypoints():
        parts.setdefault(key[0], {}).setdefault(label, []).append(key)
    return parts


def sample_model_pairs(model_ids: list[str], count: int, seed: int) -> list[tuple[str, str]]:
    if len(model_ids) < 2 or count < 1:
        return []
    rng = np.random.default_rng([seed, 13])
    out = []
    for _ in range(count):
        a, b = rng.choice(len(model_ids), size=2, replace=False)
        out.append((model_ids[a], model_ids[b]))
    return out


def _nndr_between(bank: PatchBank, P: list[Key], Q: list[Key], ratio: float) -> list[tuple[Key, Key]]:
    if len(Q) < 2 or not P:
        return []
    qa = np.stack([bank.histogram(k) for k in P])
    qb = np.stack([bank.histogram(k) for k in Q])
    return [(P[m.query_index], Q[m.target_index]) for m in nndr_match(qa, qb, ratio)]


def hard_negative_candidates(
    bank: PatchBank, nndr_max_ratio: float, model_pairs: list[tuple[str, str]]
) -> list[tuple[Key, Key]]:
    """NNDR matches between distinct parts of a model and between parts of sampled
    model pairs, minus anything known to correspond."""
    gt = GroundTruthIndex(bank.corpus.correspondences)
    parts = _parts(bank)
    raw = []
    for mid in sorted(parts):
        labels = sorted(parts[mid])
        for la in labels:
            for lb in labels:
                if la != lb:
                    raw += _nndr_between(bank, parts[mid][la], parts[mid][lb], nndr_max_ratio)
    for ma, mb in model_pairs:
        if ma not in parts or mb not in parts:
            continue
        for la in sorted(parts[ma]):
            for lb in sorted(parts[mb]):
                if la != lb:
                    raw += _nndr_between(bank, parts[ma][la], parts[mb][lb], nndr_max_ratio)
    return [_canonical(a, b) for a, b in raw if not gt.equivalent(a, b)]


def mine_hard_negatives(
    corpus: Corpus,
    nndr_max_ratio: float,
    budget: int,
    seed: int,
    patch: PatchConfig | PatchBank | None = None,
    cross_model_pairs: int | None = None,
) -> list[TrainingPair]:
    """Up to ``budget`` confusable negatives (gamma = 1) found by NNDR matching."""
    if budget < 1:
        raise InvalidInput("budget must be >= 1")
    bank = patch if isinstance(patch, PatchBank) else PatchBank(corpus, patch)
    ids = [m.id for m in corpus.models]
    n_cross = len(ids) if cross_model_pairs is None else cross_model_pairs
    cands = hard_negative_candidates(bank, nndr_max_ratio, sample_model_pairs(ids, n_cross, seed))
    if not cands:
        raise EmptyDataset(f"no non-corresponding NNDR match at ratio {nndr_max_ratio}")
    rng = np.random.default_rng([seed, 17])
    return [_negative(bank, a, b, 1) for a, b in _select(cands, budget, rng)]


def mine_training_set(corpus: Corpus, cfg: MiningConfig) -> TrainingSet:
    bank = PatchBank(corpus, cfg.patch, cfg.bins, cfg.normal_k)
    positives = build_positive_pairs(corpus, bank)
    half = max(1, len(positives) // 2)
    soft_budget = half if cfg.soft_budget is None else cfg.soft_budget
    hard_budget = half if cfg.hard_budget is None else cfg.hard_budget
    soft = mine_soft_negatives(corpus, cfg.soft_threshold, soft_budget, cfg.seed, bank) if soft_budget else []
    hard = (
        mine_hard_negatives(corpus, cfg.nndr_max_ratio, hard_budget, cfg.seed, bank, cfg.cross_model_pairs)
        if hard_budget
        else []
    )
    log.info("mined %d positives, %d soft, %d hard", len(positives), len(soft), len(hard))
    return TrainingSet(positives, soft, hard)


def make_triplets(
    positives: list[TrainingPair],
    negatives: list[TrainingPair],
    seed: int,
    ground_truth: GroundTruthIndex | None = None,
) -> list[TrainingTriplet]:
    """Anchor/positive from each positive pair; the negative shares the anchor when a mined
    negative touching it exists, otherwise it is drawn from the mined negatives' endpoints.

    Drawn negatives never correspond to the anchor. Correspondence is judged by
    ``ground_truth`` when given, else by the positive pairs themselves.
    """
    if not positives or not negatives:
        raise EmptyDataset("triplets need positives and negatives")
    rng = np.random.default_rng([seed, 19])
    if ground_truth is None:
        linked = {(p.key_a, p.key_b) for p in positives} | {(p.key_b, p.key_a) for p in positives}
        related = lambda a, b: a == b or (a, b) in linked
    else:
        related = ground_truth.equivalent
    touching: dict[Key, list[tuple[Patch, Key]]] = {}
    pool: dict[Key, Patch] = {}
    for n in negatives:
        touching.setdefault(n.key_a, []).append((n.patch_b, n.key_b))
        touching.setdefault(n.key_b, []).append((n.patch_a, n.key_a))
        pool.setdefault(n.key_a, n.patch_a)
        pool.setdefault(n.key_b, n.patch_b)
    pool_keys = sorted(pool)
    out = []
    for p in positives:
        opts = touching.get(p.key_a)
        if opts:
            patch, key = opts[int(rng.integers(len(opts)))]
        else:
            allowed = [k for k in pool_keys if not related(p.key_a, k) and not related(p.key_b, k)]
            if not allowed:
                continue
            key = allowed[int(rng.integers(len(allowed)))]
            patch = pool[key]
        out.append(TrainingTriplet(p.patch_a, p.patch_b, patch, (p.key_a, p.key_b, key)))
    if not out:
        raise EmptyDataset("no positive pair has a non-corresponding negative")
    return out


def _remap_model(m: ModelEntry, fraction: float, seed) -> tuple[ModelEntry, dict[int, int]]:
    mr = compute_resolution(m.cloud)
    keep = subsample_indices(len(m.cloud), fraction, seed)
    pts = m.cloud.points[keep]
    normals = None if m.cloud.normals is None else m.cloud.normals[keep]
    new_id = f"{m.id}@{fraction:g}"
    dist, nn = cKDTree(pts).query(m.cloud.points[m.keypoints])
    mapping: dict[int, int] = {}
    kps, labels = [], []
    for old, d, new, label in zip(m.keypoints.tolist(), dist.tolist(), nn.tolist(), m.labels):
        if d > 2.0 * mr or new in kps:
            continue
        mapping[old] = new
        kps.append(new)
        labels.append(label)
    entry = ModelEntry(PointCloud(pts, normals, new_id), np.array(kps, dtype=np.int64), labels, m.pose)
    return entry, mapping


def resample_corpus(corpus: Corpus, fraction: float, seed, tag: int = 0) -> Corpus:
    """Every model subsampled to ``fraction``, keypoints and ground truth remapped to the
    nearest retained point (a keypoint is dropped if that moves it more than 2 mr)."""
    if not (0 < fraction < 1):
        raise InvalidInput(f"resampling fraction must lie in (0, 1), got {fraction}")
    models = []
    maps: dict[str, tuple[str, dict[int, int]]] = {}
    for mi, m in enumerate(corpus.models):
        entry, mapping = _remap_model(m, fraction, [seed, tag, mi])
        models.append(entry)
        maps[m.id] = (entry.id, mapping)
    corrs = []
    for cs in corpus.correspondences:
        na, ma = maps[cs.model_a]
        nb, mb = maps[cs.model_b]
        pairs = [(ma[a], mb[b]) for a, b in cs.pairs.tolist() if a in ma and b in mb]
        groups = {}
        for mid, (nid, mp) in ((cs.model_a, maps[cs.model_a]), (cs.model_b, maps[cs.model_b])):
            g = cs.sym_groups.get(mid, {})
            groups[nid] = {mp[i]: grp for i, grp in g.items() if i in mp}
        corrs.append(CorrespondenceSet(na, nb, np.array(pairs, dtype=np.int64).reshape(-1, 2), groups))
    return Corpus(models, corrs)


def augment_multiresolution(corpus: Corpus, fractions, seed: int) -> Corpus:
    """Append a subsampled copy of every model per fraction (see ``resample_corpus``)."""
    models = list(corpus.models)
    corrs = list(corpus.correspondences)
    for fi, f in enumerate(fractions):
        low = resample_corpus(corpus, f, seed, fi)
        models += low.models
        corrs += low.correspondences
    return Corpus(models, corrs)


def _split_score(seed: int, model_id: str) -> float:
    h = hashlib.sha256(f"{seed}:{model_id}".encode()).digest()
    return int.from_bytes(h[:8], "little") / 2.0**64


def split_models(corpus: Corpus, train_fraction: float = 0.8, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Global train/test split by a seeded hash of the model id; correspondences crossing
    the split are dropped."""
    train_ids = {m.id for m in corpus.models if _split_score(seed, m.id) < train_fraction}

    def part(inside: bool) -> Corpus:
        models = [m for m in corpus.models if (m.id in train_ids) == inside]
        ids = {m.id for m in models}
        cs = [c for c in corpus.correspondences if c.model_a in ids and c.model_b in ids]
        return Corpus(models, cs)

    return part(True), part(False)


def label_soundness_violations(pairs: list[TrainingPair], corpus: Corpus) -> list[TrainingPair]:
    """Negative pairs that coincide with a ground-truth correspondence (should be empty)."""
    gt = GroundTruthIndex(corpus.correspondences)
    return [p for p in pairs if not p.positive and gt.is_correspondence(p.key_a, p.key_b)]
