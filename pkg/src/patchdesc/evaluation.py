"""Correspondence metrics: precision, recall, CMC and correspondence accuracy, each in a
symmetric mode (any member of the true target's symmetry group counts) and a
non-symmetric mode."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .baseline import nndr_match, pairwise_distances
from .corpus import CorrespondenceSet
from .errors import EmptyDescriptorSet, InvalidConfig, InvalidInput, PatchDescError
from .geometry import PatchConfig, PointCloud, extract_patch_cfg
from .model import EncoderParams, encoder_forward

log = logging.getLogger(__name__)

MATCH_RULES = ("nearest_neighbor", "nndr")
SYMMETRY_MODES = ("symmetric", "non_symmetric")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 100
    tau: float = 0.25
    match_rule: str = "nearest_neighbor"  # mutual nearest neighbour
    nndr_ratio: float = 0.8
    symmetry_mode: str = "non_symmetric"

    def __post_init__(self):
        if self.k < 1 or not self.tau > 0:
            raise InvalidConfig("k must be >= 1 and tau > 0")
        if self.match_rule not in MATCH_RULES:
            raise InvalidConfig(f"match_rule must be one of {MATCH_RULES}")
        if self.symmetry_mode not in SYMMETRY_MODES:
            raise InvalidConfig(f"symmetry_mode must be one of {SYMMETRY_MODES}")

    @property
    def symmetric(self) -> bool:
        return self.symmetry_mode == "symmetric"


@dataclass
class EvalReport:
    precision: float
    recall: float
    cmc: np.ndarray
    corr_accuracy: float
    no_matches: bool = False
    config: EvalConfig = field(default_factory=EvalConfig)

    def cmc_at(self, r: int) -> float:
        return float(self.cmc[min(r, len(self.cmc)) - 1])


@dataclass
class DescriptorSet:
    """Descriptors of one model's keypoints; ``indices`` are point indices in the cloud."""

    model_id: str
    indices: np.ndarray
    values: np.ndarray  # (n, D)
    failures: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self):
        return len(self.indices)


@dataclass
class PairRanking:
    """Full target ranking for every query keypoint of one ordered shape pair."""

    model_a: str
    model_b: str
    query_ids: np.ndarray
    target_ids: np.ndarray
    order: np.ndarray  # (Q, T) positions into target_ids, best first


@dataclass(frozen=True)
class Match:
    model_a: str
    model_b: str
    idx_a: int
    idx_b: int


def describe_keypoints(
    params: EncoderParams, cloud: PointCloud, keypoints, patch: PatchConfig
) -> DescriptorSet:
    """Encode the patch of each keypoint; keypoints whose patch cannot be built are reported."""
    keypoints = [int(k) for k in np.asarray(keypoints, dtype=np.int64).reshape(-1)]
    D = params.arch.descriptor_dim
    ok, rows, failures = [], [], []
    for k in keypoints:
        try:
            p = extract_patch_cfg(cloud, k, patch)
        except PatchDescError as exc:
            failures.append((k, f"{type(exc).__name__}: {exc}"))
            continue
        desc, _ = encoder_forward(params, p)
        ok.append(k)
        rows.append(desc)
    if keypoints and not ok:
        raise EmptyDescriptorSet(f"cloud {cloud.id!r}: no keypoint produced a patch")
    for k, why in failures:
        log.info("cloud %s keypoint %d skipped: %s", cloud.id, k, why)
    values = np.stack(rows) if rows else np.zeros((0, D))
    return DescriptorSet(cloud.id, np.array(ok, dtype=np.int64), values, failures)


def rank_matches(queries, targets) -> np.ndarray:
    """(Q, T) target positions by ascending Euclidean distance; ties go to the lower index."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if len(targets) == 0:
        raise InvalidInput("cannot rank against an empty target set")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.size == 0:
        return np.zeros((0, len(targets)), dtype=np.int64)
    return np.argsort(pairwise_distances(queries, targets), axis=1, kind="stable")


def rank_pair(da: DescriptorSet, db: DescriptorSet) -> PairRanking:
    return PairRanking(da.model_id, db.model_id, da.indices, db.indices, rank_matches(da.values, db.values))


def _rankings_by_pair(rankings) -> dict[tuple[str, str], PairRanking]:
    return {(r.model_a, r.model_b): r for r in rankings}


def _target_matches(cs: CorrespondenceSet, symmetric: bool, truth: int, candidates: np.ndarray) -> np.ndarray:
    """Boolean mask over candidate target ids that count as the true target."""
    hit = candidates == truth
    if symmetric:
        g = cs.group(cs.model_b, truth)
        if g is not None:
            groups = cs.sym_groups.get(cs.model_b, {})
            hit |= np.array([groups.get(int(c)) == g for c in candidates], dtype=bool)
    return hit


def _check_gt(ground_truth):
    if not ground_truth or all(len(cs) == 0 for cs in ground_truth):
        raise InvalidInput("ground truth is empty")


def _query_rows(r: PairRanking) -> dict[int, int]:
    return {int(q): i for i, q in enumerate(r.query_ids)}


def true_ranks(rankings, ground_truth: list[CorrespondenceSet], symmetric: bool) -> list[np.ndarray]:
    """Per shape pair: 1-based rank of the first correct target for each GT pair (inf if absent)."""
    _check_gt(ground_truth)
    by_pair = _rankings_by_pair(rankings)
    out = []
    for cs in ground_truth:
        if len(cs) == 0:
            continue
        r = by_pair.get((cs.model_a, cs.model_b))
        if r is None:
            raise InvalidInput(f"no ranking for shape pair {cs.model_a} -> {cs.model_b}")
        rows = _query_rows(r)
        ranks = np.full(len(cs), np.inf)
        for n, (ia, ib) in enumerate(cs.pairs.tolist()):
            if ia not in rows:
                continue  # query keypoint had no descriptor: counts as a miss
            ranked_ids = r.target_ids[r.order[rows[ia]]]
            hit = np.flatnonzero(_target_matches(cs, symmetric, ib, ranked_ids))
            if len(hit):
                ranks[n] = hit[0] + 1
        out.append(ranks)
    return out


def cmc_curve(rankings, ground_truth: list[CorrespondenceSet], cfg: EvalConfig) -> np.ndarray:
    """Entry r-1 is the fraction of GT correspondences whose true target ranks <= r,
    computed per shape pair and averaged over pairs."""
    per_pair = true_ranks(rankings, ground_truth, cfg.symmetric)
    r = np.arange(1, cfg.k + 1)
    hits = [((ranks[:, None] <= r[None, :]).sum(axis=0).tolist(), len(ranks)) for ranks in per_pair]
    return np.array([_exact_mean([(h[i], n) for h, n in hits]) for i in range(cfg.k)])


def _exact_mean(fractions) -> float:
    """Mean of count/total fractions, rounded once, so results do not depend on summation order."""
    return float(sum(Fraction(c, n) for c, n in fractions) / len(fractions))


def _bbox_diagonal(cloud: PointCloud) -> float:
    pts = cloud.points
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def correspondence_accuracy(rankings, ground_truth: list[CorrespondenceSet], clouds: dict[str, PointCloud], cfg: EvalConfig) -> float:
    """Fraction of GT queries whose rank-1 target lies within tau of the true point, with
    distances measured in units of the target model's bounding-box diagonal."""
    _check_gt(ground_truth)
    by_pair = _rankings_by_pair(rankings)
    per_pair = []
    for cs in ground_truth:
        if len(cs) == 0:
            continue
        r = by_pair.get((cs.model_a, cs.model_b))
        if r is None:
            raise InvalidInput(f"no ranking for shape pair {cs.model_a} -> {cs.model_b}")
        cloud = clouds[cs.model_b]
        diag = _bbox_diagonal(cloud)
        rows = _query_rows(r)
        good = 0
        for ia, ib in cs.pairs.tolist():
            if ia not in rows:
                continue
            top = int(r.target_ids[r.order[rows[ia], 0]])
            if _target_matches(cs, cfg.symmetric, ib, np.array([top]))[0]:
                dist = 0.0
            else:
                dist = np.linalg.norm(cloud.points[top] - cloud.points[ib]) / diag
            good += dist <= cfg.tau
        per_pair.append((int(good), len(cs)))
    return _exact_mean(per_pair)


def decide_matches(da: DescriptorSet, db: DescriptorSet, cfg: EvalConfig) -> list[Match]:
    """At most one match per query keypoint, by mutual nearest neighbour or NNDR."""
    if len(da) == 0 or len(db) == 0:
        return []
    if cfg.match_rule == "nndr":
        if len(db) < 2:
            return []
        return [
            Match(da.model_id, db.model_id, int(da.indices[m.query_index]), int(db.indices[m.target_index]))
            for m in nndr_match(da.values, db.values, cfg.nndr_ratio)
        ]
    dist = pairwise_distances(da.values, db.values)
    fwd = np.argmin(dist, axis=1)
    back = np.argmin(dist, axis=0)
    return [
        Match(da.model_id, db.model_id, int(da.indices[q]), int(db.indices[t]))
        for q, t in enumerate(fwd)
        if back[t] == q
    ]


def precision_recall(matches: list[Match], ground_truth: list[CorrespondenceSet], cfg: EvalConfig) -> tuple[float, float, bool]:
    """(precision, recall, no_matches). Counts are pooled over all shape pairs.

    ``matches`` must hold at most one match per query keypoint and shape pair.
    With no matches at all precision is reported as 0 and the flag is set.
    """
    _check_gt(ground_truth)
    gt_by_pair = {(cs.model_a, cs.model_b): cs for cs in ground_truth}
    seen = set()
    correct = 0
    for m in matches:
        q = (m.model_a, m.model_b, m.idx_a)
        if q in seen:
            raise InvalidInput(f"more than one match for query {q}")
        seen.add(q)
        cs = gt_by_pair.get((m.model_a, m.model_b))
        if cs is None:
            continue
        truths = cs.pairs[cs.pairs[:, 0] == m.idx_a, 1]
        if any(_target_matches(cs, cfg.symmetric, int(t), np.array([m.idx_b]))[0] for t in truths):
            correct += 1
    total_gt = sum(len(cs) for cs in ground_truth)
    if not matches:
        return 0.0, 0.0, True
    return correct / len(matches), correct / total_gt, False


def evaluate(
    descriptors: dict[str, DescriptorSet],
    ground_truth: list[CorrespondenceSet],
    clouds: dict[str, PointCloud],
    cfg: EvalConfig,
) -> EvalReport:
    """All four metrics over every shape pair in ``ground_truth``."""
    rankings, matches = [], []
    for cs in ground_truth:
        da, db = descriptors[cs.model_a], descriptors[cs.model_b]
        if len(db) == 0:
            raise InvalidInput(f"model {cs.model_b} has no descriptors")
        rankings.append(rank_pair(da, db))
        matches += decide_matches(da, db, cfg)
    cmc = cmc_curve(rankings, ground_truth, cfg)
    acc = correspondence_accuracy(rankings, ground_truth, clouds, cfg)
    p, r, empty = precision_recall(matches, ground_truth, cfg)
    return EvalReport(p, r, cmc, acc, empty, cfg)


def format_report(reports: dict[str, EvalReport], k_show=(1, 5, 10)) -> str:
    lines = []
    for mode, rep in reports.items():
        k = len(rep.cmc)
        cmc = "  ".join(f"CMC@{r}={rep.cmc_at(r):.4f}" for r in sorted({*k_show, k}) if r <= k)
        flag = " (no matches)" if rep.no_matches else ""
        lines.append(
            f"{mode:>14}: precision={rep.precision:.4f}{flag} recall={rep.recall:.4f} "
            f"corr_accuracy={rep.corr_accuracy:.4f}  {cmc}"
        )
    return "\n".join(lines)
