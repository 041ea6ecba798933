import numpy as np
import pytest

from patchdesc.baseline import nndr_match
from patchdesc.corpus import Corpus, CorrespondenceSet, GroundTruthIndex, ModelEntry
from patchdesc.errors import EmptyDataset, InvalidInput
from patchdesc.geometry import PatchConfig, PointCloud, compute_resolution
from patchdesc.mining import (
    MiningConfig,
    PatchBank,
    augment_multiresolution,
    build_positive_pairs,
    hard_negative_candidates,
    label_soundness_violations,
    make_triplets,
    mine_hard_negatives,
    mine_soft_negatives,
    mine_training_set,
    resample_corpus,
    sample_model_pairs,
    soft_negative_candidates,
    split_models,
)
from patchdesc.synthetic import SynthConfig, generate_synthetic_corpus

from .helpers import random_blob

PATCH = PatchConfig(radius=1.0, n_points=16, theta_min=0.1)


@pytest.fixture(scope="module")
def synth():
    corpus, _ = generate_synthetic_corpus(
        SynthConfig(kinds=("composite", "composite"), instances=3, points=700, keypoints=15, noise=0.002, seed=4)
    )
    return corpus


@pytest.fixture(scope="module")
def synth_patch():
    return PatchConfig(radius=0.2, n_points=32, theta_min=0.2)


def blob_model(mid, n_blobs=2, seed=0, shift=8.0):
    """Copies of one blob side by side; blob i has keypoint i * n and label chr(65 + i)."""
    blob = random_blob(120, seed)
    normals = np.random.default_rng(seed).normal(size=(120, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    pts = np.vstack([blob + [shift * i, 0, 0] for i in range(n_blobs)])
    cloud = PointCloud(pts, np.vstack([normals] * n_blobs), mid)
    kps = [120 * i for i in range(n_blobs)]
    return ModelEntry(cloud, kps, [chr(65 + i) for i in range(n_blobs)])


# ------------------------------------------------------------- positives


def test_positive_count():
    m1, m2 = blob_model("a", 5), blob_model("b", 5)
    pairs = [(120 * i, 120 * i) for i in range(5)]
    corpus = Corpus([m1, m2], [CorrespondenceSet("a", "b", pairs)])
    pos = build_positive_pairs(corpus, PATCH)
    assert len(pos) == 5
    assert all(p.positive and p.gamma is None for p in pos)


def test_positive_skips_sparse_endpoint():
    m = blob_model("a", 2)
    pts = np.vstack([m.cloud.points, [[100.0, 100.0, 100.0]]])
    lonely = ModelEntry(PointCloud(pts, np.vstack([m.cloud.normals, [[0, 0, 1.0]]]), "a"), [0, 120, 240], ["A", "B", "C"])
    corpus = Corpus([lonely], [CorrespondenceSet("a", "a", [(0, 120), (0, 240)])])
    pos = build_positive_pairs(corpus, PATCH)
    assert [(p.key_a, p.key_b) for p in pos] == [(("a", 0), ("a", 120))]


def test_positive_self_correspondence():
    corpus = Corpus([blob_model("a", 1)], [CorrespondenceSet("a", "a", [(0, 0)])])
    (p,) = build_positive_pairs(corpus, PATCH)
    assert np.array_equal(p.patch_a.points, p.patch_b.points)


def test_positive_empty():
    with pytest.raises(EmptyDataset):
        build_positive_pairs(Corpus([blob_model("a", 1)], []), PATCH)


# ------------------------------------------------------------------ soft


def test_soft_excludes_identical_patches():
    corpus = Corpus([blob_model("a", 2)], [])
    bank = PatchBank(corpus, PATCH)
    assert soft_negative_candidates(bank, 0.5) == []
    # vacuous threshold: identical descriptors (distance 0) still do not qualify
    d = np.linalg.norm(bank.histogram(("a", 0)) - bank.histogram(("a", 120)))
    assert (soft_negative_candidates(bank, 0.0) != []) == (d > 0)


def test_soft_vacuous_threshold_takes_all_distinct_parts():
    blobs = [random_blob(120, s) + [8.0 * s, 0, 0] for s in range(3)]
    cloud = PointCloud(np.vstack(blobs), None, "m")
    corpus = Corpus([ModelEntry(cloud, [0, 120, 240], ["A", "A", "B"])], [])
    cands = soft_negative_candidates(PatchBank(corpus, PATCH), 0.0)
    assert cands == [(("m", 0), ("m", 240)), (("m", 120), ("m", 240))]


def test_soft_deterministic(synth, synth_patch):
    a = mine_soft_negatives(synth, 0.7, 20, 3, synth_patch)
    b = mine_soft_negatives(synth, 0.7, 20, 3, synth_patch)
    assert [(p.key_a, p.key_b) for p in a] == [(p.key_a, p.key_b) for p in b]
    assert len(a) == 20 and all(p.gamma == 0 for p in a)


def test_soft_pairs_satisfy_rule(synth, synth_patch):
    bank = PatchBank(synth, synth_patch)
    labels = {(m.id, k): l for m in synth.models for k, l in m.label_of().items()}
    for p in mine_soft_negatives(synth, 0.7, 50, 0, bank):
        assert labels[p.key_a] != labels[p.key_b]
        assert np.linalg.norm(bank.histogram(p.key_a) - bank.histogram(p.key_b)) > 0.7


def test_soft_none_found():
    corpus = Corpus([blob_model("a", 2)], [])
    with pytest.raises(EmptyDataset):
        mine_soft_negatives(corpus, 5.0, 10, 0, PATCH)


def test_soft_budget_validation(synth, synth_patch):
    with pytest.raises(InvalidInput):
        mine_soft_negatives(synth, 0.7, 0, 0, synth_patch)


# ------------------------------------------------------------------ hard


def near_duplicate_corpus(gt_pairs=()):
    """Part A: one keypoint. Part B: an exact copy of A's blob plus an unrelated blob."""
    a = random_blob(120, 0)
    other = random_blob(120, 9) * 1.7
    normals = np.tile([0.0, 0.0, 1.0], (360, 1))
    pts = np.vstack([a, a + [8.0, 0, 0], other + [16.0, 0, 0]])
    m = ModelEntry(PointCloud(pts, normals, "m"), [0, 120, 240], ["A", "B", "B"])
    cs = [CorrespondenceSet("m", "m", list(gt_pairs))] if gt_pairs else []
    return Corpus([m], cs)


def test_hard_single_candidate():
    bank = PatchBank(near_duplicate_corpus(), PATCH)
    assert hard_negative_candidates(bank, 0.8, []) == [(("m", 0), ("m", 120))]
    (p,) = mine_hard_negatives(near_duplicate_corpus(), 0.8, 5, 0, PATCH, cross_model_pairs=0)
    assert p.gamma == 1 and not p.positive


def test_hard_excludes_ground_truth():
    corpus = near_duplicate_corpus([(0, 120)])
    assert hard_negative_candidates(PatchBank(corpus, PATCH), 0.8, []) == []
    with pytest.raises(EmptyDataset):
        mine_hard_negatives(corpus, 0.8, 5, 0, PATCH, cross_model_pairs=0)


def test_hard_matches_replay(synth, synth_patch):
    bank = PatchBank(synth, synth_patch)
    ids = [m.id for m in synth.models]
    model_pairs = sample_model_pairs(ids, len(ids), 1)
    gt = GroundTruthIndex(synth.correspondences)

    parts = {}
    for key, label in bank.usable_keypoints():
        parts.setdefault(key[0], {}).setdefault(label, []).append(key)

    def replay(P, Q):
        if len(Q) < 2:
            return []
        H = lambda ks: np.stack([bank.histogram(k) for k in ks])
        return [(P[m.query_index], Q[m.target_index]) for m in nndr_match(H(P), H(Q), 0.8)]

    want = set()
    for ma, mb in [(i, i) for i in ids] + model_pairs:
        for la, P in parts[ma].items():
            for lb, Q in parts[mb].items():
                if la != lb:
                    for a, b in replay(P, Q):
                        if not gt.equivalent(a, b):
                            want.add(tuple(sorted((a, b))))
    got = set(hard_negative_candidates(bank, 0.8, model_pairs))
    assert got == want and got

    mined = mine_hard_negatives(synth, 0.8, 10**6, 1, bank)
    assert {(p.key_a, p.key_b) for p in mined} == want


# ------------------------------------------------------------- full set


def test_training_set_budgets(synth, synth_patch):
    ts = mine_training_set(synth, MiningConfig(synth_patch, seed=2))
    assert len(ts.soft) == len(ts.positives) // 2
    assert len(ts.hard) <= len(ts.positives) // 2
    assert len(ts.merged_negatives()) == len(ts.soft) + len(ts.hard)
    assert len(ts.pairs()) == len(ts.positives) + len(ts.soft) + len(ts.hard)
    assert {p.gamma for p in ts.soft} == {0} and {p.gamma for p in ts.hard} == {1}
    assert all(p.gamma is None for p in ts.positives)


def test_positives_only(synth, synth_patch):
    ts = mine_training_set(synth, MiningConfig(synth_patch, soft_budget=0, hard_budget=0))
    assert ts.soft == [] and ts.hard == [] and ts.positives


def test_label_soundness(synth, synth_patch):
    ts = mine_training_set(synth, MiningConfig(synth_patch, seed=5, hard_budget=10**6, soft_budget=10**6))
    assert label_soundness_violations(ts.pairs(), synth) == []
    gt = GroundTruthIndex(synth.correspondences)
    for p in ts.soft + ts.hard:
        assert not gt.equivalent(p.key_a, p.key_b)


def test_mining_deterministic(synth, synth_patch):
    cfg = MiningConfig(synth_patch, seed=8)
    keys = lambda ts: [(p.key_a, p.key_b, p.gamma) for p in ts.pairs()]
    assert keys(mine_training_set(synth, cfg)) == keys(mine_training_set(synth, cfg))


def test_triplets(synth, synth_patch):
    ts = mine_training_set(synth, MiningConfig(synth_patch))
    gt = GroundTruthIndex(synth.correspondences)
    trips = make_triplets(ts.positives, ts.merged_negatives(), 0, gt)
    assert len(trips) == len(ts.positives)
    for t in trips:
        assert not gt.equivalent(t.keys[0], t.keys[2])


# ---------------------------------------------------------- augmentation


def test_augment_identity(synth):
    out = augment_multiresolution(synth, [], 0)
    assert [m.id for m in out.models] == [m.id for m in synth.models]
    assert len(out.correspondences) == len(synth.correspondences)


def test_augment_counts():
    corpus, _ = generate_synthetic_corpus(SynthConfig(points=600, keypoints=10, seed=1))
    out = augment_multiresolution(corpus, [0.5], 0)
    assert len(out.models) == 4
    assert len(out.correspondences) == 2


def test_augment_remap_distance(synth):
    out = resample_corpus(synth, 0.5, 3)
    orig = synth.by_id
    new = out.by_id
    for cs_old, cs_new in zip(synth.correspondences, out.correspondences):
        for mid_old, mid_new, col in ((cs_old.model_a, cs_new.model_a, 0), (cs_old.model_b, cs_new.model_b, 1)):
            mr = compute_resolution(orig[mid_old].cloud)
            src = orig[mid_old].cloud.points
            dst = new[mid_new].cloud.points
            # every remapped endpoint has an original keypoint within 2 mr
            kp = src[orig[mid_old].keypoints]
            for idx in cs_new.pairs[:, col]:
                assert np.min(np.linalg.norm(kp - dst[idx], axis=1)) <= 2 * mr + 1e-12
        assert len(cs_new) <= len(cs_old)


def test_augment_fraction_validation(synth):
    with pytest.raises(InvalidInput):
        augment_multiresolution(synth, [1.0], 0)


def test_split_models_global(synth):
    train, test = split_models(synth, 0.5, seed=3)
    assert {m.id for m in train.models}.isdisjoint({m.id for m in test.models})
    assert len(train.models) + len(test.models) == len(synth.models)
    again, _ = split_models(synth, 0.5, seed=3)
    assert [m.id for m in again.models] == [m.id for m in train.models]


def test_triplets_default_uses_positives(synth, synth_patch):
    ts = mine_training_set(synth, MiningConfig(synth_patch))
    linked = {(p.key_a, p.key_b) for p in ts.positives} | {(p.key_b, p.key_a) for p in ts.positives}
    for t in make_triplets(ts.positives, ts.merged_negatives(), 1):
        assert t.keys[2] != t.keys[0] and (t.keys[0], t.keys[2]) not in linked
