"""Desk-scale experiments on the synthetic corpus, shared by scripts/ and the acceptance tests.

Every archetype contributes ``instances`` models; the last instance of each is held
out. Training uses correspondences among the remaining instances, evaluation ranks
held-out targets for queries from the training instances.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baseline import DEFAULT_BINS
from .binarization import ItqModel, itq_encode_many, itq_train
from .corpus import Corpus, CorrespondenceSet
from .evaluation import DescriptorSet, EvalConfig, EvalReport, describe_keypoints, evaluate
from .geometry import PatchConfig
from .mining import MiningConfig, PatchBank, TrainingSet, mine_training_set, resample_corpus
from .model import EncoderArch, EncoderParams, LossConfig
from .synthetic import SynthConfig, generate_synthetic_corpus
from .trainer import HE_GAIN, TrainConfig, TrainReport, init_params, train


@dataclass(frozen=True)
class ToySetup:
    kind: str = "composite"
    archetypes: int = 4
    instances: int = 5
    points: int = 2000
    keypoints: int = 40
    noise: float = 0.005
    radius: float = 0.2
    n_points: int = 64
    theta_min: float = 0.2
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.02
    momentum: float = 0.9
    init_gain: float = HE_GAIN
    soft_budget: int | None = None
    hard_budget: int | None = None
    cross_model_pairs: int | None = None
    k: int = 10

    @property
    def patch(self) -> PatchConfig:
        return PatchConfig(self.radius, self.n_points, self.theta_min)


@dataclass
class ToySplit:
    corpus: Corpus
    train: Corpus
    test_ids: frozenset[str]
    test_gt: list[CorrespondenceSet]

    @property
    def clouds(self):
        return {m.id: m.cloud for m in self.corpus.models}


@dataclass
class ToyRun:
    seed: int
    params: EncoderParams
    report: TrainReport
    training_set: TrainingSet
    scores: dict[str, float] = field(default_factory=dict)


def make_split(corpus: Corpus, test_ids) -> ToySplit:
    test_ids = frozenset(test_ids)
    train = Corpus(
        [m for m in corpus.models if m.id not in test_ids],
        [c for c in corpus.correspondences if c.model_a not in test_ids and c.model_b not in test_ids],
    )
    gt = [c for c in corpus.correspondences if c.model_b in test_ids and c.model_a not in test_ids]
    return ToySplit(corpus, train, test_ids, gt)


def toy_split(setup: ToySetup, seed: int) -> ToySplit:
    corpus, _ = generate_synthetic_corpus(
        SynthConfig(
            kinds=(setup.kind,) * setup.archetypes,
            instances=setup.instances,
            points=setup.points,
            keypoints=setup.keypoints,
            noise=setup.noise,
            seed=seed,
        )
    )
    held_out = {m.id for m in corpus.models if m.id.endswith(f"_{setup.instances - 1}")}
    return make_split(corpus, held_out)


def mine(split: ToySplit, setup: ToySetup, seed: int) -> TrainingSet:
    cfg = MiningConfig(
        setup.patch,
        soft_budget=setup.soft_budget,
        hard_budget=setup.hard_budget,
        cross_model_pairs=setup.cross_model_pairs,
        seed=seed,
    )
    return mine_training_set(split.train, cfg)


def train_config(setup: ToySetup, loss: LossConfig, seed: int) -> TrainConfig:
    return TrainConfig(
        loss=loss,
        arch=EncoderArch(),
        epochs=setup.epochs,
        batch_size=setup.batch_size,
        learning_rate=setup.learning_rate,
        momentum=setup.momentum,
        seed=seed,
        init_gain=setup.init_gain,
    )


def train_toy(split: ToySplit, setup: ToySetup, loss: LossConfig, seed: int, training_set: TrainingSet | None = None) -> ToyRun:
    ts = training_set if training_set is not None else mine(split, setup, seed)
    if loss.kind == "mmcl":
        data = ts.pairs()
    else:
        # single-margin losses see hard and soft negatives as one set
        data = ts.positives + [replace(p, gamma=None) for p in ts.merged_negatives()]
    report = train(data, train_config(setup, loss, seed))
    return ToyRun(seed, report.params, report, ts)


def describe_corpus(params: EncoderParams, corpus: Corpus, patch: PatchConfig) -> dict[str, DescriptorSet]:
    return {m.id: describe_keypoints(params, m.cloud, m.keypoints, patch) for m in corpus.models}


def histogram_corpus(corpus: Corpus, patch: PatchConfig, bins=DEFAULT_BINS) -> dict[str, DescriptorSet]:
    bank = PatchBank(corpus, patch, bins)
    out = {}
    for m in corpus.models:
        ok, rows = [], []
        for k in m.keypoints.tolist():
            h = bank.histogram((m.id, k))
            if h is not None:
                ok.append(k)
                rows.append(h)
        values = np.stack(rows) if rows else np.zeros((0, int(np.prod(bins))))
        out[m.id] = DescriptorSet(m.id, np.array(ok, dtype=np.int64), values)
    return out


def score(descriptors, split: ToySplit, setup: ToySetup, symmetry_mode="non_symmetric") -> EvalReport:
    return evaluate(descriptors, split.test_gt, split.clouds, EvalConfig(k=setup.k, symmetry_mode=symmetry_mode))


def resampled_split(split: ToySplit, fraction: float, seed: int) -> ToySplit:
    """The same split evaluated on clouds subsampled to ``fraction`` of their points."""
    if fraction >= 1.0:
        return split
    low = resample_corpus(split.corpus, fraction, seed)
    suffix = f"@{fraction:g}"
    return make_split(low, {i + suffix for i in split.test_ids})


def binarize_descriptors(
    train_descs: dict[str, DescriptorSet], descs: dict[str, DescriptorSet], bits: int, iterations: int, seed: int
) -> tuple[ItqModel, dict[str, DescriptorSet]]:
    """Fit ITQ on ``train_descs`` and replace every descriptor in ``descs`` by its code bits.

    Euclidean distance between 0/1 vectors is the square root of the Hamming distance,
    so ranking the bit vectors reproduces Hamming ranking exactly.
    """
    X = np.concatenate([d.values for d in train_descs.values() if len(d)])
    model = itq_train(X, bits=bits, iterations=iterations, seed=seed)
    out = {}
    for mid, d in descs.items():
        codes = itq_encode_many(model, d.values) if len(d) else []
        bitsm = np.stack([c.unpack() for c in codes]).astype(np.float64) if codes else np.zeros((0, bits))
        out[mid] = DescriptorSet(mid, d.indices, bitsm, d.failures)
    return model, out


def efficacy_seed(setup: ToySetup, seed: int, loss: LossConfig | None = None) -> ToyRun:
    """Train one seed and score trained, random-init and histogram descriptors (CMC@k)."""
    t0 = time.perf_counter()
    split = toy_split(setup, seed)
    run = train_toy(split, setup, loss or LossConfig(kind="mmcl"), seed)
    patch = setup.patch
    trained = score(describe_corpus(run.params, split.corpus, patch), split, setup)
    random = score(describe_corpus(init_params(EncoderArch(), seed, setup.init_gain), split.corpus, patch), split, setup)
    hist = score(histogram_corpus(split.corpus, patch), split, setup)
    run.scores = {
        "trained": trained.cmc_at(setup.k),
        "random": random.cmc_at(setup.k),
        "histogram": hist.cmc_at(setup.k),
        "trained_accuracy": trained.corr_accuracy,
        "seconds": time.perf_counter() - t0,
    }
    return run
