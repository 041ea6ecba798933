"""Corpus containers: models with keypoints and part labels, and ground-truth correspondences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput
from .geometry import PointCloud

Key = tuple[str, int]  # (model id, point index)


@dataclass
class CorrespondenceSet:
    """Ground-truth keypoint pairs between two models.

    ``sym_groups`` maps a model id to {point index: equivalence group}; targets
    sharing a group are interchangeable when matching in symmetric mode.
    """

    model_a: str
    model_b: str
    pairs: np.ndarray  # (n, 2) int: (idx_a, idx_b)
    sym_groups: dict[str, dict[int, str]] = field(default_factory=dict)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def group(self, model: str, idx: int) -> str | None:
        return self.sym_groups.get(model, {}).get(int(idx))

    def __len__(self):
        return len(self.pairs)


@dataclass
class ModelEntry:
    cloud: PointCloud
    keypoints: np.ndarray
    labels: list[str]
    pose: tuple[np.ndarray, np.ndarray] | None = None  # canonical -> instance (rotation, translation)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.int64).reshape(-1)
        self.labels = [str(l) for l in self.labels]
        if len(self.labels) != len(self.keypoints):
            raise InvalidInput(
                f"model {self.id!r}: {len(self.labels)} part labels for {len(self.keypoints)} keypoints"
            )
        if len(self.keypoints) and (self.keypoints.min() < 0 or self.keypoints.max() >= len(self.cloud)):
            raise InvalidInput(f"model {self.id!r}: keypoint index out of range")

    @property
    def id(self) -> str:
        return self.cloud.id

    def label_of(self) -> dict[int, str]:
        return dict(zip(self.keypoints.tolist(), self.labels))


@dataclass
class Corpus:
    models: list[ModelEntry]
    correspondences: list[CorrespondenceSet] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise InvalidInput("model ids must be unique")
        sizes = {m.id: len(m.cloud) for m in self.models}
        for cs in self.correspondences:
            for mid in (cs.model_a, cs.model_b):
                if mid not in sizes:
                    raise InvalidInput(f"correspondence references unknown model {mid!r}")
            if len(cs.pairs) and (
                cs.pairs.min() < 0
                or cs.pairs[:, 0].max() >= sizes[cs.model_a]
                or cs.pairs[:, 1].max() >= sizes[cs.model_b]
            ):
                raise InvalidInput(f"correspondence {cs.model_a}->{cs.model_b}: index out of range")

    def model(self, model_id: str) -> ModelEntry:
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    @property
    def by_id(self) -> dict[str, ModelEntry]:
        return {m.id: m for m in self.models}


class GroundTruthIndex:
    """Answers whether two keypoints are known to correspond (directly or by symmetry)."""

    def __init__(self, correspondences: list[CorrespondenceSet]):
        self.pairs: set[tuple[Key, Key]] = set()
        self.group: dict[Key, str] = {}
        for cs in correspondences:
            for ia, ib in cs.pairs.tolist():
                ka, kb = (cs.model_a, ia), (cs.model_b, ib)
                self.pairs.add((ka, kb))
                self.pairs.add((kb, ka))
            for mid, groups in cs.sym_groups.items():
                for idx, g in groups.items():
                    self.group[(mid, int(idx))] = g

    def is_correspondence(self, ka: Key, kb: Key) -> bool:
        return (ka, kb) in self.pairs

    def equivalent(self, ka: Key, kb: Key) -> bool:
        if ka == kb or (ka, kb) in self.pairs:
            return True
        ga = self.group.get(ka)
        return ga is not None and ga == self.group.get(kb)
