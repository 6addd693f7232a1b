"""End-to-end training and evaluation protocols built on the reference model."""
from __future__ import annotations

import logging
from typing import Mapping, Sequence

from .alterations import AugmentationPolicy, augment, flip_policy
from .backends import ReferenceBackend
from .datasets import DatasetManifest
from .evaluation import (CrossMatrix, EvalSet, VotingPolicy, binary_recall, cross_matrix,
                         evaluate_dataset, patches_for, pct, recall)
from .imageops import Patch, read_image
from .refmodel import (AUTHENTIC, AugmentedFeatureSource, RefModel, TrainConfig, TrainReport,
                       extract_many, train)

log = logging.getLogger(__name__)


def load_patches(m: DatasetManifest, mode: str = "center",
                 policy: VotingPolicy = VotingPolicy(),
                 label_map: Mapping[str, str] | None = None,
                 alteration: AugmentationPolicy | None = None) -> tuple[list[Patch], list[str]]:
    """Patches and (mapped) labels for every record; ``voted`` mode yields several per image."""
    patches, labels = [], []
    for i, rec in enumerate(m.records):
        img = read_image(rec.path)
        if alteration is not None:
            img, _ = augment(img, alteration, i)
        label = (label_map or {}).get(rec.label, rec.label)
        for p in patches_for(img, mode, policy, rec.path):
            patches.append(p)
            labels.append(label)
    return patches, labels


def train_reference(m: DatasetManifest, cfg: TrainConfig = TrainConfig(),
                    label_space: Sequence[str] | None = None,
                    label_map: Mapping[str, str] | None = None,
                    augmentation: AugmentationPolicy | None = None,
                    patch_mode: str = "center",
                    policy: VotingPolicy = VotingPolicy()) -> tuple[RefModel, TrainReport]:
    """Train on the ``train`` split, early-stopping on ``val``."""
    train_p, train_y = load_patches(m.select("train"), patch_mode, policy, label_map)
    val_p, val_y = load_patches(m.select("val"), patch_mode, policy, label_map)
    if augmentation is None:
        train_set = (extract_many(train_p), train_y)
    else:
        train_set = AugmentedFeatureSource(train_p, train_y, augmentation)
    return train(train_set, (extract_many(val_p), val_y), cfg, label_space)


def single_class_cross(m: DatasetManifest, synthetic_labels: Sequence[str],
                       cfg: TrainConfig = TrainConfig(monitor="validation_accuracy"),
                       seed: int = 0, side: int = 224,
                       workers: int = 1) -> tuple[CrossMatrix, dict[str, TrainReport]]:
    """Binary authentic-vs-one-generator models, each scored on every generator's test split.

    Training uses horizontal flips at 0.5 and patch-level (center crop) recall.
    """
    policy = VotingPolicy(side=side)
    runs, reports = [], {}
    for i, syn in enumerate(synthetic_labels):
        subset = m.select(labels=[AUTHENTIC, syn])
        model, report = train_reference(subset, cfg, label_space=(AUTHENTIC, syn),
                                        augmentation=flip_policy(seed + i), policy=policy)
        runs.append((syn, ReferenceBackend(model, side, backend_id=f"single-{syn}")))
        reports[syn] = report
    sets = [EvalSet(syn, m.select("test", [syn])) for syn in synthetic_labels]
    return cross_matrix(runs, sets, "synthetic_recall", "center", policy, workers), reports


def binary_vs_strict(model: RefModel, m: DatasetManifest, side: int = 224,
                     workers: int = 1) -> dict[str, dict[str, float]]:
    """Per-class test recall of a multi-class model, with and without the binary mapping."""
    backend = ReferenceBackend(model, side, backend_id="multiclass")
    report = evaluate_dataset(backend, m.select("test"), "center", VotingPolicy(side=side),
                              "test", workers=workers, keep_verdicts=False)
    cm = report.confusion
    return {cls: {"binary": pct(binary_recall(cm, cls)), "strict": pct(recall(cm, cls))}
            for cls in cm.rows if cm.support(cls) > 0}
