"""Measurement protocols: per-patch verdicts, k-of-n voting, recall
bookkeeping, cross-generalization matrices, threshold sweeps and the
resize-versus-crop comparison.

Image-level work may run on a thread pool; results are always reduced in
manifest order, so reports do not depend on the worker count.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .alterations import AugmentationPolicy, augment
from .backends import Backend
from .datasets import DatasetManifest, ManifestRecord
from .errors import ConfigError, ParameterError, SidError, UndefinedRecallError
from .imageops import (CANDIDATE_STRIDE, MAX_CANDIDATES, PATCH_SIDE, Patch, center_crop,
                       read_image, resize_bilinear, select_top_patches)
from .refmodel import AUTHENTIC

log = logging.getLogger(__name__)

SYNTHETIC = "synthetic"
MODES = ("center", "voted", "resized")


@dataclass(frozen=True)
class VotingPolicy:
    n_patches: int = 5
    threshold_k: int = 3
    selection_mode: str = "top-contrast"
    # None: argmax rule; otherwise synthetic iff P(any synthetic class) > value
    probability_threshold: float | None = None
    small_image_fraction: Fraction = Fraction(3, 5)
    include_center: bool = False
    side: int = PATCH_SIDE
    stride: int = CANDIDATE_STRIDE
    max_candidates: int = MAX_CANDIDATES

    def __post_init__(self):
        if not 1 <= self.threshold_k <= self.n_patches:
            raise ConfigError(f"need 1 <= threshold_k <= n_patches, got "
                              f"{self.threshold_k}/{self.n_patches}")
        if self.selection_mode not in ("top-contrast", "center"):
            raise ConfigError(f"unknown selection_mode {self.selection_mode!r}")
        object.__setattr__(self, "small_image_fraction", Fraction(self.small_image_fraction))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["small_image_fraction"] = str(self.small_image_fraction)
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "VotingPolicy":
        data = dict(data)
        if "small_image_fraction" in data:
            data["small_image_fraction"] = Fraction(str(data["small_image_fraction"]))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad voting policy: {exc}") from None


STRICT_POLICY = VotingPolicy(threshold_k=5)


# --------------------------------------------------------------------------
# patch and image decisions

def binarize_prediction(dist: Sequence[float], label_space: Sequence[str],
                        probability_threshold: float | None = None) -> str:
    """Map a class distribution to ``"authentic"`` or ``"synthetic"``.

    Any synthetic class winning the argmax counts as synthetic; a tie with
    the authentic class resolves to authentic.
    """
    dist = np.asarray(dist, dtype=np.float64)
    auth = list(label_space).index(AUTHENTIC)
    if probability_threshold is not None:
        return SYNTHETIC if 1.0 - dist[auth] > probability_threshold else AUTHENTIC
    return AUTHENTIC if dist[auth] >= dist.max() else SYNTHETIC


def predicted_label(dist: Sequence[float], label_space: Sequence[str],
                    probability_threshold: float | None = None) -> str:
    if binarize_prediction(dist, label_space, probability_threshold) == AUTHENTIC:
        return AUTHENTIC
    dist = np.asarray(dist, dtype=np.float64).copy()
    dist[list(label_space).index(AUTHENTIC)] = -np.inf
    return label_space[int(np.argmax(dist))]


def effective_threshold(n_available: int, policy: VotingPolicy) -> int:
    if n_available >= policy.n_patches:
        return policy.threshold_k
    return max(1, math.ceil(policy.small_image_fraction * n_available))


@dataclass(frozen=True)
class ImageVerdict:
    synthetic: bool
    n_synthetic: int
    n_patches: int
    threshold: int

    @property
    def label(self) -> str:
        return SYNTHETIC if self.synthetic else AUTHENTIC


def vote(verdicts: Sequence[str], policy: VotingPolicy = VotingPolicy()) -> ImageVerdict:
    if not verdicts:
        raise ParameterError("cannot vote on an empty verdict list")
    if len(verdicts) > policy.n_patches:
        raise ParameterError(f"{len(verdicts)} verdicts exceed n_patches={policy.n_patches}")
    n_syn = sum(1 for v in verdicts if v == SYNTHETIC)
    k = effective_threshold(len(verdicts), policy)
    return ImageVerdict(n_syn >= k, n_syn, len(verdicts), k)


# --------------------------------------------------------------------------
# confusion matrix and recall

@dataclass
class ConfusionMatrix:
    """Counts with truth classes on rows and predicted classes on columns."""

    rows: tuple[str, ...]
    cols: tuple[str, ...]
    counts: np.ndarray

    @classmethod
    def empty(cls, rows: Sequence[str], cols: Sequence[str]) -> "ConfusionMatrix":
        return cls(tuple(rows), tuple(cols), np.zeros((len(rows), len(cols)), dtype=np.int64))

    def add(self, truth: str, predicted: str, n: int = 1) -> None:
        self.counts[self.rows.index(truth), self.cols.index(predicted)] += n

    def support(self, cls: str) -> int:
        return int(self.counts[self.rows.index(cls)].sum())

    def to_dict(self) -> dict[str, Any]:
        return {"rows": list(self.rows), "cols": list(self.cols), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ConfusionMatrix":
        return cls(tuple(data["rows"]), tuple(data["cols"]),
                   np.asarray(data["counts"], dtype=np.int64))


def recall(cm: ConfusionMatrix, cls: str) -> float:
    """Strict recall: the prediction must name the true class."""
    support = cm.support(cls)
    if support == 0:
        raise UndefinedRecallError(f"class {cls!r} has no support")
    if cls not in cm.cols:
        return 0.0
    return int(cm.counts[cm.rows.index(cls), cm.cols.index(cls)]) / support


def binary_recall(cm: ConfusionMatrix, cls: str) -> float:
    """Recall after mapping every synthetic class onto one synthetic label."""
    support = cm.support(cls)
    if support == 0:
        raise UndefinedRecallError(f"class {cls!r} has no support")
    row = cm.counts[cm.rows.index(cls)]
    auth_col = cm.cols.index(AUTHENTIC)
    hits = row[auth_col] if cls == AUTHENTIC else row.sum() - row[auth_col]
    return int(hits) / support


def macro_recall(cm: ConfusionMatrix, binary: bool = False) -> tuple[float, list[str]]:
    """Mean recall over supported classes; also returns the excluded classes."""
    fn = binary_recall if binary else recall
    included = [c for c in cm.rows if cm.support(c) > 0]
    excluded = [c for c in cm.rows if cm.support(c) == 0]
    if not included:
        raise UndefinedRecallError("no class has support")
    return sum(fn(cm, c) for c in included) / len(included), excluded


def synthetic_recall(cm: ConfusionMatrix) -> float:
    """Pooled fraction of synthetic-truth images predicted as any synthetic class."""
    auth_col = cm.cols.index(AUTHENTIC)
    hits = total = 0
    for i, cls in enumerate(cm.rows):
        if cls == AUTHENTIC:
            continue
        total += int(cm.counts[i].sum())
        hits += int(cm.counts[i].sum() - cm.counts[i, auth_col])
    if total == 0:
        raise UndefinedRecallError("no synthetic images")
    return hits / total


def pct(value: float) -> float:
    return round(100.0 * value, 2)


# --------------------------------------------------------------------------
# per-image processing

def patches_for(img: np.ndarray, mode: str, policy: VotingPolicy, source_id: str = "") -> list[Patch]:
    if mode == "center" or (mode == "voted" and policy.selection_mode == "center"):
        return [center_crop(img, policy.side, source_id)]
    if mode == "resized":
        pixels = resize_bilinear(img, policy.side, policy.side)
        return [Patch(pixels, 0, 0, source_id, selection="resized")]
    if mode != "voted":
        raise ConfigError(f"unknown mode {mode!r}")
    top = select_top_patches(img, policy.n_patches, policy.side, policy.stride,
                             policy.max_candidates, source_id)
    if not policy.include_center:
        return top
    center = center_crop(img, policy.side, source_id)
    rest = [p for p in top if (p.origin_x, p.origin_y) != (center.origin_x, center.origin_y)]
    chosen = [center] + rest[:policy.n_patches - 1]
    for rank, p in enumerate(chosen):
        p.rank = rank
    return chosen


@dataclass
class ImageResult:
    path: str
    truth: str
    n_patches: int = 0
    n_synthetic: int = 0
    patch_labels: list[str] = field(default_factory=list)
    skip_reason: str | None = None


def _records(records: DatasetManifest | Sequence[ManifestRecord]) -> list[ManifestRecord]:
    return list(records.records if isinstance(records, DatasetManifest) else records)


def _classify_image(backend: Backend, record: ManifestRecord, index: int, mode: str,
                    policy: VotingPolicy, alteration: AugmentationPolicy | None) -> ImageResult:
    result = ImageResult(record.path, record.label)
    try:
        img = read_image(record.path)
    except (OSError, SidError) as exc:
        result.skip_reason = f"{type(exc).__name__}: {exc}"
        return result
    if alteration is not None:
        img, _ = augment(img, alteration, index)
    for patch in patches_for(img, mode, policy, record.path):
        dist = backend.classify_patch(patch)
        result.patch_labels.append(
            predicted_label(dist, backend.label_space, policy.probability_threshold))
    result.n_patches = len(result.patch_labels)
    result.n_synthetic = sum(1 for lab in result.patch_labels if lab != AUTHENTIC)
    return result


def classify_images(backend: Backend, records, mode: str, policy: VotingPolicy = VotingPolicy(),
                    alteration: AugmentationPolicy | None = None,
                    workers: int = 1) -> list[ImageResult]:
    """Per-image patch predictions, in record order."""
    recs = _records(records)
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")

    def work(item):
        return _classify_image(backend, item[1], item[0], mode, policy, alteration)

    if workers <= 1:
        return [work(item) for item in enumerate(recs)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, enumerate(recs)))


def image_prediction(result: ImageResult, policy: VotingPolicy) -> tuple[ImageVerdict, str]:
    """Image-level verdict and the class name credited to it.

    A synthetic verdict is credited to the most frequent synthetic patch
    class; ties go to the class seen first.
    """
    verdict = vote([SYNTHETIC if lab != AUTHENTIC else AUTHENTIC for lab in result.patch_labels],
                   policy)
    if not verdict.synthetic:
        return verdict, AUTHENTIC
    syn = [lab for lab in result.patch_labels if lab != AUTHENTIC]
    counts: dict[str, int] = {}
    for lab in syn:
        counts[lab] = counts.get(lab, 0) + 1
    best = max(counts.values())
    return verdict, next(lab for lab in syn if counts[lab] == best)


@dataclass
class EvalReport:
    dataset_id: str
    backend_id: str
    mode: str
    policy: VotingPolicy
    confusion: ConfusionMatrix
    recall: dict[str, float]
    strict_recall: dict[str, float]
    macro_recall: float | None
    zero_support: list[str]
    skipped: list[dict[str, str]]
    verdicts: list[dict[str, Any]] | None = None
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def n_images(self) -> int:
        return int(self.confusion.counts.sum())

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        d = {
            "dataset_id": self.dataset_id, "backend_id": self.backend_id, "mode": self.mode,
            "policy": self.policy.to_dict(), "n_images": self.n_images,
            "confusion": self.confusion.to_dict(), "recall": self.recall,
            "strict_recall": self.strict_recall, "macro_recall": self.macro_recall,
            "zero_support": self.zero_support, "skipped": self.skipped,
        }
        if self.verdicts is not None:
            d["verdicts"] = self.verdicts
        if include_timing:
            d["timing"] = self.timing
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvalReport":
        return cls(data["dataset_id"], data["backend_id"], data["mode"],
                   VotingPolicy.from_dict(data["policy"]),
                   ConfusionMatrix.from_dict(data["confusion"]), data["recall"],
                   data["strict_recall"], data["macro_recall"], data["zero_support"],
                   data["skipped"], data.get("verdicts"), data.get("timing", {}))


def build_report(results: Sequence[ImageResult], backend: Backend, mode: str,
                 policy: VotingPolicy, dataset_id: str, truth_labels: Sequence[str] | None = None,
                 keep_verdicts: bool = True) -> EvalReport:
    rows = list(truth_labels or [])
    for r in results:
        if r.truth not in rows:
            rows.append(r.truth)
    cm = ConfusionMatrix.empty(rows, backend.label_space)
    verdicts, skipped = [], []
    for r in results:
        if r.skip_reason is not None:
            skipped.append({"path": r.path, "reason": r.skip_reason})
            continue
        verdict, label = image_prediction(r, policy)
        cm.add(r.truth, label)
        verdicts.append({"path": r.path, "truth": r.truth, "predicted": label,
                         "verdict": verdict.label, "n_synthetic": verdict.n_synthetic,
                         "n_patches": verdict.n_patches, "threshold": verdict.threshold})
    supported = [c for c in cm.rows if cm.support(c) > 0]
    recalls = {c: pct(binary_recall(cm, c)) for c in supported}
    strict = {c: pct(recall(cm, c)) for c in supported if c in cm.cols}
    macro = None
    if supported and all(c in cm.cols for c in supported):
        macro = pct(macro_recall(cm)[0])
    return EvalReport(dataset_id, backend.backend_id, mode, policy, cm, recalls, strict, macro,
                      [c for c in cm.rows if cm.support(c) == 0], skipped,
                      verdicts if keep_verdicts else None)


def evaluate_dataset(backend: Backend, records, mode: str = "center",
                     policy: VotingPolicy = VotingPolicy(), dataset_id: str = "dataset",
                     alteration: AugmentationPolicy | None = None, workers: int = 1,
                     keep_verdicts: bool = True) -> EvalReport:
    """Evaluate one dataset in ``center``, ``voted`` or ``resized`` mode."""
    start = time.perf_counter()
    results = classify_images(backend, records, mode, policy, alteration, workers)
    truth = records.label_space if isinstance(records, DatasetManifest) else None
    report = build_report(results, backend, mode, policy, dataset_id, truth, keep_verdicts)
    report.timing = {"seconds": time.perf_counter() - start, "workers": workers}
    log.info("%s on %s (%s): %s", backend.backend_id, dataset_id, mode, report.recall)
    return report


# --------------------------------------------------------------------------
# cross matrices

@dataclass
class EvalSet:
    set_id: str
    records: Any
    alteration: AugmentationPolicy | None = None


@dataclass
class CrossMatrix:
    row_ids: list[str]
    col_ids: list[str]
    values: list[list[float | None]]
    protocol: str = "synthetic_recall"
    errors: dict[str, str] = field(default_factory=dict)

    def _mean(self, cells: Iterable[float | None]) -> float | None:
        present = [c for c in cells if c is not None]
        # exact rational mean, rounded once
        return float(sum(map(Fraction, present)) / len(present)) if present else None

    @property
    def row_averages(self) -> list[float | None]:
        return [self._mean(row) for row in self.values]

    @property
    def col_averages(self) -> list[float | None]:
        return [self._mean(row[j] for row in self.values) for j in range(len(self.col_ids))]

    @property
    def incomplete(self) -> bool:
        return any(c is None for row in self.values for c in row)

    def to_dict(self) -> dict[str, Any]:
        return {"protocol": self.protocol, "row_ids": self.row_ids, "col_ids": self.col_ids,
                "values": self.values, "row_averages": self.row_averages,
                "col_averages": self.col_averages, "incomplete": self.incomplete,
                "errors": self.errors}

    def to_csv(self) -> str:
        fmt = lambda v: "" if v is None else f"{v:.2f}"  # noqa: E731
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([""] + self.col_ids + ["Avg."])
        for rid, row, avg in zip(self.row_ids, self.values, self.row_averages):
            w.writerow([rid] + [fmt(v) for v in row] + [fmt(avg)])
        w.writerow(["Avg."] + [fmt(v) for v in self.col_averages] + [""])
        return buf.getvalue()


def cross_matrix(runs: Sequence[tuple[str, Backend]], eval_sets: Sequence[EvalSet],
                 protocol: str = "synthetic_recall", mode: str = "center",
                 policy: VotingPolicy = VotingPolicy(), workers: int = 1) -> CrossMatrix:
    """Evaluate every model on every set.

    ``synthetic_recall`` scores the pooled any-synthetic recall; ``macro_recall``
    scores strict multi-class macro recall. Failed cells are left empty and
    the averages use the cells that are present.
    """
    if protocol not in ("synthetic_recall", "macro_recall"):
        raise ConfigError(f"unknown cross protocol {protocol!r}")
    values: list[list[float | None]] = []
    errors: dict[str, str] = {}
    for row_id, backend in runs:
        row: list[float | None] = []
        for es in eval_sets:
            try:
                report = evaluate_dataset(backend, es.records, mode, policy, es.set_id,
                                          es.alteration, workers, keep_verdicts=False)
                cm = report.confusion
                if protocol == "synthetic_recall":
                    row.append(pct(synthetic_recall(cm)))
                else:
                    row.append(pct(macro_recall(cm)[0]))
            except (SidError, OSError, ValueError) as exc:
                errors[f"{row_id}|{es.set_id}"] = f"{type(exc).__name__}: {exc}"
                row.append(None)
        values.append(row)
    return CrossMatrix([r for r, _ in runs], [e.set_id for e in eval_sets], values, protocol,
                       errors)


# --------------------------------------------------------------------------
# threshold sweep

def _recall_at(results: Sequence[ImageResult], policy: VotingPolicy, positive: bool) -> float | None:
    done = [r for r in results if r.skip_reason is None]
    if not done:
        return None
    hits = sum(1 for r in done if image_prediction(r, policy)[0].synthetic == positive)
    return pct(hits / len(done))


def threshold_sweep(backend: Backend, authentic, synthetic, policy: VotingPolicy = VotingPolicy(),
                    workers: int = 1) -> list[dict[str, Any]]:
    """Authentic and synthetic image-level recall for every k in 1..n_patches."""
    auth_res = classify_images(backend, authentic, "voted", policy, workers=workers)
    syn_res = classify_images(backend, synthetic, "voted", policy, workers=workers)
    if not auth_res or not syn_res:
        raise ParameterError("threshold sweep needs non-empty authentic and synthetic sets")
    table = []
    for k in range(1, policy.n_patches + 1):
        pk = dataclasses.replace(policy, threshold_k=k)
        table.append({"k": k, "n": policy.n_patches,
                      "authentic_recall": _recall_at(auth_res, pk, positive=False),
                      "synthetic_recall": _recall_at(syn_res, pk, positive=True)})
    return table


# --------------------------------------------------------------------------
# resize versus crop

def signed(delta: float) -> str:
    delta = round(delta, 2)
    return f"{0.0 if delta == 0 else delta:+.2f}"


def _kind(label: str) -> str:
    return AUTHENTIC if label == AUTHENTIC else SYNTHETIC


def resize_vs_crop_report(center: EvalReport | Sequence[EvalReport],
                          resized: EvalReport | Sequence[EvalReport]) -> dict[str, Any]:
    """Signed per-dataset, per-class change of recall when resizing instead of cropping."""
    center = [center] if isinstance(center, EvalReport) else list(center)
    resized = [resized] if isinstance(resized, EvalReport) else list(resized)
    c_ids = [r.dataset_id for r in center]
    r_ids = [r.dataset_id for r in resized]
    if sorted(c_ids) != sorted(r_ids) or len(set(c_ids)) != len(c_ids):
        raise ParameterError(f"dataset lists differ: {c_ids} vs {r_ids}")
    by_id = {r.dataset_id: r for r in resized}
    rows = []
    pooled: dict[str, list[tuple[float, float]]] = {}
    for c in center:
        r = by_id[c.dataset_id]
        if c.backend_id != r.backend_id:
            raise ParameterError(f"{c.dataset_id}: backends differ ({c.backend_id} vs {r.backend_id})")
        if set(c.recall) != set(r.recall):
            raise ParameterError(f"{c.dataset_id}: class lists differ")
        for cls in c.recall:
            delta = round(r.recall[cls] - c.recall[cls], 2)
            rows.append({"dataset_id": c.dataset_id, "class": cls, "center": c.recall[cls],
                         "resized": r.recall[cls], "delta": delta, "delta_str": signed(delta)})
            pooled.setdefault(_kind(cls), []).append((c.recall[cls], r.recall[cls]))
    averages = {}
    for kind in (AUTHENTIC, SYNTHETIC):
        if kind not in pooled:
            continue
        pairs = pooled[kind]
        cavg = round(sum(p[0] for p in pairs) / len(pairs), 2)
        ravg = round(sum(p[1] for p in pairs) / len(pairs), 2)
        averages[kind] = {"center": cavg, "resized": ravg, "delta": round(ravg - cavg, 2),
                          "delta_str": signed(ravg - cavg)}
    return {"backend_id": center[0].backend_id if center else None, "rows": rows,
            "averages": averages}


def write_json(obj: Any, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
