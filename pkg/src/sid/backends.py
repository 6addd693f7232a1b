"""Classifier backends behind one ``classify_patch`` contract.

Three kinds exist: ``reference`` (the built-in feature classifier read from
its JSON file), ``external`` (an ONNX checkpoint run through onnxruntime)
and ``stub`` (scripted outputs for tests and dry runs).
"""
from __future__ import annotations

import fnmatch
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import (BackendLoadError, ConfigError, ContractViolationError, ParameterError,
                     VersionError)
from .imageops import PATCH_SIDE, Patch
from .refmodel import AUTHENTIC, RefModel, extract_features, predict, softmax

DESCRIPTOR_VERSION = 1
KINDS = ("reference", "external", "stub")
OUTPUT_MODES = ("auto", "logits", "probabilities")


@dataclass(frozen=True)
class InputSpec:
    channels: int = 3
    height: int = PATCH_SIDE
    width: int = PATCH_SIDE
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_order: str = "RGB"
    # how to read model outputs; "auto" treats rows already summing to 1 as probabilities
    output: str = "auto"

    def __post_init__(self):
        if self.channel_order not in ("RGB", "BGR"):
            raise ConfigError(f"channel_order must be RGB or BGR, got {self.channel_order!r}")
        if self.output not in OUTPUT_MODES:
            raise ConfigError(f"output must be one of {OUTPUT_MODES}, got {self.output!r}")
        if self.height != self.width:
            raise ConfigError("only square inputs are supported")
        if any(s <= 0 for s in self.std):
            raise ConfigError("std entries must be positive")


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str
    model_path: str | None = None
    label_space: tuple[str, ...] | None = None
    input_spec: InputSpec = InputSpec()
    stub: Mapping[str, Any] | None = None
    name: str | None = None
    version: int = DESCRIPTOR_VERSION

    def __post_init__(self):
        if self.version != DESCRIPTOR_VERSION:
            raise VersionError(f"unsupported backend descriptor version {self.version!r}")
        if self.kind not in KINDS:
            raise ConfigError(f"backend kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind != "stub" and not self.model_path:
            raise ConfigError(f"{self.kind} backend needs model_path")
        if self.kind != "reference" and self.label_space is None:
            raise ConfigError(f"{self.kind} backend needs label_space")
        if self.label_space is not None:
            object.__setattr__(self, "label_space", tuple(self.label_space))
            check_label_space(self.label_space)

    @property
    def backend_id(self) -> str:
        return self.name or (Path(self.model_path).stem if self.model_path else self.kind)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path | None = None) -> "BackendDescriptor":
        data = dict(data)
        spec = data.pop("input_spec", None) or {}
        for key in ("mean", "std"):
            if key in spec:
                spec[key] = tuple(spec[key])
        path = data.get("model_path")
        if path and base_dir is not None and not Path(path).is_absolute():
            data["model_path"] = str(base_dir / path)
        if data.get("label_space") is not None:
            data["label_space"] = tuple(data["label_space"])
        try:
            return cls(input_spec=InputSpec(**spec), **data)
        except TypeError as exc:
            raise ConfigError(f"bad backend descriptor: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        spec = self.input_spec
        return {
            "version": self.version, "kind": self.kind, "name": self.name,
            "model_path": self.model_path,
            "label_space": list(self.label_space) if self.label_space else None,
            "input_spec": {"channels": spec.channels, "height": spec.height, "width": spec.width,
                           "mean": list(spec.mean), "std": list(spec.std),
                           "channel_order": spec.channel_order, "output": spec.output},
            "stub": self.stub,
        }


def check_label_space(label_space: Sequence[str]) -> None:
    if AUTHENTIC not in label_space or len(label_space) < 2:
        raise ConfigError(
            f"label space must contain {AUTHENTIC!r} and at least one synthetic class, "
            f"got {list(label_space)}")
    if len(set(label_space)) != len(label_space):
        raise ConfigError(f"duplicate class names in {list(label_space)}")


class Backend:
    """Base class; subclasses implement ``_scores``."""

    kind = "base"

    def __init__(self, label_space: Sequence[str], input_side: int, backend_id: str):
        self.label_space = tuple(label_space)
        self.input_side = input_side
        self.backend_id = backend_id

    def classify_patch(self, patch: Patch) -> np.ndarray:
        if patch.side != self.input_side or patch.pixels.shape[1] != self.input_side:
            raise ContractViolationError(
                f"patch is {patch.pixels.shape[1]}x{patch.side}, backend "
                f"{self.backend_id!r} expects {self.input_side}x{self.input_side}")
        probs = np.asarray(self._scores(patch), dtype=np.float64).ravel()
        if probs.size != len(self.label_space):
            raise ContractViolationError(
                f"backend {self.backend_id!r} produced {probs.size} outputs for "
                f"{len(self.label_space)} classes")
        if not np.all(np.isfinite(probs)) or probs.min() < 0 or abs(probs.sum() - 1.0) > 1e-5:
            raise ContractViolationError(
                f"backend {self.backend_id!r} output {probs.tolist()} is not a distribution")
        return probs

    def _scores(self, patch: Patch) -> np.ndarray:
        raise NotImplementedError


class ReferenceBackend(Backend):
    kind = "reference"

    def __init__(self, model: RefModel, input_side: int = PATCH_SIDE, backend_id: str = "reference"):
        super().__init__(model.label_space, input_side, backend_id)
        self.model = model

    def _scores(self, patch: Patch) -> np.ndarray:
        return predict(self.model, extract_features(patch))


def _as_probabilities(raw: np.ndarray, mode: str) -> np.ndarray:
    raw = raw.astype(np.float64).ravel()
    if mode == "probabilities":
        return raw
    if mode == "auto" and np.all(raw >= 0) and abs(raw.sum() - 1.0) <= 1e-3:
        return raw / raw.sum()
    return softmax(raw)


class ExternalBackend(Backend):
    """ONNX model; input is one NCHW float32 patch normalized per ``InputSpec``."""

    kind = "external"

    def __init__(self, session, spec: InputSpec, label_space: Sequence[str], backend_id: str):
        super().__init__(label_space, spec.height, backend_id)
        self.session = session
        self.spec = spec
        self.input_name = session.get_inputs()[0].name
        self._mean = np.asarray(spec.mean, dtype=np.float32).reshape(3, 1, 1)
        self._std = np.asarray(spec.std, dtype=np.float32).reshape(3, 1, 1)

    def preprocess(self, patch: Patch) -> np.ndarray:
        x = patch.pixels.astype(np.float32) / 255.0
        if self.spec.channel_order == "BGR":
            x = x[..., ::-1]
        x = (x.transpose(2, 0, 1) - self._mean) / self._std
        return x[np.newaxis].astype(np.float32)

    def _scores(self, patch: Patch) -> np.ndarray:
        (out, *_) = self.session.run(None, {self.input_name: self.preprocess(patch)})
        out = np.asarray(out)
        if out.size != len(self.label_space):
            raise ContractViolationError(
                f"model {self.backend_id!r} emits {out.size} outputs but the label space has "
                f"{len(self.label_space)} classes")
        return _as_probabilities(out, self.spec.output)


class StubBackend(Backend):
    """Scripted outputs.

    ``script`` holds an optional ``default`` distribution and ``rules``, each
    with ``probs`` plus optional ``source`` (glob on the patch source id),
    ``rank`` and ``selection`` matchers. The first matching rule wins. A
    Python callable can be given instead of a script.
    """

    kind = "stub"

    def __init__(self, label_space: Sequence[str], script: Mapping[str, Any] | None = None,
                 fn: Callable[[Patch], Sequence[float]] | None = None,
                 input_side: int = PATCH_SIDE, backend_id: str = "stub"):
        super().__init__(label_space, input_side, backend_id)
        self.script = dict(script or {})
        self.fn = fn
        self.rules = list(self.script.get("rules", []))
        self.default = self.script.get("default")
        for rule in self.rules:
            unknown = set(rule) - {"source", "rank", "selection", "probs"}
            if unknown or "probs" not in rule:
                raise ConfigError(f"bad stub rule {rule!r}")

    def _scores(self, patch: Patch) -> np.ndarray:
        if self.fn is not None:
            return np.asarray(self.fn(patch), dtype=np.float64)
        for rule in self.rules:
            if "source" in rule and not fnmatch.fnmatchcase(patch.source_id, rule["source"]):
                continue
            if "rank" in rule and rule["rank"] != patch.rank:
                continue
            if "selection" in rule and rule["selection"] != patch.selection:
                continue
            return np.asarray(rule["probs"], dtype=np.float64)
        if self.default is None:
            raise ContractViolationError(f"no stub rule matches patch from {patch.source_id!r}")
        return np.asarray(self.default, dtype=np.float64)


def _load_onnx(path: str):
    try:
        import onnxruntime
    except ImportError as exc:
        raise BackendLoadError(
            "the external backend needs onnxruntime (pip install 'artifact[onnx]')") from exc
    try:
        options = onnxruntime.SessionOptions()
        options.intra_op_num_threads = 1
        return onnxruntime.InferenceSession(path, sess_options=options,
                                            providers=["CPUExecutionProvider"])
    except Exception as exc:  # onnxruntime raises its own exception hierarchy
        raise BackendLoadError(f"cannot load ONNX model {path}: {exc}") from exc


def load_backend(desc: BackendDescriptor) -> Backend:
    side = desc.input_spec.height
    if desc.kind == "stub":
        return StubBackend(desc.label_space, desc.stub, input_side=side,
                           backend_id=desc.backend_id)
    path = Path(desc.model_path)
    if not path.is_file():
        raise BackendLoadError(f"model file not found: {path}")
    if desc.kind == "reference":
        try:
            model = RefModel.load(path)
        except VersionError:
            raise
        except (ValueError, KeyError, TypeError, ParameterError) as exc:
            raise BackendLoadError(f"corrupt reference model {path}: {exc}") from exc
        check_label_space(model.label_space)
        if desc.label_space is not None and desc.label_space != model.label_space:
            raise ContractViolationError(
                f"descriptor label space {list(desc.label_space)} != model file "
                f"{list(model.label_space)}")
        return ReferenceBackend(model, side, desc.backend_id)
    return ExternalBackend(_load_onnx(str(path)), desc.input_spec, desc.label_space,
                           desc.backend_id)


def load_descriptor(path) -> BackendDescriptor:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise BackendLoadError(f"cannot read backend descriptor {path}: {exc}") from exc
    return BackendDescriptor.from_dict(data, base_dir=path.parent)


def classify_patch(backend: Backend, patch: Patch) -> np.ndarray:
    return backend.classify_patch(patch)
