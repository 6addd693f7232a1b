"""Image alteration suite and the seeded augmentation pipeline.

Each alteration kind has default sampling ranges. ``augment`` draws from a
Philox stream keyed by ``(seed, image_index, step_index)`` so the result
for one image never depends on which worker processed it or in what order.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ParameterError

KINDS = ("JpegCompress", "GaussianBlur", "AdvancedBlur", "BrightnessContrast", "Gamma",
         "HorizontalFlip")

DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "JpegCompress": {"quality": (40, 100)},
    "GaussianBlur": {"sigma": (0.2, 3.0)},
    "AdvancedBlur": {"beta": (0.5, 8.0), "sigma": (0.2, 1.0), "noise": (0.75, 1.25)},
    "BrightnessContrast": {"brightness": (-0.2, 0.2), "contrast": (-0.2, 0.2)},
    "Gamma": {"gamma": (0.8, 1.2)},
    "HorizontalFlip": {},
}

# outer limits for custom ranges
HARD_LIMITS: dict[str, dict[str, tuple[float, float]]] = {
    "JpegCompress": {"quality": (1, 100)},
    "GaussianBlur": {"sigma": (1e-3, 50.0)},
    "AdvancedBlur": {"beta": (1e-2, 100.0), "sigma": (1e-3, 50.0), "noise": (1e-3, 10.0)},
    "BrightnessContrast": {"brightness": (-1.0, 1.0), "contrast": (-1.0, 10.0)},
    "Gamma": {"gamma": (1e-2, 100.0)},
    "HorizontalFlip": {},
}


@dataclass(frozen=True)
class AlterationSpec:
    kind: str
    params: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    probability: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown alteration kind {self.kind!r}")
        ranges = dict(DEFAULT_RANGES[self.kind])
        for name, rng in self.params.items():
            if name not in ranges:
                raise ParameterError(f"{self.kind} has no parameter {name!r}")
            ranges[name] = (float(rng[0]), float(rng[1]))
        for name, (lo, hi) in ranges.items():
            lim_lo, lim_hi = HARD_LIMITS[self.kind][name]
            if not lo <= hi:
                raise ParameterError(f"{self.kind}.{name}: empty range [{lo}, {hi}]")
            if lo < lim_lo or hi > lim_hi:
                raise ParameterError(
                    f"{self.kind}.{name}: range [{lo}, {hi}] outside [{lim_lo}, {lim_hi}]")
        if not 0.0 <= self.probability <= 1.0:
            raise ParameterError(f"probability must be in [0, 1], got {self.probability}")
        object.__setattr__(self, "params", ranges)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": {k: list(v) for k, v in self.params.items()},
                "probability": self.probability}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AlterationSpec":
        params = {k: tuple(v) for k, v in data.get("params", {}).items()}
        return cls(data["kind"], params, float(data.get("probability", 1.0)))


@dataclass(frozen=True)
class AugmentationPolicy:
    steps: tuple[AlterationSpec, ...]
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, "steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AugmentationPolicy":
        return cls(tuple(AlterationSpec.from_dict(s) for s in data["steps"]),
                   int(data.get("seed", 0)))


@dataclass(frozen=True)
class AppliedAlteration:
    step: int
    kind: str
    params: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"step": self.step, "kind": self.kind, "params": self.params}


def susy_policy(seed: int = 0) -> AugmentationPolicy:
    """Flip at 0.5, then each other alteration at 0.2."""
    steps = [AlterationSpec("HorizontalFlip", probability=0.5)]
    steps += [AlterationSpec(kind, probability=0.2)
              for kind in ("JpegCompress", "GaussianBlur", "AdvancedBlur",
                           "BrightnessContrast", "Gamma")]
    return AugmentationPolicy(tuple(steps), seed)


def flip_policy(seed: int = 0) -> AugmentationPolicy:
    return AugmentationPolicy((AlterationSpec("HorizontalFlip", probability=0.5),), seed)


def fixed_policy(kind: str, seed: int = 0) -> AugmentationPolicy:
    """Always apply one alteration kind; used to build altered test sets."""
    return AugmentationPolicy((AlterationSpec(kind, probability=1.0),), seed)


# --------------------------------------------------------------------------
# kernels

def _blur_radius(sigma: float) -> int:
    return max(1, math.ceil(3 * sigma))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    r = _blur_radius(sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def advanced_blur_kernel(sigma: float, beta: float, noise: float | np.ndarray = 1.0) -> np.ndarray:
    """Isotropic generalized-Gaussian kernel with multiplicative cell noise."""
    r = _blur_radius(sigma)
    y, x = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    k = np.exp(-(np.hypot(x, y) / sigma) ** beta)
    k = k / k.sum()
    noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), k.shape)
    k = k * noise
    return k / k.sum()


def _filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty(img.shape, dtype=np.float64)
    src = img.astype(np.float64)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.correlate(src[..., c], kernel, mode="mirror")
    return out


def _separable_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = img.astype(np.float64)
    for axis in (0, 1):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="mirror")
    return out


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# application

def _check_params(spec: AlterationSpec, params: Mapping[str, Any]) -> None:
    for name, (lo, hi) in spec.params.items():
        if name not in params:
            raise ParameterError(f"{spec.kind}: missing parameter {name!r}")
        values = np.asarray(params[name], dtype=np.float64)
        if values.size == 0 or values.min() < lo or values.max() > hi:
            raise ParameterError(f"{spec.kind}.{name}={params[name]!r} outside [{lo}, {hi}]")


def jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="JPEG", quality=int(quality), subsampling=2,
                              optimize=False, progressive=False)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def apply_alteration(img: np.ndarray, spec: AlterationSpec, params: Mapping[str, Any]) -> np.ndarray:
    """Apply one alteration with concrete parameter values."""
    _check_params(spec, params)
    kind = spec.kind
    if kind == "HorizontalFlip":
        return img[:, ::-1].copy()
    if kind == "JpegCompress":
        return jpeg_roundtrip(img, round(params["quality"]))
    if kind == "GaussianBlur":
        return _to_u8(_separable_filter(img, gaussian_kernel1d(float(params["sigma"]))))
    if kind == "AdvancedBlur":
        kernel = advanced_blur_kernel(float(params["sigma"]), float(params["beta"]),
                                      np.asarray(params["noise"], dtype=np.float64))
        return _to_u8(_filter(img, kernel))
    if kind == "BrightnessContrast":
        b, c = float(params["brightness"]), float(params["contrast"])
        x = (img.astype(np.float64) / 255.0 - 0.5) * (1.0 + c) + 0.5 + b
        return _to_u8(np.clip(x, 0.0, 1.0) * 255.0)
    if kind == "Gamma":
        x = img.astype(np.float64) / 255.0
        return _to_u8(255.0 * x ** float(params["gamma"]))
    raise ParameterError(f"unknown alteration kind {kind!r}")


def _step_stream(seed: int, image_index: int, step_index: int) -> np.random.Generator:
    key = np.random.SeedSequence([seed & (2**64 - 1), image_index, step_index])
    return np.random.Generator(np.random.Philox(key))


def plan(policy: AugmentationPolicy, image_index: int) -> list[AppliedAlteration]:
    """Draw which steps fire for ``image_index`` and their concrete parameters."""
    applied = []
    for step_index, spec in enumerate(policy.steps):
        rng = _step_stream(policy.seed, image_index, step_index)
        if not rng.random() < spec.probability:
            continue
        params: dict[str, Any] = {}
        for name, (lo, hi) in spec.params.items():
            if name == "quality":
                params[name] = int(rng.integers(int(math.ceil(lo)), int(math.floor(hi)) + 1))
            elif name == "noise":
                continue
            else:
                params[name] = float(rng.uniform(lo, hi))
        if spec.kind == "AdvancedBlur":
            lo, hi = spec.params["noise"]
            size = 2 * _blur_radius(params["sigma"]) + 1
            params["noise"] = rng.uniform(lo, hi, size=(size, size)).tolist()
        applied.append(AppliedAlteration(step_index, spec.kind, params))
    return applied


def augment(img: np.ndarray, policy: AugmentationPolicy,
            image_index: int) -> tuple[np.ndarray, list[AppliedAlteration]]:
    applied = plan(policy, image_index)
    out = img
    for step in applied:
        out = apply_alteration(out, policy.steps[step.step], step.params)
    if out is img:
        out = img.copy()
    return out, applied


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    mse = np.mean((reference.astype(np.float64) - test.astype(np.float64)) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)
