"""Procedurally generated image corpora for protocol checks and demos.

``make_texture_corpus`` draws one "authentic" texture family and five
synthetic families, each carrying a different artifact (grid seams, heavy
noise, over-smoothing, pixel checkerboard, posterization).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .datasets import DatasetManifest, ManifestRecord, make_manifest
from .imageops import encode_png, resize_bilinear

TEXTURE_CLASSES = ("authentic", "gridseam", "noisy", "smooth", "checker", "posterized")
TEXTURE_YEARS = {"authentic": 2017, "gridseam": 2023, "noisy": 2022, "smooth": 2023,
                 "checker": 2022, "posterized": 2023}


def _base_field(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(40, 215, size=(6, 6, 3)).astype(np.uint8)
    smooth = resize_bilinear(coarse, size, size).astype(np.float64)
    detail = resize_bilinear(rng.uniform(0, 255, size=(size // 8, size // 8, 3)).astype(np.uint8),
                             size, size).astype(np.float64)
    return 0.8 * smooth + 0.2 * detail


def texture_image(kind: str, rng: np.random.Generator, size: int = 224) -> np.ndarray:
    img = _base_field(rng, size)
    sensor = rng.normal(0.0, 4.0, size=img.shape)
    if kind == "authentic":
        img = img + sensor
    elif kind == "gridseam":
        img = img + sensor
        seam = np.zeros(size)
        seam[7::8] = 14.0
        img = img + seam[:, None, None] + seam[None, :, None]
    elif kind == "noisy":
        img = img + rng.normal(0.0, 22.0, size=img.shape)
    elif kind == "smooth":
        pass
    elif kind == "checker":
        yy, xx = np.indices((size, size))
        img = img + sensor + np.where((yy + xx) % 2 == 0, 9.0, -9.0)[..., None]
    elif kind == "posterized":
        img = np.floor((img + sensor) / 48.0) * 48.0 + 24.0
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def make_texture_corpus(root, n_per_class: int = 120, seed: int = 0, size: int = 224,
                        classes=TEXTURE_CLASSES) -> DatasetManifest:
    """Write ``n_per_class`` PNGs per class under ``root/<class>/``."""
    root = Path(root)
    records = []
    for ci, kind in enumerate(classes):
        rng = np.random.default_rng([seed, ci])
        (root / kind).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            path = root / kind / f"{i:04d}.png"
            path.write_bytes(encode_png(texture_image(kind, rng, size)))
            records.append(ManifestRecord(path.as_posix(), kind,
                                          "none" if kind == "authentic" else kind,
                                          TEXTURE_YEARS.get(kind), "PNG"))
    return make_manifest(records, classes, f"procedural textures, seed {seed}")


# per-image counts of synthetic patch votes (out of 5)
TABLE7_AUTHENTIC_COUNTS = (0, 1, 2, 3, 3, 4, 4, 4, 5, 0)
TABLE7_SYNTHETIC_COUNTS = (5, 5, 5, 4, 4, 3, 5, 2, 5, 4)


def table7_fixture(root, size: int = 448, side: int = 224):
    """Images plus a stub script whose per-patch votes favour a stricter threshold.

    Returns ``(authentic_manifest, synthetic_manifest, stub_script)``. Image
    ``i`` receives synthetic votes on its top ``counts[i]`` contrast-ranked
    patches, so moving from 3-of-5 to 5-of-5 raises authentic recall and
    lowers synthetic recall.
    """
    root = Path(root)
    rng = np.random.default_rng(7)
    rules = []
    manifests = []
    for label, counts in (("authentic", TABLE7_AUTHENTIC_COUNTS),
                          ("synthetic", TABLE7_SYNTHETIC_COUNTS)):
        (root / label).mkdir(parents=True, exist_ok=True)
        recs = []
        for i, c in enumerate(counts):
            path = root / label / f"{i:02d}.png"
            path.write_bytes(encode_png(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)))
            recs.append(ManifestRecord(path.as_posix(), label,
                                       "none" if label == "authentic" else "fixture", None, "PNG"))
            rules += [{"source": path.as_posix(), "rank": r, "probs": [0.1, 0.9]}
                      for r in range(c)]
        manifests.append(make_manifest(recs, [label], "table7 fixture"))
    script = {"default": [0.9, 0.1], "rules": rules}
    return manifests[0], manifests[1], script
