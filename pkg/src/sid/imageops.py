"""Deterministic raster operations.

Images are plain ``numpy`` arrays: RGB images are ``(height, width, 3)``
``uint8`` and grayscale images are ``(height, width)`` ``uint8``.
"""
from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DecodeError, EmptyPairError, ParameterError, UnsupportedFormatError

PATCH_SIDE = 224
GLCM_LEVELS = 32
# distance-1 displacements (dx, dy) at 0, 45, 90 and 135 degrees; +y points down
GLCM_OFFSETS: tuple[tuple[int, int], ...] = ((1, 0), (1, -1), (0, -1), (-1, -1))
CANDIDATE_STRIDE = 112
MAX_CANDIDATES = 64

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_JPEG_SOI = b"\xff\xd8"


@dataclass(eq=False)
class Patch:
    """A square crop of a source image plus where it came from."""

    pixels: np.ndarray
    origin_x: int
    origin_y: int
    source_id: str = ""
    padded: bool = False
    selection: str = "center"
    rank: int = 0

    @property
    def side(self) -> int:
        return int(self.pixels.shape[0])


@dataclass(eq=False)
class GlcmMatrix:
    levels: int
    cells: np.ndarray
    offsets: tuple[tuple[int, int], ...]
    symmetric: bool
    # raw pair counts; kept so statistics can be evaluated exactly
    counts: np.ndarray | None = field(default=None, repr=False)


# --------------------------------------------------------------------------
# decoding

def _check_png(data: bytes) -> None:
    pos = len(_PNG_SIGNATURE)
    while True:
        if pos + 8 > len(data):
            raise DecodeError("truncated PNG chunk header", pos)
        (length,) = struct.unpack(">I", data[pos:pos + 4])
        ctype = data[pos + 4:pos + 8]
        end = pos + 12 + length
        if end > len(data):
            raise DecodeError(f"truncated PNG chunk {ctype!r}", pos)
        crc = struct.unpack(">I", data[end - 4:end])[0]
        if zlib.crc32(data[pos + 4:end - 4]) != crc:
            raise DecodeError(f"bad CRC in PNG chunk {ctype!r}", pos)
        if ctype == b"IEND":
            return
        pos = end


def _check_jpeg(data: bytes) -> None:
    pos = 2
    n = len(data)
    while pos < n:
        if data[pos] != 0xFF:
            raise DecodeError("expected JPEG marker", pos)
        while pos < n and data[pos] == 0xFF:
            pos += 1
        if pos >= n:
            break
        marker = data[pos]
        pos += 1
        if marker == 0xD9:
            return
        if 0xD0 <= marker <= 0xD7 or marker == 0x01:
            continue
        if pos + 2 > n:
            break
        (length,) = struct.unpack(">H", data[pos:pos + 2])
        if length < 2 or pos + length > n:
            raise DecodeError(f"truncated JPEG segment 0xFF{marker:02X}", pos - 2)
        pos += length
        if marker == 0xDA:
            # skip entropy-coded data up to the next real marker
            while pos + 1 < n:
                if data[pos] == 0xFF and data[pos + 1] != 0 and not 0xD0 <= data[pos + 1] <= 0xD7:
                    break
                pos += 1
            else:
                pos = n
    raise DecodeError("JPEG stream ended before EOI marker", n)


def decode_image(data: bytes, format_hint: str | None = None) -> np.ndarray:
    """Decode a PNG or JPEG byte stream into an 8-bit RGB array.

    Transparent pixels are composited over white and single-channel sources
    are replicated to three channels.
    """
    if data.startswith(_PNG_SIGNATURE):
        fmt = "PNG"
        _check_png(data)
    elif data.startswith(_JPEG_SOI):
        fmt = "JPEG"
        _check_jpeg(data)
    else:
        hint = f" (hint: {format_hint})" if format_hint else ""
        raise UnsupportedFormatError(f"not a PNG or JPEG stream{hint}")

    try:
        with Image.open(io.BytesIO(data), formats=[fmt]) as im:
            im.load()
            has_alpha = im.mode in ("RGBA", "LA", "PA") or "transparency" in im.info
            if has_alpha:
                rgba = np.asarray(im.convert("RGBA"), dtype=np.uint32)
                alpha = rgba[..., 3:4]
                out = (rgba[..., :3] * alpha + 255 * (255 - alpha) + 127) // 255
                return out.astype(np.uint8)
            return np.ascontiguousarray(np.asarray(im.convert("RGB"), dtype=np.uint8))
    except (OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"{fmt} decode failed: {exc}", len(data)) from exc


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_image(fh.read())


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


# --------------------------------------------------------------------------
# pixel operations

def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Rec.601 luma, rounded half up."""
    rgb = img.astype(np.int64)
    luma = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return luma.astype(np.uint8)


def _round_to_u8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def center_crop(img: np.ndarray, side: int = PATCH_SIDE, source_id: str = "") -> Patch:
    h, w = img.shape[:2]
    padded = False
    if h < side or w < side:
        pad_y = max(0, side - h)
        pad_x = max(0, side - w)
        pad = [(pad_y // 2, pad_y - pad_y // 2), (pad_x // 2, pad_x - pad_x // 2)]
        pad += [(0, 0)] * (img.ndim - 2)
        img = np.pad(img, pad, mode="reflect")
        padded = True
        h, w = img.shape[:2]
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    pixels = img[y0:y0 + side, x0:x0 + side].copy()
    return Patch(pixels, x0, y0, source_id, padded=padded, selection="center")


def _axis_samples(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres. Aspect ratio is not kept."""
    if out_w < 1 or out_h < 1:
        raise ParameterError(f"output size must be positive, got {out_w}x{out_h}")
    h, w = img.shape[:2]
    src = img.astype(np.float64)
    y0, y1, wy = _axis_samples(h, out_h)
    x0, x1, wx = _axis_samples(w, out_w)
    extra = (1,) * (img.ndim - 2)
    wy = wy.reshape((-1, 1) + extra)
    rows = src[y0] * (1.0 - wy) + src[y1] * wy
    wx = wx.reshape((1, -1) + extra)
    out = rows[:, x0] * (1.0 - wx) + rows[:, x1] * wx
    return _round_to_u8(out)


# --------------------------------------------------------------------------
# grey-level co-occurrence

def quantize(gray: np.ndarray, levels: int) -> np.ndarray:
    return (gray.astype(np.int64) * levels) // 256


def _pair_counts(q: np.ndarray, levels: int, offsets: Sequence[tuple[int, int]],
                 symmetric: bool) -> np.ndarray:
    h, w = q.shape
    counts = np.zeros(levels * levels, dtype=np.int64)
    for dx, dy in offsets:
        if dx == 0 and dy == 0:
            raise ParameterError("GLCM offset (0, 0) is not allowed")
        if abs(dx) >= w or abs(dy) >= h:
            raise EmptyPairError(f"offset ({dx}, {dy}) leaves no pixel pairs in a {w}x{h} image")
        ya, yb = max(0, -dy), h - max(0, dy)
        xa, xb = max(0, -dx), w - max(0, dx)
        first = q[ya:yb, xa:xb]
        second = q[ya + dy:yb + dy, xa + dx:xb + dx]
        counts += np.bincount((first * levels + second).ravel(), minlength=levels * levels)
    counts = counts.reshape(levels, levels)
    if symmetric:
        counts = counts + counts.T
    return counts


def compute_glcm(gray: np.ndarray, levels: int = GLCM_LEVELS,
                 offsets: Sequence[tuple[int, int]] = GLCM_OFFSETS,
                 symmetric: bool = True) -> GlcmMatrix:
    """Normalized co-occurrence matrix accumulated over all ``offsets``."""
    if levels < 2:
        raise ParameterError(f"levels must be >= 2, got {levels}")
    offsets = tuple((int(dx), int(dy)) for dx, dy in offsets)
    if not offsets:
        raise ParameterError("at least one offset is required")
    counts = _pair_counts(quantize(gray, levels), levels, offsets, symmetric)
    cells = counts / counts.sum()
    return GlcmMatrix(levels, cells, offsets, symmetric, counts)


def _squared_level_gaps(levels: int) -> np.ndarray:
    idx = np.arange(levels, dtype=np.int64)
    return (idx[:, None] - idx[None, :]) ** 2


def glcm_contrast(glcm: GlcmMatrix) -> float:
    d2 = _squared_level_gaps(glcm.levels)
    if glcm.counts is not None:
        return int((glcm.counts * d2).sum()) / int(glcm.counts.sum())
    return float((glcm.cells * d2).sum())


# --------------------------------------------------------------------------
# patch selection

def _axis_positions(dim: int, side: int, stride: int) -> list[int]:
    positions = list(range(0, dim - side + 1, stride))
    if positions[-1] != dim - side:
        positions.append(dim - side)
    return positions


def candidate_origins(width: int, height: int, side: int = PATCH_SIDE,
                      stride: int = CANDIDATE_STRIDE,
                      max_candidates: int = MAX_CANDIDATES) -> list[tuple[int, int]]:
    """Row-major ``(x, y)`` grid origins; the stride grows until the cap holds."""
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    while True:
        xs = _axis_positions(width, side, stride)
        ys = _axis_positions(height, side, stride)
        if len(xs) * len(ys) <= max_candidates:
            return [(x, y) for y in ys for x in xs]
        stride += 1


def select_top_patches(img: np.ndarray, k: int = 5, side: int = PATCH_SIDE,
                       stride: int = CANDIDATE_STRIDE, max_candidates: int = MAX_CANDIDATES,
                       source_id: str = "", levels: int = GLCM_LEVELS,
                       offsets: Sequence[tuple[int, int]] = GLCM_OFFSETS) -> list[Patch]:
    """Up to ``k`` patches ranked by descending GLCM contrast.

    Ties keep row-major origin order. Images smaller than ``side`` on either
    axis yield their padded center crop as the only candidate.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    h, w = img.shape[:2]
    if h < side or w < side:
        patch = center_crop(img, side, source_id)
        patch.selection = "contrast"
        return [patch]

    q = quantize(to_grayscale(img), levels)
    d2 = _squared_level_gaps(levels)
    scored = []
    for x, y in candidate_origins(w, h, side, stride, max_candidates):
        counts = _pair_counts(q[y:y + side, x:x + side], levels, offsets, True)
        contrast = int((counts * d2).sum()) / int(counts.sum())
        scored.append((-contrast, y, x))
    scored.sort()
    return [
        Patch(img[y:y + side, x:x + side].copy(), x, y, source_id,
              selection="contrast", rank=rank)
        for rank, (_, y, x) in enumerate(scored[:k])
    ]
