import io
import zlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from sid.errors import DecodeError, EmptyPairError, ParameterError, UnsupportedFormatError
from sid.imageops import (GLCM_OFFSETS, candidate_origins, center_crop, compute_glcm,
                          decode_image, encode_png, glcm_contrast, quantize, read_image,
                          resize_bilinear, select_top_patches, to_grayscale)

FIXTURES = Path(__file__).parent / "fixtures"

OFFSET_SETS = [
    GLCM_OFFSETS,
    ((1, 0),),
    ((0, 1),),
    ((-1, 1), (2, 0)),
    ((1, 1), (0, -2), (-2, -1)),
]


def glcm_oracle(gray, levels, offsets, symmetric):
    """Naive double loop over every pixel and offset."""
    h, w = gray.shape
    counts = np.zeros((levels, levels), dtype=np.int64)
    for dx, dy in offsets:
        for y in range(h):
            for x in range(w):
                x2, y2 = x + dx, y + dy
                if 0 <= x2 < w and 0 <= y2 < h:
                    i = int(gray[y, x]) * levels // 256
                    j = int(gray[y2, x2]) * levels // 256
                    counts[i, j] += 1
                    if symmetric:
                        counts[j, i] += 1
    return counts


small_images = hnp.arrays(np.uint8, st.tuples(st.integers(3, 16), st.integers(3, 16)))


@settings(max_examples=1000, deadline=None)
@given(gray=small_images, offsets=st.sampled_from(OFFSET_SETS), symmetric=st.booleans(),
       levels=st.sampled_from([2, 8, 32]))
def test_glcm_matches_pair_counting_oracle(gray, offsets, symmetric, levels):
    m = compute_glcm(gray, levels, offsets, symmetric)
    expected = glcm_oracle(gray, levels, offsets, symmetric)
    np.testing.assert_array_equal(m.counts, expected)
    assert m.cells.sum() == pytest.approx(1.0, abs=1e-9)
    if symmetric:
        assert np.array_equal(m.cells, m.cells.T)


@settings(max_examples=200, deadline=None)
@given(gray=small_images)
def test_contrast_zero_iff_mass_on_diagonal(gray):
    m = compute_glcm(gray)
    off_diag = m.counts.sum() - np.trace(m.counts)
    assert (glcm_contrast(m) == 0) == (off_diag == 0)


def test_contrast_constant_and_alternating_columns():
    flat = np.full((224, 224), 77, np.uint8)
    assert glcm_contrast(compute_glcm(flat)) == 0
    cols = np.zeros((224, 224), np.uint8)
    cols[:, 1::2] = 255
    assert glcm_contrast(compute_glcm(cols, 32, ((1, 0),))) == 961


def test_glcm_errors():
    g = np.zeros((4, 4), np.uint8)
    with pytest.raises(ParameterError):
        compute_glcm(g, offsets=((0, 0),))
    with pytest.raises(ParameterError):
        compute_glcm(g, levels=1)
    with pytest.raises(EmptyPairError):
        compute_glcm(g, offsets=((4, 0),))
    with pytest.raises(EmptyPairError):
        compute_glcm(np.zeros((1, 1), np.uint8))


def test_quantize_bins():
    assert quantize(np.array([0, 7, 8, 255]), 32).tolist() == [0, 0, 1, 31]


def test_grayscale_rec601():
    img = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 255]]], np.uint8)
    # 0.299*255 = 76.245, 0.587*255 = 149.685, 0.114*255 = 29.07
    assert to_grayscale(img).tolist() == [[76, 150, 29, 255]]


# --------------------------------------------------------------------------
# cropping and resizing

def test_center_crop_exact_fit_and_offset():
    img = np.arange(300 * 250 * 3, dtype=np.uint32).reshape(250, 300, 3).astype(np.uint8)
    p = center_crop(img, 224)
    assert (p.origin_x, p.origin_y) == (38, 13)
    assert np.array_equal(p.pixels, img[13:237, 38:262])
    assert not p.padded


def test_center_crop_reflect_pads_small_image():
    img = np.arange(5 * 4, dtype=np.uint8).reshape(4, 5)
    p = center_crop(img, 8)
    assert p.padded and p.side == 8
    # mirror without repeating the edge pixel
    np.testing.assert_array_equal(p.pixels, np.pad(img, ((2, 2), (1, 2)), mode="reflect")[:8, :8])
    assert p.pixels[2, 1] == img[0, 0]
    assert p.pixels[1, 1] == img[1, 0]


def test_resize_identity_and_checkerboard():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (17, 23, 3), dtype=np.uint8)
    assert np.array_equal(resize_bilinear(img, 23, 17), img)
    # 2x2 blocks of a checkerboard collapse to their means under exact halving
    board = np.kron(np.indices((4, 4)).sum(0) % 2, np.ones((2, 2), int)) * 200
    board = board.astype(np.uint8)
    half = resize_bilinear(board, 4, 4)
    np.testing.assert_array_equal(half, (np.indices((4, 4)).sum(0) % 2) * 200)
    # 1x2 -> 1x4 with half-pixel centres: positions -0.25, 0.25, 0.75, 1.25
    row = np.array([[0, 100]], np.uint8)
    assert resize_bilinear(row, 4, 1).tolist() == [[0, 25, 75, 100]]


def test_resize_deterministic_and_rejects_empty():
    img = np.random.default_rng(1).integers(0, 256, (40, 30, 3), dtype=np.uint8)
    assert resize_bilinear(img, 224, 224).tobytes() == resize_bilinear(img, 224, 224).tobytes()
    with pytest.raises(ParameterError):
        resize_bilinear(img, 0, 4)


# --------------------------------------------------------------------------
# patch selection

def exhaustive_selection(img, k, side, stride, max_candidates):
    gray = to_grayscale(img)
    scored = []
    for x, y in candidate_origins(img.shape[1], img.shape[0], side, stride, max_candidates):
        c = glcm_contrast(compute_glcm(gray[y:y + side, x:x + side]))
        scored.append((c, x, y))
    scored.sort(key=lambda t: (-t[0], t[2], t[1]))
    return [(x, y) for _, x, y in scored[:k]]


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), w=st.integers(32, 90), h=st.integers(32, 90),
       k=st.integers(1, 8), blocky=st.booleans())
def test_select_top_patches_matches_exhaustive_sort(seed, w, h, k, blocky):
    rng = np.random.default_rng(seed)
    if blocky:
        # coarse blocks create many exact contrast ties
        img = np.kron(rng.integers(0, 4, (h // 8 + 1, w // 8 + 1, 1)) * 60,
                      np.ones((8, 8, 3), int))[:h, :w].astype(np.uint8)
    else:
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    got = select_top_patches(img, k, side=24, stride=12, max_candidates=40)
    want = exhaustive_selection(img, k, 24, 12, 40)
    assert [(p.origin_x, p.origin_y) for p in got] == want
    assert [p.rank for p in got] == list(range(len(want)))
    for p in got:
        assert np.array_equal(p.pixels, img[p.origin_y:p.origin_y + 24, p.origin_x:p.origin_x + 24])


def test_uniform_image_ties_break_row_major():
    img = np.full((448, 448, 3), 90, np.uint8)
    got = select_top_patches(img, 5)
    assert [(p.origin_x, p.origin_y) for p in got] == [(0, 0), (112, 0), (224, 0), (0, 112),
                                                         (112, 112)]


def test_candidate_grid_and_cap():
    assert candidate_origins(448, 224) == [(0, 0), (112, 0), (224, 0)]
    # last-aligned column added for non-multiple widths
    assert [x for x, _ in candidate_origins(400, 224)] == [0, 112, 176]
    big = candidate_origins(4000, 3000)
    assert len(big) <= 64
    assert (4000 - 224, 3000 - 224) in big


def test_small_image_returns_padded_center():
    img = np.random.default_rng(2).integers(0, 256, (100, 300, 3), dtype=np.uint8)
    got = select_top_patches(img, 5)
    assert len(got) == 1 and got[0].padded and got[0].side == 224


def test_select_rejects_bad_k():
    with pytest.raises(ParameterError):
        select_top_patches(np.zeros((224, 224, 3), np.uint8), 0)


# --------------------------------------------------------------------------
# decoding

def _png_bytes(img):
    return encode_png(img)


def test_decode_solid_red_png():
    red = np.zeros((10, 12, 3), np.uint8)
    red[..., 0] = 255
    out = decode_image(_png_bytes(red))
    assert out.shape == (10, 12, 3) and np.array_equal(out, red)


def test_decode_jpeg_dimensions():
    buf = io.BytesIO()
    Image.new("RGB", (37, 21), (10, 200, 30)).save(buf, format="JPEG")
    assert decode_image(buf.getvalue()).shape == (21, 37, 3)


def test_decode_alpha_composited_over_white():
    buf = io.BytesIO()
    Image.new("RGBA", (2, 2), (0, 0, 0, 0)).save(buf, format="PNG")
    assert (decode_image(buf.getvalue()) == 255).all()


def test_decode_grayscale_png_becomes_rgb():
    buf = io.BytesIO()
    Image.new("L", (3, 3), 40).save(buf, format="PNG")
    out = decode_image(buf.getvalue())
    assert out.shape == (3, 3, 3) and (out == 40).all()


def test_truncated_png_reports_offset():
    data = _png_bytes(np.zeros((16, 16, 3), np.uint8))
    with pytest.raises(DecodeError) as err:
        decode_image(data[:40])
    assert err.value.offset is not None and 8 <= err.value.offset <= 40


def test_corrupt_png_crc_reports_chunk_offset():
    data = bytearray(_png_bytes(np.zeros((4, 4, 3), np.uint8)))
    data[20] ^= 0xFF  # inside IHDR payload
    with pytest.raises(DecodeError) as err:
        decode_image(bytes(data))
    assert err.value.offset == 8


def test_truncated_jpeg_reports_offset():
    buf = io.BytesIO()
    Image.new("RGB", (16, 16), (1, 2, 3)).save(buf, format="JPEG")
    data = buf.getvalue()[:-2]
    with pytest.raises(DecodeError) as err:
        decode_image(data)
    assert err.value.offset == len(data)


def test_unsupported_format():
    with pytest.raises(UnsupportedFormatError):
        decode_image(b"GIF89a" + bytes(20))


def test_natural_fixture_reads():
    img = read_image(FIXTURES / "natural.png")
    assert img.shape == (256, 256, 3)
    assert zlib.crc32(img.tobytes()) == zlib.crc32(read_image(FIXTURES / "natural.png").tobytes())
