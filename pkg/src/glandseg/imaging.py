"""Image and label-map containers plus disk I/O.

Images are channels-first float arrays (3, H, W) with intensities in [0, 1].
Label maps are (H, W) uint8 grids of class ids. Gray maps and binary masks
are plain (H, W) float / bool arrays.

Formats: 8-bit PNG (RGB for images, indexed palette for label maps,
grayscale for binary masks) via Pillow, plus binary PPM (P6) / PGM (P5)
codecs implemented here so tests can run without any image library.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

# Rec. 601 luma weights, fixed by contract. The integer numerators are used
# for the actual weighting so the weights sum to exactly 1 in floating point.
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
_GRAY_NUMERATORS = np.array([299.0, 587.0, 114.0])

# Proposal-map class ids.
BACKGROUND, BORDER, INTERIOR = 0, 1, 2
PROPOSAL_CLASSES = 3

# Indexed-PNG palette for label maps: 0 black, 1 green, 2 blue.
LABEL_PALETTE = [(0, 0, 0), (0, 255, 0), (0, 0, 255)]


class ImagingError(Exception):
    """Base class for image I/O failures."""


class UnsupportedFormatError(ImagingError):
    """File exists but is not in a supported raster format."""


class CorruptDataError(ImagingError):
    """File is in a recognized format but its contents are invalid."""


@dataclass(frozen=True)
class Image:
    """RGB raster, data shaped (3, H, W), every intensity finite in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[0] != 3:
            raise ValueError(f"image data must be (3, H, W), got {d.shape}")
        if d.shape[1] < 1 or d.shape[2] < 1:
            raise ValueError(f"image must be at least 1x1, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("image intensities must be finite")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class ids, shaped (H, W), every id < num_classes."""

    data: np.ndarray
    num_classes: int = PROPOSAL_CLASSES

    def __post_init__(self):
        d = self.data
        if d.ndim != 2:
            raise ValueError(f"label map must be (H, W), got {d.shape}")
        if not (1 <= self.num_classes <= 256):
            raise ValueError(f"num_classes must be in [1, 256], got {self.num_classes}")
        if d.size and int(d.max()) >= self.num_classes:
            raise ValueError(
                f"label id {int(d.max())} exceeds declared class count {self.num_classes}"
            )
        object.__setattr__(self, "data", d.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def proposal_map(data: np.ndarray) -> LabelMap:
    """Wrap an (H, W) array of {0 background, 1 border, 2 interior} ids."""
    return LabelMap(data=data, num_classes=PROPOSAL_CLASSES)


@dataclass(frozen=True)
class Patch:
    """An image window plus the aligned label window and its origin."""

    image: np.ndarray          # (3, ph, pw)
    labels: np.ndarray | None  # (ph, pw) or None when sliced without labels
    row: int
    col: int

    def __post_init__(self):
        if self.labels is not None and self.labels.shape != self.image.shape[1:]:
            raise ValueError("patch image and label windows must share dimensions")


def load_image(path: str | os.PathLike) -> Image:
    """Load an 8-bit RGB raster (PNG or binary PPM) scaled into [0, 1]."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such image file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        arr = _decode_png_rgb(raw, path)
    elif raw[:2] == b"P6":
        arr = _decode_ppm(raw, path)
    else:
        raise UnsupportedFormatError(f"not a PNG or binary PPM file: {path}")
    return Image(data=arr.astype(np.float64).transpose(2, 0, 1) / 255.0)


def save_image(img: Image, path: str | os.PathLike) -> None:
    """Write an Image as 8-bit PNG or binary PPM, chosen by extension."""
    path = os.fspath(path)
    arr = np.rint(img.data * 255.0).astype(np.uint8).transpose(1, 2, 0)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")
    elif ext == ".ppm":
        with open(path, "wb") as fh:
            fh.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
            fh.write(arr.tobytes())
    else:
        raise UnsupportedFormatError(f"unsupported image extension for save: {path}")


def _decode_png_rgb(raw: bytes, path: str) -> np.ndarray:
    try:
        im = PILImage.open(io.BytesIO(raw))
        im.load()
    except Exception as exc:
        raise CorruptDataError(f"corrupt PNG data in {path}: {exc}") from None
    if im.mode != "RGB":
        raise UnsupportedFormatError(
            f"expected an 8-bit RGB PNG, got mode {im.mode!r}: {path}"
        )
    return np.asarray(im, dtype=np.uint8)


def _parse_pnm_header(raw: bytes, magic: bytes, path: str) -> tuple[int, int, int, int]:
    """Parse 'P5'/'P6' headers; returns (width, height, maxval, data offset)."""
    if raw[:2] != magic:
        raise UnsupportedFormatError(f"bad magic for {magic.decode()} file: {path}")
    fields, pos = [], 2
    while len(fields) < 3:
        if pos >= len(raw):
            raise CorruptDataError(f"truncated header in {path}")
        c = raw[pos:pos + 1]
        if c == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            start = pos
            while pos < len(raw) and raw[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise CorruptDataError(f"bad header byte {c!r} in {path}")
    # Exactly one whitespace byte separates the header from the raster.
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise CorruptDataError(f"missing raster separator in {path}")
    w, h, maxval = fields
    return w, h, maxval, pos + 1


def _decode_ppm(raw: bytes, path: str) -> np.ndarray:
    w, h, maxval, off = _parse_pnm_header(raw, b"P6", path)
    if maxval != 255:
        raise UnsupportedFormatError(f"only 8-bit PPM supported (maxval 255): {path}")
    need = w * h * 3
    body = raw[off:off + need]
    if len(body) != need:
        raise CorruptDataError(f"PPM raster truncated in {path}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def to_gray_level(img: Image, invert: bool = True) -> np.ndarray:
    """Per-pixel gray level in [0, 1]; with invert=True larger means darker."""
    # Weighting by the exact integers 299/587/114 over 1000 keeps the two
    # extremes exact: an all-white image scores 0.0 and all-black 1.0, which
    # the rounded float weights (summing to 1 - 1ulp) would miss.
    luma = np.tensordot(_GRAY_NUMERATORS, img.data, axes=([0], [0])) / 1000.0
    return np.clip(1.0 - luma if invert else luma, 0.0, 1.0)


def save_label_map(lm: LabelMap, path: str | os.PathLike) -> None:
    """Write a LabelMap as indexed PNG or raw PGM (P5), chosen by extension."""
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        im = PILImage.fromarray(lm.data, mode="P")
        palette = []
        for idx in range(256):
            palette.extend(LABEL_PALETTE[idx] if idx < len(LABEL_PALETTE) else (idx, idx, idx))
        im.putpalette(palette)
        im.save(path, format="PNG")
    elif ext == ".pgm":
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (lm.width, lm.height))
            fh.write(lm.data.tobytes())
    else:
        raise UnsupportedFormatError(f"unsupported label-map extension for save: {path}")


def load_label_map(path: str | os.PathLike, num_classes: int = PROPOSAL_CLASSES) -> LabelMap:
    """Load an indexed PNG or PGM label map, validating ids < num_classes."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such label-map file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            im = PILImage.open(io.BytesIO(raw))
            im.load()
        except Exception as exc:
            raise CorruptDataError(f"corrupt PNG data in {path}: {exc}") from None
        if im.mode != "P":
            raise UnsupportedFormatError(
                f"expected an indexed (palette) PNG label map, got mode {im.mode!r}: {path}"
            )
        data = np.asarray(im, dtype=np.uint8)
    elif raw[:2] == b"P5":
        w, h, maxval, off = _parse_pnm_header(raw, b"P5", path)
        if maxval != 255:
            raise UnsupportedFormatError(f"only 8-bit PGM supported (maxval 255): {path}")
        body = raw[off:off + w * h]
        if len(body) != w * h:
            raise CorruptDataError(f"PGM raster truncated in {path}")
        data = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    else:
        raise UnsupportedFormatError(f"not a PNG or PGM file: {path}")
    return LabelMap(data=data, num_classes=num_classes)


def save_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    """Write a boolean (H, W) mask as 0/255 grayscale PNG or PGM."""
    path = os.fspath(path)
    arr = np.where(mask, 255, 0).astype(np.uint8)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        PILImage.fromarray(arr, mode="L").save(path, format="PNG")
    elif ext == ".pgm":
        with open(path, "wb") as fh:
            fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
            fh.write(arr.tobytes())
    else:
        raise UnsupportedFormatError(f"unsupported mask extension for save: {path}")


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Load a binary mask from grayscale PNG or PGM; values > 127 are True."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such mask file: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            im = PILImage.open(io.BytesIO(raw))
            im.load()
        except Exception as exc:
            raise CorruptDataError(f"corrupt PNG data in {path}: {exc}") from None
        if im.mode != "L":
            raise UnsupportedFormatError(
                f"expected a grayscale PNG mask, got mode {im.mode!r}: {path}"
            )
        arr = np.asarray(im, dtype=np.uint8)
    elif raw[:2] == b"P5":
        w, h, maxval, off = _parse_pnm_header(raw, b"P5", path)
        if maxval != 255:
            raise UnsupportedFormatError(f"only 8-bit PGM supported (maxval 255): {path}")
        body = raw[off:off + w * h]
        if len(body) != w * h:
            raise CorruptDataError(f"PGM raster truncated in {path}")
        arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    else:
        raise UnsupportedFormatError(f"not a PNG or PGM file: {path}")
    return arr > 127


def reflect_indices(n: int, total: int) -> np.ndarray:
    """Index sequence of length `total` that reflect-tiles an axis of size n."""
    if n < 1 or total < 1:
        raise ValueError("axis sizes must be positive")
    if n == 1:
        return np.zeros(total, dtype=np.intp)
    period = 2 * n - 2
    r = np.arange(total, dtype=np.intp) % period
    return np.where(r < n, r, period - r)


def _pad_reflect_2d(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ri = reflect_indices(arr.shape[-2], out_h)
    ci = reflect_indices(arr.shape[-1], out_w)
    return arr[..., ri, :][..., :, ci]


def padded_extent(size: int, patch: int, stride: int) -> int:
    """Smallest axis length >= size that window origins at stride offsets tile.

    Equals patch + stride * ceil((size - patch) / stride), so the final
    window ends exactly at the padded edge; when stride divides patch this
    is the next multiple of stride (at least one full patch).
    """
    if size <= patch:
        return patch
    return patch + stride * ((size - patch + stride - 1) // stride)


def slice_patches(img: Image, prop: LabelMap | None, patch: int, stride: int) -> list[Patch]:
    """Cut (image, label) windows covering the whole image, row-major.

    Right/bottom remainders are handled by reflect-padding up to the next
    multiple of stride (at least one full patch). Patch origins refer to the
    padded grid, which coincides with image coordinates inside the image.
    """
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be >= 1")
    if stride > patch:
        raise ValueError("stride larger than patch would leave gaps")
    h, w = img.height, img.width
    if prop is not None and (prop.height, prop.width) != (h, w):
        raise ValueError(
            f"image {h}x{w} and proposal map {prop.height}x{prop.width} dimensions differ"
        )
    ph = padded_extent(h, patch, stride)
    pw = padded_extent(w, patch, stride)
    pimg = _pad_reflect_2d(img.data, ph, pw)
    plab = _pad_reflect_2d(prop.data, ph, pw) if prop is not None else None
    out = []
    for r in range(0, ph - patch + 1, stride):
        for c in range(0, pw - patch + 1, stride):
            out.append(Patch(
                image=pimg[:, r:r + patch, c:c + patch].copy(),
                labels=plab[r:r + patch, c:c + patch].copy() if plab is not None else None,
                row=r, col=c,
            ))
    return out
