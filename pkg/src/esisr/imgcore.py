"""Image container, file I/O, colour conversion, resizing and patch tools.

Samples are stored planar as ``(channels, height, width)`` float64 arrays in
``[0, 1]``. Every resizer is separable and expressed as a pair of 1-D
interpolation matrices, so ``resize`` is linear in the image and its adjoint
is available for free (the network's global-residual path uses it).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError


class ImageFormatError(ValueError):
    """Raised for unreadable, truncated or unsupported image files."""


class ColorSpace(str, enum.Enum):
    RGB = "RGB"
    YCBCR = "YCbCr"
    GRAY_Y = "GrayY"


class ResizeMethod(str, enum.Enum):
    NEAREST = "nearest"
    LINEAR = "linear"
    CUBIC = "cubic"
    AREA = "area"


@dataclass(frozen=True)
class Image:
    """Immutable planar raster with a colour-space tag.

    ``data`` has shape ``(channels, height, width)``; values are clamped to
    ``[0, 1]`` on construction and the array is made read-only.
    """

    data: np.ndarray
    colorspace: ColorSpace = ColorSpace.GRAY_Y

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"expected (1|3, h, w) samples, got shape {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError("image dimensions must be positive")
        cs = ColorSpace(self.colorspace)
        if (cs is ColorSpace.GRAY_Y) != (arr.shape[0] == 1):
            raise ValueError(f"colorspace {cs.value} inconsistent with {arr.shape[0]} channels")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image samples must be finite")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "colorspace", cs)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """The single plane of a GrayY image as a 2-D array."""
        if self.channels != 1:
            raise ValueError("plane is only defined for single-channel images")
        return self.data[0]

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.colorspace == other.colorspace and np.array_equal(self.data, other.data)

    __hash__ = None


def gray(plane) -> Image:
    """Wrap a 2-D array as a GrayY image."""
    return Image(np.asarray(plane, dtype=np.float64)[None], ColorSpace.GRAY_Y)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

_SIXTEEN_BIT_MODES = {"I;16", "I;16B", "I;16L", "I;16N", "I"}


def load_image(path) -> Image:
    """Read a PNG or binary PGM/PPM file as an RGB or GrayY image."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)[None] / 255.0
                return Image(arr, ColorSpace.GRAY_Y)
            if mode in _SIXTEEN_BIT_MODES:
                arr = np.asarray(im, dtype=np.float64)
                if arr.max(initial=0) > 65535:
                    raise ImageFormatError(f"{path}: sample depth above 16 bits")
                return Image(arr[None] / 65535.0, ColorSpace.GRAY_Y)
            if mode in ("RGB", "RGBA", "P", "PA", "CMYK", "YCbCr"):
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                return Image(arr.transpose(2, 0, 1), ColorSpace.RGB)
    except (OSError, SyntaxError, ValueError, UnidentifiedImageError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageFormatError(f"{path}: {exc}") from exc
    raise ImageFormatError(f"{path}: unsupported pixel mode {mode!r}")


def save_image(img: Image, path) -> None:
    """Write an 8-bit PNG, PGM or PPM (chosen by the file suffix).

    YCbCr images are converted to RGB before writing.
    """
    if img.colorspace is ColorSpace.YCBCR:
        img = ycbcr_to_rgb(img)
    q = np.rint(img.data * 255.0).astype(np.uint8)
    if img.channels == 1:
        pil = PILImage.fromarray(q[0], mode="L")
    else:
        pil = PILImage.fromarray(q.transpose(1, 2, 0), mode="RGB")
    path = Path(path)
    fmt = {".png": "PNG", ".pgm": "PPM", ".ppm": "PPM", ".pnm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"unsupported output suffix {path.suffix!r}")
    pil.save(path, format=fmt)


# ---------------------------------------------------------------------------
# Colour
# ---------------------------------------------------------------------------

# BT.601 full range (JFIF), chroma offset 0.5
_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168735892, -0.331264108, 0.5],
        [0.5, -0.418687589, -0.081312411],
    ]
)
_YCC2RGB = np.linalg.inv(_RGB2YCC)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_ycbcr(img: Image) -> Image:
    if img.colorspace is not ColorSpace.RGB:
        raise ValueError(f"expected RGB input, got {img.colorspace.value}")
    ycc = np.tensordot(_RGB2YCC, img.data, axes=1) + _CHROMA_OFFSET[:, None, None]
    return Image(ycc, ColorSpace.YCBCR)


def ycbcr_to_rgb(img: Image) -> Image:
    if img.colorspace is not ColorSpace.YCBCR:
        raise ValueError(f"expected YCbCr input, got {img.colorspace.value}")
    rgb = np.tensordot(_YCC2RGB, img.data - _CHROMA_OFFSET[:, None, None], axes=1)
    return Image(rgb, ColorSpace.RGB)


def extract_y(img: Image) -> Image:
    if img.colorspace is not ColorSpace.YCBCR:
        raise ValueError(f"expected YCbCr input, got {img.colorspace.value}")
    return Image(img.data[:1], ColorSpace.GRAY_Y)


def to_luma(img: Image) -> Image:
    """GrayY view of any image: passthrough for GrayY, Y plane otherwise."""
    if img.colorspace is ColorSpace.GRAY_Y:
        return img
    if img.colorspace is ColorSpace.RGB:
        img = rgb_to_ycbcr(img)
    return extract_y(img)


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------


def _cubic_weight(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def resize_matrix(n_in: int, n_out: int, method: ResizeMethod) -> np.ndarray:
    """1-D interpolation matrix of shape ``(n_out, n_in)``; rows sum to one.

    Pixel centres are aligned (``src = (dst + 0.5) * n_in / n_out - 0.5``) and
    out-of-range taps are clamped to the border sample.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("resize dimensions must be >= 1")
    method = ResizeMethod(method)
    scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)

    if method is ResizeMethod.NEAREST:
        src = np.minimum(np.floor((rows + 0.5) * scale).astype(int), n_in - 1)
        m[rows, src] = 1.0
        return m

    if method is ResizeMethod.AREA:
        lo = rows * scale
        hi = (rows + 1) * scale
        for j in range(n_in):
            m[:, j] = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
        return m / scale

    src = (rows + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    if method is ResizeMethod.LINEAR:
        taps = [(0, 1.0 - frac), (1, frac)]
    else:
        taps = [(k, _cubic_weight(frac - k)) for k in (-1, 0, 1, 2)]
    for off, wgt in taps:
        np.add.at(m, (rows, np.clip(base + off, 0, n_in - 1)), wgt)
    return m


def resize_array(arr: np.ndarray, out_w: int, out_h: int, method: ResizeMethod) -> np.ndarray:
    """Resize the last two axes of ``arr``."""
    h, w = arr.shape[-2:]
    ry = resize_matrix(h, out_h, method)
    rx = resize_matrix(w, out_w, method)
    return ry @ arr @ rx.T


def resize(img: Image, out_w: int, out_h: int, method: ResizeMethod) -> Image:
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    return Image(resize_array(img.data, out_w, out_h, method), img.colorspace)


def degrade(hr: Image, scale: int) -> Image:
    """Bicubic downscale by an integer factor (the training degradation)."""
    if scale not in (2, 3, 4):
        raise ValueError(f"scale must be 2, 3 or 4, got {scale}")
    if hr.width % scale or hr.height % scale:
        raise ValueError(f"{hr.width}x{hr.height} image not divisible by scale {scale}")
    return resize(hr, hr.width // scale, hr.height // scale, ResizeMethod.CUBIC)


def crop(img: Image, x: int, y: int, w: int, h: int) -> Image:
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > img.width or y + h > img.height:
        raise ValueError(f"crop ({x},{y},{w},{h}) outside {img.width}x{img.height} image")
    return Image(img.data[:, y : y + h, x : x + w], img.colorspace)


def mod_crop(img: Image, scale: int) -> Image:
    """Trim right/bottom edges so both dimensions divide ``scale``."""
    return crop(img, 0, 0, img.width - img.width % scale, img.height - img.height % scale)


# ---------------------------------------------------------------------------
# Patches
# ---------------------------------------------------------------------------


@dataclass
class PatchSet:
    patch_size: int
    stride: int
    scale: int
    patches: list = field(default_factory=list)
    source_id: str = ""

    def __len__(self):
        return len(self.patches)

    def arrays(self, dtype=np.float32):
        """Stack pairs into ``(N, 1, p/s, p/s)`` LR and ``(N, 1, p, p)`` HR arrays."""
        if not self.patches:
            lr = self.patch_size // self.scale
            return (np.zeros((0, 1, lr, lr), dtype), np.zeros((0, 1, self.patch_size, self.patch_size), dtype))
        lr = np.stack([p[0].data for p in self.patches]).astype(dtype)
        hr = np.stack([p[1].data for p in self.patches]).astype(dtype)
        return lr, hr

    def extend(self, other: "PatchSet") -> None:
        self.patches.extend(other.patches)


def extract_patches(hr: Image, patch_size: int, stride: int | None = None, scale: int = 2,
                    source_id: str = "") -> PatchSet:
    """Raster-order tiling of ``hr`` into aligned (LR, HR) pairs."""
    if hr.colorspace is not ColorSpace.GRAY_Y:
        raise ValueError("patch extraction expects a GrayY image")
    if patch_size % scale:
        raise ValueError(f"patch size {patch_size} not divisible by scale {scale}")
    stride = stride or patch_size // 2
    out = PatchSet(patch_size, stride, scale, source_id=source_id)
    if patch_size > hr.height or patch_size > hr.width:
        return out
    for y in range(0, hr.height - patch_size + 1, stride):
        for x in range(0, hr.width - patch_size + 1, stride):
            hp = crop(hr, x, y, patch_size, patch_size)
            out.patches.append((degrade(hp, scale), hp))
    return out


# ---------------------------------------------------------------------------
# Dihedral self-ensemble
# ---------------------------------------------------------------------------


def dihedral(arr: np.ndarray, index: int) -> np.ndarray:
    """Apply dihedral transform ``index`` (0..7) to the last two axes.

    ``index % 4`` quarter turns, followed by a left-right flip when
    ``index >= 4``. Index 0 is the identity.
    """
    out = np.rot90(arr, index % 4, axes=(-2, -1))
    if index >= 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def dihedral_inverse(arr: np.ndarray, index: int) -> np.ndarray:
    out = np.flip(arr, axis=-1) if index >= 4 else arr
    return np.ascontiguousarray(np.rot90(out, -(index % 4), axes=(-2, -1)))


def self_ensemble(img: Image) -> list:
    if img.colorspace is not ColorSpace.GRAY_Y:
        raise ValueError("self-ensemble expects a GrayY image")
    return [Image(dihedral(img.data, i), img.colorspace) for i in range(8)]


def self_ensemble_inverse(imgs, index: int) -> Image:
    """Undo transform ``index``. ``imgs`` may be the full list or one image."""
    img = imgs[index] if isinstance(imgs, (list, tuple)) else imgs
    return Image(dihedral_inverse(img.data, index), img.colorspace)
