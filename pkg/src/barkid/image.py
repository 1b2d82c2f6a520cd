"""Image representation and preprocessing: grayscale conversion, Gaussian
blur, bilinear downsampling, gradient fields and PNG/PGM/PPM file IO.

Pixels are stored as 8-bit in [0, 255]; all arithmetic happens on float
copies.  Border handling is replication everywhere (blur, gradients,
out-of-bounds sampling), so independent oracles can reproduce results
exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .errors import FormatError, ParameterError


class Image:
    """Immutable 8-bit image, grayscale (h, w) or RGB (h, w, 3)."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.dtype != np.uint8:
            raise ParameterError("image data must be uint8")
        if arr.ndim == 2:
            pass
        elif arr.ndim == 3 and arr.shape[2] in (1, 3):
            if arr.shape[2] == 1:
                arr = arr[:, :, 0]
        else:
            raise ParameterError(f"unsupported image shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ParameterError("image must be at least 1x1")
        arr = arr.copy()
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def height(self) -> int:
        return self._data.shape[0]

    @property
    def width(self) -> int:
        return self._data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self._data.ndim == 2 else self._data.shape[2]

    def as_float(self) -> np.ndarray:
        """Float64 copy of the pixel values (still in [0, 255])."""
        return self._data.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self._data.shape == other._data.shape and np.array_equal(
            self._data, other._data
        )

    def __repr__(self):
        return f"Image({self.width}x{self.height}x{self.channels})"


@dataclass(frozen=True)
class GradientField:
    """Per-pixel gradient magnitude and orientation (radians in [0, 2pi))."""

    magnitude: np.ndarray
    orientation: np.ndarray


def to_grayscale(img: Image) -> Image:
    """Luminance conversion round(0.299 R + 0.587 G + 0.114 B).

    One-channel images are returned unchanged.
    """
    if img.channels == 1:
        return img
    f = img.as_float()
    lum = 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]
    return Image(np.clip(np.rint(lum), 0, 255).astype(np.uint8))


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian with radius ceil(3*sigma)."""
    radius = int(np.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur_f(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur on a float array, replicated borders."""
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    if sigma == 0:
        return arr
    k = gaussian_kernel1d(sigma)
    out = convolve1d(arr, k, axis=0, mode="nearest")
    out = convolve1d(out, k, axis=1, mode="nearest")
    return out


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Gaussian blur of an image; sigma == 0 returns the input unchanged."""
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    if sigma == 0:
        return img
    f = img.as_float()
    if img.channels == 1:
        out = gaussian_blur_f(f, sigma)
    else:
        out = np.stack(
            [gaussian_blur_f(f[:, :, c], sigma) for c in range(3)], axis=2
        )
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def _bilinear_sample(plane: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a float plane at fractional coordinates, clamped to borders."""
    h, w = plane.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
    bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def downsample(img: Image, phi: float) -> Image:
    """Bilinear downsampling by factor phi >= 1; phi == 1 is the identity."""
    if phi < 1:
        raise ParameterError("phi must be >= 1")
    if phi == 1:
        return img
    out_w = max(1, int(round(img.width / phi)))
    out_h = max(1, int(round(img.height / phi)))
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * phi - 0.5
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * phi - 0.5
    gx, gy = np.meshgrid(xs, ys)
    f = img.as_float()
    if img.channels == 1:
        out = _bilinear_sample(f, gx, gy)
        return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))
    planes = [_bilinear_sample(f[:, :, c], gx, gy) for c in range(3)]
    out = np.stack(planes, axis=2)
    return Image(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def gradients_f(arr: np.ndarray) -> GradientField:
    """Central-difference gradients of a float plane with replicated borders."""
    padded = np.pad(arr, 1, mode="edge")
    dx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    dy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    mag = np.sqrt(dx * dx + dy * dy)
    ori = np.mod(np.arctan2(dy, dx), 2.0 * np.pi)
    return GradientField(magnitude=mag, orientation=ori)


def gradients(img: Image) -> GradientField:
    """Gradient field of a grayscale image."""
    if img.channels != 1:
        raise ParameterError("gradients requires a grayscale image")
    return gradients_f(img.as_float())


# ---------------------------------------------------------------------------
# File IO: PNG (via Pillow), binary PGM (P5) / PPM (P6).  Anything else is
# rejected.
# ---------------------------------------------------------------------------

_PNG_EXT = {".png"}
_PNM_EXT = {".pgm", ".ppm"}


def read_image(path: str) -> Image:
    ext = os.path.splitext(path)[1].lower()
    if ext in _PNG_EXT:
        from PIL import Image as PILImage

        with PILImage.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB") if im.mode in ("RGBA", "P") else im.convert("L")
            return Image(np.asarray(im))
    if ext in _PNM_EXT:
        return _read_pnm(path)
    raise FormatError(f"unsupported image format: {path!r}")


def write_image(img: Image, path: str) -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext in _PNG_EXT:
        from PIL import Image as PILImage

        PILImage.fromarray(img.data).save(path, format="PNG")
        return
    if ext == ".pgm":
        if img.channels != 1:
            raise FormatError("PGM requires a grayscale image")
        _write_pnm(img, path, b"P5")
        return
    if ext == ".ppm":
        if img.channels != 3:
            raise FormatError("PPM requires an RGB image")
        _write_pnm(img, path, b"P6")
        return
    raise FormatError(f"unsupported image format: {path!r}")


def _read_pnm(path: str) -> Image:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError(f"truncated PNM header: {path!r}")
        tokens.append(raw[start:i])
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError("only maxval 255 PNM files are supported")
    i += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    body = raw[i : i + need]
    if len(body) != need:
        raise FormatError(f"truncated PNM body: {path!r}")
    arr = np.frombuffer(body, dtype=np.uint8)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return Image(arr.reshape(shape))


def _write_pnm(img: Image, path: str, magic: bytes) -> None:
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.data.tobytes())
