"""128-d local descriptors: a built-in gradient-histogram descriptor,
fixed 64x64 patch cropping for learned descriptors, and the binary
"BKD1" descriptor-file format used to ingest externally computed
descriptors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import image as im
from .detector import Keypoint
from .errors import ExtractionError, FormatError, ValidationError

DESCRIPTOR_DIM = 128
PATCH_SIZE = 64
_BASE_SCALE = 1.6
_CLAMP = 0.2

BKD1_MAGIC = b"BKD1"


@dataclass(frozen=True)
class Descriptor:
    """Unit-norm 128-vector, or all-zero with the degenerate flag set."""

    values: np.ndarray  # float32, shape (128,)
    degenerate: bool = False


@dataclass(frozen=True)
class Patch:
    pixels: np.ndarray  # uint8, 64x64 or 64x64x3
    source_keypoint: Keypoint
    source_image_id: str


def _normalize(vec: np.ndarray) -> Descriptor:
    norm = float(np.linalg.norm(vec.astype(np.float64)))
    if norm == 0.0:
        return Descriptor(values=np.zeros(DESCRIPTOR_DIM, np.float32), degenerate=True)
    v = vec.astype(np.float64) / norm
    return Descriptor(values=v.astype(np.float32), degenerate=False)


def describe_from_gradients(grad: im.GradientField, kp: Keypoint) -> Descriptor:
    """4x4 spatial cells x 8 orientation bins over a window of
    16 * (scale / 1.6) pixels rotated to the keypoint orientation.

    Trilinear binning, Gaussian weighting with sigma = half window,
    0.2 bin clamping, final l2 normalization.  Windows reaching past
    the image reuse border pixels (coordinates are clamped).
    """
    h, w = grad.magnitude.shape
    window = 16.0 * (kp.scale / _BASE_SCALE)
    cell = window / 4.0
    radius = int(np.ceil(window / 2.0 * np.sqrt(2.0)))
    cx, cy = int(round(kp.x)), int(round(kp.y))

    ys, xs = np.mgrid[cy - radius : cy + radius + 1, cx - radius : cx + radius + 1]
    cys = np.clip(ys, 0, h - 1)
    cxs = np.clip(xs, 0, w - 1)
    mag = grad.magnitude[cys, cxs].ravel()
    ori = grad.orientation[cys, cxs].ravel()
    dx = (xs - kp.x).ravel()
    dy = (ys - kp.y).ravel()

    cos_t, sin_t = np.cos(kp.orientation), np.sin(kp.orientation)
    u = (cos_t * dx + sin_t * dy) / cell
    v = (-sin_t * dx + cos_t * dy) / cell
    cbin = u + 1.5
    rbin = v + 1.5
    keep = (cbin > -1) & (cbin < 4) & (rbin > -1) & (rbin < 4) & (mag > 0)
    if not np.any(keep):
        return Descriptor(values=np.zeros(DESCRIPTOR_DIM, np.float32), degenerate=True)
    cbin, rbin = cbin[keep], rbin[keep]
    sigma_w = window / 2.0
    weight = mag[keep] * np.exp(
        -(dx[keep] ** 2 + dy[keep] ** 2) / (2.0 * sigma_w * sigma_w)
    )
    obin = np.mod(ori[keep] - kp.orientation, 2 * np.pi) / (2 * np.pi) * 8.0

    hist = np.zeros((6, 6, 8), dtype=np.float64)  # 1-cell spatial margin
    r0 = np.floor(rbin).astype(np.int64)
    c0 = np.floor(cbin).astype(np.int64)
    o0 = np.floor(obin).astype(np.int64)
    fr = rbin - r0
    fc = cbin - c0
    fo = obin - o0
    for dr in (0, 1):
        wr = weight * (fr if dr else (1 - fr))
        for dc in (0, 1):
            wc = wr * (fc if dc else (1 - fc))
            for do in (0, 1):
                wo = wc * (fo if do else (1 - fo))
                np.add.at(
                    hist,
                    (r0 + dr + 1, c0 + dc + 1, (o0 + do) % 8),
                    wo,
                )
    vec = hist[1:5, 1:5, :].ravel()
    norm = np.linalg.norm(vec)
    if norm == 0:
        return Descriptor(values=np.zeros(DESCRIPTOR_DIM, np.float32), degenerate=True)
    vec = np.minimum(vec, _CLAMP * norm)
    return _normalize(vec)


def describe_builtin(img_blurred: im.Image, kp: Keypoint) -> Descriptor:
    """Built-in descriptor for one keypoint of a (blurred) grayscale image."""
    gray = im.to_grayscale(img_blurred)
    grad = im.gradients_f(gray.as_float() / 255.0)
    return describe_from_gradients(grad, kp)


def describe_builtin_all(
    img_blurred: im.Image, kps: list[Keypoint]
) -> list[Descriptor]:
    """Batch variant sharing one gradient computation."""
    gray = im.to_grayscale(img_blurred)
    grad = im.gradients_f(gray.as_float() / 255.0)
    return [describe_from_gradients(grad, kp) for kp in kps]


def crop_patch(img_unblurred: im.Image, kp: Keypoint, image_id: str = "") -> Patch:
    """Axis-aligned 64x64 crop centered at the rounded keypoint position.

    Orientation and scale are deliberately not compensated; windows past
    the border replicate edge pixels.
    """
    cx, cy = int(round(kp.x)), int(round(kp.y))
    half = PATCH_SIZE // 2
    data = img_unblurred.data
    ys = np.clip(np.arange(cy - half, cy + half), 0, img_unblurred.height - 1)
    xs = np.clip(np.arange(cx - half, cx + half), 0, img_unblurred.width - 1)
    pixels = data[np.ix_(ys, xs)] if data.ndim == 2 else data[np.ix_(ys, xs)]
    return Patch(pixels=pixels.copy(), source_keypoint=kp, source_image_id=image_id)


def patch_fits(img: im.Image, x: float, y: float) -> bool:
    """True iff the full 64x64 window fits without border replication."""
    cx, cy = int(round(x)), int(round(y))
    half = PATCH_SIZE // 2
    return (
        cx - half >= 0
        and cy - half >= 0
        and cx + half <= img.width
        and cy + half <= img.height
    )


# ---------------------------------------------------------------------------
# Descriptor providers
# ---------------------------------------------------------------------------


class BuiltinProvider:
    """Marker object selecting the built-in descriptor path."""

    kind = "builtin_hog"


class ExternalProvider:
    """Descriptors resolved from a (image_id, keypoint_index) table.

    Misses fail loudly with ExtractionError.
    """

    kind = "external_file"

    def __init__(self, table: dict[tuple[str, int], Descriptor]):
        self._table = dict(table)

    def __len__(self) -> int:
        return len(self._table)

    def get(self, image_id: str, keypoint_index: int) -> Descriptor:
        key = (image_id, keypoint_index)
        if key not in self._table:
            raise ExtractionError(
                f"external provider has no descriptor for image {image_id!r} "
                f"keypoint {keypoint_index}"
            )
        return self._table[key]


def write_descriptor_file(
    path: str, records: list[tuple[str, int, np.ndarray]]
) -> None:
    """Write BKD1: magic, version u32, dim u32, count u64, then records
    (image_id u16-len + utf8, keypoint index u32, 128 x f32), little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(BKD1_MAGIC)
        fh.write(struct.pack("<IIQ", 1, DESCRIPTOR_DIM, len(records)))
        for image_id, kp_index, values in records:
            ident = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<I", kp_index))
            fh.write(np.asarray(values, dtype="<f4").tobytes())


def load_descriptor_file(path: str) -> ExternalProvider:
    """Load a BKD1 file, validating the unit-norm invariant per record."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != BKD1_MAGIC:
        raise FormatError(f"bad magic in descriptor file {path!r}")
    version, dim, count = struct.unpack_from("<IIQ", raw, 4)
    if version != 1:
        raise FormatError(f"unsupported descriptor file version {version}")
    if dim != DESCRIPTOR_DIM:
        raise FormatError(f"descriptor dim {dim} != {DESCRIPTOR_DIM}")
    off = 20
    table: dict[tuple[str, int], Descriptor] = {}
    for rec in range(count):
        if off + 2 > len(raw):
            raise FormatError(f"truncated descriptor file at record {rec}")
        (id_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        image_id = raw[off : off + id_len].decode("utf-8")
        off += id_len
        (kp_index,) = struct.unpack_from("<I", raw, off)
        off += 4
        end = off + 4 * DESCRIPTOR_DIM
        if end > len(raw):
            raise FormatError(f"truncated descriptor file at record {rec}")
        values = np.frombuffer(raw[off:end], dtype="<f4").copy()
        off = end
        norm = float(np.linalg.norm(values.astype(np.float64)))
        if norm == 0.0:
            table[(image_id, kp_index)] = Descriptor(values=values, degenerate=True)
        elif abs(norm - 1.0) > 1e-3:
            raise ValidationError(
                f"record {rec} (image {image_id!r}, keypoint {kp_index}) "
                f"has norm {norm:.6f}, expected 1"
            )
        else:
            table[(image_id, kp_index)] = Descriptor(values=values, degenerate=False)
    return ExternalProvider(table)
