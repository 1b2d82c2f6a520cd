"""Multi-scale difference-of-Gaussians keypoint detector.

Pipeline: grayscale -> downsample(phi) -> optional pre-blur -> Gaussian
scale space -> DoG extrema (26-neighbor) with contrast and edge-ratio
tests -> dominant-gradient orientation assignment -> response-ranked cap
at gamma keypoints.  Returned coordinates live in the downsized frame;
`to_original_coords` maps back by multiplying by phi.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import maximum_filter, minimum_filter

from . import image as im
from .errors import ParameterError

BASE_SIGMA = 1.6
ASSUMED_BLUR = 0.5


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    response: float


@dataclass(frozen=True)
class DetectorConfig:
    gamma: int = 500
    phi: float = 2.0
    sigma_blur: float = 0.0
    octaves: int = 4
    scales_per_octave: int = 3
    contrast_threshold: float = 0.03
    edge_ratio_threshold: float = 10.0

    def validate(self) -> None:
        if self.gamma < 1:
            raise ParameterError("gamma must be >= 1")
        if self.phi < 1:
            raise ParameterError("phi must be >= 1")
        if self.sigma_blur < 0:
            raise ParameterError("sigma_blur must be >= 0")
        if self.octaves < 1 or self.scales_per_octave < 1:
            raise ParameterError("octaves and scales_per_octave must be >= 1")


def build_scale_space(base: np.ndarray, cfg: DetectorConfig):
    """Gaussian pyramid: per octave, scales_per_octave + 3 levels.

    Level sigmas within an octave are BASE_SIGMA * k**i with
    k = 2**(1/scales_per_octave).  The next octave starts from the level
    whose blur is exactly twice the octave base, subsampled by 2.
    """
    s = cfg.scales_per_octave
    k = 2.0 ** (1.0 / s)
    sigmas = [BASE_SIGMA * k**i for i in range(s + 3)]
    # incremental blurs between consecutive levels
    increments = [
        float(np.sqrt(sigmas[i] ** 2 - sigmas[i - 1] ** 2))
        for i in range(1, len(sigmas))
    ]

    first = im.gaussian_blur_f(
        base, float(np.sqrt(max(BASE_SIGMA**2 - ASSUMED_BLUR**2, 0.01)))
    )
    octaves = []
    current = first
    for _ in range(cfg.octaves):
        levels = [current]
        for inc in increments:
            levels.append(im.gaussian_blur_f(levels[-1], inc))
        octaves.append(levels)
        nxt = levels[s]  # blur = 2 * octave base
        if nxt.shape[0] < 6 or nxt.shape[1] < 6:
            break
        current = nxt[::2, ::2]
    return octaves, sigmas


def _edge_mask(dog: np.ndarray, r: float) -> np.ndarray:
    """Hessian edge-ratio test on a single DoG level (True = keep)."""
    p = np.pad(dog, 1, mode="edge")
    dxx = p[1:-1, 2:] - 2 * dog + p[1:-1, :-2]
    dyy = p[2:, 1:-1] - 2 * dog + p[:-2, 1:-1]
    dxy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / 4.0
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    return (det > 0) & (tr * tr * r < (r + 1) ** 2 * det)


def _orientation_histogram(gauss: np.ndarray, x: int, y: int, sigma_rel: float):
    """36-bin gradient-orientation histogram around (x, y)."""
    h, w = gauss.shape
    radius = max(1, int(round(3.0 * 1.5 * sigma_rel)))
    x0, x1 = max(0, x - radius), min(w - 1, x + radius)
    y0, y1 = max(0, y - radius), min(h - 1, y + radius)
    win = gauss[max(0, y0 - 1) : min(h, y1 + 2), max(0, x0 - 1) : min(w, x1 + 2)]
    grad = im.gradients_f(win)
    oy0 = y0 - max(0, y0 - 1)
    ox0 = x0 - max(0, x0 - 1)
    mag = grad.magnitude[oy0 : oy0 + (y1 - y0 + 1), ox0 : ox0 + (x1 - x0 + 1)]
    ori = grad.orientation[oy0 : oy0 + (y1 - y0 + 1), ox0 : ox0 + (x1 - x0 + 1)]
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    r2 = (xs - x) ** 2 + (ys - y) ** 2
    weight = np.exp(-r2 / (2.0 * (1.5 * sigma_rel) ** 2))
    bins = np.minimum((ori / (2 * np.pi) * 36).astype(np.int64), 35)
    hist = np.bincount(bins.ravel(), weights=(mag * weight).ravel(), minlength=36)
    # circular smoothing, twice
    for _ in range(2):
        hist = (np.roll(hist, 1) + hist + np.roll(hist, -1)) / 3.0
    return hist


def _orientation_peaks(hist: np.ndarray) -> list[float]:
    peak = hist.max()
    if peak <= 0:
        return [0.0]
    # isotropic window (no dominant orientation): a flat histogram's
    # ripples are not real peaks; emit one keypoint at the max bin
    if peak < 1.2 * hist.mean():
        b = int(np.argmax(hist))
        left, right = hist[(b - 1) % 36], hist[(b + 1) % 36]
        denom = left - 2 * hist[b] + right
        offset = 0.0 if denom == 0 else 0.5 * (left - right) / denom
        return [float(np.mod((b + 0.5 + offset) * (2 * np.pi / 36), 2 * np.pi))]
    out = []
    for b in range(36):
        left, right = hist[(b - 1) % 36], hist[(b + 1) % 36]
        if hist[b] > left and hist[b] > right and hist[b] >= 0.8 * peak:
            # parabolic interpolation of the peak bin
            denom = left - 2 * hist[b] + right
            offset = 0.0 if denom == 0 else 0.5 * (left - right) / denom
            angle = (b + 0.5 + offset) * (2 * np.pi / 36)
            out.append(float(np.mod(angle, 2 * np.pi)))
    return out or [0.0]


def detect(img: im.Image, cfg: DetectorConfig) -> list[Keypoint]:
    """Detect DoG keypoints; see module docstring for the pipeline."""
    cfg.validate()
    gray = im.to_grayscale(img)
    small = im.downsample(gray, cfg.phi)
    base = small.as_float() / 255.0
    if cfg.sigma_blur > 0:
        base = im.gaussian_blur_f(base, cfg.sigma_blur)
    if base.shape[0] < 8 or base.shape[1] < 8:
        return []

    octaves, sigmas = build_scale_space(base, cfg)
    s = cfg.scales_per_octave
    r = cfg.edge_ratio_threshold
    found: list[Keypoint] = []

    for oct_idx, levels in enumerate(octaves):
        dog = np.stack([levels[i + 1] - levels[i] for i in range(len(levels) - 1)])
        if dog.shape[1] < 3 or dog.shape[2] < 3:
            continue
        maxed = maximum_filter(dog, size=(3, 3, 3), mode="nearest")
        mined = minimum_filter(dog, size=(3, 3, 3), mode="nearest")
        for lev in range(1, dog.shape[0] - 1):
            d = dog[lev]
            is_ext = ((d == maxed[lev]) | (d == mined[lev])) & (
                np.abs(d) >= cfg.contrast_threshold
            )
            is_ext &= _edge_mask(d, r)
            is_ext[0, :] = is_ext[-1, :] = False
            is_ext[:, 0] = is_ext[:, -1] = False
            ys, xs = np.nonzero(is_ext)
            if len(ys) == 0:
                continue
            sigma_rel = sigmas[lev]
            scale = sigma_rel * (2.0**oct_idx)
            gauss = levels[lev]
            for yy, xx in zip(ys.tolist(), xs.tolist()):
                # quadratic sub-pixel refinement in the image plane
                dx = (d[yy, xx + 1] - d[yy, xx - 1]) / 2.0
                dy = (d[yy + 1, xx] - d[yy - 1, xx]) / 2.0
                dxx = d[yy, xx + 1] - 2 * d[yy, xx] + d[yy, xx - 1]
                dyy = d[yy + 1, xx] - 2 * d[yy, xx] + d[yy - 1, xx]
                ox = 0.0 if dxx == 0 else float(np.clip(-dx / dxx, -0.5, 0.5))
                oy = 0.0 if dyy == 0 else float(np.clip(-dy / dyy, -0.5, 0.5))
                px = (xx + ox) * (2.0**oct_idx)
                py = (yy + oy) * (2.0**oct_idx)
                px = min(max(px, 0.0), small.width - 1e-6)
                py = min(max(py, 0.0), small.height - 1e-6)
                hist = _orientation_histogram(gauss, xx, yy, sigma_rel)
                for angle in _orientation_peaks(hist):
                    found.append(
                        Keypoint(
                            x=px,
                            y=py,
                            scale=float(scale),
                            orientation=angle,
                            response=float(abs(d[yy, xx])),
                        )
                    )

    found.sort(key=lambda kp: (-kp.response, kp.y, kp.x))
    return found[: cfg.gamma]


def grid_fallback(img: im.Image, spacing: int) -> list[Keypoint]:
    """Deterministic regular-grid keypoints for degenerate images."""
    if spacing < 8:
        raise ParameterError("spacing must be >= 8")

    def axis_positions(dim: int) -> list[float]:
        if dim < spacing:
            return [dim / 2.0]
        pos, p = [], spacing / 2.0
        while p <= dim - spacing / 2.0:
            pos.append(p)
            p += spacing
        return pos

    return [
        Keypoint(x=x, y=y, scale=spacing / 4.0, orientation=0.0, response=0.0)
        for y in axis_positions(img.height)
        for x in axis_positions(img.width)
    ]


def to_original_coords(kps: list[Keypoint], phi: float) -> list[Keypoint]:
    """Map keypoints from the downsized frame back to original coordinates."""
    return [
        replace(kp, x=kp.x * phi, y=kp.y * phi, scale=kp.scale * phi) for kp in kps
    ]


def _fmt(v: float) -> float:
    return float(f"{v:.6g}")


def keypoints_to_jsonl(kps: list[Keypoint]) -> str:
    """One JSON record per keypoint, 6 significant digits."""
    lines = [
        json.dumps(
            {
                "x": _fmt(kp.x),
                "y": _fmt(kp.y),
                "scale": _fmt(kp.scale),
                "orientation": _fmt(kp.orientation),
                "response": _fmt(kp.response),
            }
        )
        for kp in kps
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def keypoints_from_jsonl(text: str) -> list[Keypoint]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(
            Keypoint(
                x=rec["x"],
                y=rec["y"],
                scale=rec["scale"],
                orientation=rec["orientation"],
                response=rec["response"],
            )
        )
    return out
