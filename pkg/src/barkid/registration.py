"""Homography estimation from fiducial correspondences, keypoint
projection, cross-image keypoint consolidation with a minimum-spacing
rule, and keypoint-aligned patch-dataset construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import image as im
from .descriptor import crop_patch, patch_fits
from .detector import Keypoint
from .errors import EstimationError, ProjectionError, ValidationError


@dataclass(frozen=True)
class Homography:
    m: np.ndarray  # 3x3, m[2,2] == 1 when nonzero

    def inverse(self) -> "Homography":
        inv = np.linalg.inv(self.m)
        if inv[2, 2] != 0:
            inv = inv / inv[2, 2]
        return Homography(m=inv)


@dataclass(frozen=True)
class ManifestImage:
    image_id: str
    path: str
    # list of (image_point, reference_point) pairs
    correspondences: list[tuple[tuple[float, float], tuple[float, float]]]


@dataclass(frozen=True)
class SurfaceManifest:
    surface_id: str
    reference_image_id: str
    images: list[ManifestImage]

    def validate(self) -> None:
        if len(self.images) < 2:
            raise ValidationError(
                f"surface {self.surface_id!r} needs >= 2 images"
            )
        ids = [m.image_id for m in self.images]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate image_ids in {self.surface_id!r}")
        for m in self.images:
            if len(m.correspondences) < 4:
                raise ValidationError(
                    f"image {m.image_id!r} needs >= 4 correspondences"
                )

    def to_json(self) -> dict:
        return {
            "surface_id": self.surface_id,
            "reference_image_id": self.reference_image_id,
            "images": [
                {
                    "image_id": m.image_id,
                    "path": m.path,
                    "correspondences": [
                        [list(p), list(r)] for p, r in m.correspondences
                    ],
                }
                for m in self.images
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "SurfaceManifest":
        manifest = SurfaceManifest(
            surface_id=obj["surface_id"],
            reference_image_id=obj["reference_image_id"],
            images=[
                ManifestImage(
                    image_id=m["image_id"],
                    path=m["path"],
                    correspondences=[
                        (tuple(c[0]), tuple(c[1])) for c in m["correspondences"]
                    ],
                )
                for m in obj["images"]
            ],
        )
        manifest.validate()
        return manifest


@dataclass
class AlignedKeypointSet:
    """Consolidated keypoints in the reference frame and their projected
    positions per image (None when the 64x64 patch would not fit)."""

    surface_id: str
    keypoints: list[Keypoint]  # positions in reference-frame coordinates
    # positions[kp_index][image_id] -> (x, y) or None
    positions: list[dict[str, tuple[float, float] | None]] = field(
        default_factory=list
    )


def estimate_homography(
    correspondences: list[tuple[tuple[float, float], tuple[float, float]]],
) -> tuple[Homography, float]:
    """Normalized DLT.  Returns (homography, mean reprojection error).

    Maps source points (first of each pair) onto destination points.
    """
    if len(correspondences) < 4:
        raise EstimationError("need >= 4 correspondences")
    src = np.asarray([c[0] for c in correspondences], dtype=np.float64)
    dst = np.asarray([c[1] for c in correspondences], dtype=np.float64)

    def normalizer(pts):
        centroid = pts.mean(axis=0)
        d = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
        if d < 1e-12:
            raise EstimationError("degenerate point configuration")
        s = np.sqrt(2.0) / d
        t = np.array(
            [[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1]]
        )
        return t

    t_src = normalizer(src)
    t_dst = normalizer(dst)
    sh = (t_src @ np.column_stack([src, np.ones(len(src))]).T).T
    dh = (t_dst @ np.column_stack([dst, np.ones(len(dst))]).T).T

    rows = []
    for (sx, sy, _), (dx, dy, _) in zip(sh, dh):
        rows.append([-sx, -sy, -1, 0, 0, 0, dx * sx, dx * sy, dx])
        rows.append([0, 0, 0, -sx, -sy, -1, dy * sx, dy * sy, dy])
    a = np.asarray(rows)
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-10:
        raise EstimationError("degenerate correspondence configuration")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(h[2, 2]) < 1e-12:
        raise EstimationError("homography is singular at normalization")
    h = h / h[2, 2]
    scaled = h / np.cbrt(abs(np.linalg.det(h))) if np.linalg.det(h) != 0 else h
    if abs(np.linalg.det(scaled)) < 1e-9:
        raise EstimationError("estimated homography is singular")
    hom = Homography(m=h)
    errs = [
        float(np.hypot(*(np.asarray(project(hom, tuple(p))) - q)))
        for p, q in zip(src, dst)
    ]
    return hom, float(np.mean(errs))


def project(h: Homography, p: tuple[float, float]) -> tuple[float, float]:
    """Apply the homography with perspective division."""
    v = h.m @ np.array([p[0], p[1], 1.0])
    if abs(v[2]) < 1e-12:
        raise ProjectionError(f"point {p} maps to infinity")
    return (float(v[0] / v[2]), float(v[1] / v[2]))


def project_many(h: Homography, pts: np.ndarray) -> np.ndarray:
    """Vectorized projection of an (n, 2) array."""
    ph = np.column_stack([pts, np.ones(len(pts))]) @ h.m.T
    z = ph[:, 2]
    if np.any(np.abs(z) < 1e-12):
        raise ProjectionError("a point maps to infinity")
    return ph[:, :2] / z[:, None]


def consolidate_keypoints(
    manifest: SurfaceManifest,
    per_image_keypoints: dict[str, list[Keypoint]],
    images: dict[str, im.Image],
    min_spacing: float = 32.0,
) -> AlignedKeypointSet:
    """Project all keypoints to the reference frame, greedily keep a
    minimum-spacing subset (descending response, ties by (y, x)), then
    project survivors into every image and mark positions whose 64x64
    patch would not fit as absent.
    """
    manifest.validate()
    homs: dict[str, Homography] = {}
    for mi in manifest.images:
        try:
            homs[mi.image_id], _ = estimate_homography(mi.correspondences)
        except EstimationError as exc:
            raise EstimationError(
                f"homography failed for image {mi.image_id!r}: {exc}"
            ) from exc

    projected: list[tuple[float, float, float]] = []  # (response, ry, rx)
    pts = []
    for mi in manifest.images:
        kps = per_image_keypoints.get(mi.image_id, [])
        if not kps:
            continue
        arr = np.asarray([[kp.x, kp.y] for kp in kps])
        ref = project_many(homs[mi.image_id], arr)
        for kp, (rx, ry) in zip(kps, ref):
            pts.append((kp.response, float(ry), float(rx), kp))

    pts.sort(key=lambda t: (-t[0], t[1], t[2]))
    accepted: list[tuple[float, float, Keypoint]] = []
    acc_xy = np.empty((0, 2))
    for resp, ry, rx, kp in pts:
        if len(accepted) and np.any(
            ((acc_xy[:, 0] - rx) ** 2 + (acc_xy[:, 1] - ry) ** 2)
            < min_spacing * min_spacing
        ):
            continue
        accepted.append((rx, ry, kp))
        acc_xy = np.vstack([acc_xy, [rx, ry]])

    ref_kps = [
        Keypoint(x=rx, y=ry, scale=kp.scale, orientation=kp.orientation,
                 response=kp.response)
        for rx, ry, kp in accepted
    ]
    positions: list[dict[str, tuple[float, float] | None]] = []
    inv = {iid: h.inverse() for iid, h in homs.items()}
    for kp in ref_kps:
        row: dict[str, tuple[float, float] | None] = {}
        for mi in manifest.images:
            x, y = project(inv[mi.image_id], (kp.x, kp.y))
            img = images[mi.image_id]
            row[mi.image_id] = (x, y) if patch_fits(img, x, y) else None
        positions.append(row)
    return AlignedKeypointSet(
        surface_id=manifest.surface_id, keypoints=ref_kps, positions=positions
    )


def build_patch_dataset(
    manifest: SurfaceManifest,
    aligned: AlignedKeypointSet,
    images: dict[str, im.Image],
    out_dir: str,
) -> list[dict]:
    """Write 64x64 patches as PNG files <surface>/<keypoint>/<image>.png
    plus JSONL manifest rows.  Keypoints visible in fewer than 2 images
    are dropped (no positive pair possible).  Returns the manifest rows.
    """
    rows = []
    for kp_idx, (kp, row) in enumerate(zip(aligned.keypoints, aligned.positions)):
        present = {iid: pos for iid, pos in row.items() if pos is not None}
        if len(present) < 2:
            continue
        kp_id = f"kp{kp_idx:05d}"
        kp_dir = os.path.join(out_dir, aligned.surface_id, kp_id)
        os.makedirs(kp_dir, exist_ok=True)
        for image_id, (x, y) in present.items():
            patch = crop_patch(
                images[image_id],
                Keypoint(x=x, y=y, scale=kp.scale, orientation=0.0, response=0.0),
                image_id=image_id,
            )
            path = os.path.join(kp_dir, f"{image_id}.png")
            im.write_image(im.Image(patch.pixels), path)
            rows.append(
                {
                    "surface_id": aligned.surface_id,
                    "keypoint_id": kp_id,
                    "image_id": image_id,
                    "x": x,
                    "y": y,
                    "path": path,
                }
            )
    return rows


def write_patch_manifest(rows: list[dict], path: str) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def homography_to_json(h: Homography) -> list[float]:
    """Row-major 9-float echo for audit files."""
    return [float(v) for v in h.m.ravel()]
