import json
import math

import numpy as np
import pytest

from barkid import image as im
from barkid import registration as reg
from barkid.detector import Keypoint
from barkid.errors import EstimationError, ProjectionError, ValidationError
from barkid.evalbench import _bandpass_texture


def random_homography(rng, max_cond=100.0):
    """Well-conditioned random homography: similarity + small projective part."""
    while True:
        angle = rng.uniform(-0.5, 0.5)
        scale = rng.uniform(0.7, 1.4)
        tx, ty = rng.uniform(-20, 20, 2)
        p = rng.uniform(-1e-3, 1e-3, 2)
        h = np.array(
            [
                [scale * math.cos(angle), -scale * math.sin(angle), tx],
                [scale * math.sin(angle), scale * math.cos(angle), ty],
                [p[0], p[1], 1.0],
            ]
        )
        if np.linalg.cond(h) < max_cond:
            return reg.Homography(m=h)


class TestEstimateHomography:
    def test_identity(self):
        pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        h, err = reg.estimate_homography([(p, p) for p in pts])
        assert np.allclose(h.m, np.eye(3), atol=1e-9)
        assert err < 1e-9

    def test_translation(self):
        pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]
        h, _ = reg.estimate_homography([(p, (p[0] + 10, p[1] + 5)) for p in pts])
        expected = np.array([[1, 0, 10], [0, 1, 5], [0, 0, 1]], float)
        assert np.allclose(h.m, expected, atol=1e-9)

    def test_recovers_known_homography(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            true_h = random_homography(rng)
            src = rng.uniform(0, 100, (8, 2))
            dst = reg.project_many(true_h, src)
            h, _ = reg.estimate_homography(
                [(tuple(s), tuple(d)) for s, d in zip(src, dst)]
            )
            assert np.max(np.abs(h.m - true_h.m)) < 1e-6

    def test_too_few_points(self):
        pts = [((0.0, 0.0), (0.0, 0.0))] * 3
        with pytest.raises(EstimationError):
            reg.estimate_homography(pts)

    def test_degenerate_points(self):
        # all source points collinear
        pts = [((float(i), 0.0), (float(i), 1.0)) for i in range(5)]
        with pytest.raises(EstimationError):
            reg.estimate_homography(pts)


class TestProject:
    def test_identity(self):
        h = reg.Homography(m=np.eye(3))
        assert reg.project(h, (3.5, -2.0)) == (3.5, -2.0)

    def test_scale(self):
        h = reg.Homography(m=np.diag([2.0, 2.0, 1.0]))
        assert reg.project(h, (3.0, 4.0)) == (6.0, 8.0)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(1)
        h = random_homography(rng)
        p = (12.3, 45.6)
        q = reg.project(h, p)
        back = reg.project(h.inverse(), q)
        assert abs(back[0] - p[0]) < 1e-9 and abs(back[1] - p[1]) < 1e-9

    def test_point_at_infinity(self):
        h = reg.Homography(
            m=np.array([[1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 1.0]])
        )
        with pytest.raises(ProjectionError):
            reg.project(h, (0.0, 1.0))


def make_manifest(ids, size=256):
    corners = [(0.0, 0.0), (size - 1.0, 0.0), (size - 1.0, size - 1.0), (0.0, size - 1.0)]
    return reg.SurfaceManifest(
        surface_id="s0",
        reference_image_id=ids[0],
        images=[
            reg.ManifestImage(
                image_id=iid,
                path=f"{iid}.png",
                correspondences=[(c, c) for c in corners],
            )
            for iid in ids
        ],
    )


def greedy_oracle(points, min_spacing):
    """O(n^2) reference: points = (response, y, x), greedy by response."""
    ordered = sorted(points, key=lambda t: (-t[0], t[1], t[2]))
    accepted = []
    for resp, y, x in ordered:
        ok = all(
            (x - ax) ** 2 + (y - ay) ** 2 >= min_spacing**2
            for _, ay, ax in accepted
        )
        if ok:
            accepted.append((resp, y, x))
    return accepted


class TestConsolidate:
    def uniform_images(self, ids, size=256):
        img = im.Image(np.zeros((size, size), np.uint8))
        return {iid: img for iid in ids}

    def test_spacing_rule(self):
        ids = ["a", "b"]
        man = make_manifest(ids)
        kps = {
            "a": [Keypoint(x=100, y=100, scale=2, orientation=0, response=2.0)],
            "b": [Keypoint(x=100, y=131, scale=2, orientation=0, response=1.0)],
        }
        aligned = reg.consolidate_keypoints(
            man, kps, self.uniform_images(ids), min_spacing=32
        )
        assert len(aligned.keypoints) == 1
        assert aligned.keypoints[0].response == 2.0

    def test_empty_input(self):
        ids = ["a", "b"]
        man = make_manifest(ids)
        aligned = reg.consolidate_keypoints(
            man, {"a": [], "b": []}, self.uniform_images(ids)
        )
        assert aligned.keypoints == []

    def test_matches_greedy_oracle(self):
        rng = np.random.default_rng(2)
        ids = ["a", "b"]
        man = make_manifest(ids, size=1024)
        kps = {iid: [] for iid in ids}
        points = []
        for _ in range(2000):
            iid = ids[int(rng.integers(2))]
            x, y = rng.uniform(0, 1023, 2)
            resp = float(rng.uniform(0, 1))
            kps[iid].append(
                Keypoint(x=float(x), y=float(y), scale=2, orientation=0, response=resp)
            )
            points.append((resp, float(y), float(x)))
        aligned = reg.consolidate_keypoints(
            man, kps, self.uniform_images(ids, 1024), min_spacing=32
        )
        expected = greedy_oracle(points, 32)
        got = [(kp.response, kp.y, kp.x) for kp in aligned.keypoints]
        assert len(got) == len(expected)
        for (er, ey, ex), (gr, gy, gx) in zip(expected, got):
            assert er == gr
            assert abs(ey - gy) < 1e-6 and abs(ex - gx) < 1e-6

    def test_pairwise_spacing_invariant(self):
        rng = np.random.default_rng(3)
        ids = ["a", "b"]
        man = make_manifest(ids, size=512)
        kps = {
            iid: [
                Keypoint(
                    x=float(rng.uniform(0, 511)),
                    y=float(rng.uniform(0, 511)),
                    scale=2,
                    orientation=0,
                    response=float(rng.uniform(0, 1)),
                )
                for _ in range(500)
            ]
            for iid in ids
        }
        aligned = reg.consolidate_keypoints(
            man, kps, self.uniform_images(ids, 512), min_spacing=32
        )
        pts = np.asarray([[kp.x, kp.y] for kp in aligned.keypoints])
        d2 = ((pts[:, None] - pts[None, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        assert d2.min() >= 32.0**2 - 1e-9

    def test_shuffle_invariance(self):
        rng = np.random.default_rng(4)
        ids = ["a", "b"]
        man = make_manifest(ids, size=512)
        base = [
            Keypoint(
                x=float(rng.uniform(0, 511)),
                y=float(rng.uniform(0, 511)),
                scale=2,
                orientation=0,
                response=float(rng.uniform(0, 1)),
            )
            for _ in range(300)
        ]
        images = self.uniform_images(ids, 512)
        a1 = reg.consolidate_keypoints(
            man, {"a": base, "b": []}, images, min_spacing=32
        )
        shuffled = list(base)
        rng.shuffle(shuffled)
        a2 = reg.consolidate_keypoints(
            man, {"a": shuffled, "b": []}, images, min_spacing=32
        )
        assert [(k.x, k.y) for k in a1.keypoints] == [
            (k.x, k.y) for k in a2.keypoints
        ]

    def test_bad_manifest(self):
        with pytest.raises(ValidationError):
            make_manifest(["only"]).validate()


class TestPatchDataset:
    def build_synthetic_surface(self, tmp_path, n_views=4, size=320, seed=5):
        rng = np.random.default_rng(seed)
        tex = _bandpass_texture(rng, size)
        ids = [f"v{i}" for i in range(n_views)]
        images = {
            iid: im.Image(np.clip(np.rint(tex), 0, 255).astype(np.uint8))
            for iid in ids
        }
        man = make_manifest(ids, size=size)
        return man, images

    def test_pairing_rule_and_counts(self, tmp_path):
        man, images = self.build_synthetic_surface(tmp_path)
        kps = {
            "v0": [
                Keypoint(x=160, y=160, scale=2, orientation=0, response=1.0),
                # too close to the border for a 64x64 patch in any image
                Keypoint(x=10, y=10, scale=2, orientation=0, response=0.9),
            ]
        }
        aligned = reg.consolidate_keypoints(man, kps, images, min_spacing=32)
        rows = reg.build_patch_dataset(man, aligned, images, str(tmp_path / "out"))
        # border keypoint present in 0 images -> dropped; center in all 4
        assert len(rows) == 4
        assert {r["image_id"] for r in rows} == set(images)
        assert len({r["keypoint_id"] for r in rows}) == 1

    def test_patch_ncc_consistency(self, tmp_path):
        # all views identical (identity warps): patches of one keypoint match
        man, images = self.build_synthetic_surface(tmp_path)
        kps = {
            "v0": [Keypoint(x=150, y=170, scale=2, orientation=0, response=1.0)]
        }
        aligned = reg.consolidate_keypoints(man, kps, images, min_spacing=32)
        rows = reg.build_patch_dataset(man, aligned, images, str(tmp_path / "out"))
        patches = [im.read_image(r["path"]).as_float() for r in rows]
        for a in patches:
            for b in patches:
                an = (a - a.mean()) / (a.std() + 1e-9)
                bn = (b - b.mean()) / (b.std() + 1e-9)
                ncc = float((an * bn).mean())
                assert ncc >= 0.7

    def test_manifest_jsonl(self, tmp_path):
        man, images = self.build_synthetic_surface(tmp_path)
        kps = {
            "v0": [Keypoint(x=150, y=170, scale=2, orientation=0, response=1.0)]
        }
        aligned = reg.consolidate_keypoints(man, kps, images, min_spacing=32)
        rows = reg.build_patch_dataset(man, aligned, images, str(tmp_path / "out"))
        path = str(tmp_path / "manifest.jsonl")
        reg.write_patch_manifest(rows, path)
        loaded = [json.loads(line) for line in open(path)]
        assert loaded == rows
