import numpy as np
import pytest

from barkid import descriptor as desc
from barkid import detector as det
from barkid import image as im
from barkid.errors import ExtractionError, FormatError, ValidationError
from barkid.evalbench import _bandpass_texture


def texture_image(seed=0, size=256):
    tex = _bandpass_texture(np.random.default_rng(seed), size)
    return im.Image(np.clip(np.rint(tex), 0, 255).astype(np.uint8))


def kp_at(x, y, scale=1.6, orientation=0.0):
    return det.Keypoint(x=x, y=y, scale=scale, orientation=orientation, response=1.0)


def rotate90(arr):
    """Bilinear-free exact 90-degree rotation (counter-clockwise in image
    coordinates where y grows downward this is rot90 of the array)."""
    return np.ascontiguousarray(np.rot90(arr))


class TestBuiltinDescriptor:
    def test_constant_patch_degenerate(self):
        img = im.Image(np.full((64, 64), 90, np.uint8))
        d = desc.describe_builtin(img, kp_at(32, 32))
        assert d.degenerate
        assert np.all(d.values == 0)

    def test_unit_norm(self):
        img = texture_image(1)
        for kp in det.detect(img, det.DetectorConfig(gamma=20, phi=1.0)):
            d = desc.describe_builtin(img, kp)
            if not d.degenerate:
                assert np.linalg.norm(d.values.astype(np.float64)) == pytest.approx(
                    1.0, abs=1e-5
                )

    def test_determinism(self):
        img = texture_image(2)
        kp = kp_at(100.3, 80.7, scale=2.0, orientation=0.4)
        d1 = desc.describe_builtin(img, kp)
        d2 = desc.describe_builtin(img, kp)
        assert np.array_equal(d1.values, d2.values)

    def test_rotation_covariance(self):
        # rotate a natural-texture patch by 90 degrees with an exact warp
        # oracle and advance the keypoint orientation by pi/2
        img = texture_image(3, size=128)
        arr = img.data
        rot = rotate90(arr)
        # center pixel of a (2k+1)-sized region maps onto itself; use odd dims
        arr_odd = arr[:127, :127]
        rot_odd = rotate90(arr_odd)
        c = 63
        kp0 = kp_at(c, c, scale=2.0, orientation=0.0)
        # rot90 maps (x, y) -> (y, n-1-x); gradients rotate by -pi/2 in
        # image coordinates, so the matching keypoint orientation shifts
        kp1 = kp_at(c, c, scale=2.0, orientation=np.mod(-np.pi / 2, 2 * np.pi))
        d0 = desc.describe_builtin(im.Image(arr_odd), kp0)
        d1 = desc.describe_builtin(im.Image(rot_odd), kp1)
        assert not d0.degenerate and not d1.degenerate
        cos = float(np.dot(d0.values, d1.values))
        assert cos >= 0.9

    def test_off_image_window_no_error(self):
        img = texture_image(4)
        d = desc.describe_builtin(img, kp_at(0, 0, scale=3.0))
        assert d.values.shape == (128,)

    def test_brightness_robustness(self):
        img = texture_image(5, size=128)
        scaled = im.Image(
            np.clip(np.rint(img.as_float() * 1.3), 0, 255).astype(np.uint8)
        )
        kps = det.detect(img, det.DetectorConfig(gamma=10, phi=1.0))
        dists = []
        for kp in kps:
            a = desc.describe_builtin(img, kp)
            b = desc.describe_builtin(scaled, kp)
            if not a.degenerate and not b.degenerate:
                dists.append(np.linalg.norm(a.values - b.values))
        assert dists and max(dists) <= 0.3


class TestCropPatch:
    def test_center_crop(self):
        img = texture_image(6, size=128)
        patch = desc.crop_patch(img, kp_at(64, 64))
        assert patch.pixels.shape == (64, 64)
        assert np.array_equal(patch.pixels, img.data[32:96, 32:96])

    def test_corner_replication(self):
        img = texture_image(7, size=128)
        patch = desc.crop_patch(img, kp_at(0, 0))
        # everything above/left of the corner replicates row/col 0
        assert np.array_equal(patch.pixels[:32, 32], np.repeat(img.data[0, 0], 32))
        assert np.array_equal(patch.pixels[32:, 32:], img.data[:32, :32])

    def test_one_pixel_shift(self):
        img = texture_image(8, size=128)
        p0 = desc.crop_patch(img, kp_at(64, 64)).pixels
        p1 = desc.crop_patch(img, kp_at(65, 64)).pixels
        assert np.array_equal(p0[:, 1:], p1[:, :-1])

    def test_patch_fits(self):
        img = im.Image(np.zeros((100, 100), np.uint8))
        assert desc.patch_fits(img, 50, 50)
        assert not desc.patch_fits(img, 10, 50)
        assert not desc.patch_fits(img, 50, 95)


class TestDescriptorFile:
    def test_empty_file(self, tmp_path):
        path = str(tmp_path / "empty.bkd")
        desc.write_descriptor_file(path, [])
        provider = desc.load_descriptor_file(path)
        assert len(provider) == 0

    def test_roundtrip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(9)
        records = []
        for i in range(1000):
            v = rng.standard_normal(128).astype(np.float32)
            v /= np.float32(np.linalg.norm(v.astype(np.float64)))
            records.append((f"img{i % 7}", i, v))
        path = str(tmp_path / "d.bkd")
        desc.write_descriptor_file(path, records)
        provider = desc.load_descriptor_file(path)
        for image_id, idx, v in records:
            assert np.array_equal(provider.get(image_id, idx).values, v)

    def test_bad_norm_rejected(self, tmp_path):
        v = np.full(128, 0.5 / np.sqrt(128), np.float32)  # norm 0.5
        path = str(tmp_path / "bad.bkd")
        desc.write_descriptor_file(path, [("img", 0, v)])
        with pytest.raises(ValidationError, match="record 0"):
            desc.load_descriptor_file(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bkd"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            desc.load_descriptor_file(str(path))

    def test_provider_miss_fails_loudly(self, tmp_path):
        path = str(tmp_path / "small.bkd")
        v = np.zeros(128, np.float32)
        v[0] = 1.0
        desc.write_descriptor_file(path, [("img", 0, v)])
        provider = desc.load_descriptor_file(path)
        with pytest.raises(ExtractionError):
            provider.get("img", 1)
