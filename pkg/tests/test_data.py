import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from farmer.data import (
    NoiseSchedule,
    class_mean_images,
    dequantize,
    nearest_centroid_labels,
    noise_sigma,
    patchify,
    synth_dataset,
    unpatchify,
)


class TestNoiseSigma:
    def test_endpoints(self):
        sched = NoiseSchedule(total_steps=1000)
        assert noise_sigma(0, sched) == pytest.approx(0.1, abs=1e-12)
        assert noise_sigma(1000, sched) == pytest.approx(0.005, abs=1e-12)

    def test_midpoint(self):
        sched = NoiseSchedule(total_steps=1000)
        assert noise_sigma(500, sched) == pytest.approx(0.0525, abs=1e-12)

    def test_monotone_non_increasing(self):
        sched = NoiseSchedule(total_steps=137)
        vals = [noise_sigma(s, sched) for s in range(138)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_out_of_range_rejected(self):
        sched = NoiseSchedule(total_steps=10)
        with pytest.raises(ValueError):
            noise_sigma(-1, sched)
        with pytest.raises(ValueError):
            noise_sigma(11, sched)


class TestDequantize:
    def test_zero_sigma_bit_identical(self):
        rng = np.random.default_rng(0)
        img = rng.random((8, 8, 3)).astype(np.float32)
        out = dequantize(img, 0.0, rng)
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_noise_std_within_one_percent(self):
        rng = np.random.default_rng(1)
        img = np.zeros((1000, 1000, 1), dtype=np.float64)
        out = dequantize(img, 0.1, rng)
        assert abs((out - img).std() - 0.1) < 0.001

    def test_seeded_determinism(self):
        img = np.zeros((4, 4, 3), dtype=np.float32)
        a = dequantize(img, 0.05, np.random.default_rng(42))
        b = dequantize(img, 0.05, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)


class TestPatchify:
    def test_reference_geometry(self):
        img = np.zeros((256, 256, 3), dtype=np.float32)
        tokens = patchify(img, 16)
        assert tokens.shape == (256, 768)

    def test_unit_patch(self):
        img = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        tokens = patchify(img, 1)
        assert tokens.shape == (6, 4)

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(2)
        img = rng.random((8, 8, 3)).astype(np.float32)
        back = unpatchify(patchify(img, 4), 4, 8, 8, 3)
        np.testing.assert_array_equal(back, img)

    def test_raster_order_is_row_major(self):
        # 4x4 gray image, p=2: token 1 must be the top-right patch
        img = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        tokens = patchify(img, 2)
        np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7])

    def test_non_divisible_rejected(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((6, 6, 3), dtype=np.float32), 4)

    @settings(max_examples=25, deadline=None)
    @given(
        hp=st.integers(1, 4),
        wp=st.integers(1, 4),
        p=st.integers(1, 3),
        c=st.integers(1, 3),
        batch=st.booleans(),
    )
    def test_roundtrip_property(self, hp, wp, p, c, batch):
        rng = np.random.default_rng(hp * 1000 + wp * 100 + p * 10 + c)
        shape = (2, hp * p, wp * p, c) if batch else (hp * p, wp * p, c)
        img = rng.random(shape).astype(np.float32)
        back = unpatchify(patchify(img, p), p, hp * p, wp * p, c)
        np.testing.assert_array_equal(back, img)

    def test_token_then_image_roundtrip(self):
        rng = np.random.default_rng(3)
        tokens = rng.random((3, 16, 48)).astype(np.float32)
        again = patchify(unpatchify(tokens, 4, 16, 16, 3), 4)
        np.testing.assert_array_equal(again, tokens)


class TestSynthDataset:
    def test_seeded_streams_identical(self):
        a_img, a_lab = synth_dataset("checkerboard", 4, 32, seed=7)
        b_img, b_lab = synth_dataset("checkerboard", 4, 32, seed=7)
        np.testing.assert_array_equal(a_img, b_img)
        np.testing.assert_array_equal(a_lab, b_lab)

    def test_labels_cover_all_classes(self):
        _, labels = synth_dataset("bars", 5, 100, seed=0)
        assert set(labels.tolist()) == set(range(5))
        counts = np.bincount(labels)
        assert counts.min() == counts.max()

    @pytest.mark.parametrize("kind", ["checkerboard", "blobs", "bars"])
    def test_classes_are_separable(self, kind):
        images, labels = synth_dataset(kind, 4, 160, seed=11)
        means = class_mean_images(images, labels, 4)
        for a in range(4):
            for b in range(a + 1, 4):
                gap = np.sqrt(((means[a] - means[b]) ** 2).sum()) / np.sqrt(means[a].size)
                assert gap > 0.05, f"{kind}: classes {a},{b} overlap (gap {gap:.4f})"

    def test_values_in_unit_interval(self):
        images, _ = synth_dataset("blobs", 3, 30, seed=5)
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown dataset kind"):
            synth_dataset("plaid", 2, 4, seed=0)

    def test_nearest_centroid_recovers_training_labels(self):
        images, labels = synth_dataset("checkerboard", 4, 80, seed=3)
        means = class_mean_images(images, labels, 4)
        pred = nearest_centroid_labels(images, means)
        assert (pred == labels).mean() > 0.9
