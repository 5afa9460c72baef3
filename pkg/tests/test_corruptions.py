import os
import sys
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sitta.corruptions import (
    DEFAULT_KINDS,
    KINDS,
    CorpusIndex,
    CorruptionSpec,
    apply_corruption,
    derive_corrupted_dataset,
    diamond_square,
    frost_templates,
    materialize_corpus,
)
from sitta.storage import read_image
from sitta.testbed import ShapesSpec, make_shapes_dataset


def sample_image(size: int = 48) -> np.ndarray:
    return make_shapes_dataset(1, ShapesSpec(size=size, seed=3)).images[0]


class TestCorruptionSpec(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ValueError):
            CorruptionSpec("snow", 1)
        with self.assertRaises(ValueError):
            CorruptionSpec("fog", 6)
        self.assertEqual(CorruptionSpec("jpeg", 5).param, 7)

    def test_identity_ignores_level(self):
        CorruptionSpec("identity", 0)


class TestApplyCorruption(unittest.TestCase):
    def test_brightness_constant(self):
        x = np.full((4, 4, 3), 0.5)
        out = apply_corruption(x, CorruptionSpec("brightness", 3))
        np.testing.assert_allclose(out, 0.8, atol=1e-6)

    def test_seeded_determinism(self):
        x = sample_image()
        for kind in KINDS:
            with self.subTest(kind=kind):
                a = apply_corruption(x, CorruptionSpec(kind, 3, seed=11))
                b = apply_corruption(x, CorruptionSpec(kind, 3, seed=11))
                self.assertTrue(np.array_equal(a, b))

    def test_noise_depends_on_seed(self):
        x = sample_image()
        a = apply_corruption(x, CorruptionSpec("gaussian-noise", 3, seed=1))
        b = apply_corruption(x, CorruptionSpec("gaussian-noise", 3, seed=2))
        self.assertFalse(np.array_equal(a, b))

    def test_contrast_preserves_channel_mean(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.3, 0.7, (16, 16, 3))
        out = apply_corruption(x, CorruptionSpec("contrast", 1))
        np.testing.assert_allclose(out.mean(axis=(0, 1)), x.mean(axis=(0, 1)), atol=1e-6)

    def test_shot_noise_variance(self):
        x = np.full((100, 100, 3), 0.4)
        spec = CorruptionSpec("shot-noise", 1, seed=5)
        out = apply_corruption(x, spec).astype(np.float64)
        expected = 0.4 / spec.param
        self.assertAlmostEqual(out.var() / expected, 1.0, delta=0.05)

    def test_identity_is_exact(self):
        x = sample_image()
        self.assertTrue(np.array_equal(apply_corruption(x, CorruptionSpec("identity", 0)), x))

    def test_errors(self):
        with self.assertRaises(ValueError):
            apply_corruption(np.zeros((4, 4)), CorruptionSpec("fog", 1))
        bad = np.zeros((4, 4, 3))
        bad[0, 0, 0] = np.nan
        with self.assertRaises(ValueError):
            apply_corruption(bad, CorruptionSpec("fog", 1))

    def test_severity_monotone_for_noise_and_blur(self):
        x = sample_image(64)
        for kind in ("brightness", "contrast", "gaussian-noise", "shot-noise", "gaussian-blur", "defocus-blur"):
            errors = [
                float(np.mean((apply_corruption(x, CorruptionSpec(kind, lvl, seed=0)) - x) ** 2)) for lvl in range(1, 6)
            ]
            with self.subTest(kind=kind):
                self.assertEqual(errors, sorted(errors))

    def test_jpeg_changes_image_slightly(self):
        x = sample_image()
        out = apply_corruption(x, CorruptionSpec("jpeg", 1))
        self.assertEqual(out.shape, x.shape)
        self.assertLess(float(np.abs(out - x).mean()), 0.1)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), level=st.integers(1, 5))
    def test_range_invariant(self, seed, level):
        x = np.random.default_rng(seed).uniform(0.0, 1.0, (9, 11, 3))
        for kind in KINDS:
            out = apply_corruption(x, CorruptionSpec(kind, level, seed=seed))
            self.assertEqual(out.shape, x.shape)
            self.assertGreaterEqual(float(out.min()), 0.0)
            self.assertLessEqual(float(out.max()), 1.0)


class TestDiamondSquare(unittest.TestCase):
    def test_zero_wibble_is_bilinear(self):
        size, seed = 9, 4
        corners = np.random.default_rng(seed).uniform(0.0, 1.0, 4)
        t = np.linspace(0.0, 1.0, size)
        yy, xx = np.meshgrid(t, t, indexing="ij")
        bilinear = (
            corners[0] * (1 - yy) * (1 - xx)
            + corners[1] * (1 - yy) * xx
            + corners[2] * yy * (1 - xx)
            + corners[3] * yy * xx
        )
        expected = (bilinear - bilinear.min()) / (bilinear.max() - bilinear.min())
        np.testing.assert_allclose(diamond_square(size, 0.0, seed), expected, atol=1e-12)

    def test_shape_range_and_determinism(self):
        h = diamond_square(17, 1.5, 3)
        self.assertEqual(h.shape, (17, 17))
        self.assertGreaterEqual(h.min(), 0.0)
        self.assertLessEqual(h.max(), 1.0)
        self.assertTrue(np.array_equal(h, diamond_square(17, 1.5, 3)))

    def test_invalid_size(self):
        for size in (2, 10, 16):
            with self.assertRaises(ValueError):
                diamond_square(size, 1.0, 0)

    def test_frost_templates(self):
        templates = frost_templates(seed=7, size=33)
        self.assertEqual(len(templates), 3)
        for tex in templates:
            self.assertEqual(tex.shape, (33, 33, 3))
            self.assertGreaterEqual(tex.min(), 0.0)


class TestCorpus(unittest.TestCase):
    def test_default_sized_corpus(self):
        ids = [f"img{i:02d}" for i in range(40)]
        index = derive_corrupted_dataset(ids, DEFAULT_KINDS, (1, 3, 5), seed=0)
        self.assertEqual(len(index), 1200)
        self.assertEqual(len({e.key for e in index}), 1200)

    def test_single_entry_and_errors(self):
        self.assertEqual(len(derive_corrupted_dataset(["a"], ["identity"], [1])), 1)
        with self.assertRaises(ValueError):
            derive_corrupted_dataset(["a"], [], [1])
        with self.assertRaises(ValueError):
            derive_corrupted_dataset(["a"], ["fog"], [])
        with self.assertRaises(ValueError):
            derive_corrupted_dataset(["a"], ["fog"], [2])
        with self.assertRaises(ValueError):
            derive_corrupted_dataset(["a", "a"], ["fog"], [1])

    def test_duplicate_kinds_or_levels_rejected(self):
        with self.assertRaisesRegex(ValueError, "kinds must be unique"):
            derive_corrupted_dataset(["a"], ["fog", "fog"], [1])
        with self.assertRaisesRegex(ValueError, "levels must be unique"):
            derive_corrupted_dataset(["a"], ["fog"], [3, 1, 3])

    def test_seeds_are_stable(self):
        a = derive_corrupted_dataset(["x", "y"], ["fog", "jpeg"], [1, 3], seed=9)
        b = derive_corrupted_dataset(["x", "y"], ["fog", "jpeg"], [1, 3], seed=9)
        self.assertEqual(a.entries, b.entries)

    def test_materialize_and_index_roundtrip(self):
        ds = make_shapes_dataset(2, ShapesSpec(size=32, seed=1))
        images = dict(zip(ds.ids, ds.images))
        index = derive_corrupted_dataset(ds.ids, ["identity", "gaussian-blur"], [1, 3], seed=2)
        with tempfile.TemporaryDirectory() as td:
            path = materialize_corpus(index, images.__getitem__, td)
            loaded = CorpusIndex.from_jsonl(path)
            self.assertEqual(loaded.entries, index.entries)
            first = loaded.entries[0]
            self.assertEqual(first.path, f"images/{first.image_id}__identity__L1.png")
            stored = read_image(os.path.join(td, first.path))
            np.testing.assert_allclose(stored, images[first.image_id], atol=1 / 255)


if __name__ == "__main__":
    unittest.main()
