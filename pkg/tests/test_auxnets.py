import os
import sys
import tempfile
import unittest

import torch
import torch.nn.functional as F

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sitta.attacks import AttackConfig
from sitta.auxnets import (
    IoUEstimator,
    Refiner,
    RefinerPair,
    diou_labels,
    gen_refiner_pairs,
    load_estimator,
    load_pairs,
    load_refiner,
    predict_iou_loss,
    refine,
    save_auxiliary,
    save_pairs,
    split_pairs_by_image,
    train_diou,
    train_refiner,
)
from sitta.core import ModelAdapter, image_to_tensor, weights_hash
from sitta.testbed import ShapesSpec, ToySegmenter, make_shapes_dataset


def toy() -> ModelAdapter:
    torch.manual_seed(0)
    return ModelAdapter(ToySegmenter(4), 4, arch="toy")


def source_images(n: int, size: int = 24):
    ds = make_shapes_dataset(n, ShapesSpec(size=size, seed=2))
    return [(i, image_to_tensor(im), torch.from_numpy(m)) for i, im, m in zip(ds.ids, ds.images, ds.masks)]


class TestArchitectures(unittest.TestCase):
    def test_refiner_shape_contract(self):
        r = Refiner(4, width=4).eval()
        for shape in ((4, 24, 24), (4, 13, 17), (2, 4, 9, 31)):
            x = torch.randn(*shape)
            self.assertEqual(r(x).shape, x.shape)

    def test_estimator_bounded_and_differentiable(self):
        est = IoUEstimator(4, width=4)
        x = (torch.randn(4, 16, 16) * 10).requires_grad_(True)
        value = predict_iou_loss(est, x)
        self.assertEqual(value.dim(), 0)
        self.assertGreaterEqual(float(value), 0.0)
        self.assertLessEqual(float(value), 1.0)
        value.backward()
        self.assertIsNotNone(x.grad)

    def test_channel_mismatch(self):
        with self.assertRaises(ValueError):
            refine(Refiner(4, width=4), torch.randn(3, 8, 8))
        with self.assertRaises(ValueError):
            predict_iou_loss(IoUEstimator(4, width=4), torch.randn(3, 8, 8))


class TestPairs(unittest.TestCase):
    def test_pair_count_and_weight_purity(self):
        m = toy()
        h = weights_hash(m)
        pairs = gen_refiner_pairs(m, source_images(10), AttackConfig(steps=10))
        self.assertEqual(len(pairs), 50)
        self.assertEqual(sorted({p.t for p in pairs}), [2, 4, 6, 8, 10])
        self.assertEqual(weights_hash(m), h)
        for p in pairs:
            self.assertEqual(tuple(p.corrupted.shape[1:]), tuple(p.target.shape))

    def test_degenerate_pair(self):
        m = toy()
        (image_id, x, _), = source_images(1)
        pairs = gen_refiner_pairs(m, [(image_id, x, None)], AttackConfig(steps=0), harvest=(0,))
        self.assertEqual(len(pairs), 1)
        self.assertTrue(torch.equal(pairs[0].corrupted, m(x).detach()))

    def test_ground_truth_targets(self):
        m = toy()
        images = source_images(2)
        pairs = gen_refiner_pairs(m, images, AttackConfig(steps=2), "ground-truth", harvest=(2,))
        self.assertTrue(torch.equal(pairs[0].target, images[0][2].long()))
        self.assertEqual(pairs[0].target_kind, "ground-truth")
        with self.assertRaises(ValueError):
            gen_refiner_pairs(m, [(images[0][0], images[0][1], None)], AttackConfig(steps=2), "ground-truth", (2,))
        with self.assertRaises(ValueError):
            gen_refiner_pairs(m, images, AttackConfig(steps=2), harvest=(4,))

    def test_split_by_image(self):
        m = toy()
        pairs = gen_refiner_pairs(m, source_images(10), AttackConfig(steps=2), harvest=(1, 2))
        train, val = split_pairs_by_image(pairs, 0.1, seed=0)
        self.assertEqual(len(train) + len(val), len(pairs))
        self.assertFalse({p.image_id for p in train} & {p.image_id for p in val})
        self.assertEqual(len({p.image_id for p in val}), 1)

    def test_pair_corpus_roundtrip(self):
        m = toy()
        pairs = gen_refiner_pairs(m, source_images(2), AttackConfig(steps=2), harvest=(0, 2))
        with tempfile.TemporaryDirectory() as td:
            save_pairs(pairs, td, step=1 / 255, seed=0)
            loaded = load_pairs(td)
        self.assertEqual(len(loaded), len(pairs))
        by_key = {(p.image_id, p.t): p for p in pairs}
        for p in loaded:
            ref = by_key[(p.image_id, p.t)]
            self.assertTrue(torch.equal(p.corrupted, ref.corrupted))
            self.assertTrue(torch.equal(p.target, ref.target))


class TestTraining(unittest.TestCase):
    def setUp(self) -> None:
        self.pairs = gen_refiner_pairs(toy(), source_images(4), AttackConfig(steps=4), harvest=(2, 4))

    def test_refiner_training_curve_and_refine(self):
        refiner = train_refiner(self.pairs, epochs=6, lr=1e-2, seed=0, batch_size=4, width=4)
        hist = refiner.train_history
        self.assertEqual(len(hist), 6)
        self.assertLess(hist[-1], hist[0])
        self.assertFalse(any(p.requires_grad for p in refiner.parameters()))
        out = refine(refiner, self.pairs[0].corrupted)
        torch.testing.assert_close(out.sum(0), torch.ones(out.shape[1:]), atol=1e-5, rtol=0)
        self.assertTrue(torch.equal(out, refine(refiner, self.pairs[0].corrupted)))

    def test_refiner_deterministic(self):
        a = train_refiner(self.pairs, epochs=2, seed=3, width=4)
        b = train_refiner(self.pairs, epochs=2, seed=3, width=4)
        self.assertEqual(a.train_history, b.train_history)

    def test_diou_labels_and_training(self):
        samples = diou_labels(self.pairs)
        self.assertTrue(all(0.0 <= label <= 1.0 for _, label in samples))
        est = train_diou(samples, epochs=5, lr=1e-2, seed=0, batch_size=4, width=4)
        self.assertLess(est.train_history[-1], est.train_history[0])
        with self.assertRaises(ValueError):
            train_diou([(samples[0][0], 1.5)])

    def test_inconsistent_shapes(self):
        other = gen_refiner_pairs(toy(), source_images(1, size=16), AttackConfig(steps=2), harvest=(2,))
        with self.assertRaises(ValueError):
            train_refiner(self.pairs + other, epochs=1)

    def test_checkpoints(self):
        refiner = train_refiner(self.pairs, epochs=1, width=4)
        est = train_diou(diou_labels(self.pairs), epochs=1, width=4)
        x = self.pairs[0].corrupted
        with tempfile.TemporaryDirectory() as td:
            rp = save_auxiliary(refiner, os.path.join(td, "r.pt"))
            ep = save_auxiliary(est, os.path.join(td, "e.pt"))
            self.assertTrue(torch.equal(refine(load_refiner(rp), x), refine(refiner, x)))
            self.assertEqual(float(predict_iou_loss(load_estimator(ep), x)), float(predict_iou_loss(est, x)))
            with self.assertRaises(ValueError):
                load_refiner(ep)
            with self.assertRaises(FileNotFoundError):
                load_estimator(os.path.join(td, "none.pt"))


NOISE_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)


def noisy_pairs(scale: float) -> list[RefinerPair]:
    """50 pairs: ten shape masks, each as one-hot logits under five noise levels."""
    ds = make_shapes_dataset(10, ShapesSpec(size=24, seed=2))
    gen = torch.Generator().manual_seed(0)
    pairs = []
    for image_id, mask in zip(ds.ids, ds.masks):
        target = torch.from_numpy(mask).long()
        onehot = F.one_hot(target, 4).permute(2, 0, 1).float()
        for t, sigma in enumerate(NOISE_LEVELS):
            noise = torch.randn(onehot.shape, generator=gen)
            pairs.append(RefinerPair(scale * (onehot + sigma * noise), target, image_id, 2 * (t + 1)))
    return pairs


def refiner_ce(refiner, pairs) -> float:
    x = torch.stack([p.corrupted for p in pairs])
    y = torch.stack([p.target for p in pairs])
    with torch.no_grad():
        return float(F.cross_entropy(refiner(x), y))


def estimator_mse(est, samples) -> float:
    x = torch.stack([s[0] for s in samples])
    y = torch.tensor([s[1] for s in samples])
    with torch.no_grad():
        return float(F.mse_loss(est(x), y))


class TestTrainingQuality(unittest.TestCase):
    def test_refiner_halves_ce_and_keeps_clean_masks(self):
        pairs = noisy_pairs(2.0)
        self.assertEqual(len(pairs), 50)
        before = refiner_ce(train_refiner(pairs, epochs=0, seed=0), pairs)
        refiner = train_refiner(pairs, epochs=20, lr=1e-2, seed=0, batch_size=4)
        self.assertEqual(len(refiner.train_history), 20)
        self.assertLessEqual(refiner_ce(refiner, pairs), 0.5 * before)
        clean = [p for p in pairs if p.t == 2]
        agree = [float((refine(refiner, p.corrupted).argmax(0) == p.target).float().mean()) for p in clean]
        self.assertGreaterEqual(sum(agree) / len(agree), 0.95)

    def test_estimator_halves_mse_and_scores_exact_mask_low(self):
        samples = diou_labels(noisy_pairs(10.0))
        exact = samples[0]
        self.assertLess(exact[1], 1e-3)
        before = estimator_mse(train_diou(samples, epochs=0, seed=0), samples)
        est = train_diou(samples, epochs=20, lr=1e-2, seed=0, batch_size=4)
        self.assertLessEqual(estimator_mse(est, samples), 0.5 * before)
        self.assertLess(float(predict_iou_loss(est, exact[0])), 0.15)


if __name__ == "__main__":
    unittest.main()
