import os
import sys
import unittest
from unittest import mock

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sitta.auxnets import IoUEstimator, Refiner, freeze
from sitta.core import (
    MissingAuxiliaryError,
    ModelAdapter,
    ParamScope,
    image_to_tensor,
    scoped_requires_grad,
    select_params,
    weights_hash,
)
from sitta.losses import entropy_loss
from sitta.testbed import ShapesSpec, ToySegmenter, make_shapes_dataset
from sitta.tta import (
    AuxModels,
    LossKind,
    Method,
    TTAConfig,
    adapt_single_image,
    augco_generator,
    augco_reliability,
    compute_objective,
    expand_grid,
    image_stream,
    random_box,
    refine_prediction,
)


def toy() -> ModelAdapter:
    torch.manual_seed(0)
    return ModelAdapter(ToySegmenter(4), 4, arch="toy")


def sample(size: int = 24):
    ds = make_shapes_dataset(1, ShapesSpec(size=size, seed=8))
    return image_to_tensor(ds.images[0]), ds.masks[0]


class ConfidentSegmenter(nn.Module):
    """One-hot logits keyed on the red channel."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        labels = (x[:, 0] * 4).long().clamp(0, 3)
        return 50.0 * F.one_hot(labels, 4).permute(0, 3, 1, 2).float()


def aux_models() -> AuxModels:
    torch.manual_seed(1)
    return AuxModels(refiner=freeze(Refiner(4, width=4)), estimator=freeze(IoUEstimator(4, width=4)))


ALL_CONFIGS = expand_grid(
    [m.value for m in Method], ["ce", "iou"], ["full", "norm-affine"], [1e-3], iterations=2
)


class TestConfig(unittest.TestCase):
    def test_loss_compatibility(self):
        with self.assertRaises(ValueError):
            TTAConfig("PL", "kl")
        with self.assertRaises(ValueError):
            TTAConfig("Ent", "ce")
        with self.assertRaises(ValueError):
            TTAConfig("dIoU", "iou")
        self.assertIs(TTAConfig("Adv", "kl").loss, LossKind.KL)

    def test_ranges(self):
        with self.assertRaises(ValueError):
            TTAConfig("Ent", "ent", iterations=11)
        with self.assertRaises(ValueError):
            TTAConfig("Ent", "ent", lr=-1.0)
        with self.assertRaises(ValueError):
            TTAConfig("AugCo", "ce", crop_area=(0.6, 0.5))
        with self.assertRaises(ValueError):
            TTAConfig("Ent", "ent", seed=-1)

    def test_key(self):
        cfg = TTAConfig("PL", "iou", "norm-affine", lr=1e-3)
        self.assertEqual(cfg.column, "PL/iou/norm-affine")
        self.assertEqual(cfg.key, "PL/iou/norm-affine/lr=0.001")
        close = [TTAConfig("Ent", "ent", lr=lr) for lr in (1e-3, 1.0000001e-3, 1.00000001e-3)]
        self.assertEqual(len({c.key for c in close}), 3)

    def test_expand_grid(self):
        configs = expand_grid([m.value for m in Method], ["ce", "iou"], ["full", "norm-affine"], [1e-4, 1e-3, 1e-2])
        # Ent, Adv and dIoU have one loss each; PL, AugCo and Ref have two
        self.assertEqual(len(configs), 9 * 2 * 3)
        self.assertEqual(len({c.key for c in configs}), len(configs))
        only_ce = expand_grid(["PL", "Ent"], ["ce"], ["full"], [1e-3])
        self.assertEqual([c.column for c in only_ce], ["PL/ce/full", "Ent/ent/full"])


class TestReliability(unittest.TestCase):
    def test_consistent_or_confident(self):
        view1 = torch.tensor([[0.9, 0.2], [0.1, 0.8]]).reshape(2, 1, 2)
        view2 = torch.tensor([[0.6, 0.9], [0.4, 0.1]]).reshape(2, 1, 2)
        self.assertEqual(augco_reliability(view1, view2, 0.8).flatten().tolist(), [1.0, 1.0])
        view2 = torch.tensor([[0.6, 0.7], [0.4, 0.3]]).reshape(2, 1, 2)
        self.assertEqual(augco_reliability(view1, view2, 0.8).flatten().tolist(), [1.0, 0.0])

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            augco_reliability(torch.rand(2, 3, 3), torch.rand(2, 3, 4), 0.8)

    def test_random_box_area(self):
        gen = torch.Generator().manual_seed(0)
        for _ in range(100):
            top, left, h, w = random_box(40, 60, (0.25, 0.5), gen)
            self.assertTrue(0 <= top and top + h <= 40)
            self.assertTrue(0 <= left and left + w <= 60)
            self.assertGreaterEqual(h * w / 2400, 0.2)
            self.assertLessEqual(h * w / 2400, 0.56)


class TestObjectives(unittest.TestCase):
    def test_entropy_objective(self):
        m = toy()
        x, _ = sample()
        cfg = TTAConfig("Ent", "ent")
        with torch.no_grad():
            expected = float(entropy_loss(m(x).softmax(0)))
            got = float(compute_objective("Ent", m, x, None, cfg))
        self.assertAlmostEqual(got, expected, places=6)

    def test_all_objectives_finite(self):
        m = toy()
        x, _ = sample()
        aux = aux_models()
        for cfg in ALL_CONFIGS:
            with self.subTest(config=cfg.key):
                value = compute_objective(cfg.method, m, x, aux, cfg)
                self.assertEqual(value.dim(), 0)
                self.assertTrue(bool(torch.isfinite(value)))
                self.assertGreaterEqual(float(value), -1e-6)

    def test_missing_auxiliary(self):
        m = toy()
        x, _ = sample()
        with self.assertRaises(MissingAuxiliaryError):
            adapt_single_image(m, x, TTAConfig("Ref", "ce"))
        with self.assertRaises(MissingAuxiliaryError):
            adapt_single_image(m, x, TTAConfig("dIoU", "none"), AuxModels(refiner=Refiner(4)))

    def test_identity_refiner_reduces_to_pseudo_labels(self):
        m = toy()
        x, _ = sample()
        aux = AuxModels(refiner=nn.Identity())
        for loss in ("iou", "ce"):
            with self.subTest(loss=loss):
                ref = compute_objective("Ref", m, x, aux, TTAConfig("Ref", loss))
                pl = compute_objective("PL", m, x, None, TTAConfig("PL", loss))
                self.assertAlmostEqual(float(ref), float(pl), places=6)

    def test_adv_without_step_is_zero(self):
        m = toy()
        x, _ = sample()
        value = compute_objective("Adv", m, x, None, TTAConfig("Adv", "kl", fgsm_step=0.0))
        self.assertAlmostEqual(float(value), 0.0, places=6)

    def test_entropy_of_confident_prediction_is_zero(self):
        m = ModelAdapter(ConfidentSegmenter(), 4, arch="confident")
        x, _ = sample()
        value = compute_objective("Ent", m, x, None, TTAConfig("Ent", "ent"))
        self.assertAlmostEqual(float(value), 0.0, places=6)

    def test_entropy_step_does_not_raise_entropy(self):
        m = toy()
        cfg = TTAConfig("Ent", "ent", lr=1e-3, iterations=1)
        increases = 0
        for image in make_shapes_dataset(50, ShapesSpec(size=16, seed=11)).images:
            rec = adapt_single_image(m, image_to_tensor(image), cfg)
            increases += rec.final.entropy > rec.na.entropy + 1e-6
        self.assertEqual(increases, 0)

    def test_norm_affine_scope_gradients(self):
        m = toy()
        x, _ = sample()
        params = select_params(m, ParamScope.NORM_AFFINE)
        self.assertEqual(len(params), 8)
        chosen = {id(p) for p in params}
        with scoped_requires_grad(m, params):
            compute_objective("Ent", m, x, None, TTAConfig("Ent", "ent")).backward()
            for ref in m.parameters():
                if id(ref.param) in chosen:
                    self.assertIsNotNone(ref.param.grad)
                else:
                    self.assertIsNone(ref.param.grad)


class TestAdaptSingleImage(unittest.TestCase):
    def test_weights_restored_for_every_config(self):
        m = toy()
        x, gt = sample()
        aux = aux_models()
        h = weights_hash(m)
        for cfg in ALL_CONFIGS:
            with self.subTest(config=cfg.key):
                rec = adapt_single_image(m, x, cfg, aux, gt)
                self.assertEqual(len(rec.trace), 3)
                self.assertFalse(rec.diverged)
                self.assertEqual(weights_hash(m), h)
                self.assertTrue(all(p.requires_grad for p in m.module.parameters()))

    def test_independent_of_history(self):
        m = toy()
        x, gt = sample()
        cfg = TTAConfig("PL", "ce", lr=1e-2, iterations=3)
        first = adapt_single_image(m, x, cfg, gt=gt)
        adapt_single_image(m, x, TTAConfig("Ent", "ent", lr=1e-1, iterations=5), gt=gt)
        again = adapt_single_image(m, x, cfg, gt=gt)
        self.assertEqual([t.miou_i for t in first.trace], [t.miou_i for t in again.trace])
        for a, b in zip(first.masks, again.masks):
            self.assertTrue(np.array_equal(a, b))

    def test_zero_iterations_and_zero_lr(self):
        m = toy()
        x, gt = sample()
        rec = adapt_single_image(m, x, TTAConfig("Ent", "ent", iterations=0), gt=gt)
        self.assertEqual(len(rec.trace), 1)
        self.assertIs(rec.final, rec.na)
        rec = adapt_single_image(m, x, TTAConfig("PL", "iou", lr=0.0, iterations=3), gt=gt)
        for mask in rec.masks[1:]:
            self.assertTrue(np.array_equal(mask, rec.na.mask))

    def test_augco_is_seeded(self):
        m = toy()
        x, gt = sample()
        cfg = TTAConfig("AugCo", "ce", lr=1e-2, iterations=3, seed=5)
        a = adapt_single_image(m, x, cfg, gt=gt)
        b = adapt_single_image(m, x, cfg, gt=gt)
        self.assertEqual([t.objective for t in a.trace], [t.objective for t in b.trace])

    def test_augco_draws_differ_between_images(self):
        boxes = {
            image_id: [random_box(48, 48, (0.25, 0.5), augco_generator(5, image_stream(image_id), i)) for i in range(1, 11)]
            for image_id in ("shape00000__fog__L1", "shape00001__fog__L1")
        }
        self.assertNotEqual(*boxes.values())
        m = toy()
        x, gt = sample()
        cfg = TTAConfig("AugCo", "ce", lr=1e-2, iterations=3, seed=5)
        a = adapt_single_image(m, x, cfg, gt=gt, image_id="shape00000__fog__L1")
        b = adapt_single_image(m, x, cfg, gt=gt, image_id="shape00001__fog__L1")
        self.assertNotEqual([t.objective for t in a.trace[1:]], [t.objective for t in b.trace[1:]])

    def test_divergence_reports_unadapted(self):
        m = toy()
        x, gt = sample()
        h = weights_hash(m)
        with mock.patch("sitta.tta.compute_objective", return_value=torch.tensor(float("nan"))):
            with self.assertLogs("sitta.tta", level="WARNING"):
                rec = adapt_single_image(m, x, TTAConfig("Ent", "ent", iterations=4), gt=gt)
        self.assertTrue(rec.diverged)
        self.assertEqual(len(rec.trace), 5)
        self.assertEqual({t.miou_i for t in rec.trace}, {rec.na.miou_i})
        self.assertEqual(weights_hash(m), h)

    def test_row_needs_ground_truth(self):
        m = toy()
        x, gt = sample()
        cfg = TTAConfig("Ent", "ent", iterations=2)
        with self.assertRaises(ValueError):
            adapt_single_image(m, x, cfg).to_row()
        row = adapt_single_image(m, x, cfg, gt=torch.from_numpy(gt), image_id="img").to_row("fog", 3)
        self.assertEqual(row["config"], cfg.key)
        self.assertEqual((row["kind"], row["level"]), ("fog", 3))
        self.assertEqual(len(row["miou_i"]), 3)
        self.assertEqual(row["na_miou_i"], row["miou_i"][0])

    def test_refine_prediction(self):
        m = toy()
        x, gt = sample()
        h = weights_hash(m)
        mask = refine_prediction(m, x, aux_models().refiner)
        self.assertEqual(mask.shape, gt.shape)
        self.assertLess(int(mask.max()), 4)
        self.assertEqual(weights_hash(m), h)


if __name__ == "__main__":
    unittest.main()
