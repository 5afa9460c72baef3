import os
import sys
import tempfile
import unittest

import torch
from torch import nn

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from sitta.attacks import (
    AttackConfig,
    fgsm_step,
    inverted_target,
    load_trajectory,
    pgd_attack,
    save_trajectory,
)
from sitta.core import DivergenceError, ModelAdapter, image_to_tensor, weights_hash
from sitta.losses import ce_loss
from sitta.testbed import ShapesSpec, ToySegmenter, make_shapes_dataset


def toy() -> ModelAdapter:
    torch.manual_seed(0)
    return ModelAdapter(ToySegmenter(4), 4, arch="toy")


def images(n: int, size: int = 32) -> list[torch.Tensor]:
    return [image_to_tensor(im) for im in make_shapes_dataset(n, ShapesSpec(size=size, seed=5)).images]


class TestInvertedTarget(unittest.TestCase):
    def test_binary(self):
        p = torch.tensor([0.8, 0.2]).reshape(2, 1, 1)
        self.assertEqual(inverted_target(p).flatten().tolist(), [0.0, 1.0])

    def test_three_classes_and_tie(self):
        p = torch.tensor([0.6, 0.3, 0.1]).reshape(3, 1, 1)
        self.assertEqual(inverted_target(p).flatten().tolist(), [0.0, 0.5, 0.5])
        tie = torch.full((3, 1, 1), 1 / 3)
        self.assertEqual(inverted_target(tie).flatten().tolist(), [0.0, 0.5, 0.5])

    def test_single_class(self):
        with self.assertRaises(ValueError):
            inverted_target(torch.ones(1, 2, 2))


class TestFGSM(unittest.TestCase):
    def test_zero_step_is_identity(self):
        m = toy()
        x = images(1)[0]
        target = inverted_target(m(x).softmax(0).detach())
        self.assertTrue(torch.equal(fgsm_step(m, x, target, 0.0), x))

    def test_sign_structure(self):
        m = toy()
        x = images(1)[0] * 0.8 + 0.1
        step = 1 / 255
        target = inverted_target(m(x).softmax(0).detach())
        diff = (fgsm_step(m, x, target, step) - x).abs()
        near_zero = diff < 1e-7
        near_step = (diff - step).abs() < 1e-6
        self.assertTrue(bool((near_zero | near_step).all()))

    def test_targeted_loss_decreases(self):
        m = toy()
        decreased = 0
        batch = images(20)
        for x in batch:
            target = inverted_target(m(x).softmax(0).detach())
            with torch.no_grad():
                before = float(ce_loss(m(x).softmax(0), target))
                after = float(ce_loss(m(fgsm_step(m, x, target, 1 / 255)).softmax(0), target))
            decreased += after < before
        self.assertGreaterEqual(decreased, 19)

    def test_non_finite_gradient(self):
        conv = nn.Conv2d(3, 2, 1)
        with torch.no_grad():
            conv.weight.fill_(float("nan"))
        m = ModelAdapter(conv, 2)
        x = torch.rand(3, 4, 4)
        with self.assertRaises(DivergenceError):
            fgsm_step(m, x, torch.full((2, 4, 4), 0.5), 0.1)


class TestPGD(unittest.TestCase):
    def test_zero_steps(self):
        m = toy()
        x = images(1)[0]
        self.assertEqual(pgd_attack(m, x, inverted_target(m(x).softmax(0).detach()), AttackConfig(steps=0)), [])

    def test_range_budget_and_weight_purity(self):
        m = toy()
        h = weights_hash(m)
        x = images(1)[0]
        cfg = AttackConfig(steps=6, step_size=1 / 255)
        traj = pgd_attack(m, x, inverted_target(m(x).softmax(0).detach()), cfg)
        self.assertEqual([s.t for s in traj], list(range(1, 7)))
        for s in traj:
            self.assertGreaterEqual(float(s.image.min()), 0.0)
            self.assertLessEqual(float(s.image.max()), 1.0)
            self.assertLessEqual(float((s.image - x).abs().max()), s.t * cfg.step_size + 1e-6)
            self.assertEqual(tuple(s.logits.shape), (4, 32, 32))
        self.assertEqual(weights_hash(m), h)
        self.assertTrue(all(p.grad is None for p in m.module.parameters()))

    def test_linf_budget(self):
        m = toy()
        x = images(1)[0]
        cfg = AttackConfig(steps=8, step_size=1 / 255, budget=2 / 255)
        traj = pgd_attack(m, x, inverted_target(m(x).softmax(0).detach()), cfg)
        self.assertLessEqual(float((traj[-1].image - x).abs().max()), 2 / 255 + 1e-6)

    def test_deterministic(self):
        m = toy()
        x = images(1)[0]
        target = inverted_target(m(x).softmax(0).detach())
        a = pgd_attack(m, x, target, AttackConfig(steps=3))
        b = pgd_attack(m, x, target, AttackConfig(steps=3))
        for sa, sb in zip(a, b):
            self.assertTrue(torch.equal(sa.image, sb.image))

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            AttackConfig(steps=-1)
        with self.assertRaises(ValueError):
            AttackConfig(step_size=2.0)

    def test_trajectory_dump_roundtrip(self):
        m = toy()
        x = images(1)[0]
        cfg = AttackConfig(steps=3, seed=4)
        with torch.no_grad():
            clean = m(x)
        traj = pgd_attack(m, x, inverted_target(clean.softmax(0)), cfg)
        with tempfile.TemporaryDirectory() as td:
            written = save_trajectory(td, "img0", clean, traj, cfg)
            self.assertEqual(len(written), 4)
            loaded = load_trajectory(td, "img0")
        self.assertEqual([t for t, _ in loaded], [0, 1, 2, 3])
        self.assertTrue(torch.equal(loaded[0][1], clean))
        self.assertTrue(torch.equal(loaded[3][1], traj[-1].logits))


if __name__ == "__main__":
    unittest.main()
