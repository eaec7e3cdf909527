import math
import unittest
import warnings

import numpy as np
import torch

from muser.core.contrastive import eq2_strict_loss, logits, muser_loss, pair_loss
from muser.core.encoders import TAU_INIT
from muser.core.errors import NumericsError
from muser.core.numerics import cross_entropy_diag, grad_check, l2_normalize_rows

CLOSED_FORM = -math.log(math.e / (math.e + 1))


def unit_rows(n: int, d: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    return l2_normalize_rows(rng.normal(size=(n, d)))


class LogitTests(unittest.TestCase):
    def test_orthonormal_gives_identity(self) -> None:
        eye = torch.eye(3, dtype=torch.float64)
        lm = logits(eye, eye, 0.0)
        self.assertTrue(torch.equal(lm.values, eye))
        self.assertEqual(lm.tau_used, 0.0)

    def test_identical_rows_all_ones(self) -> None:
        rows = unit_rows(1, 5, 0).repeat(4, 1)
        np.testing.assert_allclose(logits(rows, rows, 0.0).values.numpy(), np.ones((4, 4)), atol=1e-12)

    def test_cauchy_schwarz(self) -> None:
        lm = logits(unit_rows(8, 6, 1), unit_rows(8, 6, 2), TAU_INIT)
        scaled = lm.values / math.exp(TAU_INIT)
        self.assertTrue(bool((scaled.abs() <= 1 + 1e-6).all()))

    def test_learnable_tau(self) -> None:
        tau = torch.tensor(TAU_INIT, dtype=torch.float64, requires_grad=True)
        e = unit_rows(3, 4, 5)
        with warnings.catch_warnings():
            warnings.filterwarnings("error", message=".*requires_grad")
            lm = logits(e, e, tau)
            strict = eq2_strict_loss(e, e, tau)
        self.assertEqual(lm.tau_used, TAU_INIT)
        self.assertTrue(lm.values.requires_grad and strict.requires_grad)

    def test_shape_mismatch(self) -> None:
        with self.assertRaises(NumericsError):
            logits(unit_rows(3, 4, 0), unit_rows(2, 4, 0), 0.0)


class PairLossTests(unittest.TestCase):
    def test_single_pair(self) -> None:
        rows = unit_rows(1, 3, 0)
        l_rows, l_cols = pair_loss(logits(rows, rows, 1.0))
        self.assertEqual((float(l_rows), float(l_cols)), (0.0, 0.0))

    def test_symmetric_matrix(self) -> None:
        e = unit_rows(5, 3, 3)
        l_rows, l_cols = pair_loss(logits(e, e, 0.5))
        self.assertAlmostEqual(float(l_rows), float(l_cols), delta=1e-12)

    def test_identity_closed_form(self) -> None:
        eye = torch.eye(2, dtype=torch.float64)
        for value in pair_loss(logits(eye, eye, 0.0)):
            self.assertAlmostEqual(float(value), CLOSED_FORM, delta=1e-6)


class MuserLossTests(unittest.TestCase):
    def test_single_example_is_zero(self) -> None:
        e = unit_rows(1, 4, 0)
        self.assertEqual(float(muser_loss(e, e, e, TAU_INIT)), 0.0)

    def test_orthonormal_pairs(self) -> None:
        eye = torch.eye(2, dtype=torch.float64)
        self.assertAlmostEqual(float(muser_loss(eye, eye, eye, 0.0)), 0.313262, delta=1e-6)

    def test_identical_embeddings(self) -> None:
        for n in (2, 4, 8):
            e = unit_rows(1, 6, n).repeat(n, 1)
            self.assertAlmostEqual(float(muser_loss(e, e, e, TAU_INIT)), math.log(n), delta=1e-9)

    def test_without_spectrum(self) -> None:
        a, t, s = unit_rows(6, 4, 1), unit_rows(6, 4, 2), unit_rows(6, 4, 3)
        scale = math.exp(0.7)
        expected = (
            cross_entropy_diag(a @ t.t() * scale, "rows") + cross_entropy_diag(a @ t.t() * scale, "cols")
        ) / 2
        self.assertAlmostEqual(float(muser_loss(a, t, s, 0.7, spectrum_enabled=False)), float(expected), delta=1e-12)
        self.assertAlmostEqual(float(muser_loss(a, t, None, 0.7, spectrum_enabled=False)), float(expected), delta=1e-12)
        with self.assertRaises(NumericsError):
            muser_loss(a, t, None, 0.7)

    def test_sum_reduction(self) -> None:
        a, t, s = unit_rows(5, 4, 4), unit_rows(5, 4, 5), unit_rows(5, 4, 6)
        mean = float(muser_loss(a, t, s, 1.0))
        total = float(muser_loss(a, t, s, 1.0, reduction="sum"))
        self.assertAlmostEqual(total, 5 * mean, delta=1e-12)

    def test_permutation_equivariance(self) -> None:
        a, t, s = unit_rows(7, 5, 7), unit_rows(7, 5, 8), unit_rows(7, 5, 9)
        perm = torch.from_numpy(np.random.default_rng(0).permutation(7))
        base = float(muser_loss(a, t, s, TAU_INIT))
        permuted = float(muser_loss(a[perm], t[perm], s[perm], TAU_INIT))
        self.assertAlmostEqual(base, permuted, delta=1e-12)

    def test_bounds(self) -> None:
        for seed in range(20):
            n = 2 + seed % 7
            loss = float(muser_loss(unit_rows(n, 4, seed), unit_rows(n, 4, seed + 100), unit_rows(n, 4, seed + 200), TAU_INIT))
            self.assertGreaterEqual(loss, 0.0)
            self.assertLessEqual(loss, math.log(n) + 2 * math.exp(TAU_INIT))

    def test_gradients(self) -> None:
        rng = np.random.default_rng(10)
        raw = [torch.tensor(rng.normal(size=(4, 3)), requires_grad=True) for _ in range(3)]
        tau = torch.tensor(0.8, dtype=torch.float64, requires_grad=True)

        def loss_fn(params):
            a, t, s, tau_ = params
            return muser_loss(l2_normalize_rows(a), l2_normalize_rows(t), l2_normalize_rows(s), tau_)

        self.assertLess(grad_check(loss_fn, raw + [tau], eps=1e-5), 1e-4)

    def test_small_step_does_not_increase_loss(self) -> None:
        for seed in range(100):
            rng = np.random.default_rng(seed)
            raw = [torch.tensor(rng.normal(size=(4, 3)), requires_grad=True) for _ in range(3)]
            tau = torch.tensor(TAU_INIT, dtype=torch.float64, requires_grad=True)
            params = raw + [tau]

            def loss_fn():
                a, t, s = (l2_normalize_rows(p) for p in raw)
                return muser_loss(a, t, s, tau)

            before = loss_fn()
            grads = torch.autograd.grad(before, params)
            with torch.no_grad():
                for p, g in zip(params, grads):
                    p -= 1e-5 * g
            self.assertLessEqual(float(loss_fn()), float(before) + 1e-12)


class StrictLossTests(unittest.TestCase):
    def test_printed_example(self) -> None:
        eye = torch.eye(2, dtype=torch.float64)
        self.assertAlmostEqual(float(eq2_strict_loss(eye, eye, 1.0)), -1.0, delta=1e-12)

    def test_equal_similarities(self) -> None:
        rows = unit_rows(1, 3, 0).repeat(5, 1)
        self.assertAlmostEqual(float(eq2_strict_loss(rows, rows, 0.5)), math.log(4), delta=1e-9)

    def test_errors(self) -> None:
        e = unit_rows(1, 3, 0)
        with self.assertRaises(NumericsError):
            eq2_strict_loss(e, e, 1.0)
        with self.assertRaises(NumericsError):
            eq2_strict_loss(unit_rows(3, 3, 1), unit_rows(3, 3, 2), 0.0)


if __name__ == "__main__":
    unittest.main()
