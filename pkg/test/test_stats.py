import unittest

import numpy as np

from cryptogram.cipher import cipher_rng
from cryptogram.stats import bootstrap_ser, dirichlet_weights


class TestBootstrap(unittest.TestCase):
    def test_constant_values(self):
        result = bootstrap_ser([0.25] * 10)
        self.assertAlmostEqual(result.mean, 0.25, places=12)
        self.assertAlmostEqual(result.std, 0.0, places=12)
        self.assertEqual(result.samples.shape, (50,))

    def test_matches_manual_reweighting(self):
        values = np.array([0.0, 0.1, 0.5, 0.9, 0.2])
        result = bootstrap_ser(values, n_samples=20, rng=cipher_rng(7))
        rng = cipher_rng(7)
        weights = rng.standard_exponential((20, 5))
        weights /= weights.sum(1, keepdims=True)
        expected = weights @ values
        self.assertTrue(np.allclose(result.samples, expected, atol=1e-15))
        self.assertAlmostEqual(result.mean, expected.mean(), places=14)
        self.assertAlmostEqual(result.std, expected.std(), places=14)

    def test_deterministic_default(self):
        values = [0.1, 0.4, 0.3]
        self.assertEqual(bootstrap_ser(values).mean, bootstrap_ser(values).mean)

    def test_weights_are_on_the_simplex(self):
        weights = dirichlet_weights(100, 8, cipher_rng(0))
        self.assertTrue(np.allclose(weights.sum(1), 1.0))
        self.assertTrue((weights > 0).all())
        # Dirichlet(1) marginals have mean 1 / n
        self.assertAlmostEqual(weights.mean(), 1 / 8, places=12)

    def test_mean_is_near_sample_mean(self):
        values = cipher_rng(1).uniform(size=200)
        result = bootstrap_ser(values, n_samples=500)
        self.assertAlmostEqual(result.mean, values.mean(), delta=0.01)
        self.assertLess(result.std, 0.05)

    def test_two_point_moments(self):
        # with values {0, 1} the weighted mean is Beta(1, 1): mean 1/2, variance 1/12
        n = 200000
        result = bootstrap_ser([0.0, 1.0], n_samples=n, rng=cipher_rng(3))
        mean_se = np.sqrt(1 / 12 / n)
        # Var[(U - 1/2)^2] = 1/80 - 1/144 = 1/180 for U uniform on [0, 1]
        var_se = np.sqrt(1 / 180 / n)
        self.assertAlmostEqual(result.mean, 0.5, delta=5 * mean_se)
        self.assertAlmostEqual(result.samples.var(), 1 / 12, delta=5 * var_se)
        self.assertAlmostEqual(np.mean(result.samples < 0.25), 0.25, delta=5 * np.sqrt(0.25 * 0.75 / n))

    def test_errors(self):
        with self.assertRaises(ValueError):
            bootstrap_ser([])
        with self.assertRaises(ValueError):
            bootstrap_ser([0.1], n_samples=0)


if __name__ == "__main__":
    unittest.main()
