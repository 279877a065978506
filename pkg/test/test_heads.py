import unittest

import numpy as np
import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from cryptogram.backbone import ModelConfig
from cryptogram.cipher import ALPHABET, NUM_LETTERS, CipherMapping, encrypt_text, sample_cipher
from cryptogram.heads import (
    BijectiveHead,
    CipherSolver,
    HeadType,
    PermutationMatrix,
    brute_force_assignment,
    gumbel_sinkhorn,
    hard_assignment,
    letter_soft_decode,
    sample_gumbel,
    sinkhorn,
    symbol_pool,
)
from cryptogram.trainer import loss


def tiny_config():
    return ModelConfig(d_model=16, n_layers=1, n_heads=2, ffn_dim=32, size_tag="custom", context_len=128)


def padded(texts):
    ids = [ALPHABET.encode(text) for text in texts]
    tokens = torch.full((len(ids), max(map(len, ids))), ALPHABET.pad_id)
    for row, seq in enumerate(ids):
        tokens[row, : len(seq)] = torch.as_tensor(seq)
    return tokens


def reference_sinkhorn(X, iters):
    # plain-space normalization, column then row
    S = np.exp(X)
    for _ in range(iters):
        S = S / S.sum(0, keepdims=True)
        S = S / S.sum(1, keepdims=True)
    return S


class TestSymbolPool(unittest.TestCase):
    def test_means_per_symbol(self):
        states = torch.tensor([[[1.0, 0.0], [5.0, 5.0], [3.0, 2.0], [7.0, 1.0], [9.0, 9.0]]])
        tokens = torch.tensor([[0, 1, 0, 2, 36]])
        pad_mask = tokens == 36
        pooled = symbol_pool(states, tokens, pad_mask)
        self.assertEqual(pooled.embeddings.shape, (1, 36, 2))
        self.assertTrue(torch.equal(pooled.embeddings[0, 0], torch.tensor([2.0, 1.0])))
        self.assertTrue(torch.equal(pooled.embeddings[0, 2], torch.tensor([7.0, 1.0])))
        self.assertTrue(torch.equal(pooled.embeddings[0, 3], torch.zeros(2)))
        self.assertEqual(pooled.symbol_ids(), [0, 1, 2])
        self.assertEqual(pooled.scatter_index.tolist(), [[0, 1, 0, 2, -1]])

    def test_scatter(self):
        tokens = torch.tensor([[3, 4, 3]])
        pooled = symbol_pool(torch.randn(1, 3, 4), tokens, torch.zeros_like(tokens, dtype=torch.bool))
        values = torch.arange(36.0).view(1, 36, 1)
        self.assertEqual(pooled.scatter(values).squeeze(-1).tolist(), [[3.0, 4.0, 3.0]])


class TestSinkhorn(unittest.TestCase):
    def test_trivial_sizes(self):
        self.assertTrue(torch.allclose(sinkhorn(torch.tensor([[3.7]]), 1), torch.ones(1, 1)))
        self.assertTrue(torch.allclose(sinkhorn(torch.zeros(2, 2), 1), torch.full((2, 2), 0.5)))

    def test_against_reference(self):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(4, 4))
        for iters in (1, 2, 6):
            out = sinkhorn(torch.as_tensor(X), iters).numpy()
            self.assertTrue(np.allclose(out, reference_sinkhorn(X, iters), atol=1e-12))

    def test_rows_exact_columns_converge(self):
        X = torch.randn(3, 26, 26, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
        few = sinkhorn(X, 6)
        self.assertTrue(torch.allclose(few.sum(-1), torch.ones(3, 26), atol=1e-12))
        many = sinkhorn(X, 300)
        self.assertTrue(torch.allclose(many.sum(-2), torch.ones(3, 26), atol=1e-6))

    def test_zero_iterations(self):
        X = torch.randn(3, 3)
        self.assertTrue(torch.allclose(sinkhorn(X, 0), X.exp()))
        with self.assertRaises(ValueError):
            sinkhorn(X, -1)


class TestGumbelSinkhorn(unittest.TestCase):
    def test_zero_scores_without_noise(self):
        out = gumbel_sinkhorn(torch.zeros(26, 26), noise=torch.zeros(26, 26))
        self.assertTrue(torch.allclose(out, torch.full((26, 26), 1 / 26)))
        self.assertTrue(torch.equal(out, gumbel_sinkhorn(torch.zeros(26, 26), add_noise=False)))

    def test_small_tau_is_nearly_hard(self):
        perm = sample_cipher(3)
        X = torch.as_tensor(perm.as_matrix(), dtype=torch.float64) * 10
        out = gumbel_sinkhorn(X, tau=0.1, iters=6, add_noise=False)
        self.assertEqual(out.argmax(-1).tolist(), list(perm.perm))
        self.assertTrue((out.max(-1).values > 0.99).all())

    def test_noise_is_seeded(self):
        a = sample_gumbel((4, 26, 26), torch.Generator().manual_seed(5))
        b = sample_gumbel((4, 26, 26), torch.Generator().manual_seed(5))
        self.assertTrue(torch.equal(a, b))
        self.assertTrue(torch.isfinite(a).all())
        # independent draws per example
        self.assertFalse(torch.equal(a[0], a[1]))

    def test_bad_tau(self):
        with self.assertRaises(ValueError):
            gumbel_sinkhorn(torch.zeros(3, 3), tau=0.0, add_noise=False)

    def test_gradcheck(self):
        gen = torch.Generator().manual_seed(0)
        X = torch.randn(2, 4, 4, dtype=torch.float64, generator=gen, requires_grad=True)
        noise = sample_gumbel((2, 4, 4), gen, torch.float64)
        self.assertTrue(
            torch.autograd.gradcheck(lambda t: gumbel_sinkhorn(t, 1.0, 3, noise=noise), (X,))
        )


class TestHardAssignment(unittest.TestCase):
    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for n in range(2, 8):
            for _ in range(10):
                X = rng.normal(size=(n, n))
                self.assertTrue(
                    np.array_equal(hard_assignment(X).values, brute_force_assignment(X).values)
                )

    def test_ties_resolve_to_lowest_indices(self):
        # small integer matrices are full of ties; brute force returns the
        # first optimum in lexicographic order
        rng = np.random.default_rng(1)
        for n in range(2, 6):
            for _ in range(20):
                X = rng.integers(0, 3, size=(n, n)).astype(float)
                self.assertEqual(
                    hard_assignment(X).assignment.tolist(),
                    brute_force_assignment(X).assignment.tolist(),
                )

    def test_constant_matrix_gives_identity(self):
        self.assertEqual(hard_assignment(np.zeros((26, 26))).assignment.tolist(), list(range(26)))
        derangements = np.ones((3, 3)) - np.eye(3)
        self.assertEqual(hard_assignment(derangements).assignment.tolist(), [1, 2, 0])

    def test_recovers_planted_permutation(self):
        perm = sample_cipher(9)
        noise = np.random.default_rng(2).uniform(0, 0.5, size=(26, 26))
        X = torch.as_tensor(perm.as_matrix() * 5 + noise)
        self.assertEqual(hard_assignment(X).to_cipher(), perm)

    def test_input_checks(self):
        with self.assertRaises(ValueError):
            hard_assignment(np.zeros((2, 3)))
        bad = np.zeros((3, 3))
        bad[1, 2] = np.nan
        with self.assertRaises(ValueError):
            hard_assignment(bad)

    def test_permutation_matrix(self):
        with self.assertRaises(ValueError):
            PermutationMatrix(np.ones((2, 2)))
        with self.assertRaises(ValueError):
            PermutationMatrix(np.array([[1, 0], [1, 0]]))
        p = PermutationMatrix.from_assignment([2, 0, 1])
        self.assertEqual(p.values.tolist(), [[0, 0, 1], [1, 0, 0], [0, 1, 0]])


class TestBijectiveHead(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.tokens = torch.as_tensor([ALPHABET.encode("ABC, CAB.")])
        self.pad_mask = torch.zeros_like(self.tokens, dtype=torch.bool)

    def test_soft_decode(self):
        head = BijectiveHead(tiny_config(), tau=1.0)
        X = torch.randn(1, 26, 26)
        with self.assertRaises(ValueError):
            head.soft_decode(X, self.tokens, self.pad_mask)
        log_probs = head.soft_decode(X, self.tokens, self.pad_mask, torch.Generator().manual_seed(0))
        self.assertEqual(log_probs.shape, (1, 9, 36))
        probs = log_probs.exp()
        self.assertTrue(torch.allclose(probs.sum(-1), torch.ones(1, 9), atol=1e-6))
        comma = ALPHABET.id_of(",")
        self.assertAlmostEqual(probs[0, 3, comma].item(), 1.0, places=6)
        # both A positions read the same row of the soft permutation
        self.assertTrue(torch.equal(log_probs[0, 0], log_probs[0, 6]))

    def test_letter_soft_decode_with_permutation(self):
        f = sample_cipher(1)
        soft = torch.as_tensor(f.as_matrix(), dtype=torch.float32).unsqueeze(0)
        out = letter_soft_decode(soft, self.tokens, self.pad_mask).argmax(-1)
        expected = [f.perm[t] if t < NUM_LETTERS else t for t in self.tokens[0].tolist()]
        self.assertEqual(out[0].tolist(), expected)

    def test_hard_decode(self):
        f = sample_cipher(4)
        X = torch.as_tensor(f.as_matrix(), dtype=torch.float32).unsqueeze(0) * 3
        predictions, perms = BijectiveHead.hard_decode(X, self.tokens, self.pad_mask)
        self.assertEqual(perms[0].to_cipher(), f)
        expected = [f.perm[t] if t < NUM_LETTERS else t for t in self.tokens[0].tolist()]
        self.assertEqual(predictions[0].tolist(), expected)

    def test_forward_shape_and_gradient(self):
        head = BijectiveHead(tiny_config())
        pooled = symbol_pool(torch.randn(2, 9, 16), self.tokens.repeat(2, 1), self.pad_mask.repeat(2, 1))
        X = head(pooled)
        self.assertEqual(X.shape, (2, 26, 26))
        X.sum().backward()
        self.assertIsNotNone(head.query.grad)

    def test_bad_tau(self):
        with self.assertRaises(ValueError):
            BijectiveHead(tiny_config(), tau=0)


class TestCipherSolver(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        text = "THE SEA HAS TESTIFIED THAT AFRICA AND EUROPE HAVE KISSED."
        cipher = encrypt_text(text, sample_cipher(6))
        short = encrypt_text("ATTACK AT DAWN.", sample_cipher(7))
        self.tokens = padded([cipher, short])
        self.targets = padded([text, "ATTACK AT DAWN."])
        self.pad_mask = self.tokens == ALPHABET.pad_id

    def check_consistency(self, predictions):
        for row in range(self.tokens.shape[0]):
            seen = {}
            for token, predicted in zip(self.tokens[row].tolist(), predictions[row].tolist()):
                if token == ALPHABET.pad_id:
                    self.assertEqual(predicted, ALPHABET.pad_id)
                    continue
                self.assertEqual(seen.setdefault(token, predicted), predicted)

    def test_standard_head(self):
        model = CipherSolver(tiny_config()).eval()
        self.assertIs(model.head_type, HeadType.standard)
        out = model(self.tokens, self.pad_mask)
        self.assertEqual(out.logits.shape, (2, 57, 36))
        self.assertIsNone(out.permutation_logits)
        result = model.decode(self.tokens)
        self.assertIsNone(result.permutations)
        self.check_consistency(result.predictions)

    def test_bijective_head(self):
        model = CipherSolver(tiny_config(), head="bijective").eval()
        self.assertTrue(model.is_bijective)
        out = model(self.tokens, self.pad_mask, generator=torch.Generator().manual_seed(0))
        self.assertEqual(out.permutation_logits.shape, (2, 26, 26))
        result = model.decode(self.tokens)
        self.check_consistency(result.predictions)
        for row, perm in enumerate(result.permutations):
            # distinct ciphertext letters never share a plaintext letter
            self.assertEqual(sorted(perm.assignment.tolist()), list(range(26)))
            for token, predicted in zip(self.tokens[row].tolist(), result.predictions[row].tolist()):
                if ALPHABET.num_symbols > token >= NUM_LETTERS:
                    self.assertEqual(token, predicted)

    def test_decode_single_sequence(self):
        model = CipherSolver(tiny_config()).eval()
        single = model.decode(self.tokens[0])
        batched = model.decode(self.tokens[:1])
        self.assertTrue(torch.equal(single.predictions, batched.predictions))

    def test_training_path_needs_noise(self):
        model = CipherSolver(tiny_config(), head=HeadType.bijective)
        with self.assertRaises(ValueError):
            model(self.tokens, self.pad_mask)

    def check_parameter_gradients(self, head):
        # two-layer model in float64; gradients of the training loss with
        # respect to sampled entries of sampled parameters
        config = ModelConfig(d_model=8, n_layers=2, n_heads=2, ffn_dim=16, size_tag="custom", context_len=128)
        model = CipherSolver(config, head).double()
        gen = torch.Generator().manual_seed(4)
        with torch.no_grad():
            for param in model.parameters():
                param.copy_(torch.randn(param.shape, generator=gen, dtype=param.dtype) * 0.3)
        noise = sample_gumbel((2, 26, 26), gen, torch.float64)
        names = [name for name, _ in model.named_parameters()]
        chosen = [names[i] for i in torch.randperm(len(names), generator=gen)[:3].tolist()]
        chosen.append(next(name for name in names if name.startswith("head.")))
        params = dict(model.named_parameters())
        for name in chosen:
            base = params[name].detach()
            index = torch.randperm(base.numel(), generator=gen)[:6]
            entries = base.flatten()[index].clone().requires_grad_(True)

            def objective(values):
                weight = base.flatten().index_put((index,), values).view_as(base)
                out = functional_call(model, {name: weight}, (self.tokens, self.pad_mask), {"noise": noise})
                return loss(out.logits, self.targets, self.pad_mask)

            self.assertTrue(gradcheck(objective, (entries,), eps=1e-6, atol=1e-5, rtol=1e-3), name)

    def test_standard_parameter_gradients(self):
        self.check_parameter_gradients("standard")

    def test_bijective_parameter_gradients(self):
        self.check_parameter_gradients("bijective")

    def test_identity_cipher_matrix(self):
        self.assertEqual(hard_assignment(CipherMapping.identity().as_matrix()).to_cipher(), CipherMapping.identity())


if __name__ == "__main__":
    unittest.main()
