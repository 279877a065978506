import unittest

import numpy as np

from cryptogram.cipher import (
    ALPHABET,
    LETTERS,
    NUM_LETTERS,
    Alphabet,
    CharSequence,
    CipherMapping,
    CipherStream,
    decrypt,
    encrypt,
    encrypt_text,
    invert,
    sample_cipher,
    symbol_error_rate,
)


PLAIN = "IN LIFE, WE MAKE THE BEST DECISIONS WE CAN WITH THE INFORMATION WE HAVE ON HAND."
CIPHER = "RJ HRIF, YF QDAF SEF BFVS KFTRVRNJV YF TDJ YRSE SEF RJINLQDSRNJ YF EDZF NJ EDJK."
KEY = "DBTKFICERGAHQJNMOLVSPZYUWX"


class TestAlphabet(unittest.TestCase):
    def test_ids_are_dense(self):
        self.assertEqual(ALPHABET.num_symbols, 36)
        self.assertEqual(ALPHABET.vocab_size, 37)
        self.assertEqual(ALPHABET.pad_id, 36)
        self.assertEqual(ALPHABET.id_of("A"), 0)
        self.assertEqual(ALPHABET.id_of("Z"), 25)
        self.assertEqual(ALPHABET.id_of(" "), 26)
        self.assertEqual(sorted(ALPHABET.encode("".join(ALPHABET.symbols))), list(range(36)))

    def test_round_trip(self):
        text = "HELLO, WORLD! IT'S \"FINE\"; OK? YES: NO-ONE."
        self.assertEqual(ALPHABET.decode(ALPHABET.encode(text)), text)

    def test_pad_never_renders(self):
        ids = ALPHABET.encode("AB") + [ALPHABET.pad_id, ALPHABET.pad_id]
        self.assertEqual(ALPHABET.decode(ids), "AB")

    def test_out_of_vocabulary(self):
        with self.assertRaises(ValueError):
            ALPHABET.encode("CAFÉ")
        with self.assertRaises(ValueError):
            ALPHABET.decode([99])
        self.assertFalse(ALPHABET.in_vocabulary("lower"))

    def test_bad_alphabets(self):
        with self.assertRaises(ValueError):
            Alphabet(letters="ABC")
        with self.assertRaises(ValueError):
            Alphabet(passthrough=" A")


class TestCipherMapping(unittest.TestCase):
    def test_rejects_non_bijection(self):
        with self.assertRaises(ValueError):
            CipherMapping((0,) * NUM_LETTERS)
        with self.assertRaises(ValueError):
            CipherMapping(tuple(range(25)))

    def test_string_form(self):
        key = CipherMapping.from_string(KEY)
        self.assertEqual(key.to_string(), KEY)
        self.assertEqual(key.perm[LETTERS.index("A")], LETTERS.index("D"))
        with self.assertRaises(ValueError):
            CipherMapping.from_string("ABC")

    def test_invert(self):
        identity = CipherMapping.identity()
        self.assertEqual(invert(identity), identity)
        swap = list(range(NUM_LETTERS))
        swap[0], swap[1] = 1, 0
        swap = CipherMapping(tuple(swap))
        self.assertEqual(invert(swap), swap)
        for seed in range(20):
            f = sample_cipher(seed)
            self.assertEqual(f.compose(invert(f)), identity)
            self.assertEqual(invert(invert(f)), f)
            inverse = invert(f)
            for i in range(NUM_LETTERS):
                self.assertEqual(inverse.perm[f.perm[i]], i)

    def test_as_matrix(self):
        matrix = CipherMapping.from_string(KEY).as_matrix()
        self.assertTrue((matrix.sum(0) == 1).all())
        self.assertTrue((matrix.sum(1) == 1).all())
        self.assertEqual(matrix[0, LETTERS.index("D")], 1)


class TestSampleCipher(unittest.TestCase):
    def test_deterministic(self):
        self.assertEqual(sample_cipher(7), sample_cipher(7))
        self.assertNotEqual(sample_cipher(7), sample_cipher(8))

    def test_bijection(self):
        for seed in range(100):
            self.assertEqual(sorted(sample_cipher(seed).perm), list(range(NUM_LETTERS)))

    def test_positions_are_uniform(self):
        # chi-square over the image of letter A, 26 cells
        draws = 20000
        counts = np.zeros(NUM_LETTERS)
        for seed in range(draws):
            counts[sample_cipher(seed).perm[0]] += 1
        expected = draws / NUM_LETTERS
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # 25 degrees of freedom, p = 0.001 critical value
        self.assertLess(chi2, 52.62)

    def test_stream(self):
        stream = CipherStream(3)
        self.assertEqual(stream.cipher_for(10, 2), CipherStream(3).cipher_for(10, 2))
        self.assertNotEqual(stream.cipher_for(10, 2), stream.cipher_for(10, 3))
        self.assertEqual(stream.ciphers(4, 3)[1], stream.cipher_for(4, 1))


class TestEncrypt(unittest.TestCase):
    def test_known_key(self):
        key = CipherMapping.from_string(KEY)
        self.assertEqual(encrypt_text(PLAIN, key), CIPHER)

    def test_identity(self):
        plain = CharSequence.from_text(PLAIN)
        out = encrypt(plain, CipherMapping.identity())
        self.assertEqual(out.symbols, plain.symbols)
        self.assertIs(out.role, CharSequence.Role.ciphertext)

    def test_round_trip(self):
        plain = CharSequence.from_text(PLAIN)
        for seed in range(10):
            f = sample_cipher(seed)
            cipher = encrypt(plain, f)
            self.assertEqual(decrypt(cipher, f).symbols, plain.symbols)
            self.assertEqual(symbol_error_rate(decrypt(cipher, f), plain), 0.0)

    def test_passthrough_kept(self):
        f = sample_cipher(1)
        out = encrypt_text(PLAIN, f)
        for a, b in zip(PLAIN, out):
            if a not in LETTERS:
                self.assertEqual(a, b)
            else:
                self.assertIn(b, LETTERS)

    def test_distinct_letters_stay_distinct(self):
        f = sample_cipher(5)
        self.assertEqual(len(set(encrypt_text(LETTERS, f))), NUM_LETTERS)

    def test_role_and_pad_checks(self):
        f = sample_cipher(0)
        cipher = encrypt(CharSequence.from_text("ABC"), f)
        with self.assertRaises(ValueError):
            encrypt(cipher, f)
        padded = CharSequence((0, ALPHABET.pad_id), CharSequence.Role.plaintext)
        with self.assertRaises(ValueError):
            encrypt(padded, f)
        with self.assertRaises(ValueError):
            encrypt(CharSequence((0, 77), CharSequence.Role.plaintext), f)


class TestSymbolErrorRate(unittest.TestCase):
    def test_basic(self):
        self.assertEqual(symbol_error_rate("ABC", "ABC"), 0.0)
        self.assertEqual(symbol_error_rate("ABC", "XYZ"), 1.0)
        self.assertEqual(symbol_error_rate("A B.", "A C,"), 0.5)

    def test_mispredicted_pair(self):
        truth = "THE SEA HAS TESTIFIED THAT AFRICA AND EUROPE HAVE KISSED."
        pred = "THE SEA HAS TESTIFIED THAT AFRICA AND EURUPE HAVE KISSED."
        self.assertEqual(len(truth), 57)
        self.assertEqual(symbol_error_rate(pred, truth), 1 / 57)

    def test_symmetric(self):
        a, b = "HELLO, WORLD", "HELLO. WORLD"
        self.assertEqual(symbol_error_rate(a, b), symbol_error_rate(b, a))

    def test_errors(self):
        with self.assertRaises(ValueError):
            symbol_error_rate("AB", "ABC")
        with self.assertRaises(ValueError):
            symbol_error_rate("", "")

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            a = rng.integers(0, 36, n).tolist()
            b = rng.integers(0, 36, n).tolist()
            wrong = 0
            for i in range(n):
                if a[i] != b[i]:
                    wrong += 1
            self.assertEqual(symbol_error_rate(a, b), wrong / n)


if __name__ == "__main__":
    unittest.main()
