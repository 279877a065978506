#  Alphabets, monoalphabetic substitution ciphers and the symbol error rate.
#
#  Letters are the 26 uppercase letters A-Z (ids 0..25), followed by the
#  passthrough symbols that are never encrypted, followed by a single padding
#  symbol. Every object here is immutable and every operation is a pure
#  function of its arguments.

import string
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np


LETTERS = string.ascii_uppercase
# space first so that the most frequent passthrough symbol has the lowest id
PASSTHROUGH = " .,'\"!?;:-"
PAD_SYMBOL = "<pad>"
NUM_LETTERS = len(LETTERS)


class Alphabet:
    def __init__(self, letters=LETTERS, passthrough=PASSTHROUGH):
        if len(letters) != NUM_LETTERS or len(set(letters)) != NUM_LETTERS:
            raise ValueError("Alphabet: need exactly 26 distinct letters")
        if set(letters) & set(passthrough):
            raise ValueError("Alphabet: passthrough overlaps letters")
        if len(set(passthrough)) != len(passthrough):
            raise ValueError("Alphabet: passthrough symbols must be distinct")
        self.letters = tuple(letters)
        self.passthrough = tuple(passthrough)
        self.symbols = self.letters + self.passthrough
        self.pad_id = len(self.symbols)
        self._ids = {symbol: ix for ix, symbol in enumerate(self.symbols)}

    @property
    def num_symbols(self) -> int:
        # size of the output vocabulary, pad excluded
        return len(self.symbols)

    @property
    def vocab_size(self) -> int:
        # size of the input vocabulary, pad included
        return len(self.symbols) + 1

    def is_letter(self, symbol_id: int) -> bool:
        return 0 <= symbol_id < NUM_LETTERS

    def is_valid(self, symbol_id: int) -> bool:
        return 0 <= symbol_id < self.num_symbols

    def id_of(self, symbol: str) -> int:
        if symbol not in self._ids:
            raise ValueError(f"Alphabet: symbol {symbol!r} is out of vocabulary")
        return self._ids[symbol]

    def encode(self, text: str) -> List[int]:
        return [self.id_of(ch) for ch in text]

    def decode(self, symbol_ids: Iterable[int]) -> str:
        # pad never renders; any other invalid id is an error
        chars = []
        for symbol_id in symbol_ids:
            symbol_id = int(symbol_id)
            if symbol_id == self.pad_id:
                continue
            if not self.is_valid(symbol_id):
                raise ValueError(f"Alphabet: unknown symbol id {symbol_id}")
            chars.append(self.symbols[symbol_id])
        return "".join(chars)

    def in_vocabulary(self, text: str) -> bool:
        return all(ch in self._ids for ch in text)

    def __repr__(self):
        return "Alphabet(letters={}, passthrough={!r}, pad_id={})".format(
            "".join(self.letters), "".join(self.passthrough), self.pad_id
        )


ALPHABET = Alphabet()


@dataclass(frozen=True)
class CipherMapping:
    # perm[i] is the image of letter i
    perm: Tuple[int, ...]

    def __post_init__(self):
        perm = tuple(int(p) for p in self.perm)
        if sorted(perm) != list(range(NUM_LETTERS)):
            raise ValueError(f"CipherMapping: not a bijection over 26 letters: {perm}")
        object.__setattr__(self, "perm", perm)

    @staticmethod
    def identity() -> "CipherMapping":
        return CipherMapping(tuple(range(NUM_LETTERS)))

    @staticmethod
    def from_string(key: str) -> "CipherMapping":
        # key lists the images of A..Z in order, e.g. "DBTKFICERGAHQJNMOLVSPZYUWX"
        key = key.strip().upper()
        if len(key) != NUM_LETTERS:
            raise ValueError(f"CipherMapping: key must have 26 letters, got {key!r}")
        return CipherMapping(tuple(LETTERS.index(ch) for ch in key))

    def to_string(self) -> str:
        return "".join(LETTERS[p] for p in self.perm)

    def compose(self, other: "CipherMapping") -> "CipherMapping":
        # (self o other)(i) = self(other(i))
        return CipherMapping(tuple(self.perm[p] for p in other.perm))

    def as_matrix(self) -> np.ndarray:
        # row = source letter, column = image letter
        matrix = np.zeros((NUM_LETTERS, NUM_LETTERS), dtype=np.int64)
        matrix[np.arange(NUM_LETTERS), self.perm] = 1
        return matrix

    def __str__(self):
        return self.to_string()


@dataclass(frozen=True)
class CharSequence:
    class Role(Enum):
        plaintext = 1
        ciphertext = 2
        prediction = 3

    symbols: Tuple[int, ...]
    role: "CharSequence.Role"

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(int(s) for s in self.symbols))

    @staticmethod
    def from_text(text, role=None, alphabet=ALPHABET):
        if role is None:
            role = CharSequence.Role.plaintext
        return CharSequence(tuple(alphabet.encode(text)), role)

    def to_text(self, alphabet=ALPHABET) -> str:
        return alphabet.decode(self.symbols)

    def __len__(self):
        return len(self.symbols)


SeedLike = Union[int, np.random.SeedSequence]


def cipher_rng(seed: SeedLike) -> np.random.Generator:
    # Philox is counter-based, so a given seed yields the same stream on every
    # platform numpy supports
    return np.random.Generator(np.random.Philox(seed))


def sample_cipher(seed: SeedLike) -> CipherMapping:
    # Fisher-Yates over the 26 letter ids; uniform over all 26! permutations
    rng = cipher_rng(seed)
    perm = list(range(NUM_LETTERS))
    for i in range(NUM_LETTERS - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return CipherMapping(tuple(perm))


def invert(f: CipherMapping) -> CipherMapping:
    inverse = [0] * NUM_LETTERS
    for i, image in enumerate(f.perm):
        inverse[image] = i
    return CipherMapping(tuple(inverse))


def _substitute(symbols, f: CipherMapping, alphabet: Alphabet) -> Tuple[int, ...]:
    out = []
    for symbol_id in symbols:
        if symbol_id == alphabet.pad_id or not alphabet.is_valid(symbol_id):
            raise ValueError(f"cannot substitute symbol id {symbol_id}")
        if alphabet.is_letter(symbol_id):
            out.append(f.perm[symbol_id])
        else:
            out.append(symbol_id)
    return tuple(out)


def encrypt(x: CharSequence, f: CipherMapping, alphabet=ALPHABET) -> CharSequence:
    if x.role is not CharSequence.Role.plaintext:
        raise ValueError(f"encrypt: expected a plaintext sequence, got {x.role.name}")
    return CharSequence(_substitute(x.symbols, f, alphabet), CharSequence.Role.ciphertext)


def decrypt(c: CharSequence, f: CipherMapping, alphabet=ALPHABET) -> CharSequence:
    # f is the encryption key; decryption applies its inverse
    if c.role is not CharSequence.Role.ciphertext:
        raise ValueError(f"decrypt: expected a ciphertext sequence, got {c.role.name}")
    return CharSequence(
        _substitute(c.symbols, invert(f), alphabet), CharSequence.Role.plaintext
    )


def encrypt_text(text: str, f: CipherMapping, alphabet=ALPHABET) -> str:
    return encrypt(CharSequence.from_text(text, alphabet=alphabet), f, alphabet).to_text(
        alphabet
    )


def _symbols_of(seq) -> Sequence:
    if isinstance(seq, CharSequence):
        return seq.symbols
    return seq


def symbol_error_rate(pred, truth) -> float:
    # Fraction of positions where pred and truth differ. Letters, spaces and
    # punctuation all count. Accepts CharSequences, id lists or strings.
    pred_symbols = _symbols_of(pred)
    truth_symbols = _symbols_of(truth)
    if len(pred_symbols) != len(truth_symbols):
        raise ValueError(
            "symbol_error_rate: length mismatch {} != {}".format(
                len(pred_symbols), len(truth_symbols)
            )
        )
    if len(truth_symbols) == 0:
        raise ValueError("symbol_error_rate: empty sequences")
    errors = sum(1 for p, t in zip(pred_symbols, truth_symbols) if p != t)
    return errors / len(truth_symbols)


def count_errors(pred, truth) -> int:
    pred_symbols = _symbols_of(pred)
    truth_symbols = _symbols_of(truth)
    if len(pred_symbols) != len(truth_symbols):
        raise ValueError("count_errors: length mismatch")
    return sum(1 for p, t in zip(pred_symbols, truth_symbols) if p != t)


class CipherStream:
    """
    Deterministic cipher source. The cipher handed to (step, row) depends only
    on the base seed and those two integers, so batching order, worker count
    and resuming from a checkpoint never change which cipher a record gets.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def seed_for(self, step: int, row: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, int(step), int(row)])

    def cipher_for(self, step: int, row: int) -> CipherMapping:
        return sample_cipher(self.seed_for(step, row))

    def ciphers(self, step: int, count: int) -> List[CipherMapping]:
        return [self.cipher_for(step, row) for row in range(count)]
