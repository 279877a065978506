#  Evaluation of decoders on held-out text: per-sequence SER under fresh
#  ciphers, length-binned summaries, error-count histograms, bootstrap
#  aggregates, bijectivity and pooling-consistency counters, the
#  frequency-rank baseline, per-letter error profiles and throughput.

import json
import logging
import os
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
import torch

from cryptogram.cipher import (
    ALPHABET,
    LETTERS,
    NUM_LETTERS,
    CharSequence,
    CipherStream,
    cipher_rng,
    count_errors,
    encrypt,
    symbol_error_rate,
)
from cryptogram.config import hardware_string
from cryptogram.corpus import TextRecord, pad_sequences
from cryptogram.heads import CipherSolver
from cryptogram.stats import BootstrapResult, bootstrap_ser


logger = logging.getLogger(__name__)

# half-open [low, high) length bins
LENGTH_BINS = (
    (0, 32, "<32"),
    (32, 64, "32-64"),
    (64, 128, "64-128"),
    (128, 256, "128-256"),
    (256, None, ">=256"),
)
AGGREGATE_SPLIT = 128
BENCH_MAX_RELATIVE_STD = 0.1
DEFAULT_FREQ_TABLE = os.path.join(os.path.dirname(__file__), "data", "english_letter_freq.csv")


class Decoder(Protocol):
    def decode(self, ciphertexts: Sequence[Sequence[int]]) -> List[List[int]]:
        ...


class ModelDecoder:
    # adapts a CipherSolver to the Decoder protocol, batching internally
    def __init__(self, model: CipherSolver, batch_size=100, device="cpu"):
        self.model = model.to(device).eval()
        self.batch_size = batch_size
        self.device = device

    def decode(self, ciphertexts):
        out = []
        for start in range(0, len(ciphertexts), self.batch_size):
            chunk = ciphertexts[start : start + self.batch_size]
            tokens, pad_mask = pad_sequences(chunk, ALPHABET.pad_id)
            result = self.model.decode(tokens.to(self.device), pad_mask.to(self.device))
            for row, seq in zip(result.predictions.tolist(), chunk):
                out.append(row[: len(seq)])
        return out


class IdentityDecoder:
    def decode(self, ciphertexts):
        return [list(seq) for seq in ciphertexts]


def load_letter_frequencies(path=None) -> np.ndarray:
    # CSV with columns letter,frequency (any positive scale); returns fractions over A..Z
    path = path or DEFAULT_FREQ_TABLE
    table = pd.read_csv(path, comment="#")
    freq = table.set_index(table["letter"].str.upper())["frequency"]
    missing = [letter for letter in LETTERS if letter not in freq.index]
    if missing:
        raise ValueError(f"letter frequency table {path}: missing letters {missing}")
    values = freq.reindex(list(LETTERS)).to_numpy(dtype=np.float64)
    if (values < 0).any() or values.sum() <= 0:
        raise ValueError(f"letter frequency table {path}: frequencies must be non-negative")
    return values / values.sum()


class FrequencyRankDecoder:
    """
    Classical baseline: rank the ciphertext letters of each sequence by count
    and map them onto English letters ranked by frequency. Ties go to the
    lower letter id. Non-letters are copied.
    """

    def __init__(self, frequencies: Optional[np.ndarray] = None):
        if frequencies is None:
            frequencies = load_letter_frequencies()
        # stable sort keeps A before B on equal frequency
        self.english_order = [int(ix) for ix in np.argsort(-np.asarray(frequencies), kind="stable")]

    def key_for(self, ciphertext: Sequence[int]) -> List[int]:
        counts = Counter(s for s in ciphertext if ALPHABET.is_letter(s))
        cipher_order = sorted(range(NUM_LETTERS), key=lambda letter: (-counts[letter], letter))
        key = [0] * NUM_LETTERS
        for rank, letter in enumerate(cipher_order):
            key[letter] = self.english_order[rank]
        return key

    def decode(self, ciphertexts):
        out = []
        for seq in ciphertexts:
            key = self.key_for(seq)
            out.append([key[s] if ALPHABET.is_letter(s) else s for s in seq])
        return out


def length_bin(length: int) -> str:
    for low, high, label in LENGTH_BINS:
        if length >= low and (high is None or length < high):
            return label
    raise ValueError(f"length_bin: negative length {length}")


def consistency_violations(ciphertext: Sequence[int], prediction: Sequence[int]):
    """
    Returns (pooling, bijectivity) flags for one decoded sequence. Pooling is
    violated when one cipher symbol yields two different outputs; bijectivity
    when two distinct cipher letters decode to the same plaintext letter.
    """
    outputs = defaultdict(set)
    for c, p in zip(ciphertext, prediction):
        outputs[c].add(p)
    pooling = any(len(values) > 1 for values in outputs.values())
    sources = defaultdict(set)
    for c, values in outputs.items():
        if not ALPHABET.is_letter(c):
            continue
        for p in values:
            if ALPHABET.is_letter(p):
                sources[p].add(c)
    bijectivity = any(len(values) > 1 for values in sources.values())
    return pooling, bijectivity


def encrypt_records(records: Sequence[TextRecord], cipher_seed=0):
    # record i is encrypted with cipher (step 0, row i) of the evaluation stream
    stream = CipherStream(cipher_seed)
    plaintexts, ciphertexts, ciphers = [], [], []
    for row, record in enumerate(records):
        plain = CharSequence.from_text(record.text)
        cipher = stream.cipher_for(0, row)
        plaintexts.append(list(plain.symbols))
        ciphertexts.append(list(encrypt(plain, cipher).symbols))
        ciphers.append(cipher)
    return plaintexts, ciphertexts, ciphers


@dataclass
class EvalReport:
    per_sequence: pd.DataFrame
    bins: pd.DataFrame
    error_histogram: pd.DataFrame
    aggregates: Dict[str, Optional[BootstrapResult]] = field(default_factory=dict)
    bijectivity_violations: int = 0
    pooling_violations: int = 0

    @property
    def n_sequences(self) -> int:
        return len(self.per_sequence)

    def summary(self) -> Dict:
        aggregates = {
            label: None if result is None else {"mean": result.mean, "std": result.std}
            for label, result in self.aggregates.items()
        }
        return {
            "n_sequences": self.n_sequences,
            "mean_ser": float(self.per_sequence["ser"].mean()),
            "aggregates": aggregates,
            "bijectivity_violations": self.bijectivity_violations,
            "pooling_violations": self.pooling_violations,
        }

    def write(self, out_dir) -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for name, frame in (
            ("per_sequence.csv", self.per_sequence),
            ("bins.csv", self.bins),
            ("error_histogram.csv", self.error_histogram),
        ):
            path = os.path.join(out_dir, name)
            frame.to_csv(path, index=False)
            paths.append(path)
        path = os.path.join(out_dir, "summary.json")
        with open(path, "w") as fp:
            json.dump(self.summary(), fp, indent=2)
        paths.append(path)
        for path in paths:
            logger.info(f"wrote {path}")
        return paths


def _bin_table(per_sequence: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for _, _, label in LENGTH_BINS:
        sers = per_sequence.loc[per_sequence["bin"] == label, "ser"].to_numpy()
        if sers.size:
            p16, median, p84 = np.percentile(sers, [16, 50, 84])
            rows.append({"bin": label, "count": int(sers.size), "median": median, "p16": p16, "p84": p84, "mean": sers.mean()})
        else:
            rows.append({"bin": label, "count": 0, "median": np.nan, "p16": np.nan, "p84": np.nan, "mean": np.nan})
    return pd.DataFrame(rows)


def _error_histogram(per_sequence: pd.DataFrame) -> pd.DataFrame:
    counts = per_sequence.groupby(["bin", "errors"]).size().reset_index(name="count")
    order = {label: ix for ix, (_, _, label) in enumerate(LENGTH_BINS)}
    counts["_order"] = counts["bin"].map(order)
    return counts.sort_values(["_order", "errors"]).drop(columns="_order").reset_index(drop=True)


def report_from_predictions(
    ciphertexts, predictions, truths, n_bootstrap=50, seed=0
) -> EvalReport:
    rows = []
    bijectivity = 0
    pooling = 0
    for ix, (cipher, pred, truth) in enumerate(zip(ciphertexts, predictions, truths)):
        pooled_bad, bijective_bad = consistency_violations(cipher, pred)
        pooling += pooled_bad
        bijectivity += bijective_bad
        rows.append(
            {
                "index": ix,
                "length": len(truth),
                "bin": length_bin(len(truth)),
                "ser": symbol_error_rate(pred, truth),
                "errors": count_errors(pred, truth),
            }
        )
    if not rows:
        raise ValueError("evaluate: no sequences to evaluate")
    per_sequence = pd.DataFrame(rows)
    rng = cipher_rng(np.random.SeedSequence([int(seed), 0xB007]))
    aggregates = {}
    short = per_sequence["length"] < AGGREGATE_SPLIT
    for label, mask in ((f"<{AGGREGATE_SPLIT}", short), (f">={AGGREGATE_SPLIT}", ~short)):
        sers = per_sequence.loc[mask, "ser"].to_numpy()
        aggregates[label] = bootstrap_ser(sers, n_bootstrap, rng) if sers.size else None
    if bijectivity:
        logger.warning(f"{bijectivity} sequences map two cipher letters to one plaintext letter")
    if pooling:
        logger.warning(f"{pooling} sequences decode one cipher symbol inconsistently")
    return EvalReport(
        per_sequence,
        _bin_table(per_sequence),
        _error_histogram(per_sequence),
        aggregates,
        bijectivity,
        pooling,
    )


def evaluate(decoder: Decoder, records: Sequence[TextRecord], cipher_seed=0, n_bootstrap=50) -> EvalReport:
    # deterministic given the decoder and the seed
    plaintexts, ciphertexts, _ = encrypt_records(records, cipher_seed)
    predictions = decoder.decode(ciphertexts)
    return report_from_predictions(ciphertexts, predictions, plaintexts, n_bootstrap, cipher_seed)


def letter_error_rates(decoder: Decoder, records: Sequence[TextRecord], cipher_seed=0):
    # per plaintext letter: wrong decodings / occurrences
    plaintexts, ciphertexts, _ = encrypt_records(records, cipher_seed)
    predictions = decoder.decode(ciphertexts)
    errors = np.zeros(NUM_LETTERS)
    counts = np.zeros(NUM_LETTERS)
    for pred, truth in zip(predictions, plaintexts):
        for p, t in zip(pred, truth):
            if ALPHABET.is_letter(t):
                counts[t] += 1
                errors[t] += p != t
    rates = np.divide(errors, counts, out=np.zeros(NUM_LETTERS), where=counts > 0)
    return rates, counts


@dataclass
class LetterProfile:
    table: pd.DataFrame  # letter, ser, frequency, profile
    undefined: bool = False

    def write(self, path):
        self.table.to_csv(path, index=False)
        logger.info(f"wrote {path}")


def relative_letter_error(rates, frequencies) -> LetterProfile:
    """
    Weight each letter's SER by its frequency, normalize to sum 1 and
    subtract the frequency. Positive values mark letters that take more than
    their share of the errors. With no errors at all the profile is
    undefined and reported as zeros.
    """
    rates = np.asarray(rates, dtype=np.float64)
    frequencies = np.asarray(frequencies, dtype=np.float64)
    weighted = rates * frequencies
    total = weighted.sum()
    undefined = total <= 0
    if undefined:
        logger.warning("letter error profile undefined: no letter errors")
        profile = np.zeros(NUM_LETTERS)
    else:
        profile = weighted / total - frequencies
    table = pd.DataFrame(
        {"letter": list(LETTERS), "ser": rates, "frequency": frequencies, "profile": profile}
    )
    return LetterProfile(table, bool(undefined))


def letter_error_profile(decoder: Decoder, records, frequencies=None, cipher_seed=0) -> LetterProfile:
    if frequencies is None:
        frequencies = load_letter_frequencies()
    rates, _ = letter_error_rates(decoder, records, cipher_seed)
    return relative_letter_error(rates, frequencies)


@dataclass
class BenchResult:
    n_sequences: int
    length: int
    repeats: int
    batch_size: int
    mean_seconds: float
    std_seconds: float
    hardware: str

    @property
    def letters_per_second(self) -> float:
        return self.n_sequences * self.length / self.mean_seconds

    @property
    def relative_std(self) -> float:
        return self.std_seconds / self.mean_seconds

    def as_dict(self) -> Dict:
        return {
            "n_sequences": self.n_sequences,
            "length": self.length,
            "repeats": self.repeats,
            "batch_size": self.batch_size,
            "mean_seconds": self.mean_seconds,
            "std_seconds": self.std_seconds,
            "letters_per_second": self.letters_per_second,
            "relative_std": self.relative_std,
            "hardware": self.hardware,
        }


def bench_inputs(n_sequences, length, seed=0) -> torch.Tensor:
    # random letters with a space roughly every sixth symbol
    rng = cipher_rng(np.random.SeedSequence([int(seed), 0xBE4C]))
    tokens = rng.integers(0, NUM_LETTERS, size=(n_sequences, length))
    spaces = rng.random((n_sequences, length)) < 1.0 / 6.0
    tokens[spaces] = ALPHABET.id_of(" ")
    return torch.as_tensor(tokens, dtype=torch.long)


@torch.no_grad()
def throughput_bench(
    model: CipherSolver,
    n_sequences=1000,
    length=300,
    repeats=50,
    batch_size=100,
    device="cpu",
    warmup=1,
    seed=0,
) -> BenchResult:
    """
    Wall-clock time to decode n_sequences ciphertexts of `length` symbols,
    repeated `repeats` times. Batches are decoded one after another on a
    single stream; batch_size=1 gives the unbatched protocol.
    """
    if n_sequences < 1 or length < 1 or repeats < 1 or batch_size < 1:
        raise ValueError("throughput_bench: sizes must be positive")
    model = model.to(device).eval()
    tokens = bench_inputs(n_sequences, length, seed).to(device)
    pad_mask = torch.zeros_like(tokens, dtype=torch.bool)
    device_type = torch.device(device).type

    def run_once():
        for start in range(0, n_sequences, batch_size):
            model.decode(tokens[start : start + batch_size], pad_mask[start : start + batch_size])
        if device_type == "cuda":
            torch.cuda.synchronize()

    for _ in range(warmup):
        run_once()
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        run_once()
        timings.append(time.perf_counter() - start)
    timings = np.asarray(timings)
    result = BenchResult(
        n_sequences, length, repeats, batch_size, float(timings.mean()), float(timings.std()), hardware_string(device)
    )
    logger.info(f"{result.letters_per_second:,.0f} letters/s on {result.hardware}")
    if result.relative_std > BENCH_MAX_RELATIVE_STD:
        logger.warning(f"noisy timings: std/mean {result.relative_std:.1%} over {repeats} repeats")
    return result
