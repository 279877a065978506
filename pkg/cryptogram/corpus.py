#  Corpus cleaning, fixed-length segment construction, train/test splitting
#  and on-the-fly encrypted batch assembly.

import json
import logging
import os
import re
import unicodedata
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch

from cryptogram.cipher import ALPHABET, CharSequence, CipherMapping, cipher_rng, encrypt
from cryptogram.errors import CorpusError


logger = logging.getLogger(__name__)

MIN_RECORD_LEN = 15
MAX_RECORD_LEN = 300
SEGMENT_TARGET_LEN = 256
SEGMENTS_PER_LANGUAGE = 25000
HISTOGRAM_BIN_WIDTH = 5

# typographic variants folded onto the ASCII passthrough symbols before the
# vocabulary check
_TYPOGRAPHIC = {
    "‘": "'",
    "’": "'",
    "“": '"',
    "”": '"',
    "–": "-",
    "—": "-",
    "…": "...",
}
_CLOSING_PUNCT = ".,!?;:"
_SPACE_BEFORE_PUNCT = re.compile(r"\s+([" + re.escape(_CLOSING_PUNCT) + r"])")
_NO_SPACE_AFTER_PUNCT = re.compile(r"([" + re.escape(_CLOSING_PUNCT) + r"])(?=[A-Z])")
_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class TextRecord:
    text: str
    length: int
    language: Optional[str] = None
    split: Optional[str] = None

    @staticmethod
    def of(text, language=None, split=None):
        return TextRecord(text, len(text), language, split)

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False)


@dataclass
class IngestReport:
    lines_read: int = 0
    records_kept: int = 0
    drop_reasons: Counter = field(default_factory=Counter)
    length_histogram: Counter = field(default_factory=Counter)
    segments_per_language: Counter = field(default_factory=Counter)

    def record_drop(self, reason):
        self.drop_reasons[reason] += 1

    def record_kept(self, length):
        self.records_kept += 1
        low = (length // HISTOGRAM_BIN_WIDTH) * HISTOGRAM_BIN_WIDTH
        self.length_histogram[low] += 1

    def as_dict(self) -> Dict:
        return {
            "lines_read": self.lines_read,
            "records_kept": self.records_kept,
            "drop_reasons": dict(sorted(self.drop_reasons.items())),
            "length_histogram": {
                f"{low}-{low + HISTOGRAM_BIN_WIDTH - 1}": count
                for low, count in sorted(self.length_histogram.items())
            },
            "segments_per_language": dict(sorted(self.segments_per_language.items())),
        }

    def write(self, path):
        with open(path, "w") as fp:
            json.dump(self.as_dict(), fp, indent=2)
        logger.info(f"wrote ingest report {path}")


def fold_accents(text: str) -> str:
    # "Équipe à côté" -> "Equipe a cote"
    decomposed = unicodedata.normalize("NFKD", text)
    return "".join(ch for ch in decomposed if not unicodedata.combining(ch))


def normalize_text(line: str, accent_folding=False) -> str:
    text = line.strip()
    for fancy, plain in _TYPOGRAPHIC.items():
        text = text.replace(fancy, plain)
    if accent_folding:
        text = fold_accents(text)
    text = text.upper()
    text = _WHITESPACE.sub(" ", text)
    # no space before closing punctuation, one space after unless it ends the
    # sequence or another symbol follows directly (quotes, ellipses)
    text = _SPACE_BEFORE_PUNCT.sub(r"\1", text)
    text = _NO_SPACE_AFTER_PUNCT.sub(r"\1 ", text)
    return text.strip()


class CorpusCleaner:
    def __init__(
        self,
        min_len=MIN_RECORD_LEN,
        max_len=MAX_RECORD_LEN,
        accent_folding=False,
        alphabet=ALPHABET,
    ):
        if min_len < 1 or max_len < min_len:
            raise ValueError(f"CorpusCleaner: bad length bounds [{min_len}, {max_len}]")
        self.min_len = min_len
        self.max_len = max_len
        self.accent_folding = accent_folding
        self.alphabet = alphabet
        self.report = IngestReport()

    def clean_line(self, line: str, language=None) -> Optional[TextRecord]:
        self.report.lines_read += 1
        text = normalize_text(line, self.accent_folding)
        if not text:
            self.report.record_drop("empty")
            return None
        if not self.alphabet.in_vocabulary(text):
            self.report.record_drop("out_of_vocabulary")
            return None
        if len(text) < self.min_len:
            self.report.record_drop("too_short")
            return None
        if len(text) > self.max_len:
            self.report.record_drop("too_long")
            return None
        self.report.record_kept(len(text))
        return TextRecord.of(text, language)

    def clean(self, raw_lines: Iterable) -> List[TextRecord]:
        # raw_lines holds plain strings or (text, language) pairs
        records = []
        for raw in raw_lines:
            if isinstance(raw, tuple):
                text, language = raw
            else:
                text, language = raw, None
            record = self.clean_line(text, language)
            if record is not None:
                records.append(record)
        if not records:
            raise CorpusError(
                "corpus is empty after cleaning", self.report.as_dict()
            )
        logger.info(
            f"kept {len(records)} of {self.report.lines_read} lines, "
            f"dropped {dict(self.report.drop_reasons)}"
        )
        return records


def clean_corpus(raw_lines, min_len=MIN_RECORD_LEN, max_len=MAX_RECORD_LEN, accent_folding=False):
    return CorpusCleaner(min_len, max_len, accent_folding).clean(raw_lines)


def build_segments(
    rows: Iterable,
    target_len=SEGMENT_TARGET_LEN,
    per_language_cap: Optional[int] = None,
    report: Optional[IngestReport] = None,
) -> List[TextRecord]:
    """
    Accumulate whitespace-delimited words into a buffer until the joined
    buffer reaches target_len characters, then emit it as one record and keep
    going with the remaining words. Words are never split; a trailing buffer
    shorter than target_len is discarded. Buffers are kept per language so a
    segment never mixes languages.
    """
    if target_len < 1:
        raise ValueError(f"build_segments: target_len must be positive, got {target_len}")
    segments = []
    buffers: Dict[Optional[str], List[str]] = {}
    buffer_lens: Dict[Optional[str], int] = {}
    emitted: Counter = Counter()
    for row in rows:
        if isinstance(row, TextRecord):
            text, language = row.text, row.language
        elif isinstance(row, tuple):
            text, language = row
        else:
            text, language = row, None
        if per_language_cap is not None and emitted[language] >= per_language_cap:
            continue
        buffer = buffers.setdefault(language, [])
        for word in fold_accents(text).split():
            # joined length grows by the word plus one separating space
            buffer_lens[language] = buffer_lens.get(language, -1) + len(word) + 1
            buffer.append(word)
            if buffer_lens[language] >= target_len:
                segments.append(TextRecord.of(" ".join(buffer), language))
                emitted[language] += 1
                buffer.clear()
                buffer_lens[language] = -1
                if per_language_cap is not None and emitted[language] >= per_language_cap:
                    break
    for language, buffer in buffers.items():
        if buffer:
            logger.debug(f"discarding trailing {language} buffer of {len(buffer)} words")
    if report is not None:
        report.segments_per_language.update(
            {str(language): count for language, count in emitted.items()}
        )
    return segments


def split(records: Sequence[TextRecord], train_frac=0.975, seed=0):
    if not records:
        raise ValueError("split: no records to split")
    if not 0.0 < train_frac <= 1.0:
        raise ValueError(f"split: train_frac must be in (0, 1], got {train_frac}")
    order = cipher_rng(np.random.SeedSequence([int(seed), 0x5EED])).permutation(len(records))
    n_train = int(round(len(records) * train_frac))
    train = [replace(records[ix], split="train") for ix in order[:n_train]]
    test = [replace(records[ix], split="test") for ix in order[n_train:]]
    return train, test


def read_corpus_file(path: str) -> List[Tuple[str, Optional[str]]]:
    # .txt: one record per line; .jsonl: {"text": ..., "lang": ...} per line
    rows = []
    try:
        with open(path, encoding="utf-8") as fp:
            if path.endswith(".jsonl"):
                for line in fp:
                    if not line.strip():
                        continue
                    obj = json.loads(line)
                    rows.append((obj["text"], obj.get("lang", obj.get("language"))))
            else:
                for line in fp:
                    rows.append((line.rstrip("\n"), None))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise CorpusError(f"cannot read corpus file {path}: {e}", path) from e
    return rows


def write_records(records: Iterable[TextRecord], path: str):
    count = 0
    with open(path, "w", encoding="utf-8") as fp:
        for record in records:
            fp.write(record.to_json() + "\n")
            count += 1
    logger.info(f"wrote {count} records to {path}")


def read_records(path: str) -> List[TextRecord]:
    if not os.path.exists(path):
        raise CorpusError(f"record file {path} does not exist", path)
    records = []
    with open(path, encoding="utf-8") as fp:
        for line in fp:
            if line.strip():
                records.append(TextRecord(**json.loads(line)))
    return records


@dataclass
class Batch:
    tokens: torch.Tensor  # [batch, max_len] ciphertext ids, pad-suffixed
    pad_mask: torch.Tensor  # [batch, max_len] True at pad positions
    targets: torch.Tensor  # [batch, max_len] plaintext ids, pad-suffixed
    ciphers: List[CipherMapping]

    def __len__(self):
        return self.tokens.shape[0]

    def to(self, device):
        return Batch(
            self.tokens.to(device),
            self.pad_mask.to(device),
            self.targets.to(device),
            self.ciphers,
        )


def pad_sequences(sequences: Sequence[Sequence[int]], pad_id: int):
    max_len = max(len(seq) for seq in sequences)
    out = torch.full((len(sequences), max_len), pad_id, dtype=torch.long)
    for row, seq in enumerate(sequences):
        out[row, : len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
    return out, out == pad_id


def make_batch(
    records: Sequence[TextRecord],
    cipher_source,
    step=0,
    context_len=None,
    alphabet=ALPHABET,
) -> Batch:
    # cipher_source is anything with cipher_for(step, row): a CipherStream for
    # fresh ciphers, or a CipherPool for the generalization experiments
    if not records:
        raise ValueError("make_batch: empty record list")
    plaintexts = []
    ciphertexts = []
    ciphers = []
    for row, record in enumerate(records):
        if context_len is not None and record.length > context_len:
            raise ValueError(
                f"make_batch: record of length {record.length} exceeds "
                f"context length {context_len}"
            )
        plain = CharSequence.from_text(record.text, alphabet=alphabet)
        cipher = cipher_source.cipher_for(step, row)
        plaintexts.append(plain.symbols)
        ciphertexts.append(encrypt(plain, cipher, alphabet).symbols)
        ciphers.append(cipher)
    tokens, pad_mask = pad_sequences(ciphertexts, alphabet.pad_id)
    targets, _ = pad_sequences(plaintexts, alphabet.pad_id)
    return Batch(tokens, pad_mask, targets, ciphers)


class BatchSampler:
    """
    Picks the records of each training step. Selection is a function of
    (seed, step) only, so a resumed run sees exactly the batches it would
    have seen without the interruption.
    """

    def __init__(self, records: Sequence[TextRecord], batch_size=96, seed=0):
        if not records:
            raise ValueError("BatchSampler: no records")
        if batch_size < 1:
            raise ValueError(f"BatchSampler: batch_size must be positive, got {batch_size}")
        self.records = list(records)
        self.batch_size = batch_size
        self.seed = int(seed)

    def records_for(self, step: int) -> List[TextRecord]:
        rng = cipher_rng(np.random.SeedSequence([self.seed, int(step), 0xBA7C]))
        picks = rng.integers(0, len(self.records), size=self.batch_size)
        return [self.records[ix] for ix in picks]

    def batch_for(self, step: int, cipher_source, context_len=None) -> Batch:
        return make_batch(self.records_for(step), cipher_source, step, context_len)
