#  Looking inside a trained solver: decoding intermediate layers with the
#  model's own output pipeline, probes on raw layer activations, n-gram
#  similarity of probe outputs, attention map export and direct key recovery
#  from the bijective head.

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from cryptogram.cipher import ALPHABET, LETTERS, NUM_LETTERS, CipherMapping, invert, symbol_error_rate
from cryptogram.corpus import TextRecord, pad_sequences
from cryptogram.errors import ConfigError, HeadMismatchError
from cryptogram.evaluation import encrypt_records
from cryptogram.heads import CipherSolver, DecodeResult, PermutationMatrix


logger = logging.getLogger(__name__)

PROBE_KINDS = ("linear", "mlp")
DEFAULT_NGRAM_RANGE = range(1, 9)


def _as_batch(tokens, pad_mask=None):
    if isinstance(tokens, str):
        tokens = ALPHABET.encode(tokens)
    if not isinstance(tokens, torch.Tensor):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens.unsqueeze(0)
    if pad_mask is None:
        pad_mask = tokens == ALPHABET.pad_id
    return tokens, pad_mask


def _check_layer(model: CipherSolver, layer: int):
    if not 1 <= layer <= model.config.n_layers:
        raise ValueError(
            f"early_exit: layer must lie in [1, {model.config.n_layers}], got {layer}"
        )


@torch.no_grad()
def early_exit(model: CipherSolver, tokens, layer: int, pad_mask=None) -> DecodeResult:
    """
    Decode the activations after block `layer` with the final RMSNorm,
    token pooling and the model's head. At layer == n_layers this is the
    model's normal output.
    """
    _check_layer(model, layer)
    tokens, pad_mask = _as_batch(tokens, pad_mask)
    hidden = model.backbone(tokens, pad_mask)
    normed = model.backbone.final_norm(hidden.layers[layer])
    return model.decode_states(normed, tokens, pad_mask)


@torch.no_grad()
def early_exit_all(model: CipherSolver, tokens, pad_mask=None) -> List[DecodeResult]:
    # one backbone pass, decoded at every layer 1..n_layers
    tokens, pad_mask = _as_batch(tokens, pad_mask)
    hidden = model.backbone(tokens, pad_mask)
    return [
        model.decode_states(model.backbone.final_norm(states), tokens, pad_mask)
        for states in hidden.layers[1:]
    ]


def early_exit_table(model: CipherSolver, ciphertext: str) -> pd.DataFrame:
    # per-layer decoding of one sequence; `changed` marks positions that
    # differ from the previous layer
    results = early_exit_all(model, ciphertext)
    rows = []
    previous = ciphertext
    for layer, result in enumerate(results, start=1):
        text = ALPHABET.decode(result.predictions[0].tolist())
        changed = "".join("^" if a != b else " " for a, b in zip(text, previous))
        row = {"layer": layer, "text": text, "changed": changed, "n_changed": changed.count("^")}
        if result.permutations is not None:
            row["key"] = result.permutations[0].to_cipher().to_string()
        rows.append(row)
        previous = text
    return pd.DataFrame(rows)


def render_early_exit_table(table: pd.DataFrame, ciphertext: str) -> str:
    width = len(str(int(table["layer"].max())))
    lines = [f"{'in':>{width}}  {ciphertext}"]
    for row in table.itertuples():
        lines.append(f"{row.layer:>{width}}  {row.text}")
        if row.n_changed:
            lines.append(f"{'':>{width}}  {row.changed.rstrip()}")
    return "\n".join(lines)


@torch.no_grad()
def early_exit_curve(model: CipherSolver, records: Sequence[TextRecord], cipher_seed=0, batch_size=100) -> pd.DataFrame:
    """
    Mean SER of the early-exit decoding at each layer over `records`.
    Whether the curve is monotone is reported, not enforced.
    """
    plaintexts, ciphertexts, _ = encrypt_records(records, cipher_seed)
    per_layer = [[] for _ in range(model.config.n_layers)]
    for start in range(0, len(ciphertexts), batch_size):
        chunk = ciphertexts[start : start + batch_size]
        truths = plaintexts[start : start + batch_size]
        tokens, pad_mask = pad_sequences(chunk, ALPHABET.pad_id)
        for layer, result in enumerate(early_exit_all(model, tokens, pad_mask)):
            for pred, truth in zip(result.predictions.tolist(), truths):
                per_layer[layer].append(symbol_error_rate(pred[: len(truth)], truth))
    curve = pd.DataFrame(
        {
            "layer": range(1, model.config.n_layers + 1),
            "mean_ser": [float(np.mean(sers)) for sers in per_layer],
        }
    )
    monotone = bool((curve["mean_ser"].diff().dropna() <= 0).all())
    logger.info(f"early exit SER by layer: {curve['mean_ser'].round(4).tolist()} (monotone: {monotone})")
    curve.attrs["monotone"] = monotone
    return curve


@dataclass
class ProbeSpec:
    kind: str = "linear"
    layer_index: int = 1
    # mlp only; None means the model dimension
    hidden_dim: Optional[int] = None
    steps: int = 5000
    batch_size: int = 96
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def perform_checks(self) -> List[str]:
        problems = []
        if self.kind not in PROBE_KINDS:
            problems.append(f"probe.kind: must be one of {list(PROBE_KINDS)}, got {self.kind!r}")
        if self.layer_index < 0:
            problems.append(f"probe.layer_index: must be non-negative, got {self.layer_index}")
        for name in ("steps", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"probe.{name}: must be positive, got {getattr(self, name)}")
        if self.hidden_dim is not None and self.hidden_dim < 1:
            problems.append(f"probe.hidden_dim: must be positive, got {self.hidden_dim}")
        if self.lr < 0:
            problems.append(f"probe.lr: must be non-negative, got {self.lr}")
        return problems


class Probe(nn.Module):
    def __init__(self, spec: ProbeSpec, d_model: int, num_symbols=ALPHABET.num_symbols):
        super().__init__()
        self.spec = spec
        if spec.kind == "linear":
            self.net = nn.Linear(d_model, num_symbols)
        else:
            hidden = spec.hidden_dim or d_model
            self.net = nn.Sequential(nn.Linear(d_model, hidden), nn.ReLU(), nn.Linear(hidden, num_symbols))

    def forward(self, features):
        return self.net(features)

    @torch.no_grad()
    def decode(self, activations: "LayerActivations") -> List[List[int]]:
        self.eval()
        return [self(features).argmax(-1).tolist() for features in activations.features]


@dataclass
class LayerActivations:
    # raw per-position activations of one layer, one tensor per record;
    # no final RMSNorm and no token pooling
    layer: int
    features: List[torch.Tensor] = field(default_factory=list)  # [len, d_model] each
    targets: List[torch.Tensor] = field(default_factory=list)  # [len] plaintext ids

    @property
    def d_model(self) -> int:
        return self.features[0].shape[-1]

    def __len__(self):
        return len(self.features)


@torch.no_grad()
def harvest_activations(
    model: CipherSolver, records: Sequence[TextRecord], layers: Iterable[int], cipher_seed=0, batch_size=100
) -> Dict[int, LayerActivations]:
    layers = list(layers)
    for layer in layers:
        if not 0 <= layer <= model.config.n_layers:
            raise ValueError(f"harvest_activations: no layer {layer}")
    model.eval()
    plaintexts, ciphertexts, _ = encrypt_records(records, cipher_seed)
    harvested = {layer: LayerActivations(layer) for layer in layers}
    for start in range(0, len(ciphertexts), batch_size):
        chunk = ciphertexts[start : start + batch_size]
        truths = plaintexts[start : start + batch_size]
        tokens, pad_mask = pad_sequences(chunk, ALPHABET.pad_id)
        hidden = model.backbone(tokens, pad_mask)
        for layer in layers:
            states = hidden.layers[layer].float().cpu()
            for row, truth in enumerate(truths):
                harvested[layer].features.append(states[row, : len(truth)].clone())
                harvested[layer].targets.append(torch.as_tensor(truth, dtype=torch.long))
    return harvested


def train_probe(spec: ProbeSpec, activations: LayerActivations) -> Probe:
    """
    Per-position cross-entropy on frozen activations. Each step samples
    spec.batch_size sequences and trains on all their positions.
    """
    problems = spec.perform_checks()
    if problems:
        raise ConfigError(problems)
    if not len(activations):
        raise ValueError("train_probe: no activations")
    torch.manual_seed(spec.seed)
    probe = Probe(spec, activations.d_model)
    optimizer = torch.optim.AdamW(probe.parameters(), lr=spec.lr, betas=(0.9, 0.95), weight_decay=spec.weight_decay)
    generator = torch.Generator().manual_seed(spec.seed)
    probe.train()
    for step in range(spec.steps):
        picks = torch.randint(0, len(activations), (spec.batch_size,), generator=generator).tolist()
        features = torch.cat([activations.features[ix] for ix in picks])
        targets = torch.cat([activations.targets[ix] for ix in picks])
        value = F.cross_entropy(probe(features), targets)
        optimizer.zero_grad(set_to_none=True)
        value.backward()
        optimizer.step()
        if (step + 1) % 1000 == 0:
            logger.debug(f"probe layer {activations.layer} step {step + 1}: loss {value.item():.4f}")
    probe.eval()
    return probe


def probe_layers(model: CipherSolver, layers="all") -> List[int]:
    if layers == "all":
        return list(range(1, model.config.n_layers + 1))
    return [int(layer) for layer in layers]


def train_layer_probes(
    model: CipherSolver, records: Sequence[TextRecord], spec: ProbeSpec, layers="all", cipher_seed=0
) -> Dict[int, Probe]:
    layers = probe_layers(model, layers)
    harvested = harvest_activations(model, records, layers, cipher_seed)
    probes = {}
    for layer in layers:
        layer_spec = ProbeSpec(**{**spec.__dict__, "layer_index": layer})
        probes[layer] = train_probe(layer_spec, harvested[layer])
        logger.info(f"trained {spec.kind} probe for layer {layer}")
    return probes


def ngram_counts(texts, n: int) -> Counter:
    # n-grams never cross from one text into the next
    if n < 1:
        raise ValueError(f"ngram_counts: n must be positive, got {n}")
    if isinstance(texts, str):
        texts = [texts]
    counts = Counter()
    for text in texts:
        counts.update(text[i : i + n] for i in range(len(text) - n + 1))
    return counts


def counts_cosine(a: Counter, b: Counter) -> float:
    if not a or not b:
        logger.warning("n-gram cosine of an empty n-gram table is taken as 0")
        return 0.0
    dot = sum(count * b[gram] for gram, count in a.items() if gram in b)
    norm_a = math.sqrt(sum(count * count for count in a.values()))
    norm_b = math.sqrt(sum(count * count for count in b.values()))
    return min(1.0, dot / (norm_a * norm_b))


def ngram_cosine(text_a, text_b, n: int) -> float:
    return counts_cosine(ngram_counts(text_a, n), ngram_counts(text_b, n))


@dataclass
class SimilarityMatrix:
    matrix: pd.DataFrame  # index layer, columns n
    deltas: pd.DataFrame  # matrix.diff() across layers

    def long_format(self) -> pd.DataFrame:
        long = self.matrix.reset_index().melt(id_vars="layer", var_name="n", value_name="similarity")
        deltas = self.deltas.reset_index().melt(id_vars="layer", var_name="n", value_name="delta")
        return long.merge(deltas, on=["layer", "n"], how="left")

    def write(self, out_dir, prefix="probe_similarity", long_csv=False) -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = [
            os.path.join(out_dir, f"{prefix}.csv"),
            os.path.join(out_dir, f"{prefix}_deltas.csv"),
        ]
        self.matrix.to_csv(paths[0])
        self.deltas.to_csv(paths[1])
        if long_csv:
            paths.append(os.path.join(out_dir, f"{prefix}_long.csv"))
            self.long_format().to_csv(paths[2], index=False)
        for path in paths:
            logger.info(f"wrote {path}")
        return paths


def similarity_matrix(decodings_by_layer: Dict[int, List[str]], plaintexts: List[str], n_range=DEFAULT_NGRAM_RANGE) -> SimilarityMatrix:
    rows = {}
    for layer in sorted(decodings_by_layer):
        rows[layer] = {
            n: counts_cosine(ngram_counts(decodings_by_layer[layer], n), ngram_counts(plaintexts, n))
            for n in n_range
        }
    matrix = pd.DataFrame.from_dict(rows, orient="index")
    matrix.index.name = "layer"
    matrix.columns.name = "n"
    return SimilarityMatrix(matrix, matrix.diff())


def probe_similarity_matrix(
    model: CipherSolver,
    probes: Dict[int, Probe],
    records: Sequence[TextRecord],
    n_range=DEFAULT_NGRAM_RANGE,
    cipher_seed=0,
) -> SimilarityMatrix:
    harvested = harvest_activations(model, records, sorted(probes), cipher_seed)
    plaintexts = [record.text for record in records]
    decodings = {
        layer: [ALPHABET.decode(ids) for ids in probe.decode(harvested[layer])]
        for layer, probe in probes.items()
    }
    return similarity_matrix(decodings, plaintexts, n_range)


@dataclass
class AttentionMaps:
    maps: np.ndarray  # [n_layers, n_heads, L, L], rows sum to 1
    text: str

    @property
    def n_maps(self) -> int:
        return self.maps.shape[0] * self.maps.shape[1]

    def long_format(self) -> pd.DataFrame:
        layers, heads, queries, keys = np.indices(self.maps.shape)
        return pd.DataFrame(
            {
                "layer": layers.ravel() + 1,
                "head": heads.ravel(),
                "query": queries.ravel(),
                "key": keys.ravel(),
                "weight": self.maps.ravel(),
            }
        )

    def write(self, out_dir, prefix="attention", long_csv=True) -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = [os.path.join(out_dir, f"{prefix}.npy")]
        np.save(paths[0], self.maps)
        if long_csv:
            paths.append(os.path.join(out_dir, f"{prefix}.csv"))
            self.long_format().to_csv(paths[1], index=False)
        logger.info(f"wrote {self.n_maps} attention maps to {', '.join(paths)}")
        return paths


@torch.no_grad()
def export_attention(model: CipherSolver, ciphertext) -> AttentionMaps:
    tokens, pad_mask = _as_batch(ciphertext)
    if tokens.shape[0] != 1:
        raise ValueError("export_attention: expects a single sequence")
    model.eval()
    hidden = model.backbone(tokens, pad_mask, capture_attention=True)
    maps = torch.stack([probs[0] for probs in hidden.attentions]).float().cpu().numpy()
    return AttentionMaps(maps, ALPHABET.decode(tokens[0].tolist()))


@dataclass
class RecoveredKey:
    # key.perm[c] = plaintext letter for ciphertext letter c
    key: CipherMapping
    permutation: PermutationMatrix
    matrix: np.ndarray  # [26, 26] head scores, row = ciphertext, column = plaintext
    unconstrained: List[str]
    decoded: str

    @property
    def encryption_key(self) -> CipherMapping:
        return invert(self.key)

    def matrix_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix, index=list(LETTERS), columns=list(LETTERS))

    def write(self, out_dir, prefix="key") -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        key_path = os.path.join(out_dir, f"{prefix}.txt")
        matrix_path = os.path.join(out_dir, f"{prefix}_matrix.csv")
        with open(key_path, "w") as fp:
            fp.write(self.key.to_string() + "\n")
        self.matrix_frame().to_csv(matrix_path, index_label="cipher")
        logger.info(f"wrote recovered key {key_path} and matrix {matrix_path}")
        return [key_path, matrix_path]


def recover_key(model: CipherSolver, ciphertext) -> RecoveredKey:
    """
    Read the substitution key straight off the bijective head: the exact
    assignment of its 26x26 score matrix. Letters absent from the
    ciphertext still get an image, but nothing in the input constrains it.
    """
    if not model.is_bijective:
        raise HeadMismatchError(
            "recover_key: needs a bijective-head model, got a standard head", model.head_type.name
        )
    tokens, pad_mask = _as_batch(ciphertext)
    if tokens.shape[0] != 1:
        raise ValueError("recover_key: expects a single sequence")
    model.eval()
    result = model.decode(tokens, pad_mask)
    permutation = result.permutations[0]
    present = set(tokens[0].tolist())
    unconstrained = [LETTERS[c] for c in range(NUM_LETTERS) if c not in present]
    return RecoveredKey(
        key=permutation.to_cipher(),
        permutation=permutation,
        matrix=result.permutation_logits[0].float().cpu().numpy(),
        unconstrained=unconstrained,
        decoded=ALPHABET.decode(result.predictions[0].tolist()),
    )
