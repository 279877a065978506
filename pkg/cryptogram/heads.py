#  Decoding heads. Both heads first average the backbone output over every
#  occurrence of each input symbol, so repeated cipher symbols always decode
#  to the same output. The bijective head then predicts a 26x26 score matrix
#  (row = ciphertext letter, column = plaintext letter) that is relaxed with
#  Gumbel-Sinkhorn during training and solved exactly at inference.

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torch import nn

from cryptogram.backbone import Encoder, HiddenStates, ModelConfig
from cryptogram.cipher import ALPHABET, NUM_LETTERS, CipherMapping


DEFAULT_TAU = 4.75
DEFAULT_SINKHORN_ITERS = 6
GUMBEL_CLAMP = 1e-10
# floor for probabilities turned back into logits for the cross-entropy
LOG_FLOOR = 1e-9


@dataclass
class PooledSymbols:
    # embeddings[b, s] is the mean activation over the positions holding
    # symbol s in example b; zero where the symbol is absent
    embeddings: torch.Tensor  # [B, S, d]
    present: torch.Tensor  # [B, S] bool
    scatter_index: torch.Tensor  # [B, L] symbol id per position, -1 at pads

    def symbol_ids(self, row=0) -> List[int]:
        return self.present[row].nonzero().flatten().tolist()

    def scatter(self, values: torch.Tensor) -> torch.Tensor:
        # values [B, S, ...] -> [B, L, ...] by looking up each position's symbol
        index = self.scatter_index.clamp(min=0)
        flat = values.flatten(2)
        gathered = flat.gather(1, index.unsqueeze(-1).expand(-1, -1, flat.shape[-1]))
        return gathered.view(*index.shape, *values.shape[2:])


def symbol_pool(states, tokens, pad_mask, num_symbols=ALPHABET.num_symbols) -> PooledSymbols:
    if states.dim() == 2:
        states, tokens, pad_mask = states.unsqueeze(0), tokens.unsqueeze(0), pad_mask.unsqueeze(0)
    real = ~pad_mask
    # pad ids fall outside [0, num_symbols) and are zeroed by the mask anyway
    index = torch.where(real, tokens, torch.zeros_like(tokens))
    onehot = F.one_hot(index, num_symbols).to(states.dtype) * real.unsqueeze(-1).to(states.dtype)
    counts = onehot.sum(1)
    sums = torch.matmul(onehot.transpose(1, 2), states)
    embeddings = sums / counts.clamp(min=1).unsqueeze(-1)
    scatter_index = torch.where(real, tokens, torch.full_like(tokens, -1))
    return PooledSymbols(embeddings, counts > 0, scatter_index)


class LinearHead(nn.Module):
    def __init__(self, d_model: int, num_symbols=ALPHABET.num_symbols):
        super().__init__()
        self.proj = nn.Linear(d_model, num_symbols)

    def forward(self, pooled: PooledSymbols):
        # [B, S, num_symbols] per pooled symbol
        return self.proj(pooled.embeddings)

    def position_logits(self, pooled: PooledSymbols):
        return pooled.scatter(self(pooled))


def sinkhorn(X: torch.Tensor, iters: int) -> torch.Tensor:
    """
    exp(X) followed by `iters` rounds of column then row normalization,
    carried out in log space. Works on [..., n, n] batches. Every row sums
    to one exactly after the last round; columns converge as iters grows.
    """
    if iters < 0:
        raise ValueError(f"sinkhorn: iters must be non-negative, got {iters}")
    log_s = X
    for _ in range(iters):
        log_s = log_s - torch.logsumexp(log_s, dim=-2, keepdim=True)
        log_s = log_s - torch.logsumexp(log_s, dim=-1, keepdim=True)
    return log_s.exp()


def sample_gumbel(shape, generator=None, dtype=torch.float32, device=None):
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -torch.log(-torch.log(u))


def gumbel_sinkhorn(
    X: torch.Tensor,
    tau=DEFAULT_TAU,
    iters=DEFAULT_SINKHORN_ITERS,
    generator: Optional[torch.Generator] = None,
    noise: Optional[torch.Tensor] = None,
    add_noise=True,
) -> torch.Tensor:
    # one independent noise matrix per leading index, i.e. per example
    if tau <= 0:
        raise ValueError(f"gumbel_sinkhorn: tau must be positive, got {tau}")
    if add_noise:
        if noise is None:
            noise = sample_gumbel(X.shape, generator, X.dtype, X.device)
        X = X + noise
    return sinkhorn(X / tau, iters)


@dataclass(frozen=True)
class PermutationMatrix:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        n = values.shape[0]
        if (
            values.ndim != 2
            or values.shape != (n, n)
            or not np.isin(values, (0, 1)).all()
            or not (values.sum(0) == 1).all()
            or not (values.sum(1) == 1).all()
        ):
            raise ValueError("PermutationMatrix: need exactly one 1 per row and column")
        object.__setattr__(self, "values", values.astype(np.int64))

    @staticmethod
    def from_assignment(columns) -> "PermutationMatrix":
        n = len(columns)
        values = np.zeros((n, n), dtype=np.int64)
        values[np.arange(n), np.asarray(columns)] = 1
        return PermutationMatrix(values)

    @property
    def assignment(self) -> np.ndarray:
        # assignment[row] = column holding the 1
        return self.values.argmax(1)

    def to_cipher(self) -> CipherMapping:
        return CipherMapping(tuple(int(c) for c in self.assignment))


def _solve(X: np.ndarray):
    rows, cols = linear_sum_assignment(X, maximize=True)
    return cols[np.argsort(rows)], float(X[rows, cols].sum())


def _tie_tolerance(X: np.ndarray) -> float:
    scale = max(1.0, float(np.abs(X).max())) if X.size else 1.0
    return 1e-9 * scale * max(1, X.shape[0])


def _has_alternative_optimum(X, columns, best, tol) -> bool:
    # the optimum is unique iff forbidding any one of its edges costs something
    penalty = float(X.min()) - (float(X.max()) - float(X.min()) + 1.0) * (X.shape[0] + 1)
    for row, col in enumerate(columns):
        forbidden = X.copy()
        forbidden[row, col] = penalty
        _, value = _solve(forbidden)
        if value >= best - tol:
            return True
    return False


def _lowest_index_optimum(X, best, tol):
    # fix rows in order, each to the lowest column that still admits an optimum
    n = X.shape[0]
    columns = []
    free = list(range(n))
    prefix = 0.0
    for row in range(n):
        for col in free:
            rest = [c for c in free if c != col]
            tail = 0.0
            if rest:
                _, tail = _solve(X[np.ix_(range(row + 1, n), rest)])
            if prefix + X[row, col] + tail >= best - tol:
                columns.append(col)
                prefix += X[row, col]
                free = rest
                break
    return np.asarray(columns)


def hard_assignment(X) -> PermutationMatrix:
    """
    Exact maximizer of sum_ij X_ij P_ij over permutation matrices P (the
    linear assignment problem). Among several optimal permutations the one
    whose column sequence is lexicographically smallest is returned, so an
    all-equal X yields the identity.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().double().numpy()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise ValueError(f"hard_assignment: need a square matrix, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("hard_assignment: matrix has non-finite entries")
    columns, best = _solve(X)
    tol = _tie_tolerance(X)
    if X.shape[0] > 1 and _has_alternative_optimum(X, columns, best, tol):
        columns = _lowest_index_optimum(X, best, tol)
    return PermutationMatrix.from_assignment(columns)


def brute_force_assignment(X) -> PermutationMatrix:
    # exhaustive search, for checking hard_assignment on small matrices
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    perms = np.array(list(itertools.permutations(range(n))))
    scores = X[np.arange(n), perms].sum(1)
    return PermutationMatrix.from_assignment(perms[int(np.argmax(scores))])


class BijectiveHead(nn.Module):
    def __init__(self, config: ModelConfig, tau=DEFAULT_TAU, sinkhorn_iters=DEFAULT_SINKHORN_ITERS):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"BijectiveHead: tau must be positive, got {tau}")
        self.tau = tau
        self.sinkhorn_iters = sinkhorn_iters
        self.query = nn.Parameter(torch.empty(NUM_LETTERS, config.d_model))
        nn.init.trunc_normal_(self.query, std=config.init_std)
        self.cross_attn = nn.MultiheadAttention(config.d_model, config.n_heads, batch_first=True)
        self.proj = nn.Linear(config.d_model, NUM_LETTERS)

    def forward(self, pooled: PooledSymbols) -> torch.Tensor:
        # [B, 26, 26] scores: row = ciphertext letter, column = plaintext letter
        batch = pooled.embeddings.shape[0]
        query = self.query.unsqueeze(0).expand(batch, -1, -1)
        reduced, _ = self.cross_attn(
            query,
            pooled.embeddings,
            pooled.embeddings,
            key_padding_mask=~pooled.present,
            need_weights=False,
        )
        return self.proj(reduced)

    def soft_decode(self, X, tokens, pad_mask, generator=None, noise=None):
        # position log-probabilities over all output symbols; letters go
        # through the sampled soft permutation, other symbols are copied
        if generator is None and noise is None:
            raise ValueError("BijectiveHead: training mode needs a random generator")
        soft = gumbel_sinkhorn(X, self.tau, self.sinkhorn_iters, generator, noise)
        return letter_soft_decode(soft, tokens, pad_mask)

    @staticmethod
    def hard_decode(X, tokens, pad_mask):
        perms = [hard_assignment(x) for x in X]
        lookup = torch.as_tensor(
            np.stack([p.assignment for p in perms]), dtype=torch.long, device=tokens.device
        )
        return apply_letter_permutations(lookup, tokens, pad_mask), perms


def letter_soft_decode(soft, tokens, pad_mask, num_symbols=ALPHABET.num_symbols):
    is_letter = (tokens < NUM_LETTERS) & ~pad_mask
    letter_index = torch.where(is_letter, tokens, torch.zeros_like(tokens))
    letter_onehot = F.one_hot(letter_index, NUM_LETTERS).to(soft.dtype)
    letter_onehot = letter_onehot * is_letter.unsqueeze(-1).to(soft.dtype)
    # rows of the soft matrix selected by the one-hot ciphertext letters
    letter_probs = torch.matmul(letter_onehot, soft)
    symbol_index = torch.where(pad_mask, torch.zeros_like(tokens), tokens)
    copy = F.one_hot(symbol_index, num_symbols).to(soft.dtype)
    copy = copy * (~is_letter).unsqueeze(-1).to(soft.dtype)
    padding = torch.zeros(
        *letter_probs.shape[:-1], num_symbols - NUM_LETTERS, dtype=soft.dtype, device=soft.device
    )
    probs = torch.cat((letter_probs, padding), dim=-1) + copy
    return torch.log(probs.clamp(min=LOG_FLOOR))


def apply_letter_permutations(lookup, tokens, pad_mask):
    # lookup [B, 26]: plaintext letter for each ciphertext letter
    is_letter = (tokens < NUM_LETTERS) & ~pad_mask
    letter_index = torch.where(is_letter, tokens, torch.zeros_like(tokens))
    decoded = lookup.gather(1, letter_index)
    return torch.where(is_letter, decoded, tokens)


class HeadType(Enum):
    standard = 1
    bijective = 2


@dataclass
class SolverOutput:
    logits: torch.Tensor  # [B, L, num_symbols], feeds the cross-entropy
    hidden: HiddenStates
    permutation_logits: Optional[torch.Tensor] = None  # [B, 26, 26], bijective only


@dataclass
class DecodeResult:
    predictions: torch.Tensor  # [B, L] symbol ids, pad kept at pad positions
    permutations: Optional[List[PermutationMatrix]] = None
    permutation_logits: Optional[torch.Tensor] = None


class CipherSolver(nn.Module):
    """
    Backbone plus one decoding head. forward() is the differentiable
    training path; decode() is the single-pass inference path.
    """

    def __init__(self, config: ModelConfig, head="standard", tau=DEFAULT_TAU, sinkhorn_iters=DEFAULT_SINKHORN_ITERS):
        super().__init__()
        self.config = config
        self.head_type = head if isinstance(head, HeadType) else HeadType[head]
        self.backbone = Encoder(config)
        self.num_symbols = ALPHABET.num_symbols
        self.pad_id = ALPHABET.pad_id
        if self.head_type is HeadType.standard:
            self.head = LinearHead(config.d_model, self.num_symbols)
        else:
            self.head = BijectiveHead(config, tau, sinkhorn_iters)

    @property
    def is_bijective(self) -> bool:
        return self.head_type is HeadType.bijective

    def forward(self, tokens, pad_mask, generator=None, noise=None, capture_attention=False):
        hidden = self.backbone(tokens, pad_mask, capture_attention=capture_attention)
        pooled = symbol_pool(hidden.final, tokens, pad_mask, self.num_symbols)
        if self.is_bijective:
            X = self.head(pooled)
            logits = self.head.soft_decode(X, tokens, pad_mask, generator, noise)
            return SolverOutput(logits, hidden, X)
        return SolverOutput(self.head.position_logits(pooled), hidden)

    def decode_states(self, normed_states, tokens, pad_mask) -> DecodeResult:
        # shared by normal decoding and early exit; normed_states must already
        # have been through the final RMSNorm
        pooled = symbol_pool(normed_states, tokens, pad_mask, self.num_symbols)
        if self.is_bijective:
            X = self.head(pooled)
            predictions, perms = BijectiveHead.hard_decode(X, tokens, pad_mask)
            predictions = predictions.masked_fill(pad_mask, self.pad_id)
            return DecodeResult(predictions, perms, X)
        # argmax returns the lowest id among ties
        symbol_predictions = self.head(pooled).argmax(-1)
        predictions = pooled.scatter(symbol_predictions.unsqueeze(-1)).squeeze(-1)
        return DecodeResult(predictions.masked_fill(pad_mask, self.pad_id))

    @torch.no_grad()
    def decode(self, tokens, pad_mask=None) -> DecodeResult:
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        if pad_mask is None:
            pad_mask = tokens == self.pad_id
        hidden = self.backbone(tokens, pad_mask)
        return self.decode_states(hidden.final, tokens, pad_mask)
