#  Encoder-only Transformer backbone: static embeddings, rotary positions,
#  pre-norm full self-attention and SwiGLU feed-forward blocks. The forward
#  pass records every layer's activations so that analysis code can decode
#  or probe intermediate states.

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from cryptogram.cipher import ALPHABET


DEFAULT_CONTEXT_LEN = 304


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 512
    rope_theta: float = 10000.0
    vocab_size: int = ALPHABET.vocab_size
    size_tag: str = "0.5M"
    context_len: int = DEFAULT_CONTEXT_LEN
    norm_eps: float = 1e-5
    init_std: float = 0.02

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def perform_checks(self) -> List[str]:
        # returns every problem found; an empty list means the config is valid
        problems = []
        for name in ("d_model", "n_layers", "n_heads", "ffn_dim", "vocab_size", "context_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                problems.append(f"model.{name}: must be a positive integer, got {value!r}")
        if not problems:
            if self.d_model % self.n_heads != 0:
                problems.append(
                    f"model.d_model: {self.d_model} is not divisible by n_heads {self.n_heads}"
                )
            elif self.head_dim % 2 != 0:
                problems.append(f"model.n_heads: head dimension {self.head_dim} must be even")
        if self.rope_theta <= 0:
            problems.append(f"model.rope_theta: must be positive, got {self.rope_theta!r}")
        if self.norm_eps <= 0:
            problems.append(f"model.norm_eps: must be positive, got {self.norm_eps!r}")
        return problems

    def as_dict(self) -> Dict:
        return asdict(self)

    @staticmethod
    def from_dict(values: Dict) -> "ModelConfig":
        known = {f.name for f in fields(ModelConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"ModelConfig: unknown fields {unknown}")
        return ModelConfig(**values)

    @staticmethod
    def preset(size_tag: str) -> "ModelConfig":
        if size_tag not in MODEL_PRESETS:
            raise ValueError(
                f"ModelConfig: unknown size tag {size_tag!r}, "
                f"expected one of {list(MODEL_PRESETS)}"
            )
        d_model, n_layers, n_heads, ffn_dim = MODEL_PRESETS[size_tag]
        return ModelConfig(d_model, n_layers, n_heads, ffn_dim, size_tag=size_tag)


# size tag -> (model dimension, layers, attention heads, FFN dimension)
MODEL_PRESETS = {
    "0.5M": (128, 2, 4, 512),
    "3.4M": (256, 4, 4, 768),
    "10.7M": (384, 6, 6, 1024),
    "27.3M": (512, 8, 8, 1536),
    "85M": (768, 12, 12, 2048),
    "308M": (1024, 24, 16, 2816),
}


def rms_norm(x: torch.Tensor, gain: torch.Tensor, eps=1e-5) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return rms_norm(x, self.weight, self.eps)


def rope_angles(positions: torch.Tensor, head_dim: int, theta=10000.0, dtype=None):
    if head_dim % 2 != 0:
        raise ValueError(f"apply_rope: head dimension must be even, got {head_dim}")
    dtype = dtype or torch.float32
    exponents = torch.arange(0, head_dim, 2, device=positions.device, dtype=dtype) / head_dim
    inv_freq = 1.0 / (theta**exponents)
    # [..., L, head_dim / 2]
    return positions.to(dtype).unsqueeze(-1) * inv_freq


def apply_rope(x: torch.Tensor, positions: torch.Tensor, theta=10000.0) -> torch.Tensor:
    """
    Rotate each consecutive pair (x[2i], x[2i+1]) of the last dimension by
    positions * theta^(-2i/d). x is [..., L, d]; positions is [L] or
    broadcastable to x's leading dimensions ([B, 1, L] for [B, H, L, d]).
    """
    head_dim = x.shape[-1]
    # angles in at least fp32, even under reduced-precision autocast
    dtype = torch.float64 if x.dtype == torch.float64 else torch.float32
    angles = rope_angles(positions, head_dim, theta, dtype)
    cos, sin = angles.cos().to(x.dtype), angles.sin().to(x.dtype)
    pairs = x.unflatten(-1, (head_dim // 2, 2))
    even, odd = pairs[..., 0], pairs[..., 1]
    rotated = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return rotated.flatten(-2)


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_heads = config.n_heads
        self.head_dim = config.head_dim
        self.rope_theta = config.rope_theta
        self.q_proj = nn.Linear(config.d_model, config.d_model, bias=False)
        self.k_proj = nn.Linear(config.d_model, config.d_model, bias=False)
        self.v_proj = nn.Linear(config.d_model, config.d_model, bias=False)
        self.o_proj = nn.Linear(config.d_model, config.d_model, bias=False)

    def _heads(self, x):
        batch, length, _ = x.shape
        return x.view(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, pad_mask, positions):
        # x [B, L, d]; pad_mask [B, L] True at pads; positions [B, L]
        q = self._heads(self.q_proj(x))
        k = self._heads(self.k_proj(x))
        v = self._heads(self.v_proj(x))
        q = apply_rope(q, positions.unsqueeze(1), self.rope_theta)
        k = apply_rope(k, positions.unsqueeze(1), self.rope_theta)
        scores = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        # non-causal: every query sees every unpadded key
        scores = scores.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        out = torch.matmul(probs, v).transpose(1, 2).flatten(2)
        return self.o_proj(out), probs


class SwiGLU(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int):
        super().__init__()
        self.w_gate = nn.Linear(d_model, ffn_dim, bias=False)
        self.w_up = nn.Linear(d_model, ffn_dim, bias=False)
        self.w_down = nn.Linear(ffn_dim, d_model, bias=False)

    def forward(self, x):
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.d_model, config.norm_eps)
        self.attn = SelfAttention(config)
        self.ffn_norm = RMSNorm(config.d_model, config.norm_eps)
        self.ffn = SwiGLU(config.d_model, config.ffn_dim)

    def forward(self, x, pad_mask, positions):
        attn_out, probs = self.attn(self.attn_norm(x), pad_mask, positions)
        x = x + attn_out
        x = x + self.ffn(self.ffn_norm(x))
        return x, probs


@dataclass
class HiddenStates:
    # layers[0] is the embedding output, layers[i] the output of block i
    layers: List[torch.Tensor]
    # final RMSNorm applied to layers[-1]; this is what the heads consume
    final: torch.Tensor
    attentions: Optional[List[torch.Tensor]] = None

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        problems = config.perform_checks()
        if problems:
            raise ValueError("Encoder: invalid config: " + "; ".join(problems))
        self.config = config
        self.embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.final_norm = RMSNorm(config.d_model, config.norm_eps)
        self.reset_parameters()

    def reset_parameters(self):
        std = self.config.init_std
        for name, param in self.named_parameters():
            if name.endswith("norm.weight") or name == "final_norm.weight":
                nn.init.ones_(param)
            elif name.endswith("o_proj.weight") or name.endswith("w_down.weight"):
                # residual branches start as the identity
                nn.init.zeros_(param)
            else:
                nn.init.trunc_normal_(param, std=std, a=-2 * std, b=2 * std)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError(
                f"Encoder: token ids must lie in [0, {self.config.vocab_size}), "
                f"got [{int(tokens.min())}, {int(tokens.max())}]"
            )
        return self.embedding(tokens)

    def forward(self, tokens, pad_mask=None, positions=None, capture_attention=False):
        if tokens.dim() == 1:
            tokens = tokens.unsqueeze(0)
        batch, length = tokens.shape
        if length > self.config.context_len:
            raise ValueError(
                f"Encoder: sequence length {length} exceeds context length "
                f"{self.config.context_len}"
            )
        if pad_mask is None:
            pad_mask = torch.zeros_like(tokens, dtype=torch.bool)
        if positions is None:
            positions = torch.arange(length, device=tokens.device).expand(batch, length)
        x = self.embed(tokens)
        layers = [x]
        attentions = [] if capture_attention else None
        for layer in self.layers:
            x, probs = layer(x, pad_mask, positions)
            layers.append(x)
            if capture_attention:
                attentions.append(probs)
        return HiddenStates(layers, self.final_norm(x), attentions)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())
