"""
open-sci-ref decoder: Llama-style pre-norm blocks with biases in every
linear layer, per-head QK normalization, SwiGLU feed-forward, tied
embeddings and rotary position embeddings with a configurable base.
"""

import logging
import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from config import Config, get_config
from errors import ConfigError, DataError
from refmodel import numerics as nx

logger = logging.getLogger(__name__)

REFERENCE_VOCAB = 50304

# RoPE base per training context length
ROPE_BASES = {2048: 10_000.0, 4096: 10_000.0, 8192: 500_000.0, 16384: 1_000_000.0}
ALTERNATIVE_ROPE_BASES = {4096: 100_000.0}


class ModelConfig(BaseModel):
    """Architecture hyperparameters for one model scale."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    name: Optional[str] = None
    layers: int
    hidden: int
    heads: int
    ffn_hidden: int
    vocab: int = REFERENCE_VOCAB
    context_length: int = 4096
    rope_base: float = 10_000.0
    dropout_p: float = Config.DEFAULT_DROPOUT
    qk_norm_enabled: bool = True
    biases_enabled: bool = True
    tied_embeddings: bool = True
    norm_eps: float = Field(default_factory=lambda: get_config().NORM_EPS)
    reference_scale: bool = False

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data)
        except ValidationError as e:
            raise ConfigError(f"invalid model config: {e}") from e

    def check(self):
        """Raise ConfigError naming the first violated constraint."""
        for field in ('layers', 'hidden', 'heads', 'ffn_hidden', 'vocab', 'context_length'):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.reference_scale and self.vocab != REFERENCE_VOCAB:
            raise ConfigError(f"reference-scale configs need vocab {REFERENCE_VOCAB}, got {self.vocab}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.norm_eps <= 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps}")
        if self.rope_base <= 1.0:
            raise ConfigError(f"rope_base must exceed 1, got {self.rope_base}")
        return self

    def with_context(self, context_length, alternative=False):
        base = rope_base_for_context(context_length, alternative=alternative)
        return self.model_copy(update={'context_length': context_length, 'rope_base': base})

    def ablated(self, **flags):
        return ModelConfig.from_dict({**self.model_dump(), **flags}).check()


PRESETS = {
    '0.13B': ModelConfig(name='0.13B', layers=22, hidden=512, heads=8, ffn_hidden=2256, reference_scale=True),
    '0.4B': ModelConfig(name='0.4B', layers=22, hidden=1024, heads=16, ffn_hidden=3840, reference_scale=True),
    '1.3B': ModelConfig(name='1.3B', layers=24, hidden=2048, heads=32, ffn_hidden=5440, reference_scale=True),
    '1.7B': ModelConfig(name='1.7B', layers=24, hidden=2048, heads=32, ffn_hidden=8192, reference_scale=True),
    'toy': ModelConfig(name='toy', layers=2, hidden=32, heads=4, ffn_hidden=96, vocab=256,
                       context_length=64),
    'toy-2m': ModelConfig(name='toy-2m', layers=4, hidden=192, heads=6, ffn_hidden=512, vocab=256,
                          context_length=128),
}


def get_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset '{name}', expected one of {sorted(PRESETS)}")
    preset = PRESETS[name]
    eps = get_config().NORM_EPS
    return preset if preset.norm_eps == eps else preset.model_copy(update={'norm_eps': eps})


def rope_base_for_context(context_length, alternative=False, override=None):
    """
    Map a training context length to its RoPE frequency base.

    Args:
        context_length: Tokens per training sequence
        alternative: Use the documented alternative base where one exists
            (4096 -> 100,000)
        override: Explicit base; required for context lengths outside the sweep

    Returns:
        float: RoPE base
    """
    if override is not None:
        if override <= 1.0:
            raise ConfigError(f"rope base override must exceed 1, got {override}")
        return float(override)
    if alternative and context_length in ALTERNATIVE_ROPE_BASES:
        return ALTERNATIVE_ROPE_BASES[context_length]
    if context_length not in ROPE_BASES:
        raise ConfigError(
            f"no RoPE base known for context length {context_length}; pass an explicit override"
        )
    return ROPE_BASES[context_length]


def count_params_by_tensor(config):
    """
    Enumerate every parameter tensor the config induces.

    This is the per-tensor counting oracle: it lists names and shapes
    without building the model. The tied output head is not listed.

    Returns:
        dict: tensor name -> shape tuple
    """
    h, f, hd = config.hidden, config.ffn_hidden, config.head_dim
    shapes = {'embedding.weight': (config.vocab, h)}
    for i in range(config.layers):
        p = f'layers.{i}'
        shapes[f'{p}.attn_norm.weight'] = (h,)
        shapes[f'{p}.attn.qkv.weight'] = (3 * h, h)
        if config.biases_enabled:
            shapes[f'{p}.attn.qkv.bias'] = (3 * h,)
        if config.qk_norm_enabled:
            shapes[f'{p}.attn.q_norm.weight'] = (hd,)
            shapes[f'{p}.attn.k_norm.weight'] = (hd,)
        shapes[f'{p}.attn.proj.weight'] = (h, h)
        if config.biases_enabled:
            shapes[f'{p}.attn.proj.bias'] = (h,)
        shapes[f'{p}.ffn_norm.weight'] = (h,)
        for name, shape in (('gate', (f, h)), ('up', (f, h)), ('down', (h, f))):
            shapes[f'{p}.ffn.{name}.weight'] = shape
            if config.biases_enabled:
                shapes[f'{p}.ffn.{name}.bias'] = (shape[0],)
    shapes['final_norm.weight'] = (h,)
    if not config.tied_embeddings:
        shapes['lm_head.weight'] = (config.vocab, h)
    return shapes


def count_params(config):
    """
    Exact parameter counts for a config.

    Returns:
        tuple: (non_embedding, embedding); the tied head is counted once,
        as embedding
    """
    config.check()
    h, f, L = config.hidden, config.ffn_hidden, config.layers
    attn = 4 * h * h + (4 * h if config.biases_enabled else 0)
    qk = 2 * config.head_dim if config.qk_norm_enabled else 0
    ffn = 3 * h * f + ((2 * f + h) if config.biases_enabled else 0)
    norms = 2 * h
    non_embedding = L * (attn + qk + ffn + norms) + h
    embedding = config.vocab * h * (1 if config.tied_embeddings else 2)
    return non_embedding, embedding


def total_params(config):
    return sum(count_params(config))


def qk_normalize(q_heads, k_heads, q_scale=None, k_scale=None, eps=None):
    """
    RMS-normalize per-head queries and keys along the head dimension.

    Args:
        q_heads, k_heads: (..., head_dim) tensors
        q_scale, k_scale: learned (head_dim,) scales shared across heads;
            None means identity
        eps: floor inside the square root, keeps zero vectors at zero

    Returns:
        tuple: (q', k')
    """
    if eps is None:
        eps = get_config().NORM_EPS
    q = nx.rms_normalize(q_heads, axis=-1, eps=eps)
    k = nx.rms_normalize(k_heads, axis=-1, eps=eps)
    if q_scale is not None:
        q = nx.mul(q, q_scale)
    if k_scale is not None:
        k = nx.mul(k, k_scale)
    return q, k


def rotary_tables(seq_len, head_dim, base, dtype, device=None):
    inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64, device=device) / head_dim))
    positions = torch.arange(seq_len, dtype=torch.float64, device=device)
    freqs = torch.outer(positions, inv_freq)
    emb = torch.cat([freqs, freqs], dim=-1)
    return emb.cos().to(dtype), emb.sin().to(dtype)


def apply_rotary(x, cos, sin):
    half = x.shape[-1] // 2
    x1 = nx.slice_(x, -1, 0, half)
    x2 = nx.slice_(x, -1, half, x.shape[-1])
    rotated = nx.concat([-x2, x1], axis=-1)
    return nx.add(nx.mul(x, cos), nx.mul(rotated, sin))


class RMSNorm(nn.Module):
    def __init__(self, dim, eps):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return nx.mul(nx.rms_normalize(x, axis=-1, eps=self.eps), self.weight)


class Linear(nn.Module):
    """Linear layer stored as (out, in) with an optional bias."""

    def __init__(self, in_features, out_features, bias):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None

    def forward(self, x):
        return nx.linear(x, self.weight, self.bias)


class Attention(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        h = config.hidden
        self.qkv = Linear(h, 3 * h, config.biases_enabled)
        if config.qk_norm_enabled:
            self.q_norm = RMSNorm(config.head_dim, config.norm_eps)
            self.k_norm = RMSNorm(config.head_dim, config.norm_eps)
        self.proj = Linear(h, h, config.biases_enabled)

    def forward(self, x, cos, sin):
        c = self.config
        B, S, H = x.shape
        qkv = self.qkv(x)

        def heads(start):
            part = nx.slice_(qkv, -1, start, start + H)
            return nx.transpose(part.reshape(B, S, c.heads, c.head_dim), 1, 2)

        q, k, v = heads(0), heads(H), heads(2 * H)
        # order: QK-norm -> RoPE -> scaled dot product
        if c.qk_norm_enabled:
            q, k = qk_normalize(q, k, self.q_norm.weight, self.k_norm.weight, eps=c.norm_eps)
        q = apply_rotary(q, cos, sin)
        k = apply_rotary(k, cos, sin)

        scores = nx.mul(nx.matmul(q, nx.transpose(k, -2, -1)), 1.0 / math.sqrt(c.head_dim))
        probs = nx.softmax(scores, axis=-1, causal=True)
        probs = F.dropout(probs, p=c.dropout_p, training=self.training)
        out = nx.matmul(probs, v)
        out = nx.transpose(out, 1, 2).reshape(B, S, H)
        return F.dropout(self.proj(out), p=c.dropout_p, training=self.training)


class SwiGLU(nn.Module):
    def __init__(self, config):
        super().__init__()
        h, f, bias = config.hidden, config.ffn_hidden, config.biases_enabled
        self.dropout_p = config.dropout_p
        self.gate = Linear(h, f, bias)
        self.up = Linear(h, f, bias)
        self.down = Linear(f, h, bias)

    def forward(self, x):
        hidden = nx.mul(nx.silu(self.gate(x)), self.up(x))
        return F.dropout(self.down(hidden), p=self.dropout_p, training=self.training)


class Block(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.attn_norm = RMSNorm(config.hidden, config.norm_eps)
        self.attn = Attention(config)
        self.ffn_norm = RMSNorm(config.hidden, config.norm_eps)
        self.ffn = SwiGLU(config)

    def forward(self, x, cos, sin):
        x = nx.add(x, self.attn(self.attn_norm(x), cos, sin))
        return nx.add(x, self.ffn(self.ffn_norm(x)))


class Model(nn.Module):
    """Decoder-only language model; build() is the supported constructor."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.vocab, config.hidden)
        self.layers = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.final_norm = RMSNorm(config.hidden, config.norm_eps)
        if not config.tied_embeddings:
            self.lm_head = Linear(config.hidden, config.vocab, bias=False)

    @property
    def output_head_weight(self):
        return self.embedding.weight if self.config.tied_embeddings else self.lm_head.weight

    def named_tensors(self):
        """Serialisable tensors in a stable order (tied head stored once)."""
        return {name: p for name, p in self.named_parameters()}

    def check_tokens(self, tokens):
        if tokens.dim() != 2:
            raise DataError(f"token batch must be (batch, seq), got shape {tuple(tokens.shape)}")
        if tokens.shape[1] > self.config.context_length:
            raise DataError(
                f"sequence length {tokens.shape[1]} exceeds context length {self.config.context_length}"
            )
        bad = (tokens < 0) | (tokens >= self.config.vocab)
        if bad.any():
            b, t = (int(i) for i in bad.nonzero()[0])
            raise DataError(
                f"token id {int(tokens[b, t])} out of range for vocab {self.config.vocab} at position ({b}, {t})"
            )

    def forward(self, tokens):
        """tokens (batch, seq) -> logits (batch, seq, vocab)"""
        self.check_tokens(tokens)
        x = nx.embedding_lookup(self.embedding.weight, tokens)
        x = F.dropout(x, p=self.config.dropout_p, training=self.training)
        cos, sin = rotary_tables(tokens.shape[1], self.config.head_dim, self.config.rope_base,
                                 dtype=x.dtype, device=x.device)
        for block in self.layers:
            x = block(x, cos, sin)
        x = self.final_norm(x)
        return nx.linear(x, self.output_head_weight)


def loss(logits, targets):
    """Mean next-token cross-entropy in nats."""
    return nx.cross_entropy(logits, targets)


def build(config, seed, device=None):
    """
    Build and initialise a model.

    Matrices are drawn from normal(0, 0.02), with residual-output
    projections (attention proj, FFN down) scaled by 1/sqrt(2 * layers);
    biases start at zero and norm scales at one.

    Args:
        config: ModelConfig
        seed: Initialisation seed
        device: Optional torch device ('meta' builds shapes without storage)

    Returns:
        Model
    """
    config.check()
    if config.head_dim % 2 != 0:
        raise ConfigError(f"head_dim ({config.head_dim}) must be even for rotary embeddings")
    with torch.device(device or 'cpu'):
        model = Model(config)
    generator = torch.Generator().manual_seed(seed)
    residual_std = 0.02 / math.sqrt(2 * config.layers)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.device.type == 'meta':
                continue
            if name.endswith('norm.weight'):
                p.fill_(1.0)
            elif name.endswith('.bias'):
                p.zero_()
            else:
                std = residual_std if name.endswith(('attn.proj.weight', 'ffn.down.weight')) else 0.02
                p.copy_(torch.randn(p.shape, generator=generator, dtype=torch.float64).to(p.dtype) * std)
    n_non_emb, n_emb = count_params(config)
    logger.info(f"Built model {config.name or 'custom'}: {n_non_emb:,} non-embedding + {n_emb:,} embedding params")
    return model
