"""Stage II: decoder-only Transformer prior over codebook tokens.

LLaMA-style blocks (RMSNorm pre-norm, rotary causal attention, SwiGLU
feed-forward), a KV cache for incremental decoding, and temperature /
top-k / top-p sampling restricted to codebook tokens.

Vocabulary layout: ``[0, K)`` codebook tokens, ``[K, K + C)`` class tokens,
``K + C`` the BOS token.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, LengthError, SamplingError, VocabError
from .numerics import (Tensor, cross_entropy, dropout, embedding, make_rng, masked_fill,
                       no_grad, rmsnorm, rope_rotate, silu, softmax)


@dataclass
class ArConfig:
    codebook_size: int
    d_model: int = 192
    n_layers: int = 6
    n_heads: int = 6
    dropout: float = 0.1
    num_classes: int = 0
    max_context: int = 512
    rope_base: float = 10000.0
    ffn_multiple_of: int = 8
    norm_eps: float = 1e-6

    def __post_init__(self):
        if min(self.codebook_size, self.d_model, self.n_layers, self.n_heads, self.max_context) < 1:
            raise ConfigError("sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be non-negative")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def vocab_size(self) -> int:
        return self.codebook_size + self.num_classes + 1

    @property
    def bos_token(self) -> int:
        return self.codebook_size + self.num_classes

    @property
    def ffn_hidden(self) -> int:
        # LLaMA convention: 2/3 of 4*d, rounded up to a multiple
        h = int(2 * 4 * self.d_model / 3)
        m = self.ffn_multiple_of
        return m * ((h + m - 1) // m)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArConfig":
        return cls(**d)


@dataclass
class SamplingParams:
    temperature: float = 1.0
    top_k: int = 1000
    top_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.top_k < 1:
            raise ConfigError("top_k must be positive")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]")


GENERATION_SAMPLING = SamplingParams(temperature=1.0, top_k=1000, top_p=1.0)
FORECAST_SAMPLING = SamplingParams(temperature=0.5, top_k=50, top_p=1.0)


@dataclass
class KvCache:
    """Per-layer keys (rotated) and values, shape (B, H, max_context, head_dim)."""

    keys: list
    values: list
    current_len: int = 0

    @property
    def batch(self) -> int:
        return self.keys[0].shape[0]


def nll_loss(logits, targets, mask=None) -> Tensor:
    """Mean over positions of -log softmax(logits)[target]."""
    return cross_entropy(logits, targets, mask)


def sample_next(logits, sp: SamplingParams, rng, codebook_size: int | None = None) -> np.ndarray:
    """Draw codebook tokens from (V,) or (B, V) logits.

    Order: mask non-codebook entries, divide by temperature, keep the top_k,
    keep the smallest high-probability prefix reaching top_p, renormalize, draw.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    rows = logits[None] if single else logits
    if np.isnan(rows).any():
        raise SamplingError("NaN logits")
    K = rows.shape[-1] if codebook_size is None else codebook_size
    rows = rows[:, :K] / sp.temperature
    top_k = min(sp.top_k, K)
    out = np.empty(rows.shape[0], dtype=np.int64)
    for b, row in enumerate(rows):
        order = np.argsort(-row, kind="stable")[:top_k]
        kept = row[order]
        finite = np.isfinite(kept)
        if not finite.any():
            raise SamplingError("every candidate logit is -inf")
        order, kept = order[finite], kept[finite]
        p = np.exp(kept - kept[0])
        p /= p.sum()
        cum = np.cumsum(p)
        n_keep = int(np.searchsorted(cum, sp.top_p - 1e-12, side="left")) + 1
        p = p[:n_keep] / cum[min(n_keep, len(cum)) - 1]
        cdf = np.cumsum(p)
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        out[b] = order[min(j, n_keep - 1)]
    return out[0] if single else out


class ArPrior:
    def __init__(self, cfg: ArConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = make_rng(seed, 3)
        d, h, V = cfg.d_model, cfg.ffn_hidden, cfg.vocab_size
        out_std = 0.02 / np.sqrt(2 * cfg.n_layers)
        p = {"tok_emb": rng.normal(0, 0.02, size=(V, d))}
        for i in range(cfg.n_layers):
            p[f"layers.{i}.attn_norm"] = np.ones(d)
            for name in ("wq", "wk", "wv"):
                p[f"layers.{i}.{name}"] = rng.normal(0, 0.02, size=(d, d))
            p[f"layers.{i}.wo"] = rng.normal(0, out_std, size=(d, d))
            p[f"layers.{i}.ffn_norm"] = np.ones(d)
            p[f"layers.{i}.w1"] = rng.normal(0, 0.02, size=(d, h))
            p[f"layers.{i}.w3"] = rng.normal(0, 0.02, size=(d, h))
            p[f"layers.{i}.w2"] = rng.normal(0, out_std, size=(h, d))
        p["norm"] = np.ones(d)
        p["head"] = rng.normal(0, 0.02, size=(d, V))
        self.params = {k: Tensor(v, requires_grad=True, dtype=self.dtype) for k, v in p.items()}

    # -- parameter plumbing -------------------------------------------------------
    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict):
        for k, t in self.params.items():
            if k not in state:
                raise ConfigError(f"missing tensor {k}")
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ConfigError(f"tensor {k} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(self.dtype)

    def astype(self, dtype) -> "ArPrior":
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)
        return self

    def prefix_token(self, class_label=None) -> int:
        if class_label is None:
            if self.cfg.num_classes > 0:
                raise ConfigError("conditional model needs a class label")
            return self.cfg.bos_token
        if self.cfg.num_classes == 0:
            raise ConfigError("class label given to an unconditional model")
        if not 0 <= int(class_label) < self.cfg.num_classes:
            raise ConfigError(f"class label {class_label} out of range")
        return self.cfg.codebook_size + int(class_label)

    # -- full-sequence forward ----------------------------------------------------------
    def _check_inputs(self, inputs: np.ndarray):
        if inputs.shape[-1] > self.cfg.max_context:
            raise LengthError(f"sequence of {inputs.shape[-1]} exceeds context {self.cfg.max_context}")
        if inputs.size and (inputs.min() < 0 or inputs.max() >= self.cfg.vocab_size):
            raise VocabError("token outside the vocabulary")

    def forward(self, inputs, training: bool = False, rng=None) -> Tensor:
        """Logits (B, n, V) for every input position of (B, n) token ids."""
        inputs = np.asarray(inputs, dtype=np.int64)
        self._check_inputs(inputs)
        cfg, P = self.cfg, self.params
        B, n = inputs.shape
        H, hd = cfg.n_heads, cfg.head_dim
        rate = cfg.dropout if training else 0.0
        pos = np.arange(n)
        future = np.triu(np.ones((n, n), dtype=bool), k=1)
        x = embedding(P["tok_emb"], inputs)
        for i in range(cfg.n_layers):
            L = f"layers.{i}."
            h = rmsnorm(x, P[L + "attn_norm"], cfg.norm_eps)
            q = (h @ P[L + "wq"]).reshape(B, n, H, hd).transpose(0, 2, 1, 3)
            k = (h @ P[L + "wk"]).reshape(B, n, H, hd).transpose(0, 2, 1, 3)
            v = (h @ P[L + "wv"]).reshape(B, n, H, hd).transpose(0, 2, 1, 3)
            q = rope_rotate(q, pos, cfg.rope_base)
            k = rope_rotate(k, pos, cfg.rope_base)
            scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
            att = softmax(masked_fill(scores, future, -np.inf))
            att = dropout(att, rate, rng, training)
            y = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, cfg.d_model)
            x = x + y @ P[L + "wo"]
            h = rmsnorm(x, P[L + "ffn_norm"], cfg.norm_eps)
            f = (silu(h @ P[L + "w1"]) * (h @ P[L + "w3"])) @ P[L + "w2"]
            x = x + dropout(f, rate, rng, training)
        x = rmsnorm(x, P["norm"], cfg.norm_eps)
        return x @ P["head"]

    def forward_logits(self, tokens, prefix_token: int | None = None) -> np.ndarray:
        """Row i predicts position i+1 after seeing the prefix and tokens[0..i].

        ``tokens`` is (n,) or (B, n); result is (n, V) or (B, n, V).
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        if single:
            tokens = tokens[None]
        if prefix_token is None:
            prefix_token = self.prefix_token()
        if tokens.shape[1] + 1 > self.cfg.max_context:
            raise LengthError("prefix plus tokens exceed the context")
        inputs = np.concatenate([np.full((tokens.shape[0], 1), prefix_token), tokens], axis=1)
        with no_grad():
            logits = self.forward(inputs).data[:, 1:]
        return logits[0] if single else logits

    def loss(self, tokens, prefixes, mask=None, training: bool = False, rng=None) -> Tensor:
        """Teacher-forced NLL: the prefix predicts tokens[:, 0], tokens[:, t] predicts t+1."""
        tokens = np.asarray(tokens, dtype=np.int64)
        prefixes = np.asarray(prefixes, dtype=np.int64).reshape(-1, 1)
        if tokens.size and tokens.max() >= self.cfg.codebook_size:
            raise VocabError("training targets must be codebook tokens")
        inputs = np.concatenate([prefixes, tokens[:, :-1]], axis=1)
        return nll_loss(self.forward(inputs, training=training, rng=rng), tokens, mask)

    # -- incremental decoding ----------------------------------------------------------
    def new_cache(self, batch: int = 1) -> KvCache:
        cfg = self.cfg
        shape = (batch, cfg.n_heads, cfg.max_context, cfg.head_dim)
        return KvCache([np.zeros(shape, self.dtype) for _ in range(cfg.n_layers)],
                       [np.zeros(shape, self.dtype) for _ in range(cfg.n_layers)], 0)

    def step_decode(self, cache: KvCache, new_token) -> np.ndarray:
        """Append one token per batch row; return next-token logits (B, V) or (V,)."""
        tok = np.asarray(new_token, dtype=np.int64)
        single = tok.ndim == 0
        tok = tok.reshape(-1)
        cfg, P = self.cfg, self.params
        if cache.current_len + 1 > cfg.max_context:
            raise LengthError("KV cache is full")
        if tok.shape[0] != cache.batch:
            raise ValueError(f"expected {cache.batch} tokens, got {tok.shape[0]}")
        self._check_inputs(tok[:, None])
        B, H, hd = cache.batch, cfg.n_heads, cfg.head_dim
        t = cache.current_len
        with no_grad():
            x = embedding(P["tok_emb"], tok[:, None])
            for i in range(cfg.n_layers):
                L = f"layers.{i}."
                h = rmsnorm(x, P[L + "attn_norm"], cfg.norm_eps)
                q = (h @ P[L + "wq"]).reshape(B, 1, H, hd).transpose(0, 2, 1, 3)
                k = (h @ P[L + "wk"]).reshape(B, 1, H, hd).transpose(0, 2, 1, 3)
                v = (h @ P[L + "wv"]).reshape(B, 1, H, hd).transpose(0, 2, 1, 3)
                q = rope_rotate(q, np.array([t]), cfg.rope_base)
                cache.keys[i][:, :, t] = rope_rotate(k, np.array([t]), cfg.rope_base).data[:, :, 0]
                cache.values[i][:, :, t] = v.data[:, :, 0]
                K = Tensor(cache.keys[i][:, :, :t + 1])
                Vv = Tensor(cache.values[i][:, :, :t + 1])
                att = softmax((q @ K.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd)))
                y = (att @ Vv).transpose(0, 2, 1, 3).reshape(B, 1, cfg.d_model)
                x = x + y @ P[L + "wo"]
                h = rmsnorm(x, P[L + "ffn_norm"], cfg.norm_eps)
                x = x + (silu(h @ P[L + "w1"]) * (h @ P[L + "w3"])) @ P[L + "w2"]
            x = rmsnorm(x, P["norm"], cfg.norm_eps)
            logits = (x @ P["head"]).data[:, 0]
        cache.current_len = t + 1
        return logits[0] if single else logits

    def prefill(self, class_label=None, batch: int = 1):
        """Cache holding only the BOS (or class) token, plus its next-token logits.

        ``class_label`` may be a scalar or one label per batch row.
        """
        if class_label is None or np.ndim(class_label) == 0:
            prefix = np.full(batch, self.prefix_token(class_label), dtype=np.int64)
        else:
            prefix = np.array([self.prefix_token(c) for c in class_label], dtype=np.int64)
            batch = prefix.shape[0]
        cache = self.new_cache(batch)
        logits = self.step_decode(cache, prefix)
        return cache, logits

    def sample(self, length: int, sp: SamplingParams, rng, class_label=None, batch: int = 1,
               prompt=None) -> np.ndarray:
        """Sample ``length`` new codebook tokens per row, optionally after a prompt.

        When prompt plus new tokens overflow the context, the oldest half of
        the context is dropped and the cache rebuilt from the prefix.
        Returns (B, length).
        """
        cfg = self.cfg
        if class_label is not None and np.ndim(class_label) > 0:
            batch = len(class_label)
        prompt = np.zeros((batch, 0), np.int64) if prompt is None else np.asarray(prompt, np.int64)
        if prompt.ndim == 1:
            prompt = np.broadcast_to(prompt, (batch, prompt.shape[0]))
        if cfg.max_context < 3:
            raise LengthError("context too short for decoding")
        keep = (cfg.max_context - 1) // 2
        n0 = prompt.shape[1]
        history = np.empty((batch, n0 + length), dtype=np.int64)
        history[:, :n0] = prompt
        start = max(0, prompt.shape[1] - (cfg.max_context - 1))
        cache, logits = self.prefill(class_label, batch)
        for col in range(start, prompt.shape[1]):
            logits = self.step_decode(cache, prompt[:, col])
        out = np.empty((batch, length), dtype=np.int64)
        for j in range(length):
            if cache.current_len >= cfg.max_context:
                cache, logits = self.prefill(class_label, batch)
                end = n0 + j
                for col in range(max(0, end - keep), end):
                    logits = self.step_decode(cache, history[:, col])
            tok = sample_next(logits, sp, rng, cfg.codebook_size)
            out[:, j] = tok
            history[:, n0 + j] = tok
            if j + 1 < length:
                logits = self.step_decode(cache, tok)
        return out
