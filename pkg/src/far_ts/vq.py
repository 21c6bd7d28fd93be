"""Stage I: pointwise encoder, spatial basis, vector quantizer and residual decoder.

A window X (T x D) is mapped row by row to coefficients V (T x R), each row
is snapped to its nearest codebook entry, and the series is rebuilt as
``U V_hat^T`` plus a convolutional residual correction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import (Tensor, as_tensor, conv1d, embedding, gelu, linear, make_rng,
                       no_grad, stop_gradient, straight_through)


@dataclass
class VqConfig:
    num_channels: int
    rank: int = 32
    codebook_size: int = 4096
    commitment_beta: float = 0.25
    encoder_hidden_dims: tuple = (512, 2048, 512)
    decoder_channels: int = 256
    decoder_kernel_size: int = 3
    num_classes: int = 0
    no_basis: bool = False
    no_residual: bool = False

    def __post_init__(self):
        self.encoder_hidden_dims = tuple(int(h) for h in self.encoder_hidden_dims)
        if self.num_channels < 1 or self.rank < 1:
            raise ConfigError("num_channels and rank must be positive")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be at least 2")
        if not self.commitment_beta > 0:
            raise ConfigError("commitment_beta must be positive")
        if any(h < 1 for h in self.encoder_hidden_dims) or self.decoder_channels < 1:
            raise ConfigError("layer widths must be positive")
        if self.decoder_kernel_size < 1 or self.decoder_kernel_size % 2 == 0:
            raise ConfigError("decoder_kernel_size must be a positive odd integer")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be non-negative")

    @property
    def num_bases(self) -> int:
        return max(1, self.num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_hidden_dims"] = list(self.encoder_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VqConfig":
        return cls(**d)


@dataclass
class Codebook:
    entries: Tensor
    usage_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.usage_counts is None:
            self.usage_counts = np.zeros(self.entries.shape[0], dtype=np.int64)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def reset_usage(self):
        self.usage_counts[:] = 0


def nearest_codes(V: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the nearest entry for every row of V; lowest index wins ties."""
    V = np.asarray(V, dtype=np.float64)
    E = np.asarray(entries, dtype=np.float64)
    flat = V.reshape(-1, V.shape[-1])
    if E.shape[0] == 0:
        raise ConfigError("empty codebook")
    if flat.shape[1] != E.shape[1]:
        raise DimensionError(f"vectors of dim {flat.shape[1]} vs codebook dim {E.shape[1]}")
    out = np.empty(flat.shape[0], dtype=np.int64)
    # exact squared differences, chunked to bound memory
    chunk = max(1, 4_000_000 // max(1, E.size))
    for s in range(0, flat.shape[0], chunk):
        diff = flat[s:s + chunk, None, :] - E[None, :, :]
        out[s:s + chunk] = np.argmin(np.einsum("nkr,nkr->nk", diff, diff), axis=1)
    return out.reshape(V.shape[:-1])


def quantize(V, codebook: Codebook, track_usage: bool = True):
    """Snap each coefficient vector to its nearest codebook entry.

    Returns ``(tokens, V_hat)`` where ``V_hat`` is the looked-up entries as a
    Tensor (gradients reach the codebook only).
    """
    V = as_tensor(V)
    if not np.all(np.isfinite(V.data)):
        raise DimensionError("non-finite coefficients")
    tokens = nearest_codes(V.data, codebook.entries.data)
    if track_usage:
        codebook.usage_counts += np.bincount(tokens.reshape(-1), minlength=codebook.size)
    return tokens, embedding(codebook.entries, tokens)


def reconstruct_base(U, V_hat) -> Tensor:
    """``U V_hat^T``: (D,R) or (B,D,R) times (T,R) or (B,T,R) -> (D,T) or (B,D,T)."""
    U = as_tensor(U)
    V_hat = as_tensor(V_hat)
    if U.shape[-1] != V_hat.shape[-1]:
        raise DimensionError(f"basis rank {U.shape[-1]} vs coefficient rank {V_hat.shape[-1]}")
    return U @ V_hat.swapaxes(-1, -2)


def refine(X_tilde, decoder_layers) -> Tensor:
    """``X_tilde + Decoder(X_tilde)`` for channels-first (B, D, T) input.

    ``decoder_layers`` is a list of (weight, bias) conv pairs; GELU between them.
    """
    X_tilde = as_tensor(X_tilde)
    if not decoder_layers:
        return X_tilde
    squeeze = X_tilde.ndim == 2
    h = X_tilde.reshape(1, *X_tilde.shape) if squeeze else X_tilde
    x_in = h
    for i, (w, b) in enumerate(decoder_layers):
        h = conv1d(h, w, b)
        if i < len(decoder_layers) - 1:
            h = gelu(h)
    out = x_in + h
    return out.reshape(*X_tilde.shape) if squeeze else out


def vq_loss(X, X_hat, V, V_hat, beta: float, sg_V=None, sg_V_hat=None) -> Tensor:
    """Reconstruction + codebook + weighted commitment loss.

    Every term is a per-step squared norm averaged over batch and time.
    ``sg_V``/``sg_V_hat`` override the stop-gradient copies (used to freeze
    them when probing gradients by finite differences).
    """
    if not beta > 0:
        raise ConfigError("commitment beta must be positive")
    X, X_hat, V, V_hat = (as_tensor(t) for t in (X, X_hat, V, V_hat))
    if X.shape != X_hat.shape or V.shape != V_hat.shape:
        raise DimensionError("vq_loss operands do not conform")
    steps = int(np.prod(V.shape[:-1]))
    sV = stop_gradient(V) if sg_V is None else as_tensor(sg_V)
    sVh = stop_gradient(V_hat) if sg_V_hat is None else as_tensor(sg_V_hat)
    d_rec = X - X_hat
    d_cb = sV - V_hat
    d_cm = V - sVh
    recon = (d_rec * d_rec).sum() * (1.0 / steps)
    codebook = (d_cb * d_cb).sum() * (1.0 / steps)
    commit = (d_cm * d_cm).sum() * (beta / steps)
    return recon + codebook + commit


def restart_dead_codes(codebook: Codebook, recent_outputs, min_usage: int, rng) -> np.ndarray:
    """Re-seed rarely used entries from recent encoder outputs; resets usage.

    Returns the indices that were replaced.
    """
    recent = np.asarray(recent_outputs).reshape(-1, codebook.entries.shape[1])
    if recent.shape[0] == 0:
        raise ValueError("recent_outputs is empty")
    dead = np.flatnonzero(codebook.usage_counts < min_usage)
    if dead.size:
        pick = rng.integers(0, recent.shape[0], size=dead.size)
        codebook.entries.data[dead] = recent[pick].astype(codebook.entries.dtype)
    codebook.reset_usage()
    return dead


class FactorizedVQ:
    """Stage-I model. Windows are (B, T, D); reconstructions come back the same way."""

    def __init__(self, cfg: VqConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = make_rng(seed, 1)
        D, R, K = cfg.num_channels, cfg.rank, cfg.codebook_size
        p = {}
        dims = [D, *cfg.encoder_hidden_dims, R]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            p[f"encoder.{i}.weight"] = rng.normal(0, 1 / np.sqrt(a), size=(a, b))
            p[f"encoder.{i}.bias"] = np.zeros(b)
        if cfg.no_basis:
            p["mixer.weight"] = rng.normal(0, 1 / np.sqrt(R), size=(D, R))
        else:
            p["basis"] = np.stack([_orthonormal(rng, D, R) for _ in range(cfg.num_bases)])
        p["codebook"] = rng.uniform(-1 / K, 1 / K, size=(K, R))
        if not cfg.no_residual:
            C, k = cfg.decoder_channels, cfg.decoder_kernel_size
            p["decoder.0.weight"] = rng.normal(0, 1 / np.sqrt(D * k), size=(C, D, k))
            p["decoder.0.bias"] = np.zeros(C)
            p["decoder.1.weight"] = rng.normal(0, 1 / np.sqrt(C * k), size=(C, C, k))
            p["decoder.1.bias"] = np.zeros(C)
            p["decoder.2.weight"] = np.zeros((D, C, 1))
            p["decoder.2.bias"] = np.zeros(D)
        self.params = {k: Tensor(v, requires_grad=True, dtype=self.dtype) for k, v in p.items()}
        self.codebook = Codebook(self.params["codebook"])
        self.codebook_initialized = False

    # -- parameter plumbing -------------------------------------------------------
    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        out = {k: v.data for k, v in self.params.items()}
        out["codebook.usage_counts"] = self.codebook.usage_counts.astype(np.float32)
        out["codebook.initialized"] = np.array([float(self.codebook_initialized)], dtype=np.float32)
        return out

    def load_state_dict(self, state: dict):
        for k, t in self.params.items():
            if k not in state:
                raise ConfigError(f"missing tensor {k}")
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise DimensionError(f"tensor {k} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(self.dtype)
        if "codebook.usage_counts" in state:
            self.codebook.usage_counts = np.asarray(state["codebook.usage_counts"]).astype(np.int64)
        self.codebook.entries = self.params["codebook"]
        self.codebook_initialized = bool(np.asarray(state.get("codebook.initialized", [1]))[0])

    def astype(self, dtype) -> "FactorizedVQ":
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)
        return self

    @property
    def encoder_layers(self):
        n = len(self.cfg.encoder_hidden_dims) + 1
        return [(self.params[f"encoder.{i}.weight"], self.params[f"encoder.{i}.bias"]) for i in range(n)]

    @property
    def decoder_layers(self):
        if self.cfg.no_residual:
            return []
        return [(self.params[f"decoder.{i}.weight"], self.params[f"decoder.{i}.bias"]) for i in range(3)]

    # -- forward pieces -------------------------------------------------------------
    def _check_window(self, X) -> Tensor:
        X = as_tensor(X, dtype=self.dtype)
        if X.data.dtype != self.dtype:
            X = Tensor(X.data.astype(self.dtype))
        if X.shape[-1] != self.cfg.num_channels:
            raise DimensionError(f"expected {self.cfg.num_channels} channels, got {X.shape[-1]}")
        return X

    def encode(self, X) -> Tensor:
        """Pointwise MLP: each row of X (..., T, D) maps to a row of V (..., T, R)."""
        h = self._check_window(X)
        layers = self.encoder_layers
        for i, (w, b) in enumerate(layers):
            h = linear(h, w, b)
            if i < len(layers) - 1:
                h = gelu(h)
        return h

    def _labels(self, labels, batch: int) -> np.ndarray:
        if self.cfg.num_classes == 0:
            if labels is not None and np.any(np.asarray(labels) != 0):
                raise ConfigError("class labels given to an unconditional model")
            return np.zeros(batch, dtype=np.int64)
        if labels is None:
            raise ConfigError("class labels required for a conditional model")
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (batch,))
        if labels.min() < 0 or labels.max() >= self.cfg.num_classes:
            raise ConfigError("class label out of range")
        return labels

    def basis_for(self, labels, batch: int) -> Tensor:
        """Per-window basis, shape (B, D, R)."""
        if self.cfg.no_basis:
            w = self.params["mixer.weight"]
            return w.reshape(1, *w.shape)
        return embedding(self.params["basis"], self._labels(labels, batch))

    def base_reconstruction(self, V_hat, labels=None) -> Tensor:
        """(B, T, R) quantized coefficients -> (B, D, T)."""
        return reconstruct_base(self.basis_for(labels, V_hat.shape[0]), V_hat)

    def refine(self, X_tilde) -> Tensor:
        return refine(X_tilde, self.decoder_layers)

    def data_init(self, X, rng) -> None:
        """Initialize from a first batch: codebook from its encoder outputs, and
        the decoder output bias at the per-channel mean (the base reconstruction
        has no affine offset of its own)."""
        X = self._check_window(X)
        with no_grad():
            V = self.encode(X)
        self.init_codebook(V.data, rng)
        if not self.cfg.no_residual:
            mean = X.data.reshape(-1, self.cfg.num_channels).mean(axis=0)
            self.params["decoder.2.bias"].data[...] = mean.astype(self.dtype)

    def init_codebook(self, V_rows: np.ndarray, rng) -> None:
        """Data-dependent init: K distinct encoder outputs, noise-padded if fewer."""
        rows = np.asarray(V_rows).reshape(-1, self.cfg.rank)
        K = self.cfg.codebook_size
        if rows.shape[0] >= K:
            pick = rows[rng.choice(rows.shape[0], size=K, replace=False)]
        else:
            extra = rows[rng.integers(0, rows.shape[0], size=K - rows.shape[0])]
            scale = 0.01 * (rows.std() + 1e-8)
            pick = np.concatenate([rows, extra + rng.normal(0, scale, size=extra.shape)])
        self.codebook.entries.data[...] = pick.astype(self.dtype)
        self.codebook.reset_usage()
        self.codebook_initialized = True

    # -- full passes ----------------------------------------------------------------
    def loss(self, X, labels=None, frozen=None, track_usage=True):
        """Training loss for a batch X (B, T, D).

        Returns ``(loss, info)``; ``info`` holds tokens, V, V_hat and X_hat
        (numpy, (B, T, D)). Passing a previous ``info`` as ``frozen`` keeps the
        token assignment and every stop-gradient copy fixed, which makes the
        loss a smooth function of all parameters.
        """
        X = self._check_window(X)
        if X.ndim == 2:
            X = X.reshape(1, *X.shape)
        V = self.encode(X)
        if frozen is None:
            tokens, V_hat = quantize(V, self.codebook, track_usage=track_usage)
            V_st = straight_through(V, V_hat)
            sg_V = sg_V_hat = None
        else:
            tokens = frozen["tokens"]
            V_hat = embedding(self.codebook.entries, tokens)
            V_st = V + Tensor(frozen["V_hat"] - frozen["V"])
            sg_V, sg_V_hat = frozen["V"], frozen["V_hat"]
        X_hat = self.refine(self.base_reconstruction(V_st, labels)).swapaxes(-1, -2)
        loss = vq_loss(X, X_hat, V, V_hat, self.cfg.commitment_beta, sg_V=sg_V, sg_V_hat=sg_V_hat)
        info = {"tokens": tokens, "V": V.data.copy(), "V_hat": V_hat.data.copy(), "X_hat": X_hat.data}
        return loss, info

    def tokenize(self, X) -> np.ndarray:
        """Token indices (B, T) for windows (B, T, D); does not touch usage counts."""
        with no_grad():
            V = self.encode(X)
        return nearest_codes(V.data, self.codebook.entries.data)

    def decode_tokens(self, tokens, labels=None) -> np.ndarray:
        """Token indices (B, T) -> reconstructed windows (B, T, D)."""
        tokens = np.asarray(tokens, dtype=np.int64)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        with no_grad():
            V_hat = embedding(self.codebook.entries, tokens)
            X_hat = self.refine(self.base_reconstruction(V_hat, labels)).swapaxes(-1, -2)
        return X_hat.data[0] if squeeze else X_hat.data

    def reconstruct(self, X, labels=None) -> np.ndarray:
        X = np.asarray(X)
        return self.decode_tokens(self.tokenize(X), labels)


def _orthonormal(rng, D: int, R: int) -> np.ndarray:
    if R > D:
        return rng.normal(0, 1 / np.sqrt(D), size=(D, R))
    q, r = np.linalg.qr(rng.normal(size=(D, R)))
    return q * np.sign(np.diag(r))
