"""Staged training (VQ first, then the AR prior on frozen tokens) and inference."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .ar import ArConfig, ArPrior, SamplingParams
from .data import MinMaxNormalizer
from .errors import ConfigError, InputError, LengthError
from .io import Checkpoint, TokenCorpus
from .numerics import Adam, make_rng, no_grad
from .vq import FactorizedVQ, VqConfig, restart_dead_codes

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class StageConfig:
    lr: float
    epochs: int
    batch_size: int
    adam_betas: tuple

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")


@dataclass
class TrainingConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(1e-4, 100, 128, (0.9, 0.999)))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(1e-4, 200, 64, (0.9, 0.95)))
    seed: int = 0
    grad_clip: float | None = 1.0        # Stage II only
    restart_min_usage: int = 1
    stage2_max_steps: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        for key in ("stage1", "stage2"):
            if key in d and isinstance(d[key], dict):
                base = asdict(getattr(cls(), key))
                base.update(d[key])
                d[key] = StageConfig(**base)
        return cls(**d)


@dataclass
class TrainResult:
    loss_curve: list
    steps: int
    final_rmse: float | None = None


def _batches(n: int, batch_size: int, rng):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


# -- Stage I -----------------------------------------------------------------------------

def train_stage1(windows, vq_cfg: VqConfig, train_cfg: TrainingConfig, labels=None, on_epoch=None):
    """Fit encoder, bases, codebook and decoder on normalized windows (n, T, D).

    Returns ``(model, TrainResult)``; ``on_epoch`` receives one dict per epoch.
    """
    windows = np.asarray(windows, dtype=np.float32)
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise InputError("expected a non-empty (n, T, D) window array")
    if (labels is not None) != (vq_cfg.num_classes > 0):
        raise ConfigError("labels must be given exactly when num_classes > 0")
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (windows.shape[0],) or labels.min() < 0 or labels.max() >= vq_cfg.num_classes:
            raise ConfigError("labels do not match windows / num_classes")
    sc = train_cfg.stage1
    rng = make_rng(train_cfg.seed, 11)
    model = FactorizedVQ(vq_cfg, seed=train_cfg.seed)
    first = rng.permutation(windows.shape[0])[:sc.batch_size]
    model.data_init(windows[first], rng)
    opt = Adam(model.parameters(), lr=sc.lr, betas=sc.adam_betas)
    cb_index = list(model.params).index("codebook")

    curve, steps, recent = [], 0, None
    for epoch in range(sc.epochs):
        total = 0.0
        for idx in _batches(windows.shape[0], sc.batch_size, rng):
            lb = None if labels is None else labels[idx]
            loss, info = model.loss(windows[idx], lb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            recent = info["V"]
            steps += 1
        curve.append(total / windows.shape[0])
        dead = np.array([], dtype=np.int64)
        if epoch < sc.epochs - 1:
            dead = restart_dead_codes(model.codebook, recent, train_cfg.restart_min_usage, rng)
            if dead.size:
                opt.state.reset_rows(cb_index, dead)
        rec = {"stage": 1, "epoch": epoch + 1, "loss": curve[-1], "restarted_codes": int(dead.size)}
        log.info("stage1 epoch %d loss %.6f", epoch + 1, curve[-1])
        if on_epoch is not None:
            on_epoch(rec)
    result = TrainResult(curve, steps, reconstruction_rmse(model, windows, labels))
    return model, result


def reconstruction_rmse(vq: FactorizedVQ, windows, labels=None, batch: int = 512) -> float:
    """RMSE of tokenize-then-decode over all windows, normalized units."""
    windows = np.asarray(windows)
    sq = 0.0
    for s in range(0, windows.shape[0], batch):
        xb = windows[s:s + batch]
        lb = None if labels is None else np.asarray(labels)[s:s + batch]
        rec = vq.reconstruct(xb, lb)
        sq += float(np.sum((rec.astype(np.float64) - xb) ** 2))
    return float(np.sqrt(sq / windows.size))


def vq_checkpoint(vq: FactorizedVQ, normalizer: MinMaxNormalizer | None = None, **meta) -> Checkpoint:
    md = {"stage": "vq", "format_version": FORMAT_VERSION, "config": vq.cfg.to_dict(), **meta}
    if normalizer is not None and normalizer.fitted:
        md["normalizer"] = {"min": normalizer.min.tolist(), "max": normalizer.max.tolist()}
    return Checkpoint(metadata=md, tensors=vq.state_dict())


def vq_from_checkpoint(ckpt: Checkpoint):
    """Returns ``(model, normalizer or None)``."""
    if ckpt.metadata.get("stage") != "vq":
        raise ConfigError("not a Stage-I checkpoint")
    vq = FactorizedVQ(VqConfig.from_dict(ckpt.metadata["config"]))
    vq.load_state_dict(ckpt.tensors)
    norm = ckpt.metadata.get("normalizer")
    return vq, (MinMaxNormalizer(norm["min"], norm["max"]) if norm else None)


def vq_checksum(vq: FactorizedVQ) -> str:
    return Checkpoint(metadata={}, tensors=vq.state_dict()).content_hash


# -- corpus ------------------------------------------------------------------------------

def tokenize_corpus(vq: FactorizedVQ, windows, labels=None, checksum: str | None = None,
                    batch: int = 512) -> TokenCorpus:
    """Encode and quantize every window once with the frozen Stage-I model."""
    windows = np.asarray(windows, dtype=np.float32)
    seqs = []
    for s in range(0, windows.shape[0], batch):
        seqs.extend(vq.tokenize(windows[s:s + batch]))
    labs = [None] * len(seqs) if labels is None else [int(c) for c in labels]
    return TokenCorpus(seqs, labs, checksum or vq_checksum(vq), vq.cfg.codebook_size)


# -- Stage II -----------------------------------------------------------------------------

def _prefixes(ar: ArPrior, labels) -> np.ndarray:
    return np.array([ar.prefix_token(c) for c in labels], dtype=np.int64)


def _pad(seqs):
    n = max(len(s) for s in seqs)
    tokens = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, :len(s)] = s
        mask[i, :len(s)] = True
    return tokens, mask


def train_stage2(corpus: TokenCorpus, ar_cfg: ArConfig, train_cfg: TrainingConfig, on_epoch=None):
    """Fit the AR prior on a precomputed token corpus. Returns ``(model, TrainResult)``."""
    if len(corpus) == 0:
        raise InputError("empty token corpus")
    if corpus.codebook_size != ar_cfg.codebook_size:
        raise ConfigError(f"corpus codebook size {corpus.codebook_size} vs model {ar_cfg.codebook_size}")
    labelled = [c is not None for c in corpus.labels]
    if ar_cfg.num_classes > 0 and not all(labelled):
        raise ConfigError("conditional prior needs a class for every sequence")
    if ar_cfg.num_classes == 0 and any(labelled):
        raise ConfigError("corpus has class labels but the prior is unconditional")
    if max(len(s) for s in corpus.sequences) > ar_cfg.max_context:
        raise LengthError("training sequence longer than the context")
    sc = train_cfg.stage2
    model = ArPrior(ar_cfg, seed=train_cfg.seed)
    prefixes = _prefixes(model, corpus.labels)
    rng = make_rng(train_cfg.seed, 12)
    drop_rng = make_rng(train_cfg.seed, 13)
    opt = Adam(model.parameters(), lr=sc.lr, betas=sc.adam_betas, clip_norm=train_cfg.grad_clip)
    curve, steps = [], 0
    done = False
    for epoch in range(sc.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(corpus), sc.batch_size, rng):
            tokens, mask = _pad([corpus.sequences[i] for i in idx])
            loss = model.loss(tokens, prefixes[idx], mask, training=True, rng=drop_rng)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * mask.sum()
            count += mask.sum()
            steps += 1
            if train_cfg.stage2_max_steps is not None and steps >= train_cfg.stage2_max_steps:
                done = True
                break
        curve.append(total / count)
        log.info("stage2 epoch %d nll %.6f", epoch + 1, curve[-1])
        if on_epoch is not None:
            on_epoch({"stage": 2, "epoch": epoch + 1, "nll": curve[-1], "steps": steps})
        if done:
            break
    return model, TrainResult(curve, steps)


def corpus_nll(ar: ArPrior, corpus: TokenCorpus, batch: int = 64, skip_first: bool = False) -> float:
    """Per-token NLL with dropout off.

    ``skip_first`` leaves out the prediction of each sequence's first token,
    i.e. scores only the continuation given that token.
    """
    prefixes = _prefixes(ar, corpus.labels)
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(corpus), batch):
            tokens, mask = _pad(corpus.sequences[s:s + batch])
            if skip_first:
                mask[:, 0] = False
            loss = ar.loss(tokens, prefixes[s:s + batch], mask)
            total += loss.item() * mask.sum()
            count += mask.sum()
    return total / count


def ar_checkpoint(ar: ArPrior, source_vq_checksum: str | None = None, **meta) -> Checkpoint:
    md = {"stage": "ar", "format_version": FORMAT_VERSION, "config": ar.cfg.to_dict(), **meta}
    if source_vq_checksum is not None:
        md["source_vq_checksum"] = source_vq_checksum
    return Checkpoint(metadata=md, tensors=ar.state_dict())


def ar_from_checkpoint(ckpt: Checkpoint) -> ArPrior:
    if ckpt.metadata.get("stage") != "ar":
        raise ConfigError("not a Stage-II checkpoint")
    ar = ArPrior(ArConfig.from_dict(ckpt.metadata["config"]))
    ar.load_state_dict(ckpt.tensors)
    return ar


# -- inference -------------------------------------------------------------------------------

def _check_pair(vq: FactorizedVQ, ar: ArPrior):
    if vq.cfg.codebook_size != ar.cfg.codebook_size:
        raise ConfigError("Stage-I codebook and Stage-II vocabulary disagree")
    if vq.cfg.num_classes != ar.cfg.num_classes:
        raise ConfigError("Stage-I and Stage-II class counts disagree")


def generate(vq: FactorizedVQ, ar: ArPrior, length: int, sp: SamplingParams, class_label=None,
             num_samples: int = 1, normalizer: MinMaxNormalizer | None = None) -> np.ndarray:
    """Sample ``num_samples`` windows of ``length`` steps: (M, length, D).

    Values are denormalized when a normalizer is given.
    """
    _check_pair(vq, ar)
    if length < 1 or length > ar.cfg.max_context - 1:
        raise LengthError(f"length must lie in [1, {ar.cfg.max_context - 1}]")
    rng = make_rng(sp.seed, 20)
    labels = None if class_label is None else np.full(num_samples, int(class_label))
    tokens = ar.sample(length, sp, rng, class_label=labels, batch=num_samples)
    X = vq.decode_tokens(tokens, labels).astype(np.float64)
    return normalizer.denormalize(X) if normalizer is not None else X


def generate_tokens(ar: ArPrior, length: int, sp: SamplingParams, class_label=None,
                    num_samples: int = 1) -> np.ndarray:
    rng = make_rng(sp.seed, 20)
    labels = None if class_label is None else np.full(num_samples, int(class_label))
    return ar.sample(length, sp, rng, class_label=labels, batch=num_samples)


def forecast(vq: FactorizedVQ, ar: ArPrior, observed, horizon: int, sp: SamplingParams,
             class_label=None, normalizer: MinMaxNormalizer | None = None) -> np.ndarray:
    """Continue observed windows by ``horizon`` steps.

    ``observed`` is (T_obs, D) or (B, T_obs, D); the result is (horizon, D) or
    (B, horizon, D). Long horizons slide the context window.
    """
    _check_pair(vq, ar)
    obs = np.asarray(observed, dtype=np.float64)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    if obs.ndim != 3 or obs.shape[1] < 1:
        raise InputError("observation must contain at least one time step")
    if horizon < 1:
        raise InputError("horizon must be positive")
    if normalizer is not None:
        obs = normalizer.normalize(obs)
    B = obs.shape[0]
    labels = None if class_label is None else np.broadcast_to(np.asarray(class_label, np.int64), (B,))
    prompt = vq.tokenize(obs.astype(vq.dtype))
    rng = make_rng(sp.seed, 21)
    new = ar.sample(horizon, sp, rng, class_label=labels, batch=B, prompt=prompt)
    X = vq.decode_tokens(np.concatenate([prompt, new], axis=1), labels)[:, -horizon:].astype(np.float64)
    if normalizer is not None:
        X = normalizer.denormalize(X)
    return X[0] if single else X
