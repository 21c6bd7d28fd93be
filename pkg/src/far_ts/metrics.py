"""Sample-quality metrics for generated windows and error measures for forecasts.

All window sets are arrays of shape (n, T, D) in normalized units. Scores
that train an auxiliary network (context-FID embedder, discriminator,
predictor) are repeated with independent random streams ``make_rng(seed, i)``
and reported as mean and sample standard deviation.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError, NumericError
from .numerics import Adam, Tensor, conv1d, cross_entropy, gelu, gru, linear, make_rng, no_grad

COV_REG = 1e-6
AUX_DTYPE = np.float32      # auxiliary networks; moments and distances stay float64


# -- Fréchet distance -------------------------------------------------------------------------

def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape or cov1.shape != (mu1.size, mu1.size):
        raise DimensionError("means and covariances do not conform")
    for c in (cov1, cov2):
        if np.abs(c - c.T).max() > 1e-6:
            raise NumericError("covariance is not symmetric")
    s1 = _psd_sqrt((cov1 + cov1.T) / 2)
    mid = s1 @ ((cov2 + cov2.T) / 2) @ s1
    cross = _psd_sqrt((mid + mid.T) / 2)
    diff = mu1 - mu2
    val = diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross)
    return float(max(val, 0.0))


def gaussian_moments(emb: np.ndarray):
    emb = np.asarray(emb, np.float64)
    mu = emb.mean(axis=0)
    cov = np.cov(emb, rowvar=False).reshape(emb.shape[1], emb.shape[1])
    return mu, cov + COV_REG * np.eye(emb.shape[1])


# -- context-FID embedder ----------------------------------------------------------------------

@dataclass
class EmbedderCheckpoint:
    """Temporal conv encoder with a mean-pooled bottleneck; trained as an autoencoder."""

    params: dict
    embedding_dim: int
    window_length: int
    num_channels: int

    def embed(self, windows) -> np.ndarray:
        X = np.asarray(windows, np.float64)
        if X.shape[1:] != (self.window_length, self.num_channels):
            raise DimensionError(f"embedder expects windows of shape ({self.window_length}, {self.num_channels})")
        with no_grad():
            return _embed(self.params, Tensor(X, dtype=AUX_DTYPE)).data


def _embed(P, X: Tensor) -> Tensor:
    h = gelu(conv1d(X.swapaxes(1, 2), P["c0.w"], P["c0.b"]))
    h = conv1d(h, P["c1.w"], P["c1.b"])
    return h.mean(axis=2)


def train_embedder(real, embedding_dim: int = 32, hidden: int = 64, steps: int = 400,
                   batch_size: int = 64, lr: float = 3e-3, rng=None) -> EmbedderCheckpoint:
    real = np.asarray(real, np.float64)
    rng = make_rng(0) if rng is None else rng
    n, T, D = real.shape
    E = embedding_dim
    P = {
        "c0.w": rng.normal(0, 1 / np.sqrt(3 * D), size=(hidden, D, 3)),
        "c0.b": np.zeros(hidden),
        "c1.w": rng.normal(0, 1 / np.sqrt(3 * hidden), size=(E, hidden, 3)),
        "c1.b": np.zeros(E),
        "dec.w": rng.normal(0, 1 / np.sqrt(E), size=(E, T * D)),
        "dec.b": real.reshape(n, -1).mean(axis=0),
    }
    P = {k: Tensor(v, requires_grad=True, dtype=AUX_DTYPE) for k, v in P.items()}
    opt = Adam(P.values(), lr=lr, betas=(0.9, 0.999))
    for _ in range(steps):
        xb = real[rng.integers(0, n, size=min(batch_size, n))]
        z = _embed(P, Tensor(xb, dtype=AUX_DTYPE))
        rec = linear(z, P["dec.w"], P["dec.b"])
        d = rec - Tensor(xb.reshape(xb.shape[0], -1))
        loss = (d * d).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    keep = {k: t.data.copy() for k, t in P.items() if not k.startswith("dec.")}
    return EmbedderCheckpoint(keep, E, T, D)


def context_fid(real, synth, embedder: EmbedderCheckpoint | None = None, rng=None) -> float:
    """Fréchet distance between embedded real and synthetic windows.

    Without an embedder, one is trained on ``real`` only.
    """
    real, synth = _pair(real, synth)
    if embedder is None:
        embedder = train_embedder(real, rng=rng)
    need = embedder.embedding_dim + 1
    if real.shape[0] < need or synth.shape[0] < need:
        raise InputError(f"context-FID needs at least {need} windows per set")
    return frechet_distance(*gaussian_moments(embedder.embed(real)), *gaussian_moments(embedder.embed(synth)))


# -- correlational ------------------------------------------------------------------------------

def correlation_matrix(windows) -> np.ndarray:
    """Pearson correlations over pooled (window, time) samples; constant channels give 0."""
    X = np.asarray(windows, np.float64)
    flat = X.reshape(-1, X.shape[-1])
    c = flat - flat.mean(axis=0)
    sd = np.sqrt((c * c).mean(axis=0))
    cov = c.T @ c / flat.shape[0]
    denom = np.outer(sd, sd)
    safe = np.where(denom > 0, denom, 1.0)
    corr = np.where(denom > 0, cov / safe, 0.0)
    return np.clip(corr, -1.0, 1.0)


def correlational_score(real, synth) -> float:
    real, synth = _pair(real, synth)
    D = real.shape[-1]
    if D < 2:
        raise InputError("correlational score needs at least two channels")
    iu = np.triu_indices(D, k=1)
    return float(np.abs(correlation_matrix(real)[iu] - correlation_matrix(synth)[iu]).mean())


# -- recurrent auxiliary networks ----------------------------------------------------------------

def _hidden_size(D: int) -> int:
    return max(8, 2 * D)


def _gru_params(rng, I, H, prefix):
    s = 1 / np.sqrt(H)
    return {f"{prefix}.w_ih": rng.uniform(-s, s, size=(I, 3 * H)),
            f"{prefix}.w_hh": rng.uniform(-s, s, size=(H, 3 * H)),
            f"{prefix}.b_ih": rng.uniform(-s, s, size=3 * H),
            f"{prefix}.b_hh": rng.uniform(-s, s, size=3 * H)}


def _run_gru(P, x, prefix):
    return gru(x, P[f"{prefix}.w_ih"], P[f"{prefix}.w_hh"], P[f"{prefix}.b_ih"], P[f"{prefix}.b_hh"])


def _fit(P, loss_fn, sample_batch, val_fn, st: "AuxSettings"):
    """Adam for at most ``st.max_steps``; stops once the validation loss has not
    improved for ``st.patience`` checks and restores the best parameters."""
    opt = Adam(P.values(), lr=st.lr, betas=(0.9, 0.999))
    best, stale, best_params = np.inf, 0, None
    for step in range(1, st.max_steps + 1):
        loss = loss_fn(*sample_batch())
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % st.check_every == 0:
            with no_grad():
                val = float(val_fn())
            if val < best - max(st.rel_tol * best, st.abs_tol):
                best, stale = val, 0
                best_params = {k: t.data.copy() for k, t in P.items()}
            else:
                stale += 1
                if stale >= st.patience:
                    break
    if best_params is not None:
        for k, t in P.items():
            t.data = best_params[k]
    return step


def _holdout(idx, rng, frac=0.1):
    idx = rng.permutation(idx)
    n_val = max(1, int(round(frac * len(idx)))) if len(idx) > 1 else 0
    return (idx[n_val:], idx[:n_val]) if n_val else (idx, idx)


@dataclass
class AuxSettings:
    max_steps: int = 5000
    batch_size: int = 128
    lr: float = 1e-3
    check_every: int = 50
    patience: int = 6
    rel_tol: float = 1e-2      # improvement needed to reset patience
    abs_tol: float = 1e-4


DISCRIMINATOR = AuxSettings()
PREDICTOR = AuxSettings(lr=1e-2, patience=10, rel_tol=1e-3, abs_tol=1e-7)


def discriminative_score(real, synth, rng, settings: AuxSettings | None = None) -> float:
    """|test accuracy - 0.5| of a 2-layer GRU separating real (1) from synthetic (0)."""
    st = settings or DISCRIMINATOR
    real, synth = _pair(real, synth)
    X = np.concatenate([real, synth])
    y = np.concatenate([np.ones(len(real), np.int64), np.zeros(len(synth), np.int64)])
    perm = rng.permutation(len(X))
    cut = int(round(0.8 * len(X)))
    tr, te = perm[:cut], perm[cut:]
    if len(te) == 0 or len(tr) == 0:
        raise InputError("too few windows for an 80/20 split")
    D = X.shape[-1]
    H = _hidden_size(D)
    P = {**_gru_params(rng, D, H, "g0"), **_gru_params(rng, H, H, "g1"),
         "out.w": rng.normal(0, 1 / np.sqrt(H), size=(H, 2)), "out.b": np.zeros(2)}
    P = {k: Tensor(v, requires_grad=True, dtype=AUX_DTYPE) for k, v in P.items()}

    def logits(xb):
        h = _run_gru(P, _run_gru(P, Tensor(xb, dtype=AUX_DTYPE), "g0"), "g1")
        return linear(h[:, -1], P["out.w"], P["out.b"])

    fit_idx, val_idx = _holdout(tr, rng)

    def batch():
        idx = fit_idx[rng.integers(0, len(fit_idx), size=min(st.batch_size, len(fit_idx)))]
        return X[idx], y[idx]

    _fit(P, lambda xb, yb: cross_entropy(logits(xb), yb), batch,
         lambda: cross_entropy(logits(X[val_idx]), y[val_idx]).item(), st)
    with no_grad():
        pred = np.argmax(logits(X[te]).data, axis=-1)
    acc = float((pred == y[te]).mean())
    return abs(acc - 0.5)


def _fit_predictor(train, rng, st: AuxSettings):
    D = train.shape[-1]
    H = _hidden_size(D)
    P = {**_gru_params(rng, D, H, "g0"),
         "out.w": rng.normal(0, 1 / np.sqrt(H), size=(H, D)), "out.b": np.zeros(D)}
    P = {k: Tensor(v, requires_grad=True, dtype=AUX_DTYPE) for k, v in P.items()}

    def predict(xb):
        return linear(_run_gru(P, Tensor(xb[:, :-1], dtype=AUX_DTYPE), "g0"), P["out.w"], P["out.b"])

    def loss(xb):
        d = predict(xb) - Tensor(xb[:, 1:])
        return (d * d).mean()

    fit_idx, val_idx = _holdout(np.arange(len(train)), rng)

    def batch():
        return (train[fit_idx[rng.integers(0, len(fit_idx), size=min(st.batch_size, len(fit_idx)))]],)

    _fit(P, loss, batch, lambda: loss(train[val_idx]).item(), st)
    return predict


def predictive_score(real, synth, rng, settings: AuxSettings | None = None) -> float:
    """MAE on real windows of a one-step-ahead GRU trained on synthetic windows."""
    st = settings or PREDICTOR
    real, synth = _pair(real, synth)
    if real.shape[1] < 2:
        raise InputError("predictive score needs windows of at least two steps")
    predict = _fit_predictor(synth, rng, st)
    with no_grad():
        err = 0.0
        for s in range(0, len(real), 512):
            xb = real[s:s + 512]
            err += float(np.abs(predict(xb).data - xb[:, 1:]).sum())
    return err / (real.shape[0] * (real.shape[1] - 1) * real.shape[2])


# -- forecasting ----------------------------------------------------------------------------------

def forecast_errors(pred, truth):
    """(RMSE, MAE) over all entries."""
    pred, truth = np.asarray(pred, np.float64), np.asarray(truth, np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
    e = pred - truth
    return float(np.sqrt((e * e).mean())), float(np.abs(e).mean())


# -- report -----------------------------------------------------------------------------------------

METRICS = ("context_fid", "correlational", "discriminative", "predictive")


@dataclass
class MetricReport:
    results: dict = field(default_factory=dict)     # name -> {"mean", "std", "repeats", "values"}
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, values) -> None:
        v = np.asarray(values, np.float64)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        self.results[name] = {"mean": float(v.mean()), "std": std, "repeats": int(v.size),
                              "values": [float(x) for x in v]}

    def mean(self, name: str) -> float:
        return self.results[name]["mean"]

    def to_json(self) -> str:
        return json.dumps({**self.results, "metadata": self.metadata}, indent=2, sort_keys=True) + "\n"


def _one_repeat(args):
    name, real, synth, seed, i = args
    rng = make_rng(seed, i)
    if name == "context_fid":
        return context_fid(real, synth, rng=rng)
    if name == "discriminative":
        return discriminative_score(real, synth, rng)
    if name == "predictive":
        return predictive_score(real, synth, rng)
    raise ValueError(f"unknown metric {name}")


def evaluate(real, synth, repeats: int = 5, seed: int = 0, metrics=METRICS,
             workers: int = 1) -> MetricReport:
    """Run the metric suite; each repeat of a trained metric uses ``make_rng(seed, i)``."""
    if repeats < 1:
        raise InputError("repeats must be at least 1")
    real, synth = _pair(real, synth)
    report = MetricReport(metadata={
        "embedder": "temporal conv autoencoder trained on the real set; values comparable only within this tool",
        "classifier": f"2-layer GRU, hidden {_hidden_size(real.shape[-1])}",
        "predictor": f"1-layer GRU, hidden {_hidden_size(real.shape[-1])}",
        "seed": seed,
    })
    jobs = [(m, real, synth, seed, i) for m in metrics if m != "correlational" for i in range(repeats)]
    if workers > 1 and jobs:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(_one_repeat, jobs))
    else:
        values = [_one_repeat(j) for j in jobs]
    k = 0
    for m in metrics:
        if m == "correlational":
            report.add(m, [correlational_score(real, synth)] * repeats)     # no trained component
            continue
        report.add(m, values[k:k + repeats])
        k += repeats
    return report


def _pair(real, synth):
    real, synth = np.asarray(real, np.float64), np.asarray(synth, np.float64)
    if real.ndim != 3 or synth.ndim != 3:
        raise DimensionError("window sets must be (n, T, D) arrays")
    if real.shape[1:] != synth.shape[1:]:
        raise DimensionError(f"window shapes differ: {real.shape[1:]} vs {synth.shape[1:]}")
    if real.shape[0] == 0 or synth.shape[0] == 0:
        raise InputError("empty window set")
    return real, synth
