"""Dataset ingestion, windowing, min-max normalization and synthetic low-rank data."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, ParseError, StateError
from .numerics import make_rng


@dataclass
class Dataset:
    """Either a contiguous series ``raw`` (N, D) or pre-cut ``windows`` (n, T, D)."""

    name: str
    raw: np.ndarray | None = None
    windows: np.ndarray | None = None
    labels: np.ndarray | None = None
    channel_names: list = field(default_factory=list)
    train_fraction: float = 0.95
    extras: dict = field(default_factory=dict)

    @property
    def channels(self) -> int:
        src = self.raw if self.raw is not None else self.windows
        return src.shape[-1]

    def split(self):
        """Chronological (raw) or index-order (windows) train/test split.

        Returns ``(train, test)`` Datasets of the same kind.
        """
        if self.windows is not None:
            n = self.windows.shape[0]
            cut = max(1, int(round(n * self.train_fraction)))
            lab = self.labels
            parts = [(self.windows[:cut], None if lab is None else lab[:cut]),
                     (self.windows[cut:], None if lab is None else lab[cut:])]
            return tuple(Dataset(self.name, windows=w, labels=l, channel_names=self.channel_names,
                                 train_fraction=1.0, extras=self.extras) for w, l in parts)
        n = self.raw.shape[0]
        cut = max(1, int(round(n * self.train_fraction)))
        return (Dataset(self.name, raw=self.raw[:cut], channel_names=self.channel_names, train_fraction=1.0),
                Dataset(self.name, raw=self.raw[cut:], channel_names=self.channel_names, train_fraction=1.0))


def load_csv(path, has_header: bool = False, drop_first_column: bool = False) -> Dataset:
    """Read a numeric comma-separated file into a Dataset with ``raw`` set.

    ``drop_first_column`` discards a leading timestamp/index column.
    """
    path = Path(path)
    rows = []
    names = []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if drop_first_column:
                row = row[1:]
            if has_header and not names and not rows:
                names = [c.strip() for c in row]
                width = len(names)
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"line {lineno}: expected {width} fields, found {len(row)}", line=lineno)
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric cell", line=lineno) from None
    if not rows:
        raise InputError(f"{path}: no data rows")
    raw = np.asarray(rows, dtype=np.float64)
    if not names:
        names = [f"ch{j}" for j in range(raw.shape[1])]
    return Dataset(name=path.stem, raw=raw, channel_names=names)


def make_windows(raw, T: int, stride: int = 1) -> np.ndarray:
    """Sliding windows (n, T, D) at offsets 0, stride, 2*stride, ..."""
    raw = np.asarray(raw)
    if stride < 1 or T < 1:
        raise InputError("window length and stride must be positive")
    N = raw.shape[0]
    if N < T:
        raise InputError(f"series of length {N} is shorter than the window {T}")
    count = (N - T) // stride + 1
    idx = np.arange(count)[:, None] * stride + np.arange(T)[None, :]
    return raw[idx]


class MinMaxNormalizer:
    """Per-channel min-max scaling fitted on training data."""

    EPS = 1e-8

    def __init__(self, minimum=None, maximum=None):
        self.min = None if minimum is None else np.asarray(minimum, dtype=np.float64)
        self.max = None if maximum is None else np.asarray(maximum, dtype=np.float64)

    @property
    def fitted(self) -> bool:
        return self.min is not None

    def fit(self, x) -> "MinMaxNormalizer":
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, x.shape[-1])
        self.min = flat.min(axis=0)
        self.max = flat.max(axis=0)
        return self

    def _check(self):
        if not self.fitted:
            raise StateError("normalizer has not been fitted")

    def normalize(self, x) -> np.ndarray:
        self._check()
        return (np.asarray(x, dtype=np.float64) - self.min) / (self.max - self.min + self.EPS)

    def denormalize(self, y) -> np.ndarray:
        self._check()
        return np.asarray(y, dtype=np.float64) * (self.max - self.min + self.EPS) + self.min


def synth_lowrank(seed: int, D: int, T: int, R: int, n_windows: int, n_prototypes: int = 16,
                  noise_std: float = 0.0, n_classes: int = 0) -> Dataset:
    """Windows X = V* U*^T + noise with known basis and finitely many coefficient vectors.

    The coefficient prototypes are ``n_prototypes`` points on one smooth closed
    curve in R^R. Each window walks that curve one point per step from a random
    start in a random direction, so its coefficients take at most
    ``n_prototypes`` distinct values and trace a periodic signal. Every class
    gets its own orthonormal basis U* (D x R); noise is added to X.
    """
    if R > D:
        raise ConfigError(f"rank {R} exceeds channel count {D}")
    if n_prototypes < 1 or n_windows < 1 or T < 1:
        raise ConfigError("n_prototypes, n_windows and T must be positive")
    rng = make_rng(seed, 2)
    C = max(1, n_classes)
    bases = []
    for _ in range(C):
        q, r = np.linalg.qr(rng.normal(size=(D, R)))
        bases.append(q * np.sign(np.diag(r)))
    bases = np.stack(bases)

    theta = 2 * np.pi * np.arange(n_prototypes) / n_prototypes
    phase = rng.uniform(0, 2 * np.pi, size=R)
    harmonic = np.arange(1, R + 1)
    prototypes = np.sin(theta[:, None] * harmonic[None, :] + phase[None, :])

    start = rng.integers(0, n_prototypes, size=n_windows)
    direction = rng.choice([-1, 1], size=n_windows)
    states = (start[:, None] + direction[:, None] * np.arange(T)[None, :]) % n_prototypes
    labels = np.arange(n_windows) % C
    rng.shuffle(labels)
    coeffs = prototypes[states]                                   # (n, T, R)
    X = np.einsum("ntr,ndr->ntd", coeffs, bases[labels])
    if noise_std > 0:
        X = X + rng.normal(0, noise_std, size=X.shape)
    return Dataset(
        name="synth_lowrank", windows=X, labels=labels if n_classes > 0 else None,
        channel_names=[f"ch{j}" for j in range(D)],
        extras={"bases": bases, "prototypes": prototypes, "states": states, "coefficients": coeffs,
                "all_labels": labels},
    )
