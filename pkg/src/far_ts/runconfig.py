"""JSON run configuration for the command-line tool.

Every section has defaults; unknown keys anywhere are rejected. Fields that
follow from the data (channel count, class count) or from Stage I (codebook
size) are filled in automatically and may not be set by hand.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from .ar import ArConfig, SamplingParams
from .data import Dataset, MinMaxNormalizer, load_csv, make_windows, synth_lowrank
from .errors import ConfigError
from .pipeline import TrainingConfig
from .vq import VqConfig

DEFAULTS = {
    "output_dir": "runs/default",
    "data": {
        "csv": None,                 # path to a numeric CSV; null selects the synthetic generator
        "has_header": True,
        "drop_first_column": False,  # leading timestamp column
        "window_length": 48,
        "stride": 1,
        "train_fraction": 0.95,
        "synthetic": {"seed": 0, "num_channels": 8, "rank": 3, "num_windows": 2000,
                      "num_prototypes": 16, "noise_std": 0.02, "num_classes": 0},
    },
    "vq": {"rank": 32, "codebook_size": 4096, "commitment_beta": 0.25,
           "encoder_hidden_dims": [512, 2048, 512], "decoder_channels": 256, "decoder_kernel_size": 3},
    "ablation": {"no_basis": False, "no_residual": False},
    "ar": {"d_model": 192, "n_layers": 6, "n_heads": 6, "dropout": 0.1, "max_context": 512,
           "rope_base": 10000.0, "ffn_multiple_of": 8, "norm_eps": 1e-6},
    "training": {
        "seed": 0,
        "stage1": {"lr": 1e-4, "epochs": 100, "batch_size": 128, "adam_betas": [0.9, 0.999]},
        "stage2": {"lr": 1e-4, "epochs": 200, "batch_size": 64, "adam_betas": [0.9, 0.95]},
        "grad_clip": 1.0,
        "restart_min_usage": 1,
        "stage2_max_steps": None,
    },
    "sampling": {"temperature": 1.0, "top_k": 1000, "top_p": 1.0, "seed": 0},
    "forecast_sampling": {"temperature": 0.5, "top_k": 50, "top_p": 1.0, "seed": 0},
}

# sections whose value may be null instead of a dict
_NULLABLE = {("data", "synthetic")}


def _section_default(path: tuple):
    node = DEFAULTS
    for k in path:
        node = node[k]
    return node


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        here = path + (k,)
        if k not in base:
            raise ConfigError(f"unknown config key: {'.'.join(here)}")
        template = _section_default(here)
        if isinstance(template, dict):
            if v is None and here in _NULLABLE:
                out[k] = None
            elif not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(here)} must be an object")
            else:
                out[k] = _merge(base[k] if base[k] is not None else template, v, here)
        else:
            out[k] = v
    return out


def parse_override(text: str):
    """``a.b.c=value`` -> (["a","b","c"], value); value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value: {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_run_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file at ``path``, then ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError("config root must be an object")
        cfg = _merge(cfg, user)
    for text in overrides:
        keys, value = parse_override(text)
        nested = value
        for k in reversed(keys):
            nested = {k: nested}
        cfg = _merge(cfg, nested)
    try:
        validate(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from None
    return cfg


def validate(cfg: dict) -> None:
    """Build every typed config once so bad values fail before any work starts."""
    d = cfg["data"]
    if d["csv"] is None and d["synthetic"] is None:
        raise ConfigError("data.csv or data.synthetic must be set")
    if d["window_length"] < 1 or d["stride"] < 1:
        raise ConfigError("window_length and stride must be positive")
    if not 0 < d["train_fraction"] <= 1:
        raise ConfigError("train_fraction must lie in (0, 1]")
    vq_config(cfg, num_channels=1, num_classes=0)
    ar_config(cfg, codebook_size=2, num_classes=0)
    training_config(cfg)
    sampling_params(cfg)
    sampling_params(cfg, "forecast_sampling")


def _typed(factory, **kw):
    try:
        return factory(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def vq_config(cfg: dict, num_channels: int, num_classes: int) -> VqConfig:
    return _typed(VqConfig, num_channels=num_channels, num_classes=num_classes, **cfg["vq"], **cfg["ablation"])


def ar_config(cfg: dict, codebook_size: int, num_classes: int) -> ArConfig:
    return _typed(ArConfig, codebook_size=codebook_size, num_classes=num_classes, **cfg["ar"])


def training_config(cfg: dict) -> TrainingConfig:
    try:
        return TrainingConfig.from_dict(cfg["training"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def sampling_params(cfg: dict, section: str = "sampling") -> SamplingParams:
    return _typed(SamplingParams, **cfg[section])


def load_data(cfg: dict):
    """Returns ``(train, test, normalizer, channel_names)``.

    ``train``/``test`` are Datasets with normalized ``windows`` and optional
    ``labels``; the normalizer is fitted on the training split only.
    """
    d = cfg["data"]
    T = d["window_length"]
    if d["csv"] is not None:
        ds = load_csv(d["csv"], has_header=d["has_header"], drop_first_column=d["drop_first_column"])
        ds.train_fraction = d["train_fraction"]
        train_raw, test_raw = ds.split()
        norm = MinMaxNormalizer().fit(train_raw.raw)
        tr = make_windows(norm.normalize(train_raw.raw), T, d["stride"])
        te_src = norm.normalize(test_raw.raw)
        te = make_windows(te_src, T, d["stride"]) if te_src.shape[0] >= T else np.zeros((0, T, tr.shape[-1]))
        names = ds.channel_names
        return (Dataset(ds.name, windows=tr, channel_names=names),
                Dataset(ds.name, windows=te, channel_names=names), norm, names)
    s = d["synthetic"]
    ds = synth_lowrank(s["seed"], s["num_channels"], T, s["rank"], s["num_windows"], s["num_prototypes"],
                       s["noise_std"], s["num_classes"])
    ds.train_fraction = d["train_fraction"]
    train, test = ds.split()
    norm = MinMaxNormalizer().fit(train.windows)
    train.windows = norm.normalize(train.windows)
    test.windows = norm.normalize(test.windows)
    return train, test, norm, ds.channel_names
