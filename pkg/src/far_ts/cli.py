"""``far-ts`` command-line tool.

Subcommands: train-vq, tokenize, train-ar, generate, forecast, evaluate,
inspect, bench, defaults. Progress goes to stdout as one JSON object per
line; logs go to stderr. Failures print a single JSON line
``{"error": <category>, "message": ...}`` on stderr and exit with:

    2  missing checkpoint or corpus
    3  invalid configuration
    4  numeric failure
    5  output directory locked by another training job
    1  any other error
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import metrics as M
from . import pipeline as P
from . import runconfig as RC
from .data import load_csv
from .errors import (ChecksumError, ConfigError, CorruptionError, FarTsError, FormatError, LengthError,
                     NumericError, StateError)
from .io import load_checkpoint, load_corpus, save_checkpoint, save_corpus

log = logging.getLogger("far_ts")

EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC, EXIT_LOCKED = 2, 3, 4, 5

VQ_FILE, AR_FILE, CORPUS_FILE = "vq.ckpt", "ar.ckpt", "corpus.jsonl"


class MissingArtifact(FarTsError):
    pass


class Locked(FarTsError):
    pass


# -- helpers ---------------------------------------------------------------------------------------

def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def write_csv(path: Path, rows, header) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in np.atleast_2d(rows))
    path.write_text("\n".join(lines) + "\n")


def read_window_dir(directory) -> np.ndarray:
    """Every ``*.csv`` under ``directory`` (sorted by name) is one window with a header row."""
    files = sorted(Path(directory).glob("*.csv"))
    if not files:
        raise MissingArtifact(f"no CSV windows in {directory}")
    wins = [load_csv(f, has_header=True).raw for f in files]
    if len({w.shape for w in wins}) != 1:
        raise ConfigError(f"windows in {directory} differ in shape")
    return np.stack(wins)


@contextlib.contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise Locked(f"{lock} exists; another training job is using {out}") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(lock)


def _out(cfg) -> Path:
    return Path(cfg["output_dir"])


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path}")
    return path


def _load_vq(cfg, path=None):
    ck = load_checkpoint(_require(Path(path) if path else _out(cfg) / VQ_FILE))
    vq, norm = P.vq_from_checkpoint(ck)
    return vq, norm, ck


def _load_ar(cfg):
    ck = load_checkpoint(_require(_out(cfg) / AR_FILE))
    return P.ar_from_checkpoint(ck), ck


# -- commands ---------------------------------------------------------------------------------------

def cmd_train_vq(cfg, args) -> None:
    out = _out(cfg)
    with output_lock(out):
        train, test, norm, names = RC.load_data(cfg)
        n_classes = 0 if train.labels is None else int(cfg["data"]["synthetic"]["num_classes"])
        vq_cfg = RC.vq_config(cfg, num_channels=train.windows.shape[-1], num_classes=n_classes)
        tc = RC.training_config(cfg)
        vq, res = P.train_stage1(train.windows, vq_cfg, tc, labels=train.labels, on_epoch=_emit)
        if not np.isfinite(res.loss_curve[-1]):
            raise NumericError("Stage-I loss diverged")
        ck = P.vq_checkpoint(vq, norm, channel_names=names, window_length=cfg["data"]["window_length"],
                             seed=tc.seed, train_rmse=res.final_rmse)
        save_checkpoint(out / VQ_FILE, ck)
        write_csv(out / "vq_loss.csv", [[i + 1, l] for i, l in enumerate(res.loss_curve)], ["epoch", "loss"])
        test_rmse = None
        if test.windows.shape[0]:
            test_rmse = P.reconstruction_rmse(vq, test.windows, test.labels)
            held = out / "heldout"
            for i, w in enumerate(norm.denormalize(test.windows)):
                write_csv(held / f"window_{i:05d}.csv", w, names)
        _emit({"stage": 1, "done": True, "train_rmse": res.final_rmse, "test_rmse": test_rmse,
               "checkpoint": str(out / VQ_FILE)})


def cmd_tokenize(cfg, args) -> None:
    out = _out(cfg)
    vq, _, ck = _load_vq(cfg)
    train, _, _, _ = RC.load_data(cfg)
    corpus = P.tokenize_corpus(vq, train.windows, train.labels, checksum=ck.metadata["content_hash"])
    save_corpus(out / CORPUS_FILE, corpus)
    _emit({"tokenized": len(corpus), "corpus": str(out / CORPUS_FILE)})


def cmd_train_ar(cfg, args) -> None:
    out = _out(cfg)
    with output_lock(out):
        vq, _, vq_ck = _load_vq(cfg)
        corpus = load_corpus(_require(out / CORPUS_FILE), expected_vq_checksum=vq_ck.metadata["content_hash"])
        ar_cfg = RC.ar_config(cfg, codebook_size=vq.cfg.codebook_size, num_classes=vq.cfg.num_classes)
        tc = RC.training_config(cfg)
        ar, res = P.train_stage2(corpus, ar_cfg, tc, on_epoch=_emit)
        if not np.isfinite(res.loss_curve[-1]):
            raise NumericError("Stage-II loss diverged")
        save_checkpoint(out / AR_FILE, P.ar_checkpoint(ar, vq_ck.metadata["content_hash"], seed=tc.seed))
        write_csv(out / "ar_nll.csv", [[i + 1, l] for i, l in enumerate(res.loss_curve)], ["epoch", "nll"])
        _emit({"stage": 2, "done": True, "final_nll": res.loss_curve[-1], "steps": res.steps,
               "checkpoint": str(out / AR_FILE)})


def _check_source(vq_ck, ar_ck):
    want = ar_ck.metadata.get("source_vq_checksum")
    if want is not None and want != vq_ck.metadata["content_hash"]:
        raise ChecksumError("Stage-II checkpoint was trained on a different Stage-I checkpoint")


def cmd_generate(cfg, args) -> None:
    out = _out(cfg)
    vq, norm, vq_ck = _load_vq(cfg)
    ar, ar_ck = _load_ar(cfg)
    _check_source(vq_ck, ar_ck)
    sp = RC.sampling_params(cfg)
    if args.seed is not None:
        sp.seed = args.seed
    X = P.generate(vq, ar, args.length, sp, class_label=args.class_label, num_samples=args.num_samples,
                   normalizer=None if args.normalized else norm)
    names = vq_ck.metadata.get("channel_names") or [f"ch{j}" for j in range(X.shape[-1])]
    sub = Path(args.subdir or "generated")
    if sub.is_absolute() or ".." in sub.parts:
        raise ConfigError("--subdir must be a relative path inside the output directory")
    target = out / sub
    for i, w in enumerate(X):
        write_csv(target / f"sample_{i:05d}.csv", w, names)
    _emit({"generated": int(X.shape[0]), "length": args.length, "dir": str(target)})


def cmd_forecast(cfg, args) -> None:
    out = _out(cfg)
    vq, norm, vq_ck = _load_vq(cfg)
    ar, ar_ck = _load_ar(cfg)
    _check_source(vq_ck, ar_ck)
    sp = RC.sampling_params(cfg, "forecast_sampling")
    if args.seed is not None:
        sp.seed = args.seed
    observed = load_csv(args.input, has_header=not args.no_header).raw
    use_norm = None if args.normalized else norm
    pred = P.forecast(vq, ar, observed, args.horizon, sp, class_label=args.class_label, normalizer=use_norm)
    names = vq_ck.metadata.get("channel_names") or [f"ch{j}" for j in range(pred.shape[-1])]
    write_csv(out / "forecast.csv", pred, names)
    record = {"horizon": args.horizon, "forecast": str(out / "forecast.csv")}
    if args.truth:
        truth = load_csv(args.truth, has_header=not args.no_header).raw[:args.horizon]
        rmse, mae = M.forecast_errors(pred, truth)
        doc = {"rmse": rmse, "mae": mae, "horizon": args.horizon}
        (out / "forecast_metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        record.update(doc)
    _emit(record)


def cmd_evaluate(cfg, args) -> None:
    out = _out(cfg)
    real = read_window_dir(args.real)
    synth = read_window_dir(args.synth)
    # shared scale: min-max fitted on the real windows
    lo = real.reshape(-1, real.shape[-1]).min(axis=0)
    span = real.reshape(-1, real.shape[-1]).max(axis=0) - lo + 1e-8
    report = M.evaluate((real - lo) / span, (synth - lo) / span, repeats=args.repeats, seed=args.seed,
                        workers=args.workers)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    _emit({k: v["mean"] for k, v in report.results.items()})


def cmd_inspect(cfg, args) -> None:
    out = _out(cfg)
    vq, _, ck = _load_vq(cfg, args.checkpoint)
    dest = out / "inspect"
    names = ck.metadata.get("channel_names") or [f"ch{j}" for j in range(vq.cfg.num_channels)]
    R = vq.cfg.rank
    if vq.cfg.no_basis:
        bases = vq.params["mixer.weight"].data[None]
    else:
        bases = vq.params["basis"].data
    for c, U in enumerate(bases):
        rows = [[j, *U[j]] for j in range(U.shape[0])]
        write_csv(dest / f"basis_class{c}.csv", rows, ["channel_index", *[f"u{r}" for r in range(R)]])
    (dest / "channels.json").write_text(json.dumps(names) + "\n")
    usage = vq.codebook.usage_counts
    write_csv(dest / "codebook_usage.csv", [[k, usage[k]] for k in range(len(usage))], ["token", "count"])
    train, _, _, _ = RC.load_data(cfg)
    n = min(args.max_windows, train.windows.shape[0])
    tokens = vq.tokenize(train.windows[:n].astype(vq.dtype))
    V = vq.encode(train.windows[:n].astype(vq.dtype)).data
    write_csv(dest / "token_traces.csv", [[i, t, tokens[i, t], *V[i, t]] for i in range(n) for t in range(tokens.shape[1])],
              ["window", "step", "token", *[f"v{r}" for r in range(R)]])
    _emit({"inspect": str(dest), "bases": int(bases.shape[0]), "used_codes": int((usage > 0).sum()),
           "codebook_size": int(len(usage))})


def cmd_bench(cfg, args) -> None:
    out = _out(cfg)
    vq, _, _ = _load_vq(cfg)
    ar, _ = _load_ar(cfg)
    sp = RC.sampling_params(cfg)
    lengths = [int(x) for x in args.lengths.split(",")]
    rows = []
    P.generate(vq, ar, min(lengths), sp, num_samples=args.num_samples)      # warm-up
    for L in lengths:
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            P.generate(vq, ar, L, sp, num_samples=args.num_samples)
            times.append(time.perf_counter() - t0)
        med = float(np.median(times))
        rows.append([L, med, med / L])
        _emit({"length": L, "seconds": med})
    write_csv(out / "bench.csv", rows, ["length", "seconds", "seconds_per_step"])


def cmd_defaults(cfg, args) -> None:
    sys.stdout.write(json.dumps(RC.DEFAULTS, indent=2) + "\n")


# -- entry point ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="far-ts", description="Factorized VQ + autoregressive time-series generation")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. training.stage1.epochs=5")
        sp.add_argument("--output-dir", help="override output_dir")
        sp.add_argument("-v", "--verbose", action="store_true")
        sp.set_defaults(func=fn)
        return sp

    add("train-vq", cmd_train_vq, "train the Stage-I factorized VQ model")
    add("tokenize", cmd_tokenize, "tokenize training windows with the frozen Stage-I model")
    add("train-ar", cmd_train_ar, "train the Stage-II autoregressive prior")
    g = add("generate", cmd_generate, "sample new windows")
    g.add_argument("--length", type=int, default=48)
    g.add_argument("--class", dest="class_label", type=int)
    g.add_argument("--num-samples", type=int, default=1)
    g.add_argument("--seed", type=int)
    g.add_argument("--normalized", action="store_true", help="write normalized instead of raw units")
    g.add_argument("--subdir", help="directory under output_dir (default: generated)")
    f = add("forecast", cmd_forecast, "continue an observed series")
    f.add_argument("--input", required=True)
    f.add_argument("--horizon", type=int, required=True)
    f.add_argument("--truth", help="CSV with the true continuation; enables RMSE/MAE output")
    f.add_argument("--class", dest="class_label", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--no-header", action="store_true")
    f.add_argument("--normalized", action="store_true", help="inputs and outputs in normalized units")
    e = add("evaluate", cmd_evaluate, "score synthetic windows against real ones")
    e.add_argument("--real", required=True)
    e.add_argument("--synth", required=True)
    e.add_argument("--repeats", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    i = add("inspect", cmd_inspect, "export bases, codebook usage and token traces")
    i.add_argument("--checkpoint", help="Stage-I checkpoint (default: output_dir/vq.ckpt)")
    i.add_argument("--max-windows", type=int, default=16)
    b = add("bench", cmd_bench, "time generation at several lengths")
    b.add_argument("--lengths", default="24,48,96")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--num-samples", type=int, default=1)
    add("defaults", cmd_defaults, "print the default configuration")
    return p


def _fail(category: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": category, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.output_dir:
            overrides.append(f"output_dir={json.dumps(args.output_dir)}")
        cfg = RC.load_run_config(args.config, overrides)
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            args.func(cfg, args)
    except (MissingArtifact, FileNotFoundError) as exc:
        return _fail("missing", exc, EXIT_MISSING)
    except (ConfigError, LengthError, ChecksumError) as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (NumericError, FloatingPointError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)
    except Locked as exc:
        return _fail("locked", exc, EXIT_LOCKED)
    except (FormatError, CorruptionError, StateError, FarTsError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
