import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import subspace_angles

from far_ts.data import MinMaxNormalizer, load_csv, make_windows, synth_lowrank
from far_ts.errors import (ChecksumError, ConfigError, CorruptionError, FormatError, InputError,
                           ParseError, StateError)
from far_ts.io import MAGIC, Checkpoint, TokenCorpus, load_checkpoint, load_corpus, save_checkpoint, save_corpus


# -- csv ------------------------------------------------------------------------------------

def test_load_csv_plain(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2\n3,4\n5,6")
    np.testing.assert_array_equal(load_csv(p).raw, [[1, 2], [3, 4], [5, 6]])


def test_load_csv_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b\n1,2\n3,4\n")
    ds = load_csv(p, has_header=True)
    assert ds.raw.shape == (2, 2)
    assert ds.channel_names == ["a", "b"]


def test_load_csv_timestamp_column(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("date,x,y\n2016-07-01 00:00,1,2\n2016-07-01 01:00,3,4\n")
    ds = load_csv(p, has_header=True, drop_first_column=True)
    np.testing.assert_array_equal(ds.raw, [[1, 2], [3, 4]])


def test_load_csv_ragged_names_line(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("1,2\n" * 6 + "7\n8,9\n")
    with pytest.raises(ParseError) as exc:
        load_csv(p)
    assert exc.value.line == 7
    assert "line 7" in str(exc.value)


def test_load_csv_empty(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(InputError):
        load_csv(p)


# -- windows ----------------------------------------------------------------------------------

def test_make_windows_count():
    assert make_windows(np.zeros((100, 2)), 48, 1).shape == (53, 48, 2)


def test_make_windows_full_length():
    raw = np.random.default_rng(0).normal(size=(48, 3))
    w = make_windows(raw, 48, 1)
    assert w.shape == (1, 48, 3)
    np.testing.assert_array_equal(w[0], raw)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 20), st.integers(1, 10))
def test_make_windows_formula_and_values(N, T, stride):
    raw = np.arange(N * 2, dtype=float).reshape(N, 2)
    if N < T:
        with pytest.raises(InputError):
            make_windows(raw, T, stride)
        return
    w = make_windows(raw, T, stride)
    assert w.shape[0] == (N - T) // stride + 1
    for i in range(w.shape[0]):
        np.testing.assert_array_equal(w[i], raw[i * stride:i * stride + T])


def test_make_windows_stride_equals_length():
    w = make_windows(np.zeros((100, 1)), 25, 25)
    assert w.shape[0] == 4


# -- normalization ----------------------------------------------------------------------------------

def test_normalizer_round_trip_and_range():
    x = np.random.default_rng(1).normal(5, 3, size=(200, 4))
    n = MinMaxNormalizer().fit(x)
    y = n.normalize(x)
    assert y.min() >= 0 and y.max() <= 1 + 1e-6
    np.testing.assert_allclose(n.denormalize(y), x, rtol=1e-5)


def test_normalizer_constant_channel():
    x = np.column_stack([np.full(10, 3.0), np.arange(10.0)])
    y = MinMaxNormalizer().fit(x).normalize(x)
    np.testing.assert_array_equal(y[:, 0], 0)


def test_normalizer_unfit():
    with pytest.raises(StateError):
        MinMaxNormalizer().normalize(np.zeros((2, 2)))


# -- synthetic ---------------------------------------------------------------------------------------

def test_synth_noise_free_lies_in_column_space():
    ds = synth_lowrank(0, D=6, T=20, R=2, n_windows=30, n_classes=2)
    for w, c in zip(ds.windows, ds.labels):
        U = ds.extras["bases"][c]
        resid = w - (w @ U) @ U.T
        assert np.abs(resid).max() < 1e-6


def test_synth_deterministic():
    a = synth_lowrank(3, 4, 10, 2, 5, noise_std=0.1)
    b = synth_lowrank(3, 4, 10, 2, 5, noise_std=0.1)
    np.testing.assert_array_equal(a.windows, b.windows)


@pytest.mark.parametrize("seed", range(5))
def test_synth_class_bases_are_separated(seed):
    ds = synth_lowrank(seed, D=8, T=4, R=3, n_windows=4, n_classes=2)
    U0, U1 = ds.extras["bases"]
    assert subspace_angles(U0, U1).min() > 0.1


def test_synth_coefficients_use_prototypes():
    ds = synth_lowrank(1, 8, 48, 3, 50, n_prototypes=16)
    distinct = np.unique(ds.extras["coefficients"].reshape(-1, 3), axis=0)
    assert len(distinct) <= 16


def test_synth_rank_too_large():
    with pytest.raises(ConfigError):
        synth_lowrank(0, D=2, T=4, R=3, n_windows=1)


def test_dataset_split_fraction():
    ds = synth_lowrank(0, 4, 8, 2, 100)
    train, test = ds.split()
    assert train.windows.shape[0] == 95 and test.windows.shape[0] == 5


# -- checkpoints -----------------------------------------------------------------------------------------

def _ckpt():
    rng = np.random.default_rng(2)
    return Checkpoint({"stage": "vq", "seed": 1},
                      {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32([1.5]),
                       "scalar": np.array(2.0, dtype=np.float32)})


def test_checkpoint_round_trip(tmp_path):
    ck = _ckpt()
    digest = save_checkpoint(tmp_path / "m.ckpt", ck)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.metadata["content_hash"] == digest == back.content_hash
    assert back.metadata["stage"] == "vq"
    for k, v in ck.tensors.items():
        assert back.tensors[k].tobytes() == np.asarray(v, np.float32).tobytes()
        assert back.tensors[k].shape == np.shape(v)


def test_checkpoint_bytes_deterministic(tmp_path):
    save_checkpoint(tmp_path / "1", _ckpt())
    save_checkpoint(tmp_path / "2", _ckpt())
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


@pytest.mark.parametrize("cut", [3, 12, 40, -1])
def test_checkpoint_truncated(tmp_path, cut):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, _ckpt())
    data = p.read_bytes()
    p.write_bytes(data[:cut])
    with pytest.raises(CorruptionError):
        load_checkpoint(p)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, _ckpt())
    p.write_bytes(b"XXXX0000" + p.read_bytes()[8:])
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_checkpoint_bit_flip(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, _ckpt())
    data = bytearray(p.read_bytes())
    data[-2] ^= 0x40
    p.write_bytes(bytes(data))
    with pytest.raises(CorruptionError):
        load_checkpoint(p)


def test_checkpoint_header_layout(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, _ckpt())
    data = p.read_bytes()
    assert data[:8] == MAGIC
    mlen = int.from_bytes(data[8:16], "little")
    meta = json.loads(data[16:16 + mlen])
    assert "content_hash" in meta


def test_failed_save_leaves_target_untouched(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, _ckpt())
    before = p.read_bytes()
    bad = Checkpoint({"x": object()}, {"a": np.zeros(2, np.float32)})
    with pytest.raises(TypeError):
        save_checkpoint(p, bad)
    assert p.read_bytes() == before
    assert [f.name for f in tmp_path.iterdir()] == ["m.ckpt"]


# -- corpus ---------------------------------------------------------------------------------------------

def test_corpus_round_trip(tmp_path):
    c = TokenCorpus([[1, 2, 3], [0, 0]], [None, 1], "abc", 4)
    save_corpus(tmp_path / "c.jsonl", c)
    back = load_corpus(tmp_path / "c.jsonl", expected_vq_checksum="abc")
    assert [s.tolist() for s in back.sequences] == [[1, 2, 3], [0, 0]]
    assert back.labels == [None, 1]
    first = json.loads((tmp_path / "c.jsonl").read_text().splitlines()[0])
    assert first == {"tokens": [1, 2, 3], "class": None}


def test_corpus_stale_checksum(tmp_path):
    save_corpus(tmp_path / "c.jsonl", TokenCorpus([[1]], [None], "abc", 4))
    with pytest.raises(ChecksumError):
        load_corpus(tmp_path / "c.jsonl", expected_vq_checksum="def")


def test_corpus_tampered(tmp_path):
    save_corpus(tmp_path / "c.jsonl", TokenCorpus([[1]], [None], "abc", 4))
    (tmp_path / "c.jsonl").write_text('{"tokens":[2],"class":null}\n')
    with pytest.raises(CorruptionError):
        load_corpus(tmp_path / "c.jsonl")
