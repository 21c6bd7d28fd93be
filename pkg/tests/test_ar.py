import math

import numpy as np
import pytest

from far_ts.ar import (FORECAST_SAMPLING, GENERATION_SAMPLING, ArConfig, ArPrior, SamplingParams,
                       nll_loss, sample_next)
from far_ts.errors import ConfigError, LengthError, SamplingError, VocabError
from far_ts.numerics import grad_check, make_rng


def tiny(seed=0, dtype=np.float64, **kw):
    cfg = dict(codebook_size=8, d_model=16, n_layers=2, n_heads=2, dropout=0.0, max_context=24)
    cfg.update(kw)
    return ArPrior(ArConfig(**cfg), seed=seed, dtype=dtype)


def jitter(model, scale=0.3, seed=0):
    """Move parameters off their init so norms and gains are non-trivial."""
    rng = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = t.data + rng.normal(0, scale, size=t.shape).astype(t.data.dtype)
    return model


# -- config -------------------------------------------------------------------------------

def test_config_vocab_layout():
    cfg = ArConfig(codebook_size=10, d_model=16, n_heads=2, num_classes=3)
    assert cfg.vocab_size == 14
    assert cfg.bos_token == 13
    assert cfg.ffn_hidden % cfg.ffn_multiple_of == 0


@pytest.mark.parametrize("kw", [dict(d_model=15, n_heads=2), dict(d_model=6, n_heads=2),
                                dict(dropout=1.0), dict(num_classes=-1)])
def test_config_rejects(kw):
    base = dict(codebook_size=4, d_model=16, n_heads=2)
    base.update(kw)
    with pytest.raises(ConfigError):
        ArConfig(**base)


def test_sampling_presets():
    assert (GENERATION_SAMPLING.temperature, GENERATION_SAMPLING.top_k, GENERATION_SAMPLING.top_p) == (1.0, 1000, 1.0)
    assert (FORECAST_SAMPLING.temperature, FORECAST_SAMPLING.top_k) == (0.5, 50)


# -- nll -------------------------------------------------------------------------------------

def test_nll_uniform():
    assert nll_loss(np.zeros((3, 4)), np.array([0, 1, 3])).item() == pytest.approx(math.log(4), abs=1e-7)


def test_nll_dominant_target():
    logits = np.zeros((1, 5))
    logits[0, 2] = 100.0
    assert nll_loss(logits, np.array([2])).item() < 1e-12


def test_nll_matches_logsumexp_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 5))
    targets = np.array([4, 0, 2])
    ref = 0.0
    for row, t in zip(logits, targets):
        ref += math.log(sum(math.exp(v) for v in row)) - row[t]
    assert nll_loss(logits, targets).item() == pytest.approx(ref / 3, abs=1e-6)


def test_nll_out_of_range():
    with pytest.raises(VocabError):
        nll_loss(np.zeros((1, 4)), np.array([4]))


# -- forward ----------------------------------------------------------------------------------

def test_causal_isolation():
    m = jitter(tiny())
    rng = np.random.default_rng(1)
    toks = rng.integers(0, 8, size=12)
    base = m.forward_logits(toks)
    for j in range(12):
        t2 = toks.copy()
        t2[j] = (t2[j] + 1 + rng.integers(0, 7)) % 8
        out = m.forward_logits(t2)
        np.testing.assert_array_equal(out[:j], base[:j])


def test_zero_head_gives_uniform():
    m = tiny()
    m.params["head"].data[...] = 0
    logits = m.forward_logits(np.array([1, 2, 3]))
    np.testing.assert_array_equal(logits, 0)


def _rms(x, g, eps):
    return x / np.sqrt((x * x).mean() + eps) * g


def test_single_position_matches_hand_reference():
    m = jitter(tiny(n_layers=1), seed=2)
    P = {k: t.data for k, t in m.params.items()}
    eps = m.cfg.norm_eps
    x = P["tok_emb"][m.cfg.bos_token].copy()
    h = _rms(x, P["layers.0.attn_norm"], eps)
    v = h @ P["layers.0.wv"]               # one position: attention weight 1, rotation angle 0
    x = x + v @ P["layers.0.wo"]
    h = _rms(x, P["layers.0.ffn_norm"], eps)
    a = h @ P["layers.0.w1"]
    f = (a / (1 + np.exp(-a))) * (h @ P["layers.0.w3"])
    x = x + f @ P["layers.0.w2"]
    ref = _rms(x, P["norm"], eps) @ P["head"]
    got = m.forward(np.array([[m.cfg.bos_token]])).data[0, 0]
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_forward_errors():
    m = tiny()
    with pytest.raises(LengthError):
        m.forward_logits(np.zeros(24, dtype=int))
    with pytest.raises(VocabError):
        m.forward_logits(np.array([0, 99]))


# -- KV cache -----------------------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 5, 16])
def test_incremental_matches_full_forward(n):
    m = jitter(tiny(dtype=np.float32), seed=n)
    toks = np.random.default_rng(n).integers(0, 8, size=n)
    full = m.forward_logits(toks)
    cache, logits = m.prefill()
    assert cache.current_len == 1
    steps = []
    for t in toks:
        steps.append(m.step_decode(cache, t))
    assert cache.current_len == n + 1
    np.testing.assert_allclose(np.stack(steps), full, atol=1e-5)
    np.testing.assert_allclose(logits[0], m.forward(np.array([[m.cfg.bos_token]])).data[0, 0], atol=1e-5)


def test_cache_entries_are_write_once():
    m = jitter(tiny())
    cache, _ = m.prefill()
    m.step_decode(cache, 3)
    snap = [k[:, :, :2].copy() for k in cache.keys]
    m.step_decode(cache, 4)
    for a, k in zip(snap, cache.keys):
        np.testing.assert_array_equal(a, k[:, :, :2])


def test_cache_overflow():
    m = tiny(max_context=3)
    cache, _ = m.prefill()
    m.step_decode(cache, 0)
    m.step_decode(cache, 0)
    with pytest.raises(LengthError):
        m.step_decode(cache, 0)


# -- prefill ----------------------------------------------------------------------------------

def test_prefill_rules():
    m = tiny()
    with pytest.raises(ConfigError):
        m.prefill(class_label=0)
    c = tiny(num_classes=2)
    with pytest.raises(ConfigError):
        c.prefill()
    with pytest.raises(ConfigError):
        c.prefill(class_label=2)
    _, l0 = c.prefill(class_label=0)
    _, l1 = c.prefill(class_label=1)
    assert not np.allclose(l0, l1)


def test_prefill_then_step_matches_forward():
    c = jitter(tiny(num_classes=2, dtype=np.float32), seed=4)
    cache, _ = c.prefill(class_label=1)
    step = c.step_decode(cache, 6)
    full = c.forward_logits(np.array([6]), prefix_token=c.prefix_token(1))
    np.testing.assert_allclose(step, full[-1], atol=1e-5)


# -- sampling -----------------------------------------------------------------------------------

def test_top_k_one_is_argmax():
    logits = np.array([0.1, 2.0, -1.0, 1.9])
    for seed in range(20):
        assert sample_next(logits, SamplingParams(top_k=1), make_rng(seed)) == 1


def test_nucleus_keeps_first():
    logits = np.log([0.6, 0.3, 0.1])
    rng = make_rng(0)
    sp = SamplingParams(top_p=0.5)
    assert all(sample_next(logits, sp, rng) == 0 for _ in range(500))


def test_nucleus_boundary_includes_second():
    logits = np.log([0.6, 0.3, 0.1])
    draws = sample_next(np.tile(logits, (4000, 1)), SamplingParams(top_p=0.8), make_rng(1))
    assert set(draws.tolist()) == {0, 1}


def test_unconstrained_frequencies_match_softmax():
    logits = np.array([1.0, 0.2, -0.5, 0.0, 2.0])
    p = np.exp(logits - logits.max())
    p /= p.sum()
    n = 100_000
    draws = sample_next(np.tile(logits, (n, 1)), SamplingParams(top_k=5), make_rng(7))
    freq = np.bincount(draws, minlength=5) / n
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) < 3 * se)


def test_sampler_masks_special_tokens():
    logits = np.zeros((2000, 8 + 2 + 1))
    logits[:, 8:] = 50.0
    draws = sample_next(logits, SamplingParams(), make_rng(2), codebook_size=8)
    assert draws.max() < 8


def test_sampler_errors():
    with pytest.raises(SamplingError):
        sample_next(np.full(4, -np.inf), SamplingParams(), make_rng(0))
    with pytest.raises(SamplingError):
        sample_next(np.array([0.0, np.nan]), SamplingParams(), make_rng(0))
    with pytest.raises(ConfigError):
        SamplingParams(temperature=0)
    with pytest.raises(ConfigError):
        SamplingParams(top_p=0)


def test_sample_any_length_with_sliding_context():
    m = jitter(tiny(dtype=np.float32, max_context=10), scale=0.5)
    out = m.sample(30, SamplingParams(), make_rng(3), batch=2)
    assert out.shape == (2, 30) and out.min() >= 0 and out.max() < 8
    again = m.sample(30, SamplingParams(), make_rng(3), batch=2)
    np.testing.assert_array_equal(out, again)


def test_sample_greedy_matches_stepwise_argmax():
    m = jitter(tiny(dtype=np.float32), scale=0.5, seed=5)
    out = m.sample(6, SamplingParams(top_k=1), make_rng(0))[0]
    seq = []
    for _ in range(6):
        logits = m.forward_logits(np.array(seq, dtype=int))[-1] if seq else m.prefill()[1][0]
        seq.append(int(np.argmax(logits[:8])))
    assert out.tolist() == seq


# -- gradients ------------------------------------------------------------------------------------

def test_stage2_gradients_match_finite_differences():
    m = jitter(tiny(d_model=8, n_heads=2, n_layers=1, codebook_size=5), scale=0.2, seed=6)
    toks = np.random.default_rng(8).integers(0, 5, size=(1, 6))
    prefix = np.array([m.cfg.bos_token])
    err = grad_check(lambda: m.loss(toks, prefix), m.parameters(), fd_step=1e-6)
    assert err < 1e-3


def test_loss_rejects_non_codebook_targets():
    m = tiny()
    with pytest.raises(VocabError):
        m.loss(np.array([[8, 1]]), np.array([m.cfg.bos_token]))
