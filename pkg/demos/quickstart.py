"""Train both stages on a small synthetic set, then sample, forecast and score.

    python demos/quickstart.py

Takes about two minutes on one core.
"""
import numpy as np

from far_ts.ar import ArConfig, SamplingParams
from far_ts.data import MinMaxNormalizer, synth_lowrank
from far_ts.metrics import correlational_score, discriminative_score
from far_ts.numerics import make_rng
from far_ts.pipeline import (StageConfig, TrainingConfig, forecast, generate, tokenize_corpus, train_stage1,
                             train_stage2)
from far_ts.vq import VqConfig

ds = synth_lowrank(seed=0, D=6, T=32, R=2, n_windows=1200, n_prototypes=12, noise_std=0.02)
norm = MinMaxNormalizer().fit(ds.windows[:1000])
X = norm.normalize(ds.windows)
train, held = X[:1000], X[1000:]

cfg = TrainingConfig(stage1=StageConfig(1e-3, 25, 64, (0.9, 0.999)),
                     stage2=StageConfig(1e-3, 100, 64, (0.9, 0.95)), stage2_max_steps=300)
vq, r1 = train_stage1(train, VqConfig(num_channels=6, rank=2, codebook_size=16, encoder_hidden_dims=(64, 128, 64),
                                      decoder_channels=32), cfg)
print(f"stage I  reconstruction rmse {r1.final_rmse:.4f}")

corpus = tokenize_corpus(vq, train)
ar, r2 = train_stage2(corpus, ArConfig(16, d_model=32, n_layers=2, n_heads=4, max_context=128), cfg)
print(f"stage II final per-token nll {r2.loss_curve[-1]:.3f}")

samples = generate(vq, ar, 32, SamplingParams(seed=1), num_samples=len(held))
print(f"discriminative {discriminative_score(held, samples, make_rng(0)):.3f}  "
      f"correlational {correlational_score(held, samples):.4f}")

longer = generate(vq, ar, 64, SamplingParams(seed=2), num_samples=2)
print("twice the training length:", longer.shape)

pred = forecast(vq, ar, held[:, :16], 16, SamplingParams(temperature=0.5, top_k=50))
rmse = np.sqrt(np.mean((pred - held[:, 16:]) ** 2))
base = np.sqrt(np.mean((train.mean(axis=(0, 1)) - held[:, 16:]) ** 2))
print(f"forecast rmse {rmse:.4f} vs channel-mean baseline {base:.4f}")
