# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Training the encoder and comparing codebooks
#
# A small end-to-end run: build a dataset of (observation, label) pairs,
# train the convolutional encoder, and score it against the DFT sweep and the
# per-UE SVD upper bound.  The sizes here are cut down so the notebook
# finishes in a couple of minutes; the acceptance suite uses 2000 training
# episodes.

# %%
import numpy as np

from ssbcodebook.array_geometry import dft_codebook
from ssbcodebook.channel import ScenarioConfig, generate_episodes
from ssbcodebook.evaluation import (EncoderPolicy, beam_histogram, entropy_bits, gap_recovery,
                                    moving_average, policy_mean_db, run_scenario, similarity_report)
from ssbcodebook.observation import ObservationConfig
from ssbcodebook.seeding import substream
from ssbcodebook.ssb_encoder import EncoderConfig, build_dataset, build_model, train

np.set_printoptions(precision=3, suppress=True)
cfg = ScenarioConfig()
dft = dft_codebook(cfg.geometry, sector=cfg.sector, l_max=8)
oc = ObservationConfig(cfg.geometry, cfg.sector)
enc = EncoderConfig(max_epochs=40)

# %% [markdown]
# ## Dataset
#
# Every active timestep gives one sample.  The label puts each UE's dominant
# singular vector into the slot of the DFT beam it overlaps most, strongest UE
# first, and leaves unclaimed slots at their DFT codeword.  Whole episodes go
# to either the training or the validation split.

# %%
train_eps = generate_episodes(cfg, 200, seed=1)
ds = build_dataset(train_eps, dft, oc, enc, noise_var=cfg.noise_var, seed=1)
print("samples", len(ds), " train", len(ds.train[0]), " val", len(ds.val[0]))
print("distinct observations", len(np.unique(ds.x.reshape(len(ds), -1), axis=0)))

# %% [markdown]
# Many samples share an observation because only the set of reported beams
# reaches the encoder.  Under a squared-error loss the best the encoder can do
# for a given observation is the average of all labels that share it.

# %%
model = build_model(enc, substream(0, "init"))
res = train(model, ds, enc, seed=0)
print(f"best epoch {res.best_epoch}, val MSE {res.initial_val_mse:.4f} -> {res.best_val_mse:.4f}")

# %% [markdown]
# ## Evaluation on held-out episodes
#
# Decisions use noisy RSRP measurements while the score is the clean RSRP of
# the chosen beam, averaged linearly over UEs and then over timesteps in dB.

# %%
test_eps = generate_episodes(cfg, 40, seed=2, first_index=100_000)
rows = {p: run_scenario(test_eps, p, dft, oc, res.model, cfg.noise_var) for p in ("dft", "encoder", "svd")}
means = {p: policy_mean_db(r) for p, r in rows.items()}
for p, m in means.items():
    print(f"{p:8s} {m:7.2f} dB")
print("gap recovery", round(gap_recovery(means["dft"], means["encoder"], means["svd"]), 3))

# %% [markdown]
# A 20-step moving average of the per-step metric shows the time behaviour of
# the first test episode.

# %%
for p in ("dft", "encoder"):
    series = [r.mean_rsrp_db for r in rows[p] if r.episode == test_eps[0].index]
    print(p, np.round(moving_average(series, 20)[-5:], 2))

# %% [markdown]
# ## Beam usage and codebook structure
#
# Entropy of the reported beam index measures how evenly the burst is used.
# The similarity matrix of the cold-start codebook shows whether the encoder
# kept the beams apart.

# %%
for p in ("dft", "encoder"):
    idx = [b for r in rows[p] for b in r.beam_indices]
    h = beam_histogram(idx, 8)
    print(f"{p:8s} usage {h}  entropy {entropy_bits(h):.3f} bits")
sim, worst = similarity_report(EncoderPolicy(res.model, dft, oc).initial_codebook())
print(sim)
print("largest off-diagonal similarity", round(worst, 3))
