# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Beams, channels and what the base station gets to see
#
# This notebook walks through the inputs of the learned SSB codebook.  It
# starts with the 8x8 planar array and its grid-of-beams codebook, then draws
# one street-level episode and looks at the feedback a beam sweep produces.
# Last, it shows how that feedback becomes the angular "observation" tensor
# the encoder reads.

# %%
import numpy as np

from ssbcodebook.array_geometry import angular_grid, array_gain_grid, dft_codebook
from ssbcodebook.channel import ScenarioConfig, generate_episode
from ssbcodebook.evaluation import similarity_report
from ssbcodebook.initial_access import csit_svd_rsrp, rsrp_table, sweep_feedback
from ssbcodebook.observation import ObservationConfig, build_observation, initial_observation

np.set_printoptions(precision=3, suppress=True)
cfg = ScenarioConfig()
geom, sector = cfg.geometry, cfg.sector
dft = dft_codebook(geom, sector=sector, l_max=8)
dft

# %% [markdown]
# ## The grid-of-beams codebook
#
# Four azimuth directions times two elevation tilts make eight beams.  Even
# indices are the down-tilted primary beams and each odd index shares its
# azimuth with the even beam before it.  Every codeword peaks at the full
# array gain of 10 log10(64) dB on its own pointing direction.

# %%
grid = angular_grid(geom, sector, refine=8)
for k, f in enumerate(dft):
    gain = array_gain_grid(f, geom, grid)
    i, j = np.unravel_index(np.argmax(gain), gain.shape)
    print(f"beam {k}: peak {gain[i, j]:5.2f} dB at az {np.rad2deg(grid.azimuth[i]):6.1f} deg, "
          f"el {np.rad2deg(grid.elevation[j]):6.1f} deg")

# %% [markdown]
# The two tilts of one azimuth overlap heavily.  Their similarity is the
# largest off-diagonal entry of the codebook's similarity matrix; the other
# pairs are nearly orthogonal.

# %%
sim, worst = similarity_report(dft)
print(sim)
print("largest off-diagonal similarity", round(worst, 3))

# %% [markdown]
# ## One episode
#
# An episode is 20 snapshots of the UEs moving along two roads.  The roster
# changes as UEs enter and leave the cell, so the number of active UEs varies
# from step to step.

# %%
ep = generate_episode(cfg, index=0, seed=0)
print("UE slots", ep.channels.shape[0], " active per step", ep.active.sum(axis=0))

# %% [markdown]
# At each step the base station sweeps the eight beams.  Every UE reports only
# its best beam and that beam's RSRP.  The gap to the per-UE SVD beam is the
# headroom a better codebook could recover.

# %%
h, g = ep.snapshot(0)
table = rsrp_table(h, dft, g)
fb = sweep_feedback(h, dft, g)
print("reported beams", fb.beam_index)
print("best DFT RSRP (dB)", np.round(10 * np.log10(table.max(axis=1)), 1))
print("SVD RSRP      (dB)", np.round(10 * np.log10(csit_svd_rsrp(h, g)), 1))

# %% [markdown]
# ## The observation tensor
#
# Each reported beam contributes a smoothed angular footprint, placed in the
# channel of the beam index and scaled so every non-empty channel has unit
# norm.  Because of that normalisation the RSRP values cancel out and only the
# set of reported beams survives.  The cold-start observation reports every
# beam once.

# %%
oc = ObservationConfig(geom, sector)
obs = build_observation(fb, dft, oc)
print("channel norms", np.linalg.norm(obs.reshape(8, -1), axis=1))
scaled = build_observation(type(fb)(fb.rsrp * 1e3, fb.beam_index), dft, oc)
print("unchanged under RSRP rescaling:", np.array_equal(obs, scaled))
print("cold start channel norms", np.linalg.norm(initial_observation(dft, oc).reshape(8, -1), axis=1))
