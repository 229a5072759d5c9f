"""Learned SSB beam codebooks for massive-MIMO initial access.

A numpy toolkit covering array steering and DFT codebooks, a spatially
consistent geometric channel model, SSB sweep feedback, the beamspace
observation, a from-scratch convolutional encoder, and policy evaluation.
"""
from .array_geometry import (ArrayGeometry, Codebook, Sector, angular_grid, array_gain_grid,
                             cosine_similarity, dft_codebook, similarity_matrix, ula_steering,
                             upa_steering)
from .channel import Episode, ScenarioConfig, generate_episode, generate_episodes
from .initial_access import (FeedbackReport, NoiseModel, csit_svd_rsrp, rsrp, rsrp_table,
                             svd_beams, sweep_feedback)
from .observation import ObservationConfig, build_observation, initial_observation
from .ssb_encoder import (EncoderConfig, build_dataset, build_model, forward_codebook, make_label,
                          train)
from .evaluation import gap_recovery, run_scenario

__version__ = "0.1.0"
