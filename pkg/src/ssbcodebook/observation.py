"""Beamspace observation tensor built from limited SSB feedback.

For every reported beam the grid points within ``a_max`` dB of that beam's
peak are set to one, blurred with a 4x4 Gaussian, weighted by the reported
RSRP, summed over the UEs that chose the beam, and scaled to unit Frobenius
norm.  Beams nobody reported stay all-zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .array_geometry import (AngularGrid, ArrayGeometry, Codebook, Sector, angular_grid,
                             array_gain_grid, steering_grid)
from .initial_access import FeedbackReport


def gaussian_kernel4(sigma: float = 1.0) -> np.ndarray:
    """4x4 Gaussian centred between the middle taps, normalised to sum 1."""
    if not sigma > 0:
        raise ValueError(f"kernel sigma must be positive, got {sigma}")
    x = np.arange(4) - 1.5
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def smooth4(grid: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """'Same'-size correlation with a 4x4 kernel anchored at tap (1, 1), zero padded."""
    nx, ny = grid.shape
    padded = np.zeros((nx + 3, ny + 3))
    padded[1:nx + 1, 1:ny + 1] = grid
    out = np.zeros((nx, ny))
    for a in range(4):
        for b in range(4):
            out += kernel[a, b] * padded[a:a + nx, b:b + ny]
    return out


@dataclass(frozen=True)
class ObservationConfig:
    geometry: ArrayGeometry = ArrayGeometry(8, 8)
    sector: Sector = Sector()
    a_max: float = 6.0
    kernel_sigma: float = 1.0

    def __post_init__(self):
        if not self.a_max > 0:
            raise ValueError("a_max must be positive")
        if not self.kernel_sigma > 0:
            raise ValueError("kernel_sigma must be positive")

    @cached_property
    def grid(self) -> AngularGrid:
        return angular_grid(self.geometry, self.sector)

    @cached_property
    def kernel(self) -> np.ndarray:
        return gaussian_kernel4(self.kernel_sigma)

    @cached_property
    def _steering(self) -> np.ndarray:
        return steering_grid(self.geometry, self.grid)


def beam_support_mask(codeword, geom: ArrayGeometry, grid: AngularGrid, a_max: float) -> np.ndarray:
    """Binary map of grid points within ``a_max`` dB of the beam's peak gain."""
    gain = array_gain_grid(codeword, geom, grid)
    return (gain >= gain.max() - a_max).astype(np.float64)


def _support_masks(vectors: np.ndarray, config: ObservationConfig) -> np.ndarray:
    power = np.abs(np.einsum("xyt,lt->lxy", config._steering.conj(), vectors)) ** 2
    with np.errstate(divide="ignore"):
        gain = np.maximum(10.0 * np.log10(power), -200.0)
    peak = gain.reshape(len(vectors), -1).max(axis=1)
    return (gain >= peak[:, None, None] - config.a_max).astype(np.float64)


def beam_grids(feedback: FeedbackReport, codebook: Codebook, config: ObservationConfig,
               normalize: bool = True) -> np.ndarray:
    """Per-beam beamspace grids, shape ``(l_max, n_x, n_y)``.

    With ``normalize=False`` the RSRP-weighted sums are returned as they are.
    Every UE that reports beam ``i`` contributes the same smoothed support
    ``S_i``, so the weighted sum is ``(sum of RSRPs) * S_i`` and unit-norm
    scaling cancels the weight exactly; the normalised path applies that
    cancellation directly so the result is independent of RSRP scale bit for
    bit.
    """
    idx = np.asarray(feedback.beam_index, dtype=int)
    if np.any((idx < 0) | (idx >= len(codebook))):
        raise ValueError(f"reported beam index outside [0, {len(codebook)})")
    nx, ny = config.grid.shape
    obs = np.zeros((codebook.l_max, nx, ny))
    reported = np.unique(idx)
    if reported.size == 0:
        return obs
    masks = _support_masks(codebook.vectors[reported], config)
    weights = np.asarray(feedback.rsrp, dtype=np.float64)
    for beam, mask in zip(reported, masks):
        smoothed = smooth4(mask, config.kernel)
        total = weights[idx == beam].sum()
        if not normalize:
            obs[beam] = total * smoothed
        elif total > 0:
            obs[beam] = smoothed / np.linalg.norm(smoothed)
    return obs


def build_observation(feedback: FeedbackReport, codebook: Codebook,
                      config: ObservationConfig) -> np.ndarray:
    """Observation tensor ``O`` of shape ``(l_max, n_x, n_y)`` for one feedback round."""
    return beam_grids(feedback, codebook, config, normalize=True)


def initial_observation(codebook: Codebook, config: ObservationConfig) -> np.ndarray:
    """Cold-start observation: every beam reported once with equal RSRP."""
    n = len(codebook)
    report = FeedbackReport(np.ones(n), np.arange(n))
    return build_observation(report, codebook, config)
