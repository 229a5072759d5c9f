"""Policy comparison: DFT sweep, SSB-Encoder codebooks and per-UE CSIT-SVD.

Every policy is replayed over the same episodes.  Beam decisions may use noisy
RSRP measurements, but the RSRP that gets reported is always the noiseless
value of the chosen beam, so policies are compared on beamforming gain alone.
Each row's ``mean_rsrp_db`` is the linear mean of the active UEs' RSRP in dB;
a policy's overall figure is the mean of its rows.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .array_geometry import Codebook, similarity_matrix
from .channel import Episode
from .initial_access import FeedbackReport, NoiseModel, csit_svd_rsrp, rsrp_table
from .neural_core import Network
from .observation import ObservationConfig, build_observation, initial_observation
from .seeding import substream
from .ssb_encoder import forward_codebook

POLICIES = ("dft", "encoder", "svd")
DB_FLOOR = -300.0
BOUND_RTOL = 1e-9


def to_db(p):
    with np.errstate(divide="ignore"):
        return np.maximum(10.0 * np.log10(p), DB_FLOOR)


@dataclass(frozen=True)
class MetricsRow:
    episode: int
    t: int
    policy: str
    mean_rsrp_db: float
    n_active: int
    beam_indices: tuple = ()
    bound_violations: int = 0


@dataclass
class EncoderPolicy:
    """Deployment loop of a trained model.

    Starts from the cold-start observation and, in ``"iterative"`` mode, feeds
    each interval's feedback back in to get the next interval's codebook.  In
    ``"static"`` mode the cold-start codebook is kept for the whole episode.
    """

    model: Network
    dft: Codebook
    obs_config: ObservationConfig
    mode: str = "iterative"
    _initial: Codebook | None = field(default=None, repr=False)

    def initial_codebook(self) -> Codebook:
        if self._initial is None:
            self._initial = forward_codebook(self.model, initial_observation(self.dft, self.obs_config),
                                             self.dft)
        return self._initial

    def next_codebook(self, feedback: FeedbackReport, swept: Codebook) -> Codebook:
        if self.mode == "static":
            return swept
        obs = build_observation(feedback, swept, self.obs_config)
        return forward_codebook(self.model, obs, self.dft)


def _codebook_rows(ep: Episode, name, first_codebook, update, noise_var, seed):
    rng = substream(seed, "noise", ep.index)
    noise = NoiseModel(noise_var, rng if noise_var > 0 else None)
    codebook = first_codebook
    rows = []
    for t in range(ep.n_steps):
        h, g = ep.snapshot(t)
        if len(g) == 0:
            feedback = FeedbackReport(np.zeros(0), np.zeros(0, dtype=int))
        else:
            clean = rsrp_table(h, codebook, g)
            measured = clean if noise_var == 0 else rsrp_table(h, codebook, g, noise)
            best = np.argmax(measured, axis=1)
            picked = clean[np.arange(len(g)), best]
            bound = csit_svd_rsrp(h, g)
            violations = int(np.sum(clean.max(axis=1) > bound * (1 + BOUND_RTOL)))
            rows.append(MetricsRow(ep.index, t, name, float(to_db(np.mean(picked))), len(g),
                                   tuple(int(b) for b in best), violations))
            feedback = FeedbackReport(measured[np.arange(len(g)), best], best)
        if update is not None:
            codebook = update(feedback, codebook)
    return rows


def run_scenario(episodes, policy: str, dft: Codebook, obs_config: ObservationConfig | None = None,
                 model: Network | None = None, noise_var: float = 0.0, seed: int = 0,
                 inference: str = "iterative", codebook: Codebook | None = None) -> list[MetricsRow]:
    """Metrics rows for ``policy`` over ``episodes``, sorted by (episode, t).

    ``policy`` is ``"dft"`` (sweep ``codebook`` or the DFT codebook),
    ``"encoder"`` (needs ``model``) or ``"svd"``.  Timesteps without active UEs
    produce no row.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    rows = []
    for ep in sorted(episodes, key=lambda e: e.index):
        if policy == "svd":
            for t in range(ep.n_steps):
                h, g = ep.snapshot(t)
                if len(g):
                    p = csit_svd_rsrp(h, g)
                    rows.append(MetricsRow(ep.index, t, "svd", float(to_db(np.mean(p))), len(g)))
        elif policy == "dft":
            rows += _codebook_rows(ep, "dft", codebook or dft, None, noise_var, seed)
        else:
            if model is None:
                raise ValueError("the encoder policy needs a model")
            enc = EncoderPolicy(model, dft, obs_config or ObservationConfig(), inference)
            rows += _codebook_rows(ep, "encoder", enc.initial_codebook(), enc.next_codebook,
                                   noise_var, seed)
    return rows


def policy_mean_db(rows) -> float:
    return float(np.mean([r.mean_rsrp_db for r in rows])) if rows else float("nan")


def moving_average(series, window: int = 20) -> np.ndarray:
    """Causal boxcar mean; the first ``window - 1`` outputs average what exists so far."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        return x
    c = np.concatenate([[0.0], np.cumsum(x)])
    n = np.arange(1, x.size + 1)
    lo = np.maximum(n - window, 0)
    return (c[n] - c[lo]) / (n - lo)


def beam_histogram(indices, n_beams: int) -> np.ndarray:
    """Normalised beam-usage counts."""
    idx = np.asarray(list(indices), dtype=int)
    if np.any((idx < 0) | (idx >= n_beams)):
        raise ValueError(f"beam index outside [0, {n_beams})")
    counts = np.bincount(idx, minlength=n_beams).astype(np.float64)
    return counts / counts.sum() if counts.sum() else counts


def entropy_bits(hist) -> float:
    p = np.asarray(hist, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def similarity_report(codebook: Codebook):
    """``(similarity matrix, largest off-diagonal entry)``."""
    sim = similarity_matrix(codebook)
    off = sim[~np.eye(len(sim), dtype=bool)]
    return sim, float(off.max()) if off.size else 0.0


def even_odd_similarity(codebook: Codebook) -> float:
    """Smallest similarity among the (2k, 2k+1) beam pairs."""
    sim = similarity_matrix(codebook)
    return float(min(sim[k, k + 1] for k in range(0, len(sim) - 1, 2)))


def gap_recovery(dft_mean_db: float, enc_mean_db: float, svd_mean_db: float) -> float | None:
    """Fraction of the DFT-to-SVD gap closed by the encoder; ``None`` if there is no gap."""
    gap = svd_mean_db - dft_mean_db
    if not gap > 0:
        return None
    return (enc_mean_db - dft_mean_db) / gap


def write_report_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "t", "policy", "mean_rsrp_db", "n_active", "beam_indices"])
        for r in rows:
            w.writerow([r.episode, r.t, r.policy, f"{r.mean_rsrp_db:.6f}", r.n_active,
                        json.dumps(list(r.beam_indices))])


def write_histogram_csv(path, histograms: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["beam", "fraction", "policy"])
        for policy, hist in histograms.items():
            for i, v in enumerate(hist):
                w.writerow([i, f"{v:.6f}", policy])


def write_similarity_csv(path, matrices: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value", "policy"])
        for policy, sim in matrices.items():
            for i in range(sim.shape[0]):
                for j in range(sim.shape[1]):
                    w.writerow([i, j, f"{sim[i, j]:.6f}", policy])
