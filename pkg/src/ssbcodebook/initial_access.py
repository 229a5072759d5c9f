"""SSB sweep simulation: RSRP measurement, best-beam feedback and SVD beams.

The RSRP of UE ``u`` on SSB ``i`` is ``gamma_u / n_t * ||H f_i + n||^2``.  With
zero noise this equals the received power after ideal maximum ratio
combining, so the combiner never appears explicitly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .array_geometry import Codebook


@dataclass
class NoiseModel:
    """Circularly symmetric complex Gaussian noise, ``variance`` per receive antenna."""

    variance: float = 0.0
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("noise variance must be non-negative")
        if self.variance > 0 and self.rng is None:
            raise ValueError("a noisy model needs an explicit rng")

    def draw(self, shape) -> np.ndarray:
        if self.variance == 0:
            return np.zeros(shape, dtype=np.complex128)
        z = self.rng.standard_normal((*shape, 2))
        return np.sqrt(self.variance / 2) * (z[..., 0] + 1j * z[..., 1])


NOISELESS = NoiseModel()


@dataclass(frozen=True)
class FeedbackReport:
    """Per-UE best RSRP (linear) and the index of the SSB that achieved it."""

    rsrp: np.ndarray
    beam_index: np.ndarray

    def __post_init__(self):
        if self.rsrp.shape != self.beam_index.shape:
            raise ValueError("rsrp and beam_index must align")
        if np.any(self.rsrp < 0):
            raise ValueError("rsrp must be non-negative")

    @property
    def rsrp_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 10.0 * np.log10(self.rsrp)

    def __len__(self):
        return self.rsrp.size


def rsrp(h2: np.ndarray, f: np.ndarray, gamma: float, noise: NoiseModel = NOISELESS) -> float:
    """Received power of one SSB at one UE."""
    h2 = np.asarray(h2)
    f = np.asarray(f)
    if h2.ndim != 2 or f.shape != (h2.shape[1],):
        raise ValueError(f"channel {h2.shape} and beam {f.shape} dimensions disagree")
    y = h2 @ f + noise.draw((h2.shape[0],))
    return float(gamma / h2.shape[1] * np.sum(np.abs(y) ** 2))


def rsrp_table(channels: np.ndarray, codebook: Codebook, gammas,
               noise: NoiseModel = NOISELESS) -> np.ndarray:
    """RSRP of every (UE, SSB) pair, shape ``(U, L)``.

    ``channels`` is a ``(U, n_r, n_t)`` stack.  Noise is drawn independently
    for every measurement, in UE-major order.
    """
    h = np.asarray(channels)
    if h.ndim == 2:
        h = h[None]
    f = codebook.vectors if isinstance(codebook, Codebook) else np.atleast_2d(codebook)
    if h.shape[-1] != f.shape[1]:
        raise ValueError(f"channel n_t={h.shape[-1]} does not match codebook n_t={f.shape[1]}")
    y = np.einsum("urt,lt->ulr", h, f)
    y = y + noise.draw(y.shape)
    gammas = np.broadcast_to(np.asarray(gammas, dtype=np.float64), (h.shape[0],))
    return gammas[:, None] / h.shape[-1] * np.sum(np.abs(y) ** 2, axis=-1)


def sweep_feedback(channels, codebook: Codebook, gammas, noise: NoiseModel = NOISELESS) -> FeedbackReport:
    """Sweep every SSB and report each UE's strongest beam (ties -> lowest index)."""
    if len(codebook) == 0:
        raise ValueError("cannot sweep an empty codebook")
    h = np.asarray(channels)
    if h.shape[0] == 0:
        return FeedbackReport(np.zeros(0), np.zeros(0, dtype=int))
    table = rsrp_table(h, codebook, gammas, noise)
    best = np.argmax(table, axis=1)
    return FeedbackReport(table[np.arange(table.shape[0]), best], best)


def canonicalize_phase(v: np.ndarray, mode: str = "first", reference=None) -> np.ndarray:
    """Remove the free global phase of a beamforming vector.

    ``mode="first"`` rotates element 0 onto the positive real axis, falling
    back to the largest entry when element 0 is negligible; ``mode="max"``
    always uses the largest-magnitude entry.  ``mode="slot"`` makes the inner
    product ``reference^H v`` real and positive, which for steering-like
    vectors pins the phase at the array centre rather than at a corner.
    """
    v = np.asarray(v, dtype=np.complex128)
    if mode == "slot":
        if reference is None:
            raise ValueError("mode 'slot' needs a reference vector")
        inner = np.vdot(reference, v)
        if abs(inner) > 1e-12 * max(np.linalg.norm(v), 1e-300):
            return v * (np.conj(inner) / abs(inner))
        mode = "first"
    mags = np.abs(v)
    ref = int(np.argmax(mags))
    if mode == "first":
        if mags[0] > 1e-6 * mags[ref]:
            ref = 0
    elif mode != "max":
        raise ValueError(f"unknown canonicalization mode {mode!r}")
    if mags[ref] == 0:
        return v
    return v * (np.conj(v[ref]) / mags[ref])


@dataclass(frozen=True)
class SvdBeams:
    """Pooled leading right singular vectors, strongest first.

    ``ue_index`` is -1 for padding rows taken from the fallback codebook.
    """

    vectors: np.ndarray
    singular_values: np.ndarray
    ue_index: np.ndarray

    @property
    def n_svd(self) -> int:
        return int(np.sum(self.ue_index >= 0))


def leading_singular(h2: np.ndarray, n_vectors: int = 1, phase: str = "first"):
    """Top ``n_vectors`` right singular vectors (rows) and singular values of ``h2``."""
    _, s, vh = np.linalg.svd(np.asarray(h2, dtype=np.complex128), full_matrices=False)
    k = min(n_vectors, s.size)
    vecs = np.array([canonicalize_phase(vh[i].conj(), phase) for i in range(k)])
    return vecs, s[:k]


def svd_beams(channels, l_max: int, pad_codebook: Codebook | None = None,
              vectors_per_ue: int = 1, phase: str = "first") -> SvdBeams:
    """The ``l_max`` strongest per-UE SVD beams, padded from ``pad_codebook``.

    UEs with an all-zero channel are skipped.  Ties in singular value keep UE
    order.  Without a pad codebook fewer than ``l_max`` rows may come back.
    """
    vecs, sigmas, owners = [], [], []
    for u, h2 in enumerate(np.asarray(channels)):
        if not np.any(h2):
            continue
        v, s = leading_singular(h2, vectors_per_ue, phase)
        vecs.extend(v)
        sigmas.extend(s)
        owners.extend([u] * len(s))
    if not vecs and pad_codebook is None:
        raise ValueError("no UE with a nonzero channel and no padding codebook")
    order = np.argsort(-np.asarray(sigmas), kind="stable")[:l_max]
    n_t = pad_codebook.n_t if pad_codebook is not None else len(vecs[0])
    vectors = np.array([vecs[i] for i in order], dtype=np.complex128).reshape(-1, n_t)
    singular = np.asarray(sigmas, dtype=np.float64)[order]
    owner = np.asarray(owners, dtype=int)[order]
    if pad_codebook is not None and len(order) < l_max:
        n_pad = l_max - len(order)
        pad = np.array([canonicalize_phase(v, phase) for v in pad_codebook.vectors[:n_pad]])
        vectors = np.vstack([vectors, pad])
        singular = np.concatenate([singular, np.zeros(n_pad)])
        owner = np.concatenate([owner, -np.ones(n_pad, dtype=int)])
    return SvdBeams(vectors, singular, owner)


def csit_svd_rsrp(channels, gammas) -> np.ndarray:
    """Per-UE noiseless RSRP with that UE's own leading right singular vector.

    This is ``gamma / n_t * sigma_1^2``, the largest value any unit-norm beam
    can reach.  All-zero channels give 0.
    """
    h = np.asarray(channels, dtype=np.complex128)
    if h.ndim == 2:
        h = h[None]
    gammas = np.broadcast_to(np.asarray(gammas, dtype=np.float64), (h.shape[0],))
    out = np.zeros(h.shape[0])
    for u, h2 in enumerate(h):
        if np.any(h2):
            v, _ = leading_singular(h2)
            out[u] = rsrp(h2, v[0], gammas[u])
    return out
