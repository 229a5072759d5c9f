"""Steering vectors, DFT codebooks and beam metrics for planar arrays.

Angles follow the direction-cosine convention: the phase progression along an
axis is ``pi * k * cos(angle)`` for half-wavelength spacing, so boresight is
``angle = pi/2``.  Elevation angles above ``pi/2`` point below the horizon.

Planar vectors are flattened x-major: element ``(m, n)`` of an ``n_x`` by
``n_y`` array lives at index ``m * n_y + n``, which is what ``np.kron`` of the
azimuth and elevation factors produces and what ``reshape(n_x, n_y)`` undoes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAIN_FLOOR_DB = -200.0
VALID_BURST_SIZES = (1, 4, 8, 64)


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array with ``n_x`` azimuth and ``n_y`` elevation elements."""

    n_x: int = 8
    n_y: int = 8
    spacing: float = 0.5

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError(f"array dimensions must be >= 1, got {self.n_x}x{self.n_y}")
        if not self.spacing > 0:
            raise ValueError(f"element spacing must be positive, got {self.spacing}")

    @property
    def n_t(self) -> int:
        return self.n_x * self.n_y


@dataclass(frozen=True)
class Sector:
    """Angular coverage region in radians (direction-cosine angles)."""

    az_min: float = np.deg2rad(30.0)
    az_max: float = np.deg2rad(150.0)
    el_min: float = np.deg2rad(90.0)
    el_max: float = np.deg2rad(105.0)

    def __post_init__(self):
        for lo, hi, name in ((self.az_min, self.az_max, "azimuth"),
                             (self.el_min, self.el_max, "elevation")):
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ValueError(f"{name} bounds must be finite")
            if not 0.0 <= lo < hi <= np.pi:
                raise ValueError(f"empty or invalid {name} sector [{lo}, {hi}]")

    @classmethod
    def from_degrees(cls, az_min, az_max, el_min, el_max) -> "Sector":
        return cls(*np.deg2rad([az_min, az_max, el_min, el_max]))


FULL_SECTOR = Sector(0.0, np.pi, 0.0, np.pi)


@dataclass(frozen=True)
class AngularGrid:
    """Virtual beamspace grid: ``azimuth`` and ``elevation`` points in radians."""

    azimuth: np.ndarray
    elevation: np.ndarray
    sector: Sector

    def __post_init__(self):
        for pts in (self.azimuth, self.elevation):
            if pts.ndim != 1 or pts.size < 1:
                raise ValueError("grid axes must be non-empty 1-D arrays")
            if np.any(np.diff(pts) <= 0):
                raise ValueError("grid points must be strictly increasing")

    @property
    def shape(self) -> tuple[int, int]:
        return self.azimuth.size, self.elevation.size


def _cosine_bin_centers(lo: float, hi: float, count: int) -> np.ndarray:
    """Angles at the centres of ``count`` equal bins in cosine space, increasing."""
    u_hi, u_lo = np.cos(lo), np.cos(hi)
    edges = np.linspace(u_hi, u_lo, count + 1)
    return np.arccos(0.5 * (edges[:-1] + edges[1:]))


def angular_grid(geom: ArrayGeometry, sector: Sector = Sector(), refine: int = 1) -> AngularGrid:
    """Grid of ``refine*n_x`` by ``refine*n_y`` cosine-space bin centres over ``sector``."""
    if refine < 1:
        raise ValueError("refine must be >= 1")
    return AngularGrid(
        azimuth=_cosine_bin_centers(sector.az_min, sector.az_max, refine * geom.n_x),
        elevation=_cosine_bin_centers(sector.el_min, sector.el_max, refine * geom.n_y),
        sector=sector,
    )


def ula_steering(n: int, angle: float, spacing: float = 0.5) -> np.ndarray:
    """Vandermonde response ``exp(j 2 pi spacing k cos(angle))`` for ``k = 0..n-1``."""
    if n < 1:
        raise ValueError("element count must be >= 1")
    if not np.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle}")
    return np.exp(2j * np.pi * spacing * np.arange(n) * np.cos(angle))


def upa_steering(geom: ArrayGeometry, azimuth: float, elevation: float) -> np.ndarray:
    """Planar steering vector, the Kronecker product of the two ULA responses."""
    return np.kron(ula_steering(geom.n_x, azimuth, geom.spacing),
                   ula_steering(geom.n_y, elevation, geom.spacing))


def steering_grid(geom: ArrayGeometry, grid: AngularGrid) -> np.ndarray:
    """Steering vectors for every grid point, shape ``(n_az, n_el, n_t)``."""
    k = 2j * np.pi * geom.spacing
    ax = np.exp(k * np.outer(np.cos(grid.azimuth), np.arange(geom.n_x)))
    ay = np.exp(k * np.outer(np.cos(grid.elevation), np.arange(geom.n_y)))
    a = ax[:, None, :, None] * ay[None, :, None, :]
    return a.reshape(grid.azimuth.size, grid.elevation.size, geom.n_t)


class Codebook:
    """Ordered set of unit-norm beamforming vectors for one SSB burst.

    Parameters
    ----------
    vectors : array_like, shape (L, n_t)
        Codewords as rows.  They are normalised on construction.
    l_max : int, optional
        Burst size the codebook is provisioned for; defaults to ``L``.
    """

    def __init__(self, vectors, l_max: int | None = None):
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.complex128))
        n_beams = vectors.shape[0]
        l_max = n_beams if l_max is None else int(l_max)
        if l_max not in VALID_BURST_SIZES:
            raise ValueError(f"l_max must be one of {VALID_BURST_SIZES}, got {l_max}")
        if not 1 <= n_beams <= l_max:
            raise ValueError(f"codebook holds {n_beams} beams, allowed 1..{l_max}")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0) or not np.all(np.isfinite(norms)):
            raise ValueError("codewords must be finite and nonzero")
        self.vectors = vectors / norms[:, None]
        self.vectors.setflags(write=False)
        self.l_max = l_max

    def __len__(self):
        return self.vectors.shape[0]

    def __getitem__(self, i):
        return self.vectors[i]

    def __iter__(self):
        return iter(self.vectors)

    @property
    def n_t(self) -> int:
        return self.vectors.shape[1]

    def __repr__(self):
        return f"Codebook(L={len(self)}, l_max={self.l_max}, n_t={self.n_t})"


def dft_codebook(geom: ArrayGeometry, n_azimuth_beams: int = 4, n_elevation_beams: int = 2,
                 sector: Sector = Sector(), l_max: int | None = None) -> Codebook:
    """Grid-of-beams codebook steered to cosine-space bin centres of ``sector``.

    Beam ``k_az * n_elevation_beams + k_el`` points at azimuth bin ``k_az`` and
    elevation bin ``k_el``, where ``k_el = 0`` is the most down-tilted bin.  With
    two elevation beams the even indices are therefore the primary-coverage
    beams and the odd ones the cell-edge beams sharing their azimuth.
    """
    if n_azimuth_beams < 1 or n_elevation_beams < 1:
        raise ValueError("beam counts must be >= 1")
    az = _cosine_bin_centers(sector.az_min, sector.az_max, n_azimuth_beams)
    el = _cosine_bin_centers(sector.el_min, sector.el_max, n_elevation_beams)[::-1]
    beams = [upa_steering(geom, a, e) for a in az for e in el]
    return Codebook(np.array(beams), l_max=l_max or len(beams))


def array_gain_grid(codeword: np.ndarray, geom: ArrayGeometry, grid: AngularGrid) -> np.ndarray:
    """Array-factor gain ``|a^H f|^2`` in dB over the grid, shape ``(n_az, n_el)``."""
    f = np.asarray(codeword, dtype=np.complex128)
    if f.shape != (geom.n_t,):
        raise ValueError(f"codeword length {f.shape} does not match n_t={geom.n_t}")
    power = np.abs(steering_grid(geom, grid).conj() @ f) ** 2
    with np.errstate(divide="ignore"):
        gain = 10.0 * np.log10(power)
    return np.maximum(gain, GAIN_FLOOR_DB)


def cosine_similarity(f_a: np.ndarray, f_b: np.ndarray) -> float:
    """``|f_a^H f_b| / (|f_a| |f_b|)``, the normalised beam overlap in [0, 1]."""
    na, nb = np.linalg.norm(f_a), np.linalg.norm(f_b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(min(1.0, abs(np.vdot(f_a, f_b)) / (na * nb)))


def similarity_matrix(codebook) -> np.ndarray:
    """Pairwise cosine similarity of all codewords, shape ``(L, L)``."""
    v = np.atleast_2d(np.asarray(codebook.vectors if isinstance(codebook, Codebook) else codebook))
    if v.shape[0] == 0:
        raise ValueError("empty codebook")
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("cosine similarity is undefined for a zero vector")
    u = v / norms[:, None]
    sim = np.minimum(np.abs(u.conj() @ u.T), 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim
