"""Spatially consistent geometric channel generator for a single-sector cell.

A desk-scale stand-in for a full stochastic channel simulator.  Every UE
carries a fixed set of scatterer anchors and frozen small-scale fading draws,
so as it moves along its trajectory the path angles and gains evolve
continuously.  Each path contributes ``alpha * a_R(theta_R) a_T(theta_T, phi_T)^H``
to the ``n_r x n_t`` channel.

Coordinates: the base station sits at ``(0, 0, bs_height)`` with its array in
the y-z plane facing +x.  Transmit angles are direction-cosine angles measured
from the array's y axis (azimuth) and z axis (elevation).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .array_geometry import ArrayGeometry, Sector
from .seeding import substream

SPEED_OF_LIGHT = 299_792_458.0
STATIONARY = "stationary"
ROADWAY = "roadway"


@dataclass(frozen=True)
class ScenarioConfig:
    geometry: ArrayGeometry = ArrayGeometry(8, 8)
    n_r: int = 4
    carrier_hz: float = 3.5e9
    sector: Sector = Sector()
    bs_height: float = 25.0
    ue_height: float = 1.5
    cell_radius: float = 200.0
    # UEs nearer than this sit below the lowest elevation beam of the sector
    min_radius: float = 90.0
    # (stationary, roadway) class probabilities
    mobility_mix: tuple[float, float] = (0.3, 0.7)
    # a cross street and a main street running out along boresight
    roads: tuple = (((100.0, -100.0), (160.0, 90.0)), ((90.0, 0.0), (200.0, 0.0)))
    lane_width: float = 3.5
    speed_mean: float = 25.0
    speed_std: float = 5.0
    activity_prob: float = 0.2
    u_active_bounds: tuple[int, int] = (4, 12)
    n_paths: int = 12
    rician_k_db: float = 10.0
    cluster_decay: float = 3.0
    scatter_distance: tuple[float, float] = (5.0, 40.0)
    pathloss_exp_los: float = 2.0
    pathloss_exp_nlos: float = 3.5
    pathloss_ref_m: float = 10.0
    los_hysteresis: int = 10
    noise_var: float = 0.1
    n_steps: int = 20
    dt: float = 0.005
    trajectory_steps: int = 400
    seed: int = 0

    def __post_init__(self):
        if len(self.mobility_mix) != 2 or any(not 0 <= p <= 1 for p in self.mobility_mix):
            raise ValueError("mobility_mix must hold two probabilities in [0, 1]")
        if not np.isclose(sum(self.mobility_mix), 1.0):
            raise ValueError("mobility_mix probabilities must sum to 1")
        if not 0 <= self.activity_prob <= 1:
            raise ValueError("activity_prob must lie in [0, 1]")
        lo, hi = self.u_active_bounds
        if not 1 <= lo <= hi:
            raise ValueError("u_active_bounds must satisfy 1 <= low <= high")
        if not 0 < self.min_radius < self.cell_radius:
            raise ValueError("degenerate sector: need 0 < min_radius < cell_radius")
        if self.n_paths < 1 or self.n_r < 1:
            raise ValueError("n_paths and n_r must be >= 1")
        if self.noise_var < 0 or self.speed_std < 0:
            raise ValueError("noise_var and speed_std must be non-negative")
        if self.n_steps < 1 or not self.dt > 0:
            raise ValueError("need n_steps >= 1 and dt > 0")
        if self.trajectory_steps < self.n_steps:
            raise ValueError("trajectory_steps must cover one episode")
        lo_s, hi_s = self.scatter_distance
        if not 0 < lo_s <= hi_s:
            raise ValueError("scatter_distance must satisfy 0 < low <= high")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def bs_position(self) -> np.ndarray:
        return np.array([0.0, 0.0, self.bs_height])

    @property
    def rician_k(self) -> float:
        return 10.0 ** (self.rician_k_db / 10.0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return config_digest(self.to_dict())


def config_digest(obj) -> str:
    """SHA-256 of a canonical JSON rendering (floats via ``repr``)."""
    text = json.dumps(obj, sort_keys=True, default=repr, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class PathSet:
    gains: np.ndarray
    tx_azimuth: np.ndarray
    tx_elevation: np.ndarray
    rx_azimuth: np.ndarray
    rx_elevation: np.ndarray

    def __post_init__(self):
        n = self.gains.size
        if n < 1:
            raise ValueError("a path set needs at least one path")
        for a in (self.tx_azimuth, self.tx_elevation, self.rx_azimuth, self.rx_elevation):
            if a.shape != (n,) or not np.all(np.isfinite(a)):
                raise ValueError("path angles must be finite and match the gain count")
        if not np.sum(np.abs(self.gains) ** 2) > 0:
            raise ValueError("path set carries no power")

    def __len__(self):
        return self.gains.size


@dataclass(frozen=True)
class ChannelTensor:
    """Per-UE channel as a 3-D tensor ``(n_r, n_x, n_y)`` and stacked ``(n_r, n_t)``."""

    h3: np.ndarray

    @property
    def h2(self) -> np.ndarray:
        n_r = self.h3.shape[0]
        return self.h3.reshape(n_r, -1)

    @classmethod
    def from_stacked(cls, h2: np.ndarray, geom: ArrayGeometry) -> "ChannelTensor":
        return cls(np.asarray(h2).reshape(h2.shape[0], geom.n_x, geom.n_y))


@dataclass(frozen=True)
class UserState:
    uid: int
    position: np.ndarray
    velocity: np.ndarray
    mobility: str
    los: bool
    gamma: float
    scatterers: np.ndarray
    fading: np.ndarray
    los_draw: float
    los_pending: int = 0

    def __post_init__(self):
        if self.mobility == STATIONARY and np.any(self.velocity != 0):
            raise ValueError("stationary users cannot move")
        if not self.gamma > 0:
            raise ValueError("link budget gamma must be positive")


def los_probability(d2d: float) -> float:
    """Distance-based line-of-sight probability (UMi street-canyon form)."""
    if d2d <= 18.0:
        return 1.0
    return min(1.0, 18.0 / d2d + np.exp(-d2d / 36.0) * (1.0 - 18.0 / d2d))


def _pathloss_gamma(position, los, config: ScenarioConfig) -> float:
    d3d = max(np.linalg.norm(position - config.bs_position), 1.0)
    exponent = config.pathloss_exp_los if los else config.pathloss_exp_nlos
    return float((config.pathloss_ref_m / d3d) ** exponent)


class UserFactory:
    """Creates fresh UEs: position and mobility from ``rng``, fading from ``fading_rng``.

    ``t_start`` offsets roadway UEs along their trajectory, standing in for
    picking a random start sample from a longer drive.
    """

    def __init__(self, config: ScenarioConfig, rng: np.random.Generator,
                 fading_rng: np.random.Generator | None = None, t_start: int = 0):
        self.config = config
        self.rng = rng
        self.fading_rng = fading_rng if fading_rng is not None else rng
        self.t_start = t_start
        self._next_uid = 0

    def _stationary_position(self):
        c, rng = self.config, self.rng
        half_width = 0.5 * (c.sector.az_max - c.sector.az_min)
        r = np.sqrt(rng.uniform(c.min_radius ** 2, c.cell_radius ** 2))
        az = rng.uniform(-half_width, half_width)
        return np.array([r * np.cos(az), r * np.sin(az), c.ue_height])

    def _roadway_position_velocity(self):
        c, rng = self.config, self.rng
        if not c.roads:
            raise ValueError("roadway users requested but no roads configured")
        start, end = (np.asarray(p, dtype=float) for p in c.roads[rng.integers(len(c.roads))])
        length = np.linalg.norm(end - start)
        if length == 0:
            raise ValueError("degenerate road segment")
        direction = (end - start) / length
        normal = np.array([-direction[1], direction[0]])
        heading = 1.0 if rng.random() < 0.5 else -1.0
        speed = max(0.0, rng.normal(c.speed_mean, c.speed_std))
        lane = rng.uniform(-0.5, 0.5) * c.lane_width
        s = (rng.uniform(0, length) + heading * speed * self.t_start * c.dt) % length
        xy = start + s * direction + lane * normal
        velocity = np.append(heading * speed * direction, 0.0)
        return np.array([xy[0], xy[1], c.ue_height]), velocity

    def __call__(self) -> UserState:
        c, rng = self.config, self.rng
        if rng.random() < c.mobility_mix[0]:
            mobility, position, velocity = STATIONARY, self._stationary_position(), np.zeros(3)
        else:
            mobility = ROADWAY
            position, velocity = self._roadway_position_velocity()
        los_draw = rng.random()
        los = los_draw < los_probability(np.linalg.norm(position[:2]))
        dist = rng.uniform(*c.scatter_distance, size=c.n_paths)
        az = rng.uniform(0, 2 * np.pi, size=c.n_paths)
        height = rng.uniform(0.0, 2.0 * c.ue_height + 10.0, size=c.n_paths)
        scatterers = np.column_stack([position[0] + dist * np.cos(az),
                                      position[1] + dist * np.sin(az), height])
        frng = self.fading_rng
        fading = (frng.standard_normal(c.n_paths) + 1j * frng.standard_normal(c.n_paths)) / np.sqrt(2)
        uid = self._next_uid
        self._next_uid += 1
        return UserState(uid=uid, position=position, velocity=velocity, mobility=mobility,
                         los=bool(los), gamma=_pathloss_gamma(position, los, c),
                         scatterers=scatterers, fading=fading, los_draw=float(los_draw))


def place_users(config: ScenarioConfig, rng: np.random.Generator,
                factory: UserFactory | None = None) -> list:
    """Initial roster: ``u_max`` slots, a uniform number of them holding active UEs.

    Empty slots are ``None``.
    """
    factory = factory or UserFactory(config, rng)
    lo, hi = config.u_active_bounds
    n_active = int(rng.integers(lo, hi + 1))
    return [factory() for _ in range(n_active)] + [None] * (hi - n_active)


def step_user(state: UserState, dt: float, config: ScenarioConfig) -> UserState:
    """Advance a UE by ``dt`` seconds; scatterer anchors stay put.

    The LOS flag follows ``los_draw < P_LOS(d)`` but only flips after the
    condition has disagreed with it for ``los_hysteresis`` consecutive steps.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    position = state.position + state.velocity * dt
    wants_los = state.los_draw < los_probability(np.linalg.norm(position[:2]))
    los, pending = state.los, 0
    if wants_los != state.los:
        pending = state.los_pending + 1
        if pending >= config.los_hysteresis:
            los, pending = wants_los, 0
    return dataclasses.replace(state, position=position, los=los, los_pending=pending)


def ue_activity_step(roster: list, rng: np.random.Generator, factory: UserFactory,
                     prob: float | None = None) -> list:
    """Drop each active UE and fill each empty slot independently with probability ``prob``."""
    p = factory.config.activity_prob if prob is None else prob
    out = []
    for state in roster:
        flip = rng.random() < p
        if state is None:
            out.append(factory() if flip else None)
        else:
            out.append(None if flip else state)
    return out


def _direction_angles(src: np.ndarray, dst: np.ndarray):
    """Direction-cosine angles of ``dst - src`` w.r.t. the y and z axes."""
    d = dst - src
    u = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return np.arccos(np.clip(u[..., 1], -1, 1)), np.arccos(np.clip(u[..., 2], -1, 1))


def build_paths(state: UserState, config: ScenarioConfig,
                rng: np.random.Generator | None = None) -> PathSet:
    """Path set for one UE at its current position.

    A LOS UE gets the direct path with power ``K/(K+1)`` plus ``n_paths - 1``
    scatterer paths sharing ``1/(K+1)``; an NLOS UE gets ``n_paths`` scatterer
    paths with unit total mean power.  Small-scale factors come from the UE's
    frozen draws unless ``rng`` is given, in which case they are redrawn.
    """
    bs = config.bs_position
    n = config.n_paths
    lam = config.wavelength
    if rng is None:
        fading = state.fading
    else:
        fading = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / np.sqrt(2)

    n_clusters = n - 1 if state.los else n
    k = config.rician_k
    los_power = k / (k + 1.0) if state.los else 0.0
    if np.isinf(k) and state.los:
        los_power = 1.0

    points, gains, lengths = [], [], []
    if state.los:
        points.append(bs)
        gains.append(np.sqrt(los_power))
        lengths.append(np.linalg.norm(state.position - bs))
    if n_clusters > 0:
        mean_power = np.exp(-np.arange(n_clusters) / config.cluster_decay)
        mean_power *= (1.0 - los_power) / mean_power.sum()
        anchors = state.scatterers[:n_clusters]
        leg = np.linalg.norm(anchors - bs, axis=1) + np.linalg.norm(anchors - state.position, axis=1)
        points.extend(anchors)
        gains.extend(np.sqrt(mean_power) * fading[:n_clusters])
        lengths.extend(leg)
    points = np.array(points)
    gains = np.asarray(gains, dtype=complex) * np.exp(-2j * np.pi * np.asarray(lengths) / lam)

    # The direct path leaves the array towards the UE itself.
    targets = points.copy()
    if state.los:
        targets[0] = state.position
    tx_az, tx_el = _direction_angles(bs, targets)
    # UE array lies horizontally, broadside towards the base station.
    to_bs = bs[:2] - state.position[:2]
    axis = np.array([-to_bs[1], to_bs[0], 0.0]) / np.linalg.norm(to_bs)
    arrival = points - state.position
    arrival /= np.linalg.norm(arrival, axis=1, keepdims=True)
    rx_az = np.arccos(np.clip(arrival @ axis, -1, 1))
    rx_el = np.arccos(np.clip(arrival[:, 2], -1, 1))
    return PathSet(gains, tx_az, tx_el, rx_az, rx_el)


def assemble_channel(paths: PathSet, tx_geom: ArrayGeometry, n_r: int) -> ChannelTensor:
    """Sum of rank-one path contributions ``alpha a_R a_T^H`` as a ChannelTensor."""
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    s = 2j * np.pi * tx_geom.spacing
    ax = np.exp(s * np.outer(np.cos(paths.tx_azimuth), np.arange(tx_geom.n_x)))
    ay = np.exp(s * np.outer(np.cos(paths.tx_elevation), np.arange(tx_geom.n_y)))
    a_t = (ax[:, :, None] * ay[:, None, :]).reshape(len(paths), tx_geom.n_t)
    a_r = np.exp(1j * np.pi * np.outer(np.cos(paths.rx_azimuth), np.arange(n_r)))
    h2 = (a_r.T * paths.gains) @ a_t.conj()
    return ChannelTensor.from_stacked(h2, tx_geom)


def channel_for(state: UserState, config: ScenarioConfig) -> np.ndarray:
    """Stacked ``(n_r, n_t)`` channel of a UE at its current position."""
    return assemble_channel(build_paths(state, config), config.geometry, config.n_r).h2


@dataclass
class Episode:
    """Channels of a UE cohort over ``n_steps`` intervals.

    ``channels`` has shape ``(U, T, n_r, n_t)`` (complex64) with zeros where the
    UE is inactive; ``active`` is ``(U, T)``; ``gammas`` holds one link budget
    per UE.  UE rows are ordered by first appearance.
    """

    index: int
    channels: np.ndarray
    gammas: np.ndarray
    active: np.ndarray
    t_start: int = 0
    dt: float = 0.005

    @property
    def n_steps(self) -> int:
        return self.active.shape[1]

    def active_at(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.active[:, t])

    def snapshot(self, t: int):
        """``(h2 stack, gammas)`` for the UEs active at step ``t``."""
        idx = self.active_at(t)
        return self.channels[idx, t].astype(np.complex128), self.gammas[idx].astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.index == other.index and self.t_start == other.t_start
                and np.array_equal(self.channels, other.channels)
                and np.array_equal(self.gammas, other.gammas)
                and np.array_equal(self.active, other.active))


def generate_episode(config: ScenarioConfig, index: int = 0, seed: int | None = None,
                     return_rosters: bool = False):
    """One episode, a pure function of ``(config, seed, index)``."""
    seed = config.seed if seed is None else seed
    rng_place = substream(seed, "placement", index)
    rng_activity = substream(seed, "activity", index)
    rng_fading = substream(seed, "fading", index)
    t_start = int(rng_place.integers(0, config.trajectory_steps - config.n_steps + 1))
    factory = UserFactory(config, rng_place, rng_fading, t_start)
    roster = place_users(config, rng_place, factory)

    rows: dict[int, int] = {}
    gammas: list[float] = []
    records: list[tuple[int, int, np.ndarray]] = []
    rosters = []
    for t in range(config.n_steps):
        if t > 0:
            roster = [None if s is None else step_user(s, config.dt, config) for s in roster]
            roster = ue_activity_step(roster, rng_activity, factory)
        rosters.append(list(roster))
        for state in roster:
            if state is None:
                continue
            if state.uid not in rows:
                rows[state.uid] = len(rows)
                gammas.append(state.gamma)
            records.append((rows[state.uid], t, channel_for(state, config)))

    n_users = len(rows)
    channels = np.zeros((n_users, config.n_steps, config.n_r, config.geometry.n_t), np.complex64)
    active = np.zeros((n_users, config.n_steps), dtype=bool)
    for row, t, h2 in records:
        channels[row, t] = h2
        active[row, t] = True
    episode = Episode(index=index, channels=channels, gammas=np.asarray(gammas, np.float32),
                      active=active, t_start=t_start, dt=config.dt)
    if return_rosters:
        return episode, rosters
    return episode


def generate_episodes(config: ScenarioConfig, n_episodes: int, seed: int | None = None,
                      first_index: int = 0) -> list[Episode]:
    return [generate_episode(config, first_index + i, seed) for i in range(n_episodes)]
