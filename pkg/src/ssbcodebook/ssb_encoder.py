"""SSB-Encoder: a convolutional autoencoder from beamspace observations to codebooks.

The network sees the ``(l_max, n_x, n_y)`` observation and emits
``2 * l_max`` channels; channels ``2i`` and ``2i + 1`` are the real and
imaginary parts of beam ``i`` laid out on the ``n_x x n_y`` element grid.
Training regresses these raw outputs onto phase-canonicalised SVD beams with
a mean squared error; unit-norm projection only happens at deployment.
"""
from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .array_geometry import Codebook, cosine_similarity
from .channel import Episode
from .initial_access import NoiseModel, canonicalize_phase, svd_beams, sweep_feedback
from .neural_core import AdamState, Conv2D, ConvTranspose2D, Network, adam_update, mse_loss
from .observation import ObservationConfig, build_observation
from .seeding import substream

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss turns NaN or infinite during training."""


@dataclass(frozen=True)
class EncoderConfig:
    l_max: int = 8
    n_x: int = 8
    n_y: int = 8
    widths: tuple[int, int] = (32, 64)
    kernel: int = 3
    strides: tuple[int, int] = (2, 2)
    padding: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    lr_factor: float = 0.5
    lr_patience: int = 5
    early_stop_patience: int = 12
    min_lr: float = 1e-6
    val_fraction: float = 0.1
    phase_reference: str = "slot"
    label_assignment: str = "nearest"
    inference: str = "iterative"

    def __post_init__(self):
        if self.l_max < 1 or self.n_x < 1 or self.n_y < 1:
            raise ValueError("l_max and grid dimensions must be >= 1")
        if len(self.widths) != 2 or len(self.strides) != 2 or min(self.widths) < 1:
            raise ValueError("need two positive encoder widths and two strides")
        if self.kernel < 1 or min(self.strides) < 1 or self.padding < 0:
            raise ValueError("kernel/stride must be >= 1 and padding >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.learning_rate < 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and learning_rate >= 0 required")
        if not 0 < self.lr_factor <= 1:
            raise ValueError("lr_factor must lie in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.inference not in ("iterative", "static"):
            raise ValueError("inference must be 'iterative' or 'static'")
        if self.label_assignment not in ("nearest", "spill"):
            raise ValueError("label_assignment must be 'nearest' or 'spill'")
        if self.phase_reference not in ("first", "max", "slot"):
            raise ValueError("phase_reference must be 'first', 'max' or 'slot'")

    @property
    def out_channels(self) -> int:
        return 2 * self.l_max


def _mirror_output_padding(n_in, n_out, kernel, stride, padding):
    op = n_in - ((n_out - 1) * stride - 2 * padding + kernel)
    if op < 0 or (op and op >= stride):
        raise ValueError(f"decoder cannot restore size {n_in} from {n_out} "
                         f"(kernel {kernel}, stride {stride}, padding {padding})")
    return op


def build_model(config: EncoderConfig, rng: np.random.Generator) -> Network:
    """Two strided conv layers, two mirrored transposed convs, linear output."""
    c1, c2 = config.widths
    s1, s2 = config.strides
    k, p = config.kernel, config.padding
    enc1 = Conv2D.init(config.l_max, c1, k, rng, s1, p, "relu")
    enc2 = Conv2D.init(c1, c2, k, rng, s2, p, "relu")
    sizes = []
    for n in (config.n_x, config.n_y):
        h1 = enc1.output_size(n)
        h2 = enc2.output_size(h1) if h1 >= 1 else 0
        if h1 < 1 or h2 < 1:
            raise ValueError(f"grid dimension {n} collapses in the encoder")
        sizes.append((n, h1, h2))
    op2 = {_mirror_output_padding(h1, h2, k, s2, p) for _, h1, h2 in sizes}
    op1 = {_mirror_output_padding(n, h1, k, s1, p) for n, h1, _ in sizes}
    if len(op2) > 1 or len(op1) > 1:
        raise ValueError("non-square grids needing different output padding are unsupported")
    dec1 = ConvTranspose2D.init(c2, c1, k, rng, s2, p, "relu", op2.pop())
    dec2 = ConvTranspose2D.init(c1, config.out_channels, k, rng, s1, p, "linear", op1.pop())
    return Network([enc1, enc2, dec1, dec2])


def beams_to_target(vectors: np.ndarray, n_x: int, n_y: int) -> np.ndarray:
    """``(L, n_t)`` complex beams -> ``(L, n_x, n_y, 2)`` real/imag grids."""
    grid = np.asarray(vectors).reshape(len(vectors), n_x, n_y)
    return np.stack([grid.real, grid.imag], axis=-1)


def target_to_channels(target: np.ndarray) -> np.ndarray:
    """``(..., L, n_x, n_y, 2)`` -> ``(..., 2L, n_x, n_y)`` with real/imag interleaved."""
    t = np.moveaxis(target, -1, -3)
    return t.reshape(*target.shape[:-4], 2 * target.shape[-4], *target.shape[-3:-1])


def channels_to_beams(out: np.ndarray) -> np.ndarray:
    """``(..., 2L, n_x, n_y)`` network output -> ``(..., L, n_t)`` complex beams."""
    beams = out[..., 0::2, :, :] + 1j * out[..., 1::2, :, :]
    return beams.reshape(*beams.shape[:-2], -1)


def make_label(channels, dft_codebook: Codebook, grid_shape: tuple[int, int],
               l_max: int | None = None, phase: str = "slot",
               assignment: str = "nearest") -> np.ndarray:
    """Training target ``(l_max, n_x, n_y, 2)`` from one timestep's channels.

    Each of the strongest per-UE SVD beams goes to the output slot of the DFT
    beam it overlaps most.  Beams are taken strongest first, so when several
    want the same slot the strongest keeps it and the rest are dropped
    (``assignment="nearest"``); with ``assignment="spill"`` a loser moves on to
    its most similar free slot instead.  Slots left over keep their DFT
    codeword.
    """
    l_max = l_max or dft_codebook.l_max
    n_x, n_y = grid_shape
    if n_x * n_y != dft_codebook.n_t:
        raise ValueError(f"grid {grid_shape} does not match n_t={dft_codebook.n_t}")
    h = np.asarray(channels)
    ref = dft_codebook.vectors[:l_max]
    slots = [canonicalize_phase(v, phase, r) for v, r in zip(ref, ref)]
    if h.size and np.any(h):
        beams = svd_beams(h, l_max, phase="first" if phase == "slot" else phase)
        free = list(range(len(slots)))
        for v in beams.vectors[beams.ue_index >= 0]:
            if not free:
                break
            pool = free if assignment == "spill" else range(len(slots))
            best = max(pool, key=lambda j: cosine_similarity(ref[j], v))
            if best in free:
                slots[best] = canonicalize_phase(v, phase, ref[best])
                free.remove(best)
    return beams_to_target(np.array(slots), n_x, n_y)


def forward_codebook(model: Network, obs: np.ndarray, fallback: Codebook,
                     return_flags: bool = False):
    """Run the network on one observation and deploy its output as a Codebook.

    Beams whose raw output is all zero are replaced with the matching
    ``fallback`` (DFT) codeword and flagged with a warning.
    """
    out = model.forward(np.asarray(obs)[None])[0].astype(np.float64)
    beams = channels_to_beams(out)
    norms = np.linalg.norm(beams, axis=1)
    flags = ~(norms > 0) | ~np.isfinite(norms)
    if np.any(flags):
        warnings.warn(f"encoder produced {int(flags.sum())} zero beam(s); using DFT fallback",
                      RuntimeWarning, stacklevel=2)
        beams[flags] = fallback.vectors[np.flatnonzero(flags)]
    codebook = Codebook(beams, l_max=fallback.l_max)
    if return_flags:
        return codebook, flags
    return codebook


def is_validation_episode(index: int, fraction: float) -> bool:
    """Deterministic hash split of episodes."""
    h = zlib.crc32(int(index).to_bytes(8, "little")) % 10_000
    return h < fraction * 10_000


@dataclass
class Dataset:
    """Stacked training samples; ``y`` is already in network channel layout."""

    x: np.ndarray
    y: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    is_val: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @property
    def train(self):
        m = ~self.is_val
        return self.x[m], self.y[m]

    @property
    def val(self):
        return self.x[self.is_val], self.y[self.is_val]


def build_dataset(episodes: list[Episode], dft_codebook: Codebook, obs_config: ObservationConfig,
                  config: EncoderConfig = EncoderConfig(), noise_var: float = 0.0,
                  seed: int = 0) -> Dataset:
    """One sample per (episode, timestep): DFT-sweep observation -> SVD label."""
    if not episodes:
        raise ValueError("no episodes to build a dataset from")
    xs, ys, eps, ts, val = [], [], [], [], []
    for ep in episodes:
        rng = substream(seed, "noise", ep.index)
        noise = NoiseModel(noise_var, rng if noise_var > 0 else None)
        split = is_validation_episode(ep.index, config.val_fraction)
        for t in range(ep.n_steps):
            h, g = ep.snapshot(t)
            fb = sweep_feedback(h, dft_codebook, g, noise)
            xs.append(build_observation(fb, dft_codebook, obs_config))
            ys.append(target_to_channels(make_label(h, dft_codebook, (config.n_x, config.n_y),
                                                    config.l_max, config.phase_reference,
                                                    config.label_assignment)))
            eps.append(ep.index)
            ts.append(t)
            val.append(split)
    return Dataset(np.array(xs, np.float32), np.array(ys, np.float32), np.array(eps),
                   np.array(ts), np.array(val, dtype=bool))


def evaluate_loss(model: Network, x, y, batch_size=256) -> float:
    if len(x) == 0:
        return float("nan")
    total = 0.0
    for i in range(0, len(x), batch_size):
        loss, _ = mse_loss(model.forward(x[i:i + batch_size]), y[i:i + batch_size])
        total += loss * len(x[i:i + batch_size])
    return total / len(x)


@dataclass
class TrainResult:
    model: Network
    history: list = field(default_factory=list)
    best_epoch: int = 0
    initial_val_mse: float = float("nan")

    @property
    def best_val_mse(self):
        if not self.history:
            return self.initial_val_mse
        return min([self.initial_val_mse] + [h["val_mse"] for h in self.history])


def train(model: Network, dataset: Dataset, config: EncoderConfig = EncoderConfig(),
          seed: int = 0, max_epochs: int | None = None, callback=None) -> TrainResult:
    """Mini-batch Adam with plateau LR reduction and early stopping.

    Returns the snapshot with the lowest validation MSE (the initial model
    counts as a candidate) together with the per-epoch history.
    """
    x_tr, y_tr = dataset.train
    x_va, y_va = dataset.val
    if len(x_tr) == 0:
        raise ValueError("empty training split")
    if len(x_va) == 0:
        x_va, y_va = x_tr, y_tr
    max_epochs = config.max_epochs if max_epochs is None else max_epochs
    rng = substream(seed, "shuffle")
    state = AdamState.for_params(model.params(), lr=config.learning_rate)

    best_val = evaluate_loss(model, x_va, y_va)
    best = model.copy()
    result = TrainResult(best, initial_val_mse=best_val)
    since_best = since_lr = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(len(x_tr))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            loss, grads = model.loss_and_grads(x_tr[idx], y_tr[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, batch {i // config.batch_size} "
                    f"(lr={state.lr:g})")
            adam_update(model.params(), grads, state)
            total += loss * len(idx)
        train_mse = total / len(order)
        val_mse = evaluate_loss(model, x_va, y_va)
        if not np.isfinite(val_mse):
            raise TrainingDivergedError(f"validation loss became {val_mse} at epoch {epoch}")
        result.history.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse,
                               "lr": state.lr})
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_mse, val_mse, state.lr)
        if callback is not None:
            callback(result.history[-1])
        if val_mse < best_val:
            best_val, best, result.best_epoch = val_mse, model.copy(), epoch
            since_best = since_lr = 0
        else:
            since_best += 1
            since_lr += 1
        if since_best >= config.early_stop_patience:
            break
        if since_lr >= config.lr_patience:
            state.lr = max(state.lr * config.lr_factor, min(config.min_lr, state.lr))
            since_lr = 0
    result.model = best
    return result
