"""Small numpy convolutional network kit with hand-written backpropagation.

Tensors are ``(batch, channels, height, width)`` arrays.  Convolution is
cross-correlation (no kernel flip).  A conv kernel has shape
``(out_ch, in_ch, kh, kw)``; a transposed-conv kernel ``(in_ch, out_ch, kh, kw)``,
so the same array drives ``conv2d`` and its adjoint ``conv_transpose2d``.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MODEL_MAGIC = b"SSBM"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Raised for malformed, truncated or unsupported model files."""


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (batch, channels, height, width), got {x.shape}")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp, kh, kw, stride, ho, wo):
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride][:, :, :ho, :wo]


def _weight_grad(xp, up, kh, kw, stride):
    """``sum_b,h,w up[b,o,h,w] * xp[b,c,s*h+a,s*w+e]`` -> ``(O, C, kh, kw)``."""
    win = _windows(xp, kh, kw, stride, up.shape[2], up.shape[3])
    return np.tensordot(up, win, axes=([0, 2, 3], [0, 2, 3]))


def _scatter(up, w, stride, full_shape):
    """Adjoint of windowed correlation: spread ``up`` back through kernel ``w``.

    ``up`` is ``(B, O, H, W)``, ``w`` is ``(O, C, kh, kw)``; the result has shape
    ``full_shape = (B, C, Hf, Wf)``.
    """
    _, _, h, wd = up.shape
    kh, kw = w.shape[2:]
    cols = np.tensordot(up, w, axes=([1], [0]))  # B, H, W, C, kh, kw
    out = np.zeros(full_shape, dtype=np.result_type(up, w))
    for a in range(kh):
        for e in range(kw):
            out[:, :, a:a + stride * h:stride, e:e + stride * wd:stride] += \
                cols[..., a, e].transpose(0, 3, 1, 2)
    return out


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv_transpose_output_size(n, k, stride, padding, output_padding=0):
    return (n - 1) * stride - 2 * padding + k + output_padding


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Zero-padded strided cross-correlation plus per-channel bias."""
    _check4(x)
    _check4(weight, "weight")
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {c}")
    if stride < 1 or padding < 0:
        raise ValueError("need stride >= 1 and padding >= 0")
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    win = _windows(_pad(x, padding), kh, kw, stride, ho, wo)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_grad(x, weight, upstream, stride=1, padding=0):
    """Gradients of ``conv2d`` w.r.t. input, kernel and bias."""
    _check4(x)
    o, c, kh, kw = weight.shape
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    if upstream.shape != (x.shape[0], o, ho, wo):
        raise ValueError(f"upstream shape {upstream.shape} does not match output "
                         f"{(x.shape[0], o, ho, wo)}")
    xp = _pad(x, padding)
    grad_w = _weight_grad(xp, upstream, kh, kw, stride)
    grad_b = upstream.sum(axis=(0, 2, 3))
    gxp = _scatter(upstream, weight, stride, xp.shape)
    h, w = x.shape[2:]
    grad_x = gxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution, the adjoint of ``conv2d`` with the same kernel."""
    _check4(x)
    _check4(weight, "weight")
    i, o, kh, kw = weight.shape
    if x.shape[1] != i:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {i}")
    if output_padding < 0 or (output_padding and output_padding >= stride):
        raise ValueError("output_padding must be smaller than stride")
    b, _, h, w = x.shape
    ho = conv_transpose_output_size(h, kh, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, kw, stride, padding, output_padding)
    if ho < 1 or wo < 1:
        raise ValueError("transposed convolution output would be empty")
    full = (b, o, (h - 1) * stride + kh + output_padding, (w - 1) * stride + kw + output_padding)
    out = _scatter(x, weight, stride, full)[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out)


def conv_transpose2d_grad(x, weight, upstream, stride=1, padding=0, output_padding=0):
    """Gradients of ``conv_transpose2d`` w.r.t. input, kernel and bias."""
    _check4(x)
    i, o, kh, kw = weight.shape
    b, _, h, w = x.shape
    ho = conv_transpose_output_size(h, kh, stride, padding, output_padding)
    wo = conv_transpose_output_size(w, kw, stride, padding, output_padding)
    if upstream.shape != (b, o, ho, wo):
        raise ValueError(f"upstream shape {upstream.shape} does not match output {(b, o, ho, wo)}")
    gp = np.zeros((b, o, (h - 1) * stride + kh + output_padding,
                   (w - 1) * stride + kw + output_padding), dtype=upstream.dtype)
    gp[:, :, padding:padding + ho, padding:padding + wo] = upstream
    grad_x = conv2d(gp, weight, None, stride, 0)[:, :, :h, :w]
    grad_w = _weight_grad(gp, x, kh, kw, stride)
    grad_b = upstream.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, upstream):
    """Pass ``upstream`` where ``x > 0``; the subgradient at 0 is taken as 0."""
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``.

    The sum is accumulated in float64; the gradient keeps ``pred``'s dtype.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


def glorot_uniform(shape, fan_in, fan_out, rng, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D:
    """Convolution layer with optional ReLU."""

    kind = 1

    def __init__(self, weight, bias, stride=1, padding=0, activation="relu"):
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        if stride < 1 or padding < 0:
            raise ValueError("need stride >= 1 and padding >= 0")
        self.weight, self.bias = weight, bias
        self.stride, self.padding, self.activation = stride, padding, activation
        self.output_padding = 0
        self.grads = None
        self._cache = None

    @classmethod
    def init(cls, in_ch, out_ch, kernel, rng, stride=1, padding=0, activation="relu",
             dtype=np.float32):
        shape = (out_ch, in_ch, kernel, kernel)
        w = glorot_uniform(shape, in_ch * kernel ** 2, out_ch * kernel ** 2, rng, dtype)
        return cls(w, np.zeros(out_ch, dtype), stride, padding, activation)

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def params(self):
        return [self.weight, self.bias]

    def output_size(self, n):
        return conv_output_size(n, self.weight.shape[2], self.stride, self.padding)

    def _linear(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def _linear_grad(self, x, g):
        return conv2d_grad(x, self.weight, g, self.stride, self.padding)

    def forward(self, x):
        z = self._linear(x)
        self._cache = (x, z)
        return relu(z) if self.activation == "relu" else z

    def backward(self, upstream):
        x, z = self._cache
        if self.activation == "relu":
            upstream = relu_grad(z, upstream)
        grad_x, grad_w, grad_b = self._linear_grad(x, upstream)
        self.grads = [grad_w.astype(self.weight.dtype, copy=False),
                      grad_b.astype(self.bias.dtype, copy=False)]
        return grad_x


class ConvTranspose2D(Conv2D):
    """Transposed convolution layer with optional ReLU."""

    kind = 2

    def __init__(self, weight, bias, stride=1, padding=0, activation="relu", output_padding=0):
        super().__init__(weight, bias, stride, padding, activation)
        if output_padding < 0 or (output_padding and output_padding >= stride):
            raise ValueError("output_padding must be smaller than stride")
        self.output_padding = output_padding

    @classmethod
    def init(cls, in_ch, out_ch, kernel, rng, stride=1, padding=0, activation="relu",
             output_padding=0, dtype=np.float32):
        shape = (in_ch, out_ch, kernel, kernel)
        w = glorot_uniform(shape, in_ch * kernel ** 2, out_ch * kernel ** 2, rng, dtype)
        return cls(w, np.zeros(out_ch, dtype), stride, padding, activation, output_padding)

    @property
    def in_channels(self):
        return self.weight.shape[0]

    @property
    def out_channels(self):
        return self.weight.shape[1]

    def output_size(self, n):
        return conv_transpose_output_size(n, self.weight.shape[2], self.stride, self.padding,
                                          self.output_padding)

    def _linear(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                self.output_padding)

    def _linear_grad(self, x, g):
        return conv_transpose2d_grad(x, self.weight, g, self.stride, self.padding,
                                     self.output_padding)


class Network:
    """A plain stack of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        dtype = self.layers[0].weight.dtype
        x = np.asarray(x, dtype=dtype)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, upstream):
        for layer in reversed(self.layers):
            upstream = layer.backward(upstream)
        return upstream

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def loss_and_grads(self, x, target):
        loss, g = mse_loss(self.forward(x), target)
        self.backward(g)
        return loss, self.grads()

    def astype(self, dtype):
        clone = self.copy()
        for layer in clone.layers:
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
        return clone

    def copy(self):
        clone = copy.deepcopy(self)
        for layer in clone.layers:
            layer._cache = None
            layer.grads = None
        return clone

    def n_params(self):
        return sum(p.size for p in self.params())


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kwargs):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   **kwargs)


def adam_update(params, grads, state: AdamState):
    """One bias-corrected Adam step, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer moments must align")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


def finite_difference_check(model: Network, x, target, epsilon=1e-5, n_coords=200,
                            rng=None, atol=1e-7):
    """Worst relative error between backprop and central differences.

    Runs on a float64 copy of ``model``.  ``n_coords`` parameter coordinates are
    sampled without replacement (all of them if there are fewer).  The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    net = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _, grads = net.loss_and_grads(x, target)
    grads = [g.copy() for g in grads]
    params = net.params()
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    picks = rng.choice(total, size=min(n_coords, total), replace=False)

    def loss():
        return mse_loss(net.forward(x), target)[0]

    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[k], params[k].shape)
        p = params[k]
        orig = p[idx]
        p[idx] = orig + epsilon
        up = loss()
        p[idx] = orig - epsilon
        down = loss()
        p[idx] = orig
        numeric = (up - down) / (2 * epsilon)
        analytic = grads[k][idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)
        worst = max(worst, err)
    return worst


_LAYER_HEADER = struct.Struct("<9I")
_ACTIVATIONS = {"linear": 0, "relu": 1}
_LAYER_KINDS = {1: Conv2D, 2: ConvTranspose2D}


def model_to_bytes(model: Network) -> bytes:
    """Serialise to the ``SSBM`` layout (little-endian, float32 parameters)."""
    chunks = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(model.layers))]
    for layer in model.layers:
        kh, kw = layer.weight.shape[2:]
        chunks.append(_LAYER_HEADER.pack(layer.kind, _ACTIVATIONS[layer.activation],
                                         layer.in_channels, layer.out_channels, kh, kw,
                                         layer.stride, layer.padding, layer.output_padding))
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    return b"".join(chunks)


def model_from_bytes(data: bytes) -> Network:
    if len(data) < 12 or data[:4] != MODEL_MAGIC:
        raise ModelFormatError("not an SSBM model file (bad magic)")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported SSBM version {version} (expected {MODEL_VERSION})")
    pos = 12
    layers = []
    activations = {v: k for k, v in _ACTIVATIONS.items()}
    for _ in range(n_layers):
        if pos + _LAYER_HEADER.size > len(data):
            raise ModelFormatError("truncated SSBM file (layer header)")
        kind, act, cin, cout, kh, kw, stride, pad, opad = _LAYER_HEADER.unpack_from(data, pos)
        pos += _LAYER_HEADER.size
        if kind not in _LAYER_KINDS or act not in activations:
            raise ModelFormatError(f"unknown layer kind {kind} or activation {act}")
        shape = (cout, cin, kh, kw) if kind == 1 else (cin, cout, kh, kw)
        n_w, n_b = int(np.prod(shape)), cout
        end = pos + 4 * (n_w + n_b)
        if end > len(data):
            raise ModelFormatError("truncated SSBM file (parameter block)")
        w = np.frombuffer(data, "<f4", n_w, pos).reshape(shape).astype(np.float32)
        b = np.frombuffer(data, "<f4", n_b, pos + 4 * n_w).astype(np.float32)
        pos = end
        try:
            if kind == 1:
                layers.append(Conv2D(w, b, stride, pad, activations[act]))
            else:
                layers.append(ConvTranspose2D(w, b, stride, pad, activations[act], opad))
        except ValueError as exc:
            raise ModelFormatError(f"invalid layer parameters: {exc}") from exc
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes after last layer")
    return Network(layers)


def save_model(model: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> Network:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
