"""Strided 1-D convolutional feature extractor operating on raw audio."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import LengthError, ShapeError
from .signal_io import Waveform

PAPER_LAYERS = tuple(
    (512, k, s) for k, s in zip((10, 8, 4, 4, 4, 1, 1, 1), (5, 4, 2, 2, 2, 1, 1, 1))
)
DESK_LAYERS = ((64, 10, 5), (64, 8, 4), (64, 4, 2), (64, 4, 2))


@dataclass(frozen=True)
class EncoderConfig:
    """Layer geometry as (out_channels, kernel, stride) triples.

    ``extra_stride=2`` appends a (kernel 2, stride 2) layer that halves the
    latent frame rate; the default of 1 leaves the stack untouched.
    ``init_gain`` scales the uniform weight bound ``1/sqrt(fan_in)``.
    ``output_norm`` standardizes the output without learned parameters:
    ``"frame"`` across channels within each frame, ``"time"`` each channel
    across the frames of an utterance.  Either keeps features from shrinking
    towards a single point during training; ``"time"`` also removes the
    constant per-channel offset.
    """

    layers: tuple = DESK_LAYERS
    activation: str = "gelu"
    input_sample_rate: int = 16000
    extra_stride: int = 1
    init_gain: float = 1.0
    output_norm: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        if not self.layers:
            raise ShapeError("encoder needs at least one layer")
        for ch, k, s in self.layers:
            if not (k >= s >= 1) or ch < 1:
                raise ShapeError(f"invalid layer (channels={ch}, kernel={k}, stride={s}): need kernel >= stride >= 1")
        if self.activation not in L.ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.extra_stride not in (1, 2):
            raise ShapeError("extra_stride must be 1 or 2")
        if not self.init_gain > 0:
            raise ShapeError("init_gain must be positive")
        if self.output_norm not in ("none", "frame", "time"):
            raise ShapeError(f"unknown output_norm {self.output_norm!r}")

    @classmethod
    def paper(cls, **kwargs):
        return cls(layers=PAPER_LAYERS, **kwargs)

    @property
    def stack(self):
        if self.extra_stride == 1:
            return self.layers
        ch = self.layers[-1][0]
        return self.layers + ((ch, self.extra_stride, self.extra_stride),)

    @property
    def dim(self):
        return self.stack[-1][0]


@dataclass(eq=False)
class DenseFeatures:
    values: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ShapeError(f"dense features must be a non-empty T x D matrix, got {self.values.shape}")


@dataclass
class EncoderCache:
    inputs: list
    slopes: list  # activation derivative at each layer's pre-activation
    normed: np.ndarray | None = None
    inv_std: np.ndarray | None = None


_NORM_EPS = 1e-5
_NORM_AXIS = {"frame": 2, "time": 1}


def receptive_field(config: EncoderConfig):
    rf = 1
    for _, k, s in reversed(config.stack):
        rf = (rf - 1) * s + k
    return rf, rf / config.input_sample_rate * 1000.0


def total_stride(config: EncoderConfig) -> int:
    return int(np.prod([s for _, _, s in config.stack]))


def frame_rate(config: EncoderConfig) -> float:
    return config.input_sample_rate / total_stride(config)


def output_length(config: EncoderConfig, n_samples: int) -> int:
    t = n_samples
    for _, k, s in config.stack:
        t = (t - k) // s + 1
    return t


def init_encoder(config: EncoderConfig, rng) -> dict:
    params = {}
    cin = 1
    for i, (ch, k, _) in enumerate(config.stack):
        params[f"layers.{i}.weight"] = config.init_gain * L.uniform_init(rng, (ch, cin, k), cin * k)
        params[f"layers.{i}.bias"] = L.uniform_init(rng, (ch,), cin * k)
        cin = ch
    return params


def encoder_forward(x, params, config: EncoderConfig):
    """x: (B, n_samples) -> (z (B, T, D), cache)."""
    x = np.asarray(x, dtype=np.float64)
    rf, _ = receptive_field(config)
    if x.shape[-1] < rf:
        raise LengthError(f"input has {x.shape[-1]} samples; encoder needs at least {rf}", required=rf)
    h = x[:, :, None]
    cache = EncoderCache([], [])
    for i, (_, _, s) in enumerate(config.stack):
        cache.inputs.append(h)
        a = L.conv1d(h, params[f"layers.{i}.weight"], params[f"layers.{i}.bias"], stride=s)
        h, slope = L.activate_with_grad(config.activation, a)
        cache.slopes.append(slope)
    if config.output_norm != "none":
        axis = _NORM_AXIS[config.output_norm]
        centred = h - h.mean(axis=axis, keepdims=True)
        cache.inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=axis, keepdims=True) + _NORM_EPS)
        h = centred * cache.inv_std
        cache.normed = h
    return h, cache


def encode_forward(w: Waveform, params, config: EncoderConfig, return_cache=False):
    z, cache = encoder_forward(w.samples[None, :], params, config)
    feats = DenseFeatures(z[0], w.sample_rate / total_stride(config))
    return (feats, cache) if return_cache else feats


def encode_backward(upstream_grad, cache: EncoderCache, params, config: EncoderConfig):
    """Backpropagate dL/dz through the stack.

    Returns ``(grad_params, grad_input)`` where ``grad_input`` has the shape of
    the waveform batch that produced ``cache``.
    """
    g = np.asarray(upstream_grad, dtype=np.float64)
    single = g.ndim == 2
    if single:
        g = g[None]
    expected = cache.slopes[-1].shape
    if g.shape != expected:
        raise ShapeError(f"upstream gradient shape {g.shape} does not match encoder output {expected}")
    if cache.normed is not None:
        y = cache.normed
        axis = _NORM_AXIS[config.output_norm]
        g = cache.inv_std * (g - g.mean(axis=axis, keepdims=True) - y * (g * y).mean(axis=axis, keepdims=True))
    grads = {}
    for i in reversed(range(len(config.stack))):
        s = config.stack[i][2]
        g = g * cache.slopes[i]
        g, gw, gb = L.conv1d_backward(g, cache.inputs[i], params[f"layers.{i}.weight"], stride=s)
        grads[f"layers.{i}.weight"] = gw
        grads[f"layers.{i}.bias"] = gb
    grad_input = g[:, :, 0]
    return grads, (grad_input[0] if single else grad_input)
