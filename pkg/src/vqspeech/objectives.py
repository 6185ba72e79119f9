"""Training objectives: autoregressive mu-law reconstruction and contrastive
future-frame prediction, each with a hand-written backward pass.

The reconstruction decoder is a small stack of dilated causal convolutions.
Its only audio input is the waveform delayed by one sample, so the logits for
sample t depend on samples < t.  Quantized latent frames are projected per
layer and repeated over the samples each frame covers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .errors import InputRangeError, LengthError, ShapeError
from .signal_io import mu_law_levels, mu_law_values

DESK_DECODER = ((32, 2, 1), (32, 2, 2), (32, 2, 4), (32, 2, 8), (32, 2, 16))
DESK_AGGREGATOR = ((64, 3, 1), (64, 3, 2), (64, 3, 4))


@dataclass(frozen=True)
class DecoderConfig:
    """Causal stack as (channels, kernel, dilation) triples.  ``init_gain``
    scales the hidden-layer weight bounds; the output layer is unaffected."""

    layers: tuple = DESK_DECODER
    condition_dim: int = 64
    use_speaker: bool = False
    n_speakers: int = 1
    output_levels: int = 256
    init_gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        for ch, k, d in self.layers:
            if ch < 1 or k < 1 or d < 1:
                raise ShapeError(f"invalid decoder layer {(ch, k, d)}")
        if self.n_speakers < 1:
            raise ShapeError("n_speakers must be >= 1")
        if not self.init_gain > 0:
            raise ShapeError("init_gain must be positive")


@dataclass(frozen=True)
class ContrastiveConfig:
    """``sampling`` is "utterance" (any other frame) or "window" (frames within
    ``max_step`` of the true target).  ``log_distractor=False`` scores
    distractors with sigma(-z.h) instead of ln sigma(-z.h).  ``init_gain``
    scales the aggregator and step-map weight bounds."""

    max_step: int = 4
    n_distractors: int = 10
    lam: float = 1.0
    aggregator: tuple = DESK_AGGREGATOR
    activation: str = "gelu"
    sampling: str = "utterance"
    log_distractor: bool = True
    target: str = "quantized"
    init_gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "aggregator", tuple(tuple(int(v) for v in l) for l in self.aggregator))
        if self.max_step < 1 or self.n_distractors < 1:
            raise ShapeError("max_step and n_distractors must be >= 1")
        if self.lam < 0:
            raise ShapeError("lam must be >= 0")
        if self.sampling not in ("utterance", "window"):
            raise ShapeError(f"unknown sampling {self.sampling!r}")
        if self.target not in ("quantized", "dense"):
            raise ShapeError(f"unknown target stream {self.target!r}")
        if not self.init_gain > 0:
            raise ShapeError("init_gain must be positive")


# ---------------------------------------------------------------------------
# reconstruction

def init_decoder(config: DecoderConfig, rng) -> dict:
    params = {}
    cin = 1
    for i, (ch, k, _) in enumerate(config.layers):
        params[f"layers.{i}.weight"] = config.init_gain * L.uniform_init(rng, (ch, cin, k), cin * k)
        params[f"layers.{i}.bias"] = np.zeros(ch)
        params[f"layers.{i}.cond"] = config.init_gain * L.uniform_init(rng, (ch, config.condition_dim), config.condition_dim)
        cin = ch
    if config.use_speaker:
        params["speaker"] = rng.normal(0.0, 0.1, size=(config.n_speakers, config.condition_dim))
    params["out.weight"] = L.uniform_init(rng, (config.output_levels, cin), cin)
    params["out.bias"] = np.zeros(config.output_levels)
    return params


def frame_index_map(n_samples, n_frames, stride, receptive_field):
    """Nearest latent frame for every sample; frame t is centred on its receptive field."""
    offset = (receptive_field - stride) // 2
    n = np.arange(n_samples)
    return np.clip((n - offset) // stride, 0, n_frames - 1)


def _batch_audio(audio):
    samples = getattr(audio, "samples", audio)
    a = np.asarray(samples, dtype=np.float64)
    return a[None] if a.ndim == 1 else a


def _batch_frames(cond):
    c = np.asarray(getattr(cond, "z_q", getattr(cond, "values", cond)), dtype=np.float64)
    return c[None] if c.ndim == 2 else c


def _speaker_rows(speakers, batch, config):
    if speakers is None:
        raise InputRangeError("decoder uses speaker conditioning but no speaker id was given")
    spk = np.broadcast_to(np.asarray(speakers, dtype=np.int64), (batch,))
    if np.any(spk < 0) or np.any(spk >= config.n_speakers):
        raise InputRangeError(f"speaker id out of range [0, {config.n_speakers - 1}]: {spk.tolist()}")
    return spk


@dataclass
class DecoderCache:
    inputs: list
    outputs: list
    cond: np.ndarray
    fmap: np.ndarray
    h_last: np.ndarray
    speakers: np.ndarray | None


def decoder_forward(audio, cond, params, config: DecoderConfig, stride, receptive_field, speakers=None):
    """Teacher-forced logits (B, n_samples, levels) for every sample of ``audio``."""
    x = _batch_audio(audio)
    c = _batch_frames(cond)
    B, n = x.shape
    if c.shape[0] != B or c.shape[2] != config.condition_dim:
        raise ShapeError(f"conditioning shape {c.shape} incompatible with batch {B} / condition_dim {config.condition_dim}")
    spk = None
    if config.use_speaker:
        spk = _speaker_rows(speakers, B, config)
        c = c + params["speaker"][spk][:, None, :]
    levels = config.output_levels
    prev = np.zeros_like(x)
    prev[:, 1:] = mu_law_values(mu_law_levels(x[:, :-1], levels), levels)
    fmap = frame_index_map(n, c.shape[1], stride, receptive_field)
    h = prev[:, :, None]
    cache = DecoderCache([], [], c, fmap, None, spk)
    for i, (ch, k, d) in enumerate(config.layers):
        cache.inputs.append(h)
        a = L.conv1d(h, params[f"layers.{i}.weight"], params[f"layers.{i}.bias"], dilation=d, left_pad=(k - 1) * d)
        proj = c @ params[f"layers.{i}.cond"].T  # (B, T, ch)
        a += proj[:, fmap, :]
        o = np.tanh(a)
        cache.outputs.append(o)
        h = o + h if h.shape[2] == ch else o
    cache.h_last = h
    logits = h @ params["out.weight"].T
    logits += params["out.bias"]
    return logits, cache


def decoder_backward(grad_logits, cache: DecoderCache, params, config: DecoderConfig):
    """Returns ``(grads, grad_cond)`` with ``grad_cond`` shaped like the frame conditioning."""
    grads = {}
    h = cache.h_last
    v = grad_logits.shape[2]
    g2 = grad_logits.reshape(-1, v)
    grads["out.weight"] = g2.T @ h.reshape(-1, h.shape[2])
    grads["out.bias"] = g2.sum(axis=0)
    dh = grad_logits @ params["out.weight"]
    c = cache.cond
    T = c.shape[1]
    starts = np.searchsorted(cache.fmap, np.arange(T))
    grad_c = np.zeros_like(c)
    for i in reversed(range(len(config.layers))):
        ch, k, d = config.layers[i]
        o = cache.outputs[i]
        hin = cache.inputs[i]
        da = dh * (1.0 - o * o)
        dh_in, gw, gb = L.conv1d_backward(da, hin, params[f"layers.{i}.weight"], dilation=d, left_pad=(k - 1) * d)
        grads[f"layers.{i}.weight"] = gw
        grads[f"layers.{i}.bias"] = gb
        gproj = np.add.reduceat(da, starts, axis=1)  # (B, T, ch)
        grads[f"layers.{i}.cond"] = np.einsum("btc,btd->cd", gproj, c, optimize=True)
        grad_c += gproj @ params[f"layers.{i}.cond"]
        dh = dh_in + dh if hin.shape[2] == ch else dh_in
    if config.use_speaker:
        gs = np.zeros_like(params["speaker"])
        np.add.at(gs, cache.speakers, grad_c.sum(axis=1))
        grads["speaker"] = gs
    return grads, grad_c


def reconstruction_loss(audio, z_q, params, config: DecoderConfig, stride, receptive_field, speakers=None):
    """Mean per-sample negative log-likelihood of the mu-law targets.

    ``audio`` is a Waveform or (B, n) array, ``z_q`` a QuantizationResult or
    (B, T, D) array of latent frames.  Returns ``(nll, grads, grad_z_q)``.
    """
    x = _batch_audio(audio)
    single = np.asarray(getattr(z_q, "z_q", z_q)).ndim == 2
    logits, cache = decoder_forward(x, z_q, params, config, stride, receptive_field, speakers)
    targets = mu_law_levels(x, config.output_levels)[:, :, None]
    B, n = x.shape
    logits -= logits.max(axis=2, keepdims=True)
    g = np.exp(logits)
    norm = g.sum(axis=2, keepdims=True)
    picked = np.take_along_axis(logits, targets, axis=2) - np.log(norm)
    nll = float(-picked.mean())
    g /= norm
    np.put_along_axis(g, targets, np.take_along_axis(g, targets, axis=2) - 1.0, axis=2)
    g /= B * n
    grads, grad_c = decoder_backward(g, cache, params, config)
    return nll, grads, (grad_c[0] if single else grad_c)


# ---------------------------------------------------------------------------
# context network and contrastive prediction

def init_context(config: ContrastiveConfig, dim, rng) -> dict:
    """Aggregator layers plus one affine map per prediction step."""
    params = {}
    cin = dim
    for i, (ch, k, _) in enumerate(config.aggregator):
        params[f"layers.{i}.weight"] = config.init_gain * L.uniform_init(rng, (ch, cin, k), cin * k)
        params[f"layers.{i}.bias"] = np.zeros(ch)
        cin = ch
    params["steps.weight"] = config.init_gain * L.uniform_init(rng, (config.max_step, dim, cin), cin)
    params["steps.bias"] = np.zeros((config.max_step, dim))
    return params


@dataclass
class ContextCache:
    inputs: list
    slopes: list


def aggregate_context(z, params, config: ContrastiveConfig):
    """Causal, length-preserving conv stack (B, T, D) -> (B, T, C).

    The activation follows every layer but the last.  Returns ``(c, cache)``.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 2
    h = z[None] if single else z
    cache = ContextCache([], [])
    n = len(config.aggregator)
    for i, (_, k, d) in enumerate(config.aggregator):
        cache.inputs.append(h)
        a = L.conv1d(h, params[f"layers.{i}.weight"], params[f"layers.{i}.bias"], dilation=d, left_pad=(k - 1) * d)
        if i < n - 1:
            h, slope = L.activate_with_grad(config.activation, a)
            cache.slopes.append(slope)
        else:
            h = a
    return (h[0] if single else h), cache


def aggregate_backward(grad_c, cache: ContextCache, params, config: ContrastiveConfig):
    g = np.asarray(grad_c, dtype=np.float64)
    single = g.ndim == 2
    g = g[None] if single else g
    grads = {}
    n = len(config.aggregator)
    for i in reversed(range(n)):
        _, k, d = config.aggregator[i]
        if i < n - 1:
            g = g * cache.slopes[i]
        g, gw, gb = L.conv1d_backward(g, cache.inputs[i], params[f"layers.{i}.weight"], dilation=d, left_pad=(k - 1) * d)
        grads[f"layers.{i}.weight"] = gw
        grads[f"layers.{i}.bias"] = gb
    return grads, (g[0] if single else g)


def sample_distractors(batch, T, step, n, rng, sampling="utterance", window=None):
    """Indices (batch, T - step, n) of distractor frames, never the true target."""
    targets = np.arange(step, T)[None, :, None]
    if sampling == "utterance":
        r = rng.integers(0, T - 1, size=(batch, T - step, n))
        return r + (r >= targets)
    lo = np.maximum(targets - window, 0)
    hi = np.minimum(targets + window, T - 1)
    width = hi - lo  # candidates excluding the target itself
    r = lo + np.floor(rng.random((batch, T - step, n)) * width).astype(np.int64)
    return r + (r >= targets)


@dataclass
class ContrastiveGrads:
    z: np.ndarray
    c: np.ndarray
    steps: dict


def contrastive_loss(z, c, steps, config: ContrastiveConfig, seed=0, distractors=None):
    """Negative-sampling loss for predicting frame i+k from context c_i.

    ``z`` holds the target frames (B, T, D) and ``c`` the context (B, T, C);
    2-D inputs are treated as a single sequence.  ``steps`` carries
    ``steps.weight`` (K, D, C) and ``steps.bias`` (K, D).  ``distractors`` may
    override sampling with a list (one per step) of (B, T-k, n) index arrays.
    The loss is averaged over every (sequence, i, k) term.
    Returns ``(loss, ContrastiveGrads)``; gradients reach distractor frames too.
    """
    z = np.asarray(z, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z, c = z[None], c[None]
    B, T, D = z.shape
    K = config.max_step
    if T <= K:
        raise LengthError(f"sequence of {T} frames is too short for prediction horizon {K}", required=K + 1)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    W, b = steps["steps.weight"], steps["steps.bias"]
    n_terms = B * sum(T - k for k in range(1, K + 1))
    lam = config.lam
    total = 0.0
    gz = np.zeros_like(z)
    gc = np.zeros_like(c)
    gW = np.zeros_like(W)
    gb = np.zeros_like(b)
    bidx = np.arange(B)[:, None, None]
    for k in range(1, K + 1):
        ctx = c[:, :T - k]
        pred = ctx @ W[k - 1].T + b[k - 1]  # (B, T-k, D)
        pos_z = z[:, k:]
        pos = np.sum(pos_z * pred, axis=-1)
        if distractors is not None:
            idx = np.asarray(distractors[k - 1])
        else:
            idx = sample_distractors(B, T, k, config.n_distractors, rng, config.sampling, K)
        n = idx.shape[-1]
        neg_z = z[bidx, idx]  # (B, T-k, n, D)
        neg = np.einsum("bind,bid->bin", neg_z, pred)
        if config.log_distractor:
            total -= np.sum(L.log_sigmoid(pos)) + lam * np.sum(L.log_sigmoid(-neg)) / n
            dneg = (lam / n) * L.sigmoid(neg) / n_terms
        else:
            s = L.sigmoid(-neg)
            total -= np.sum(L.log_sigmoid(pos)) + lam * np.sum(s) / n
            dneg = (lam / n) * s * (1.0 - s) / n_terms
        dpos = -L.sigmoid(-pos) / n_terms
        gpred = dpos[..., None] * pos_z + np.einsum("bin,bind->bid", dneg, neg_z)
        gz[:, k:] += dpos[..., None] * pred
        np.add.at(gz, (np.broadcast_to(bidx, idx.shape), idx), dneg[..., None] * pred[:, :, None, :])
        gW[k - 1] = np.einsum("bid,bic->dc", gpred, ctx)
        gb[k - 1] = gpred.sum(axis=(0, 1))
        gc[:, :T - k] += gpred @ W[k - 1]
    loss = float(total / n_terms)
    grads = ContrastiveGrads(gz[0] if single else gz, gc[0] if single else gc, {"steps.weight": gW, "steps.bias": gb})
    return loss, grads
