"""Grouped vector quantization with a shared codebook.

A D-dimensional dense vector is split into G contiguous slices of size D/G and
every slice is replaced by one of K codewords.  All groups draw from the same
K x (D/G) matrix, so the codebook can express K**G composite vectors while
storing only K * D/G numbers.

Indices are 0-based throughout.  Two selection schemes are provided:

* nearest codeword (k-means), trained with a stop-gradient distance loss and a
  straight-through copy of the downstream gradient;
* Gumbel-Softmax over a per-group linear projection of the slice, emitting the
  hard argmax codeword forward and differentiating the soft mixture backward.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import FormatError, ShapeError, StateError


@dataclass(eq=False)
class Codebook:
    entries: np.ndarray
    groups: int
    dim: int

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.groups < 1 or self.dim % self.groups:
            raise ShapeError(f"dim {self.dim} is not divisible by groups {self.groups}")
        if self.entries.ndim != 2 or self.entries.shape[1] != self.dim // self.groups:
            raise ShapeError(f"entries must be K x {self.dim // self.groups}, got {self.entries.shape}")
        if not np.all(np.isfinite(self.entries)):
            raise ShapeError("codebook entries must be finite")

    @property
    def K(self):
        return self.entries.shape[0]

    @property
    def sub_dim(self):
        return self.dim // self.groups

    @property
    def n_params(self):
        return self.entries.size

    @classmethod
    def init(cls, K, groups, dim, rng):
        sub = dim // groups if groups and dim % groups == 0 else None
        if sub is None:
            raise ShapeError(f"dim {dim} is not divisible by groups {groups}")
        a = 1.0 / math.sqrt(sub)
        return cls(rng.uniform(-a, a, size=(K, sub)), groups, dim)

    def composite(self, indices):
        """Assemble the D-dimensional vector(s) for G-tuples of indices."""
        indices = np.asarray(indices)
        return self.entries[indices].reshape(*indices.shape[:-1], self.dim)


@dataclass(eq=False)
class QuantizationResult:
    z_q: np.ndarray
    indices: np.ndarray
    selection_counts: np.ndarray
    probs: np.ndarray | None = None
    temperature: float | None = None
    group_inputs: np.ndarray | None = None


@dataclass(frozen=True)
class KMeansConfig:
    """``beta`` weights the codebook term; ``commitment`` weights the term that
    pulls encoder outputs towards their codewords."""

    beta: float = 0.25
    commitment: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.commitment < 0:
            raise ValueError("beta and commitment must be >= 0")


@dataclass(frozen=True)
class GumbelConfig:
    temperature: float = 2.0
    hard: bool = True
    noise_scale: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.noise_scale <= 1.0:
            raise ValueError("noise_scale must lie in [0, 1]")


def temperature_at(update, start=2.0, end=0.5, decay=0.999995):
    return max(end, start * decay**update)


def group_reshape(z, groups):
    z = np.asarray(z)
    D = z.shape[-1]
    if D % groups:
        raise ShapeError(f"dimension {D} is not divisible by {groups} groups")
    return z.reshape(*z.shape[:-1], groups, D // groups)


def group_flatten(zg):
    return zg.reshape(*zg.shape[:-2], zg.shape[-2] * zg.shape[-1])


def _values(z_e):
    return np.asarray(getattr(z_e, "values", z_e), dtype=np.float64)


def _grouped_rows(z_e, cb: Codebook):
    z = _values(z_e)
    if z.shape[-1] != cb.dim:
        raise ShapeError(f"feature dimension {z.shape[-1]} does not match codebook dimension {cb.dim}")
    lead = z.shape[:-1]
    return group_reshape(z.reshape(-1, cb.dim), cb.groups), lead


def squared_distances(zg, entries, chunk=256):
    """(N, G, d) x (K, d) -> (N, G, K) squared distances, computed from explicit differences."""
    n = zg.shape[0]
    out = np.empty((n, zg.shape[1], entries.shape[0]))
    for s in range(0, n, chunk):
        diff = zg[s:s + chunk, :, None, :] - entries[None, None, :, :]
        out[s:s + chunk] = np.einsum("ngkd,ngkd->ngk", diff, diff)
    return out


def _counts(idx, groups, K):
    flat = idx.reshape(-1, groups)
    return np.stack([np.bincount(flat[:, g], minlength=K) for g in range(groups)])


def kmeans_select(z_e, cb: Codebook) -> QuantizationResult:
    zg, lead = _grouped_rows(z_e, cb)
    idx = np.argmin(squared_distances(zg, cb.entries), axis=-1)
    z_q = cb.entries[idx].reshape(*lead, cb.dim)
    return QuantizationResult(z_q, idx.reshape(*lead, cb.groups), _counts(idx, cb.groups, cb.K))


def kmeans_loss_and_grads(z_e, cb: Codebook, config: KMeansConfig = KMeansConfig(), result=None):
    """Stop-gradient distance loss, averaged over frames and groups.

    ``loss = mean commitment * ||z_e - sg(z_q)||^2 + beta * ||sg(z_e) - z_q||^2``
    with ``commitment=1`` by default.  The first term moves the encoder output,
    the second moves the selected codewords.
    Returns ``(loss, grad_z_e, grad_entries)``; ``grad_z_e`` has the shape of
    ``z_e``.
    """
    zg, lead = _grouped_rows(z_e, cb)
    if result is None:
        result = kmeans_select(z_e, cb)
    idx = result.indices.reshape(-1, cb.groups)
    zq = cb.entries[idx]
    diff = zg - zq
    m = diff.shape[0] * diff.shape[1]
    sq = float(np.sum(diff * diff))
    loss = (config.commitment + config.beta) * sq / m
    grad_z = (2.0 * config.commitment / m) * diff
    grad_entries = np.zeros_like(cb.entries)
    np.add.at(grad_entries, idx.reshape(-1), (-2.0 * config.beta / m) * diff.reshape(-1, cb.sub_dim))
    return loss, grad_z.reshape(*lead, cb.dim), grad_entries


def init_projection(cb: Codebook, rng) -> dict:
    d = cb.sub_dim
    return {
        "weight": L.uniform_init(rng, (cb.groups, cb.K, d), d),
        "bias": np.zeros((cb.groups, cb.K)),
    }


def gumbel_logits(zg, projection):
    return np.einsum("ngd,gkd->ngk", zg, projection["weight"]) + projection["bias"][None]


def gumbel_select(z_e, cb: Codebook, projection, config: GumbelConfig = GumbelConfig(), seed=0) -> QuantizationResult:
    """Gumbel-Softmax selection.  ``seed`` may be an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    zg, lead = _grouped_rows(z_e, cb)
    logits = gumbel_logits(zg, projection)
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=logits.shape)
    noise = -np.log(-np.log(u)) * config.noise_scale
    probs = L.softmax((logits + noise) / config.temperature)
    idx = np.argmax(probs, axis=-1)
    if config.hard:
        zq = cb.entries[idx]
    else:
        zq = np.einsum("ngk,kd->ngd", probs, cb.entries)
    G, K = cb.groups, cb.K
    return QuantizationResult(
        zq.reshape(*lead, cb.dim),
        idx.reshape(*lead, G),
        _counts(idx, G, K),
        probs=probs.reshape(*lead, G, K),
        temperature=config.temperature,
        group_inputs=zg,
    )


@dataclass
class GumbelGrads:
    logits: np.ndarray
    entries: np.ndarray
    projection: dict
    z_e: np.ndarray


def gumbel_backward(grad_z_q, result: QuantizationResult, cb: Codebook, projection, grad_probs=None) -> GumbelGrads:
    """Backward pass through the soft mixture ``sum_k p_k * entries[k]``.

    ``grad_probs`` adds a direct gradient on the stored probabilities (used by
    the diversity penalty).
    """
    if result.probs is None or result.group_inputs is None:
        raise StateError("gumbel_backward needs the probabilities saved by gumbel_select")
    G, K = cb.groups, cb.K
    p = result.probs.reshape(-1, G, K)
    zg = result.group_inputs
    g = group_reshape(np.asarray(grad_z_q, dtype=np.float64).reshape(-1, cb.dim), G)
    gp = np.einsum("ngd,kd->ngk", g, cb.entries)
    if grad_probs is not None:
        gp = gp + np.asarray(grad_probs).reshape(-1, G, K)
    gs = p * (gp - np.sum(p * gp, axis=-1, keepdims=True))
    gl = gs / result.temperature
    grad_entries = np.einsum("ngk,ngd->kd", p, g)
    grad_w = np.einsum("ngk,ngd->gkd", gl, zg)
    grad_b = gl.sum(axis=0)
    grad_x = np.einsum("ngk,gkd->ngd", gl, projection["weight"])
    lead = result.indices.shape[:-1]
    return GumbelGrads(
        gl.reshape(*lead, G, K),
        grad_entries,
        {"weight": grad_w, "bias": grad_b},
        group_flatten(grad_x).reshape(*lead, cb.dim),
    )


def average_probs(result: QuantizationResult) -> np.ndarray:
    """(G, K) batch-average selection probabilities from a Gumbel result."""
    G, K = result.selection_counts.shape
    return result.probs.reshape(-1, G, K).mean(axis=0)


def empirical_probs(result: QuantizationResult) -> np.ndarray:
    """(G, K) selection frequencies; the k-means stand-in for average probabilities."""
    c = result.selection_counts.astype(np.float64)
    return c / c.sum(axis=1, keepdims=True)


def diversity_penalty(avg_probs, eps=1e-10):
    """Negative entropy of the batch-average selection distribution, scaled by 1/(G*K).

    Minimized when every group uses its codewords uniformly.  Entries at or
    below zero are clamped to ``eps``; the number clamped is reported through
    :mod:`warnings`.  Returns ``(loss, grad)``.
    """
    p = np.asarray(avg_probs, dtype=np.float64)
    G, K = p.shape
    n_clamped = int(np.sum(p <= 0))
    if n_clamped:
        warnings.warn(f"diversity_penalty: clamped {n_clamped} non-positive probabilities to {eps}", RuntimeWarning, stacklevel=2)
        p = np.where(p <= 0, eps, p)
    logp = np.log(p)
    scale = 1.0 / (G * K)
    return float(scale * np.sum(p * logp)), scale * (logp + 1.0)


@dataclass
class UsageStats:
    entropy: np.ndarray
    perplexity: np.ndarray
    dead_codewords: np.ndarray


def codebook_usage_stats(results) -> UsageStats:
    if isinstance(results, QuantizationResult):
        results = [results]
    counts = sum(r.selection_counts for r in results).astype(np.float64)
    if counts.sum() == 0:
        raise ShapeError("usage statistics need at least one frame")
    p = counts / counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)
    return UsageStats(ent, np.exp(ent), np.sum(counts == 0, axis=1))


# ---------------------------------------------------------------------------
# discrete-feature dumps

def write_codes(path, indices, K, frame_rate, header=None):
    indices = np.asarray(indices)
    rate = float(frame_rate)
    rate_s = str(int(rate)) if rate.is_integer() else repr(rate)
    lines = [] if header is None else [header]
    lines.append(f"K={K} G={indices.shape[1]} frame_rate={rate_s}")
    lines.extend(" ".join(str(int(v)) for v in row) for row in indices)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_codes(path):
    """Returns ``(indices (T, G), K, frame_rate)``."""
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip() and not l.startswith("#")]
    if not lines:
        raise FormatError("header", f"{path}: empty file")
    try:
        meta = dict(tok.split("=", 1) for tok in lines[0].split())
        K, G, rate = int(meta["K"]), int(meta["G"]), float(meta["frame_rate"])
    except (ValueError, KeyError) as exc:
        raise FormatError("header", f"{path}: expected 'K=<K> G=<G> frame_rate=<Hz>'") from exc
    try:
        rows = np.array([[int(v) for v in l.split()] for l in lines[1:]], dtype=np.int64).reshape(-1, G)
    except ValueError as exc:
        raise FormatError("indices", f"{path}: expected {G} integers per row") from exc
    if rows.size and (rows.min() < 0 or rows.max() >= K):
        raise FormatError("indices", f"{path}: index outside [0, {K - 1}]")
    return rows, K, rate
