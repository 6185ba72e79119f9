"""Training loop, learning-rate schedules, optimizers, checkpoints, feature
extraction and the codebook sweep.

Parameters live in one flat ``dict[str, ndarray]`` keyed by component prefix
(``encoder.``, ``codebook.``, ``gumbel.``, ``context.``, ``decoder.``).
Every source of randomness is derived from ``(seed, purpose, update)``, so a
run is reproducible from its checkpoint without saving generator state.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, provenance_header
from .encoder import encode_backward, encoder_forward, frame_rate, init_encoder, receptive_field, total_stride
from .errors import ConfigError, FormatError, PathError, TrainingDiverged
from .evaluation import abx_evaluate, code_symbols, cooccurrence, purity, segments_from_frames
from .objectives import (
    aggregate_backward,
    aggregate_context,
    contrastive_loss,
    init_context,
    init_decoder,
    reconstruction_loss,
)
from .quantizer import (
    Codebook,
    GumbelConfig,
    KMeansConfig,
    average_probs,
    codebook_usage_stats,
    diversity_penalty,
    empirical_probs,
    gumbel_backward,
    gumbel_select,
    init_projection,
    kmeans_loss_and_grads,
    kmeans_select,
    temperature_at,
)
from .signal_io import Corpus, labels_for_frames

METRIC_COLUMNS = ("update", "lr", "task_loss", "quant_loss", "diversity", "perplexity")

# stream identifiers mixed into the seed
_INIT_ENCODER, _INIT_CODEBOOK, _INIT_GUMBEL, _INIT_DECODER, _INIT_CONTEXT = 1, 2, 3, 4, 5
_BATCH_STREAM = 101


def lr_at(update, spec, total):
    warm = spec.warmup_updates if spec.kind == "warmup-then-cosine" else 0
    if update < warm:
        return spec.lr_init + (spec.lr_peak - spec.lr_init) * update / warm
    span = total - warm
    progress = (update - warm) / span if span > 0 else 1.0
    return spec.lr_final + (spec.lr_peak - spec.lr_final) * (1.0 + math.cos(math.pi * progress)) / 2.0


# ---------------------------------------------------------------------------
# optimizers

class SGD:
    name = "sgd"

    def __init__(self, state=None):
        self.state = dict(state or {})

    def step(self, params, grads, lr, lr_scales=None):
        scales = lr_scales or {}
        for k, g in grads.items():
            params[k] -= lr * scales.get(k, 1.0) * g


class Adam:
    name = "adam"

    def __init__(self, state=None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.state = dict(state or {})
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grads, lr, lr_scales=None):
        scales = lr_scales or {}
        t = float(self.state.get("t", np.zeros(()))) + 1.0
        self.state["t"] = np.array(t)
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            m = self.state.get(f"m.{k}")
            v = self.state.get(f"v.{k}")
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.state[f"m.{k}"], self.state[f"v.{k}"] = m, v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            params[k] -= lr * scales.get(k, 1.0) * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(name, state=None):
    return {"adam": Adam, "sgd": SGD}[name](state)


# ---------------------------------------------------------------------------
# model state

@dataclass
class TrainState:
    config: ExperimentConfig
    params: dict
    opt_state: dict = field(default_factory=dict)
    update: int = 0

    @property
    def seed(self):
        return self.config.train.seed


def scheme(config: ExperimentConfig) -> str:
    return "gumbel" if config.train.objective == "vqwav2vec-gumbel" else "kmeans"


def init_params(config: ExperimentConfig) -> dict:
    """Encoder and codebook initialisation depends only on the seed and their
    own settings, so models trained with different objectives share it."""
    seed = config.train.seed
    q = config.quantizer
    params = {f"encoder.{k}": v for k, v in init_encoder(config.encoder, np.random.default_rng([seed, _INIT_ENCODER])).items()}
    cb = Codebook.init(q.K, q.G, config.encoder.dim, np.random.default_rng([seed, _INIT_CODEBOOK]))
    params["codebook.entries"] = cb.entries
    if scheme(config) == "gumbel":
        proj = init_projection(cb, np.random.default_rng([seed, _INIT_GUMBEL]))
        params.update({f"gumbel.{k}": v for k, v in proj.items()})
    if config.train.objective == "vqvae":
        dec = init_decoder(config.decoder, np.random.default_rng([seed, _INIT_DECODER]))
        params.update({f"decoder.{k}": v for k, v in dec.items()})
    else:
        ctx = init_context(config.contrastive, config.encoder.dim, np.random.default_rng([seed, _INIT_CONTEXT]))
        params.update({f"context.{k}": v for k, v in ctx.items()})
    return params


def init_codebook_from_data(params, config: ExperimentConfig, corpus: Corpus) -> None:
    """Replace the codewords with group slices of encoder outputs on whole
    utterances, so codewords start at the scale of the features they quantize.
    Only the seed, the encoder and the corpus matter, not the batch settings."""
    rng = np.random.default_rng([config.train.seed, _INIT_CODEBOOK, 1])
    n = len(corpus)
    picks = rng.choice(n, size=min(n, 8), replace=False)
    sub = config.encoder.dim // config.quantizer.G
    rows = []
    for i in sorted(picks):
        z_e, _ = encoder_forward(corpus.waveforms[i].samples[None, :], _sub(params, "encoder"), config.encoder)
        rows.append(z_e.reshape(-1, sub))
    rows = np.concatenate(rows)
    K = config.quantizer.K
    pick = rng.choice(rows.shape[0], size=K, replace=rows.shape[0] < K)
    params["codebook.entries"] = rows[pick].copy()


def init_state(config: ExperimentConfig, corpus: Corpus | None = None) -> TrainState:
    """Fresh parameters.  ``quantizer.init="data"`` needs ``corpus``."""
    params = init_params(config)
    if config.quantizer.init == "data":
        if corpus is None:
            raise ConfigError("quantizer.init=data needs a training corpus")
        init_codebook_from_data(params, config, corpus)
    return TrainState(config, params)


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _prefixed(prefix, grads):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def codebook_of(params, config) -> Codebook:
    return Codebook(params["codebook.entries"], config.quantizer.G, config.encoder.dim)


# ---------------------------------------------------------------------------
# one update

def loss_and_grads(params, config: ExperimentConfig, audio, speakers, rng, update):
    """Forward and backward pass for one batch.  Returns ``(metrics, grads)``."""
    q = config.quantizer
    enc_p = _sub(params, "encoder")
    z_e, enc_cache = encoder_forward(audio, enc_p, config.encoder)
    cb = codebook_of(params, config)
    grads = {}
    quant_loss = 0.0
    if scheme(config) == "kmeans":
        res = kmeans_select(z_e, cb)
        quant_loss, g_ze_q, g_entries = kmeans_loss_and_grads(z_e, cb, KMeansConfig(q.beta, q.commitment), res)
        diversity = diversity_penalty(np.maximum(empirical_probs(res), 1e-10))[0]
    else:
        proj = _sub(params, "gumbel")
        tau = temperature_at(update, q.tau_start, q.tau_end, q.tau_decay)
        res = gumbel_select(z_e, cb, proj, GumbelConfig(tau, q.hard, q.noise_scale), rng)
        diversity, g_div = diversity_penalty(average_probs(res))
    z_q = res.z_q

    if config.train.objective == "vqvae":
        stride = total_stride(config.encoder)
        rf, _ = receptive_field(config.encoder)
        task, dec_g, g_zq = reconstruction_loss(audio, z_q, _sub(params, "decoder"), config.decoder, stride, rf, speakers)
        grads.update(_prefixed("decoder", dec_g))
        g_ze_extra = 0.0
    else:
        ctx_p = _sub(params, "context")
        c, c_cache = aggregate_context(z_q, ctx_p, config.contrastive)
        dense_targets = config.contrastive.target == "dense"
        task, cg = contrastive_loss(z_e if dense_targets else z_q, c, ctx_p, config.contrastive, rng)
        agg_g, g_zq = aggregate_backward(cg.c, c_cache, ctx_p, config.contrastive)
        agg_g.update(cg.steps)
        grads.update(_prefixed("context", agg_g))
        if dense_targets:
            g_ze_extra = cg.z
        else:
            g_zq = g_zq + cg.z
            g_ze_extra = 0.0

    if scheme(config) == "kmeans":
        # straight-through: the task gradient at z_q is copied onto z_e
        g_ze = g_zq + g_ze_q + g_ze_extra
        grads["codebook.entries"] = g_entries
    else:
        n_rows = res.probs.reshape(-1, q.G, q.K).shape[0]
        w = config.train.diversity_weight
        grad_probs = np.broadcast_to(w * g_div / n_rows, res.probs.shape) if w > 0 else None
        gg = gumbel_backward(g_zq, res, cb, _sub(params, "gumbel"), grad_probs)
        g_ze = gg.z_e + g_ze_extra
        grads["codebook.entries"] = gg.entries
        grads.update(_prefixed("gumbel", gg.projection))
    enc_g, _ = encode_backward(g_ze, enc_cache, enc_p, config.encoder)
    grads.update(_prefixed("encoder", enc_g))

    usage = codebook_usage_stats(res)
    metrics = {
        "task_loss": float(task),
        "quant_loss": float(quant_loss),
        "diversity": float(diversity),
        "perplexity": float(np.mean(usage.perplexity)),
    }
    return metrics, grads


def sample_batch(corpus: Corpus, config: ExperimentConfig, rng):
    tc = config.train
    n = len(corpus)
    pick = rng.choice(n, size=tc.batch_size, replace=n < tc.batch_size)
    seg = tc.segment_length
    audio = np.empty((tc.batch_size, seg))
    for row, i in enumerate(pick):
        w = corpus.waveforms[i].samples
        if w.size < seg:
            raise ConfigError(f"utterance {corpus.names[i]} has {w.size} samples, shorter than train.segment_length={seg}")
        start = int(rng.integers(0, w.size - seg + 1))
        audio[row] = w[start:start + seg]
    speakers = None
    if config.decoder.use_speaker and config.train.objective == "vqvae":
        speakers = np.array([corpus.speakers[i] if corpus.speakers[i] is not None else -1 for i in pick])
    return audio, speakers


def _clip(grads, max_norm):
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}
    return grads


def train_step(state: TrainState, corpus: Corpus) -> dict:
    """Apply one update in place and return its metrics row."""
    config = state.config
    u = state.update
    rng = np.random.default_rng([config.train.seed, _BATCH_STREAM, u])
    audio, speakers = sample_batch(corpus, config, rng)
    metrics, grads = loss_and_grads(state.params, config, audio, speakers, rng, u)
    total = metrics["task_loss"] + metrics["quant_loss"]
    if not math.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(u, state)
    lr = lr_at(u, config.schedule, config.train.updates)
    opt = make_optimizer(config.train.optimizer, state.opt_state)
    opt.step(state.params, _clip(grads, config.train.grad_clip), lr, {"codebook.entries": config.train.codebook_lr_scale})
    state.opt_state = opt.state
    state.update = u + 1
    return {"update": u, "lr": lr, **metrics}


@dataclass
class TrainResult:
    state: TrainState
    metrics: list


def train(corpus: Corpus, config: ExperimentConfig, state: TrainState | None = None, log_path=None, checkpoint_path=None):
    """Run updates until ``config.train.updates``.

    On a non-finite loss the last finite state is written to ``checkpoint_path``
    (when given) and :class:`TrainingDiverged` is re-raised.
    """
    state = state or init_state(config, corpus)
    rows = []
    try:
        while state.update < config.train.updates:
            rows.append(train_step(state, corpus))
    except TrainingDiverged:
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, state)
        if log_path is not None:
            write_metrics(log_path, rows, provenance_header(config))
        raise
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, state)
    if log_path is not None:
        write_metrics(log_path, rows, provenance_header(config))
    return TrainResult(state, rows)


def write_metrics(path, rows, header=None):
    lines = [] if header is None else [header]
    lines.append(",".join(METRIC_COLUMNS))
    for r in rows:
        lines.append(",".join(str(r["update"]) if c == "update" else repr(float(r[c])) for c in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"VQSPCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: TrainState) -> None:
    """Single file: magic, uint32 version, uint64 manifest length, JSON manifest,
    then little-endian float64 tensors in manifest order."""
    tensors = [(f"param.{k}", v) for k, v in sorted(state.params.items())]
    tensors += [(f"opt.{k}", np.asarray(v)) for k, v in sorted(state.opt_state.items())]
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "<f8", "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "tool": f"vqspeech {__version__}",
        "config_hash": state.config.config_hash(),
        "seed": state.seed,
        "update": state.update,
        "optimizer": state.config.train.optimizer,
        "config": state.config.to_text(),
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def read_checkpoint_manifest(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise PathError(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError("magic", f"{path} is not a checkpoint")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise FormatError("version", f"unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(n).decode("utf-8"))
    manifest["_data_offset"] = len(CHECKPOINT_MAGIC) + 12 + n
    return manifest


def load_checkpoint(path) -> TrainState:
    manifest = read_checkpoint_manifest(path)
    raw = Path(path).read_bytes()[manifest["_data_offset"]:]
    params, opt = {}, {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype="<f8", count=int(np.prod(e["shape"], dtype=np.int64)), offset=e["offset"])
        arr = arr.reshape(e["shape"]).astype(np.float64)
        kind, _, name = e["name"].partition(".")
        (params if kind == "param" else opt)[name] = arr
    config = ExperimentConfig.from_text(manifest["config"])
    return TrainState(config, params, opt, int(manifest["update"]))


# ---------------------------------------------------------------------------
# inference and evaluation

def extract(params, config: ExperimentConfig, waveform):
    """Deterministic discrete features for one waveform (Gumbel uses raw-logit argmax)."""
    z_e, _ = encoder_forward(waveform.samples[None, :], _sub(params, "encoder"), config.encoder)
    z_e = z_e[0]
    cb = codebook_of(params, config)
    if scheme(config) == "gumbel":
        return gumbel_select(z_e, cb, _sub(params, "gumbel"), GumbelConfig(1.0, True, 0.0), 0)
    return kmeans_select(z_e, cb)


@dataclass
class EvalReport:
    abx: object
    purity: float
    perplexity: float
    cooccurrence: object


def frame_segments(params, config, corpus: Corpus):
    """Quantize every aligned utterance; returns (segments, (code, label) pairs, results)."""
    stride = total_stride(config.encoder)
    rf, _ = receptive_field(config.encoder)
    segments, pairs, results = [], [], []
    for u, (w, a) in enumerate(zip(corpus.waveforms, corpus.alignments)):
        if a is None:
            continue
        res = extract(params, config, w)
        labels = labels_for_frames(a, res.indices.shape[0], w.sample_rate, stride, rf)
        spk = corpus.speakers[u] if corpus.speakers[u] is not None else 0
        segments.extend(segments_from_frames(res.z_q, labels, u, spk))
        pairs.extend(zip(code_symbols(res.indices, config.eval.per_group_codes), labels.tolist()))
        results.append(res)
    return segments, pairs, results


def evaluate(params, config: ExperimentConfig, corpus: Corpus, mode=None, n_triplets=None, seed=None) -> EvalReport:
    segments, pairs, results = frame_segments(params, config, corpus)
    abx = abx_evaluate(
        segments,
        n_triplets or config.eval.n_triplets,
        config.train.seed if seed is None else seed,
        mode or config.eval.mode,
    )
    m = cooccurrence(pairs, n_phonemes=config.data.n_classes)
    usage = codebook_usage_stats(results)
    return EvalReport(abx, purity(m), float(np.mean(usage.perplexity)), m)


def eval_corpus_config(config: ExperimentConfig):
    return replace(config.data, n_utterances=config.eval.n_utterances, seed=config.data.seed + config.eval.seed_offset)


# ---------------------------------------------------------------------------
# codebook sweep

SWEEP_COLUMNS = ("objective", "K", "G", "updates", "task_loss", "quant_loss", "perplexity", "abx_error", "purity")


def _sweep_one(args):
    base, K, G, corpus, eval_corpus = args
    cfg = base.with_overrides({"quantizer.K": K, "quantizer.G": G})
    result = train(corpus, cfg)
    last = result.metrics[-1]
    rep = evaluate(result.state.params, cfg, eval_corpus)
    return {
        "objective": cfg.train.objective,
        "K": K,
        "G": G,
        "updates": cfg.train.updates,
        "task_loss": last["task_loss"],
        "quant_loss": last["quant_loss"],
        "perplexity": rep.perplexity,
        "abx_error": rep.abx.error_rate,
        "purity": rep.purity,
    }


def sweep_codebooks(base: ExperimentConfig, codebooks, corpus: Corpus, eval_corpus: Corpus, workers=1):
    """Train and evaluate one model per (K, G); rows keep the input order."""
    for K, G in codebooks:
        if K < 1 or G < 1 or base.encoder.dim % G:
            raise ConfigError(f"codebook {K}x{G} is invalid for encoder dim {base.encoder.dim}")
    jobs = [(base, K, G, corpus, eval_corpus) for K, G in codebooks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_one, jobs))
    return [_sweep_one(j) for j in jobs]


def write_table(path, rows, header=None, columns=SWEEP_COLUMNS):
    lines = [] if header is None else [header]
    lines.append(",".join(columns))
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def latent_frame_rate(config: ExperimentConfig) -> float:
    return frame_rate(config.encoder)
