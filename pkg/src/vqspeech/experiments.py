"""The objective comparison: vq-vae against vq-wav2vec on one synthetic corpus.

Both models start from the same encoder and codebook initialisation; that
untrained model is the shared baseline.  ``COMPARE_RECIPE`` holds the settings
common to all three, ``OBJECTIVE_OVERRIDES`` the per-objective ones.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

from . import trainer as T
from .config import ExperimentConfig
from .signal_io import synthesize_corpus

COMPARE_RECIPE = {
    "data.n_classes": 8,
    "data.n_utterances": 200,
    "train.updates": 500,
    "quantizer.init": "data",
    "quantizer.commitment": 0.0,
    "encoder.output_norm": "time",
}

# Contrastive training sees whole utterances so that most distractors come from
# other segments; the autoencoder keeps the short desk crop.
OBJECTIVE_OVERRIDES = {
    "vqvae": {"train.objective": "vqvae"},
    "vqwav2vec-kmeans": {"train.objective": "vqwav2vec-kmeans", "train.segment_length": 16000},
    "vqwav2vec-gumbel": {"train.objective": "vqwav2vec-gumbel", "train.segment_length": 16000},
}


@dataclass
class ComparisonRow:
    name: str
    abx_error: float
    purity: float
    perplexity: float
    final_task_loss: float
    seconds: float


def compare_config(objective: str, overrides=None) -> ExperimentConfig:
    return ExperimentConfig().with_overrides({**COMPARE_RECIPE, **OBJECTIVE_OVERRIDES[objective], **(overrides or {})})


def run_comparison(objectives=("vqvae", "vqwav2vec-kmeans"), overrides=None, log=None):
    """Train each objective and evaluate it next to the shared untrained model.

    Returns a list of :class:`ComparisonRow`, baseline first.
    """
    base = compare_config("vqwav2vec-kmeans", overrides)
    corpus = synthesize_corpus(base.data)
    eval_corpus = synthesize_corpus(T.eval_corpus_config(base))
    t0 = time.perf_counter()
    state = T.init_state(base, corpus)
    rep = T.evaluate(state.params, base, eval_corpus)
    rows = [ComparisonRow("baseline", rep.abx.error_rate, rep.purity, rep.perplexity, float("nan"), time.perf_counter() - t0)]
    if log:
        log(rows[-1])
    for objective in objectives:
        cfg = compare_config(objective, overrides)
        t0 = time.perf_counter()
        result = T.train(corpus, cfg)
        rep = T.evaluate(result.state.params, cfg, eval_corpus)
        rows.append(ComparisonRow(objective, rep.abx.error_rate, rep.purity, rep.perplexity,
                                  result.metrics[-1]["task_loss"], time.perf_counter() - t0))
        if log:
            log(rows[-1])
    return rows
