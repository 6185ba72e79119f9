"""Sampled-triplet machine ABX over sequence-averaged features, latent/phoneme
co-occurrence statistics, and CSV report writers.

ABX here draws random (A, B, X) triplets rather than enumerating all of them,
so absolute error rates are not comparable to the official challenge scorer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, LengthError

MODES = ("pooled", "within-speaker", "across-speaker")


@dataclass(eq=False)
class Segment:
    features: np.ndarray
    phoneme_class: int
    utterance_id: int = 0
    speaker_id: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[None, :]


def pool_segment(s: Segment) -> np.ndarray:
    if s.features.shape[0] < 1:
        raise LengthError("cannot pool an empty segment", required=1)
    return s.features.mean(axis=0)


def cosine_distance(a, b) -> float:
    """1 - cos(a, b); a zero vector is at distance 1 from everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(np.clip(1.0 - (a @ b) / (na * nb), 0.0, 2.0))


def _pairwise_cosine(X, Y):
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    dots = np.sum(X * Y, axis=1)
    ok = (nx > 0) & (ny > 0)
    out = np.ones(X.shape[0])
    out[ok] = 1.0 - dots[ok] / (nx[ok] * ny[ok])
    return np.clip(out, 0.0, 2.0)


@dataclass
class AbxResult:
    error_rate: float
    n_triplets: int
    errors: float
    pairs: dict = field(default_factory=dict)  # (class of A/X, class of B) -> [n, errors]
    mode: str = "pooled"

    def pair_error_rate(self, a, b) -> float:
        n, e = self.pairs[(a, b)]
        return e / n


def _pick_other(members, x, rng):
    """Uniform draw from ``members`` (sorted segment ids containing ``x``) excluding ``x``."""
    pos = int(np.searchsorted(members, x))
    r = int(rng.integers(members.size - 1))
    return members[r + (r >= pos)]


def _sample_triplets(classes, speakers, n_triplets, rng, mode):
    n = classes.size
    idx = np.arange(n)
    if mode not in MODES:
        raise ValueError(f"unknown ABX mode {mode!r}; expected one of {MODES}")
    if mode == "pooled":
        same = {c: idx[classes == c] for c in np.unique(classes)}
        other = {c: idx[classes != c] for c in same}
        eligible = [x for x in range(n) if same[classes[x]].size > 1 and other[classes[x]].size]
        if not eligible:
            raise DataError("no valid ABX triplets")
        out = np.empty((n_triplets, 3), dtype=np.int64)
        for t in range(n_triplets):
            x = eligible[rng.integers(len(eligible))]
            c = classes[x]
            out[t] = (_pick_other(same[c], x, rng), other[c][rng.integers(other[c].size)], x)
        return out
    keys = set(zip(classes.tolist(), speakers.tolist()))
    same = {k: idx[(classes == k[0]) & (speakers == k[1])] for k in keys}
    other = {k: idx[(classes != k[0]) & (speakers == k[1])] for k in keys}
    if mode == "within-speaker":
        eligible = [x for x in range(n) if same[(classes[x], speakers[x])].size > 1 and other[(classes[x], speakers[x])].size]
        if not eligible:
            raise DataError("no valid within-speaker ABX triplets: every speaker needs two segments of one class and one of another")
        out = np.empty((n_triplets, 3), dtype=np.int64)
        for t in range(n_triplets):
            x = eligible[rng.integers(len(eligible))]
            k = (classes[x], speakers[x])
            out[t] = (_pick_other(same[k], x, rng), other[k][rng.integers(other[k].size)], x)
        return out
    # across-speaker: A and B share a speaker that differs from X's
    spk_ids = np.unique(speakers)
    options = {}
    for c in np.unique(classes):
        for s_x in spk_ids:
            options[(c, s_x)] = [
                s for s in spk_ids
                if s != s_x and (c, s) in same and other[(c, s)].size
            ]
    eligible = [x for x in range(n) if options[(classes[x], speakers[x])]]
    if not eligible:
        raise DataError("no valid across-speaker ABX triplets: need a second speaker covering both classes")
    out = np.empty((n_triplets, 3), dtype=np.int64)
    for t in range(n_triplets):
        x = eligible[rng.integers(len(eligible))]
        c = classes[x]
        opts = options[(c, speakers[x])]
        s = opts[rng.integers(len(opts))]
        a_c, b_c = same[(c, s)], other[(c, s)]
        out[t] = (a_c[rng.integers(a_c.size)], b_c[rng.integers(b_c.size)], x)
    return out


def abx_evaluate(segments, n_triplets=10_000, seed=0, mode="pooled") -> AbxResult:
    """Error when X is closer (cosine, on mean-pooled features) to B than to A.

    Triplets are drawn by segment index, so relabelling classes consistently
    reproduces the same triplets under the same seed.  Distance ties score 0.5.
    """
    classes = np.array([s.phoneme_class for s in segments], dtype=np.int64)
    speakers = np.array([s.speaker_id for s in segments], dtype=np.int64)
    labels, counts = np.unique(classes, return_counts=True)
    if labels.size < 2:
        raise DataError(f"ABX needs at least two phoneme classes, got {labels.tolist()}")
    short = labels[counts < 2]
    if short.size:
        raise DataError(f"phoneme class {int(short[0])} has fewer than 2 segments")
    pooled = np.stack([pool_segment(s) for s in segments])
    rng = np.random.default_rng(seed)
    trip = _sample_triplets(classes, speakers, n_triplets, rng, mode)
    d_xa = _pairwise_cosine(pooled[trip[:, 2]], pooled[trip[:, 0]])
    d_xb = _pairwise_cosine(pooled[trip[:, 2]], pooled[trip[:, 1]])
    err = np.where(d_xb < d_xa, 1.0, np.where(d_xb == d_xa, 0.5, 0.0))
    pairs = {}
    for (a, b, _), e in zip(trip, err):
        key = (int(classes[a]), int(classes[b]))
        slot = pairs.setdefault(key, [0, 0.0])
        slot[0] += 1
        slot[1] += float(e)
    total = float(err.sum())
    return AbxResult(total / len(trip), len(trip), total, dict(sorted(pairs.items())), mode)


def segments_from_frames(features, labels, utterance_id=0, speaker_id=0):
    """Split a frame sequence into runs of constant label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(labels)) + 1
    bounds = np.concatenate([[0], cuts, [labels.size]])
    return [
        Segment(features[s:e], int(labels[s]), utterance_id, speaker_id)
        for s, e in zip(bounds[:-1], bounds[1:])
    ]


# ---------------------------------------------------------------------------
# co-occurrence

@dataclass
class CooccurrenceMatrix:
    counts: np.ndarray        # (P, M)
    conditional: np.ndarray   # (P, M), columns sum to 1
    codes: list               # column labels
    phonemes: np.ndarray      # row labels

    def column(self, code) -> int:
        return self.codes.index(code)

    def prob(self, phoneme, code) -> float:
        return float(self.conditional[int(np.flatnonzero(self.phonemes == phoneme)[0]), self.column(code)])


def code_symbols(indices, per_group=False):
    """Map (T, G) index rows to composite symbols, or to (group, index) symbols per group."""
    indices = np.asarray(indices)
    if not per_group:
        return [tuple(int(v) for v in row) for row in indices]
    return [(g, int(v)) for row in indices for g, v in enumerate(row)]


def cooccurrence(pairs, n_phonemes=None) -> CooccurrenceMatrix:
    """Counts and P(phoneme | code) from ``(code, phoneme)`` pairs.

    Columns are grouped by their most probable phoneme, then ordered by
    decreasing probability of that phoneme.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("co-occurrence needs at least one frame")
    codes = sorted({c for c, _ in pairs})
    col = {c: i for i, c in enumerate(codes)}
    max_p = max(int(p) for _, p in pairs)
    P = max(max_p + 1, n_phonemes or 0)
    counts = np.zeros((P, len(codes)), dtype=np.int64)
    for c, p in pairs:
        counts[int(p), col[c]] += 1
    cond = counts / counts.sum(axis=0, keepdims=True)
    best = np.argmax(cond, axis=0)
    order = sorted(range(len(codes)), key=lambda j: (best[j], -cond[best[j], j], j))
    return CooccurrenceMatrix(counts[:, order], cond[:, order], [codes[j] for j in order], np.arange(P))


def purity(m: CooccurrenceMatrix) -> float:
    mass = m.counts.sum(axis=0).astype(np.float64)
    if mass.sum() == 0:
        raise DataError("empty co-occurrence matrix")
    return float(np.sum(mass / mass.sum() * m.conditional.max(axis=0)))


# ---------------------------------------------------------------------------
# reports

def _code_label(code):
    return "-".join(str(v) for v in code) if isinstance(code, tuple) else str(code)


def write_abx_report(path, results, header=None):
    lines = [] if header is None else [header]
    lines.append("mode,n_triplets,error_rate")
    for r in results:
        lines.append(f"{r.mode},{r.n_triplets},{r.error_rate:.6f}")
    lines.append("")
    lines.append("mode,class_a,class_b,n_triplets,errors,error_rate")
    for r in results:
        for (a, b), (n, e) in r.pairs.items():
            lines.append(f"{r.mode},{a},{b},{n},{e:g},{e / n:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_cooccurrence(path, m: CooccurrenceMatrix, header=None, counts=False):
    values = m.counts if counts else m.conditional
    lines = [] if header is None else [header]
    lines.append("phoneme," + ",".join(_code_label(c) for c in m.codes))
    for p, row in zip(m.phonemes, values):
        cells = (str(int(v)) for v in row) if counts else (f"{v:.6f}" for v in row)
        lines.append(f"{int(p)}," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
