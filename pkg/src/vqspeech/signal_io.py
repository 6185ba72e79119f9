"""Waveform containers, mu-law companding, WAV/manifest/alignment files and a
synthetic toy-phoneme corpus.

The synthetic corpus stands in for real phone-aligned speech.  Every class is a
fixed spectral envelope (two formant peaks) imposed on a harmonic stack whose
fundamental depends on the speaker, so class identity lives in the timbre while
pitch and gain vary across speakers.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InputRangeError, PathError

PCM_SCALE = 32768.0


@dataclass(eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise InputRangeError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise InputRangeError("waveform contains non-finite samples")
        if np.any(np.abs(self.samples) > 1.0):
            raise InputRangeError("waveform samples must lie in [-1, 1]")
        if int(self.sample_rate) <= 0:
            raise InputRangeError(f"sample_rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(eq=False)
class MuLawSequence:
    levels: np.ndarray
    sample_rate: int
    n_levels: int = 256

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.int64).reshape(-1)
        if np.any(self.levels < 0) or np.any(self.levels >= self.n_levels):
            raise InputRangeError(f"mu-law levels must lie in [0, {self.n_levels - 1}]")


@dataclass(eq=False)
class FrameAlignment:
    labels: np.ndarray
    frame_rate: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if np.any(self.labels < 0):
            raise InputRangeError("phoneme labels must be non-negative")

    def __len__(self):
        return self.labels.size


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: str
    alignment_path: str | None = None
    speaker_id: int | None = None

    def __post_init__(self):
        if not self.audio_path:
            raise FormatError("audio_path", "empty path")
        if self.alignment_path == "":
            raise FormatError("alignment_path", "empty path")
        if self.speaker_id is not None and self.speaker_id < 0:
            raise FormatError("speaker_id", f"must be >= 0, got {self.speaker_id}")


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    sample_rate: int | None = None
    root: Path = field(default_factory=Path)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p


# ---------------------------------------------------------------------------
# mu-law companding

def _check_levels(levels):
    if levels < 2 or levels & (levels - 1):
        raise InputRangeError(f"levels must be a power of two >= 2, got {levels}")


def mu_law_levels(x, levels=256):
    """Array form of mu-law encoding; returns int64 levels in [0, levels-1]."""
    _check_levels(levels)
    x = np.asarray(x, dtype=np.float64)
    if np.any(~np.isfinite(x)) or np.any(np.abs(x) > 1.0):
        raise InputRangeError("mu-law input must lie in [-1, 1]")
    mu = levels - 1
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / math.log1p(mu)
    return np.floor((y + 1.0) / 2.0 * mu + 0.5).astype(np.int64)


def mu_law_values(q, levels=256):
    """Inverse of :func:`mu_law_levels`: level index -> sample value."""
    mu = levels - 1
    y = 2.0 * np.asarray(q, dtype=np.float64) / mu - 1.0
    return np.sign(y) * np.expm1(np.abs(y) * math.log1p(mu)) / mu


def mu_law_bin_edges(q, levels=256):
    """Sample-domain interval [lo, hi] of inputs that encode to level ``q``."""
    mu = levels - 1
    q = np.asarray(q, dtype=np.float64)
    y_lo = np.maximum((2.0 * q - 1.0) / mu - 1.0, -1.0)
    y_hi = np.minimum((2.0 * q + 1.0) / mu - 1.0, 1.0)

    def expand(y):
        return np.sign(y) * np.expm1(np.abs(y) * math.log1p(mu)) / mu

    return expand(y_lo), expand(y_hi)


def mu_law_encode(w: Waveform, levels: int = 256) -> MuLawSequence:
    return MuLawSequence(mu_law_levels(w.samples, levels), w.sample_rate, levels)


def mu_law_decode(m: MuLawSequence) -> Waveform:
    values = np.clip(mu_law_values(m.levels, m.n_levels), -1.0, 1.0)
    return Waveform(values, m.sample_rate)


# ---------------------------------------------------------------------------
# WAV files

def load_waveform(path) -> Waveform:
    path = Path(path)
    if not path.exists():
        raise PathError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            if channels != 1:
                raise FormatError("channels", f"expected mono, got {channels} channels")
            if width != 2:
                raise FormatError("bits_per_sample", f"expected 16-bit PCM, got {8 * width}-bit")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise FormatError("header", str(exc)) from exc
    except EOFError as exc:
        raise FormatError("header", "truncated RIFF header") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / PCM_SCALE, rate)


def write_waveform(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# manifests and alignment files

def _format_rate(rate):
    rate = float(rate)
    return str(int(rate)) if rate.is_integer() else repr(rate)


def write_alignment(path, alignment: FrameAlignment, header: str | None = None) -> None:
    lines = [] if header is None else [header]
    lines.append(f"frame_rate={_format_rate(alignment.frame_rate)}")
    lines.extend(str(int(v)) for v in alignment.labels)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_alignment(path) -> FrameAlignment:
    path = Path(path)
    if not path.exists():
        raise PathError(f"no such file: {path}")
    rate = None
    labels = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if rate is None:
            if not line.startswith("frame_rate="):
                raise FormatError("frame_rate", f"{path}:{lineno}: missing 'frame_rate=<Hz>' header")
            rate = float(line.split("=", 1)[1])
            continue
        try:
            labels.append(int(line))
        except ValueError as exc:
            raise FormatError("label", f"{path}:{lineno}: not an integer: {line!r}") from exc
    if rate is None:
        raise FormatError("frame_rate", f"{path}: missing header")
    return FrameAlignment(np.array(labels, dtype=np.int64), rate)


def write_manifest(path, manifest: DatasetManifest, header: str | None = None) -> None:
    lines = [] if header is None else [header]
    for e in manifest.entries:
        align = e.alignment_path if e.alignment_path is not None else "-"
        spk = str(e.speaker_id) if e.speaker_id is not None else "-"
        lines.append(f"{e.audio_path}\t{align}\t{spk}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise PathError(f"no such file: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) != 3:
            raise FormatError("columns", f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}")
        audio, align, spk = cols
        try:
            speaker = None if spk == "-" else int(spk)
        except ValueError as exc:
            raise FormatError("speaker_id", f"{path}:{lineno}: {spk!r}") from exc
        entries.append(ManifestEntry(audio, None if align == "-" else align, speaker))
    return DatasetManifest(entries, root=path.parent)


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class SynthConfig:
    n_utterances: int = 200
    n_classes: int = 8
    seed: int = 0
    sample_rate: int = 16000
    utterance_seconds: float = 1.0
    n_speakers: int = 4
    min_segment_ms: float = 40.0
    max_segment_ms: float = 160.0
    noise_std: float = 0.01
    hop: int = 80


@dataclass
class Corpus:
    waveforms: list[Waveform]
    alignments: list[FrameAlignment | None]
    speakers: list[int | None]
    names: list[str]

    def __len__(self):
        return len(self.waveforms)


def class_formants(n_classes: int) -> np.ndarray:
    """(n_classes, 2) formant frequencies in Hz; fixed per class, independent of any seed."""
    f1 = np.linspace(300.0, 900.0, n_classes)
    f2 = np.linspace(1100.0, 3000.0, n_classes)
    perm = np.random.default_rng(20_200_523 + n_classes).permutation(n_classes)
    return np.stack([f1, f2[perm]], axis=1)


def speaker_profile(speaker: int) -> tuple[float, float]:
    """(fundamental Hz, gain) for a speaker id."""
    f0 = 95.0 + 37.0 * (speaker % 5) + 11.0 * (speaker // 5)
    gain = 0.7 + 0.15 * ((speaker * 3) % 4)
    return f0, gain


def harmonic_segment(n, cls, formants, f0, sample_rate, rng, bandwidth=110.0):
    t = np.arange(n) / sample_rate
    n_harm = int(0.45 * sample_rate // f0)
    freqs = f0 * np.arange(1, n_harm + 1)
    amps = sum(np.exp(-0.5 * ((freqs - f) / bandwidth) ** 2) for f in formants[cls])
    keep = amps > 1e-3
    phases = rng.uniform(0.0, 2 * np.pi, size=int(keep.sum()))
    seg = amps[keep] @ np.sin(2 * np.pi * np.outer(freqs[keep], t) + phases[:, None])
    seg /= np.sqrt(np.mean(seg**2)) + 1e-12
    fade = min(n // 4, int(0.005 * sample_rate))
    if fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, fade))
        seg[:fade] *= ramp
        seg[-fade:] *= ramp[::-1]
    return seg


def synthesize_corpus(config: SynthConfig = SynthConfig()) -> Corpus:
    if config.n_classes < 2:
        raise InputRangeError("n_classes must be >= 2")
    if config.n_utterances < 1:
        raise InputRangeError("n_utterances must be >= 1")
    rng = np.random.default_rng(config.seed)
    sr = config.sample_rate
    formants = class_formants(config.n_classes)
    n_total = int(round(config.utterance_seconds * sr))
    lo = max(1, int(config.min_segment_ms * sr / 1000))
    hi = max(lo + 1, int(config.max_segment_ms * sr / 1000))
    waves, aligns, speakers, names = [], [], [], []
    for u in range(config.n_utterances):
        spk = int(rng.integers(config.n_speakers))
        f0_base, gain = speaker_profile(spk)
        audio = np.zeros(n_total)
        owner = np.zeros(n_total, dtype=np.int64)
        pos, prev = 0, -1
        while pos < n_total:
            n = min(int(rng.integers(lo, hi)), n_total - pos)
            cls = int(rng.integers(config.n_classes - (prev >= 0)))
            if prev >= 0 and cls >= prev:
                cls += 1
            f0 = f0_base * (1.0 + 0.03 * rng.standard_normal())
            audio[pos:pos + n] = 0.12 * gain * harmonic_segment(n, cls, formants, f0, sr, rng)
            owner[pos:pos + n] = cls
            pos += n
            prev = cls
        audio += config.noise_std * rng.standard_normal(n_total)
        audio = np.clip(audio, -1.0, 1.0)
        centers = np.arange(n_total // config.hop) * config.hop + config.hop // 2
        waves.append(Waveform(audio, sr))
        aligns.append(FrameAlignment(owner[centers], sr / config.hop))
        speakers.append(spk)
        names.append(f"utt{u:05d}")
    return Corpus(waves, aligns, speakers, names)


def generate_synthetic_corpus(n_utterances: int, n_classes: int, seed: int, **kwargs):
    """Return ``(waveforms, alignments)`` for a fresh synthetic corpus."""
    corpus = synthesize_corpus(SynthConfig(n_utterances=n_utterances, n_classes=n_classes, seed=seed, **kwargs))
    return corpus.waveforms, corpus.alignments


def labels_for_frames(alignment: FrameAlignment, n_frames, sample_rate, stride, receptive_field):
    """Resample an alignment onto encoder frames, using each frame's receptive-field centre."""
    centers = np.arange(n_frames) * stride + (receptive_field - 1) / 2.0
    idx = np.floor(centers * alignment.frame_rate / sample_rate).astype(np.int64)
    return alignment.labels[np.clip(idx, 0, alignment.labels.size - 1)]


def write_corpus(corpus: Corpus, out_dir, header: str | None = None) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "align").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, w, a, spk in zip(corpus.names, corpus.waveforms, corpus.alignments, corpus.speakers):
        wav_rel = f"wav/{name}.wav"
        write_waveform(out_dir / wav_rel, w)
        align_rel = None
        if a is not None:
            align_rel = f"align/{name}.txt"
            write_alignment(out_dir / align_rel, a, header=header)
        entries.append(ManifestEntry(wav_rel, align_rel, spk))
    manifest_path = out_dir / "manifest.tsv"
    write_manifest(manifest_path, DatasetManifest(entries), header=header)
    return manifest_path


def load_corpus(manifest_path) -> Corpus:
    manifest = load_manifest(manifest_path)
    waves, aligns, speakers, names = [], [], [], []
    for e in manifest.entries:
        waves.append(load_waveform(manifest.resolve(e.audio_path)))
        aligns.append(load_alignment(manifest.resolve(e.alignment_path)) if e.alignment_path else None)
        speakers.append(e.speaker_id)
        names.append(Path(e.audio_path).stem)
    return Corpus(waves, aligns, speakers, names)
