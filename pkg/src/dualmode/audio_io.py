"""Manifests, WAV loading, and the deterministic tone-sequence fixture corpus."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from math import gcd
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
HOP_S = 0.010

# Fundamental frequency per fixture word. All lie inside the 50-400 Hz pitch
# search band so the pitch probe has a meaningful reference.
TOKEN_F0 = {
    "do": 110.0,
    "re": 135.0,
    "mi": 160.0,
    "fa": 190.0,
    "sol": 220.0,
    "la": 255.0,
    "ti": 290.0,
    "ka": 330.0,
}
VOCAB = tuple(TOKEN_F0)

# Harmonic amplitude decay per timbre; the timbre is the fixture class label.
TIMBRES = {"bright": 0.85, "dark": 0.35}

_REQUIRED_KEYS = ("utt_id", "audio_path", "duration_s")

PathLike = Union[str, os.PathLike]


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifest files."""


class AudioError(ValueError):
    """Raised for unreadable or unsupported audio files."""


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    audio_path: str
    duration_s: float
    transcript: Optional[str] = None
    class_label: Optional[str] = None

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(d, sort_keys=True)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def load_manifest(path: PathLike) -> list[ManifestEntry]:
    """Read a JSON Lines manifest.

    Relative ``audio_path`` values are resolved against the manifest's
    directory. Blank lines are skipped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED_KEYS if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing keys {missing}")
            utt_id = str(obj["utt_id"])
            if utt_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate utt_id {utt_id!r} (first seen on line {seen[utt_id]})"
                )
            seen[utt_id] = lineno
            duration = float(obj["duration_s"])
            if not duration > 0:
                raise ManifestError(f"{path}:{lineno}: duration_s must be > 0")
            audio_path = Path(obj["audio_path"])
            if not audio_path.is_absolute():
                audio_path = path.parent / audio_path
            entries.append(
                ManifestEntry(
                    utt_id=utt_id,
                    audio_path=str(audio_path),
                    duration_s=duration,
                    transcript=obj.get("transcript"),
                    class_label=obj.get("class_label"),
                )
            )
    return entries


def write_manifest(entries: list[ManifestEntry], path: PathLike) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(e.to_json() + "\n")
    os.replace(tmp, path)


def read_audio(path: PathLike) -> Waveform:
    """Load a PCM/float WAV file as 16 kHz mono float64 in [-1, 1]."""
    try:
        rate, data = wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as e:  # scipy raises ValueError/struct.error for junk
        raise AudioError(f"cannot read {path}: {e}") from e

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported sample encoding {data.dtype} in {path}")

    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != SAMPLE_RATE:
        g = gcd(int(rate), SAMPLE_RATE)
        x = resample_poly(x, SAMPLE_RATE // g, int(rate) // g)
    x = np.clip(x, -1.0, 1.0)
    if not np.all(np.isfinite(x)):
        raise AudioError(f"non-finite samples in {path}")
    return Waveform(samples=x, sample_rate=SAMPLE_RATE)


def write_wav(path: PathLike, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)


def render_tone(f0: float, n: int, timbre: str, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Harmonic tone with a short raised-cosine attack/release."""
    t = np.arange(n) / SAMPLE_RATE
    decay = TIMBRES[timbre]
    phase = rng.uniform(0, 2 * np.pi)
    x = np.zeros(n)
    h = 1
    while h * f0 < 3800:
        x += decay ** (h - 1) * np.sin(2 * np.pi * h * f0 * t + h * phase)
        h += 1
    x /= np.max(np.abs(x)) + 1e-12
    ramp = min(n // 4, int(0.015 * SAMPLE_RATE))
    if ramp > 0:
        env = 0.5 - 0.5 * np.cos(np.linspace(0, np.pi, ramp))
        x[:ramp] *= env
        x[-ramp:] *= env[::-1]
    return gain * x


def synth_utterance(rng: np.random.Generator) -> tuple[np.ndarray, list[str], str]:
    """Draw one fixture utterance: (samples, words, timbre)."""
    n_words = int(rng.integers(3, 9))
    timbre = str(rng.choice(sorted(TIMBRES)))
    words = [str(w) for w in rng.choice(VOCAB, size=n_words)]
    noise = 0.003
    pieces = [np.zeros(int(rng.uniform(0.1, 0.25) * SAMPLE_RATE))]
    for w in words:
        n = int(rng.uniform(0.16, 0.32) * SAMPLE_RATE)
        gain = rng.uniform(0.2, 0.8)
        pieces.append(render_tone(TOKEN_F0[w], n, timbre, gain, rng))
        pieces.append(np.zeros(int(rng.uniform(0.06, 0.14) * SAMPLE_RATE)))
    x = np.concatenate(pieces)
    min_n = SAMPLE_RATE  # 1 s floor
    if len(x) < min_n:
        x = np.concatenate([x, np.zeros(min_n - len(x))])
    x = x[: 8 * SAMPLE_RATE]
    x = x + noise * rng.standard_normal(len(x))
    return x, words, timbre


def synth_dataset(n_utts: int, seed: int, out_dir: PathLike) -> tuple[Path, list[ManifestEntry]]:
    """Write ``n_utts`` tone-sequence utterances plus ``manifest.jsonl``.

    Each word is a harmonic tone at a fixed fundamental, so the transcript is
    recoverable from the audio. The manifest stores paths relative to
    ``out_dir`` so the corpus is relocatable and byte-identical across runs.
    """
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory not writable: {out_dir}")

    width = max(4, len(str(n_utts - 1)))
    entries = []
    for i in range(n_utts):
        rng = np.random.default_rng([seed, i])
        x, words, timbre = synth_utterance(rng)
        utt_id = f"utt{i:0{width}d}"
        rel = f"wav/{utt_id}.wav"
        write_wav(out_dir / rel, x)
        entries.append(
            ManifestEntry(
                utt_id=utt_id,
                audio_path=rel,
                duration_s=round(len(x) / SAMPLE_RATE, 6),
                transcript=" ".join(words),
                class_label=timbre,
            )
        )
    manifest = out_dir / "manifest.jsonl"
    write_manifest(entries, manifest)
    logger.info("wrote %d fixture utterances to %s", n_utts, out_dir)
    return manifest, entries


class Tokenizer:
    """Word-level tokenizer; id 0 is reserved for blank."""

    def __init__(self, words):
        self.words = list(words)
        self._ids = {w: i + 1 for i, w in enumerate(self.words)}

    @classmethod
    def from_transcripts(cls, transcripts) -> "Tokenizer":
        vocab = sorted({w for t in transcripts if t for w in t.split()})
        return cls(vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.words) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self._ids[w] for w in text.split()]
        except KeyError as e:
            raise ValueError(f"out-of-vocabulary word {e.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.words[i - 1] for i in ids if i > 0]
