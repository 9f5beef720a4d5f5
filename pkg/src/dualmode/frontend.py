"""Log-mel filterbank features and 4x frame stacking to the 40 ms encoder rate."""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from .audio_io import SAMPLE_RATE, Waveform

WIN = 400  # 25 ms
HOP = 160  # 10 ms
N_FFT = 512
STACK = 4
FRAME_RATE_S = 0.040
LOG_FLOOR = 1e-10
FMIN, FMAX = 20.0, 7600.0


def num_fbank_frames(n_samples: int) -> int:
    if n_samples < WIN:
        return 0
    return 1 + (n_samples - WIN) // HOP


def num_encoder_frames(n_samples: int) -> int:
    return num_fbank_frames(n_samples) // STACK


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape [n_mels, n_fft//2 + 1]."""
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = _mel_to_hz(np.linspace(_hz_to_mel(FMIN), _hz_to_mel(FMAX), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def fbank(waveform: Waveform, n_mels: int = 128) -> np.ndarray:
    """Log mel filterbank energies, shape [T10, n_mels].

    25 ms Hamming windows every 10 ms, power spectrum, no dither. Energies
    are floored at ``LOG_FLOOR`` before the log, so silence maps to
    ``log(LOG_FLOOR)`` exactly.
    """
    if waveform.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {waveform.sample_rate}")
    x = np.asarray(waveform.samples, dtype=np.float64)
    n_frames = num_fbank_frames(len(x))
    if n_frames < 1:
        raise ValueError(f"audio shorter than one {WIN}-sample window ({len(x)} samples)")
    idx = np.arange(WIN)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(WIN)[None, :]
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
    mel = power @ mel_filterbank(n_mels).T
    return np.log(np.maximum(mel, LOG_FLOOR))


def cmvn(feats: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-utterance mean/variance normalization over time."""
    mu = feats.mean(axis=0, keepdims=True)
    sd = feats.std(axis=0, keepdims=True)
    return (feats - mu) / (sd + eps)


def stack_downsample(feats: np.ndarray) -> np.ndarray:
    """Concatenate each block of 4 consecutive frames, oldest first.

    Row ``j`` is ``[f[4j] | f[4j+1] | f[4j+2] | f[4j+3]]``, i.e. frame
    ``4j+3`` together with its 3 predecessors; a trailing remainder of fewer
    than 4 frames is dropped.
    """
    t10, dim = feats.shape
    if dim * STACK != 512:
        raise ValueError(f"expected {512 // STACK} mel bins, got {dim}")
    t40 = t10 // STACK
    if t40 < 1:
        raise ValueError(f"need at least {STACK} fbank frames, got {t10}")
    return feats[: t40 * STACK].reshape(t40, STACK * dim)


def compute_features(waveform: Waveform, normalize: bool = True) -> np.ndarray:
    """Waveform -> [T40, 512] float32 encoder input."""
    f = fbank(waveform, n_mels=128)
    if normalize:
        f = cmvn(f)
    return stack_downsample(f).astype(np.float32)


class FeatureCache:
    """On-disk cache: ``<utt_id>.npy`` plus a ``<utt_id>.json`` sidecar."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _paths(self, utt_id: str):
        return self.root / f"{utt_id}.npy", self.root / f"{utt_id}.json"

    def get(self, utt_id: str) -> Optional[np.ndarray]:
        npy, meta = self._paths(utt_id)
        if not (npy.exists() and meta.exists()):
            return None
        return np.load(npy)

    def put(self, utt_id: str, feats: np.ndarray) -> None:
        npy, meta = self._paths(utt_id)
        np.save(npy, feats)
        meta.write_text(
            json.dumps(
                {"shape": list(feats.shape), "dtype": str(feats.dtype), "frame_rate": FRAME_RATE_S},
                sort_keys=True,
            )
        )
