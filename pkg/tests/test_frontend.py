import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmode.audio_io import Waveform
from dualmode.frontend import (
    LOG_FLOOR,
    FeatureCache,
    compute_features,
    fbank,
    mel_filterbank,
    num_encoder_frames,
    num_fbank_frames,
    stack_downsample,
)


def _noise(n, seed=0):
    return Waveform(np.random.default_rng(seed).uniform(-0.3, 0.3, n))


class TestFbank:
    def test_one_second(self):
        f = fbank(_noise(16000))
        assert f.shape == (98, 128)
        assert np.isfinite(f).all()

    def test_one_window(self):
        assert fbank(_noise(400)).shape == (1, 128)

    def test_too_short(self):
        with pytest.raises(ValueError):
            fbank(_noise(399))

    def test_silence_is_floor(self):
        f = fbank(Waveform(np.zeros(3200)))
        np.testing.assert_array_equal(f, np.log(LOG_FLOOR))

    def test_deterministic(self):
        np.testing.assert_array_equal(fbank(_noise(5000, 3)), fbank(_noise(5000, 3)))

    def test_tone_peaks_at_its_band(self):
        sr = 16000
        x = 0.5 * np.sin(2 * np.pi * 1000 * np.arange(sr) / sr)
        f = fbank(Waveform(x))
        fb = mel_filterbank(128)
        freqs = np.arange(257) * sr / 512
        centre = freqs[fb.argmax(axis=1)]
        assert abs(centre[f.mean(axis=0).argmax()] - 1000) < 80

    def test_wrong_rate(self):
        with pytest.raises(ValueError):
            fbank(Waveform(np.zeros(1000), sample_rate=8000))

    @settings(max_examples=50, deadline=None)
    @given(n=st.integers(400, 20000))
    def test_frame_count_formula(self, n):
        assert num_fbank_frames(n) == 1 + (n - 400) // 160
        assert fbank(Waveform(np.full(n, 0.01))).shape[0] == num_fbank_frames(n)


class TestStack:
    def test_98_frames(self):
        assert stack_downsample(np.zeros((98, 128))).shape == (24, 512)

    def test_single_block(self):
        rows = np.arange(4 * 128, dtype=float).reshape(4, 128)
        out = stack_downsample(rows)
        np.testing.assert_array_equal(out[0], np.concatenate(rows))

    def test_remainder_dropped(self):
        assert stack_downsample(np.zeros((7, 128))).shape == (1, 512)

    def test_too_few(self):
        with pytest.raises(ValueError):
            stack_downsample(np.zeros((3, 128)))

    def test_wrong_dim(self):
        with pytest.raises(ValueError):
            stack_downsample(np.zeros((8, 80)))

    @settings(max_examples=30, deadline=None)
    @given(t10=st.integers(4, 60), k=st.integers(0, 59))
    def test_no_lookahead_past_block(self, t10, k):
        k = k % t10
        rng = np.random.default_rng(t10)
        f = rng.standard_normal((t10, 128))
        g = f.copy()
        g[k] += 1.0
        a, b = stack_downsample(f), stack_downsample(g)
        changed = np.flatnonzero(np.any(a != b, axis=1))
        # perturbing frame k touches only output k // 4, and only if it is kept
        assert list(changed) == ([k // 4] if k // 4 < t10 // 4 else [])


class TestFeatures:
    def test_shape_and_dtype(self):
        x = compute_features(_noise(16000))
        assert x.shape == (24, 512) and x.dtype == np.float32
        assert num_encoder_frames(16000) == 24

    def test_normalized(self):
        x = compute_features(_noise(32000)).reshape(-1, 4, 128)
        # per-bin statistics over the kept fbank frames stay near the cmvn target
        assert abs(x.mean()) < 0.1

    def test_cache(self, tmp_path):
        cache = FeatureCache(tmp_path / "c")
        assert cache.get("u1") is None
        x = compute_features(_noise(8000))
        cache.put("u1", x)
        np.testing.assert_array_equal(cache.get("u1"), x)
        meta = json.loads((tmp_path / "c" / "u1.json").read_text())
        assert meta == {"shape": list(x.shape), "dtype": "float32", "frame_rate": 0.04}
