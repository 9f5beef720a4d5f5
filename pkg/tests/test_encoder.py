import math

import numpy as np
import pytest
import torch

from dualmode.encoder import (
    ENCODER_PRESETS,
    CausalConv1d,
    DualModeEncoder,
    EncoderConfig,
    MaskedSelfAttention,
    NonFiniteActivation,
    StreamingState,
)
from dualmode.maskgen import INF, ContextSpec, build_mask

SMALL = EncoderConfig(n_blocks=2, d_model=16, d_ff=32, n_heads=2, conv_kernel=3, dropout=0.0)


def make(cfg=SMALL, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return DualModeEncoder(cfg).to(dtype).eval()


def frames(T, seed=0, dtype=torch.float32):
    return torch.randn(T, 512, generator=torch.Generator().manual_seed(seed), dtype=dtype)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(d_model=10, n_heads=4)
        with pytest.raises(ValueError):
            EncoderConfig(conv_kernel=2)

    def test_presets(self):
        assert ENCODER_PRESETS["toy"] == EncoderConfig()
        p = ENCODER_PRESETS["base_200m"]
        assert (p.n_blocks, p.d_model, p.d_ff) == (18, 512, 2048)

    def test_param_count_mode_free(self):
        enc = make(EncoderConfig())
        n = enc.num_parameters()
        x = frames(20)
        for ctx in (ContextSpec(), ContextSpec(5.4, 0.0), ContextSpec(INF, 1.0)):
            enc(x, ctx)
            assert enc.num_parameters() == n


class TestFrontend:
    def test_shape_and_causality(self):
        enc = make()
        x = frames(10)
        y = enc.frontend_project(x[None])[0]
        assert y.shape == (10, 16)
        x2 = x.clone()
        x2[6] += 1.0
        y2 = enc.frontend_project(x2[None])[0]
        torch.testing.assert_close(y[:6], y2[:6], rtol=0, atol=0)
        assert not torch.allclose(y[6:], y2[6:])

    def test_zero_input_bias_response(self):
        enc = make()
        y = enc.frontend_project(torch.zeros(1, 7, 512))[0]
        ref = torch.nn.functional.silu(enc.frontend.conv.conv.bias)
        torch.testing.assert_close(y, ref.expand(7, -1))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            make()(torch.zeros(5, 80))

    def test_conv_cache_continuation(self):
        torch.manual_seed(1)
        conv = CausalConv1d(4, 3, 5)
        x = torch.randn(1, 9, 4)
        full, _ = conv(x)
        a, cache = conv(x[:, :4])
        b, _ = conv(x[:, 4:], cache)
        torch.testing.assert_close(torch.cat([a, b], 1), full)


class TestAttention:
    def test_hand_computed_two_frames(self):
        attn = MaskedSelfAttention(2, 1, 0.0).double()
        with torch.no_grad():
            for lin in (attn.q, attn.k, attn.v, attn.out):
                lin.weight.copy_(torch.eye(2, dtype=torch.float64))
                lin.bias.zero_()
        q = k = v = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]], dtype=torch.float64)
        with torch.no_grad():
            out = attn.attend(q, k, v, torch.ones(2, 2, dtype=torch.bool))[0]
            causal = attn.attend(q, k, v, torch.tensor([[True, False], [True, True]]))[0]
        s = 1 / math.sqrt(2)
        # row 0 scores: [1, 0] * s; row 1 scores: [0, 4] * s
        w0 = np.exp([s, 0.0]) / np.exp([s, 0.0]).sum()
        w1 = np.exp([0.0, 4 * s]) / np.exp([0.0, 4 * s]).sum()
        vv = np.array([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(out.numpy(), np.stack([w0 @ vv, w1 @ vv]), atol=1e-12)
        np.testing.assert_allclose(causal[0].numpy(), [1.0, 0.0], atol=1e-12)


class TestForward:
    def test_taps(self):
        enc = make()
        taps = enc(frames(9))
        assert len(taps) == SMALL.n_blocks + 1
        assert all(t.shape == (9, 16) for t in taps)
        assert all(torch.isfinite(t).all() for t in taps)

    def test_full_context_equals_explicit_all_true(self):
        enc = make()
        x = frames(12)
        a = enc(x, ContextSpec())
        b = enc(x, allow=torch.ones(12, 12, dtype=torch.bool))
        for s, t in zip(a, b):
            torch.testing.assert_close(s, t, rtol=0, atol=0)

    def test_streaming_ctx_last_frame_perturbation(self):
        enc = make(EncoderConfig(dropout=0.0))
        x = frames(30)
        y = enc(x, ContextSpec(5.4, 0.0))[-1]
        x2 = x.clone()
        x2[-1] += 3.0
        y2 = enc(x2, ContextSpec(5.4, 0.0))[-1]
        torch.testing.assert_close(y[:-1], y2[:-1], rtol=0, atol=0)

    @pytest.mark.parametrize("lb,la", [(INF, 0), (3, 2), (INF, 4), (2, 0)])
    def test_jacobian_sparsity(self, lb, la):
        enc = make(EncoderConfig(n_blocks=3, d_model=16, d_ff=32, n_heads=2, conv_kernel=3, dropout=0.0))
        T = 14
        mask = build_mask(T, lb, la)
        x = frames(T, 3)
        base = enc(x, allow=torch.from_numpy(mask.dense().copy()))[-1]
        for s in range(T):
            x2 = x.clone()
            x2[s] += 1.0
            y = enc(x2, allow=torch.from_numpy(mask.dense().copy()))[-1]
            changed = (y - base).abs().amax(dim=1) > 0
            for t in range(T):
                if s > mask.chunk_end(t):
                    assert not changed[t], (s, t)

    def test_padding_does_not_leak(self):
        enc = make()
        a, b = frames(7, 1), frames(11, 2)
        x = torch.zeros(2, 11, 512)
        x[0, :7], x[1] = a, b
        ctx = ContextSpec(INF, 1.0)
        out = enc(x, ctx, lengths=torch.tensor([7, 11]))[-1]
        torch.testing.assert_close(out[0, :7], enc(a, ctx)[-1], atol=1e-5, rtol=1e-5)
        torch.testing.assert_close(out[1], enc(b, ctx)[-1], atol=1e-5, rtol=1e-5)

    def test_non_finite_reported(self):
        enc = make()
        with torch.no_grad():
            enc.blocks[1].ff1.w1.weight.fill_(float("nan"))
        with pytest.raises(NonFiniteActivation, match="block 1"):
            enc(frames(5), check_finite=True)

    def test_gradient_check(self):
        cfg = EncoderConfig(n_blocks=2, d_model=8, d_ff=16, n_heads=2, conv_kernel=3, frontend_dim=512, dropout=0.0)
        enc = make(cfg, seed=4, dtype=torch.float64)
        x = frames(6, 4, torch.float64)
        allow = torch.from_numpy(build_mask(6, 2, 1).dense().copy())
        w = torch.randn(6, 8, generator=torch.Generator().manual_seed(5), dtype=torch.float64)

        def loss():
            return (enc(x, allow=allow)[-1] * w).sum()

        params = [p for p in enc.parameters()]
        enc.zero_grad()
        loss().backward()
        rng = np.random.default_rng(0)
        flat = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.numel())]
        picks = rng.choice(len(flat), size=100, replace=False)
        eps = 1e-6
        worst = 0.0
        with torch.no_grad():
            for k in picks:
                pi, idx = flat[k]
                p = params[pi].view(-1)
                orig = p[idx].item()
                p[idx] = orig + eps
                up = loss().item()
                p[idx] = orig - eps
                down = loss().item()
                p[idx] = orig
                fd = (up - down) / (2 * eps)
                an = params[pi].grad.view(-1)[idx].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-3))
        assert worst < 1e-4


class TestStreaming:
    def test_twelve_frames_c3(self):
        enc = make(EncoderConfig(dropout=0.0))
        x = frames(12)
        ctx = ContextSpec(0.2, 0.08)  # lb 5, la 2 frames
        assert (ctx.lb_frames, ctx.la_frames) == (5, 2)
        ref = enc(x, ctx)[-1]
        state = StreamingState.fresh(4)
        outs = []
        for i in range(4):
            y, state = enc.forward_streaming(x[3 * i:3 * i + 3], ctx, state)
            outs.append(y)
            assert all(k.shape[1] <= 5 for k in state.k_caches)
            assert all(c.shape[1] <= 14 for c in state.conv_caches)
        assert (torch.cat(outs) - ref).abs().max() < 1e-4

    def test_causal_per_frame(self):
        enc = make(EncoderConfig(dropout=0.0))
        x = frames(20, 1)
        ctx = ContextSpec(INF, 0.0)
        assert (enc.stream(x, ctx) - enc(x, ctx)[-1]).abs().max() < 1e-4

    def test_first_chunk_prefix(self):
        enc = make(EncoderConfig(dropout=0.0))
        x = frames(16, 2)
        ctx = ContextSpec(5.4, 0.12)  # C = 4
        y, _ = enc.forward_streaming(x[:4], ctx, StreamingState.fresh(4))
        torch.testing.assert_close(y, enc(x[:4], ctx)[-1], atol=1e-5, rtol=1e-5)

    def test_all_layers(self):
        enc = make()
        x = frames(9)
        ctx = ContextSpec(0.4, 0.04)
        taps = enc.stream(x, ctx, all_layers=True)
        for s, t in zip(taps, enc(x, ctx)):
            assert (s - t).abs().max() < 1e-4

    def test_errors(self):
        enc = make()
        ctx = ContextSpec(5.4, 0.08)  # C = 3
        with pytest.raises(ValueError):
            enc.forward_streaming(frames(4), ctx, StreamingState.fresh(2))
        with pytest.raises(ValueError):
            enc.forward_streaming(frames(3), ctx, StreamingState.fresh(3))
        with pytest.raises(ValueError):
            enc.forward_streaming(frames(3), ContextSpec(), StreamingState.fresh(2))
        _, st = enc.forward_streaming(frames(2), ctx, StreamingState.fresh(2))
        with pytest.raises(ValueError, match="grid"):
            enc.forward_streaming(frames(3), ctx, st)

    def test_inf_lookback_capped(self, caplog):
        enc = make(EncoderConfig(n_blocks=2, d_model=16, d_ff=32, n_heads=2, dropout=0.0, stream_lb_budget=4))
        x = frames(15)
        with caplog.at_level("WARNING"):
            y = enc.stream(x, ContextSpec(INF, 0.0))
        assert "capped" in caplog.text
        ref = enc(x, allow=torch.from_numpy(build_mask(15, 4, 0).dense().copy()))[-1]
        assert (y - ref).abs().max() < 1e-4

    def test_fresh_state(self):
        st = StreamingState.fresh(3)
        assert st.frames_seen == 0 and st.k_caches == [None] * 3 and st.frontend_cache is None
