"""Conv-first Conformer encoder shared by every attention context.

Block layout (pre-norm residuals throughout)::

    x + 0.5 * FF(x) -> x + CausalConv(x) -> x + MaskedMHSA(x) -> x + 0.5 * FF(x) -> LayerNorm

There are no positional embeddings and every convolution is causal, so the
only source of look-ahead is the attention mask. The same parameters serve
full-context, chunked look-ahead and pure streaming inference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .maskgen import INF, ContextSpec, build_mask, is_inf

logger = logging.getLogger(__name__)


@dataclass
class EncoderConfig:
    n_blocks: int = 4
    d_model: int = 144
    d_ff: int = 576
    n_heads: int = 4
    conv_kernel: int = 15
    frontend_dim: int = 512
    dropout: float = 0.1
    # look-back cap (frames) for streaming when the context asks for INF
    stream_lb_budget: int = 135

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.conv_kernel < 3:
            raise ValueError("conv_kernel must be >= 3")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


ENCODER_PRESETS = {
    "toy": EncoderConfig(),
    "base_200m": EncoderConfig(n_blocks=18, d_model=512, d_ff=2048, n_heads=8),
    "xl_2b": EncoderConfig(n_blocks=20, d_model=2048, d_ff=8192, n_heads=16),
}


class NonFiniteActivation(RuntimeError):
    pass


class CausalConv1d(nn.Module):
    """Conv1d over [B, T, C] with ``kernel - 1`` frames of left padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, groups: int = 1):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv1d(in_ch, out_ch, kernel, groups=groups)

    def forward(self, x: Tensor, cache: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        """Returns the output and the last ``kernel - 1`` input frames.

        ``cache`` holds previously seen input frames (fewer than ``kernel - 1``
        at the start of a stream); missing history is zero, matching the
        left padding of the offline path.
        """
        B, _, C = x.shape
        hist = x.new_zeros(B, self.kernel - 1, C)
        if cache is not None and cache.shape[1] > 0:
            n = cache.shape[1]
            hist[:, -n:] = cache
        xp = torch.cat([hist, x], dim=1)
        y = self.conv(xp.transpose(1, 2)).transpose(1, 2)
        return y, xp[:, -(self.kernel - 1):]


class FrontendProjection(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.conv = CausalConv1d(cfg.frontend_dim, cfg.d_model, cfg.conv_kernel)

    def forward(self, x: Tensor, cache: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.conv.conv.in_channels:
            raise ValueError(f"expected input dim {self.conv.conv.in_channels}, got {x.shape[-1]}")
        y, cache = self.conv(x, cache)
        return F.silu(y), cache


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.dropout(self.w2(self.dropout(F.silu(self.w1(self.norm(x))))))


class ConvModule(nn.Module):
    def __init__(self, d_model: int, kernel: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(d_model)
        self.pw_in = nn.Linear(d_model, 2 * d_model)
        self.depthwise = CausalConv1d(d_model, d_model, kernel, groups=d_model)
        # LayerNorm rather than BatchNorm: per-frame, so batch-independent
        self.dw_norm = nn.LayerNorm(d_model)
        self.pw_out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, cache: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        h = F.glu(self.pw_in(self.norm(x)), dim=-1)
        h, cache = self.depthwise(h, cache)
        h = self.pw_out(F.silu(self.dw_norm(h)))
        return self.dropout(h), cache


class MaskedSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.norm = nn.LayerNorm(d_model)
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.n_heads, self.d_head).transpose(1, 2)

    def attend(self, q: Tensor, k: Tensor, v: Tensor, allow: Tensor) -> Tensor:
        """q [B, Tq, D], k/v [B, Tk, D], allow broadcastable to [B, Tq, Tk]."""
        B, Tq, D = q.shape
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.d_head)
        if allow.dim() == 2:
            allow = allow.unsqueeze(0)
        scores = scores.masked_fill(~allow.unsqueeze(1), float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ vh).transpose(1, 2).reshape(B, Tq, D)
        return self.out(ctx)

    def forward(self, x: Tensor, allow: Tensor) -> Tensor:
        h = self.norm(x)
        return self.dropout(self.attend(self.q(h), self.k(h), self.v(h), allow))


class ConformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ff1 = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.conv = ConvModule(cfg.d_model, cfg.conv_kernel, cfg.dropout)
        self.attn = MaskedSelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff2 = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.final_norm = nn.LayerNorm(cfg.d_model)

    def forward(self, x: Tensor, allow: Tensor) -> Tensor:
        x = x + 0.5 * self.ff1(x)
        x = x + self.conv(x)[0]
        x = x + self.attn(x, allow)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


@dataclass
class StreamingState:
    """Per-utterance caches for chunk-by-chunk inference.

    Not thread-safe; one state belongs to one stream.
    """

    frontend_cache: Optional[Tensor] = None
    conv_caches: list = field(default_factory=list)
    k_caches: list = field(default_factory=list)
    v_caches: list = field(default_factory=list)
    frames_seen: int = 0
    n_blocks: Optional[int] = None
    lb_cap: Optional[int] = None

    @classmethod
    def fresh(cls, n_blocks: int) -> "StreamingState":
        return cls(
            conv_caches=[None] * n_blocks,
            k_caches=[None] * n_blocks,
            v_caches=[None] * n_blocks,
            n_blocks=n_blocks,
        )


class DualModeEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.frontend = FrontendProjection(cfg)
        self.blocks = nn.ModuleList([ConformerBlock(cfg) for _ in range(cfg.n_blocks)])

    @property
    def n_taps(self) -> int:
        return self.cfg.n_blocks + 1

    def frontend_project(self, x: Tensor) -> Tensor:
        return self.frontend(x)[0]

    def build_allow(self, T: int, ctx: ContextSpec, lengths: Optional[Tensor] = None,
                    device=None) -> Tensor:
        allow = torch.from_numpy(build_mask(T, ctx.lb_frames, ctx.la_frames).dense().copy())
        allow = allow.to(device)
        if lengths is None:
            return allow
        key_valid = torch.arange(T, device=device)[None, :] < lengths[:, None]
        # padded query rows keep their diagonal so softmax never sees an empty row
        return (allow[None] & key_valid[:, None, :]) | torch.eye(T, dtype=torch.bool, device=device)[None]

    def forward(self, x: Tensor, ctx: ContextSpec = ContextSpec(), lengths: Optional[Tensor] = None,
                allow: Optional[Tensor] = None, check_finite: bool = False) -> list[Tensor]:
        """Full-sequence forward.

        Args:
            x: [B, T, 512] encoder input (or [T, 512]).
            ctx: attention context; one mask is built and used by every block.
            lengths: valid frames per batch item for padded batches.
            allow: explicit boolean mask overriding ``ctx``.

        Returns:
            ``n_blocks + 1`` tensors [B, T, d_model]: the frontend projection
            followed by each block output.
        """
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        T = x.shape[1]
        if T < 1:
            raise ValueError("empty input")
        if allow is None:
            allow = self.build_allow(T, ctx, lengths, device=x.device)
        h = self.frontend(x)[0]
        taps = [h]
        for i, block in enumerate(self.blocks):
            h = block(h, allow)
            if check_finite and not torch.isfinite(h).all():
                raise NonFiniteActivation(f"non-finite activation in block {i}")
            taps.append(h)
        if squeeze:
            taps = [t.squeeze(0) for t in taps]
        return taps

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def forward_streaming(self, chunk: Tensor, ctx: ContextSpec, state: StreamingState,
                          all_layers: bool = False):
        """Process one chunk of the chunk grid and update ``state``.

        ``chunk`` is [B, c, 512] (or [c, 512]) with ``c <= la_frames + 1``;
        every call except the last must cover a full chunk so calls stay on
        the chunk grid of the offline mask. Returns the final-block output
        for the chunk's frames (all taps when ``all_layers``) and the state.
        """
        if is_inf(ctx.la_s):
            raise ValueError("streaming requires a finite look-ahead")
        if state.n_blocks != self.cfg.n_blocks:
            raise ValueError(f"state built for {state.n_blocks} blocks, encoder has {self.cfg.n_blocks}")
        squeeze = chunk.dim() == 2
        if squeeze:
            chunk = chunk.unsqueeze(0)
        C = int(ctx.la_frames) + 1
        c = chunk.shape[1]
        if c > C:
            raise ValueError(f"chunk of {c} frames exceeds chunk size {C}")
        if c < 1:
            raise ValueError("empty chunk")
        if state.frames_seen % C:
            raise ValueError(f"stream is off the chunk grid: {state.frames_seen} frames seen, C={C}")

        lb = ctx.lb_frames
        if is_inf(lb):
            if state.lb_cap is None:
                logger.warning("INF look-back capped at %d frames for streaming", self.cfg.stream_lb_budget)
            lb = self.cfg.stream_lb_budget
        state.lb_cap = lb

        h, state.frontend_cache = self.frontend(chunk, state.frontend_cache)
        taps = [h]
        for i, block in enumerate(self.blocks):
            h = h + 0.5 * block.ff1(h)
            conv_out, state.conv_caches[i] = block.conv(h, state.conv_caches[i])
            h = h + conv_out

            attn = block.attn
            hn = attn.norm(h)
            k_new, v_new = attn.k(hn), attn.v(hn)
            k_prev, v_prev = state.k_caches[i], state.v_caches[i]
            if k_prev is not None:
                k_all = torch.cat([k_prev, k_new], dim=1)
                v_all = torch.cat([v_prev, v_new], dim=1)
            else:
                k_all, v_all = k_new, v_new
            n_cache = k_all.shape[1] - c
            # absolute key positions frames_seen - n_cache ... frames_seen + c - 1
            q_pos = torch.arange(c) + state.frames_seen
            k_pos = torch.arange(k_all.shape[1]) + state.frames_seen - n_cache
            allow = k_pos[None, :] >= q_pos[:, None] - lb
            h = h + attn.attend(attn.q(hn), k_all, v_all, allow)
            if lb > 0:
                state.k_caches[i] = k_all[:, -lb:]
                state.v_caches[i] = v_all[:, -lb:]
            else:
                state.k_caches[i] = k_all[:, :0]
                state.v_caches[i] = v_all[:, :0]

            h = h + 0.5 * block.ff2(h)
            h = block.final_norm(h)
            taps.append(h)
        state.frames_seen += c
        if squeeze:
            taps = [t.squeeze(0) for t in taps]
        return (taps if all_layers else taps[-1]), state

    def stream(self, x: Tensor, ctx: ContextSpec, all_layers: bool = False):
        """Run a whole utterance through ``forward_streaming`` chunk by chunk."""
        C = int(ctx.la_frames) + 1
        state = StreamingState.fresh(self.cfg.n_blocks)
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        outs = []
        for start in range(0, x.shape[1], C):
            y, state = self.forward_streaming(x[:, start:start + C], ctx, state, all_layers=True)
            outs.append(y)
        taps = [torch.cat([o[i] for o in outs], dim=1) for i in range(self.n_taps)]
        if squeeze:
            taps = [t.squeeze(0) for t in taps]
        return taps if all_layers else taps[-1]
