"""Training objectives and augmentation.

* random-projection quantizer targets and masked code prediction (pretraining)
* frame-level cluster-ID cross entropy (distillation)
* RNN-T and CTC losses, each as an exact log-space forward-backward with an
  analytic gradient (float64 numpy), plus torch autograd wrappers for training
* span masking and SpecAugment
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

BLANK = 0
NEG_INF = -np.inf

ArrayLike = Union[np.ndarray, Tensor]


# --------------------------------------------------------------------------
# Random-projection quantizer


class RandomQuantizer:
    """Frozen random projection + codebook producing one code per frame.

    Both matrices are drawn from a private seeded generator and are never
    registered as parameters, so no optimizer can touch them.
    """

    def __init__(self, input_dim: int = 512, code_dim: int = 16, n_codes: int = 1024, seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        proj = torch.empty(input_dim, code_dim)
        std = (2.0 / (input_dim + code_dim)) ** 0.5  # xavier normal
        proj.normal_(0.0, std, generator=g)
        codebook = torch.randn(n_codes, code_dim, generator=g)
        self.projection = proj
        self.codebook = F.normalize(codebook, dim=-1)
        self.n_codes = n_codes
        self.seed = seed

    @torch.no_grad()
    def codes(self, x: ArrayLike) -> ArrayLike:
        return brq_codes(x, self)


def brq_codes(x: ArrayLike, q: RandomQuantizer) -> ArrayLike:
    """Nearest codebook row to the l2-normalized projection of each frame.

    Works on [..., 512] numpy arrays or tensors and returns integer codes of
    shape [...] in the same array family.
    """
    is_np = isinstance(x, np.ndarray)
    xt = torch.as_tensor(x, dtype=torch.float32)
    if xt.shape[-1] != q.projection.shape[0]:
        raise ValueError(f"expected frame dim {q.projection.shape[0]}, got {xt.shape[-1]}")
    z = F.normalize(xt @ q.projection, dim=-1)
    # for unit vectors, min euclidean distance == max dot product
    codes = (z @ q.codebook.T).argmax(dim=-1)
    return codes.numpy() if is_np else codes


# --------------------------------------------------------------------------
# Span masking


@dataclass(frozen=True)
class SpanMaskConfig:
    span_frames: int = 8  # 320 ms at 40 ms per frame
    p_start: float = 0.02
    noise_std: float = 0.1


SPAN_PRESETS = {
    "baseline_streaming": SpanMaskConfig(span_frames=8),
    "baseline_full_context": SpanMaskConfig(span_frames=10),  # 400 ms
}


def sample_span_mask(T: int, cfg: SpanMaskConfig, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(p_start) span starts, each covering ``span_frames`` frames."""
    starts = rng.random(T) < cfg.p_start
    masked = np.zeros(T, dtype=bool)
    for s in np.flatnonzero(starts):
        masked[s:s + cfg.span_frames] = True
    return masked


def apply_span_mask(x: ArrayLike, masked: np.ndarray, rng: np.random.Generator,
                    noise_std: float = 0.1) -> ArrayLike:
    """Replace masked frames of [T, D] features by N(0, noise_std^2) noise."""
    masked = np.asarray(masked, dtype=bool)
    n = int(masked.sum())
    if n == 0:
        return x.copy() if isinstance(x, np.ndarray) else x.clone()
    noise = rng.standard_normal((n, x.shape[-1])) * noise_std
    if isinstance(x, np.ndarray):
        out = x.copy()
        out[masked] = noise.astype(x.dtype)
    else:
        out = x.clone()
        out[torch.from_numpy(masked)] = torch.from_numpy(noise).to(x.dtype)
    return out


def expected_span_coverage(span_frames: int, p_start: float) -> float:
    """Stationary masked fraction away from the sequence start."""
    return 1.0 - (1.0 - p_start) ** span_frames


# --------------------------------------------------------------------------
# Cross-entropy objectives


def brq_loss(student_logits: Tensor, codes: Tensor, masked: Tensor) -> Tensor:
    """Mean cross entropy over masked positions only.

    Accepts [T, K] / [T] / [T] or batched [B, T, K] / [B, T] / [B, T]; in the
    batched case ``masked`` must already exclude padding.
    """
    masked = torch.as_tensor(masked, dtype=torch.bool)
    if not bool(masked.any()):
        raise ValueError("no masked positions; resample the batch")
    return F.cross_entropy(student_logits[masked].float(), torch.as_tensor(codes)[masked].long())


def distill_loss(student_logits: Tensor, teacher_codes: Tensor, valid: Tensor | None = None) -> Tensor:
    """Mean cross entropy of cluster-ID prediction over every (valid) frame."""
    teacher_codes = torch.as_tensor(teacher_codes).long()
    K = student_logits.shape[-1]
    if valid is not None:
        valid = torch.as_tensor(valid, dtype=torch.bool)
        student_logits, teacher_codes = student_logits[valid], teacher_codes[valid]
    if teacher_codes.numel() and (int(teacher_codes.min()) < 0 or int(teacher_codes.max()) >= K):
        raise ValueError(f"teacher code out of range [0, {K})")
    return F.cross_entropy(student_logits.reshape(-1, K).float(), teacher_codes.reshape(-1))


# --------------------------------------------------------------------------
# RNN-T


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _lae_scan(a: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Solve r[0] = a[0], r[u] = logaddexp(a[u], r[u-1] + e[u-1]).

    Closed form: r = E + logcumsumexp(a - E) with E[u] = sum_{k<u} e[k].
    """
    E = np.concatenate([[0.0], np.cumsum(e)])
    return E + np.logaddexp.accumulate(a - E)


def rnnt_loss(logits: np.ndarray, labels: Sequence[int], blank: int = BLANK) -> tuple[float, np.ndarray]:
    """Transducer negative log-likelihood and its gradient w.r.t. ``logits``.

    ``logits`` is [T, U+1, V]. The lattice node (t, u) emits blank to
    (t+1, u) or label ``labels[u]`` to (t, u+1); the final blank at
    (T-1, U) terminates. Computed in float64.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T, U1, V = logits.shape
    U = len(labels)
    if U1 != U + 1:
        raise ValueError(f"logits have {U1} label positions, expected U+1={U + 1}")
    if T == 0:
        raise ValueError("T must be >= 1")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if U and (labels.min() < 0 or labels.max() >= V or np.any(labels == blank)):
        raise ValueError("labels must be non-blank ids in [0, V)")

    lp = _log_softmax(logits)
    blank_lp = lp[:, :, blank]  # [T, U+1]
    emit_lp = lp[:, np.arange(U), labels] if U else np.zeros((T, 0))  # [T, U]

    alpha = np.empty((T, U + 1))
    alpha[0] = np.concatenate([[0.0], np.cumsum(emit_lp[0])])
    for t in range(1, T):
        alpha[t] = _lae_scan(alpha[t - 1] + blank_lp[t - 1], emit_lp[t])

    log_like = alpha[T - 1, U] + blank_lp[T - 1, U]

    beta = np.empty((T, U + 1))
    last = np.full(U + 1, NEG_INF)
    last[U] = blank_lp[T - 1, U]
    # reverse scan along u: beta[t, u] = logaddexp(b[u], beta[t, u+1] + e[u])
    beta[T - 1] = _lae_scan(last[::-1], emit_lp[T - 1][::-1])[::-1]
    for t in range(T - 2, -1, -1):
        b = beta[t + 1] + blank_lp[t]
        beta[t] = _lae_scan(b[::-1], emit_lp[t][::-1])[::-1]

    # occupancy of each outgoing arc
    g_lp = np.zeros_like(lp)
    nxt = np.full((T, U + 1), NEG_INF)
    nxt[:-1] = beta[1:]
    nxt[T - 1, U] = 0.0
    g_lp[:, :, blank] = -np.exp(alpha + blank_lp + nxt - log_like)
    if U:
        g_emit = -np.exp(alpha[:, :U] + emit_lp + beta[:, 1:] - log_like)
        np.add.at(g_lp, (slice(None), np.arange(U), labels), g_emit)
    prob = np.exp(lp)
    grad = g_lp - prob * g_lp.sum(axis=-1, keepdims=True)
    return float(-log_like), grad


# --------------------------------------------------------------------------
# CTC


def ctc_loss(logits: np.ndarray, labels: Sequence[int], blank: int = BLANK) -> tuple[float, np.ndarray]:
    """CTC negative log-likelihood and gradient w.r.t. ``logits`` [T, V]."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    T, V = logits.shape
    U = len(labels)
    if U and (labels.min() < 0 or labels.max() >= V or np.any(labels == blank)):
        raise ValueError("labels must be non-blank ids in [0, V)")
    repeats = int(np.sum(labels[1:] == labels[:-1])) if U > 1 else 0
    if T < U + repeats:
        raise ValueError(f"{U} labels ({repeats} repeats) cannot be aligned to {T} frames")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")

    lp = _log_softmax(logits)
    ext = np.full(2 * U + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    S = len(ext)
    # skip transition s-2 -> s allowed onto a label that differs from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    e = lp[:, ext]  # [T, S]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = e[0, 0]
    if S > 1:
        alpha[0, 1] = e[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + e[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = e[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = e[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nb = beta[t + 1]
        b = nb.copy()
        b[:-1] = np.logaddexp(b[:-1], nb[1:])
        b[:-2] = np.where(skip[2:], np.logaddexp(b[:-2], nb[2:]), b[:-2])
        beta[t] = b + e[t]

    ends = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    log_like = ends
    if not np.isfinite(log_like):
        raise ValueError("labels not expressible within T frames")

    gamma = np.exp(alpha + beta - e - log_like)  # state occupancy [T, S]
    occ = np.zeros((T, V))
    np.add.at(occ, (slice(None), ext), gamma)
    grad = np.exp(lp) - occ  # rows of occ sum to 1
    return float(-log_like), grad


# --------------------------------------------------------------------------
# torch wrappers for batched training


class _SequenceLossFn(torch.autograd.Function):
    """Mean over the batch of an exact numpy loss with analytic gradient."""

    @staticmethod
    def forward(ctx, logits, kind, labels, t_lens, u_lens):
        arr = logits.detach().cpu().double().numpy()
        grad = np.zeros_like(arr)
        total = 0.0
        B = arr.shape[0]
        for b in range(B):
            T, U = int(t_lens[b]), int(u_lens[b])
            y = labels[b][:U]
            if kind == "rnnt":
                loss, g = rnnt_loss(arr[b, :T, :U + 1], y)
                grad[b, :T, :U + 1] = g
            else:
                loss, g = ctc_loss(arr[b, :T], y)
                grad[b, :T] = g
            total += loss
        ctx.save_for_backward(torch.from_numpy(grad / B).to(logits.dtype))
        return logits.new_tensor(total / B)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad * grad_out, None, None, None, None


def rnnt_loss_batch(logits: Tensor, labels: list, t_lens, u_lens) -> Tensor:
    """``logits`` [B, T, U+1, V]; mean per-utterance transducer loss."""
    return _SequenceLossFn.apply(logits, "rnnt", [np.asarray(y) for y in labels], list(t_lens), list(u_lens))


def ctc_loss_batch(logits: Tensor, labels: list, t_lens) -> Tensor:
    """``logits`` [B, T, V]; mean per-utterance CTC loss."""
    return _SequenceLossFn.apply(logits, "ctc", [np.asarray(y) for y in labels], list(t_lens),
                                 [len(y) for y in labels])


# --------------------------------------------------------------------------
# SpecAugment


@dataclass(frozen=True)
class SpecAugConfig:
    n_freq_masks: int = 2
    max_freq_width: int = 64
    n_time_masks: int = 2
    max_time_width: int = 10


def specaug(x: ArrayLike, rng: np.random.Generator, cfg: SpecAugConfig = SpecAugConfig()) -> ArrayLike:
    """Zero ``n_freq_masks`` feature bands and ``n_time_masks`` time bands of [T, D]."""
    out = x.copy() if isinstance(x, np.ndarray) else x.clone()
    T, D = out.shape[-2], out.shape[-1]
    for _ in range(cfg.n_freq_masks):
        w = int(rng.integers(0, min(cfg.max_freq_width, D) + 1))
        f0 = int(rng.integers(0, D - w + 1))
        out[..., f0:f0 + w] = 0
    for _ in range(cfg.n_time_masks):
        w = int(rng.integers(0, min(cfg.max_time_width, T) + 1))
        t0 = int(rng.integers(0, T - w + 1))
        out[..., t0:t0 + w, :] = 0
    return out
