"""Frozen-encoder probing: task heads, layer sweeps, and their metrics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from numpy.lib.stride_tricks import sliding_window_view
from torch import nn

from .audio_io import Waveform
from .encoder import DualModeEncoder
from .maskgen import ContextSpec
from .objectives import BLANK, ctc_loss_batch

logger = logging.getLogger(__name__)

TASK_METRIC = {
    "asr_ctc": "wer",
    "classification": "accuracy",
    "speaking_rate": "mae",
    "pitch_contour": "dtw_corr",
    "intensity_contour": "dtw_corr",
}
HIGHER_IS_BETTER = {"accuracy"}
SEMANTIC_TASKS = ("asr_ctc", "speaking_rate")
ACOUSTIC_TASKS = ("pitch_contour", "intensity_contour")

FRAME_HOP = 640  # samples per 40 ms encoder frame
FRAME_SPAN = 880  # samples covered by one stacked encoder frame
INTENSITY_FLOOR = 1e-5
F0_MIN, F0_MAX = 50.0, 400.0


# --------------------------------------------------------------------------
# metrics


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence, hyp: Sequence) -> float:
    """Token edit distance divided by reference length.

    An empty reference divides by 1 instead (and warns when the hypothesis
    is non-empty).
    """
    if isinstance(ref, str):
        ref = ref.split()
    if isinstance(hyp, str):
        hyp = hyp.split()
    if not ref:
        if hyp:
            warnings.warn("empty reference with non-empty hypothesis; WER = len(hyp)", stacklevel=2)
        return float(len(hyp))
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    errs = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    n = sum(len(r) for r in refs)
    return errs / max(n, 1)


def _window_corr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation of every window pair; NaN where a window is flat."""
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    an = np.sqrt((ac * ac).sum(axis=1))
    bn = np.sqrt((bc * bc).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (ac @ bc.T) / (an[:, None] * bn[None, :])
    flat = (an[:, None] < 1e-12) | (bn[None, :] < 1e-12)
    corr[flat] = np.nan
    return np.clip(corr, -1.0, 1.0)


def dtw_corr(pred: Sequence[float], ref: Sequence[float], window: int = 5, flat_cost: float = 1.0) -> float:
    """DTW between two contours under a windowed correlation distance.

    Each contour becomes its sequence of length-``window`` sliding windows.
    The local cost is ``1 - pearson(win_i, win_j)`` (``flat_cost`` if either
    window is constant). Steps are match/insert/delete; the minimal total
    cost is divided by the length of the optimal path.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if len(pred) < window or len(ref) < window:
        raise ValueError(f"contours must have at least {window} frames")
    corr = _window_corr(sliding_window_view(pred, window), sliding_window_view(ref, window))
    cost = np.where(np.isnan(corr), flat_cost, 1.0 - corr)
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    steps = np.zeros((n + 1, m + 1), dtype=np.int64)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row_cost = cost[i - 1]
        for j in range(1, m + 1):
            # diagonal first so it wins ties
            best, k = acc[i - 1, j - 1], steps[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best, k = acc[i - 1, j], steps[i - 1, j]
            if acc[i, j - 1] < best:
                best, k = acc[i, j - 1], steps[i, j - 1]
            acc[i, j] = best + row_cost[j - 1]
            steps[i, j] = k + 1
    return float(acc[n, m] / steps[n, m])


def _frame_segments(x: np.ndarray, n_frames: int):
    for j in range(n_frames):
        yield x[j * FRAME_HOP: j * FRAME_HOP + FRAME_SPAN]


def _autocorr_f0(seg: np.ndarray, sr: int) -> float:
    seg = seg - seg.mean()
    n = len(seg)
    lo, hi = int(np.floor(sr / F0_MAX)), int(np.ceil(sr / F0_MIN))
    hi = min(hi, n - 2)
    if hi <= lo + 2:
        return 0.0
    lags = np.arange(lo - 1, hi + 2)
    r = np.empty(len(lags))
    for i, L in enumerate(lags):
        a, b = seg[: n - L], seg[L:]
        den = np.sqrt((a * a).sum() * (b * b).sum())
        r[i] = (a * b).sum() / den if den > 0 else 0.0
    inner = r[1:-1]
    peak = inner.max()
    if peak < 0.5:
        return 0.0
    # earliest local maximum close to the global peak avoids octave-down errors
    for i in range(1, len(r) - 1):
        if r[i] >= r[i - 1] and r[i] >= r[i + 1] and r[i] >= 0.9 * peak:
            break
    y0, y1, y2 = r[i - 1], r[i], r[i + 1]
    den = y0 - 2 * y1 + y2
    shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
    return float(sr / (lags[i] + shift))


def reference_contours(waveform: Waveform, transcript: Optional[str] = None):
    """Per-40 ms-frame pitch (Hz, 0 if unvoiced) and log-RMS intensity.

    Frame ``j`` analyses the 880 samples that feed encoder frame ``j``, so
    contours align one-to-one with encoder outputs. Speaking rate is
    transcript words per second (NaN without a transcript).
    """
    from .frontend import num_encoder_frames

    x = np.asarray(waveform.samples, dtype=np.float64)
    sr = waveform.sample_rate
    n = num_encoder_frames(len(x))
    pitch = np.zeros(n)
    intensity = np.zeros(n)
    for j, seg in enumerate(_frame_segments(x, n)):
        rms = np.sqrt(np.mean(seg * seg))
        intensity[j] = np.log(max(rms, INTENSITY_FLOOR))
        if rms > INTENSITY_FLOOR:
            pitch[j] = _autocorr_f0(seg, sr)
    rate = len(transcript.split()) / waveform.duration_s if transcript is not None else float("nan")
    return pitch, intensity, rate


# --------------------------------------------------------------------------
# probes


@dataclass(frozen=True)
class ProbeTask:
    kind: str

    def __post_init__(self):
        if self.kind not in TASK_METRIC:
            raise ValueError(f"unknown probe task {self.kind!r}")

    @property
    def metric(self) -> str:
        return TASK_METRIC[self.kind]


@dataclass(frozen=True)
class LayerSelection:
    mode: str = "single"
    index: Optional[int] = None  # 0-based Conformer block for "single"

    def __post_init__(self):
        if self.mode not in ("single", "weighted_sum"):
            raise ValueError(f"unknown layer selection {self.mode!r}")
        if self.mode == "single" and self.index is None:
            raise ValueError("single-layer selection needs a block index")

    def label(self):
        return self.index if self.mode == "single" else "all"


@dataclass
class ProbeItem:
    utt_id: str
    feats: np.ndarray
    tokens: list = field(default_factory=list)
    class_id: Optional[int] = None
    pitch: Optional[np.ndarray] = None
    intensity: Optional[np.ndarray] = None
    rate: Optional[float] = None


@dataclass
class ProbeConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 3e-3
    mlp_hidden: int = 64
    seed: int = 0


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def encode_items(encoder: DualModeEncoder, items: Sequence[ProbeItem], ctx: ContextSpec) -> list[list[np.ndarray]]:
    """All encoder taps per item under ``ctx`` (masked offline forward)."""
    was = encoder.training
    encoder.eval()
    out = [[t.numpy() for t in encoder(torch.from_numpy(it.feats), ctx)] for it in items]
    encoder.train(was)
    return out


class ProbeHead(nn.Module):
    def __init__(self, task: ProbeTask, sel: LayerSelection, n_taps: int, d_model: int,
                 n_out: int, hidden: int):
        super().__init__()
        self.task, self.sel = task, sel
        if sel.mode == "weighted_sum":
            self.layer_logits = nn.Parameter(torch.zeros(n_taps))
        if task.kind == "classification":
            self.net = nn.Sequential(nn.Linear(d_model, hidden), nn.ReLU(), nn.Linear(hidden, n_out))
        else:
            self.net = nn.Linear(d_model, n_out)

    def layer_weights(self) -> Optional[torch.Tensor]:
        if self.sel.mode != "weighted_sum":
            return None
        return torch.softmax(self.layer_logits, dim=0)

    def select(self, taps: torch.Tensor) -> torch.Tensor:
        """taps [n_taps, T, D] -> [T, D]."""
        if self.sel.mode == "single":
            return taps[self.sel.index + 1]
        return torch.einsum("l,ltd->td", self.layer_weights(), taps)

    def forward(self, taps: torch.Tensor) -> torch.Tensor:
        h = self.select(taps)
        if self.task.kind == "classification":
            return self.net(h.mean(dim=0))
        return self.net(h)


def _check_labels(task: ProbeTask, items: Sequence[ProbeItem]):
    attr = {"asr_ctc": "tokens", "classification": "class_id", "speaking_rate": "rate",
            "pitch_contour": "pitch", "intensity_contour": "intensity"}[task.kind]
    for it in items:
        v = getattr(it, attr)
        if v is None or (task.kind == "asr_ctc" and len(v) == 0):
            raise ValueError(f"{it.utt_id}: missing {attr} labels for task {task.kind}")
        if task.kind == "speaking_rate" and not np.isfinite(v):
            raise ValueError(f"{it.utt_id}: missing speaking-rate target")


PITCH_SCALE = 100.0


def _head_loss(head: ProbeHead, taps_b, items_b) -> torch.Tensor:
    kind = head.task.kind
    if kind == "asr_ctc":
        rows = [head(t) for t in taps_b]
        logits = torch.nn.utils.rnn.pad_sequence(rows, batch_first=True)
        return ctc_loss_batch(logits, [it.tokens for it in items_b], [r.shape[0] for r in rows])
    if kind == "classification":
        logits = torch.stack([head(t) for t in taps_b])
        return F.cross_entropy(logits, torch.tensor([it.class_id for it in items_b]))
    losses = []
    for t, it in zip(taps_b, items_b):
        y = head(t)[:, 0]
        if kind == "speaking_rate":
            losses.append((y.mean() - it.rate) ** 2)
        else:
            ref = it.pitch / PITCH_SCALE if kind == "pitch_contour" else it.intensity
            losses.append(((y - torch.as_tensor(ref, dtype=y.dtype)) ** 2).mean())
    return torch.stack(losses).mean()


def train_probe(encoder: DualModeEncoder, task: ProbeTask, sel: LayerSelection, ctx: ContextSpec,
                items: Sequence[ProbeItem], cfg: ProbeConfig = ProbeConfig(), n_classes: int = 2,
                vocab_size: int = 9, taps=None) -> ProbeHead:
    """Train a lightweight head on frozen encoder outputs.

    Only the head (and the softmax layer weights for ``weighted_sum``)
    receives updates; the encoder is run under ``no_grad``.
    """
    _check_labels(task, items)
    n_blocks = encoder.cfg.n_blocks
    if sel.mode == "single" and not 0 <= sel.index < n_blocks:
        raise IndexError(f"block index {sel.index} out of range for {n_blocks} blocks")
    if taps is None:
        taps = encode_items(encoder, items, ctx)
    taps = [torch.from_numpy(np.stack(t)) for t in taps]

    n_out = {"asr_ctc": vocab_size, "classification": n_classes}.get(task.kind, 1)
    torch.manual_seed(cfg.seed)
    head = ProbeHead(task, sel, encoder.n_taps, encoder.cfg.d_model, n_out, cfg.mlp_hidden)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(items)
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        loss = _head_loss(head, [taps[i] for i in idx], [items[i] for i in idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return head


def ctc_greedy(logits: torch.Tensor, blank: int = BLANK) -> list[int]:
    ids = logits.argmax(dim=-1).tolist()
    out, prev = [], None
    for k in ids:
        if k != blank and k != prev:
            out.append(k)
        prev = k
    return out


@torch.no_grad()
def evaluate_probe(head: ProbeHead, encoder: DualModeEncoder, items: Sequence[ProbeItem], ctx: ContextSpec,
                   taps=None) -> float:
    if taps is None:
        taps = encode_items(encoder, items, ctx)
    taps = [torch.from_numpy(np.stack(t)) for t in taps]
    kind = head.task.kind
    if kind == "asr_ctc":
        return corpus_wer([it.tokens for it in items], [ctc_greedy(head(t)) for t in taps])
    if kind == "classification":
        pred = [int(head(t).argmax()) for t in taps]
        return float(np.mean([p == it.class_id for p, it in zip(pred, items)]))
    if kind == "speaking_rate":
        return float(np.mean([abs(float(head(t)[:, 0].mean()) - it.rate) for t, it in zip(taps, items)]))
    scores = []
    for t, it in zip(taps, items):
        ref = it.pitch if kind == "pitch_contour" else it.intensity
        if len(ref) < 5:
            continue
        scores.append(dtw_corr(head(t)[:, 0].numpy(), ref))
    return float(np.mean(scores))


@dataclass
class ProbeReport:
    rows: list = field(default_factory=list)

    def best_layers(self) -> dict:
        """Per (task, context): best and worst layer by the task metric."""
        out = {}
        keys = sorted({(r["task"], r["context"]) for r in self.rows if r["layer"] != "all"})
        for task, ctx in keys:
            rs = [r for r in self.rows if r["task"] == task and r["context"] == ctx and r["layer"] != "all"]
            sign = -1 if rs[0]["metric"] in HIGHER_IS_BETTER else 1
            ranked = sorted(rs, key=lambda r: (sign * r["value"], r["layer"]))
            out[f"{task}@{ctx}"] = {"metric": rs[0]["metric"], "best_layer": ranked[0]["layer"],
                                    "worst_layer": ranked[-1]["layer"]}
        return out

    def save(self, root, plots: bool = True) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        fields = ["task", "metric", "layer", "context", "split", "value", "checkpoint_id", "seed"]
        with open(root / "probe_report.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in fields})
        (root / "probe_report.json").write_text(
            json.dumps({"rows": self.rows, "best_layers": self.best_layers()}, indent=1))
        if plots:
            self.plot(root)

    def plot(self, root) -> list:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        paths = []
        for task in sorted({r["task"] for r in self.rows}):
            rs = [r for r in self.rows if r["task"] == task and r["layer"] != "all"]
            fig, ax = plt.subplots(figsize=(4, 3))
            for ctx in sorted({r["context"] for r in rs}):
                pts = sorted((r["layer"] + 1, r["value"]) for r in rs if r["context"] == ctx)
                ax.plot(*zip(*pts), marker="o", label=ctx)
            ax.set_xlabel("block")
            ax.set_ylabel(rs[0]["metric"])
            ax.set_title(task)
            ax.legend(fontsize=7)
            fig.tight_layout()
            p = Path(root) / f"{task}.svg"
            fig.savefig(p, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(p)
        return paths


def layer_sweep(encoder: DualModeEncoder, tasks: Sequence[ProbeTask], ctx: ContextSpec,
                train_items: Sequence[ProbeItem], dev_items: Sequence[ProbeItem],
                cfg: ProbeConfig = ProbeConfig(), checkpoint_id: str = "unknown",
                n_classes: int = 2, vocab_size: int = 9) -> ProbeReport:
    """One single-block probe per (block, task), scored on ``dev_items``."""
    before = parameter_hash(encoder)
    train_taps = encode_items(encoder, train_items, ctx)
    dev_taps = encode_items(encoder, dev_items, ctx)
    report = ProbeReport()
    for task in tasks:
        for b in range(encoder.cfg.n_blocks):
            sel = LayerSelection("single", b)
            head = train_probe(encoder, task, sel, ctx, train_items, cfg, n_classes, vocab_size, taps=train_taps)
            value = evaluate_probe(head, encoder, dev_items, ctx, taps=dev_taps)
            report.rows.append({
                "task": task.kind, "metric": task.metric, "layer": b, "context": ctx.label(),
                "split": "dev", "value": value, "checkpoint_id": checkpoint_id, "seed": cfg.seed,
            })
            logger.info("probe %s block %d %s: %s=%.4f", task.kind, b, ctx.label(), task.metric, value)
    if parameter_hash(encoder) != before:
        raise RuntimeError("encoder parameters changed during probing")
    return report
