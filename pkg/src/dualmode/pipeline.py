"""Stage orchestration: pretraining, transducer fine-tuning, distillation, evaluation.

Stage DAG (parent stage -> child stage)::

    S1 -> S2 -> S3 -> S4          (main recipe)
    S1 -> distill_from_E1 -> S4   (teacher ablation)
    brq_dm -> S4                  (dual-mode pretraining ablation)
    baseline_streaming, baseline_full_context   (single-mode, standalone)

Every step draws its randomness from ``(seed, step)`` alone, so a run that
resumes from a mid-run checkpoint replays exactly the same batches, masks,
contexts and dropout as an uninterrupted run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import objectives as obj
from .audio_io import ManifestEntry, Tokenizer, load_manifest, read_audio
from .checkpoint import load_checkpoint, load_meta, save_checkpoint
from .config import RunConfig, stage_config
from .encoder import DualModeEncoder, EncoderConfig
from .frontend import FeatureCache, compute_features
from .maskgen import FULL_CONTEXT, STREAMING, ContextSpec, is_inf, sample_context, sampling_space
from .probe import (LayerSelection, ProbeConfig, ProbeItem, ProbeTask, corpus_wer, encode_items,
                    evaluate_probe, reference_contours, train_probe)
from .quantizer import assign, extract_embeddings, kmeans_fit
from .transducer import Transducer, TransducerConfig, greedy_transducer_decode

logger = logging.getLogger(__name__)

PARENTS = {
    "S1": (),
    "S2": ("S1",),
    "S3": ("S2",),
    "distill_from_E1": ("S1",),
    "brq_dm": (),
    "S4": ("S3", "distill_from_E1", "brq_dm"),
    "baseline_streaming": (),
    "baseline_full_context": (),
}
TEACHER_STAGE = {"S3": "S2", "distill_from_E1": "S1"}
TRANSDUCER_STAGES = ("S2", "S4", "baseline_streaming", "baseline_full_context")
# checkpoint names used in reports
CHECKPOINT_NAME = {"S1": "E1", "S2": "E2", "S3": "E3", "S4": "E4"}


class PrerequisiteError(RuntimeError):
    pass


class LineageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# data


@dataclass
class Corpus:
    entries: dict  # utt_id -> ManifestEntry
    features: dict  # utt_id -> [T40, 512] float32
    splits: dict  # name -> sorted utt_ids
    tokenizer: Tokenizer
    classes: list = field(default_factory=list)

    def split(self, name: str) -> list[str]:
        return self.splits[name]

    def transcribed(self, ids: Sequence[str]) -> list[str]:
        return [u for u in ids if self.entries[u].transcript]


def _split_of(utt_id: str, test_fraction: float, dev_fraction: float) -> str:
    h = int(hashlib.sha1(utt_id.encode()).hexdigest()[:8], 16) / 0xFFFFFFFF
    if h < test_fraction:
        return "test"
    if h < test_fraction + dev_fraction:
        return "dev"
    return "train"


def prepare_corpus(cfg: RunConfig) -> Corpus:
    entries = load_manifest(cfg.data.manifest)
    cache = FeatureCache(cfg.data.feature_cache) if cfg.data.feature_cache else None
    feats = {}
    for e in entries:
        f = cache.get(e.utt_id) if cache else None
        if f is None:
            f = compute_features(read_audio(e.audio_path))
            if cache:
                cache.put(e.utt_id, f)
        feats[e.utt_id] = f
    splits = {"train": [], "dev": [], "test": []}
    for e in entries:
        splits[_split_of(e.utt_id, cfg.data.test_fraction, cfg.data.dev_fraction)].append(e.utt_id)
    splits = {k: sorted(v) for k, v in splits.items()}
    tok = Tokenizer.from_transcripts(e.transcript for e in entries)
    classes = sorted({e.class_label for e in entries if e.class_label})
    return Corpus({e.utt_id: e for e in entries}, feats, splits, tok, classes)


def _pad(feats: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(f) for f in feats)
    x = torch.zeros(len(feats), T, feats[0].shape[1])
    for i, f in enumerate(feats):
        x[i, : len(f)] = torch.from_numpy(f)
    return x, torch.tensor([len(f) for f in feats])


def _valid_mask(lengths: torch.Tensor, T: int) -> torch.Tensor:
    return torch.arange(T)[None, :] < lengths[:, None]


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step``: consecutive slices of per-epoch permutations."""
    batch_size = min(batch_size, n)
    per_epoch = n // batch_size
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 7919, epoch]).permutation(n)
    return perm[k * batch_size: (k + 1) * batch_size]


def lr_at(step: int, lr: float, warmup: int) -> float:
    """Linear warmup then inverse-sqrt decay (``step`` is 1-based)."""
    if warmup <= 0:
        return lr
    return lr * min(step / warmup, math.sqrt(warmup / step))


# --------------------------------------------------------------------------
# models


def build_encoder(cfg: EncoderConfig, seed: int) -> DualModeEncoder:
    torch.manual_seed(seed)
    return DualModeEncoder(cfg)


def transducer_config(cfg: RunConfig, vocab_size: int) -> TransducerConfig:
    t = cfg.stage.transducer
    return TransducerConfig(vocab_size=vocab_size, embed_dim=t.embed_dim, pred_hidden=t.pred_hidden,
                            pred_layers=t.pred_layers, joint_dim=t.joint_dim)


def load_encoder(path) -> tuple[DualModeEncoder, dict]:
    parts, meta, _ = load_checkpoint(path)
    enc = DualModeEncoder(EncoderConfig(**meta["encoder_config"]))
    enc.load_state_dict(parts["encoder"])
    enc.eval()
    return enc, meta


def load_asr_model(path) -> tuple[DualModeEncoder, Transducer, dict]:
    parts, meta, _ = load_checkpoint(path)
    if "transducer" not in parts:
        raise PrerequisiteError(f"{path} ({meta['stage']}) has no transducer decoder")
    enc = DualModeEncoder(EncoderConfig(**meta["encoder_config"]))
    enc.load_state_dict(parts["encoder"])
    tr = Transducer(enc.cfg.d_model, TransducerConfig(**meta["transducer_config"]))
    tr.load_state_dict(parts["transducer"])
    enc.eval()
    tr.eval()
    return enc, tr, meta


def validate_lineage(meta: dict) -> None:
    """Check every parent/child link of the recorded lineage against the DAG."""
    chain = [l["stage"] for l in meta.get("lineage", [])] + [meta["stage"]]
    if PARENTS.get(chain[0], None) is None:
        raise LineageError(f"unknown stage {chain[0]!r}")
    if PARENTS[chain[0]] and len(chain) == 1:
        raise LineageError(f"{chain[0]} checkpoint records no parent")
    if chain[0] not in ("S1", "brq_dm", "baseline_streaming", "baseline_full_context"):
        raise LineageError(f"lineage must start at a root stage, starts at {chain[0]}")
    for parent, child in zip(chain, chain[1:]):
        if parent not in PARENTS.get(child, ()):
            raise LineageError(f"invalid lineage link {parent} -> {child}")


# --------------------------------------------------------------------------
# training loop


@dataclass
class StageResult:
    path: Path
    checkpoint_id: str
    losses: list
    meta: dict


def _require_parent(cfg: RunConfig) -> Optional[dict]:
    stage = cfg.stage.name
    need = PARENTS[stage]
    if not need:
        return None
    if not cfg.stage.init:
        raise PrerequisiteError(f"stage {stage} needs a parent checkpoint from {need} (stage.init)")
    meta = load_meta(cfg.stage.init)
    if meta["stage"] not in need:
        raise PrerequisiteError(f"stage {stage} needs a parent from {need}, got {meta['stage']}")
    validate_lineage(meta)
    return meta


def _lineage_of(meta: Optional[dict], path) -> list:
    if meta is None:
        return []
    return meta.get("lineage", []) + [{"stage": meta["stage"], "checkpoint_id": meta["checkpoint_id"],
                                       "path": str(Path(path).resolve())}]


class _Stage:
    """Holds the modules of one stage and knows how to compute a step loss."""

    def __init__(self, cfg: RunConfig, corpus: Corpus):
        self.cfg = cfg
        self.corpus = corpus
        self.stage = cfg.stage.name
        self.modules: dict[str, nn.Module] = {}
        self.extra_meta: dict = {}
        self.parent_meta = _require_parent(cfg)
        self.lineage = _lineage_of(self.parent_meta, cfg.stage.init)
        self.space = sampling_space(cfg.stage.sampling_space)
        self.ids = self._train_ids()
        self.quantizer = None
        self.pseudo = None
        self._setup()

    # -- setup ---------------------------------------------------------

    def _train_ids(self) -> list[str]:
        ids = self.corpus.split("train")
        if self.stage in TRANSDUCER_STAGES:
            missing = [u for u in ids if not self.corpus.entries[u].transcript]
            if missing:
                logger.info("%s: excluding %d untranscribed utterances", self.stage, len(missing))
            ids = [u for u in ids if self.corpus.entries[u].transcript]
        if not ids:
            raise PrerequisiteError(f"stage {self.stage}: no usable training utterances")
        return ids

    def _parent_encoder(self) -> DualModeEncoder:
        enc, _ = load_encoder(self.cfg.stage.init)
        return enc

    def _setup(self):
        cfg, stage = self.cfg, self.stage
        seed = cfg.seed
        if stage in ("S1", "brq_dm", "baseline_streaming", "baseline_full_context"):
            enc = build_encoder(cfg.encoder, seed)
        elif stage in ("S2", "S4"):
            enc = self._parent_encoder()
        else:  # distillation stages build their student below
            enc = None

        if stage in ("S1", "brq_dm", "baseline_streaming", "baseline_full_context"):
            b = cfg.stage.brq
            self.quantizer = obj.RandomQuantizer(cfg.encoder.frontend_dim, b.code_dim, b.n_codes, b.quantizer_seed)
            self.span_cfg = obj.SpanMaskConfig(b.span_frames, b.p_start, b.noise_std)
            torch.manual_seed(seed + 1)
            self.modules["brq_head"] = nn.Linear(cfg.encoder.d_model, b.n_codes)
        if stage in TRANSDUCER_STAGES:
            tcfg = transducer_config(cfg, self.corpus.tokenizer.vocab_size)
            torch.manual_seed(seed + 2)
            self.modules["transducer"] = Transducer(cfg.encoder.d_model, tcfg)
            self.extra_meta["transducer_config"] = tcfg.to_dict()
            if stage == "S4" and cfg.stage.transducer.warm_start:
                s2 = [l for l in self.lineage if l["stage"] == "S2"]
                if not s2:
                    raise PrerequisiteError("transducer warm start needs an S2 ancestor")
                parts, _, _ = load_checkpoint(s2[-1]["path"])
                self.modules["transducer"].load_state_dict(parts["transducer"])
        if stage in TEACHER_STAGE:
            enc = self._setup_distillation()
        self.modules = {"encoder": enc, **self.modules}

    def _setup_distillation(self) -> DualModeEncoder:
        cfg, d = self.cfg, self.cfg.stage.distill
        teacher_path = cfg.stage.teacher or cfg.stage.init
        teacher, tmeta = load_encoder(teacher_path)
        if tmeta["stage"] != TEACHER_STAGE[self.stage]:
            raise PrerequisiteError(
                f"{self.stage} needs a {TEACHER_STAGE[self.stage]} teacher, got {tmeta['stage']}")
        if cfg.stage.pseudo_labels:
            from .quantizer import PseudoLabelStore

            self.pseudo = PseudoLabelStore.load(cfg.stage.pseudo_labels)
            k = self.pseudo.k
            self.extra_meta["tap"] = None
        else:
            tap = d.tap
            if tap == "auto":
                tap = select_tap(teacher, self.corpus, steps=d.tap_probe_steps, seed=cfg.seed)
            tap = int(tap)
            train_feats = {u: self.corpus.features[u] for u in self.ids}
            store = extract_embeddings(teacher, tap, train_feats, tmeta["checkpoint_id"])
            cents = kmeans_fit(store, d.k_clusters, seed=d.kmeans_seed, subsample=d.kmeans_subsample)
            self.pseudo = assign(store, cents)
            k = d.k_clusters
            self.extra_meta.update(tap=tap, kmeans_inertia=cents.inertia, kmeans_iters=cents.n_iter)
        self.extra_meta["k_clusters"] = k
        self.extra_meta["teacher_id"] = tmeta["checkpoint_id"]
        if d.student_init == "teacher":
            student = teacher
            student.train()
        else:
            student = build_encoder(cfg.encoder, cfg.seed)
        torch.manual_seed(cfg.seed + 3)
        self.modules["distill_head"] = nn.Linear(cfg.encoder.d_model, k)
        return student

    # -- per-step -----------------------------------------------------

    def context_for(self, step_rng: np.random.Generator, phase: str) -> ContextSpec:
        if self.stage in ("S1", "S2"):
            return FULL_CONTEXT
        if self.stage == "baseline_streaming":
            return STREAMING
        if self.stage == "baseline_full_context":
            return FULL_CONTEXT
        return sample_context(self.space, step_rng)

    def phase(self, step: int) -> str:
        if self.stage.startswith("baseline_"):
            return "brq" if step <= self.cfg.stage.pretrain_steps else "rnnt"
        if self.stage in ("S1", "brq_dm"):
            return "brq"
        if self.stage in TRANSDUCER_STAGES:
            return "rnnt"
        return "distill"

    def step_loss(self, step: int, ids: Sequence[str], rng: np.random.Generator) -> torch.Tensor:
        phase = self.phase(step)
        ctx = self.context_for(rng, phase)
        feats = [self.corpus.features[u] for u in ids]
        enc = self.modules["encoder"]
        if phase == "brq":
            clean, lengths = _pad(feats)
            codes = obj.brq_codes(clean, self.quantizer)
            valid = _valid_mask(lengths, clean.shape[1])
            masked_in = clean.clone()
            masked = torch.zeros_like(valid)
            for i, f in enumerate(feats):
                m = np.zeros(len(f), dtype=bool)
                for _ in range(100):  # resample until at least one span lands
                    m = obj.sample_span_mask(len(f), self.span_cfg, rng)
                    if m.any():
                        break
                masked_in[i, : len(f)] = obj.apply_span_mask(clean[i, : len(f)], m, rng, self.span_cfg.noise_std)
                masked[i, : len(f)] = torch.from_numpy(m)
            h = enc(masked_in, ctx, lengths)[-1]
            return obj.brq_loss(self.modules["brq_head"](h), codes, masked & valid)
        if phase == "distill":
            x, lengths = _pad(feats)
            codes = torch.zeros(x.shape[:2], dtype=torch.long)
            for i, u in enumerate(ids):
                codes[i, : len(feats[i])] = torch.from_numpy(self.pseudo.codes[u])
            h = enc(x, ctx, lengths)[-1]
            return obj.distill_loss(self.modules["distill_head"](h), codes, _valid_mask(lengths, x.shape[1]))
        # transducer
        sa = self.cfg.stage.specaug
        if sa.enabled:
            sacfg = obj.SpecAugConfig(sa.n_freq_masks, sa.max_freq_width, sa.n_time_masks, sa.max_time_width)
            feats = [obj.specaug(f, rng, sacfg) for f in feats]
        x, lengths = _pad(feats)
        labels = [self.corpus.tokenizer.encode(self.corpus.entries[u].transcript) for u in ids]
        U = max(len(y) for y in labels)
        lab = torch.zeros(len(ids), U, dtype=torch.long)
        for i, y in enumerate(labels):
            lab[i, : len(y)] = torch.tensor(y)
        h = enc(x, ctx, lengths)[-1]
        logits = self.modules["transducer"](h, lab)
        return obj.rnnt_loss_batch(logits, labels, lengths.tolist(), [len(y) for y in labels])


def run_stage(cfg: RunConfig, corpus: Corpus, out_path, resume: Optional[str] = None,
              stop_after: Optional[int] = None, log_every: int = 50) -> StageResult:
    """Train one stage and write its checkpoint to ``out_path``.

    ``resume`` continues from a checkpoint this stage wrote earlier;
    ``stop_after`` ends (and checkpoints) early at that step.
    """
    st = _Stage(cfg, corpus)
    modules = st.modules
    params = [p for m in modules.values() for p in m.parameters()]
    oc = cfg.optimizer
    if oc.name != "adam":
        raise ValueError(f"unsupported optimizer {oc.name!r}")
    opt = torch.optim.Adam(params, lr=oc.lr)
    total = oc.total_steps + (cfg.stage.pretrain_steps if st.stage.startswith("baseline_") else 0)
    start, losses = 0, []
    if resume:
        parts, meta, opt_state = load_checkpoint(resume)
        if meta["stage"] != st.stage:
            raise PrerequisiteError(f"cannot resume {st.stage} from a {meta['stage']} checkpoint")
        for name, m in modules.items():
            m.load_state_dict(parts[name])
        opt.load_state_dict(opt_state)
        start, losses = meta["step"], list(meta["losses"])
        st.extra_meta.update({k: meta[k] for k in ("tap", "k_clusters", "teacher_id") if k in meta})
    end = min(total, stop_after) if stop_after else total

    for m in modules.values():
        m.train()
    t0 = time.time()
    for step in range(start + 1, end + 1):
        rng = np.random.default_rng([cfg.seed, step])
        torch.manual_seed(cfg.seed * 1_000_003 + step)
        warm_step = step - cfg.stage.pretrain_steps if (st.stage.startswith("baseline_") and st.phase(step) == "rnnt") else step
        for g in opt.param_groups:
            g["lr"] = lr_at(warm_step, oc.lr, oc.warmup_steps)
        idx = batch_indices(len(st.ids), oc.batch_size, step, cfg.seed)
        loss = st.step_loss(step, [st.ids[i] for i in idx], rng)
        opt.zero_grad()
        loss.backward()
        if oc.grad_clip > 0:
            nn.utils.clip_grad_norm_(params, oc.grad_clip)
        opt.step()
        losses.append(loss.item())
        if log_every and step % log_every == 0:
            logger.info("%s step %d/%d loss %.4f (%.1fs)", st.stage, step, total, np.mean(losses[-log_every:]),
                        time.time() - t0)
        if oc.checkpoint_every and step % oc.checkpoint_every == 0 and step < end:
            _save(st, opt, out_path, step, total, losses)
    for m in modules.values():
        m.eval()
    return _save(st, opt, out_path, end, total, losses)


def _save(st: _Stage, opt, out_path, step: int, total: int, losses: list) -> StageResult:
    parts = {name: m.state_dict() for name, m in st.modules.items()}
    meta = {
        "stage": st.stage,
        "name": CHECKPOINT_NAME.get(st.stage, st.stage),
        "step": step,
        "total_steps": total,
        "complete": step >= total,
        "config": st.cfg.to_dict(),
        "encoder_config": st.cfg.encoder.to_dict(),
        "tokenizer": st.corpus.tokenizer.words,
        "rng_state": {"seed": st.cfg.seed, "next_step": step + 1},
        "lineage": st.lineage,
        "losses": losses,
        "n_encoder_params": st.modules["encoder"].num_parameters(),
        **st.extra_meta,
    }
    ckpt_id = save_checkpoint(out_path, parts, meta, opt.state_dict())
    meta["checkpoint_id"] = ckpt_id
    return StageResult(Path(out_path), ckpt_id, losses, meta)


# --------------------------------------------------------------------------
# tap selection for distillation


def probe_items(corpus: Corpus, ids: Sequence[str], with_contours: bool = False) -> list[ProbeItem]:
    items = []
    for u in ids:
        e = corpus.entries[u]
        it = ProbeItem(u, corpus.features[u])
        if e.transcript:
            it.tokens = corpus.tokenizer.encode(e.transcript)
        if e.class_label in corpus.classes:
            it.class_id = corpus.classes.index(e.class_label)
        if with_contours:
            wav = read_audio(e.audio_path)
            pitch, inten, rate = reference_contours(wav, e.transcript)
            n = len(it.feats)
            it.pitch, it.intensity, it.rate = pitch[:n], inten[:n], rate
        items.append(it)
    return items


def select_tap(teacher: DualModeEncoder, corpus: Corpus, steps: int = 150, seed: int = 0) -> int:
    """0-based block whose frozen CTC probe gives the lowest dev WER (deeper wins ties)."""
    train = probe_items(corpus, corpus.transcribed(corpus.split("train")))
    dev = probe_items(corpus, corpus.transcribed(corpus.split("dev") or corpus.split("train")))
    task = ProbeTask("asr_ctc")
    tr_taps = encode_items(teacher, train, FULL_CONTEXT)
    dv_taps = encode_items(teacher, dev, FULL_CONTEXT)
    pcfg = ProbeConfig(steps=steps, seed=seed)
    scores = []
    for b in range(teacher.cfg.n_blocks):
        head = train_probe(teacher, task, LayerSelection("single", b), FULL_CONTEXT, train, pcfg,
                           vocab_size=corpus.tokenizer.vocab_size, taps=tr_taps)
        scores.append(evaluate_probe(head, teacher, dev, FULL_CONTEXT, taps=dv_taps))
    best = min(range(len(scores)), key=lambda b: (scores[b], -b))
    logger.info("tap selection WER per block %s -> block %d", [round(s, 3) for s in scores], best)
    return best


# --------------------------------------------------------------------------
# evaluation


def parse_grid(grid) -> list[ContextSpec]:
    out = []
    for g in grid:
        try:
            out.append(g if isinstance(g, ContextSpec) else ContextSpec.from_json(g))
        except (TypeError, ValueError) as e:
            raise ValueError(f"invalid grid entry {g!r}: {e}") from e
    return out


@torch.no_grad()
def decode_utterance(enc: DualModeEncoder, tr: Transducer, feats: np.ndarray, ctx: ContextSpec) -> list[int]:
    x = torch.from_numpy(feats)
    if is_inf(ctx.la_s):
        h = enc(x, ctx)[-1]
    else:
        h = enc.stream(x, ctx)
    return greedy_transducer_decode(h, tr.predictor, tr.joint.single)


@torch.no_grad()
def evaluate_grid(checkpoint, grid, corpus: Corpus, split: str = "test") -> list[dict]:
    """Greedy-transducer WER of one checkpoint under every context of ``grid``.

    Contexts with finite look-ahead run through the chunked streaming path.
    """
    enc, tr, meta = load_asr_model(checkpoint)
    validate_lineage(meta)
    contexts = parse_grid(grid)
    tok = Tokenizer(meta["tokenizer"])
    ids = corpus.transcribed(corpus.split(split))
    if not ids:
        raise ValueError(f"split {split!r} has no transcribed utterances")
    refs = [tok.encode(corpus.entries[u].transcript) for u in ids]
    rows = []
    for ctx in contexts:
        hyps = [decode_utterance(enc, tr, corpus.features[u], ctx) for u in ids]
        rows.append({
            "checkpoint_id": meta["checkpoint_id"],
            "stage": meta["stage"],
            "context": ctx.label(),
            "lb_s": None if is_inf(ctx.lb_s) else ctx.lb_s,
            "la_s": None if is_inf(ctx.la_s) else ctx.la_s,
            "mode": "offline" if is_inf(ctx.la_s) else "streaming",
            "wer": corpus_wer(refs, hyps),
            "n_utts": len(ids),
            "n_encoder_params": enc.num_parameters(),
        })
        logger.info("%s %s WER %.4f", meta["stage"], ctx.label(), rows[-1]["wer"])
    return rows


def write_table(rows: list[dict], out_dir, stem: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    json_path.write_text(json.dumps(rows, indent=1))
    return csv_path, json_path


# --------------------------------------------------------------------------
# whole-recipe drivers


def run_recipe(cfg: RunConfig, corpus: Corpus, out_dir) -> dict:
    """S1 -> S2 -> S3 -> S4, then the evaluation grid on the S4 checkpoint."""
    out_dir = Path(out_dir)
    results = {}
    parent = None
    for stage in ("S1", "S2", "S3", "S4"):
        extra = [("stage.init", str(parent))] if parent else []
        scfg = stage_config(cfg, stage, extra)
        results[stage] = run_stage(scfg, corpus, out_dir / CHECKPOINT_NAME[stage])
        parent = results[stage].path
    rows = evaluate_grid(results["S4"].path, cfg.eval.grid, corpus, cfg.eval.split)
    write_table(rows, out_dir, "eval_grid")
    results["grid"] = rows
    return results


ABLATION_CONTEXTS = [[None, None], [5.4, 0.0]]


def run_ablation(cfg: RunConfig, corpus: Corpus, out_dir, e1: Path, e2: Path,
                 e3: Optional[Path] = None) -> list[dict]:
    """Compare three ways to obtain the pre-S4 dual-mode encoder.

    * ``brq_dm``: dual-mode BestRQ pretraining from scratch
    * ``distill_from_E1``: distillation from the self-supervised encoder
    * ``distill_from_E2``: distillation from the supervised encoder (S3)

    Each is fine-tuned with S4 and evaluated full-context and streaming.
    """
    out_dir = Path(out_dir)
    pre = {}
    pre["brq_dm"] = run_stage(stage_config(cfg, "brq_dm"), corpus, out_dir / "brq_dm").path
    pre["distill_from_E1"] = run_stage(
        stage_config(cfg, "distill_from_E1", [("stage.init", str(e1)), ("stage.teacher", str(e1))]),
        corpus, out_dir / "distill_from_E1").path
    pre["distill_from_E2"] = e3 or run_stage(
        stage_config(cfg, "S3", [("stage.init", str(e2))]), corpus, out_dir / "distill_from_E2").path
    rows = []
    for name, path in pre.items():
        s4 = run_stage(stage_config(cfg, "S4", [("stage.init", str(path))]), corpus, out_dir / f"{name}_S4")
        for r in evaluate_grid(s4.path, ABLATION_CONTEXTS, corpus, cfg.eval.split):
            rows.append({"strategy": name, **r})
    write_table(rows, out_dir, "ablation")
    return rows
