"""Teacher embedding extraction and k-means pseudo-labels for distillation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np
import torch

from .encoder import DualModeEncoder
from .maskgen import FULL_CONTEXT

logger = logging.getLogger(__name__)


@dataclass
class EmbeddingStore:
    """utt_id -> [T40, d_model] embeddings from one teacher block.

    ``block_index`` is 0-based over Conformer blocks (tap ``block_index + 1``
    of the encoder's outputs, since tap 0 is the frontend projection).
    """

    embeddings: dict
    checkpoint_id: str
    block_index: int

    def __len__(self) -> int:
        return len(self.embeddings)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.embeddings[k] for k in sorted(self.embeddings)], axis=0)

    def save(self, root) -> None:
        root = Path(root)
        (root / "emb").mkdir(parents=True, exist_ok=True)
        index = {}
        for utt_id, e in sorted(self.embeddings.items()):
            np.save(root / "emb" / f"{utt_id}.npy", e)
            index[utt_id] = {"file": f"emb/{utt_id}.npy", "frames": int(e.shape[0])}
        meta = {"checkpoint_id": self.checkpoint_id, "block_index": self.block_index, "utterances": index}
        (root / "index.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, root) -> "EmbeddingStore":
        root = Path(root)
        meta = json.loads((root / "index.json").read_text())
        emb = {k: np.load(root / v["file"]) for k, v in meta["utterances"].items()}
        return cls(emb, meta["checkpoint_id"], int(meta["block_index"]))


@torch.no_grad()
def extract_embeddings(encoder: DualModeEncoder, block_index: int, features: Mapping[str, np.ndarray],
                       checkpoint_id: str = "unknown") -> EmbeddingStore:
    """Full-context embeddings of ``block_index`` for every utterance."""
    n_blocks = encoder.cfg.n_blocks
    if not 0 <= block_index < n_blocks:
        raise IndexError(f"block_index {block_index} out of range for {n_blocks} blocks")
    was_training = encoder.training
    encoder.eval()
    out = {}
    for utt_id in sorted(features):
        x = torch.from_numpy(np.asarray(features[utt_id], dtype=np.float32))
        taps = encoder(x, FULL_CONTEXT)
        out[utt_id] = taps[block_index + 1].numpy().astype(np.float32)
    encoder.train(was_training)
    return EmbeddingStore(out, checkpoint_id, block_index)


@dataclass
class Centroids:
    centroids: np.ndarray
    inertia_history: list = field(default_factory=list)
    n_iter: int = 0
    seed: int = 0
    converged: bool = False

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        np.save(root / "centroids.npy", self.centroids)
        (root / "centroids.json").write_text(json.dumps({
            "k": self.k, "dim": int(self.centroids.shape[1]), "n_iter": self.n_iter, "seed": self.seed,
            "converged": self.converged, "inertia_history": self.inertia_history,
        }, indent=1))

    @classmethod
    def load(cls, root) -> "Centroids":
        root = Path(root)
        meta = json.loads((root / "centroids.json").read_text())
        return cls(np.load(root / "centroids.npy"), meta["inertia_history"], meta["n_iter"], meta["seed"],
                   meta["converged"])


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def nearest(x: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index (lowest on ties) and squared distance of the nearest centroid."""
    idx = _sq_dists(x, c).argmin(axis=1)
    # recompute the winning distance directly; the expansion above cancels badly near zero
    diff = x - c[idx]
    return idx, (diff * diff).sum(axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen[-1]][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(rng.choice(n, p=d2 / total))
        else:  # remaining points duplicate chosen ones
            rest = np.setdiff1d(np.arange(n), chosen)
            i = int(rng.choice(rest))
        chosen.append(i)
        d2 = np.minimum(d2, _sq_dists(x, x[i][None])[:, 0])
    return x[chosen].copy()


def kmeans_fit(data: Union[EmbeddingStore, np.ndarray], k: int, seed: int = 0, max_iter: int = 100,
               tol: float = 1e-4, subsample: float = 1.0) -> Centroids:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when no assignment changes, when the relative inertia improvement
    drops below ``tol``, or after ``max_iter`` iterations. Clusters that
    empty out are re-seeded with the points farthest from their centroid.
    ``inertia_history[i]`` is the inertia after the i-th assignment step.
    """
    x = data.stacked() if isinstance(data, EmbeddingStore) else np.asarray(data)
    x = x.astype(np.float64)
    rng = np.random.default_rng(seed)
    if subsample < 1.0:
        keep = rng.random(len(x)) < subsample
        x = x[keep]
    if len(x) < k:
        raise ValueError(f"{len(x)} frames is fewer than k={k} clusters")

    c = _kmeans_pp(x, k, rng)
    assign, d2 = nearest(x, c)
    history = [float(d2.sum())]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if len(empty):
            far = np.argsort(-d2, kind="stable")[: len(empty)]
            c[empty] = x[far]
            logger.debug("re-seeded %d empty clusters", len(empty))
        new_assign, d2 = nearest(x, c)
        inertia = float(d2.sum())
        prev = history[-1]
        history.append(inertia)
        changed = not np.array_equal(new_assign, assign)
        assign = new_assign
        if not changed:
            converged = True
            break
        if prev == 0 or (prev - inertia) / prev < tol:
            break
    return Centroids(c, history, it, seed, converged)


@dataclass
class PseudoLabelStore:
    codes: dict
    k: int

    def save(self, root) -> None:
        root = Path(root)
        (root / "codes").mkdir(parents=True, exist_ok=True)
        for utt_id, c in sorted(self.codes.items()):
            np.save(root / "codes" / f"{utt_id}.npy", c)
        (root / "index.json").write_text(json.dumps(
            {"k": self.k, "utterances": {u: f"codes/{u}.npy" for u in sorted(self.codes)}}, indent=1))

    @classmethod
    def load(cls, root) -> "PseudoLabelStore":
        root = Path(root)
        meta = json.loads((root / "index.json").read_text())
        return cls({u: np.load(root / f) for u, f in meta["utterances"].items()}, int(meta["k"]))


def assign(store: Union[EmbeddingStore, Mapping[str, np.ndarray]], c: Centroids) -> PseudoLabelStore:
    emb = store.embeddings if isinstance(store, EmbeddingStore) else store
    cents = c.centroids.astype(np.float64)
    codes = {}
    for utt_id, e in emb.items():
        if e.shape[1] != cents.shape[1]:
            raise ValueError(f"{utt_id}: embedding dim {e.shape[1]} != centroid dim {cents.shape[1]}")
        codes[utt_id] = nearest(e.astype(np.float64), cents)[0].astype(np.int64)
    return PseudoLabelStore(codes, c.k)
