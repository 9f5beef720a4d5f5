"""Variable attention masks: fixed-window look-back, chunked look-ahead.

A mask for ``T`` frames is defined by a look-back ``lb`` and a look-ahead
``la`` (both in 40 ms frames, either may be infinite). Time is split into
chunks of ``C = la + 1`` frames. Frame ``t`` may attend to ``s`` iff

    t - lb <= s <= chunk_end(t),   chunk_end(t) = min(T-1, (t // C + 1) * C - 1)

Because a frame never sees past the end of its own chunk, stacking layers
does not grow the look-ahead, while the past window does grow by ``lb`` per
layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

INF = math.inf
FRAME_S = 0.040
MATERIALIZE_MAX_T = 4096

Num = Union[int, float]


def is_inf(x: Num) -> bool:
    return isinstance(x, float) and math.isinf(x)


def to_frames(seconds: Num) -> Num:
    """Seconds -> 40 ms frames, rounding half up. ``INF`` passes through."""
    if is_inf(seconds):
        if seconds < 0:
            raise ValueError("context cannot be negative")
        return INF
    if seconds < 0:
        raise ValueError(f"context cannot be negative: {seconds}")
    # epsilon absorbs binary representation error (5.4 / 0.04 = 134.999...)
    return int(math.floor(seconds / FRAME_S + 0.5 + 1e-9))


def fmt_seconds(x: Num) -> str:
    return "inf" if is_inf(x) else f"{x:g}"


@dataclass(frozen=True)
class ContextSpec:
    """A (look-back, look-ahead) pair in seconds."""

    lb_s: float = INF
    la_s: float = INF

    def __post_init__(self):
        for name in ("lb_s", "la_s"):
            v = getattr(self, name)
            if not is_inf(v) and v < 0:
                raise ValueError(f"{name} must be >= 0 or INF, got {v}")
            if is_inf(v) and v < 0:
                raise ValueError(f"{name} cannot be -INF")

    @property
    def lb_frames(self) -> Num:
        return to_frames(self.lb_s)

    @property
    def la_frames(self) -> Num:
        return to_frames(self.la_s)

    @property
    def is_full_context(self) -> bool:
        return is_inf(self.lb_s) and is_inf(self.la_s)

    def label(self) -> str:
        return f"({fmt_seconds(self.lb_s)},{fmt_seconds(self.la_s)})"

    def to_json(self) -> list:
        return [None if is_inf(self.lb_s) else self.lb_s, None if is_inf(self.la_s) else self.la_s]

    @classmethod
    def from_json(cls, obj) -> "ContextSpec":
        """Accepts ``[lb, la]`` where ``None``/``"inf"`` mean INF."""
        if not isinstance(obj, (list, tuple)) or len(obj) != 2:
            raise ValueError(f"context must be a [lb, la] pair, got {obj!r}")
        return cls(parse_seconds(obj[0]), parse_seconds(obj[1]))


def parse_seconds(v) -> float:
    if v is None or (isinstance(v, str) and v.lower() in ("inf", "infinity", "∞")):
        return INF
    return float(v)


FULL_CONTEXT = ContextSpec(INF, INF)
STREAMING = ContextSpec(5.4, 0.0)


@dataclass(frozen=True)
class SamplingSpace:
    l_past: tuple
    l_future: tuple
    name: str = "custom"

    def __post_init__(self):
        if not self.l_past or not self.l_future:
            raise ValueError("sampling space lists must be non-empty")
        object.__setattr__(self, "l_past", tuple(parse_seconds(v) for v in self.l_past))
        object.__setattr__(self, "l_future", tuple(parse_seconds(v) for v in self.l_future))

    def combinations(self) -> list[ContextSpec]:
        return [ContextSpec(lb, la) for lb in self.l_past for la in self.l_future]

    def to_json(self) -> dict:
        enc = lambda xs: [None if is_inf(x) else x for x in xs]  # noqa: E731
        return {"name": self.name, "l_past": enc(self.l_past), "l_future": enc(self.l_future)}


def _grid(start: float, stop: float, step: float) -> list[float]:
    n = int(round(abs(stop - start) / step))
    sign = 1 if stop >= start else -1
    return [round(start + sign * i * step, 6) for i in range(n + 1)]


SAMPLING_PRESETS = {
    "T1": SamplingSpace((INF, 5.4, 4.6, 3.6), (0.0, 1.0, 1.8, INF), "T1"),
    "T2": SamplingSpace((INF, 5.4), (0.0, INF), "T2"),
    "T3": SamplingSpace(tuple([INF] + _grid(5.8, 3.6, 0.2)), tuple(_grid(0.0, 1.8, 0.2) + [INF]), "T3"),
}


def sampling_space(spec) -> SamplingSpace:
    """Resolve a preset name or a ``{"l_past": [...], "l_future": [...]}`` dict."""
    if isinstance(spec, SamplingSpace):
        return spec
    if isinstance(spec, str):
        try:
            return SAMPLING_PRESETS[spec]
        except KeyError:
            raise ValueError(f"unknown sampling space {spec!r}; presets: {sorted(SAMPLING_PRESETS)}")
    return SamplingSpace(tuple(spec["l_past"]), tuple(spec["l_future"]), spec.get("name", "custom"))


def sample_context(space: SamplingSpace, rng: np.random.Generator) -> ContextSpec:
    """Draw look-back and look-ahead independently and uniformly."""
    if not space.l_past or not space.l_future:
        raise ValueError("sampling space lists must be non-empty")
    lb = space.l_past[int(rng.integers(len(space.l_past)))]
    la = space.l_future[int(rng.integers(len(space.l_future)))]
    return ContextSpec(lb, la)


@dataclass(frozen=True)
class AttentionMask:
    T: int
    lb_frames: Num
    la_frames: Num
    chunk_size: Num
    allow: np.ndarray | None = field(default=None, repr=False, compare=False)

    def chunk_end(self, t):
        t = np.asarray(t)
        if is_inf(self.chunk_size):
            return np.full_like(t, self.T - 1)
        c = int(self.chunk_size)
        return np.minimum(self.T - 1, (t // c + 1) * c - 1)

    def allowed(self, t, s):
        """Rule-based lookup; agrees with ``allow`` wherever it is materialized."""
        t, s = np.asarray(t), np.asarray(s)
        ok = s <= self.chunk_end(t)
        if not is_inf(self.lb_frames):
            ok = ok & (s >= t - self.lb_frames)
        return ok

    def dense(self) -> np.ndarray:
        if self.allow is not None:
            return self.allow
        t = np.arange(self.T)[:, None]
        s = np.arange(self.T)[None, :]
        return self.allowed(t, s)


def build_mask(T: int, lb_frames: Num, la_frames: Num) -> AttentionMask:
    if T < 1:
        raise ValueError("T must be >= 1")
    for name, v in (("lb_frames", lb_frames), ("la_frames", la_frames)):
        if not is_inf(v) and (v < 0 or int(v) != v):
            raise ValueError(f"{name} must be a non-negative integer or INF, got {v}")
    lb = INF if is_inf(lb_frames) else int(lb_frames)
    la = INF if is_inf(la_frames) else int(la_frames)
    chunk = INF if is_inf(la) else la + 1
    m = AttentionMask(T, lb, la, chunk)
    if T <= MATERIALIZE_MAX_T:
        allow = m.dense()
        allow.setflags(write=False)
        object.__setattr__(m, "allow", allow)
    return m


def mask_for(T: int, ctx: ContextSpec) -> AttentionMask:
    return build_mask(T, ctx.lb_frames, ctx.la_frames)


def _reach_powers(allow: np.ndarray, n_layers: int):
    """Yield the reachability matrix of allow^L for L = 1..n_layers."""
    a = allow.astype(np.int64)
    reach = allow.copy()
    yield reach
    for _ in range(n_layers - 1):
        reach = (reach.astype(np.int64) @ a) > 0
        yield reach


def _min_max(reach: np.ndarray) -> np.ndarray:
    T = reach.shape[1]
    idx = np.arange(T)
    lo = np.where(reach, idx[None, :], T).min(axis=1)
    hi = np.where(reach, idx[None, :], -1).max(axis=1)
    return np.stack([lo, hi], axis=1)


def receptive_field(mask: Union[AttentionMask, np.ndarray], n_layers: int) -> np.ndarray:
    """Per-frame ``(min_reach, max_reach)`` after ``n_layers`` masked layers.

    Returns an int array [T, 2].
    """
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    allow = mask.dense() if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    for reach in _reach_powers(allow, n_layers):
        pass
    return _min_max(reach)


def verify_no_lookahead_accumulation(mask: Union[AttentionMask, np.ndarray], n_layers: int) -> bool:
    """True iff no frame's furthest reachable source grows with depth."""
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    allow = mask.dense() if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
    base = None
    for reach in _reach_powers(allow, n_layers):
        hi = _min_max(reach)[:, 1]
        if base is None:
            base = hi
        elif not np.array_equal(hi, base):
            return False
    return True


def reachability_table(mask: AttentionMask, n_layers: int) -> list[dict]:
    """Rows of ``{t, layer, min_reach, max_reach}`` for every layer count."""
    rows = []
    for L, reach in enumerate(_reach_powers(mask.dense(), n_layers), start=1):
        for t, (lo, hi) in enumerate(_min_max(reach)):
            rows.append({"t": t, "layers": L, "min_reach": int(lo), "max_reach": int(hi)})
    return rows
