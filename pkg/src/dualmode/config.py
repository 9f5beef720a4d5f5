"""Run configuration: JSON sections {data, encoder, stage, optimizer, eval, probe}.

Unknown keys and ill-typed values raise :class:`ConfigError` naming the
offending dotted key path. Overrides (``a.b.c=value``) are applied to the raw
dict before validation; values are parsed as JSON when possible.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

from .encoder import ENCODER_PRESETS, EncoderConfig

STAGES = ("S1", "S2", "S3", "S4", "baseline_streaming", "baseline_full_context", "brq_dm", "distill_from_E1")


class ConfigError(ValueError):
    def __init__(self, key_path: str, msg: str):
        super().__init__(f"{key_path}: {msg}")
        self.key_path = key_path


@dataclass
class DataConfig:
    manifest: str = ""
    test_fraction: float = 0.15
    dev_fraction: float = 0.1
    feature_cache: Optional[str] = None


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 2e-3
    warmup_steps: int = 500
    total_steps: int = 1000
    batch_size: int = 16
    grad_clip: float = 5.0
    checkpoint_every: int = 0  # 0: only at the end


@dataclass
class BrqConfig:
    n_codes: int = 1024
    code_dim: int = 16
    span_frames: int = 8
    p_start: float = 0.02
    noise_std: float = 0.1
    quantizer_seed: int = 1234


@dataclass
class DistillConfig:
    k_clusters: int = 64
    tap: Union[str, int] = "auto"  # "auto" or 0-based block index
    kmeans_subsample: float = 1.0
    kmeans_seed: int = 0
    student_init: str = "random"  # "random" or "teacher"
    tap_probe_steps: int = 150


@dataclass
class TransducerSection:
    embed_dim: int = 64
    pred_hidden: int = 128
    pred_layers: int = 2
    joint_dim: int = 256
    warm_start: bool = False  # S4: load prediction/joint nets from the S2 ancestor


@dataclass
class SpecAugSection:
    enabled: bool = True
    n_freq_masks: int = 2
    max_freq_width: int = 64
    n_time_masks: int = 2
    max_time_width: int = 10


@dataclass
class StageSection:
    name: str = "S1"
    init: Optional[str] = None  # parent checkpoint
    teacher: Optional[str] = None  # teacher checkpoint for distillation stages
    pseudo_labels: Optional[str] = None  # precomputed PseudoLabelStore directory
    sampling_space: Any = "T1"
    pretrain_steps: int = 200  # baselines only: BestRQ steps before transducer steps
    brq: BrqConfig = field(default_factory=BrqConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    transducer: TransducerSection = field(default_factory=TransducerSection)
    specaug: SpecAugSection = field(default_factory=SpecAugSection)


@dataclass
class EvalSection:
    grid: list = field(default_factory=lambda: [[None, None], [5.4, 1.0], [5.4, 0.6], [5.4, 0.0]])
    split: str = "test"


@dataclass
class ProbeSection:
    tasks: list = field(default_factory=lambda: ["asr_ctc", "speaking_rate", "pitch_contour",
                                                 "intensity_contour", "classification"])
    layer: Union[str, int] = "all"  # "all" (weighted sum) or block index
    task: str = "asr_ctc"
    context: list = field(default_factory=lambda: [None, None])
    steps: int = 300
    batch_size: int = 16
    lr: float = 3e-3


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage: StageSection = field(default_factory=StageSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    seed: int = 0
    # per-stage dotted overrides used when a whole pipeline runs from one config
    stage_overrides: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:8]


def _check_type(value, tp, path):
    origin = typing.get_origin(tp)
    if tp is Any:
        return value
    if origin is Union:
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        for a in args:
            if a is type(None):
                continue
            try:
                return _check_type(value, a, path)
            except ConfigError:
                pass
        raise ConfigError(path, f"value {value!r} does not match {tp}")
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if tp is bool and isinstance(value, bool):
        return value
    if tp is str and isinstance(value, str):
        return value
    if origin in (list, dict) or tp in (list, dict):
        want = origin or tp
        if isinstance(value, want):
            return copy.deepcopy(value)
    raise ConfigError(path, f"expected {getattr(tp, '__name__', tp)}, got {type(value).__name__} {value!r}")


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for k in raw:
        if k not in names:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, raw[f.name], sub)
        else:
            kwargs[f.name] = _check_type(raw[f.name], tp, sub)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(path or "<root>", str(e)) from e


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.path=value`` strings (or ``(path, value)`` pairs) to a dict copy."""
    raw = copy.deepcopy(raw)
    for ov in overrides or ():
        if isinstance(ov, str):
            if "=" not in ov:
                raise ConfigError(ov, "override must look like key.path=value")
            key, text = ov.split("=", 1)
            value = parse_value(text)
        else:
            key, value = ov
        node = raw
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, f"cannot descend into non-object at {p!r}")
        node[parts[-1]] = value
    return raw


def load_config(raw: Optional[dict] = None, overrides=None) -> RunConfig:
    raw = apply_overrides(raw or {}, overrides)
    enc = raw.get("encoder")
    if isinstance(enc, dict) and "preset" in enc:
        enc = dict(enc)
        preset = enc.pop("preset")
        if preset not in ENCODER_PRESETS:
            raise ConfigError("encoder.preset", f"unknown preset {preset!r}")
        raw["encoder"] = {**ENCODER_PRESETS[preset].to_dict(), **enc}
    cfg = _build(RunConfig, raw, "")
    if cfg.stage.name not in STAGES:
        raise ConfigError("stage.name", f"unknown stage {cfg.stage.name!r}; expected one of {STAGES}")
    if cfg.stage.distill.student_init not in ("random", "teacher"):
        raise ConfigError("stage.distill.student_init", "expected 'random' or 'teacher'")
    return cfg


def load_config_file(path, overrides=None) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON in {path}: {e}") from e
    return load_config(raw, overrides)


def stage_config(cfg: RunConfig, stage: str, extra=None) -> RunConfig:
    """Derive the config for ``stage`` applying its ``stage_overrides`` entry."""
    raw = cfg.to_dict()
    raw["stage"]["name"] = stage
    ovs = list(cfg.stage_overrides.get(stage, {}).items()) + list(extra or [])
    return load_config(raw, ovs)
