"""Run configuration: defaults, YAML loading, hashing, seed substreams.

Every knob the pipeline exposes lives here so a single config file (plus
one root seed) pins down a full run. Named seed substreams keep the
stages independent: toggling one stage never perturbs another's
randomness.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

STAGES = ("s1", "s2_1", "s2_2", "s3")
MIRROR_MODES = ("off", "teacher", "full")


class ConfigError(ValueError):
    """Raised for unknown keys or invalid field values."""


@dataclass
class DataConfig:
    classes: int = 8
    clips_per_class: int = 16
    directional_classes: int = 6  # remainder are symmetric (direction none)
    frames_per_clip: int = 8      # L
    feature_dim: int = 64         # D, surrogate frozen-encoder output
    csi_time: int = 64            # T
    csi_antennas: int = 3         # N_a
    csi_subcarriers_raw: int = 56
    pruned_subcarriers: tuple[int, ...] = (0, 27, 28, 55)  # guards + pilots, config input
    receivers: int = 3
    feature_noise: float = 0.08
    csi_noise: float = 0.10
    receiver_dropout: float = 0.1
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)

    @property
    def csi_subcarriers(self) -> int:
        """N_sc after pruning, the shape every stored ClipRecord satisfies."""
        return self.csi_subcarriers_raw - len(self.pruned_subcarriers)


@dataclass
class LossConfig:
    tau: float = 0.07       # fixed temperature, not learnable
    margin: float = 0.2     # mirror hinge margin m
    lambda_mc: float = 1.0  # mirror-consistency weight

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be > 0, got {self.margin}")
        if self.lambda_mc < 0:
            raise ConfigError(f"lambda_mc must be >= 0, got {self.lambda_mc}")


@dataclass
class TeacherConfig:
    embed_dim: int = 128     # d, shared alignment space
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    pos_init_std: float = 0.02
    lr: float = 3e-4
    steps: int = 200
    batch_size: int = 32


@dataclass
class StudentConfig:
    backbone_dim: int = 64   # d_c, pooled output of each conv backbone
    channels: tuple[int, ...] = (16, 16, 32, 64)
    lr: float = 1e-3
    steps_align: int = 300
    steps_text: int = 300
    batch_size: int = 32


@dataclass
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    hidden_dim: int = 128    # d_h
    ff_mult: int = 4
    prefix_len: int = 8      # L_p
    max_len: int = 24
    pretrain_steps: int = 400
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    prefix_steps: int = 500
    prefix_lr: float = 1e-3
    prefix_batch: int = 32
    prefix_hidden: int = 256  # hidden width of the prefix MLP


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    stages: tuple[str, ...] = STAGES
    mirror: str = "full"     # off | teacher | full
    baseline: bool = False   # s3-only arm over an untrained CSI encoder
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def validate(self) -> None:
        self.loss.validate()
        if self.mirror not in MIRROR_MODES:
            raise ConfigError(f"mirror must be one of {MIRROR_MODES}, got {self.mirror!r}")
        for s in self.stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}, valid: {STAGES}")
        d = self.data
        if d.directional_classes > d.classes:
            raise ConfigError("directional_classes cannot exceed classes")
        if d.csi_subcarriers < 2:
            raise ConfigError("need at least 2 subcarriers after pruning")
        if any(i < 0 or i >= d.csi_subcarriers_raw for i in d.pruned_subcarriers):
            raise ConfigError("pruned subcarrier index out of range")
        if abs(sum(d.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split_fractions must sum to 1")

    # λ_mc per stage follows the mirror mode: teacher-only keeps the teacher
    # term, the student term is dropped; off drops both.
    def teacher_lambda_mc(self) -> float:
        return self.loss.lambda_mc if self.mirror in ("teacher", "full") else 0.0

    def student_lambda_mc(self) -> float:
        return self.loss.lambda_mc if self.mirror == "full" else 0.0


def _to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)

    def norm(x):
        if isinstance(x, dict):
            return {k: norm(v) for k, v in x.items()}
        if isinstance(x, tuple):
            return [norm(v) for v in x]
        return x

    return norm(d)


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_dict(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Stable hash of the full config; stored in every artifact."""
    blob = json.dumps(_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _merge_section(inst, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(inst)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path}{key!r}")
        current = getattr(inst, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be a mapping")
            _merge_section(current, value, f"{path}{key}.")
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}{key} must be a list")
            setattr(inst, key, tuple(value))
        else:
            if value is not None and not isinstance(value, type(current)) and not (
                isinstance(current, float) and isinstance(value, int)
            ):
                raise ConfigError(
                    f"{path}{key} expects {type(current).__name__}, got {type(value).__name__}"
                )
            setattr(inst, key, float(value) if isinstance(current, float) else value)


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from an optional YAML file plus overrides.

    Unknown keys anywhere in the file are rejected rather than ignored.
    """
    cfg = RunConfig()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping")
        _merge_section(cfg, raw, "")
    if overrides:
        _merge_section(cfg, overrides, "")
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(_to_dict(cfg), sort_keys=True))


# --------------------------------------------------------------------------
# Seed substreams
# --------------------------------------------------------------------------

SUBSTREAMS = ("dataset", "s1", "s2_1", "s2_2", "s3_pretrain", "s3_prefix", "eval", "baseline")


def substream_seed(root_seed: int, name: str) -> int:
    """Derive a 63-bit seed for a named stream from the root seed."""
    if name not in SUBSTREAMS:
        raise ConfigError(f"unknown substream {name!r}, valid: {SUBSTREAMS}")
    h = hashlib.sha256(f"wifi2cap:{root_seed}:{name}".encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
