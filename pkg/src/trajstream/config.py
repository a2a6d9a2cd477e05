"""Model and training configuration with JSON round-trip."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    D: int = 128                    # embedding width
    n_heads: int = 8
    dropout: float = 0.2
    ffn_mult: int = 4
    blocks_fA: int = 4              # agent-history encoder depth
    blocks_fS: int = 4              # scene encoder depth
    blocks_fT: int = 2              # target-region encoder depth
    decoder_stages: int = 3
    K: int = 6                      # prediction modes
    T_h: int = 30
    T_f: int = 60
    T_a: int = 20                   # extra supervised future steps
    P_l: int = 20                   # points per lane polyline
    r_target_m: float = 30.0        # target-region gathering radius
    max_target_tokens: int = 64
    n_agent_types: int = 4
    n_lane_types: int = 3
    context_radius_m: float = 150.0
    # streaming mechanism switches
    use_endpoint_context: bool = True    # target-region path (EAM)
    use_context_stream: bool = True      # previous-scene cross-attention (CS)
    use_trajectory_relay: bool = True    # offset refinement from past modes (TR)
    # studied variants
    temporal_pool: str = "max"           # "max" | "last"
    gather_from_scene: bool = False      # gather target members from encoded S rows
    naive_worlds: bool = False           # bypass the consistency module
    parked_threshold_m: float = 1.0

    def __post_init__(self):
        if self.D % self.n_heads:
            raise ConfigError(f"D={self.D} not divisible by n_heads={self.n_heads}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.r_target_m <= 0:
            raise ConfigError("r_target_m must be positive")
        if self.temporal_pool not in ("max", "last"):
            raise ConfigError(f"unknown temporal_pool {self.temporal_pool!r}")

    @property
    def horizon(self) -> int:
        return self.T_f + self.T_a


@dataclass
class TrainConfig:
    epochs: int = 80
    warmup_epochs: int = 13
    lr_start: float = 1e-5
    lr_peak: float = 1e-2
    lr_end: float = 1e-5
    batch_size: int = 32
    weight_decay: float = 1e-2
    grad_clip_norm: float = 5.0
    huber_delta: float = 1.0
    ma_epochs: int = 35
    freeze_encoders_ma: bool = True
    detach_stream: bool = False     # cut gradient flow between windows
    seed: int = 0
    checkpoint_every: int = 0       # optimizer steps; 0 = final only
    log_every: int = 10

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be < epochs")
        for name in ("lr_start", "lr_peak", "lr_end"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def _from_dict(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


def model_config_from_dict(d: dict) -> ModelConfig:
    return _from_dict(ModelConfig, d, "model config")


def train_config_from_dict(d: dict) -> TrainConfig:
    return _from_dict(TrainConfig, d, "train config")


def load_config_file(path: str | Path) -> dict:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return d


def save_config(path: str | Path, **sections) -> None:
    """Write config dataclasses (or plain dicts) as one JSON object."""
    out = {}
    for name, value in sections.items():
        out[name] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
    Path(path).write_text(json.dumps(out, indent=1) + "\n", encoding="utf-8")
