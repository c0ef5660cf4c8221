"""Plain-text run configuration: key=value file plus flag overrides.

Every key has a documented default; unknown keys are rejected; the
effective configuration is echoed into output artifacts' metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .data import GeneratorConfig
from .errors import UsageError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class RunConfig:
    # model
    d: int = 64
    n_blocks: int = 2
    n_state: int = 16
    conv_width: int = 4
    l_c: int = 256
    dropout: float = 0.1
    expansion: int = 2
    time_k: int = 8
    v_max: int = 16
    model_seed: int = 0
    # training
    pretrain_epochs: int = 8
    finetune_epochs: int = 8
    batch_size: int = 32
    peak_lr: float = 1e-3
    floor_lr: float = 1e-5
    warmup_fraction: float = 0.1
    mask_probability: float = 0.15
    weight_decay: float = 0.01
    objective: str = "ntp"
    train_seed: int = 0
    # generator
    n_patients: int = 200
    mean_visits: float = 3.0
    mean_events_per_visit: float = 8.0
    n_procedures: int = 30
    n_medications: int = 30
    n_labs: int = 20
    mortality_signal: float = 1.0
    condition_rate: float = 0.4
    risk_rate: float = 0.35
    mean_gap_days: float = 45.0
    generator_seed: int = 0
    # data handling
    split_seed: int = 0
    forecast_cutoff: int = 10
    attribution_steps: int = 64
    attribution_limit: int = 25

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(d=self.d, n_blocks=self.n_blocks, n_state=self.n_state,
                           conv_width=self.conv_width, l_c=self.l_c, vocab_size=vocab_size,
                           dropout=self.dropout, expansion=self.expansion, time_k=self.time_k,
                           v_max=self.v_max, seed=self.model_seed)

    def train_config(self, finetune: bool = False) -> TrainConfig:
        return TrainConfig(
            epochs=self.finetune_epochs if finetune else self.pretrain_epochs,
            batch_size=self.batch_size, peak_lr=self.peak_lr, floor_lr=self.floor_lr,
            warmup_fraction=self.warmup_fraction, mask_probability=self.mask_probability,
            weight_decay=self.weight_decay, seed=self.train_seed, objective=self.objective)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            n_patients=self.n_patients, mean_visits=self.mean_visits,
            mean_events_per_visit=self.mean_events_per_visit, n_procedures=self.n_procedures,
            n_medications=self.n_medications, n_labs=self.n_labs,
            mortality_signal=self.mortality_signal, condition_rate=self.condition_rate,
            risk_rate=self.risk_rate, mean_gap_days=self.mean_gap_days,
            seed=self.generator_seed)


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value: str):
    default = getattr(RunConfig(), key)
    try:
        if isinstance(default, bool):
            return value.lower() in ("1", "true", "yes")
        return type(default)(value)
    except ValueError as e:
        raise UsageError(f"config key {key!r}: cannot parse {value!r} as "
                         f"{type(default).__name__}") from e


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read key=value pairs from `path` (optional), then apply overrides."""
    cfg = RunConfig()
    pairs = []
    if path is not None:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                k, v = line.split("=", 1)
                pairs.append((k.strip(), v.strip()))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r}: expected key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    for k, v in pairs:
        if k not in _FIELDS:
            raise UsageError(f"unknown config key {k!r}")
        setattr(cfg, k, _coerce(k, v))
    return cfg


def echo_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(RunConfig))
