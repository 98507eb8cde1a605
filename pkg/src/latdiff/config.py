"""Run configuration: one INI file describes a model and how to train it.

Two sections, [model] and [train], every key optional except model.kind and
(for training) train.corpus. Unknown sections or keys are hard errors so a
typo cannot silently fall back to a default. The same flat dict rides inside
checkpoints, which is enough to rebuild the model without the original file.
"""

import configparser
import dataclasses
from dataclasses import dataclass

from .corpus import MODES
from .errors import ConfigError
from .forward import KINDS
from .model import DiffusionModel
from .nets import TIME_MODES
from .objectives import LOSS_MODES, check_compatible

_SECTIONS = {
    "model": (
        "kind", "dim", "seq_len", "predictor_layers", "forward_layers", "heads",
        "time_mode", "use_context", "fixed_average", "gamma_min", "gamma_max",
        "dev_scale", "eta", "delta", "table_std",
    ),
    "train": (
        "corpus", "tokenizer", "vocab_cap", "loss_mode", "steps", "batch_size",
        "lr", "seed", "clip_norm", "clip_start_step", "time_sampler",
    ),
}
_BOOLS = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


@dataclass
class RunConfig:
    kind: str = ""
    dim: int = 64
    seq_len: int = 32
    predictor_layers: int = 2
    forward_layers: int = 2
    heads: int = 2
    time_mode: str = "adaln"
    use_context: bool = False
    fixed_average: bool = False
    gamma_min: float = -10.0
    gamma_max: float = 10.0
    dev_scale: float = 1.0
    eta: float = 1.0
    delta: float = 0.01
    table_std: float = 0.02

    corpus: str = ""
    tokenizer: str = "word"
    vocab_cap: int = 1000
    loss_mode: str = ""  # empty picks the kind's default
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    clip_norm: float = 1.5
    clip_start_step: int = 0
    time_sampler: str = "antithetic"

    vocab_size: int = 0  # filled once a vocabulary exists

    @classmethod
    def from_ini(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path!r}")
        values = {}
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}] in {path}")
            for key, raw in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}] of {path}")
                values[key] = raw
        cfg = cls.from_dict(values)
        cfg.validate()
        return cfg

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, fields[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"model.kind must be one of {KINDS}, got {self.kind!r}")
        if self.seq_len < 3:
            raise ConfigError("model.seq_len must be at least 3")
        if self.dim < 1 or self.dim % self.heads != 0:
            raise ConfigError("model.dim must be a positive multiple of model.heads")
        if self.time_mode not in TIME_MODES:
            raise ConfigError(f"model.time_mode must be one of {TIME_MODES}")
        if self.tokenizer not in MODES:
            raise ConfigError(f"train.tokenizer must be one of {MODES}")
        if self.vocab_cap < 5:
            raise ConfigError("train.vocab_cap must leave room beyond the four specials")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("train.steps and train.batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.table_std <= 0:
            raise ConfigError("model.table_std must be positive")
        mode = self.resolved_loss_mode()
        if mode not in LOSS_MODES:
            raise ConfigError(f"train.loss_mode must be one of {LOSS_MODES}, got {mode!r}")
        check_compatible(self.kind, mode, self.fixed_average)
        if self.time_sampler not in ("uniform", "antithetic", "stratified"):
            raise ConfigError(f"unknown train.time_sampler {self.time_sampler!r}")

    def resolved_loss_mode(self) -> str:
        if self.loss_mode:
            return self.loss_mode
        return "nfdm_full" if self.kind == "nfdm" else "rescaled_xpred"

    def build_model(self) -> DiffusionModel:
        if self.vocab_size < 5:  # four specials plus at least one content token
            raise ConfigError("vocab_size not set; build or load a vocabulary first")
        return DiffusionModel(
            self.vocab_size, self.dim, self.seq_len, self.kind,
            predictor_layers=self.predictor_layers, forward_layers=self.forward_layers,
            heads=self.heads, time_mode=self.time_mode, use_context=self.use_context,
            fixed_average=self.fixed_average, gamma_min=self.gamma_min,
            gamma_max=self.gamma_max, dev_scale=self.dev_scale, eta=self.eta,
            delta=self.delta, table_std=self.table_std,
        )


def _coerce(key, raw, typ):
    if isinstance(raw, bool) or typ is bool:
        if isinstance(raw, bool):
            return raw
        flag = _BOOLS.get(str(raw).strip().lower())
        if flag is None:
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        return flag
    try:
        if typ is int:
            return int(str(raw).strip())
        if typ is float:
            return float(str(raw).strip())
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from e
    return str(raw)
