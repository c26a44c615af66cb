"""Flat key = value run configuration.

One key per line, '#' starts a comment, UTF-8. Every field of
TrainingConfig is addressable by its field name; unknown or duplicate keys
are errors that name the key and the line it appeared on.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

MODES = ("rankgan", "binary", "pg_bleu", "mle_only")

_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


class ConfigError(ValueError):
    pass


@dataclass
class TrainingConfig:
    """Everything a training run needs besides the corpus itself.

    Learning rates, dims, and schedule defaults are this implementation's
    documented choices; the sizes of the reference and comparison sets
    default to one sentence each, matching the synthetic-data protocol.
    """

    mode: str = "rankgan"
    seed: int = 0
    fixed_len: int = 20

    # oracle and synthetic corpus
    oracle_vocab: int = 500          # total ids, including the 4 reserved
    oracle_d_e: int = 32
    oracle_d_h: int = 32
    oracle_init_std: float = 1.0
    synth_count: int = 10000
    min_count: int = 1
    train_fraction: float = 1.0      # 1.0 means no held-out split

    # generator
    d_e: int = 32
    d_h: int = 32
    lr_mle: float = 0.1
    lr_policy: float = 0.01
    lr_ranker: float = 0.01
    clip: float = 5.0

    # ranker / discriminator encoder
    ranker_d_e: int = 32
    ranker_widths: tuple = (2, 3, 4)
    ranker_filters: int = 16
    ranker_nonlinearity: str = "tanh"
    gamma: float = 4.0

    # schedule
    pretrain_epochs: int = 40
    adversarial_rounds: int = 60
    g_steps: int = 1
    r_steps: int = 1
    adv_warmup_steps: int = 0    # adversary-only steps before round 1
    batch_size: int = 32

    # reference/comparison sets and rollouts
    u_size: int = 1
    c_size: int = 1
    n_rollout: int = 16

    # reward shaping
    reward_baseline: bool = False    # moving-average reward baseline
    baseline_decay: float = 0.9
    bleu_max_n: int = 2

    # evaluation and artifacts
    eval_samples: int = 2000
    eval_every: int = 1
    checkpoint_every: int = 10

    def validate(self) -> "TrainingConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for key in ("pretrain_epochs", "adversarial_rounds", "g_steps", "r_steps",
                    "adv_warmup_steps"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        for key in ("fixed_len", "batch_size", "n_rollout", "eval_samples",
                    "eval_every", "checkpoint_every", "synth_count",
                    "min_count", "d_e", "d_h", "ranker_d_e", "ranker_filters",
                    "oracle_d_e", "oracle_d_h"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.mode in ("rankgan", "pg_bleu") and self.u_size < 1:
            raise ConfigError(f"u_size must be >= 1 in {self.mode} mode")
        if self.mode == "rankgan" and self.c_size < 1:
            raise ConfigError("c_size must be >= 1 in rankgan mode")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        for key in ("lr_mle", "lr_policy", "lr_ranker"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if self.clip <= 0:
            raise ConfigError(f"clip must be positive, got {self.clip}")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError(
                f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if not 0 <= self.baseline_decay < 1:
            raise ConfigError(
                f"baseline_decay must be in [0, 1), got {self.baseline_decay}")
        if not 1 <= self.bleu_max_n <= 4:
            raise ConfigError(f"bleu_max_n must be 1..4, got {self.bleu_max_n}")
        if self.oracle_vocab < 5:
            raise ConfigError(
                f"oracle_vocab must be >= 5 (4 reserved ids plus content), "
                f"got {self.oracle_vocab}")
        if self.oracle_init_std <= 0:
            raise ConfigError(
                f"oracle_init_std must be positive, got {self.oracle_init_std}")
        if len(set(self.ranker_widths)) != len(self.ranker_widths) or \
                not self.ranker_widths:
            raise ConfigError(
                f"ranker_widths must be distinct and nonempty, "
                f"got {self.ranker_widths}")
        return self


def _parse_bool(value: str) -> bool:
    try:
        return _BOOL_WORDS[value.lower()]
    except KeyError:
        raise ValueError(f"expected true/false, got {value!r}") from None


def _parse_int_tuple(value: str) -> tuple:
    return tuple(int(part.strip()) for part in value.split(","))


def _parser_for(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_int_tuple
    return str


_FIELD_PARSERS = {f.name: _parser_for(f.default) for f in fields(TrainingConfig)}


def parse_config(text: str, source: str = "<config>") -> TrainingConfig:
    """Parse key = value lines into a validated TrainingConfig."""
    values = {}
    where = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_PARSERS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(
                f"{source}:{lineno}: duplicate key {key!r} "
                f"(first set on line {where[key]})")
        try:
            values[key] = _FIELD_PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(
                f"{source}:{lineno}: invalid value for {key!r}: {exc}") from None
        where[key] = lineno
    try:
        cfg = TrainingConfig(**values)
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> TrainingConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, source=str(path))


def config_to_text(cfg: TrainingConfig) -> str:
    """Render a config as parseable key = value lines (round-trips exactly)."""
    lines = []
    for f in fields(TrainingConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
