"""Training configuration and the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import difflib
import math
from dataclasses import dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Tuple

from .errors import ConfigError

Phase = Tuple[int, int, int]  # (iterations, max_encode_steps, max_decode_steps)

# Table 5 shape at 1/50 scale; encoder caps shrunk to toy lengths
DESK_PHASES: Tuple[Phase, ...] = ((1400, 10, 10), (900, 20, 20), (1400, 40, 20), (800, 60, 20), (500, 80, 30))
PAPER_PHASES: Tuple[Phase, ...] = ((71000, 10, 10), (45000, 50, 50), (68000, 100, 50),
                                   (39000, 200, 50), (27000, 400, 100))

PRESETS: Dict[str, Dict[str, object]] = {
    "desk": {},
    "paper": {"hidden": 256, "embed": 128, "attn": 256, "out_hidden": 256, "vocab_max_size": 50000,
              "phases": PAPER_PHASES, "coverage_steps": 3000, "pointer": True, "coverage": True},
}


@dataclass
class TrainConfig:
    model: str = "sa"  # sa | acvi
    pointer: bool = True
    coverage: bool = True
    hidden: int = 64
    embed: int = 32
    attn: int = 64
    out_hidden: int = 64
    vocab_max_size: int = 50000
    mc_samples: int = 1
    gumbel_fraction: float = 0.10
    gumbel_temperature: float = 0.5
    kl_weight: float = 1.0
    kl_warmup_steps: int = 0
    kl_estimator: str = "bound"  # bound | mc
    variance_head: str = "relu"  # relu | softplus | linear
    coverage_lambda: float = 1.0
    coverage_steps: int = 60
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 2.0
    batch_size: int = 16
    phases: Tuple[Phase, ...] = DESK_PHASES
    seed: int = 0
    beam_width: int = 5
    max_decode_len: int = 40
    length_norm: bool = False
    decode_context: str = "mean"  # mean | sample
    dropout: float = 0.0
    lowercase: bool = False
    init_scale: float = 0.08
    embed_init: float = 0.1

    def __post_init__(self):
        self.phases = tuple(tuple(int(v) for v in p) for p in self.phases)
        self.validate()

    def validate(self) -> None:
        choice = {"model": ("sa", "acvi"), "kl_estimator": ("bound", "mc"),
                  "variance_head": ("relu", "softplus", "linear"), "decode_context": ("mean", "sample")}
        for key, allowed in choice.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if not 0.0 <= self.gumbel_fraction <= 1.0:
            raise ConfigError(f"gumbel_fraction must lie in [0, 1], got {self.gumbel_fraction}")
        if self.gumbel_temperature <= 0:
            raise ConfigError("gumbel_temperature must be positive")
        for key in ("hidden", "embed", "attn", "out_hidden", "vocab_max_size", "mc_samples",
                    "batch_size", "beam_width", "max_decode_len"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("kl_weight", "kl_warmup_steps", "coverage_lambda", "coverage_steps", "grad_clip"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative, got {getattr(self, key)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.phases:
            raise ConfigError("phase table must not be empty")
        for p in self.phases:
            if len(p) != 3 or min(p) <= 0:
                raise ConfigError(f"every phase needs positive (iterations, max_encode, max_decode), got {p}")

    @property
    def total_steps(self) -> int:
        return sum(p[0] for p in self.phases) + (self.coverage_steps if self.coverage else 0)

    @property
    def gumbel_start(self) -> int:
        """First step that uses Gumbel-Softmax context sampling."""
        return int(math.floor((1.0 - self.gumbel_fraction) * self.total_steps))

    def phase_at(self, step: int) -> Tuple[int, int, int, bool]:
        """(phase index, max_encode, max_decode, coverage_finetune) for a global step."""
        start = 0
        for i, (n, enc, dec) in enumerate(self.phases):
            if step < start + n:
                return i, enc, dec, False
            start += n
        _, enc, dec = self.phases[-1]
        return len(self.phases), enc, dec, True

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Canonical ``key = value`` rendering (field order, one per line)."""
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: Optional["TrainConfig"] = None) -> "TrainConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(unknown_key_message(key, list(known)))
            changes[key] = parse_value(key, raw, getattr(base, key))
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_text(cls, text: str, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        return cls.from_mapping(parse_kv(text), base)


def unknown_key_message(key: str, valid: List[str]) -> str:
    close = difflib.get_close_matches(key, valid, n=1, cutoff=0.5)
    hint = f"; did you mean '{close[0]}'?" if close else ""
    return f"unknown config key '{key}'{hint}"


def parse_kv(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        out[key] = value
    return out


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(":".join(str(v) for v in p) for p in value)
    return str(value)


def parse_phases(text: str) -> Tuple[Phase, ...]:
    phases = []
    for chunk in text.split(","):
        parts = chunk.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"phase {chunk!r} must be iterations:max_encode:max_decode")
        try:
            phases.append(tuple(int(p) for p in parts))
        except ValueError as exc:
            raise ConfigError(f"phase {chunk!r} has a non-integer field") from exc
    return tuple(phases)


def parse_value(key: str, raw, current):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            if raw in PRESET_PHASES:
                return PRESET_PHASES[raw]
            return parse_phases(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


PRESET_PHASES = {"desk": DESK_PHASES, "paper": PAPER_PHASES}


def preset(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(unknown_key_message(name, list(PRESETS)).replace("config key", "preset"))
    return TrainConfig(**PRESETS[name])
