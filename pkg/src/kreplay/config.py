"""Flat ``key = value`` run configuration shared by every CLI command.

A plain key applies to every command. A key prefixed with a phase name
(``pretrain.lr_max = 3e-3``) applies only to that phase and wins over the plain
key. Blank lines and ``#`` comments are ignored; unknown keys are errors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .corpus import CorpusSizes
from .model import ModelConfig
from .train import TrainConfig

PHASES = ("pretrain", "finetune", "kreplay")

# what each phase selects its best checkpoint by unless the config says otherwise
PHASE_DEFAULTS = {
    "pretrain": {"select_by": "rec", "cider_floor": 0.0},
    "finetune": {"select_by": "cider"},
    "kreplay": {"select_by": "rec"},
}


class ConfigError(ValueError):
    """Unknown key, unparsable value or invalid combination."""


@dataclass
class RunConfig:
    seed: int = 0
    # inputs
    data: str = ""
    init: str = ""
    teacher: str = ""
    checkpoint: str = ""
    # corpus generation
    num_concepts: int = 24
    num_unseen: int = 12
    noise: float = 0.1
    n_pretrain: int = 600
    n_generic_train: int = 600
    n_generic_val: int = 64
    n_generic_test: int = 128
    n_replay: int = 120
    n_concept_val: int = 48
    n_concept_test: int = 96
    # model
    d_model: int = 32
    n_heads: int = 2
    n_enc_layers: int = 1
    n_dec_layers: int = 2
    d_ff: int = 64
    grid_h: int = 4
    grid_w: int = 4
    d_patch: int = 16
    max_len: int = 16
    use_patch_self_attention: bool = True
    patch_attn_layers: int = 1
    # training
    epochs: int = 10
    batch_size: int = 8
    lr_max: float = 3e-3
    lr_min: float = 3e-5
    smoothing: float = 0.1
    lambda_k: float = 1.0
    lambda_d: float = 1.0
    temperature: float = 16.0
    beam_width: int = 5
    pseudo_caption_source: str = "teacher"
    pseudo_decode: str = "beam"
    use_scheduler: bool = True
    use_replay: bool = True
    checkpoint_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    select_by: str = "rec"
    cider_floor: float = 0.95
    eval_method: str = "beam"
    # evaluation and decoding
    eval_generic_split: str = "generic_test"
    eval_concept_split: str = "concept_test"
    decode_split: str = "concept_test"
    decode_method: str = "beam"
    image_ids: str = ""

    def corpus_sizes(self) -> CorpusSizes:
        return CorpusSizes(**{f.name: getattr(self, "n_" + f.name) for f in fields(CorpusSizes)})

    def model_config(self, vocab_size: int) -> ModelConfig:
        names = [f.name for f in fields(ModelConfig) if f.name != "vocab_size"]
        return ModelConfig(vocab_size=vocab_size, **{n: getattr(self, n) for n in names})

    def train_config(self) -> TrainConfig:
        names = [f.name for f in fields(TrainConfig) if f.name != "seed"]
        return TrainConfig(seed=self.seed, **{n: getattr(self, n) for n in names})

    def as_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> RunConfig:
        try:
            self.corpus_sizes()
            self.model_config(vocab_size=5)
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 <= self.num_unseen < self.num_concepts:
            raise ConfigError("need 0 <= num_unseen < num_concepts")
        if self.decode_method not in ("beam", "greedy"):
            raise ConfigError("decode_method must be beam or greedy")
        return self


_FIELDS = {f.name for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = type(getattr(RunConfig(), key))
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind is str:
        return raw
    try:
        return kind(raw) if kind is float else int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_pairs(pairs, source: str = "override") -> dict[str, str]:
    """``["k=v", ...]`` (or ``(lineno, text)`` tuples) into a checked raw mapping."""
    out = {}
    for item in pairs:
        where, text = item if isinstance(item, tuple) else (None, item)
        label = f"{source}:{where}" if where is not None else source
        if "=" not in text:
            raise ConfigError(f"{label}: expected key = value, got {text!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        phase, _, name = key.rpartition(".")
        if phase and phase not in PHASES:
            raise ConfigError(f"{label}: unknown phase prefix {phase!r}")
        if name not in _FIELDS:
            raise ConfigError(f"{label}: unknown config key {key!r}")
        _parse_value(name, value)
        out[key] = value
    return out


def read_config_file(path: str | Path) -> dict[str, str]:
    lines = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line))
    return parse_pairs(lines, source=str(path))


def resolve(raw: dict[str, str], phase: str | None = None) -> RunConfig:
    """Plain keys, then the phase's built-in defaults, then the phase's own keys."""
    values = {}
    for key, value in raw.items():
        if "." not in key:
            values[key] = _parse_value(key, value)
    if phase is not None:
        for key, value in PHASE_DEFAULTS.get(phase, {}).items():
            if key not in values:
                values[key] = value
        prefix = phase + "."
        for key, value in raw.items():
            if key.startswith(prefix):
                name = key[len(prefix):]
                values[name] = _parse_value(name, value)
    return RunConfig(**values).validate()


def load_config(path: str | Path | None, overrides=(), phase: str | None = None) -> RunConfig:
    raw = read_config_file(path) if path else {}
    raw.update(parse_pairs(overrides))
    return resolve(raw, phase)
