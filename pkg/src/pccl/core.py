"""Shared configuration schema and elementary tensor operations.

Tensors follow the (batch, class, height, width) layout throughout:

* a *logit map* holds raw per-pixel class scores,
* a *probability map* holds per-pixel class distributions (softmax of logits),
* a *mask map* is an integer (batch, height, width) tensor of class indices.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import torch


class ValidationError(ValueError):
    """Raised when a tensor or configuration violates its contract."""


class ConfigError(ValidationError):
    """Invalid configuration. ``problems`` lists every violation found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class LossWeights:
    lam: float = 5.0
    tau: float = 1.0
    beta: float = 10.0


@dataclass(frozen=True)
class Ablation:
    semi: bool = True
    con: bool = True
    mac: bool = True


# TOML keys differ from attribute names only where Python reserves the word.
_WEIGHT_KEYS = {"lambda": "lam", "tau": "tau", "beta": "beta"}

SCALES = ("paper", "desk")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    labelled_batch: int = 1
    unlabelled_batch: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    input_size: int = 448
    mix_ratio: float = 0.5
    ema_decay: float = 0.99
    seed: int = 0
    labelled_fraction: float = 0.05
    num_classes: int = 2
    scale: str = "paper"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    @classmethod
    def desk(cls, **overrides):
        """Laptop-scale defaults: 64 px inputs, reduced models, 60 epochs."""
        base = dict(epochs=60, input_size=64, scale="desk")
        base.update(overrides)
        return cls(**base)

    def problems(self):
        out = []
        for name in ("epochs", "labelled_batch", "unlabelled_batch", "input_size", "num_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                out.append(f"{name} must be an integer, got {v!r}")
        for name in ("learning_rate", "momentum", "weight_decay", "mix_ratio", "ema_decay",
                     "labelled_fraction"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                out.append(f"{name} must be a number, got {v!r}")
        if out:
            return out

        if self.epochs < 1:
            out.append(f"epochs must be >= 1, got {self.epochs}")
        if self.labelled_batch < 1:
            out.append(f"labelled_batch must be >= 1, got {self.labelled_batch}")
        if self.unlabelled_batch < 2 or self.unlabelled_batch % 2:
            out.append(f"unlabelled_batch must be a positive even number, got {self.unlabelled_batch}")
        for name in ("learning_rate", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.mix_ratio <= 1.0:
            out.append(f"mix_ratio must lie in [0, 1], got {self.mix_ratio}")
        if not 0.0 <= self.ema_decay < 1.0:
            out.append(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if not 0.0 < self.labelled_fraction <= 1.0:
            out.append(f"labelled_fraction must lie in (0, 1], got {self.labelled_fraction}")
        if self.input_size < 32 or self.input_size % 32:
            # 4x patch embedding followed by three 2x merges
            out.append(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.num_classes < 2:
            out.append(f"num_classes must be >= 2, got {self.num_classes}")
        if self.scale not in SCALES:
            out.append(f"scale must be one of {SCALES}, got {self.scale!r}")
        if not isinstance(self.loss_weights, LossWeights):
            out.append("loss_weights must be a LossWeights")
        else:
            for key, attr in _WEIGHT_KEYS.items():
                v = getattr(self.loss_weights, attr)
                if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                    out.append(f"loss_weights.{key} must be a non-negative number, got {v!r}")
        if not isinstance(self.ablation, Ablation):
            out.append("ablation must be an Ablation")
        else:
            for f in fields(Ablation):
                if not isinstance(getattr(self.ablation, f.name), bool):
                    out.append(f"ablation.{f.name} must be a boolean")
        return out

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["loss_weights"] = {k: getattr(self.loss_weights, a) for k, a in _WEIGHT_KEYS.items()}
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def config_keys():
    """Every addressable key with its default, dotted for nested sections."""
    out = {}
    for f in fields(TrainConfig):
        if f.name == "loss_weights":
            for key, attr in _WEIGHT_KEYS.items():
                out[f"loss_weights.{key}"] = getattr(LossWeights(), attr)
        elif f.name == "ablation":
            for g in fields(Ablation):
                out[f"ablation.{g.name}"] = g.default
        else:
            out[f.name] = f.default
    return out


def config_from_dict(data, base=None):
    """Build a TrainConfig from a nested mapping, rejecting unknown keys.

    All problems (unknown keys and invalid values) are collected and raised
    together as one :class:`ConfigError`.
    """
    base = base or TrainConfig()
    problems = []
    flat = {}
    weights = {a: getattr(base.loss_weights, a) for a in _WEIGHT_KEYS.values()}
    toggles = dataclasses.asdict(base.ablation)
    top = {f.name for f in fields(TrainConfig)} - {"loss_weights", "ablation"}

    for key, value in data.items():
        if key == "loss_weights":
            if not isinstance(value, dict):
                problems.append("loss_weights must be a section")
                continue
            for k, v in value.items():
                if k in _WEIGHT_KEYS:
                    weights[_WEIGHT_KEYS[k]] = v
                else:
                    problems.append(f"unknown key: loss_weights.{k}")
        elif key == "ablation":
            if not isinstance(value, dict):
                problems.append("ablation must be a section")
                continue
            for k, v in value.items():
                if k in toggles:
                    toggles[k] = v
                else:
                    problems.append(f"unknown key: ablation.{k}")
        elif key in top:
            flat[key] = value
        else:
            problems.append(f"unknown key: {key}")

    merged = dataclasses.asdict(base)
    merged.update(flat)
    merged["loss_weights"] = LossWeights(**weights)
    merged["ablation"] = Ablation(**toggles)
    # int-valued floats from TOML ("beta = 0") are fine
    for name in ("learning_rate", "momentum", "weight_decay", "mix_ratio", "ema_decay",
                 "labelled_fraction"):
        if isinstance(merged[name], int) and not isinstance(merged[name], bool):
            merged[name] = float(merged[name])

    cfg = TrainConfig.__new__(TrainConfig)
    for k, v in merged.items():
        object.__setattr__(cfg, k, v)
    problems.extend(cfg.problems())
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path, base=None):
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except OSError as e:
        raise ConfigError([f"cannot read config {path}: {e.strerror}"]) from e
    except tomli.TOMLDecodeError as e:
        raise ConfigError([f"{path}: {e}"]) from e
    return config_from_dict(data, base=base)


def _parse_value(text):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(config, overrides):
    """Apply ``key=value`` strings (dotted keys for sections) on top of ``config``."""
    data = {}
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override must look like key=value, got {item!r}")
            continue
        key, _, raw = item.partition("=")
        key = key.strip()
        value = _parse_value(raw.strip())
        if "." in key:
            section, _, sub = key.partition(".")
            data.setdefault(section, {})[sub] = value
        else:
            data[key] = value
    if problems:
        raise ConfigError(problems)
    return config_from_dict(data, base=config)


def dump_config(config, path):
    d = config.to_dict()
    lines = []
    for k, v in d.items():
        if not isinstance(v, dict):
            lines.append(f"{k} = {json.dumps(v)}")
    for section in ("loss_weights", "ablation"):
        lines.append(f"\n[{section}]")
        for k, v in d[section].items():
            lines.append(f"{k} = {json.dumps(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# tensor operations

def check_finite(t, what="tensor"):
    bad = ~torch.isfinite(t)
    if bad.any():
        idx = tuple(int(i) for i in bad.nonzero()[0])
        raise ValidationError(f"non-finite {what} value at index {idx}")


def softmax(logits):
    """Per-pixel class distribution of a (B, C, H, W) logit map."""
    check_finite(logits, "logit")
    return torch.softmax(logits, dim=1)


def check_probs(probs, atol=1e-5):
    if probs.dim() != 4:
        raise ValidationError(f"expected a (B, C, H, W) probability map, got shape {tuple(probs.shape)}")
    check_finite(probs, "probability")
    if (probs < -atol).any() or (probs > 1 + atol).any():
        raise ValidationError("probabilities must lie in [0, 1]")
    total = probs.detach().sum(dim=1)
    if not torch.allclose(total, torch.ones_like(total), atol=atol):
        raise ValidationError("per-pixel class probabilities must sum to 1")


def one_hot_encode(probs):
    """Hard pseudo-labels: per-pixel argmax, lowest class index on ties.

    The result is an integer mask and therefore carries no gradient back to
    whatever produced ``probs``.
    """
    check_probs(probs)
    return probs.detach().argmax(dim=1)


def expand_one_hot(mask, num_classes, dtype=None):
    """(B, H, W) class indices -> (B, C, H, W) float one-hot tensor."""
    if mask.min() < 0 or mask.max() >= num_classes:
        raise ValidationError(f"mask entries must lie in [0, {num_classes - 1}]")
    oh = torch.nn.functional.one_hot(mask.long(), num_classes).permute(0, 3, 1, 2)
    return oh.to(dtype or torch.get_default_dtype())
