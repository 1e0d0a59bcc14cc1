# -*- coding: utf-8 -*-
'''
Configuration submodule.

LimeConfig describes the architecture, TrainConfig the optimization recipe. Both
are loaded from one flat JSON object whose keys mirror the field names; each key
is routed to the configuration owning it.
'''

import os
import json
from dataclasses import dataclass, fields, asdict, replace
from .exceptions import ConfigError

__all__ = ["VARIANTS", "LimeConfig", "TrainConfig", "PRESETS", "load_config", "split_config_dict", "resolve_seed"]

VARIANTS = ("full", "baseline", "average", "last_j", "first_j")


def normalize_variant(name:str) -> str:
    '''
    Normalize a routing variant name ("last-j", "last_j" and "LAST-J" are the same).
    '''
    return name.strip().lower().replace("-", "_")


@dataclass
class LimeConfig:
    '''
    Architecture of a decoder-only transformer with layer-integrated routing.

    Attributes:
        vocab_size (int): V
        hidden_size (int): d
        intermediate_size (int): SwiGLU inner width
        num_layers (int): L
        num_heads (int): H query heads
        num_kv_heads (int): H_kv key/value heads
        max_seq (int): longest supported sequence
        rope_theta (float): rotary base
        routing_variant (str): one of VARIANTS
        routing_j (int or None): window for last_j / first_j
        tie_embeddings (bool): output head shares the embedding table
    '''
    vocab_size: int = 256
    hidden_size: int = 32
    intermediate_size: int = 128
    num_layers: int = 4
    num_heads: int = 4
    num_kv_heads: int = 4
    max_seq: int = 256
    rope_theta: float = 10000.0
    routing_variant: str = "full"
    routing_j: int|None = None
    tie_embeddings: bool = True

    def __post_init__(self):
        self.routing_variant = normalize_variant(self.routing_variant)
        for name in ("vocab_size", "hidden_size", "intermediate_size", "num_layers", "num_heads", "num_kv_heads", "max_seq"):
            if int(getattr(self, name)) < 1:
                raise ConfigError("{} must be strictly positive.".format(name))
        if self.hidden_size % self.num_heads:
            raise ConfigError("hidden_size {} is not divisible by num_heads {}.".format(self.hidden_size, self.num_heads))
        if self.num_heads % self.num_kv_heads:
            raise ConfigError("num_heads {} is not divisible by num_kv_heads {}.".format(self.num_heads, self.num_kv_heads))
        if self.head_dim % 2:
            raise ConfigError("head_dim {} must be even for rotary embeddings.".format(self.head_dim))
        if self.rope_theta <= 0:
            raise ConfigError("rope_theta must be strictly positive.")
        if self.routing_variant not in VARIANTS:
            raise ConfigError("Unknown routing variant '{}'; expected one of {}.".format(self.routing_variant, ", ".join(VARIANTS)))
        if self.routing_variant in ("last_j", "first_j"):
            if self.routing_j is None:
                raise ConfigError("Routing variant '{}' needs j (routing_j / --j).".format(self.routing_variant))
            if self.routing_j < 1:
                raise ConfigError("routing_j must be at least 1.")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def has_router(self) -> bool:
        '''
        Whether layers past the first own trainable router weights.
        '''
        return self.routing_variant not in ("baseline", "average")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values:dict) -> 'LimeConfig':
        return cls(**_checked(cls, values))

    def with_variant(self, variant:str, j:int|None=None) -> 'LimeConfig':
        return replace(self, routing_variant=variant, routing_j=j)


@dataclass
class TrainConfig:
    '''
    Optimization recipe.

    Attributes:
        lr (float): peak learning rate of non-router parameters
        router_lr (float): peak learning rate of router weights
        weight_decay (float): decoupled weight decay of non-router parameters
        router_weight_decay (float): router weight decay; always 0
        beta1, beta2, eps (float): AdamW constants
        schedule (str): "cosine" (to min_lr) or "linear" (to 0)
        warmup_steps (int): linear warmup length; -1 means one epoch
        min_lr (float): cosine floor
        max_steps (int or None): total optimizer steps
        epochs (int or None): alternative to max_steps
        batch_size (int): micro-batch size
        grad_accum (int): micro-batches per optimizer step
        seq_len (int): padded sequence length
        clip_norm (float): global gradient norm bound
        seed (int): run seed
        eval_every (int): evaluation cadence in steps, 0 disables
        log_every (int): logging cadence in steps
        mode (str): "finetune" (loss on solutions) or "lm" (loss everywhere)
        prefetch (int): bound of the batch queue
    '''
    lr: float = 1e-3
    router_lr: float = 1e-2
    weight_decay: float = 0.1
    router_weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    schedule: str = "cosine"
    warmup_steps: int = 200
    min_lr: float = 1e-6
    max_steps: int|None = None
    epochs: int|None = None
    batch_size: int = 64
    grad_accum: int = 1
    seq_len: int = 256
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10
    mode: str = "lm"
    prefetch: int = 4

    def __post_init__(self):
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError("Unknown schedule '{}'.".format(self.schedule))
        if self.mode not in ("lm", "finetune"):
            raise ConfigError("Unknown training mode '{}'.".format(self.mode))
        if self.lr <= 0 or self.router_lr <= 0:
            raise ConfigError("Learning rates must be strictly positive.")
        if self.min_lr > self.lr:
            raise ConfigError("min_lr {} exceeds lr {}.".format(self.min_lr, self.lr))
        if self.router_weight_decay != 0:
            raise ConfigError("Router weights are never decayed; router_weight_decay must be 0.")
        if self.max_steps is None and self.epochs is None:
            raise ConfigError("Either max_steps or epochs must be set.")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be strictly positive.")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be strictly positive.")
        if self.max_steps is not None and self.warmup_steps > self.max_steps:
            raise ConfigError("warmup_steps {} exceeds max_steps {}.".format(self.warmup_steps, self.max_steps))
        if self.warmup_steps < -1:
            raise ConfigError("warmup_steps must be >= 0, or -1 for one epoch.")
        if self.batch_size < 1 or self.grad_accum < 1 or self.seq_len < 2:
            raise ConfigError("batch_size and grad_accum must be >= 1, seq_len >= 2.")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be strictly positive.")
        if self.prefetch < 1:
            raise ConfigError("prefetch must be at least 1.")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values:dict) -> 'TrainConfig':
        return cls(**_checked(cls, values))


def _checked(cls, values:dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError("Unknown {} keys: {}.".format(cls.__name__, ", ".join(sorted(unknown))))
    return dict(values)


# Presets. AET: 4 layers, 4 heads, dim 32, lr 1e-3 with linear decay.
PRESETS = {
    "aet": (
        dict(hidden_size=32, intermediate_size=128, num_layers=4, num_heads=4, num_kv_heads=4, max_seq=256),
        dict(lr=1e-3, router_lr=1e-2, weight_decay=0.0, schedule="linear", warmup_steps=0, epochs=60,
             batch_size=64, seq_len=128, mode="finetune"),
    ),
    "prosqa": (
        dict(hidden_size=128, intermediate_size=512, num_layers=4, num_heads=4, num_kv_heads=4, max_seq=512),
        dict(lr=1e-4, router_lr=1e-2, weight_decay=0.1, schedule="linear", warmup_steps=-1, epochs=10,
             batch_size=32, grad_accum=4, seq_len=384, mode="finetune"),
    ),
    "lm-small": (
        dict(hidden_size=256, intermediate_size=1024, num_layers=8, num_heads=8, num_kv_heads=8, max_seq=256),
        dict(lr=1e-3, router_lr=1e-2, weight_decay=0.1, schedule="cosine", warmup_steps=200, max_steps=5000,
             batch_size=64, seq_len=256, mode="lm"),
    ),
    "1b-gqa": (
        dict(vocab_size=50257, hidden_size=2048, intermediate_size=8192, num_layers=16, num_heads=32,
             num_kv_heads=8, max_seq=2048),
        dict(max_steps=20000, batch_size=1024, seq_len=2048),
    ),
    "1b-mha": (
        dict(vocab_size=50257, hidden_size=2048, intermediate_size=8192, num_layers=16, num_heads=32,
             num_kv_heads=32, max_seq=2048),
        dict(max_steps=20000, batch_size=1024, seq_len=2048),
    ),
}


def split_config_dict(values:dict) -> 'tuple[dict, dict]':
    '''
    Route flat config keys to LimeConfig and TrainConfig.

    A "preset" key selects the starting values, the remaining keys override them.

    Args:
        values (dict): flat configuration

    Returns:
        tuple[dict, dict]: model keys, training keys

    Raises:
        ConfigError: if a key belongs to neither configuration or the preset is unknown.
    '''
    values = dict(values)
    model_values, train_values = {}, {}
    preset = values.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("Unknown preset '{}'; expected one of {}.".format(preset, ", ".join(PRESETS)))
        model_values.update(PRESETS[preset][0])
        train_values.update(PRESETS[preset][1])
    model_names = {f.name for f in fields(LimeConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    for key, value in values.items():
        if key in model_names:
            model_values[key] = value
        elif key in train_names:
            train_values[key] = value
        else:
            raise ConfigError("Unknown configuration key '{}'.".format(key))
    return model_values, train_values


def load_config(path:str, overrides:dict|None=None) -> 'tuple[LimeConfig, TrainConfig]':
    '''
    Load both configurations from a JSON file.

    Args:
        path (str): JSON file path
        overrides (dict or None): flat keys applied after the file (e.g. CLI flags)

    Returns:
        tuple[LimeConfig, TrainConfig]: architecture and recipe

    Raises:
        ConfigError: if the file is not a JSON object or holds invalid values.
    '''
    try:
        with open(path, "r", encoding="utf-8") as f:
            values = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("Invalid JSON in {}: {}".format(path, e))
    if not isinstance(values, dict):
        raise ConfigError("Configuration file {} must hold a JSON object.".format(path))
    values.update(overrides or {})
    model_values, train_values = split_config_dict(values)
    if "max_steps" not in train_values and "epochs" not in train_values:
        train_values["max_steps"] = 1
        train_values.setdefault("warmup_steps", 0)
    try:
        return LimeConfig.from_dict(model_values), TrainConfig.from_dict(train_values)
    except TypeError as e:
        raise ConfigError(str(e))


def resolve_seed(explicit:int|None=None, configured:int|None=None) -> int:
    '''
    Resolve the run seed: explicit flag, then configuration, then LIME_SEED, then 0.

    Raises:
        ConfigError: if LIME_SEED is not an integer.
    '''
    if explicit is not None:
        return int(explicit)
    if configured is not None:
        return int(configured)
    env = os.environ.get("LIME_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError("LIME_SEED must be an integer, got '{}'.".format(env))
