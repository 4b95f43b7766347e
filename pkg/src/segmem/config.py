"""Run configuration: a flat dotted key-value document.

Example::

    seed = 0
    model.d = 32
    model.blocks = 2
    model.vocab = 64
    model.memory = la
    mc.variant = grm
    mc.mode = independent
    mc.c = 32
    task.kind = mqar
    task.length = 256
    training.steps = 300

Unknown keys and invalid combinations are rejected at load with the field
named.  ``echo_config`` renders the fully-resolved document (every default
materialized); parsing that echo reproduces the config exactly.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields

VARIANTS = ("none", "residual", "grm", "soup", "ssc", "loglinear++", "postmc")
MODES = ("checkpoint", "independent")
MEMORY_KINDS = ("la", "swla", "dla", "titans", "valueless")
ARCH_KINDS = ("linear", "mlp", "vector")
TASKS = ("mqar", "niah", "lm")


class ConfigError(ValueError):
    pass


@dataclass
class ModelCfg:
    d: int = 32
    blocks: int = 2
    vocab: int = 64
    memory: str = "la"
    arch: str = "linear"
    token_shift: bool = True
    tied_head: bool = False
    storage: str = "float64"


@dataclass
class McCfg:
    variant: str = "grm"
    mode: str = "checkpoint"
    segmentation: str = "constant"
    c: int = 32
    k: int = 2
    pooling: str = "default"  # mean | sum | default (per-variant)
    u_source: str = "proj"  # proj | query


@dataclass
class TaskCfg:
    kind: str = "mqar"
    length: int = 256
    eval_length: int = 0  # 0: same as length
    pairs: int = 32
    queries: int = 0  # 0: same as pairs
    payloads: int = 8
    text: str = ""  # corpus path for the toy LM task


@dataclass
class TrainingCfg:
    steps: int = 300
    lr: float = 1e-2
    schedule: str = "cosine"  # cosine | constant
    warmup: int = 20
    batch: int = 32
    eval_batch: int = 256
    eval_every: int = 50
    clip: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class InstrumentCfg:
    flops: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelCfg = field(default_factory=ModelCfg)
    mc: McCfg = field(default_factory=McCfg)
    task: TaskCfg = field(default_factory=TaskCfg)
    training: TrainingCfg = field(default_factory=TrainingCfg)
    instrument: InstrumentCfg = field(default_factory=InstrumentCfg)


_SECTIONS = {
    "model": ModelCfg,
    "mc": McCfg,
    "task": TaskCfg,
    "training": TrainingCfg,
    "instrument": InstrumentCfg,
}


def _parse_value(text: str, target_type):
    text = text.strip()
    if target_type is bool:
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if target_type is int:
        return int(text)
    if target_type is float:
        return float(text)
    return text


def parse_config(source: str) -> RunConfig:
    """Parse a config document (inline text, or a path to one)."""
    if "\n" not in source and "=" not in source and os.path.exists(source):
        with open(source, "r", encoding="utf-8") as f:
            source = f.read()
    cfg = RunConfig()
    for lineno, raw in enumerate(source.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "seed":
            cfg.seed = int(value)
            continue
        if "." not in key:
            raise ConfigError(f"unknown key {key!r}")
        section, name = key.split(".", 1)
        cls = _SECTIONS.get(section)
        if cls is None:
            raise ConfigError(f"unknown section {section!r} in key {key!r}")
        target = getattr(cfg, section)
        flds = {f.name: f.type for f in fields(cls)}
        if name not in flds:
            raise ConfigError(f"unknown key {key!r}")
        want = type(getattr(target, name))
        try:
            setattr(target, name, _parse_value(value, want))
        except ValueError as e:
            raise ConfigError(f"key {key!r}: {e}") from e
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    m, mc, task, tr = cfg.model, cfg.mc, cfg.task, cfg.training
    if m.memory not in MEMORY_KINDS:
        raise ConfigError(f"model.memory must be one of {MEMORY_KINDS}, got {m.memory!r}")
    if m.arch not in ARCH_KINDS:
        raise ConfigError(f"model.arch must be one of {ARCH_KINDS}, got {m.arch!r}")
    if m.memory in ("la", "swla") and m.arch != "linear":
        raise ConfigError(f"model.memory={m.memory} requires model.arch=linear")
    if m.memory == "valueless" and m.arch != "vector":
        raise ConfigError("model.memory=valueless requires model.arch=vector")
    if m.memory in ("dla", "titans") and m.arch == "vector":
        raise ConfigError(f"model.memory={m.memory} does not support model.arch=vector")
    if m.storage not in ("float64", "float32"):
        raise ConfigError(f"model.storage must be float64 or float32, got {m.storage!r}")
    if mc.variant not in VARIANTS:
        raise ConfigError(f"mc.variant must be one of {VARIANTS}, got {mc.variant!r}")
    if mc.mode not in MODES:
        raise ConfigError(f"mc.mode must be one of {MODES}, got {mc.mode!r}")
    if mc.variant == "loglinear++" and mc.mode != "checkpoint":
        raise ConfigError("mc.variant=loglinear++ requires mc.mode=checkpoint")
    if mc.segmentation not in ("constant", "logarithmic"):
        raise ConfigError(f"mc.segmentation must be constant or logarithmic, got {mc.segmentation!r}")
    if mc.c < 1:
        raise ConfigError(f"mc.c must be >= 1, got {mc.c}")
    if mc.k < 0:
        raise ConfigError(f"mc.k must be >= 0, got {mc.k}")
    if mc.pooling not in ("mean", "sum", "default"):
        raise ConfigError(f"mc.pooling must be mean, sum or default, got {mc.pooling!r}")
    if mc.u_source not in ("proj", "query"):
        raise ConfigError(f"mc.u_source must be proj or query, got {mc.u_source!r}")
    if task.kind not in TASKS:
        raise ConfigError(f"task.kind must be one of {TASKS}, got {task.kind!r}")
    if task.kind == "mqar" and 2 * task.pairs + (task.queries or task.pairs) > task.length:
        raise ConfigError(
            f"task.length={task.length} cannot hold {task.pairs} pairs "
            f"plus {task.queries or task.pairs} queries"
        )
    if tr.steps < 0 or tr.batch < 1:
        raise ConfigError("training.steps must be >= 0 and training.batch >= 1")


def echo_config(cfg: RunConfig) -> str:
    """Render the fully-resolved config; parsing the echo round-trips."""
    lines = [f"seed = {cfg.seed}"]
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        for f in fields(cls):
            value = getattr(obj, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> bytes:
    return hashlib.sha256(echo_config(cfg).encode("utf-8")).digest()


def layer_spec(cfg: RunConfig):
    """The per-block layer description this config implies."""
    from .model import LayerSpec

    mc = cfg.mc
    pooling = None if mc.pooling == "default" else mc.pooling
    return LayerSpec(
        d=cfg.model.d,
        memory_kind=cfg.model.memory,
        arch_kind=cfg.model.arch,
        variant="none" if mc.variant == "postmc" else mc.variant,
        mode=mc.mode,
        k_top=mc.k,
        pooling=pooling,
        u_source=mc.u_source,
        token_shift=cfg.model.token_shift,
    )


def plan_for(cfg: RunConfig, length: int):
    from .segmentation import constant_plan, logarithmic_plan

    if cfg.mc.variant == "loglinear++" or cfg.mc.segmentation == "logarithmic":
        return logarithmic_plan(length)
    return constant_plan(length, cfg.mc.c)
