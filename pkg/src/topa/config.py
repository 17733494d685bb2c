"""Run configuration: one TOML file with a table per stage.

Every table is optional; missing keys fall back to the defaults below.  The
whole resolved configuration serializes to canonical JSON and its hash is the
run fingerprint stamped into every artifact the CLI writes.

Example::

    seed = 0
    deterministic = true
    out = "runs"

    [world]
    n_concepts = 50

    [generation]
    mode = "synthetic"
    count = 2000

    [trainer]
    epochs = 10
    batch_size = 32
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aligner import TrainerConfig, fingerprint
from .generation import default_condition_weights
from .synthetic import WorldConfig

GENERATION_MODES = ("synthetic", "fixture", "live")


@dataclass(frozen=True)
class GenerationConfig:
    mode: str = "synthetic"
    count: int = 2000
    kinds: tuple[str, ...] = ("content", "temporal")
    # fixture / live modes
    sources: str = ""
    fixtures: str = ""
    weights: dict[str, float] = field(default_factory=default_condition_weights)
    max_retries: int = 2
    concurrency: int = 1
    endpoint: str = ""
    timeout_s: float = 60.0
    rate_limit_per_min: float = 60.0
    credentials: str = "env:TOPA_LLM_API_KEY"

    def __post_init__(self):
        if self.mode not in GENERATION_MODES:
            raise ValueError(f"generation.mode must be one of {GENERATION_MODES}")
        if self.count < 0:
            raise ValueError("generation.count must be >= 0")


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "synthetic"
    target_frames: int = 10
    # synthetic benchmark rendered by ``encode``
    benchmark_size: int = 400
    finetune_size: int = 0


@dataclass(frozen=True)
class MemoryConfig:
    max_size: int = 10_000
    temperature: float = 0.01


@dataclass(frozen=True)
class BackboneSection:
    """Where the frozen language model comes from.

    With ``path`` empty, ``train`` builds the tiny backbone and gives it
    language competence on a separate synthetic text corpus first.
    """

    path: str = ""
    width: int = 96
    n_layers: int = 3
    n_heads: int = 4
    dtype: str = "float32"
    language_corpus: int = 8000
    language_epochs: int = 10
    language_lr: float = 3e-3


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "logits"
    projection: bool = True
    frames: int = 10
    blind: bool = False
    ablate_frames: tuple[int, ...] = (1, 10)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    out: str = "runs"
    world: WorldConfig = WorldConfig()
    generation: GenerationConfig = GenerationConfig()
    encoder: EncoderConfig = EncoderConfig()
    memory: MemoryConfig = MemoryConfig()
    backbone: BackboneSection = BackboneSection()
    trainer: TrainerConfig = TrainerConfig(epochs=10, batch_size=32, base_lr=0.5, adapter_length=10)
    finetune: TrainerConfig = TrainerConfig(epochs=1, batch_size=32, base_lr=0.5, adapter_length=10)
    eval: EvalConfig = EvalConfig()

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return fingerprint(d)

    def with_overrides(self, seed: int | None = None, deterministic: bool | None = None,
                       out: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, trainer=replace(cfg.trainer, seed=seed),
                          finetune=replace(cfg.finetune, seed=seed))
        if deterministic is not None:
            cfg = replace(cfg, deterministic=deterministic,
                          trainer=replace(cfg.trainer, deterministic=deterministic),
                          finetune=replace(cfg.finetune, deterministic=deterministic))
        if out is not None:
            cfg = replace(cfg, out=out)
        return cfg


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


_SECTIONS = {"world": WorldConfig, "generation": GenerationConfig, "encoder": EncoderConfig,
             "memory": MemoryConfig, "backbone": BackboneSection, "trainer": TrainerConfig,
             "finetune": TrainerConfig, "eval": EvalConfig}


def _build(cls, table: dict[str, Any], base, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(known)
    if unknown:
        raise ValueError(f"unknown keys in [{where}]: {', '.join(sorted(unknown))}")
    values = {}
    for k, v in table.items():
        values[k] = tuple(v) if isinstance(v, list) else v
    return replace(base, **values)


def from_dict(raw: dict[str, Any]) -> RunConfig:
    base = RunConfig()
    values = {}
    for k, v in raw.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ValueError(f"[{k}] must be a table")
            values[k] = _build(_SECTIONS[k], v, getattr(base, k), k)
        elif k in ("seed", "deterministic", "out"):
            values[k] = v
        else:
            raise ValueError(f"unknown top-level key {k!r}")
    return replace(base, **values)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        return from_dict(tomllib.load(fh))
