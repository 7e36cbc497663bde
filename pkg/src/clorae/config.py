"""Run configuration: defaults, key-value config files, CLI overrides.

Config files are plain `key = value` lines ('#' starts a comment). Values
are parsed as JSON when possible, else kept as strings. Precedence is
CLI flag > config file > built-in default.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .model import ModelConfig
from .taskgen import DatasetSpec, GeneratorSpec

OUTPUT_ROOT_ENV = "CLORAE_OUTPUT_ROOT"

VARIANT_PRESETS = ("full", "only_ulora", "only_tlora", "no_gate", "no_aml",
                   "no_mim", "vanilla_lora")


class ConfigError(ValueError):
    """Inconsistent or unparsable run configuration."""


@dataclass
class RunConfig:
    # data: either a pre-generated directory or generator knobs
    data_dir: str = ""
    data_seed: int = 0
    conflict_rate: float = 0.5
    visual_rate: float = 0.3
    train_count: int = 2000
    dev_count: int = 500
    test_count: int = 500
    datasets_spec: str = ""   # "id:family:train/dev/test,..." overrides counts
    vocab_size: int = 128
    n_entities: int = 24

    # model
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ff: int = 256
    max_text_len: int = 64
    max_answer_len: int = 24
    visual_len: int = 4
    rank: int = 9
    n_experts: int = 3
    alpha: float = 0.0        # 0 means "use the rank" (scale factor 1)
    dropout: float = 0.1
    wrap: str = "q,v"
    train_embeddings: bool = True

    # optimization
    lr: float = 1e-4
    decay_factor: float = 0.5
    decay_every: int = 5
    epochs: int = 20
    batch_size: int = 32
    eval_batch_size: int = 64

    # joint objective
    beta: float = 0.01
    gamma: float = 2.0
    margin: float = 1.1
    target: float = 1.0       # reference score shared by all datasets

    # ablation switches
    only_ulora: bool = False
    only_tlora: bool = False
    no_gate: bool = False
    no_aml: bool = False
    no_mim: bool = False
    vanilla: bool = False     # plain single-expert adapter baseline

    # run
    seed: int = 0
    out_dir: str = "runs/default"

    # -- derived views -------------------------------------------------------

    def validate(self) -> None:
        if self.only_ulora and self.only_tlora:
            raise ConfigError("only_ulora and only_tlora are mutually exclusive")
        if self.only_tlora and self.no_gate:
            raise ConfigError("only_tlora keeps the router; no_gate contradicts it")
        if self.vanilla and (self.only_tlora or self.no_gate):
            raise ConfigError("vanilla baseline has a single expert and no router")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.margin <= 1.0:
            raise ConfigError(f"margin must be > 1, got {self.margin}")
        if self.gamma < 0.0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.target <= 0.0:
            raise ConfigError(f"target must be positive, got {self.target}")

    @property
    def adapter_variant(self) -> str:
        if self.vanilla:
            return "vanilla"
        if self.only_ulora:
            return "only_universal"
        if self.only_tlora:
            return "only_task"
        if self.no_gate:
            return "no_gate"
        return "full"

    @property
    def mim_enabled(self) -> bool:
        return (not self.no_mim and not self.vanilla
                and self.adapter_variant in ("full", "no_gate"))

    @property
    def aml_enabled(self) -> bool:
        return not self.no_aml and not self.vanilla

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_encoder_layers=self.n_encoder_layers,
            n_decoder_layers=self.n_decoder_layers,
            d_ff=self.d_ff,
            max_text_len=self.max_text_len,
            max_answer_len=self.max_answer_len,
            visual_len=self.visual_len,
            rank=self.rank,
            n_experts=self.n_experts,
            alpha=self.alpha if self.alpha > 0 else None,
            dropout=self.dropout,
            wrap=tuple(w.strip() for w in self.wrap.split(",") if w.strip()),
            variant=self.adapter_variant,
            train_embeddings=self.train_embeddings,
        )

    def generator_spec(self) -> GeneratorSpec:
        if self.datasets_spec:
            datasets = parse_datasets_spec(self.datasets_spec)
        else:
            counts = (self.train_count, self.dev_count, self.test_count)
            datasets = {
                "ent-a": DatasetSpec(0, *counts),
                "rel-a": DatasetSpec(1, *counts),
                "evt-a": DatasetSpec(2, *counts),
            }
        return GeneratorSpec(
            seed=self.data_seed,
            datasets=datasets,
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            visual_len=self.visual_len,
            conflict_rate=self.conflict_rate,
            visual_rate=self.visual_rate,
            n_entities=self.n_entities,
        )

    def resolved_out_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV, "")
        path = Path(self.out_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path

    def apply_variant(self, name: str) -> "RunConfig":
        """A copy of this config with one named ablation preset applied."""
        if name not in VARIANT_PRESETS:
            raise ConfigError(
                f"unknown variant {name!r}; choose from {VARIANT_PRESETS}")
        cfg = dataclasses.replace(
            self, only_ulora=False, only_tlora=False, no_gate=False,
            no_aml=False, no_mim=False, vanilla=False)
        if name == "vanilla_lora":
            return dataclasses.replace(cfg, vanilla=True, no_aml=True, no_mim=True)
        if name == "full":
            return cfg
        return dataclasses.replace(cfg, **{name: True})


def parse_datasets_spec(spec: str) -> dict[str, DatasetSpec]:
    """Parse "id:family:train/dev/test,..." into dataset specs."""
    out: dict[str, DatasetSpec] = {}
    for chunk in spec.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            ds_id, family, counts = chunk.split(":")
            train, dev, test = (int(c) for c in counts.split("/"))
            out[ds_id] = DatasetSpec(int(family), train, dev, test)
        except ValueError as e:
            raise ConfigError(f"bad dataset spec {chunk!r}: {e}")
    if not out:
        raise ConfigError(f"dataset spec {spec!r} names no datasets")
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config_file(path: str | Path) -> dict:
    """Parse a `key = value` file into a dict of raw values."""
    values: dict = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            values[key] = _parse_value(raw)
    return values


def build_run_config(file_values: dict | None = None,
                     overrides: dict | None = None) -> RunConfig:
    """Merge defaults, config-file values and CLI overrides, then validate."""
    known = {f.name: f.type for f in fields(RunConfig)}
    merged: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    cfg = RunConfig(**merged)
    cfg.validate()
    return cfg
