"""Experiment configuration: JSON file + CLI flag overlay, flags win."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidInput
from .extraction import DEFAULT_P_VALUES, DEFAULT_SAMPLES
from .model import ModelConfig
from .unlearner import UnlearnConfig


@dataclass
class SynthSpec:
    n_docs: int = 200
    len_min: int = 16
    len_max: int = 64


@dataclass
class PretrainSpec:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3


@dataclass
class SplitSpec:
    n_forget_batches: int = 1
    forget_batch_size: int = 8
    heldout_frac: float = 0.1


@dataclass
class ExtractionSpec:
    p_values: tuple[float, ...] = DEFAULT_P_VALUES
    samples_per_target: int = DEFAULT_SAMPLES

    def __post_init__(self) -> None:
        self.p_values = tuple(float(p) for p in self.p_values)
        for p in self.p_values:
            if not 0.0 < p <= 1.0:
                raise InvalidInput(f"extraction p value {p} outside (0, 1]")
        if self.samples_per_target < 1:
            raise InvalidInput("samples_per_target must be >= 1")


@dataclass
class ExperimentConfig:
    corpus_path: str | None = None        # JSONL path; None means synthesize
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    splits: SplitSpec = field(default_factory=SplitSpec)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    extraction: ExtractionSpec = field(default_factory=ExtractionSpec)
    out_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unlearn"] = self.unlearn.as_dict()
        d["extraction"]["p_values"] = list(self.extraction.p_values)
        return d


_SECTIONS = {
    "synth": SynthSpec,
    "model": ModelConfig,
    "pretrain": PretrainSpec,
    "splits": SplitSpec,
    "extraction": ExtractionSpec,
}


def _build_section(cls, data: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise InvalidInput(f"{where}: unknown fields {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidInput(f"{where}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config from a (partial) JSON object; unset fields default."""
    if not isinstance(data, dict):
        raise InvalidInput("config root must be a JSON object")
    cfg = ExperimentConfig()
    known = {"corpus_path", "out_dir", "seed", "unlearn", *_SECTIONS}
    unknown = set(data) - known
    if unknown:
        raise InvalidInput(f"config: unknown fields {sorted(unknown)}")
    for name, cls in _SECTIONS.items():
        if name in data:
            setattr(cfg, name, _build_section(cls, dict(data[name]), name))
    if "unlearn" in data:
        u = dict(data["unlearn"])
        if "lambda" in u:
            u["lam"] = u.pop("lambda")
        if "stop_metrics" in u:
            u["stop_metrics"] = tuple(u["stop_metrics"])
        cfg.unlearn = _build_section(UnlearnConfig, u, "unlearn")
    if "corpus_path" in data:
        cfg.corpus_path = data["corpus_path"]
    if "out_dir" in data:
        cfg.out_dir = str(data["out_dir"])
    if "seed" in data:
        cfg.seed = int(data["seed"])
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
