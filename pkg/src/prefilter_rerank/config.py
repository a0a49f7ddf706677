"""Pipeline configuration: one YAML document plus ``key.path=value`` overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping, Optional, Sequence

import yaml

from prefilter_rerank.calibration import (
    DEFAULT_GRID_STEP,
    DEFAULT_SAMPLE_FRACTION,
    GridSearch,
    HillClimb,
    Threshold,
)
from prefilter_rerank.core import RelevancePolicy
from prefilter_rerank.llm import BackendConfig
from prefilter_rerank.rerank import WindowConfig
from prefilter_rerank.scoring import ScoringPromptTemplate

TOP_N = 100
CHUNK_SIZE = 5
WINDOW_SIZE = 10
STEP_SIZE = 5
NDCG_CUTOFF = 10

# Thresholds found for Mixtral-8x7B-Instruct: BEIR tasks with grade 1 relevant,
# and TREC-DL with grade 1 counted relevant (0.6) or not (0.7).
PRESETS = {
    "beir": {"min_relevant_level": 1, "threshold": 0.3},
    "trec-dl-lenient": {"min_relevant_level": 1, "threshold": 0.6},
    "trec-dl-strict": {"min_relevant_level": 2, "threshold": 0.7},
}


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus: Optional[str] = None
    queries: Optional[str] = None
    run: Optional[str] = None
    qrels: Optional[str] = None
    output_dir: str = "prefilter-out"


@dataclass
class ScoringConfig:
    chunk_size: int = CHUNK_SIZE
    word_budget: Optional[int] = 300
    max_tokens: int = 1024
    temperature: float = 0.0
    retry_budget: int = 1
    # "retain": unscorable passages survive filtering; "strict": they are dropped.
    fallback: str = "retain"

    def __post_init__(self):
        if self.fallback not in ("retain", "strict"):
            raise ConfigError("scoring.fallback must be 'retain' or 'strict'")

    def template(self) -> ScoringPromptTemplate:
        return ScoringPromptTemplate(
            chunk_size=self.chunk_size,
            word_budget=self.word_budget,
            max_tokens=self.max_tokens,
            temperature=self.temperature,
        )


@dataclass
class ThresholdConfig:
    mode: str = "fixed"
    value: float = 0.3
    fraction: float = DEFAULT_SAMPLE_FRACTION
    seed: int = 0
    search: str = "grid"
    step: float = DEFAULT_GRID_STEP
    start: float = 0.5

    def __post_init__(self):
        if self.mode not in ("fixed", "calibrate"):
            raise ConfigError("threshold.mode must be 'fixed' or 'calibrate'")
        if self.search not in ("grid", "hill_climb"):
            raise ConfigError("threshold.search must be 'grid' or 'hill_climb'")
        Threshold(self.value)

    def search_strategy(self):
        if self.search == "grid":
            return GridSearch(self.step)
        return HillClimb(self.start, self.step)


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    min_relevant_level: int = 1
    backend: BackendConfig = field(default_factory=BackendConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    window: WindowConfig = field(default_factory=lambda: WindowConfig(WINDOW_SIZE, STEP_SIZE))
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    discard_mode: str = "append"
    top_n: int = TOP_N
    k: int = NDCG_CUTOFF
    workers: int = 1
    run_tag: str = "prefilter"
    # Also re-rank the unfiltered lists, for a with/without comparison.
    baseline_rerank: bool = False

    def __post_init__(self):
        if self.discard_mode not in ("append", "drop"):
            raise ConfigError("discard_mode must be 'append' or 'drop'")
        if self.top_n < 1 or self.k < 1 or self.workers < 1:
            raise ConfigError("top_n, k and workers must be positive")
        RelevancePolicy(self.min_relevant_level)

    @property
    def policy(self) -> RelevancePolicy:
        return RelevancePolicy(self.min_relevant_level)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        data = dict(data or {})
        nested = {
            "paths": Paths,
            "backend": BackendConfig,
            "scoring": ScoringConfig,
            "window": WindowConfig,
            "threshold": ThresholdConfig,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in nested:
                kwargs[key] = _build(nested[key], value, key)
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _build(klass, value, prefix):
    if value is None:
        value = {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"{prefix} must be a mapping")
    allowed = {f.name for f in fields(klass)}
    unknown = set(value) - allowed
    if unknown:
        raise ConfigError(f"unknown keys under {prefix}: {sorted(unknown)}")
    if klass is WindowConfig:
        value = {"window_size": WINDOW_SIZE, "step_size": STEP_SIZE, **value}
    try:
        return klass(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def set_dotted(data: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``"threshold.value=0.6"`` -> ``("threshold.value", 0.6)`` (YAML scalar typing)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def apply_preset(data: dict, name: str) -> None:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    data["min_relevant_level"] = p["min_relevant_level"]
    set_dotted(data, "threshold.value", p["threshold"])


def load_config_dict(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        loaded = yaml.safe_load(f)
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return loaded


def load_config(
    path: Optional[str] = None,
    overrides: Sequence[str] = (),
    preset: Optional[str] = None,
    dotted: Optional[Mapping[str, Any]] = None,
) -> PipelineConfig:
    """File, then preset, then explicit dotted values, then ``key=value`` overrides."""
    data = load_config_dict(path)
    if preset:
        apply_preset(data, preset)
    for key, value in (dotted or {}).items():
        if value is not None:
            set_dotted(data, key, value)
    for item in overrides:
        set_dotted(data, *parse_override(item))
    return PipelineConfig.from_dict(data)
