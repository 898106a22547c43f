"""Engine configuration: defaults < config file < command-line flags."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .backend import PROMPT_TEMPLATES
from .errors import ConfigError
from .evaluation import DEFAULT_RELAXED_TOLERANCE
from .knowledge_base import DEFAULT_MIN_PARAGRAPH_CHARS
from .pipeline import FallbackPolicy, PipelineConfig
from .ranking import RankingMode, SRetPolicy
from .retrieval import RetrievalMode

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class EngineConfig:
    kb_path: str | None = None
    backend: str | None = None
    judge: str = "heuristic"
    top_n: int = 5
    retrieval_mode: str = RetrievalMode.COMBINED.value
    ranking_mode: str = RankingMode.RET_REL_ANS.value
    s_ret_policy: str = SRetPolicy.AUTO.value
    relaxed_tolerance: float = DEFAULT_RELAXED_TOLERANCE
    normalize_dates: bool = False
    parallelism: int = 1
    fallback: str = FallbackPolicy.DIRECT_ANSWER.value
    prompt_template_id: str = "infoseek"
    prompt_templates: dict[str, str] = field(default_factory=lambda: dict(PROMPT_TEMPLATES))
    min_paragraph_chars: int = DEFAULT_MIN_PARAGRAPH_CHARS
    max_paragraphs_per_entry: int | None = None
    skip_failed_paragraphs: bool = True
    renormalize_reflection: bool = False
    random_seeds: int = 5
    seed: int = 0

    def validate(self) -> "EngineConfig":
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.relaxed_tolerance < 0:
            raise ConfigError("relaxed_tolerance must be >= 0")
        if self.random_seeds < 1:
            raise ConfigError("random_seeds must be >= 1")
        for name, enum_cls in (
            ("retrieval_mode", RetrievalMode),
            ("ranking_mode", RankingMode),
            ("s_ret_policy", SRetPolicy),
            ("fallback", FallbackPolicy),
        ):
            value = getattr(self, name)
            if value not in {m.value for m in enum_cls}:
                choices = ", ".join(m.value for m in enum_cls)
                raise ConfigError(f"{name}={value!r} is not one of: {choices}")
        if self.prompt_template_id not in self.prompt_templates:
            raise ConfigError(f"unknown prompt_template_id {self.prompt_template_id!r}")
        if self.kb_path is not None and not Path(self.kb_path).exists():
            raise ConfigError(f"kb_path does not exist: {self.kb_path}")
        if self.backend is not None and not self.backend.startswith(("http://", "https://")):
            p = self.backend.removeprefix("fixture:")
            if not Path(p).exists():
                raise ConfigError(f"backend fixture does not exist: {p}")
        if not (self.judge == "heuristic" or self.judge.startswith("remote:")):
            raise ConfigError(f"judge must be 'heuristic' or 'remote:<url>', got {self.judge!r}")
        return self

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            top_n=self.top_n,
            parallelism=self.parallelism,
            fallback=self.fallback,
            prompt_template_id=self.prompt_template_id,
            ranking_mode=self.ranking_mode,
            retrieval_mode=self.retrieval_mode,
            s_ret_policy=self.s_ret_policy,
            max_paragraphs_per_entry=self.max_paragraphs_per_entry,
            skip_failed_paragraphs=self.skip_failed_paragraphs,
            renormalize_reflection=self.renormalize_reflection,
            seed=self.seed,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


_FIELDS = {f.name for f in fields(EngineConfig)}


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a table/object")
    unknown = sorted(set(data) - _FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return data


def resolve_config(file_path: str | Path | None, overrides: dict[str, Any]) -> EngineConfig:
    """Merge defaults, file values and non-None overrides, then validate."""
    values: dict[str, Any] = {}
    if file_path is not None:
        values.update(read_config_file(file_path))
    values.update({k: v for k, v in overrides.items() if v is not None and k in _FIELDS})
    try:
        cfg = EngineConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()
