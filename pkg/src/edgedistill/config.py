"""Experiment configuration: one TOML file, one section per pipeline stage.

Unknown keys and mistyped values raise :class:`ConfigurationError` naming
``section.key``.  Stage seeds left unset inherit ``run.seed``.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .diffusion import DiffusionConfig
from .distiller import TrainConfig
from .errors import ConfigurationError
from .retrieval import EvalConfig

ABLATION_MASKS = (
    "mse_only",
    "plus_contrastive",
    "plus_contrastive_diversity",
    "edge_plus_caption_synthesis",
)


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"


@dataclass
class CorpusSection:
    kind: str = "toy"
    manifest: str = ""
    n_images: int = 256
    image_size: int = 32
    captions_per_image: int = 5
    grid: int = 3
    jitter: int = 1
    background: float = 0.0
    radius_scale: float = 1.0
    seed: int | None = None

    def validate(self, name: str):
        kinds = ("toy", "manifest", "none") if name == "source" else ("toy", "manifest")
        if self.kind not in kinds:
            raise ConfigurationError(f"{name}.kind must be one of {kinds}")
        if not 0.0 <= self.background <= 1.0:
            raise ConfigurationError(f"{name}.background must lie in [0, 1]")
        if not 0.25 <= self.radius_scale <= 2.0:
            raise ConfigurationError(f"{name}.radius_scale must lie in [0.25, 2]")
        if self.kind == "manifest" and not self.manifest:
            raise ConfigurationError(f"{name}.manifest is required when kind = 'manifest'")
        if self.n_images < 1:
            raise ConfigurationError(f"{name}.n_images must be positive")


@dataclass
class PretrainSection:
    epochs: int = 400
    learning_rate: float = 1e-3
    batch_size: int = 32
    checkpoint: str = ""
    # projection-head fit on clean target latents after pretraining
    head_steps: int = 500
    head_learning_rate: float = 1e-2
    head_batch_size: int = 64
    seed: int | None = None

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("pretrain.epochs and pretrain.batch_size must be positive")
        if self.head_steps < 0:
            raise ConfigurationError("pretrain.head_steps must be non-negative")
        if self.head_batch_size < 2:
            raise ConfigurationError("pretrain.head_batch_size must be >= 2")


@dataclass
class SynthesisSection:
    pair_count: int = 100
    cpi: int = 2
    sampler_steps: int = 0
    batch_size: int = 64
    strategy: str = "post"
    seed: int | None = None

    def validate(self):
        if self.pair_count < 1 or self.cpi < 1:
            raise ConfigurationError("synthesis.pair_count and synthesis.cpi must be positive")
        if self.pair_count % self.cpi:
            raise ConfigurationError("synthesis.pair_count must be divisible by synthesis.cpi")
        if self.strategy not in ("post", "pre"):
            raise ConfigurationError("synthesis.strategy must be 'post' or 'pre'")


@dataclass
class CaptionerSection:
    kind: str = "template"
    endpoint: str = ""
    prompt: str = "llava_style"
    retries: int = 2
    timeout: float = 30.0
    workers: int = 4

    def validate(self):
        if self.kind not in ("template", "mllm"):
            raise ConfigurationError("captioner.kind must be 'template' or 'mllm'")
        from .captioning import PROMPT_TEMPLATES

        if self.prompt not in PROMPT_TEMPLATES:
            raise ConfigurationError(f"captioner.prompt must be one of {sorted(PROMPT_TEMPLATES)}")


@dataclass
class AblationSection:
    masks: tuple[str, ...] = ABLATION_MASKS

    def validate(self):
        bad = [m for m in self.masks if m not in ABLATION_MASKS]
        if bad:
            raise ConfigurationError(f"ablation.masks: unknown masks {bad}; allowed {ABLATION_MASKS}")
        if not self.masks:
            raise ConfigurationError("ablation.masks must not be empty")


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    validation: CorpusSection = field(
        default_factory=lambda: CorpusSection(n_images=100, captions_per_image=1)
    )
    # corpus the generator is pretrained on; kind "none" means the target corpus
    source: CorpusSection = field(default_factory=lambda: CorpusSection(kind="none"))
    model: DiffusionConfig = field(default_factory=DiffusionConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    captioner: CaptionerSection = field(default_factory=CaptionerSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationSection = field(default_factory=AblationSection)
    # seeds explicitly given in the file; others follow run.seed
    explicit_seeds: set[str] = field(default_factory=set, repr=False)

    def validate(self) -> "ExperimentConfig":
        self.corpus.validate("corpus")
        self.validation.validate("validation")
        self.source.validate("source")
        self.model.validate()
        self.pretrain.validate()
        self.train.validate()
        self.synthesis.validate()
        self.captioner.validate()
        self.eval.validate()
        self.ablation.validate()
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Set ``run.seed`` and every stage seed that was not pinned explicitly."""
        self.run.seed = seed
        if "corpus" not in self.explicit_seeds:
            self.corpus.seed = seed
        if "validation" not in self.explicit_seeds:
            self.validation.seed = seed + 1
        if "source" not in self.explicit_seeds:
            self.source.seed = seed + 100
        if "pretrain" not in self.explicit_seeds:
            self.pretrain.seed = seed
        if "train" not in self.explicit_seeds:
            self.train.seed = seed
        if "synthesis" not in self.explicit_seeds:
            self.synthesis.seed = seed
        return self

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "explicit_seeds":
                continue
            out[f.name] = dataclasses.asdict(getattr(self, f.name))
        return out


SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "explicit_seeds"}


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where}: expected a list, got {value!r}")
        return tuple(_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
    if origin is dict or hint is dict:
        if not isinstance(value, dict):
            raise ConfigurationError(f"{where}: expected a table, got {value!r}")
        return value
    return value


def _build_section(cls, data: dict, name: str, base=None):
    if not isinstance(data, dict):
        raise ConfigurationError(f"[{name}] must be a table")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"{name}.{key}: unknown field")
    kwargs = dataclasses.asdict(base) if base is not None else {}
    for key, value in data.items():
        kwargs[key] = _coerce(value, hints[key], f"{name}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{name}]: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for section, value in data.items():
        if section not in SECTIONS:
            raise ConfigurationError(f"{section}: unknown section")
        current = getattr(cfg, section)
        built = _build_section(type(current), value, section, base=current)
        setattr(cfg, section, built)
        if isinstance(value, dict) and "seed" in value and section != "run":
            cfg.explicit_seeds.add(section)
    cfg.with_seed(cfg.run.seed)
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def parse_override(text: str) -> tuple[str, str, Any]:
    """``section.key=value`` with the value parsed as a TOML literal."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigurationError(f"override {text!r} must look like section.key=value")
    dotted, raw = text.split("=", 1)
    section, key = dotted.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    for item in overrides:
        section, key, value = parse_override(item)
        data.setdefault(section, {})[key] = value
    return data


def load_config_with_overrides(path: str | Path | None, overrides: list[str] = ()) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    return config_from_dict(apply_overrides(data, list(overrides)))
