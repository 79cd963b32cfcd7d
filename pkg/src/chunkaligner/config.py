"""Run configuration: one INI file with ``[task]``, ``[model]``, ``[train]``, ``[decode]`` and ``[paths]``.

Keys map one-to-one onto the dataclass fields; unknown keys are errors so a
typo never silently falls back to a default.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ARCHITECTURES, ModelConfig
from .synthdata import SynthTaskConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class DecodeConfig:
    beam_size: int = 1
    tau: float = 0.5
    max_symbols: int = 4

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")


@dataclass
class PathsConfig:
    data: str = "data"
    out: str = "runs/default"


@dataclass
class RunConfig:
    task: SynthTaskConfig = field(default_factory=SynthTaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    dataset_sizes: tuple[int, int, int] = (2000, 200, 200)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        arch = self.train.architecture
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {arch!r}")
        if self.model.architecture != arch:
            raise ConfigError(f"[model] architecture {self.model.architecture!r} differs from [train] {arch!r}")
        if arch == "chunkwise" and self.train.chunk_len < 2:
            raise ConfigError("chunkwise training needs chunk_len >= 2")
        if self.model.vocab_size != self.task.model_vocab_size:
            raise ConfigError(
                f"[model] vocab_size {self.model.vocab_size} != task vocabulary + 2 = {self.task.model_vocab_size}"
            )
        if self.model.feature_dim != self.task.feature_dim or self.model.frame_reduction != self.task.frame_reduction:
            raise ConfigError("[model] feature_dim/frame_reduction must match [task]")
        if min(self.dataset_sizes) < 0 or len(self.dataset_sizes) != 3:
            raise ConfigError("dataset_sizes needs three nonnegative counts")

    def with_overrides(self, **kw) -> RunConfig:
        """Apply CLI-style overrides (arch, seed, chunk_size, tau, beam, delay_frames, steps, out)."""
        task = dataclasses.asdict(self.task)
        model = dataclasses.asdict(self.model)
        train = dataclasses.asdict(self.train)
        decode = dataclasses.asdict(self.decode)
        paths = dataclasses.asdict(self.paths)
        if kw.get("arch") is not None:
            model["architecture"] = train["architecture"] = kw["arch"]
        if kw.get("seed") is not None:
            task["seed"] = model["seed"] = train["seed"] = kw["seed"]
        if kw.get("chunk_size") is not None:
            train["chunk_len"] = task["chunk_len"] = kw["chunk_size"]
            if model["chunk_period"]:
                model["chunk_period"] = kw["chunk_size"]
        if kw.get("tau") is not None:
            decode["tau"] = train["tau"] = kw["tau"]
        if kw.get("beam") is not None:
            decode["beam_size"] = kw["beam"]
        if kw.get("delay_frames") is not None:
            train["delay_frames"] = kw["delay_frames"]
        if kw.get("steps") is not None:
            train["steps"] = kw["steps"]
        if kw.get("out") is not None:
            paths["out"] = kw["out"]
        try:
            return RunConfig(
                SynthTaskConfig(**task),
                ModelConfig(**model),
                TrainConfig(**train),
                DecodeConfig(**decode),
                PathsConfig(**paths),
                self.dataset_sizes,
            )
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e


def default_run_config(architecture: str = "chunkwise") -> RunConfig:
    task = SynthTaskConfig()
    model = ModelConfig(
        vocab_size=task.model_vocab_size,
        feature_dim=task.feature_dim,
        frame_reduction=task.frame_reduction,
        architecture=architecture,
    )
    return RunConfig(task, model, TrainConfig(architecture=architecture))


# ---------------------------------------------------------------- INI I/O


def _coerce(raw: str, hint, section: str, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.strip().lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw.strip()
        if typing.get_origin(hint) is tuple:
            return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from e
    raise ConfigError(f"[{section}] {key}: unsupported type {hint}")


def _section(parser: configparser.ConfigParser, name: str, cls, base):
    values = dataclasses.asdict(base)
    if parser.has_section(name):
        hints = typing.get_type_hints(cls)
        for key, raw in parser.items(name):
            if key not in hints:
                raise ConfigError(f"[{name}] unknown key {key!r}")
            values[key] = _coerce(raw, hints[key], name, key)
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


SECTIONS = ("task", "model", "train", "decode", "paths")


def parse_run_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from e
    extra = set(parser.sections()) - set(SECTIONS) - {"run"}
    if extra:
        raise ConfigError(f"unknown section(s) {sorted(extra)}")
    task = _section(parser, "task", SynthTaskConfig, SynthTaskConfig())
    arch = parser.get("train", "architecture", fallback=None) or parser.get("model", "architecture", fallback="chunkwise")
    base_model = ModelConfig(
        vocab_size=task.model_vocab_size,
        feature_dim=task.feature_dim,
        frame_reduction=task.frame_reduction,
        architecture=arch,
    )
    model = _section(parser, "model", ModelConfig, base_model)
    train = _section(parser, "train", TrainConfig, TrainConfig(architecture=arch))
    decode = _section(parser, "decode", DecodeConfig, DecodeConfig(tau=train.tau))
    paths = _section(parser, "paths", PathsConfig, PathsConfig())
    sizes = (2000, 200, 200)
    if parser.has_option("run", "dataset_sizes"):
        sizes = _coerce(parser.get("run", "dataset_sizes"), tuple[int, int, int], "run", "dataset_sizes")
    return RunConfig(task, model, train, decode, paths, sizes)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return default_run_config()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    return parse_run_config(path.read_text())


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_run_config(cfg: RunConfig) -> str:
    """INI text that :func:`parse_run_config` maps back to an equal ``RunConfig``."""
    parser = configparser.ConfigParser(interpolation=None)
    for name in SECTIONS:
        parser[name] = {k: _fmt(v) for k, v in dataclasses.asdict(getattr(cfg, name)).items()}
    parser["run"] = {"dataset_sizes": _fmt(cfg.dataset_sizes)}
    from io import StringIO

    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
