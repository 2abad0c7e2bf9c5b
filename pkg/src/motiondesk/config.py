"""Application configuration: one TOML file drives every command.

The file mirrors :class:`AppConfig` section by section; unknown sections or
keys are rejected so typos fail loudly instead of silently running with
defaults. Every omitted key falls back to the documented default, which
makes a partial file (or none at all) a valid starting point. Relative
paths are resolved against the directory containing the config file so a
checked-in config works from any working directory.

``write_default_config`` emits a fully commented file; that file is the
schema reference.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .skeleton import Skeleton, default_rig
from .tokenizer import TokenizerConfig
from .vision import PerceiverConfig

CONFIG_FORMAT_VERSION = 1

SKELETONS: dict[str, Callable[[], Skeleton]] = {"desk5": default_rig}


class ConfigError(ValueError):
    """Raised for unreadable, unknown, or ill-typed configuration."""


@dataclass(frozen=True)
class LmArch:
    """Language-model architecture; the vocabulary size is supplied by the
    trained vocabulary at load time, so it is not part of the config."""

    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 96
    d_ff: int = 384
    max_context: int = 512
    k_text: int = 320


@dataclass(frozen=True)
class DecodingSpec:
    """Decoding knobs; the stop id is supplied by the trained vocabulary."""

    mode: str = "greedy"
    k: int = 10
    temperature: float = 1.0
    max_new_tokens: int = 192

    def __post_init__(self) -> None:
        if self.mode not in ("greedy", "topk"):
            raise ConfigError(f"unknown decoding mode {self.mode!r}")
        if self.k < 1 or self.temperature <= 0.0 or self.max_new_tokens < 1:
            raise ConfigError("decoding parameters out of range")


@dataclass(frozen=True)
class AppConfig:
    corpus_dir: Path = Path("artifacts/corpus")
    checkpoint_dir: Path = Path("artifacts/checkpoints")
    dataset_dir: Path = Path("artifacts/datasets")
    skeleton: str = "desk5"
    seed: int = 0
    fps: float = 20.0
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    lm: LmArch = field(default_factory=LmArch)
    vision: PerceiverConfig = field(default_factory=PerceiverConfig)
    decoding: DecodingSpec = field(default_factory=DecodingSpec)
    host: str = "127.0.0.1"
    port: int = 8707

    def __post_init__(self) -> None:
        if self.skeleton not in SKELETONS:
            known = ", ".join(sorted(SKELETONS))
            raise ConfigError(f"unknown skeleton {self.skeleton!r} (known: {known})")
        if not 0 < self.port < 65536:
            raise ConfigError(f"port {self.port} out of range")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")

    def rig(self) -> Skeleton:
        return SKELETONS[self.skeleton]()


_SECTIONS: dict[str, type] = {
    "tokenizer": TokenizerConfig,
    "lm": LmArch,
    "vision": PerceiverConfig,
    "decoding": DecodingSpec,
}
_PATH_KEYS = ("corpus_dir", "checkpoint_dir", "dataset_dir")
_TOP_KEYS = {
    "paths": _PATH_KEYS,
    "run": ("skeleton", "seed", "fps"),
    "service": ("host", "port"),
}


def _section(name: str, cls: type, table: dict) -> object:
    known = {f.name for f in dataclasses.fields(cls)}
    for key in table:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{name}] section: {exc}") from exc


def load_config(path: str | Path) -> AppConfig:
    """Parse a TOML file into an :class:`AppConfig`, resolving paths."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc

    version = doc.pop("format_version", CONFIG_FORMAT_VERSION)
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError(f"unsupported config format_version {version!r}")

    kwargs: dict = {}
    for section, keys in _TOP_KEYS.items():
        table = doc.pop(section, {})
        for key in table:
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
        kwargs.update(table)
    for section, cls in _SECTIONS.items():
        if section in doc:
            kwargs[section] = _section(section, cls, doc.pop(section))
    if doc:
        raise ConfigError(f"unknown config section {next(iter(doc))!r}")

    # Anchor every artifact path, given or defaulted, to the file's directory
    # so a checked-in config behaves the same from any working directory.
    base = path.resolve().parent
    for f in dataclasses.fields(AppConfig):
        if f.name in _PATH_KEYS:
            p = Path(kwargs[f.name]) if f.name in kwargs else f.default
            kwargs[f.name] = p if p.is_absolute() else base / p
    try:
        return AppConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def require_dirs(config: AppConfig, *names: str) -> None:
    """Fail fast when a command's read-role directories are missing."""
    for name in names:
        p: Path = getattr(config, name)
        if not p.is_dir():
            raise ConfigError(f"{name} {p} does not exist; run the producing step first")


DEFAULT_CONFIG_TOML = '''\
# Desk-scale motion stack configuration. Unknown keys are rejected; every
# key shown here may be omitted and takes the value shown.
format_version = 1

[paths]
# Resolved relative to this file. corpus_dir holds generated clips,
# checkpoint_dir trained weights and vocabularies, dataset_dir rendered
# training samples.
corpus_dir = "artifacts/corpus"
checkpoint_dir = "artifacts/checkpoints"
dataset_dir = "artifacts/datasets"

[run]
skeleton = "desk5"   # rig registry key; desk5 = pelvis plus two heel/toe chains
seed = 0             # global seed; fixed per run for reproducible artifacts
fps = 20.0           # frame rate of generated and decoded motion

[tokenizer]
n_joints = 5
codebook_size = 64   # codes per residual stage
code_dim = 64
n_quantizers = 2     # residual stages; token layers per timestep
downsample = 4       # frames per token timestep
hidden = 96
beta_commit = 0.25

[lm]
n_layers = 3
n_heads = 4
d_model = 96
d_ff = 384
max_context = 512    # longest rendered conversation, in tokens
k_text = 320         # text vocabulary size; at least 260 (byte alphabet plus specials)

[vision]
n_queries = 16       # resampled rows per clip; also the LM's visual row count
media_dim = 1024
inner_dim = 512
ff_mult = 4          # feed-forward width multiplier (inner_dim * ff_mult)
out_dim = 768
depth = 6
max_frames = 64
temporal_embeddings = true

[decoding]
mode = "greedy"      # "greedy" or "topk"
k = 10               # candidates kept in topk mode
temperature = 1.0
max_new_tokens = 192

[service]
host = "127.0.0.1"
port = 8707
'''


def write_default_config(path: str | Path) -> Path:
    """Write the commented default config; refuses to overwrite."""
    path = Path(path)
    if path.exists():
        raise ConfigError(f"{path} already exists")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(DEFAULT_CONFIG_TOML)
    return path
