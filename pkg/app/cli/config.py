# app/cli/config.py
"""
Run configuration: plain `key = value` files with `#` comments and dotted section keys.

    seed = 3
    embed.widths = 3,16,32,32
    inner.steps = 10
    outer.lr = 0.007
    episodes.n_way = 2

Every key is validated by pydantic before any work starts. A written snapshot parses back to an
equal RunConfig.
"""
import os
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.embed.network import EmbedSpec
from app.errors import ConfigError
from app.inner.loop import InnerConfig
from app.outer.optimizer import OuterConfig

DEFAULT_SCALES = (1.0,)
IMAGE_CHANNELS = 3


class EmbedConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    widths: Tuple[int, ...] = (3, 16, 32, 32)
    kernel_sizes: Optional[Tuple[int, ...]] = None
    strides: Optional[Tuple[int, ...]] = None
    dilations: Optional[Tuple[int, ...]] = None
    final_relu: bool = False

    @field_validator("widths")
    @classmethod
    def _rgb_input(cls, widths: Tuple[int, ...]) -> Tuple[int, ...]:
        if widths and widths[0] != IMAGE_CHANNELS:
            raise ValueError(f"first width is the image channel count and must be {IMAGE_CHANNELS}, got {widths[0]}")
        return widths

    @model_validator(mode="after")
    def _buildable(self) -> "EmbedConfig":
        self.to_spec()
        return self

    def to_spec(self) -> EmbedSpec:
        return EmbedSpec(
            widths=self.widths,
            kernel_sizes=self.kernel_sizes or (),
            strides=self.strides or (),
            dilations=self.dilations or (),
            final_relu=self.final_relu,
        )


class EpisodeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_way: int = Field(2, ge=1)
    k_shot: int = Field(1, ge=1)
    img_size: int = Field(64, ge=1)
    n_base: int = Field(6, ge=1)
    n_novel: int = Field(2, ge=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(..., ge=0, lt=2 ** 64)
    out_dir: str = "runs/default"
    scales: Tuple[float, ...] = DEFAULT_SCALES
    n_eval_episodes: int = Field(500, ge=1)
    threads: Optional[int] = Field(None, ge=1)
    embed: EmbedConfig = EmbedConfig()
    inner: InnerConfig = InnerConfig()
    outer: OuterConfig = OuterConfig()
    episodes: EpisodeConfig = EpisodeConfig()

    @field_validator("scales")
    @classmethod
    def _positive_scales(cls, scales: Tuple[float, ...]) -> Tuple[float, ...]:
        if not scales:
            raise ValueError("at least one scale is required")
        if any(not s > 0 for s in scales):
            raise ValueError(f"scales must be positive, got {scales}")
        return scales

    @model_validator(mode="after")
    def _image_fits_network(self) -> "RunConfig":
        factor = self.embed.to_spec().downsample
        if self.episodes.img_size % factor:
            raise ValueError(
                f"episodes.img_size = {self.episodes.img_size} is not a multiple of the embed downsample factor {factor}"
            )
        return self

    def embed_spec(self) -> EmbedSpec:
        try:
            return self.embed.to_spec()
        except ValueError as e:
            raise ConfigError(f"embed: {e}") from e

    def with_overrides(self, **changes: Any) -> "RunConfig":
        """Validated copy; keys are dotted config keys, None values are ignored."""
        data = self.model_dump(mode="python")
        for key, value in changes.items():
            if value is None:
                continue
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return _validate(data, {})


_SECTIONS: Dict[str, Type[BaseModel]] = {
    "embed": EmbedConfig,
    "inner": InnerConfig,
    "outer": OuterConfig,
    "episodes": EpisodeConfig,
}

_LIST_KEYS = {
    "scales",
    "embed.widths",
    "embed.kernel_sizes",
    "embed.strides",
    "embed.dilations",
    "outer.loss_weights",
}

_OPTIONAL_KEYS = {
    "threads",
    "embed.kernel_sizes",
    "embed.strides",
    "embed.dilations",
    "outer.lr_decay_factor",
    "outer.lr_decay_at",
}


def known_keys() -> List[str]:
    """Every accepted key in snapshot order."""
    keys = []
    for name in RunConfig.model_fields:
        section = _SECTIONS.get(name)
        if section is None:
            keys.append(name)
        else:
            keys.extend(f"{name}.{field}" for field in section.model_fields)
    return keys


def _raw_value(key: str, text: str) -> Any:
    if text == "" and key in _OPTIONAL_KEYS:
        return None
    if key in _LIST_KEYS:
        return [part.strip() for part in text.split(",") if part.strip()]
    return text


def _validate(data: Dict[str, Any], lines: Dict[str, int]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        key = ".".join(str(part) for part in err["loc"] if not isinstance(part, int))
        where = f"line {lines[key]}: " if key in lines else ""
        raise ConfigError(f"{where}{key or 'config'}: {err['msg']}") from e


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    allowed = set(known_keys())
    data: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected `key = value`, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r} (first set on line {lines[key]})")
        lines[key] = lineno
        node = data
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _raw_value(key, value)
    try:
        return _validate(data, lines)
    except ConfigError as e:
        raise ConfigError(f"{source}: {e}") from e.__cause__


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config_text(text, source=path)


def _format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key in known_keys():
        node: Any = cfg
        for part in key.split("."):
            node = getattr(node, part)
        lines.append(f"{key} = {_format_value(node)}")
    return "\n".join(lines) + "\n"


def write_config_snapshot(path: str, cfg: RunConfig) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# resolved run configuration\n")
        fh.write(format_config(cfg))


def parse_scales(text: str) -> Tuple[float, ...]:
    try:
        scales = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ConfigError(f"--scales must be comma-separated numbers, got {text!r}") from e
    if not scales or any(s <= 0 for s in scales):
        raise ConfigError(f"--scales needs at least one positive scale, got {text!r}")
    return scales


def parse_step_range(text: str) -> List[int]:
    """'A..B' -> [A, A+1, ..., B]."""
    try:
        lo, hi = (int(part) for part in text.split(".."))
    except ValueError as e:
        raise ConfigError(f"--sweep-steps must look like A..B, got {text!r}") from e
    if lo < 0 or hi < lo:
        raise ConfigError(f"--sweep-steps needs 0 <= A <= B, got {text!r}")
    return list(range(lo, hi + 1))
