"""INI-style run configuration: ``[model] [train] [loss_weights] [noise] [data] [eval]``.

Every field of the underlying dataclasses is addressable; absent keys take
their defaults and unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from lir.imaging import NoiseSpec
from lir.losses import LossWeights
from lir.models import ConfigError, ModelConfig
from lir.training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    noisy_dir: str = ""
    clean_dir: str = ""
    # alternative: one directory split into two disjoint pools, first pool corrupted per [noise]
    dataset_dir: str = ""
    split_ratio: float = 0.5
    split_seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    clean_dir: str = ""
    sigmas: tuple = (25.0,)
    seed: int = 0
    metric_mode: str = "float"


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def model(self) -> ModelConfig:
        return self.train.model

    @property
    def weights(self) -> LossWeights:
        return self.train.weights


# --- value codecs --------------------------------------------------------------

def _fmt_levels(levels) -> str:
    return ",".join(f"{k}:{w:g}" for k, w in levels)


def _parse_levels(text: str):
    out = []
    for part in text.split(","):
        k, w = part.split(":")
        out.append((int(k), float(w)))
    return tuple(out)


def _fmt_floats(vals) -> str:
    return ",".join(f"{v:g}" for v in vals)


def _parse_floats(text: str):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SPECIAL = {
    ("train", "blur_levels"): (_fmt_levels, _parse_levels),
    ("train", "blur_stds"): (lambda v: "" if v is None else _fmt_floats(v),
                             lambda t: None if not t.strip() else _parse_floats(t)),
    ("noise", "sigma_range"): (_fmt_floats, _parse_floats),
    ("eval", "sigmas"): (_fmt_floats, _parse_floats),
}

SKIP = {("train", "weights"), ("train", "model")}


def _section_fields(name, obj):
    return [f for f in dataclasses.fields(obj) if (name, f.name) not in SKIP]


def _encode(section, f, value) -> str:
    if (section, f.name) in SPECIAL:
        return SPECIAL[(section, f.name)][0](value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _decode(section, f, text: str, default):
    if (section, f.name) in SPECIAL:
        return SPECIAL[(section, f.name)][1](text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _sections(cfg: RunConfig):
    return {
        "model": cfg.train.model,
        "train": cfg.train,
        "loss_weights": cfg.train.weights,
        "noise": cfg.noise,
        "data": cfg.data,
        "eval": cfg.eval,
    }


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for name, obj in _sections(cfg).items():
        lines.append(f"[{name}]")
        for f in _section_fields(name, obj):
            lines.append(f"{f.name} = {_encode(name, f, getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    defaults = _sections(RunConfig())
    unknown = [s for s in parser.sections() if s not in defaults]
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {unknown}")
    values = {}
    for name, obj in defaults.items():
        fields = {f.name: f for f in _section_fields(name, obj)}
        kw = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in fields:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
                try:
                    kw[key] = _decode(name, fields[key], raw, getattr(obj, key))
                except ValueError as exc:
                    raise ConfigError(f"{source}: bad value for [{name}] {key}: {exc}") from exc
        values[name] = kw
    try:
        model = ModelConfig(**values["model"])
        weights = LossWeights(**values["loss_weights"])
        train = TrainConfig(model=model, weights=weights, **values["train"])
        noise = NoiseSpec(**values["noise"])
        data = DataConfig(**values["data"])
        ev = EvalConfig(**values["eval"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if not 0 < data.split_ratio < 1:
        raise ConfigError(f"{source}: split_ratio must lie in (0, 1)")
    if ev.metric_mode not in ("float", "uint8"):
        raise ConfigError(f"{source}: metric_mode must be 'float' or 'uint8'")
    return RunConfig(train=train, noise=noise, data=data, eval=ev)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))
