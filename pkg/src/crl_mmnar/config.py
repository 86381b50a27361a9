"""Run configuration: a sectioned INI file, parsed strictly and hashed canonically."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .datagen import ConfigError, GenConfig
from .model import ModelConfig
from .outcome import DEFAULT_KAPPA_GRID


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-6
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 200
    patience: int = 30
    split: tuple[float, ...] = (0.8, 0.1, 0.1)
    split_seed: int = 0


@dataclass(frozen=True)
class RectifierConfig:
    enabled: bool = True
    kappa_grid: tuple[float, ...] = DEFAULT_KAPPA_GRID
    min_support: int = 20
    fold_seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    dataset_path: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rectifier: RectifierConfig = field(default_factory=RectifierConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    support_floor: int = 30

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def hash(self) -> str:
        """sha256 over canonical JSON of every setting (seeds excluded: they vary per run)."""
        d = self.to_dict()
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def with_value(self, dotted: str, raw: str) -> "RunConfig":
        """Copy with one ``section.key`` replaced by a value parsed from text."""
        section, _, key = dotted.partition(".")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(dumps(self))
        if not parser.has_section(section) or key not in parser[section]:
            raise ConfigError(f"unknown setting {dotted!r}")
        parser[section][key] = raw
        return _from_parser(parser)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


# ------------------------------------------------------------------ text codecs

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


def _mapping(s: str, cast=float) -> dict:
    out = {}
    for item in s.split(","):
        if item.strip():
            k, sep, v = item.partition(":")
            if not sep:
                raise ConfigError(f"expected key:value, got {item.strip()!r}")
            out[k.strip()] = cast(v)
    return out


def _effects(s: str) -> dict:
    out: dict = {}
    for item in s.split(";"):
        if item.strip():
            parts = [p.strip() for p in item.split(":")]
            if len(parts) != 3:
                raise ConfigError(f"expected pattern:task:effect, got {item.strip()!r}")
            out.setdefault(parts[0], {})[parts[1]] = float(parts[2])
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, dict):
        if v and all(isinstance(x, dict) for x in v.values()):
            return "; ".join(f"{p}:{t}:{e!r}" for p, d in v.items() for t, e in d.items())
        return ", ".join(f"{k}:{x!r}" if isinstance(x, float) else f"{k}:{x}" for k, x in v.items())
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parser_for(default):
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, str):
        return str.strip
    if isinstance(default, tuple):
        if default and isinstance(default[0], str):
            return _strs
        if default and isinstance(default[0], int):
            return _ints
        return _floats
    raise TypeError(type(default))


# section name -> (attribute on RunConfig or None for top level, keys)
_DATA_MAPS = {"feature_dims": lambda s: _mapping(s, int), "miss_intercept": _mapping,
              "miss_severity": _mapping, "miss_content": _mapping, "outcome_intercept": _mapping,
              "pattern_effects": _effects}
_MODEL_KEYS = ("embed_dim", "encoder_hidden", "z_dim", "miss_hidden", "heads", "head_hidden", "dropout")
_LOSS_KEYS = ("miss_weight", "rec_weight", "cont_weight", "temperature", "task_weights", "focal_gamma")
_ABLATION_KEYS = ("mmnar_fusion", "reconstruction")

_HEADER = """\
# Run configuration. One section per module; unknown keys are rejected.
# Maps are written key:value, pattern effects pattern:task:effect separated by ';'.
"""


def dumps(cfg: RunConfig) -> str:
    d, m = cfg.data, cfg.model
    lines = [_HEADER, "[data]"]
    lines.append(f"path = {cfg.dataset_path}")
    for f in fields(GenConfig):
        lines.append(f"{f.name} = {_fmt(getattr(d, f.name))}")
    lines.append("\n[model]")
    lines += [f"{k} = {_fmt(getattr(m, k))}" for k in _MODEL_KEYS]
    lines.append("\n[loss]")
    for k in _LOSS_KEYS:
        v = getattr(m, k)
        if k == "task_weights":
            v = dict(zip(d.tasks, v))
        lines.append(f"{k} = {_fmt(v)}")
    lines.append("\n[optim]")
    lines += [f"{f.name} = {_fmt(getattr(cfg.optim, f.name))}" for f in fields(OptimConfig)]
    lines.append("\n[train]")
    lines += [f"{f.name} = {_fmt(getattr(cfg.train, f.name))}" for f in fields(TrainConfig)]
    lines.append("\n[rectifier]")
    lines += [f"{f.name} = {_fmt(getattr(cfg.rectifier, f.name))}" for f in fields(RectifierConfig)
              if f.name != "enabled"]
    lines.append("\n[ablation]")
    lines += [f"{k} = {_fmt(getattr(m, k))}" for k in _ABLATION_KEYS]
    lines.append(f"rectifier = {_fmt(cfg.rectifier.enabled)}")
    lines.append("\n[run]")
    lines.append(f"seeds = {_fmt(cfg.seeds)}")
    lines.append(f"support_floor = {cfg.support_floor}")
    return "\n".join(lines) + "\n"


def _take(section, key, default, parse=None):
    if key not in section:
        return default
    try:
        return (parse or _parser_for(default))(section[key])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from None


def _from_parser(p: configparser.ConfigParser) -> RunConfig:
    allowed = {
        "data": {"path"} | {f.name for f in fields(GenConfig)},
        "model": set(_MODEL_KEYS), "loss": set(_LOSS_KEYS),
        "optim": {f.name for f in fields(OptimConfig)}, "train": {f.name for f in fields(TrainConfig)},
        "rectifier": {f.name for f in fields(RectifierConfig)} - {"enabled"},
        "ablation": set(_ABLATION_KEYS) | {"rectifier"}, "run": {"seeds", "support_floor"},
    }
    for name in p.sections():
        if name not in allowed:
            raise ConfigError(f"unknown section [{name}]")
        unknown = set(p[name]) - allowed[name]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    empty = configparser.SectionProxy(p, "__empty__")
    sec = {n: (p[n] if p.has_section(n) else empty) for n in allowed}

    base = GenConfig()
    gen_kwargs = {}
    for f in fields(GenConfig):
        default = getattr(base, f.name)
        gen_kwargs[f.name] = _take(sec["data"], f.name, default, _DATA_MAPS.get(f.name))
    data = GenConfig(**gen_kwargs)
    data.validate()

    mbase = ModelConfig()
    mk = {k: _take(sec["model"], k, getattr(mbase, k)) for k in _MODEL_KEYS}
    for k in _LOSS_KEYS:
        if k == "task_weights":
            if "task_weights" in sec["loss"]:
                tw = _take(sec["loss"], k, None, _mapping)
                missing = [t for t in data.tasks if t not in tw]
                if missing or set(tw) - set(data.tasks):
                    raise ConfigError(f"task_weights must name exactly the tasks {list(data.tasks)}")
                mk[k] = tuple(tw[t] for t in data.tasks)
            elif len(data.tasks) == len(mbase.task_weights):
                mk[k] = mbase.task_weights
            else:
                mk[k] = tuple(1.0 for _ in data.tasks)
        else:
            mk[k] = _take(sec["loss"], k, getattr(mbase, k))
    for k in _ABLATION_KEYS:
        mk[k] = _take(sec["ablation"], k, getattr(mbase, k))
    model = ModelConfig(**mk)
    if model.temperature <= 0:
        raise ConfigError("temperature must be positive")
    if not 0 <= model.dropout < 1:
        raise ConfigError("dropout must lie in [0, 1)")

    optim = OptimConfig(**{f.name: _take(sec["optim"], f.name, getattr(OptimConfig(), f.name))
                           for f in fields(OptimConfig)})
    train = TrainConfig(**{f.name: _take(sec["train"], f.name, getattr(TrainConfig(), f.name))
                           for f in fields(TrainConfig)})
    if len(train.split) != 3 or abs(sum(train.split) - 1.0) > 1e-9:
        raise ConfigError("train.split must be three fractions summing to 1")
    rb = RectifierConfig()
    rect = RectifierConfig(enabled=_take(sec["ablation"], "rectifier", rb.enabled),
                           kappa_grid=_take(sec["rectifier"], "kappa_grid", rb.kappa_grid),
                           min_support=_take(sec["rectifier"], "min_support", rb.min_support),
                           fold_seed=_take(sec["rectifier"], "fold_seed", rb.fold_seed))
    seeds = _take(sec["run"], "seeds", RunConfig().seeds)
    if not seeds:
        raise ConfigError("run.seeds must list at least one seed")
    return RunConfig(data, _take(sec["data"], "path", ""), model, optim, train, rect, seeds,
                     _take(sec["run"], "support_floor", 30))


def loads(text: str) -> RunConfig:
    p = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    p.optionxform = str
    try:
        p.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    return _from_parser(p)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def with_ablation(cfg: RunConfig, mmnar_fusion: bool, reconstruction: bool, rectifier: bool) -> RunConfig:
    return replace(cfg, model=replace(cfg.model, mmnar_fusion=mmnar_fusion, reconstruction=reconstruction),
                   rectifier=replace(cfg.rectifier, enabled=rectifier))
