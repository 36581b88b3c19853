"""YAML run configuration.

A config has up to five sections, each optional and each field defaulted::

    dataset:   generator settings (DatasetConfig)
    model:     widths, strides, shift_fraction, kernel, bn_eps, bn_momentum
    train:     optimiser, schedule, sampling, method (TrainConfig)
    pipeline:  preset, modalities, seed, per-stage train overrides
    eval:      test clip spec, checkpoints to evaluate

Unknown keys and ill-typed values are errors that carry the line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import net
from .modality import CHANNELS
from .sampling import SamplingSpec, parse_test_spec
from .synthvid import DatasetConfig
from .train import TrainConfig

SECTIONS = ("dataset", "model", "train", "pipeline", "eval")
MODEL_KEYS = ("widths", "strides", "shift_fraction", "kernel", "bn_eps", "bn_momentum")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


@dataclass
class PipelineConfig:
    preset: str = "solo"
    modalities: tuple[str, ...] = ("RGB", "Flow", "Diff")
    seed: int = 0
    # stage number ("1", "2", "3") -> train-field overrides for that stage
    stages: dict = field(default_factory=dict)


@dataclass
class EvalConfig:
    spec: str = "dense:1,uniform:2"
    checkpoints: tuple[str, ...] = ()


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def head(self) -> str:
        return "softmax" if self.dataset.mode == "single" else "sigmoid"

    def model_spec(self, modality: str = "RGB") -> net.ModelSpec:
        return net.ModelSpec(CHANNELS[modality], self.train.sampling.n_in, self.dataset.n_cls,
                             head=self.head, **self.model)

    def stage_configs(self) -> dict[str, TrainConfig]:
        return {k: self.train.replace(**v) for k, v in self.pipeline.stages.items()}

    def test_clips(self) -> tuple[int, int]:
        return parse_test_spec(self.eval.spec)


# --------------------------------------------------------------------------- parsing

def _line(node) -> int:
    return node.start_mark.line + 1


def _mapping(node, what, src) -> dict:
    """Key -> (value node, key line); rejects non-mappings and duplicate keys."""
    if isinstance(node, yaml.ScalarNode) and node.tag == "tag:yaml.org,2002:null":
        return {}
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{what} must be a mapping", _line(node), src)
    out = {}
    for knode, vnode in node.value:
        if not isinstance(knode, yaml.ScalarNode):
            raise ConfigError(f"keys in {what} must be plain names", _line(knode), src)
        key = str(knode.value)
        if key in out:
            raise ConfigError(f"duplicate key {key!r} in {what}", _line(knode), src)
        out[key] = (vnode, _line(knode))
    return out


def _construct(node):
    loader = yaml.SafeLoader("")
    try:
        return loader.construct_object(node, deep=True)
    finally:
        loader.dispose()


def _coerce(value, default, name, line, src):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true/false, got {value!r}", line, src)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer, got {value!r}", line, src)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}", line, src)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} must be a string, got {value!r}", line, src)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list, got {value!r}", line, src)
        return tuple(value)
    return value


def _fields(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _section_kwargs(node, defaults: dict, section: str, src, skip=()) -> dict:
    kw = {}
    for key, (vnode, line) in _mapping(node, f"section {section!r}", src).items():
        if key not in defaults or key in skip:
            raise ConfigError(f"unknown key {key!r} in section {section!r}", line, src)
        if key == "sampling":
            sdef = _fields(SamplingSpec)
            kw[key] = SamplingSpec(**_section_kwargs(vnode, sdef, "train.sampling", src))
            continue
        kw[key] = _coerce(_construct(vnode), defaults[key], f"{section}.{key}", line, src)
    return kw


def _build(cls, kw, section, line, src):
    try:
        return cls(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {section}: {exc}", line, src) from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if root is None:
        return RunConfig()
    sections = _mapping(root, "config", source)
    for key, (_, line) in sections.items():
        if key not in SECTIONS:
            raise ConfigError(f"unknown section {key!r} (expected one of {', '.join(SECTIONS)})", line, source)
    cfg = RunConfig()

    if "dataset" in sections:
        node, line = sections["dataset"]
        kw = _section_kwargs(node, _fields(DatasetConfig), "dataset", source)
        cfg.dataset = _build(DatasetConfig, kw, "dataset", line, source)
        try:
            cfg.dataset.validate()
        except ValueError as exc:
            raise ConfigError(f"invalid dataset: {exc}", line, source) from None

    if "model" in sections:
        node, line = sections["model"]
        mdef = {k: v for k, v in _fields(net.ModelSpec).items() if k in MODEL_KEYS}
        cfg.model = _section_kwargs(node, mdef, "model", source)

    if "train" in sections:
        node, line = sections["train"]
        cfg.train = _build(TrainConfig, _section_kwargs(node, _fields(TrainConfig), "train", source),
                           "train", line, source)

    if "pipeline" in sections:
        node, line = sections["pipeline"]
        entries = _mapping(node, "section 'pipeline'", source)
        kw = {}
        pdef = _fields(PipelineConfig)
        for key, (vnode, kline) in entries.items():
            if key not in pdef:
                raise ConfigError(f"unknown key {key!r} in section 'pipeline'", kline, source)
            if key == "stages":
                stages = {}
                tdef = {k: v for k, v in _fields(TrainConfig).items() if k not in ("sampling", "method")}
                for sid, (snode, sline) in _mapping(vnode, "pipeline.stages", source).items():
                    if sid not in ("1", "2", "3"):
                        raise ConfigError(f"stage ids are 1, 2 or 3, got {sid!r}", sline, source)
                    stages[sid] = _section_kwargs(snode, tdef, f"pipeline.stages.{sid}", source)
                kw[key] = stages
            else:
                kw[key] = _coerce(_construct(vnode), pdef[key], f"pipeline.{key}", kline, source)
        cfg.pipeline = PipelineConfig(**kw)
        if cfg.pipeline.preset not in ("solo", "ensemble"):
            raise ConfigError(f"pipeline.preset must be 'solo' or 'ensemble', got {cfg.pipeline.preset!r}",
                              entries["preset"][1], source)
        bad = [m for m in cfg.pipeline.modalities if m not in CHANNELS]
        if bad:
            raise ConfigError(f"unknown modalities {bad}", entries["modalities"][1], source)

    if "eval" in sections:
        node, line = sections["eval"]
        ekw = _section_kwargs(node, _fields(EvalConfig), "eval", source)
        cfg.eval = EvalConfig(**ekw)
        try:
            parse_test_spec(cfg.eval.spec)
        except ValueError as exc:
            raise ConfigError(str(exc), line, source) from None

    # cross-section checks
    try:
        cfg.model_spec()
        cfg.train.sampling.validate(cfg.dataset.t_total - 5 if _uses_stacks(cfg) else cfg.dataset.t_total)
        cfg.stage_configs()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"inconsistent config: {exc}", None, source) from None
    return cfg


def _uses_stacks(cfg: RunConfig) -> bool:
    return any(m != "RGB" for m in cfg.pipeline.modalities)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", None, str(path))
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    """Round-trippable YAML with every field spelled out."""
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {k: plain(v) for k, v in dataclasses.asdict(obj).items()}
        if isinstance(obj, dict):
            return {k: plain(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [plain(v) for v in obj]
        return obj
    model = {k: v for k, v in _fields(net.ModelSpec).items() if k in MODEL_KEYS}
    model.update(cfg.model)
    doc = {"dataset": plain(cfg.dataset), "model": plain(model), "train": plain(cfg.train),
           "pipeline": plain(cfg.pipeline), "eval": plain(cfg.eval)}
    return yaml.safe_dump(doc, sort_keys=False)
