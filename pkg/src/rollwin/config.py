"""One structured text file (key = value sections) drives every command.

Sections map onto the typed configs: [stream] for the window/cache geometry,
[model] for denoiser dims, [task] for the synthetic dynamics, [lab] for
training budgets, [run] for seeds and sweep lists.  Unknown sections or keys
are configuration errors, never silently ignored.  Every command writes the
fully resolved config next to its outputs so a run is reproducible from its
own artifacts.
"""

from __future__ import annotations

import configparser
import dataclasses
import io as _stdio
from dataclasses import dataclass

from .denoiser import ModelConfig
from .distill import LabConfig
from .errors import ConfigError
from .schedule import StreamConfig


@dataclass(frozen=True)
class TaskConfig:
    """Synthetic data generator knobs."""

    omega_base: float = 1.0
    cond_gain: float = 1.5
    noise_floor: float = 0.02
    rho: float = 0.9
    identity_drift: float = 0.001


@dataclass(frozen=True)
class RunConfig:
    """Seeds and sweep shapes shared by the command-line entry points."""

    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    grid_l: tuple = (1, 2, 4, 8)
    grid_n: tuple = (1, 2, 4, 8)
    eval_clips: int = 4
    eval_frames: int = 96
    total_frames: int = 0
    latency_steps: int = 150

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("run.seeds must not be empty")
        if not self.grid_l or not self.grid_n:
            raise ConfigError("run.grid_l and run.grid_n must not be empty")
        if self.eval_clips < 1 or self.eval_frames < 1:
            raise ConfigError("run.eval_clips and run.eval_frames must be >= 1")
        if self.total_frames < 0:
            raise ConfigError("run.total_frames must be >= 0 (0 = automatic)")
        if self.latency_steps < 4:
            raise ConfigError("run.latency_steps must be >= 4")


@dataclass(frozen=True)
class FullConfig:
    stream: StreamConfig
    model: ModelConfig
    task: TaskConfig
    lab: LabConfig
    run: RunConfig


# [model] keys exclude latent_dim (tied to the stream) and injection layers
# (always all layers from the command line).
_MODEL_KEYS = ("n_layers", "head_dim", "ff_dim", "time_feat_dim", "cond_dim",
               "rope_base")

_STREAM_KEYS = tuple(f.name for f in dataclasses.fields(StreamConfig))
_TASK_KEYS = tuple(f.name for f in dataclasses.fields(TaskConfig))
_LAB_KEYS = tuple(f.name for f in dataclasses.fields(LabConfig))
_RUN_KEYS = tuple(f.name for f in dataclasses.fields(RunConfig))

_SECTIONS = ("stream", "model", "task", "lab", "run")

_TRUE = frozenset(("true", "1", "yes", "on"))
_FALSE = frozenset(("false", "0", "no", "off"))


def _parse_value(raw: str, template, where: str):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"expected a boolean, got {raw!r}")
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            toks = raw.split()
            if not toks:
                raise ValueError("expected at least one integer")
            return tuple(int(t) for t in toks)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported value type")


def _section_kwargs(cp, section: str, keys, defaults, where_prefix: str):
    out = {}
    if not cp.has_section(section):
        return out
    for key in cp.options(section):
        if key not in keys:
            raise ConfigError(f"[{section}] has unknown key {key!r}")
        template = getattr(defaults, key)
        out[key] = _parse_value(cp.get(section, key), template,
                                f"[{section}] {key}")
    return out


def _fresh_parser() -> configparser.RawConfigParser:
    cp = configparser.RawConfigParser()
    cp.optionxform = str
    return cp


def parse_config(text: str) -> FullConfig:
    cp = _fresh_parser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
    stream = StreamConfig(**_section_kwargs(
        cp, "stream", _STREAM_KEYS, StreamConfig(), "stream"))
    model_kwargs = _section_kwargs(
        cp, "model", _MODEL_KEYS, ModelConfig(), "model")
    model = ModelConfig(latent_dim=stream.latent_dim, **model_kwargs)
    task = TaskConfig(**_section_kwargs(
        cp, "task", _TASK_KEYS, TaskConfig(), "task"))
    lab = LabConfig(**_section_kwargs(cp, "lab", _LAB_KEYS, LabConfig(), "lab"))
    run = RunConfig(**_section_kwargs(cp, "run", _RUN_KEYS, RunConfig(), "run"))
    return FullConfig(stream=stream, model=model, task=task, lab=lab, run=run)


def load_config(path=None) -> FullConfig:
    """Load a config file; no path means all defaults."""
    if path is None:
        return parse_config("")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def resolved_text(full: FullConfig) -> str:
    """Deterministic INI dump: fixed section and key order, no timestamps."""
    buf = _stdio.StringIO()
    parts = (
        ("stream", full.stream, _STREAM_KEYS),
        ("model", full.model, _MODEL_KEYS),
        ("task", full.task, _TASK_KEYS),
        ("lab", full.lab, _LAB_KEYS),
        ("run", full.run, _RUN_KEYS),
    )
    for name, obj, keys in parts:
        buf.write(f"[{name}]\n")
        for key in keys:
            buf.write(f"{key} = {_format_value(getattr(obj, key))}\n")
        buf.write("\n")
    return buf.getvalue()


def write_resolved(full: FullConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(resolved_text(full))
