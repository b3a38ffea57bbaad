"""Experiment configuration: dataclass schema, YAML parse/serialize, named presets.

A config file is a YAML mapping whose top-level keys mirror
:class:`ExperimentConfig`. Nested sections (``system``, ``train``, ``net``,
``ic``, ``seeds``, ``eval``, ``render``, ``corr``) map onto their own
dataclasses. Every key is optional; omitted keys take their defaults.
Unknown keys and mistyped values are rejected with the offending key path and
line number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .. import __version__
from ..icgen import FAMILIES, OOD_FAMILIES, IcParams
from ..net import NetConfig
from ..systems import DEFAULT_DIFFUSION, DEFAULT_PARAMS, SystemSpec
from ..train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class SystemSection:
    kind: str = "gs"
    d_u: float = DEFAULT_DIFFUSION
    d_v: float = DEFAULT_DIFFUSION
    params: dict = field(default_factory=dict)

    def spec(self) -> SystemSpec:
        return SystemSpec(self.kind, self.d_u, self.d_v, self.params)


@dataclass
class TrainSection:
    B: int = 32
    b: int = 4
    K: typing.Optional[int] = None
    eta0: float = 1e-3
    lr_decay: float = 0.85
    budget_start: int = 500
    budget_end: int = 100
    milestone_interval: typing.Optional[int] = None
    n_fail: float = 2.0
    outer_epochs: int = 2
    shuffle: bool = False
    val_reduce: str = "mean"


@dataclass
class SeedSection:
    ics: int = 0
    val: int = 1
    weights: int = 0
    eval: int = 2


@dataclass
class IcSection:
    train_family: str = "single_gaussian"
    params: IcParams = field(default_factory=IcParams)


@dataclass
class EvalSection:
    n_seeds: int = 10
    families: list = field(default_factory=lambda: list(FAMILIES))
    reduce: str = "max"


@dataclass
class RenderSection:
    lo: float = 0.0
    hi: float = 1.0
    every: int = 1
    palette: bool = False


@dataclass
class CorrSection:
    n_fail_values: list = field(default_factory=lambda: [1.0, 2.0, 4.0, math.inf])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    K: int = 8
    probe_families: list = field(default_factory=lambda: list(OOD_FAMILIES))
    probe_per_family: int = 1


@dataclass
class ExperimentConfig:
    system: SystemSection = field(default_factory=SystemSection)
    method: str = "ddol_art"
    grid: int = 128
    dt_ref: float = 1e-4
    dt_op: float = 0.05
    T: float = 5.0
    T_test: float = 10.0
    train: TrainSection = field(default_factory=TrainSection)
    net: NetConfig = field(default_factory=NetConfig)
    ic: IcSection = field(default_factory=IcSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    eval: EvalSection = field(default_factory=EvalSection)
    render: RenderSection = field(default_factory=RenderSection)
    corr: CorrSection = field(default_factory=CorrSection)
    out: str = "runs/default"

    def __post_init__(self):
        self.method = self.method.lower().replace("-", "_")
        self.validate()

    def validate(self) -> None:
        try:
            self.system.spec()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.grid < 4:
            raise ConfigError("grid must be >= 4")
        if self.T_test <= 0 or abs(self.T_test / self.dt_op - round(self.T_test / self.dt_op)) > 1e-9 * self.T_test / self.dt_op:
            raise ConfigError(f"T_test={self.T_test} is not a positive multiple of dt_op={self.dt_op}")
        for fam in [self.ic.train_family, *self.eval.families, *self.corr.probe_families]:
            if fam not in FAMILIES:
                raise ConfigError(f"unknown IC family {fam!r}")
        if self.eval.n_seeds < 1:
            raise ConfigError("eval.n_seeds must be >= 1")
        if self.eval.reduce not in ("max", "mean"):
            raise ConfigError("eval.reduce must be max or mean")
        if not self.render.lo < self.render.hi:
            raise ConfigError("render.lo must be below render.hi")
        if self.render.every < 1:
            raise ConfigError("render.every must be >= 1")
        c = self.corr
        if not c.n_fail_values or not all(isinstance(v, (int, float)) and v >= 1 for v in c.n_fail_values):
            raise ConfigError("corr.n_fail_values must be numbers >= 1 (.inf disables early exit)")
        if not c.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in c.seeds):
            raise ConfigError("corr.seeds must be a nonempty list of integers")
        if c.K < 1 or c.probe_per_family < 1:
            raise ConfigError("corr.K and corr.probe_per_family must be >= 1")
        c.n_fail_values = [float(v) for v in c.n_fail_values]

    def train_config(self, **overrides) -> TrainConfig:
        t = dataclasses.asdict(self.train)
        t.update(overrides)
        t.setdefault("seed", self.seeds.weights)
        return TrainConfig(method=t.pop("method", self.method), dt_op=self.dt_op, T=self.T, **t)

    @property
    def steps_test(self) -> int:
        return int(round(self.T_test / self.dt_op))

    def to_dict(self) -> dict:
        return _to_plain(self)

    def hash(self) -> str:
        """Stable short hash of the full configuration (output directory excluded)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def provenance(self) -> str:
        return f"config={self.hash()} version={__version__}"


# ----------------------------------------------------------------------------
# Plain-data conversion.

def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _to_plain(v) for k, v in obj.items()}
    return obj


def serialize(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)


def _line(node) -> int:
    return node.start_mark.line + 1


def _scalar(node, path):
    if not isinstance(node, yaml.ScalarNode):
        raise ConfigError(f"{path} (line {_line(node)}): expected a scalar")
    return yaml.safe_load(yaml.serialize(node))


def _coerce(node, tp, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if isinstance(node, yaml.ScalarNode) and _scalar(node, path) is None:
            return None
        return _coerce(node, args[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, node, path)
    if tp in (list, tuple) or origin in (list, tuple):
        if not isinstance(node, yaml.SequenceNode):
            raise ConfigError(f"{path} (line {_line(node)}): expected a list")
        items = [_scalar(v, f"{path}[{i}]") for i, v in enumerate(node.value)]
        if origin is tuple or tp is tuple:
            args = typing.get_args(tp)
            if args and args[-1] is not Ellipsis and len(args) != len(items):
                raise ConfigError(f"{path} (line {_line(node)}): expected {len(args)} entries")
            if args:
                items = [_check_scalar(v, args[0], f"{path}[{i}]", node) for i, v in enumerate(items)]
            return tuple(items)
        return items
    if tp is dict or origin is dict:
        if not isinstance(node, yaml.MappingNode):
            raise ConfigError(f"{path} (line {_line(node)}): expected a mapping")
        return {_scalar(k, path): _check_scalar(_scalar(v, f"{path}.{k.value}"), float, f"{path}.{k.value}", v)
                for k, v in node.value}
    return _check_scalar(_scalar(node, path), tp, path, node)


def _check_scalar(value, tp, path, node):
    where = f"{path} (line {_line(node)})"
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-3) as strings.
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, node, path):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{path or 'config'} (line {_line(node)}): expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key_node, value_node in node.value:
        key = _scalar(key_node, path)
        full = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(f"unknown key {full!r} at line {_line(key_node)}")
        if key in kwargs:
            raise ConfigError(f"duplicate key {full!r} at line {_line(key_node)}")
        kwargs[key] = _coerce(value_node, hints[key], full)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'} (line {_line(node)}): {exc}") from None


def parse(text: str) -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from None
    if node is None:
        return ExperimentConfig()
    return _build(ExperimentConfig, node, "")


def load(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse(p.read_text())


def merge(base: ExperimentConfig, text: str) -> ExperimentConfig:
    """Overlay a YAML document onto ``base`` (keys in ``text`` win, recursively)."""
    overlay = yaml.safe_load(text) or {}
    merged = _deep_merge(base.to_dict(), overlay)
    return parse(yaml.safe_dump(merged, sort_keys=False))


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


# ----------------------------------------------------------------------------
# Presets.

# Selected (dt_op, B, T) per system and method at full scale.
PAPER_SELECTIONS = {
    ("fn", "nlol"): (0.02, 64, 5.0),
    ("gs", "nlol"): (0.02, 64, 5.0),
    ("lo", "nlol"): (0.02, 64, 5.0),
    ("fn", "ddol"): (0.10, 64, 5.0),
    ("gs", "ddol"): (0.10, 64, 5.0),
    ("lo", "ddol"): (0.02, 64, 5.0),
    ("fn", "ddol_art"): (0.10, 64, 5.0),
    ("gs", "ddol_art"): (0.05, 32, 5.0),
    ("lo", "ddol_art"): (0.005, 64, 5.0),
}


def _preset_dicts() -> dict[str, dict]:
    out = {}
    for (kind, method), (dt, B, T) in PAPER_SELECTIONS.items():
        name = f"{kind}-{method.replace('_', '-')}"
        out[name] = {"system": {"kind": kind}, "method": method, "grid": 128, "dt_op": dt, "T": T,
                     "T_test": 10.0, "train": {"B": B}, "out": f"runs/{name}"}
        out[f"desk-{name}"] = {"system": {"kind": kind}, "method": method, "grid": 32, "dt_op": 0.01,
                               "T": 0.5, "T_test": 2.0,
                               "train": {"B": 8, "b": 4, "budget_start": 50, "budget_end": 10},
                               "out": f"runs/desk-{name}"}
    for kind in DEFAULT_PARAMS:
        out[f"corr-{kind}"] = {"system": {"kind": kind}, "method": "ddol_art", "grid": 128, "dt_op": 0.01,
                               "T": 1.0, "T_test": 1.0, "train": {"B": 32}, "corr": {"K": 8},
                               "out": f"runs/corr-{kind}"}
        out[f"desk-corr-{kind}"] = {"system": {"kind": kind}, "method": "ddol_art", "grid": 16, "dt_op": 0.01,
                                    "T": 0.2, "T_test": 0.2,
                                    "train": {"B": 8, "b": 4, "budget_start": 10, "budget_end": 2},
                                    "corr": {"K": 2, "seeds": [0, 1], "n_fail_values": [1.0, 2.0, math.inf]},
                                    "out": f"runs/desk-corr-{kind}"}
    return out


PRESETS = _preset_dicts()


def preset(name: str) -> ExperimentConfig:
    try:
        d = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
    return parse(yaml.safe_dump(d, sort_keys=False))
