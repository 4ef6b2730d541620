"""Experiment specifications and their flat key-value config file format.

The file format is INI-style: `[section]` headers, one `key = value` pair per
line, `#` comments. Scalars are written with `repr` so floats round-trip
exactly; lists are comma-separated; booleans are `true`/`false`. The full
grammar is the field table below — every spec field appears in exactly one
section, and `parse_spec(emit_spec(s)) == s` for any spec `s`.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

from .model import ModelConfig
from .odeint import SolverConfig
from .training import DEFAULT_LR_GRID


@dataclass
class ExperimentSpec:
    command: str = "ensemble"
    # model
    d: int = 8
    n_blocks: int = 2
    architecture: str = "node"
    rhs_variant: str = "basic"
    mhsa_time_dependent: bool = False
    t_final: float = 1.0
    # solver
    atol: float = 1e-5
    rtol: float = 1e-5
    h_init: float = 0.1
    h_min: float = 1e-6
    h_max: float = 1.0
    safety: float = 0.9
    max_steps: int = 10_000
    # training
    lr_grid: tuple[float, ...] = tuple(DEFAULT_LR_GRID)
    seeds_per_lr: int = 12
    max_epochs: int = 400
    lam: float = 0.0
    drop_k: int = 12
    learning_rate: float = 1e-3
    seed: int = 0
    # grids for compare / reg-sweep
    d_list: tuple[int, ...] = (4, 6, 8, 10)
    n_list: tuple[int, ...] = (1, 2, 3, 4)
    lambda_grid: tuple[float, ...] = ()
    # run orchestration
    max_len: int = 6
    out_dir: str = "out"
    workers: int = 1
    seed_base: int = 0
    # residual probe
    checkpoint: str = ""
    bits: str = ""
    step_counts: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128)

    def model_config(self, *, d: int | None = None, n_blocks: int | None = None,
                     architecture: str | None = None,
                     rhs_variant: str | None = None,
                     mhsa_time_dependent: bool | None = None) -> ModelConfig:
        return ModelConfig(
            d=self.d if d is None else d,
            n_blocks=self.n_blocks if n_blocks is None else n_blocks,
            architecture=self.architecture if architecture is None else architecture,
            rhs_variant=self.rhs_variant if rhs_variant is None else rhs_variant,
            mhsa_time_dependent=(self.mhsa_time_dependent if mhsa_time_dependent is None
                                 else mhsa_time_dependent),
            t_final=self.t_final,
            solver=SolverConfig(
                atol=self.atol, rtol=self.rtol, h_init=self.h_init, h_min=self.h_min,
                h_max=self.h_max, safety=self.safety, max_steps=self.max_steps,
            ),
        )


# (section, field name, kind); kind drives serialization both ways.
_FIELD_TABLE: list[tuple[str, str, str]] = [
    ("experiment", "command", "str"),
    ("model", "d", "int"),
    ("model", "n_blocks", "int"),
    ("model", "architecture", "str"),
    ("model", "rhs_variant", "str"),
    ("model", "mhsa_time_dependent", "bool"),
    ("model", "t_final", "float"),
    ("solver", "atol", "float"),
    ("solver", "rtol", "float"),
    ("solver", "h_init", "float"),
    ("solver", "h_min", "float"),
    ("solver", "h_max", "float"),
    ("solver", "safety", "float"),
    ("solver", "max_steps", "int"),
    ("train", "lr_grid", "floats"),
    ("train", "seeds_per_lr", "int"),
    ("train", "max_epochs", "int"),
    ("train", "lam", "float"),
    ("train", "drop_k", "int"),
    ("train", "learning_rate", "float"),
    ("train", "seed", "int"),
    ("sweep", "d_list", "ints"),
    ("sweep", "n_list", "ints"),
    ("sweep", "lambda_grid", "floats"),
    ("run", "max_len", "int"),
    ("run", "out_dir", "str"),
    ("run", "workers", "int"),
    ("run", "seed_base", "int"),
    ("probe", "checkpoint", "str"),
    ("probe", "bits", "str"),
    ("probe", "step_counts", "ints"),
]


def _to_text(value, kind: str) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("floats", "ints"):
        return ", ".join(repr(v) for v in value)
    if kind == "float":
        return repr(value)
    return str(value)


def _from_text(text: str, kind: str):
    text = text.strip()
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind == "floats":
        return tuple(float(p) for p in text.split(",") if p.strip()) if text else ()
    if kind == "ints":
        return tuple(int(p) for p in text.split(",") if p.strip()) if text else ()
    return text


def emit_spec(spec: ExperimentSpec) -> str:
    lines: list[str] = []
    current = None
    for section, name, kind in _FIELD_TABLE:
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{name} = {_to_text(getattr(spec, name), kind)}")
    lines.append("")
    return "\n".join(lines)


def parse_spec(text: str) -> ExperimentSpec:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    known = {f.name for f in fields(ExperimentSpec)}
    values = {}
    for section, name, kind in _FIELD_TABLE:
        if cp.has_option(section, name):
            values[name] = _from_text(cp.get(section, name), kind)
    for section in cp.sections():
        for key in cp.options(section):
            if key not in known:
                raise ValueError(f"unknown config key {key!r} in section [{section}]")
    return ExperimentSpec(**values)


def load_spec(path: str) -> ExperimentSpec:
    with open(path, encoding="utf-8") as f:
        return parse_spec(f.read())


def save_spec(spec: ExperimentSpec, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(emit_spec(spec))
