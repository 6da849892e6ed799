"""Experiment config files: sectioned TOML with a fixed key schema.

Every recognised key maps onto one field of the run description. Unknown keys,
wrong types and invalid values are reported with the dotted field name and the
line it came from.
"""

from __future__ import annotations

import itertools
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from hflsim.attacks import SuiteConfig
from hflsim.dpcore import DpPolicy
from hflsim.engine import DataSpec, EngineSpec, ExperimentConfig, ModelSpec, TopoSpec
from hflsim.errors import ConfigurationError
from hflsim.numkit import ClipMode

REQUIRED = ("engine.rounds",)


class ConfigError(ConfigurationError):
    """Invalid config file; carries the offending dotted key and line when known."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = []
        if key:
            where.append(f"field {key}")
        if line:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class SweepSpec:
    """Grid for the ``sweep`` subcommand; an empty axis keeps the base value."""

    placements: tuple[str, ...] = ()
    zones: tuple[int, ...] = ()
    z: tuple[float, ...] = ()
    seeds: tuple[int, ...] = ()


@dataclass(frozen=True)
class RunSpec:
    experiment: ExperimentConfig
    mode: str = "hier"
    attack: SuiteConfig = field(default_factory=SuiteConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def sweep_configs(self) -> list[ExperimentConfig]:
        base = self.experiment
        axes = (
            self.sweep.placements or (base.dp.placement,),
            self.sweep.zones or (base.topo.zones,),
            self.sweep.z or (base.dp.z,),
            self.sweep.seeds or (base.seed,),
        )
        return [
            base.with_updates(dp={"placement": p, "z": z}, topo={"zones": s}, seed=seed)
            for p, s, z, seed in itertools.product(*axes)
        ]


# --- value coercion -------------------------------------------------------------------


def _int(v: Any) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError("expected an integer")
    return v


def _float(v: Any) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _str(v: Any) -> str:
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _onoff(v: Any) -> bool:
    if isinstance(v, bool):
        return v
    if v in ("on", "off"):
        return v == "on"
    raise TypeError("expected 'on' or 'off'")


def _bound(v: Any) -> float | tuple[float, ...]:
    if isinstance(v, list):
        return tuple(_float(b) for b in v)
    return _float(v)


def _list(item: Callable[[Any], Any]) -> Callable[[Any], tuple]:
    def conv(v: Any) -> tuple:
        if not isinstance(v, list):
            raise TypeError("expected a list")
        return tuple(item(x) for x in v)

    return conv


# section -> key -> (converter, target field)
SCHEMA: dict[str, dict[str, tuple[Callable[[Any], Any], str]]] = {
    "model": {"kind": (_str, "kind"), "hidden_dim": (_int, "hidden_dim")},
    "data": {
        "kind": (_str, "kind"),
        "classes": (_int, "classes"),
        "dim": (_int, "dim"),
        "per_class": (_int, "per_class"),
        "separation": (_float, "separation"),
        "partition": (_str, "partition"),
        "dirichlet_alpha": (_float, "dirichlet_alpha"),
        "val_fraction": (_float, "val_fraction"),
        "path": (_str, "path"),
    },
    "topo": {
        "clients": (_int, "clients"),
        "zones": (_int, "zones"),
        "sampling": (_str, "sampling"),
        "q": (_float, "q"),
        "k": (_int, "k"),
    },
    "dp": {
        "placement": (_str, "placement"),
        "alpha": (_float, "alpha"),
        "beta": (_float, "beta"),
        "z": (_float, "z"),
        "delta": (_float, "delta"),
        "clip_mode": (_str, "clip_mode"),
        "clip_bound": (_bound, "clip_bound"),
        "user_cap": (_float, "user_cap"),
        "w_min": (_float, "w_min"),
    },
    "engine": {
        "rounds": (_int, "rounds"),
        "local_epochs": (_int, "local_epochs"),
        "client_lr": (_float, "client_lr"),
        "server_lr": (_float, "server_lr"),
        "batch_size": (_int, "batch_size"),
        "zone_combine": (_str, "zone_combine"),
        "secure_agg": (_onoff, "secure_agg"),
        "denominator": (_str, "denominator"),
        "frac_bits": (_int, "frac_bits"),
        "mode": (_str, "mode"),
    },
    "attack": {
        "z": (_float, "z"),
        "clip_bound": (_float, "clip_bound"),
        "targets": (_int, "targets"),
        "model": (_str, "model_kind"),
        "hidden_dim": (_int, "hidden_dim"),
        "classes": (_int, "classes"),
        "dim": (_int, "dim"),
        "separation": (_float, "separation"),
        "client_lr": (_float, "client_lr"),
        "iterations": (_int, "iterations"),
        "lr": (_float, "attack_lr"),
        "restarts": (_int, "restarts"),
    },
    "sweep": {
        "placements": (_list(_str), "placements"),
        "zones": (_list(_int), "zones"),
        "z": (_list(_float), "z"),
        "seeds": (_list(_int), "seeds"),
    },
}
TOP_LEVEL = {"seed": _int}


def _line_of(text: str, section: Optional[str], key: str) -> Optional[int]:
    """1-based line on which ``key`` is assigned inside ``[section]`` (top level if None)."""
    current: Optional[str] = None
    assign = re.compile(rf"^\s*{re.escape(key)}\s*=")
    header = re.compile(r"^\s*\[([^\]]+)\]")
    for no, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and assign.match(line):
            return no
    if section is not None:
        for no, line in enumerate(text.splitlines(), 1):
            m = header.match(line)
            if m and m.group(1).strip() == section:
                return no
    return None


_TOML_LINE = re.compile(r"line (\d+)")


def parse_config(text: str) -> RunSpec:
    """Parse and validate config text."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _TOML_LINE.search(str(exc))
        raise ConfigError(f"malformed config: {exc}", line=int(m.group(1)) if m else None) from None

    values: dict[str, dict[str, Any]] = {name: {} for name in SCHEMA}
    seed = 0
    for name, content in raw.items():
        if name in TOP_LEVEL:
            try:
                seed = TOP_LEVEL[name](content)
            except TypeError as exc:
                raise ConfigError(str(exc), name, _line_of(text, None, name)) from None
            continue
        if name not in SCHEMA or not isinstance(content, dict):
            raise ConfigError("unknown key or section", name, _line_of(text, None, name) or _line_of(text, name, ""))
        for key, value in content.items():
            dotted = f"{name}.{key}"
            if key not in SCHEMA[name]:
                raise ConfigError("unknown key", dotted, _line_of(text, name, key))
            conv, target = SCHEMA[name][key]
            try:
                values[name][target] = conv(value)
            except TypeError as exc:
                raise ConfigError(f"{exc}, got {value!r}", dotted, _line_of(text, name, key)) from None

    for dotted in REQUIRED:
        section, key = dotted.split(".")
        if SCHEMA[section][key][1] not in values[section]:
            raise ConfigError(f"missing required key {dotted}", dotted)

    def build(section: str, factory: Callable[..., Any], kwargs: dict) -> Any:
        try:
            return factory(**kwargs)
        except ConfigurationError as exc:
            key = _blame(section, str(exc))
            raise ConfigError(str(exc), key, _line_of(text, section, key.split(".")[1]) if key else None) from None

    eng = dict(values["engine"])
    mode = eng.pop("mode", "hier")
    if mode not in ("flat", "hier"):
        raise ConfigError("engine.mode must be 'flat' or 'hier'", "engine.mode", _line_of(text, "engine", "mode"))
    topo = build("topo", TopoSpec, values["topo"])
    dpv = dict(values["dp"])
    clip_kwargs = {}
    if "clip_mode" in dpv:
        clip_kwargs["mode"] = dpv.pop("clip_mode")
    if "clip_bound" in dpv:
        clip_kwargs["bound"] = dpv.pop("clip_bound")
    clip = build("dp", ClipMode, clip_kwargs)
    try:
        q = topo.effective_q
    except ConfigurationError as exc:
        raise ConfigError(str(exc), "topo.k", _line_of(text, "topo", "sampling")) from None
    dp = build("dp", DpPolicy, {**dpv, "clip": clip, "q": q})
    exp = build(
        "engine",
        ExperimentConfig,
        {
            "model": build("model", ModelSpec, values["model"]),
            "data": build("data", DataSpec, values["data"]),
            "topo": topo,
            "dp": dp,
            "engine": build("engine", EngineSpec, eng),
            "seed": seed,
        },
    )
    attack = build("attack", SuiteConfig, {**values["attack"], "seed": seed})
    sweep = build("sweep", SweepSpec, values["sweep"])
    return RunSpec(exp, mode, attack, sweep)


def _blame(section: str, message: str) -> Optional[str]:
    """Best-effort dotted key named in a validation message."""
    for sec, keys in SCHEMA.items():
        for key in keys:
            if re.search(rf"\b{sec}\.{key}\b", message):
                return f"{sec}.{key}"
    for key in SCHEMA.get(section, {}):
        if re.search(rf"\b{key}\b", message):
            return f"{section}.{key}"
    return None


def load_config(path: str | Path) -> RunSpec:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


def config_to_dict(spec: RunSpec) -> dict:
    """Nested dict of every recognised key; unset optional keys are omitted."""
    exp = spec.experiment
    out: dict[str, Any] = {"seed": exp.seed}
    sources = {
        "model": exp.model,
        "data": exp.data,
        "topo": exp.topo,
        "dp": exp.dp,
        "engine": exp.engine,
        "attack": spec.attack,
        "sweep": spec.sweep,
    }
    for section, keys in SCHEMA.items():
        obj = sources[section]
        block: dict[str, Any] = {}
        for key, (_, target) in keys.items():
            if section == "dp" and target == "clip_mode":
                value: Any = exp.dp.clip.mode
            elif section == "dp" and target == "clip_bound":
                b = exp.dp.clip.bound
                value = list(b) if isinstance(b, tuple) else b
            elif section == "engine" and target == "mode":
                value = spec.mode
            elif section == "engine" and target == "secure_agg":
                value = "on" if exp.engine.secure_agg else "off"
            else:
                value = getattr(obj, target)
            if value is None:
                continue
            if isinstance(value, tuple):
                if not value:
                    continue
                value = list(value)
            block[key] = value
        if block:
            out[section] = block
    return out


def dump_config(spec: RunSpec) -> str:
    return tomli_w.dumps(config_to_dict(spec))
