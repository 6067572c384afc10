"""TOML run configuration: a scenario, an optional one-parameter sweep and output settings."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .evolve import ConfigError, Scenario

SECTIONS = {"scenario", "sweep", "output"}
OUTPUT_KEYS = {"dir", "plots"}
SWEEP_KEYS = {"parameter", "values"}


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario
    sweep_parameter: str | None = None
    sweep_values: tuple[Any, ...] = ()
    out_dir: Path = Path("wqed_out")
    plots: bool = False
    source: str = "<memory>"

    def scenarios(self) -> list[Scenario]:
        if self.sweep_parameter is None:
            return [self.scenario]
        return [self.scenario.replace(**{self.sweep_parameter: v}) for v in self.sweep_values]


def parse_value(text: str) -> Any:
    """Interpret an override value as a TOML literal, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, _, val = item.partition("=")
    key = key.strip()
    if key.startswith("scenario."):
        key = key[len("scenario."):]
    return key, parse_value(val.strip())


def _scenario_from_table(table: dict[str, Any]) -> Scenario:
    table = dict(table)
    fields = {f.name for f in dataclasses.fields(Scenario)}
    unknown = set(table) - fields
    if unknown:
        raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
    preset = table.pop("preset", "custom")
    if "observables" in table:
        table["observables"] = tuple(table["observables"])
    try:
        return Scenario.from_preset(preset, **table)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def build_config(doc: dict[str, Any], overrides: Sequence[str] = (), source: str = "<memory>") -> RunConfig:
    unknown = set(doc) - SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    table = dict(doc.get("scenario", {}))
    for item in overrides:
        key, val = parse_override(item)
        table[key] = val
    scenario = _scenario_from_table(table)

    sweep = doc.get("sweep", {})
    if set(sweep) - SWEEP_KEYS:
        raise ConfigError(f"unknown sweep keys {sorted(set(sweep) - SWEEP_KEYS)}")
    param, values = sweep.get("parameter"), tuple(sweep.get("values", ()))
    if (param is None) != (not values):
        raise ConfigError("a sweep needs both 'parameter' and a non-empty 'values' list")
    if param is not None:
        if param not in {f.name for f in dataclasses.fields(Scenario)} or param == "preset":
            raise ConfigError(f"sweep parameter {param!r} is not a scenario field")
        if param in dict(parse_override(o) for o in overrides):
            raise ConfigError(f"{param} is both swept and overridden")
        for v in values:  # validate every point up front
            scenario.replace(**{param: v})

    output = doc.get("output", {})
    if set(output) - OUTPUT_KEYS:
        raise ConfigError(f"unknown output keys {sorted(set(output) - OUTPUT_KEYS)}")
    return RunConfig(scenario, param, values, Path(output.get("dir", "wqed_out")), bool(output.get("plots", False)),
                     source)


def load_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return build_config(doc, overrides, str(path))
